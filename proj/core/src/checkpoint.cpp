#include <fstream>
#include <sstream>

#include "btok/binary_io.hpp"
#include "btok/trainer.hpp"

namespace btok {

namespace {

constexpr char kMagic[8] = {'B', 'T', 'O', 'K', 'C', 'K', 'P', 'T'};

struct Entry {
  std::string name;
  std::uint32_t dtype = 0;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

void write_model(std::ostream& os, const ModelConfig& m) {
  io::put<std::uint64_t>(os, static_cast<std::uint64_t>(m.vocab_size));
  io::put<std::uint64_t>(os, static_cast<std::uint64_t>(m.d_model));
  io::put<std::uint64_t>(os, static_cast<std::uint64_t>(m.n_layers));
  io::put<std::uint64_t>(os, static_cast<std::uint64_t>(m.n_heads));
  io::put<std::uint64_t>(os, static_cast<std::uint64_t>(m.max_seq_len));
  io::put<double>(os, m.mlp_ratio);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.dtype));
}

ModelConfig read_model(std::istream& is) {
  ModelConfig m;
  m.vocab_size = static_cast<Index>(io::get<std::uint64_t>(is, "model.vocab_size"));
  m.d_model = static_cast<Index>(io::get<std::uint64_t>(is, "model.d_model"));
  m.n_layers = static_cast<Index>(io::get<std::uint64_t>(is, "model.n_layers"));
  m.n_heads = static_cast<Index>(io::get<std::uint64_t>(is, "model.n_heads"));
  m.max_seq_len = static_cast<Index>(io::get<std::uint64_t>(is, "model.max_seq_len"));
  m.mlp_ratio = io::get<double>(is, "model.mlp_ratio");
  const auto dt = io::get<std::uint32_t>(is, "model.dtype");
  if (dt != static_cast<std::uint32_t>(DType::f32) && dt != static_cast<std::uint32_t>(DType::f64))
    throw FormatError("checkpoint: unknown model dtype tag");
  m.dtype = static_cast<DType>(dt);
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: stored model config is invalid: ") + e.what());
  }
  return m;
}

struct Header {
  CheckpointInfo info;
  bool has_optimizer = false;
  Index adam_steps = 0;
  std::vector<Entry> entries;
  std::streamoff data_begin = 0;
};

Header read_header(std::istream& is) {
  char magic[8];
  io::get_bytes(is, magic, sizeof magic, "magic");
  if (!std::equal(magic, magic + 8, kMagic)) throw FormatError("not a checkpoint file (bad magic)");
  Header h;
  h.info.version = io::get<std::uint32_t>(is, "version");
  if (h.info.version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(h.info.version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto dt = io::get<std::uint32_t>(is, "dtype");
  if (dt != static_cast<std::uint32_t>(DType::f32) && dt != static_cast<std::uint32_t>(DType::f64))
    throw FormatError("checkpoint: unknown dtype tag");
  h.info.dtype = static_cast<DType>(dt);
  h.info.model = read_model(is);
  h.info.step = static_cast<Index>(io::get<std::uint64_t>(is, "step"));
  const auto n_meta = io::get<std::uint32_t>(is, "metadata count");
  if (n_meta > 4096) throw FormatError("checkpoint: implausible metadata count");
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = io::get_string(is, "metadata key");
    h.info.metadata[k] = io::get_string(is, "metadata value");
  }
  h.has_optimizer = io::get<std::uint8_t>(is, "optimizer flag") != 0;
  h.adam_steps = static_cast<Index>(io::get<std::uint64_t>(is, "optimizer steps"));
  const auto n = io::get<std::uint32_t>(is, "tensor count");
  if (n > 1u << 20) throw FormatError("checkpoint: implausible tensor count");
  h.entries.resize(n);
  for (auto& e : h.entries) {
    e.name = io::get_string(is, "tensor name");
    e.dtype = io::get<std::uint32_t>(is, "tensor dtype");
    e.rows = io::get<std::uint64_t>(is, "tensor rows");
    e.cols = io::get<std::uint64_t>(is, "tensor cols");
    e.offset = io::get<std::uint64_t>(is, "tensor offset");
    e.nbytes = io::get<std::uint64_t>(is, "tensor nbytes");
    if (e.dtype != dt) throw FormatError("checkpoint: tensor " + e.name + " has a mixed dtype");
    const std::uint64_t scalar = dt == static_cast<std::uint32_t>(DType::f32) ? 4 : 8;
    if (e.rows * e.cols * scalar != e.nbytes) throw FormatError("checkpoint: tensor " + e.name + " size mismatch");
  }
  h.data_begin = is.tellg();
  return h;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  return is;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
  std::vector<std::pair<std::string, const Matrix<T>*>> tensors;
  ckpt.state.for_each([&](const std::string& n, const Matrix<T>& m) { tensors.emplace_back(n, &m); });
  if (ckpt.optimizer) {
    ckpt.optimizer->m.for_each([&](const std::string& n, const Matrix<T>& m) { tensors.emplace_back("adam.m." + n, &m); });
    ckpt.optimizer->v.for_each([&](const std::string& n, const Matrix<T>& m) { tensors.emplace_back("adam.v." + n, &m); });
  }

  std::ostringstream os(std::ios::binary);
  os.write(kMagic, sizeof kMagic);
  io::put<std::uint32_t>(os, kCheckpointVersion);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(dtype_of<T>()));
  write_model(os, ckpt.state.params.config);
  io::put<std::uint64_t>(os, static_cast<std::uint64_t>(ckpt.step));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    io::put_string(os, k);
    io::put_string(os, v);
  }
  io::put<std::uint8_t>(os, ckpt.optimizer ? 1 : 0);
  io::put<std::uint64_t>(os, static_cast<std::uint64_t>(ckpt.optimizer ? ckpt.optimizer->steps_taken : 0));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(m->size()) * sizeof(T);
    io::put_string(os, name);
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(dtype_of<T>()));
    io::put<std::uint64_t>(os, static_cast<std::uint64_t>(m->rows()));
    io::put<std::uint64_t>(os, static_cast<std::uint64_t>(m->cols()));
    io::put<std::uint64_t>(os, offset);
    io::put<std::uint64_t>(os, nbytes);
    offset += nbytes;
  }
  for (const auto& [name, m] : tensors) io::put_bytes(os, m->data(), static_cast<std::size_t>(m->size()) * sizeof(T));

  // Write to a sibling temp file and rename so a crash never leaves a torn checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    const std::string bytes = os.str();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  auto is = open_in(path);
  const Header h = read_header(is);
  if (h.info.dtype != dtype_of<T>())
    throw FormatError(std::string("checkpoint holds ") + dtype_name(h.info.dtype) + " tensors, requested " +
                      dtype_name(dtype_of<T>()));

  std::map<std::string, const Entry*> by_name;
  for (const auto& e : h.entries) by_name[e.name] = &e;

  Checkpoint<T> c;
  c.step = h.info.step;
  c.metadata = h.info.metadata;
  c.state.params = Parameters<T>::zeros(h.info.model);
  {
    auto it = by_name.find("btok.bank");
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor btok.bank");
    c.state.bank.rows = Matrix<T>::Zero(static_cast<Index>(it->second->rows), h.info.model.d_model);
  }
  if (h.has_optimizer) {
    c.optimizer.emplace();
    c.optimizer->m = ModelState<T>::zeros_like(c.state);
    c.optimizer->v = ModelState<T>::zeros_like(c.state);
    c.optimizer->steps_taken = h.adam_steps;
  }

  auto fill = [&](const std::string& name, Matrix<T>& m) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor " + name);
    const Entry& e = *it->second;
    if (static_cast<Index>(e.rows) != m.rows() || static_cast<Index>(e.cols) != m.cols())
      throw FormatError("checkpoint: tensor " + name + " has shape " + std::to_string(e.rows) + "x" +
                        std::to_string(e.cols) + ", expected " + std::to_string(m.rows()) + "x" +
                        std::to_string(m.cols()));
    is.clear();
    is.seekg(h.data_begin + static_cast<std::streamoff>(e.offset));
    io::get_bytes(is, m.data(), static_cast<std::size_t>(e.nbytes), name.c_str());
  };
  c.state.for_each(fill);
  if (c.optimizer) {
    c.optimizer->m.for_each([&](const std::string& n, Matrix<T>& m) { fill("adam.m." + n, m); });
    c.optimizer->v.for_each([&](const std::string& n, Matrix<T>& m) { fill("adam.v." + n, m); });
  }
  return c;
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  auto is = open_in(path);
  return read_header(is).info;
}

template void save_checkpoint<float>(const std::filesystem::path&, const Checkpoint<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace btok
