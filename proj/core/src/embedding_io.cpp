#include "btok/embedding_io.hpp"

#include <fstream>
#include <sstream>

#include "btok/binary_io.hpp"

namespace btok {

namespace {
constexpr char kMagic[4] = {'B', 'T', 'E', 'M'};
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingFile& file) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(kMagic, sizeof kMagic);
  io::put<std::uint32_t>(os, kEmbeddingFileVersion);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(file.d_model));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(file.produced_by));
  for (const auto& r : file.records) {
    if (r.size() != file.d_model) throw ShapeError("save_embeddings: record width differs from d_model");
    io::put_bytes(os, r.data(), static_cast<std::size_t>(r.size()) * sizeof(float));
  }
  if (!os) throw std::runtime_error("short write on " + path.string());
}

EmbeddingFile load_embeddings(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  io::get_bytes(is, magic, sizeof magic, "magic");
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError("not an embedding file (bad magic)");
  const auto version = io::get<std::uint32_t>(is, "version");
  if (version != kEmbeddingFileVersion) throw FormatError("unsupported embedding file version " + std::to_string(version));
  const auto d = io::get<std::uint32_t>(is, "d_model");
  const auto tag = io::get<std::uint32_t>(is, "pooling tag");
  if (tag != static_cast<std::uint32_t>(PoolingKind::btok_mean) && tag != static_cast<std::uint32_t>(PoolingKind::eos_last))
    throw FormatError("embedding file: unknown pooling tag");
  if (d == 0 || d > (1u << 20)) throw FormatError("embedding file: implausible d_model");
  EmbeddingFile f;
  f.d_model = static_cast<Index>(d);
  f.produced_by = static_cast<PoolingKind>(tag);
  // Record count is implied by the file length.
  while (is.peek() != std::char_traits<char>::eof()) {
    RowVector<float> r(f.d_model);
    io::get_bytes(is, r.data(), static_cast<std::size_t>(d) * sizeof(float), "record");
    f.records.push_back(std::move(r));
  }
  return f;
}

std::vector<TokenSequence> read_token_file(const std::filesystem::path& path, Index vocab_size) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<TokenSequence> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    TokenSequence seq;
    long long id = 0;
    while (ls >> id) {
      if (id < 0 || id >= vocab_size)
        throw ShapeError(path.string() + ":" + std::to_string(lineno) + ": token id " + std::to_string(id) +
                         " outside vocabulary of size " + std::to_string(vocab_size));
      seq.push_back(static_cast<TokenId>(id));
    }
    if (!ls.eof()) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": not a token id list");
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace btok
