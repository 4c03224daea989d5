#include "cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "btok/embedding_io.hpp"
#include "btok/run_config.hpp"
#include "btok/verify.hpp"

namespace btok::cli {

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string dtype;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "run config file (flat key = value)");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "root seed, overrides run.seed");
  cmd->add_option("--dtype", f.dtype, "scalar type")->check(CLI::IsMember({"f32", "f64"}));
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
}

struct LoadedConfig {
  RunConfig cfg;
  std::string source_text;  // exact bytes of --config, or the canonical defaults
};

LoadedConfig load_config(const CommonFlags& f) {
  LoadedConfig l;
  l.source_text = f.config.empty() ? std::string() : read_file(f.config);
  l.cfg = parse_run_config(l.source_text);
  if (f.config.empty()) l.source_text = serialize_run_config(l.cfg);
  if (f.seed) l.cfg.seed = *f.seed;
  if (f.dtype == "f32") l.cfg.model.dtype = DType::f32;
  if (f.dtype == "f64") l.cfg.model.dtype = DType::f64;
  l.cfg.finalize();
  return l;
}

fs::path resolve_out(const CommonFlags& f, const RunConfig& cfg, const std::string& command) {
  if (!f.out.empty()) return f.out;
  if (!cfg.out_dir.empty()) return cfg.out_dir;
  const std::string leaf = command + "-" + config_fingerprint(serialize_run_config(cfg)).substr(0, 8);
  if (const char* root = std::getenv(kOutRootEnv); root && *root) return fs::path(root) / leaf;
  return fs::path("runs") / leaf;
}

void write_provenance(const fs::path& dir, const std::string& command, const LoadedConfig& l,
                      const std::map<std::string, std::string>& extra = {}) {
  fs::create_directories(dir);
  write_file(dir / "config.txt", l.source_text);
  const std::string resolved = serialize_run_config(l.cfg);
  write_file(dir / "config.resolved.txt", resolved);
  std::string p = fmt::format(
      "command={}\nseed={}\ndtype={}\nconfig_fingerprint={}\ncheckpoint_format={}\nindex_format={}\n"
      "embedding_format={}\n",
      command, l.cfg.seed, dtype_name(l.cfg.model.dtype), config_fingerprint(resolved), kCheckpointVersion,
      kIndexVersion, kEmbeddingFileVersion);
  for (const auto& [k, v] : extra) p += k + "=" + v + "\n";
  write_file(dir / "provenance.txt", p);
}

// Pooling and EOS id travel with the checkpoint metadata.
TrainerConfig trainer_from_metadata(const std::map<std::string, std::string>& md) {
  TrainerConfig t;
  if (auto it = md.find("trainer.pooling"); it != md.end() && it->second == "eos") t.pooling = PoolingKind::eos_last;
  if (auto it = md.find("btok.eos_id"); it != md.end()) t.eos_id = static_cast<TokenId>(std::stol(it->second));
  return t;
}

std::string arm_label(const std::map<std::string, std::string>& md) {
  auto get = [&](const char* k, const char* dflt) {
    auto it = md.find(k);
    return it == md.end() ? std::string(dflt) : it->second;
  };
  if (get("trainer.pooling", "btok") == "eos") return "eos-pooling";
  if (get("trainer.mask", "condensation") == "none") return "no-mask";
  if (get("trainer.ntp", "on") == "off") return "no-ntp";
  return "full";
}

template <typename T>
void write_eval(const fs::path& dir, const ModelState<T>& state, const TrainerConfig& tc, const RunConfig& cfg,
                const std::string& arm, std::ostream& out) {
  const auto tasks = cfg.resolved_eval_tasks();
  const auto embedder = make_embedder(state, tc);
  const Index k = tc.pooling == PoolingKind::eos_last ? 1 : state.bank.size();
  const auto rep = evaluate(embedder, tasks, cfg.vocabulary(), arm, k, cfg.seed,
                            config_fingerprint(serialize_run_config(cfg)));
  write_file(dir / "report.txt", rep.to_text());
  write_file(dir / "results.tsv", report_table_header() + report_table_rows(rep.tasks));
  fs::create_directories(dir / "index");
  for (const auto& t : tasks) save_index(dir / "index" / (t.name + ".idx"), build_index(embedder, generate_task(t, cfg.vocabulary()).documents));
  for (const auto& t : rep.tasks) out << fmt::format("{:<14} group={:<14} acc@1={:.4f}\n", t.task, t.group, t.acc_at_1);
  out << fmt::format("overall={:.4f}\n", rep.overall);
}

template <typename T>
int train_typed(const LoadedConfig& l, const fs::path& dir, const std::string& resume, std::ostream& out) {
  const RunConfig& cfg = l.cfg;
  const auto vocab = cfg.vocabulary();
  const SyntheticTask task = cfg.task(cfg.train_task);
  auto source = [task, vocab, &cfg](Index step) {
    return training_batch(task, vocab, cfg.trainer.global_batch, cfg.trainer.seed, step);
  };
  std::optional<Trainer<T>> trainer;
  if (resume.empty()) {
    trainer.emplace(cfg.model, cfg.trainer, source);
  } else {
    auto ckpt = load_checkpoint<T>(resume);
    if (!(ckpt.state.params.config == cfg.model))
      throw ConfigError("--resume", "checkpoint model config differs from the run config");
    trainer.emplace(std::move(ckpt), cfg.trainer, source);
  }
  std::ofstream log(dir / "train.log", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot write " + (dir / "train.log").string());
  fs::create_directories(dir / "checkpoints");
  while (trainer->next_step() < cfg.trainer.total_steps) {
    const auto r = trainer->step();
    log << r.to_log_line() << "\n";
    const Index done = trainer->next_step();
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.trainer.total_steps) {
      trainer->save(dir / "checkpoints" / fmt::format("step-{:06d}.ckpt", done));
      out << r.to_log_line() << "\n";
    }
  }
  log.flush();
  trainer->save(dir / "final.ckpt");
  out << fmt::format("trained {} steps, final checkpoint {}\n", cfg.trainer.total_steps, (dir / "final.ckpt").string());
  write_eval(dir, trainer->state(), cfg.trainer, cfg, arm_label(trainer_metadata(cfg.trainer)), out);
  return ok;
}

int cmd_train(const CommonFlags& f, const std::string& resume, std::ostream& out) {
  const auto l = load_config(f);
  const auto dir = resolve_out(f, l.cfg, "train");
  write_provenance(dir, "train", l, {{"resume", resume.empty() ? "-" : resume}});
  out << "run directory " << dir.string() << "\n";
  return l.cfg.model.dtype == DType::f64 ? train_typed<double>(l, dir, resume, out)
                                         : train_typed<float>(l, dir, resume, out);
}

int cmd_verify(const CommonFlags& f, bool table_only, std::ostream& out) {
  const auto l = load_config(f);
  VerifyOptions o;
  o.seed = l.cfg.seed;
  o.layouts = l.cfg.verify_layouts;
  if (table_only) {
    std::vector<LayoutDelta> rows;
    const auto c = check_mode_equivalence(o.seed, o.layouts, &rows);
    VerifyReport r;
    r.checks.push_back(c);
    r.layouts = rows;
    out << r.equivalence_table() << r.to_text();
    return r.all_passed() ? ok : verification_failed;
  }
  const auto r = run_verify(o);
  const std::string text = r.to_text() + "\n" + r.equivalence_table();
  out << text;
  const auto dir = resolve_out(f, l.cfg, "verify");
  write_provenance(dir, "verify", l);
  write_file(dir / "verify.txt", text);
  return r.all_passed() ? ok : verification_failed;
}

template <typename T>
EmbeddingFile embed_all(const fs::path& checkpoint, const std::vector<TokenSequence>& inputs) {
  const auto ckpt = load_checkpoint<T>(checkpoint);
  const TrainerConfig tc = trainer_from_metadata(ckpt.metadata);
  const auto embedder = make_embedder(ckpt.state, tc);
  EmbeddingFile f;
  f.d_model = ckpt.state.params.config.d_model;
  f.produced_by = tc.pooling;
  for (const auto& x : inputs) f.records.push_back(embedder(x).values.template cast<float>());
  return f;
}

int cmd_embed(const std::string& checkpoint, const std::string& input, const std::string& output, std::ostream& out) {
  const auto info = read_checkpoint_info(checkpoint);
  const auto inputs = read_token_file(input, info.model.vocab_size);
  const auto file = info.dtype == DType::f64 ? embed_all<double>(checkpoint, inputs) : embed_all<float>(checkpoint, inputs);
  const fs::path path(output);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_embeddings(path, file);
  write_file(path.string() + ".provenance.txt",
             fmt::format("command=embed\ncheckpoint={}\ninput={}\nrecords={}\nembedding_format={}\npooling={}\n",
                         checkpoint, input, file.records.size(), kEmbeddingFileVersion, pooling_name(file.produced_by)));
  out << fmt::format("wrote {} embeddings of width {} to {}\n", file.records.size(), file.d_model, output);
  return ok;
}

template <typename T>
int eval_typed(const LoadedConfig& l, const std::string& checkpoint, const fs::path& dir, std::ostream& out) {
  const auto ckpt = load_checkpoint<T>(checkpoint);
  if (ckpt.state.params.config.vocab_size != l.cfg.model.vocab_size)
    throw ConfigError("model.vocab_size", "task vocabulary differs from the checkpoint's");
  write_eval(dir, ckpt.state, trainer_from_metadata(ckpt.metadata), l.cfg, arm_label(ckpt.metadata), out);
  return ok;
}

int cmd_eval(const CommonFlags& f, const std::string& checkpoint, std::ostream& out) {
  auto l = load_config(f);
  const auto info = read_checkpoint_info(checkpoint);
  l.cfg.model = info.model;
  l.cfg.finalize();
  const auto dir = resolve_out(f, l.cfg, "eval");
  write_provenance(dir, "eval", l, {{"checkpoint", checkpoint}});
  return info.dtype == DType::f64 ? eval_typed<double>(l, checkpoint, dir, out) : eval_typed<float>(l, checkpoint, dir, out);
}

int cmd_ablate(const CommonFlags& f, std::ostream& out) {
  const auto l = load_config(f);
  const auto& cfg = l.cfg;
  AblationSpec spec;
  spec.model = cfg.model;
  spec.arms = make_arms(cfg.trainer, cfg.ablate_arms, cfg.ablate_k_sweep);
  spec.train_task = cfg.task(cfg.train_task);
  for (const auto& n : cfg.eval_tasks) spec.eval_tasks.push_back(cfg.task(n));
  spec.seeds = cfg.ablate_seeds;
  const auto dir = resolve_out(f, cfg, "ablate");
  write_provenance(dir, "ablate", l);
  std::string diffs;
  for (const auto& a : spec.arms) diffs += a.name + ": " + fmt::format("{}", fmt::join(config_diff(cfg.trainer, a.trainer), ",")) + "\n";
  write_file(dir / "arm_diffs.txt", diffs);
  const auto rep = run_ablation(spec, [&](const std::string& m) { out << m << "\n" << std::flush; });
  write_file(dir / "results.tsv", report_table_header() + report_table_rows(rep.rows));
  write_file(dir / "ablation.txt", rep.to_text());
  out << rep.to_text();
  return ok;
}

// Aggregates results.tsv files: mean acc@1 per (arm, K, task) over seeds.
int cmd_report(const std::vector<std::string>& runs, const std::string& out_dir, std::ostream& out) {
  struct Acc {
    double sum = 0.0;
    int n = 0;
  };
  std::map<std::tuple<std::string, std::string, std::string>, Acc> cells;
  for (const auto& r : runs) {
    std::istringstream in(read_file(fs::path(r) / "results.tsv"));
    std::string line;
    std::getline(in, line);
    if (line + "\n" != report_table_header()) throw FormatError(r + "/results.tsv: unexpected header");
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string task, arm, k, acc, group, seed;
      std::getline(ls, task, '\t');
      std::getline(ls, arm, '\t');
      std::getline(ls, k, '\t');
      std::getline(ls, acc, '\t');
      std::getline(ls, group, '\t');
      std::getline(ls, seed, '\t');
      if (seed.empty()) throw FormatError(r + "/results.tsv: short row");
      auto& c = cells[{arm, k, task}];
      c.sum += std::stod(acc);
      c.n += 1;
    }
  }
  std::string text = fmt::format("{:<14} {:>3} {:<14} {:>9} {:>5}\n", "arm", "K", "task", "acc@1", "runs");
  for (const auto& [key, c] : cells)
    text += fmt::format("{:<14} {:>3} {:<14} {:>9.4f} {:>5}\n", std::get<0>(key), std::get<1>(key), std::get<2>(key),
                        c.sum / c.n, c.n);
  out << text;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file(fs::path(out_dir) / "summary.txt", text);
    std::string p = "command=report\n";
    for (const auto& r : runs) p += "input=" + r + "\n";
    write_file(fs::path(out_dir) / "provenance.txt", p);
  }
  return ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"bottleneck-token embedding trainer and evaluator"};
  app.require_subcommand(1);
  CommonFlags f;
  std::string resume, checkpoint, input, output;
  std::vector<std::string> runs;

  auto* train = app.add_subcommand("train", "train a model and write a run directory");
  add_common(train, f);
  train->add_option("--resume", resume, "continue from a checkpoint written by train");
  auto* verify = app.add_subcommand("verify", "run the oracle suite");
  add_common(verify, f);
  auto* verify_eq = app.add_subcommand("verify-equivalence", "dense vs two-pass per-layout delta table");
  add_common(verify_eq, f);
  auto* embed = app.add_subcommand("embed", "embed one token sequence per input line");
  embed->add_option("--checkpoint", checkpoint)->required();
  embed->add_option("--input", input)->required();
  embed->add_option("--output", output)->required();
  auto* eval = app.add_subcommand("eval", "acc@1 of a checkpoint on the configured tasks");
  add_common(eval, f);
  eval->add_option("--checkpoint", checkpoint)->required();
  auto* ablate = app.add_subcommand("ablate", "train and compare ablation arms");
  add_common(ablate, f);
  auto* report = app.add_subcommand("report", "summarize results.tsv from run directories");
  report->add_option("--run", runs, "run directory (repeatable)")->required();
  report->add_option("--out", f.out, "directory for summary.txt");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return config_error;
  }

  try {
    if (*train) return cmd_train(f, resume, out);
    if (*verify) return cmd_verify(f, false, out);
    if (*verify_eq) return cmd_verify(f, true, out);
    if (*embed) return cmd_embed(checkpoint, input, output, out);
    if (*eval) return cmd_eval(f, checkpoint, out);
    if (*ablate) return cmd_ablate(f, out);
    if (*report) return cmd_report(runs, f.out, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return numerical_error;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return format_error;
  } catch (const ShapeError& e) {
    err << "input error: " << e.what() << "\n";
    return format_error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return failure;
  }
  return failure;
}

}  // namespace btok::cli
