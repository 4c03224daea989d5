#include "btok/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>

#include <fmt/format.h>

#include "btok/rng.hpp"

namespace btok {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename V>
V parse_number(const std::string& key, const std::string& s) {
  V v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key, "cannot parse '" + s + "' as a number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "on" || s == "1") return true;
  if (s == "false" || s == "off" || s == "0") return false;
  throw ConfigError(key, "expected true/false or on/off, got '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename V>
std::string join(const std::vector<V>& v) {
  return fmt::format("{}", fmt::join(v, ","));
}

std::string num(double v) { return fmt::format("{}", v); }

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define BTOK_INT_FIELD(KEY, MEMBER)                                                               \
  Field {                                                                                         \
    KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },                             \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_number<decltype(c.MEMBER)>(KEY, v); } \
  }
#define BTOK_REAL_FIELD(KEY, MEMBER)                                                                \
  Field {                                                                                           \
    KEY, [](const RunConfig& c) { return num(c.MEMBER); },                                          \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_number<double>(KEY, v); }         \
  }

const std::vector<Field>& model_fields() {
  static const std::vector<Field> f = {
      BTOK_INT_FIELD("model.vocab_size", model.vocab_size),
      BTOK_INT_FIELD("model.d_model", model.d_model),
      BTOK_INT_FIELD("model.n_layers", model.n_layers),
      BTOK_INT_FIELD("model.n_heads", model.n_heads),
      BTOK_REAL_FIELD("model.mlp_ratio", model.mlp_ratio),
      BTOK_INT_FIELD("model.max_seq_len", model.max_seq_len),
      {"model.dtype", [](const RunConfig& c) { return std::string(dtype_name(c.model.dtype)); },
       [](RunConfig& c, const std::string& v) {
         if (v == "f32") c.model.dtype = DType::f32;
         else if (v == "f64") c.model.dtype = DType::f64;
         else throw ConfigError("model.dtype", "expected f32 or f64");
       }},
  };
  return f;
}

const std::vector<Field>& trainer_fields() {
  static const std::vector<Field> f = {
      BTOK_INT_FIELD("trainer.global_batch", trainer.global_batch),
      BTOK_INT_FIELD("trainer.sub_batch", trainer.sub_batch),
      BTOK_INT_FIELD("trainer.total_steps", trainer.total_steps),
      BTOK_INT_FIELD("trainer.warmup_steps", trainer.warmup_steps),
      BTOK_REAL_FIELD("trainer.peak_lr", trainer.peak_lr),
      BTOK_REAL_FIELD("trainer.weight_decay", trainer.weight_decay),
      BTOK_REAL_FIELD("trainer.beta1", trainer.beta1),
      BTOK_REAL_FIELD("trainer.beta2", trainer.beta2),
      BTOK_REAL_FIELD("trainer.adam_eps", trainer.adam_eps),
      {"trainer.pooling", [](const RunConfig& c) { return std::string(pooling_name(c.trainer.pooling)); },
       [](RunConfig& c, const std::string& v) {
         if (v == "btok") c.trainer.pooling = PoolingKind::btok_mean;
         else if (v == "eos") c.trainer.pooling = PoolingKind::eos_last;
         else throw ConfigError("trainer.pooling", "expected btok or eos");
       }},
      {"trainer.mask", [](const RunConfig& c) { return std::string(c.trainer.mask == MaskArm::none ? "none" : "condensation"); },
       [](RunConfig& c, const std::string& v) {
         if (v == "condensation") c.trainer.mask = MaskArm::condensation;
         else if (v == "none") c.trainer.mask = MaskArm::none;
         else throw ConfigError("trainer.mask", "expected condensation or none");
       }},
      {"trainer.ntp", [](const RunConfig& c) { return std::string(c.trainer.ntp ? "on" : "off"); },
       [](RunConfig& c, const std::string& v) { c.trainer.ntp = parse_bool("trainer.ntp", v); }},
      {"trainer.condensation_mode",
       [](const RunConfig& c) { return std::string(condensed_mode_name(c.trainer.condensation_mode)); },
       [](RunConfig& c, const std::string& v) {
         if (v == "two-pass") c.trainer.condensation_mode = CondensedMode::two_pass;
         else if (v == "dense-oracle") c.trainer.condensation_mode = CondensedMode::dense_oracle;
         else throw ConfigError("trainer.condensation_mode", "expected two-pass or dense-oracle");
       }},
      {"trainer.candidate_gic", [](const RunConfig& c) { return std::string(c.trainer.candidate_gic ? "on" : "off"); },
       [](RunConfig& c, const std::string& v) { c.trainer.candidate_gic = parse_bool("trainer.candidate_gic", v); }},
      BTOK_INT_FIELD("trainer.memory_budget_bytes", trainer.memory_budget_bytes),
      BTOK_INT_FIELD("btok.count", trainer.btok_count),
      BTOK_INT_FIELD("btok.eos_id", trainer.eos_id),
      BTOK_REAL_FIELD("objective.temperature", trainer.contrastive.temperature),
      {"objective.symmetric", [](const RunConfig& c) { return std::string(c.trainer.contrastive.symmetric ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.trainer.contrastive.symmetric = parse_bool("objective.symmetric", v); }},
      BTOK_REAL_FIELD("objective.lambda.warm_value", trainer.lambda.warm_value),
      BTOK_INT_FIELD("objective.lambda.boundary_step", trainer.lambda.boundary_step),
  };
  return f;
}

const std::vector<Field>& run_fields() {
  static const std::vector<Field> f = {
      BTOK_INT_FIELD("run.seed", seed),
      {"run.out_dir", [](const RunConfig& c) { return c.out_dir.string(); },
       [](RunConfig& c, const std::string& v) { c.out_dir = v; }},
      BTOK_INT_FIELD("run.checkpoint_every", checkpoint_every),
      {"run.train_task", [](const RunConfig& c) { return c.train_task; },
       [](RunConfig& c, const std::string& v) { c.train_task = v; }},
      {"run.eval_tasks", [](const RunConfig& c) { return join(c.eval_tasks); },
       [](RunConfig& c, const std::string& v) { c.eval_tasks = split_list(v); }},
      {"ablate.arms", [](const RunConfig& c) { return join(c.ablate_arms); },
       [](RunConfig& c, const std::string& v) { c.ablate_arms = split_list(v); }},
      {"ablate.k_sweep", [](const RunConfig& c) { return join(c.ablate_k_sweep); },
       [](RunConfig& c, const std::string& v) {
         c.ablate_k_sweep.clear();
         for (const auto& s : split_list(v)) c.ablate_k_sweep.push_back(parse_number<Index>("ablate.k_sweep", s));
       }},
      {"ablate.seeds", [](const RunConfig& c) { return join(c.ablate_seeds); },
       [](RunConfig& c, const std::string& v) {
         c.ablate_seeds.clear();
         for (const auto& s : split_list(v)) c.ablate_seeds.push_back(parse_number<std::uint64_t>("ablate.seeds", s));
       }},
      BTOK_INT_FIELD("verify.layouts", verify_layouts),
  };
  return f;
}

using TaskField = std::pair<std::function<std::string(const SyntheticTask&)>,
                            std::function<void(SyntheticTask&, const std::string&, const std::string&)>>;

const std::map<std::string, TaskField>& task_fields() {
  static const std::map<std::string, TaskField> f = {
      {"family",
       {[](const SyntheticTask& t) { return std::string(task_family_name(t.family)); },
        [](SyntheticTask& t, const std::string& k, const std::string& v) {
          try {
            t.family = parse_task_family(v);
          } catch (const std::invalid_argument&) {
            throw ConfigError(k, "unknown task family '" + v + "'");
          }
        }}},
      {"group", {[](const SyntheticTask& t) { return t.group; },
                 [](SyntheticTask& t, const std::string&, const std::string& v) { t.group = v; }}},
#define BTOK_TASK_INT(NAME)                                                                                     \
  {#NAME, {[](const SyntheticTask& t) { return std::to_string(t.NAME); },                                       \
           [](SyntheticTask& t, const std::string& k, const std::string& v) { t.NAME = parse_number<Index>(k, v); }}}
      BTOK_TASK_INT(query_len_min),
      BTOK_TASK_INT(query_len_max),
      BTOK_TASK_INT(doc_len_min),
      BTOK_TASK_INT(doc_len_max),
      BTOK_TASK_INT(payload_size),
      BTOK_TASK_INT(corpus_size),
      BTOK_TASK_INT(query_count),
#undef BTOK_TASK_INT
      {"distractor_rate", {[](const SyntheticTask& t) { return num(t.distractor_rate); },
                           [](SyntheticTask& t, const std::string& k, const std::string& v) {
                             t.distractor_rate = parse_number<double>(k, v);
                           }}},
  };
  return f;
}

std::string emit(const std::vector<Field>& fields, const RunConfig& c) {
  std::string out;
  for (const auto& f : fields) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

}  // namespace

std::vector<SyntheticTask> default_tasks() {
  SyntheticTask payload;
  SyntheticTask perm;
  perm.name = "permutation";
  perm.family = TaskFamily::permutation_match;
  perm.group = "paraphrase";
  perm.doc_len_min = 6;
  perm.doc_len_max = 10;
  perm.query_len_min = 7;
  perm.query_len_max = 11;
  perm.distractor_rate = 0.25;
  SyntheticTask needle;
  needle.name = "needle";
  needle.family = TaskFamily::needle_recall;
  needle.group = "long_context";
  needle.query_len_min = 4 * payload.query_len_min;
  needle.query_len_max = 4 * payload.query_len_max;
  needle.distractor_rate = 1.0;
  return {payload, perm, needle};
}

const SyntheticTask& RunConfig::task(const std::string& name) const {
  for (const auto& t : tasks)
    if (t.name == name) return t;
  throw ConfigError("run.tasks", "no task named '" + name + "'");
}

std::vector<SyntheticTask> RunConfig::resolved_eval_tasks() const {
  std::vector<SyntheticTask> out;
  for (const auto& n : eval_tasks) {
    auto t = task(n);
    t.seed = derive_seed(seed, "eval." + t.name);
    out.push_back(std::move(t));
  }
  return out;
}

void RunConfig::finalize() {
  trainer.seed = seed;
  trainer.lambda.total_steps = trainer.total_steps;
  model.validate();
  trainer.validate();
  if (trainer.eos_id >= model.vocab_size) throw ConfigError("btok.eos_id", "outside the vocabulary");
  if (checkpoint_every < 0) throw ConfigError("run.checkpoint_every", "must be >= 0");
  if (verify_layouts < 1) throw ConfigError("verify.layouts", "must be positive");
  const auto vocab = vocabulary();
  for (const auto& t : tasks) t.validate(vocab);
  try {
    task(train_task);
  } catch (const ConfigError&) {
    throw ConfigError("run.train_task", "no task named '" + train_task + "'");
  }
  for (const auto& n : eval_tasks) {
    try {
      task(n);
    } catch (const ConfigError&) {
      throw ConfigError("run.eval_tasks", "no task named '" + n + "'");
    }
  }
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  c.tasks = default_tasks();
  std::map<std::string, const Field*> fields;
  for (const auto* group : {&model_fields(), &trainer_fields(), &run_fields()})
    for (const auto& f : *group) fields[f.key] = &f;

  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::optional<Index> lambda_total;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key == "objective.lambda.total_steps") {
      lambda_total = parse_number<Index>(key, value);
      continue;
    }
    if (auto it = fields.find(key); it != fields.end()) {
      it->second->set(c, value);
      continue;
    }
    if (key.starts_with("task.")) {
      const auto dot = key.rfind('.');
      const std::string name = key.substr(5, dot - 5);
      const std::string field = key.substr(dot + 1);
      if (dot <= 5 || name.empty()) throw ConfigError(key, "expected task.<name>.<field>");
      const auto tf = task_fields().find(field);
      if (tf == task_fields().end()) throw ConfigError(key, "unknown task field '" + field + "'");
      auto t = std::find_if(c.tasks.begin(), c.tasks.end(), [&](const SyntheticTask& x) { return x.name == name; });
      if (t == c.tasks.end()) {
        SyntheticTask fresh;
        fresh.name = name;
        c.tasks.push_back(fresh);
        t = std::prev(c.tasks.end());
      }
      tf->second.second(*t, key, value);
      continue;
    }
    throw ConfigError(key, "unknown key");
  }
  // An explicit lambda horizon must agree with the step count; otherwise it follows it.
  if (lambda_total && *lambda_total != c.trainer.total_steps)
    throw ConfigError("objective.lambda.total_steps", "must equal trainer.total_steps");
  c.finalize();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize_trainer_config(const TrainerConfig& cfg) {
  RunConfig c;
  c.trainer = cfg;
  return emit(trainer_fields(), c);
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::string out = emit(model_fields(), cfg) + emit(trainer_fields(), cfg) + emit(run_fields(), cfg);
  for (const auto& t : cfg.tasks)
    for (const auto& [field, f] : task_fields()) out += "task." + t.name + "." + field + " = " + f.first(t) + "\n";
  return out;
}

std::vector<std::string> config_diff(const TrainerConfig& a, const TrainerConfig& b) {
  RunConfig ca, cb;
  ca.trainer = a;
  cb.trainer = b;
  std::vector<std::string> out;
  for (const auto& f : trainer_fields())
    if (f.get(ca) != f.get(cb)) out.push_back(f.key);
  if (a.seed != b.seed) out.push_back("run.seed");
  return out;
}

std::string config_fingerprint(const std::string& canonical_text) {
  return fmt::format("{:016x}", derive_seed(0, canonical_text));
}

}  // namespace btok
