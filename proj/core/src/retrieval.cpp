#include "btok/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <fmt/format.h>

#include "btok/binary_io.hpp"
#include "btok/rng.hpp"

namespace btok {

TaskVocabulary TaskVocabulary::for_size(Index vocab_size) {
  TaskVocabulary v;
  const Index free = vocab_size - v.key_begin;
  if (free < 3) throw ConfigError("model.vocab_size", "too small for the synthetic task layout");
  v.n_keys = free / 4;
  if (v.n_keys < 1) v.n_keys = 1;
  v.value_begin = static_cast<TokenId>(v.key_begin + v.n_keys);
  v.distractor_begin = static_cast<TokenId>(v.value_begin + v.n_keys);
  v.n_distractors = vocab_size - v.distractor_begin;
  return v;
}

const char* task_family_name(TaskFamily f) {
  switch (f) {
    case TaskFamily::payload_recall: return "payload_recall";
    case TaskFamily::permutation_match: return "permutation_match";
    case TaskFamily::needle_recall: return "needle_recall";
  }
  return "?";
}

TaskFamily parse_task_family(const std::string& s) {
  for (auto f : {TaskFamily::payload_recall, TaskFamily::permutation_match, TaskFamily::needle_recall})
    if (s == task_family_name(f)) return f;
  throw std::invalid_argument("unknown task family '" + s + "'");
}

namespace {

double log_binomial(Index n, Index k) {
  return std::lgamma(double(n + 1)) - std::lgamma(double(k + 1)) - std::lgamma(double(n - k + 1));
}

}  // namespace

void SyntheticTask::validate(const TaskVocabulary& vocab) const {
  const std::string p = "task." + name + ".";
  if (name.empty()) throw ConfigError("task.name", "must be nonempty");
  if (query_len_min < 1 || query_len_max < query_len_min) throw ConfigError(p + "query_len", "bad range");
  if (doc_len_min < 1 || doc_len_max < doc_len_min) throw ConfigError(p + "doc_len", "bad range");
  if (payload_size < 1) throw ConfigError(p + "payload_size", "must be at least 1");
  if (payload_size + 1 > query_len_max)
    throw ConfigError(p + "payload_size", "payload plus marker exceeds the query length range");
  if (payload_size > doc_len_max) throw ConfigError(p + "payload_size", "payload exceeds the document length range");
  if (!(distractor_rate >= 0.0 && distractor_rate <= 1.0)) throw ConfigError(p + "distractor_rate", "must lie in [0, 1]");
  if (corpus_size < 1) throw ConfigError(p + "corpus_size", "must be positive");
  if (query_count < 1 || query_count > corpus_size) throw ConfigError(p + "query_count", "must lie in [1, corpus_size]");
  if (vocab.n_distractors < 1) throw ConfigError("model.vocab_size", "no distractor tokens left");
  if (family == TaskFamily::permutation_match &&
      (query_len_min != doc_len_min + 1 || query_len_max != doc_len_max + 1))
    throw ConfigError(p + "query_len", "permutation queries are a document plus the marker; use the doc range + 1");
  if (family != TaskFamily::permutation_match) {
    if (payload_size > vocab.n_keys) throw ConfigError(p + "payload_size", "exceeds the number of key tokens");
    if (log_binomial(vocab.n_keys, payload_size) < std::log(double(corpus_size)) - 1e-9)
      throw ConfigError(p + "corpus_size", "more documents than distinct payloads");
  }
}

namespace {

using Rng = std::mt19937_64;

Index uniform(Rng& g, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(g); }

TokenId distractor(Rng& g, const TaskVocabulary& v) {
  return static_cast<TokenId>(v.distractor_begin + uniform(g, 0, v.n_distractors - 1));
}

// Picks `j != i` in [0, n) when possible.
Index other_index(Rng& g, Index i, Index n) {
  if (n < 2) return i;
  const Index j = uniform(g, 0, n - 2);
  return j >= i ? j + 1 : j;
}

std::vector<TokenSequence> distinct_payloads(Rng& g, const SyntheticTask& t, const TaskVocabulary& v) {
  std::set<TokenSequence> seen;
  std::vector<TokenSequence> out;
  TokenSequence keys(static_cast<std::size_t>(v.n_keys));
  std::iota(keys.begin(), keys.end(), v.key_begin);
  while (static_cast<Index>(out.size()) < t.corpus_size) {
    std::shuffle(keys.begin(), keys.end(), g);
    TokenSequence p(keys.begin(), keys.begin() + t.payload_size);
    TokenSequence sorted = p;
    std::sort(sorted.begin(), sorted.end());
    if (seen.insert(sorted).second) out.push_back(std::move(p));
  }
  return out;
}

TaskData generate_recall(const SyntheticTask& t, const TaskVocabulary& v, Rng& g) {
  TaskData d;
  const auto payloads = distinct_payloads(g, t, v);
  std::vector<TokenSequence> surface(payloads.size());
  for (std::size_t i = 0; i < payloads.size(); ++i) {
    const Index len = uniform(g, std::max(t.doc_len_min, t.payload_size), t.doc_len_max);
    TokenSequence doc;
    for (TokenId k : payloads[i]) doc.push_back(v.value_of(k));
    for (Index j = t.payload_size; j < len; ++j) {
      const TokenId x = distractor(g, v);
      doc.push_back(x);
      surface[i].push_back(x);
    }
    std::shuffle(doc.begin(), doc.end(), g);
    d.documents.push_back(std::move(doc));
  }
  for (Index i = 0; i < t.query_count; ++i) {
    const auto& payload = payloads[static_cast<std::size_t>(i)];
    const Index len = uniform(g, std::max(t.query_len_min, t.payload_size + 1), t.query_len_max);
    const auto n_distract = static_cast<Index>(std::llround(t.distractor_rate * double(len - 1 - t.payload_size)));
    // Distractors are lifted from a negative's surface tokens so token overlap points the wrong way.
    const auto& decoy = surface[static_cast<std::size_t>(other_index(g, i, t.corpus_size))];
    TokenSequence noise;
    for (Index j = 0; j < n_distract; ++j)
      noise.push_back(decoy.empty() ? distractor(g, v) : decoy[static_cast<std::size_t>(uniform(g, 0, Index(decoy.size()) - 1))]);
    while (Index(noise.size()) < len - 1 - t.payload_size) noise.push_back(distractor(g, v));
    TokenSequence q;
    if (t.family == TaskFamily::needle_recall) {
      q = noise;
      const auto at = static_cast<std::ptrdiff_t>(uniform(g, 0, Index(q.size())));
      q.insert(q.begin() + at, payload.begin(), payload.end());
    } else {
      q = noise;
      q.insert(q.end(), payload.begin(), payload.end());
      std::shuffle(q.begin(), q.end(), g);
    }
    q.push_back(v.marker);
    TokenSequence target;
    for (TokenId x : q)
      if (v.is_key(x)) target.push_back(v.value_of(x));
    d.queries.push_back(std::move(q));
    d.targets.push_back(std::move(target));
    d.gold.push_back(i);
  }
  return d;
}

TaskData generate_permutation(const SyntheticTask& t, const TaskVocabulary& v, Rng& g) {
  TaskData d;
  const Index pool = v.n_keys * 2 + v.n_distractors;
  for (Index i = 0; i < t.corpus_size; ++i) {
    const Index len = uniform(g, t.doc_len_min, t.doc_len_max);
    TokenSequence doc;
    for (Index j = 0; j < len; ++j) doc.push_back(static_cast<TokenId>(v.key_begin + uniform(g, 0, pool - 1)));
    d.documents.push_back(std::move(doc));
  }
  for (Index i = 0; i < t.query_count; ++i) {
    const auto& doc = d.documents[static_cast<std::size_t>(i)];
    const auto& decoy = d.documents[static_cast<std::size_t>(other_index(g, i, t.corpus_size))];
    TokenSequence q = doc;
    std::shuffle(q.begin(), q.end(), g);
    const auto n_swap = static_cast<Index>(std::llround(t.distractor_rate * double(q.size()) / 2.0));
    for (Index j = 0; j < n_swap; ++j)
      q[static_cast<std::size_t>(uniform(g, 0, Index(q.size()) - 1))] =
          decoy[static_cast<std::size_t>(uniform(g, 0, Index(decoy.size()) - 1))];
    q.push_back(v.marker);
    const auto n_target = std::min<std::size_t>(static_cast<std::size_t>(t.payload_size), doc.size());
    d.targets.emplace_back(doc.begin(), doc.begin() + static_cast<std::ptrdiff_t>(n_target));
    d.queries.push_back(std::move(q));
    d.gold.push_back(i);
  }
  return d;
}

}  // namespace

TaskData generate_task(const SyntheticTask& task, const TaskVocabulary& vocab) {
  task.validate(vocab);
  Rng g(task.seed);
  return task.family == TaskFamily::permutation_match ? generate_permutation(task, vocab, g)
                                                      : generate_recall(task, vocab, g);
}

Batch training_batch(const SyntheticTask& task, const TaskVocabulary& vocab, Index batch_size, std::uint64_t seed,
                     Index step) {
  SyntheticTask t = task;
  t.corpus_size = batch_size;
  t.query_count = batch_size;
  t.seed = derive_seed(seed, "data." + task.name, static_cast<std::uint64_t>(step));
  auto data = generate_task(t, vocab);
  Batch b(static_cast<std::size_t>(batch_size));
  for (std::size_t i = 0; i < b.size(); ++i) {
    b[i].query = std::move(data.queries[i]);
    b[i].positive = std::move(data.documents[i]);
    b[i].target = std::move(data.targets[i]);
    // Candidate-side condensation reconstructs the document's own payload.
    for (TokenId x : b[i].positive)
      if (vocab.is_value(x) || task.family == TaskFamily::permutation_match) b[i].positive_target.push_back(x);
    if (b[i].positive_target.empty()) b[i].positive_target = b[i].target;
  }
  return b;
}

template <typename T>
EmbeddingVector<T> Embedder<T>::operator()(std::span<const TokenId> x) const {
  if (!params) throw std::logic_error("Embedder without parameters");
  if (pooling == PoolingKind::eos_last) return embed_eos_baseline(*params, x, eos_id);
  if (!bank) throw std::logic_error("Embedder without a BTok bank");
  return embed(*params, *bank, x);
}

void refresh_norms(EmbeddingIndex& index) {
  index.norms.resize(static_cast<std::size_t>(index.size()));
  for (Index i = 0; i < index.size(); ++i) {
    const double n = index.matrix.row(i).template cast<double>().norm();
    if (!(n > 0.0)) throw NumericalError("index row " + std::to_string(i) + " has zero norm");
    index.norms[static_cast<std::size_t>(i)] = n;
  }
}

template <typename T>
EmbeddingIndex build_index(const Embedder<T>& embedder, const std::vector<TokenSequence>& documents) {
  if (documents.empty()) throw ShapeError("build_index: no documents");
  EmbeddingIndex idx;
  idx.produced_by = embedder.pooling;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    const auto e = embedder(documents[i]);
    if (i == 0) idx.matrix.resize(static_cast<Index>(documents.size()), e.values.size());
    idx.matrix.row(static_cast<Index>(i)) = e.values.template cast<float>();
    idx.doc_ids.push_back(static_cast<std::int64_t>(i));
  }
  refresh_norms(idx);
  return idx;
}

std::vector<SearchHit> search(const EmbeddingIndex& index, const RowVector<float>& query, Index top_k) {
  if (index.size() == 0) throw ShapeError("search: empty index");
  if (query.size() != index.dim()) throw ShapeError("search: query dimension mismatch");
  if (top_k < 1 || top_k > index.size()) throw ShapeError("search: top_k must lie in [1, num_docs]");
  if (static_cast<Index>(index.norms.size()) != index.size()) throw std::logic_error("search: stale norm cache");
  const RowVector<double> q = query.cast<double>();
  const double qn = q.norm();
  if (!(qn > 0.0)) throw NumericalError("search: zero-norm query");
  std::vector<SearchHit> hits(static_cast<std::size_t>(index.size()));
  for (Index i = 0; i < index.size(); ++i) {
    const auto iu = static_cast<std::size_t>(i);
    hits[iu] = {index.doc_ids[iu], q.dot(index.matrix.row(i).cast<double>()) / (qn * index.norms[iu])};
  }
  const auto before = [](const SearchHit& a, const SearchHit& b) {
    return a.score != b.score ? a.score > b.score : a.doc_id < b.doc_id;
  };
  std::partial_sort(hits.begin(), hits.begin() + top_k, hits.end(), before);
  hits.resize(static_cast<std::size_t>(top_k));
  return hits;
}

namespace {
constexpr char kIndexMagic[8] = {'B', 'T', 'O', 'K', 'I', 'N', 'D', 'X'};
}

void save_index(const std::filesystem::path& path, const EmbeddingIndex& index) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write index " + path.string());
  os.write(kIndexMagic, sizeof kIndexMagic);
  io::put<std::uint32_t>(os, kIndexVersion);
  io::put<std::uint64_t>(os, static_cast<std::uint64_t>(index.size()));
  io::put<std::uint64_t>(os, static_cast<std::uint64_t>(index.dim()));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(index.produced_by));
  io::put_bytes(os, index.matrix.data(), static_cast<std::size_t>(index.matrix.size()) * sizeof(float));
  io::put_bytes(os, index.doc_ids.data(), index.doc_ids.size() * sizeof(std::int64_t));
  if (!os) throw std::runtime_error("short write on index " + path.string());
}

EmbeddingIndex load_index(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open index " + path.string());
  char magic[8];
  io::get_bytes(is, magic, sizeof magic, "magic");
  if (!std::equal(magic, magic + 8, kIndexMagic)) throw FormatError("not an index file (bad magic)");
  const auto version = io::get<std::uint32_t>(is, "version");
  if (version != kIndexVersion) throw FormatError("unsupported index version " + std::to_string(version));
  const auto n = io::get<std::uint64_t>(is, "num_docs");
  const auto d = io::get<std::uint64_t>(is, "d_model");
  const auto tag = io::get<std::uint32_t>(is, "pooling tag");
  if (tag != static_cast<std::uint32_t>(PoolingKind::btok_mean) && tag != static_cast<std::uint32_t>(PoolingKind::eos_last))
    throw FormatError("index: unknown pooling tag");
  if (n > (1ull << 32) || d > (1ull << 20)) throw FormatError("index: implausible dimensions");
  EmbeddingIndex idx;
  idx.produced_by = static_cast<PoolingKind>(tag);
  idx.matrix.resize(static_cast<Index>(n), static_cast<Index>(d));
  io::get_bytes(is, idx.matrix.data(), static_cast<std::size_t>(n * d) * sizeof(float), "index rows");
  idx.doc_ids.resize(static_cast<std::size_t>(n));
  io::get_bytes(is, idx.doc_ids.data(), static_cast<std::size_t>(n) * sizeof(std::int64_t), "doc ids");
  refresh_norms(idx);
  return idx;
}

void EvalReport::summarize() {
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& t : tasks) {
    acc[t.group].first += t.acc_at_1;
    acc[t.group].second += 1;
  }
  group_means.clear();
  double sum = 0.0;
  for (const auto& [g, s] : acc) {
    group_means[g] = s.first / s.second;
    sum += group_means[g];
  }
  overall = group_means.empty() ? 0.0 : sum / double(group_means.size());
}

std::string EvalReport::to_text() const {
  std::string out = fmt::format("[report]\nfingerprint={}\nseed={}\noverall={:.6f}\n", fingerprint, seed, overall);
  for (const auto& [g, m] : group_means) out += fmt::format("\n[group.{}]\nmean={:.6f}\n", g, m);
  for (const auto& t : tasks)
    out += fmt::format("\n[task.{}]\ngroup={}\narm={}\nK={}\nacc@1={:.6f}\nqueries={}\n", t.task, t.group, t.arm, t.k,
                       t.acc_at_1, t.queries);
  return out;
}

std::string report_table_header() { return "task\tarm\tK\tacc@1\tgroup\tseed\n"; }

std::string report_table_rows(const std::vector<TaskResult>& rows) {
  std::string out;
  for (const auto& r : rows)
    out += fmt::format("{}\t{}\t{}\t{:.6f}\t{}\t{}\n", r.task, r.arm, r.k, r.acc_at_1, r.group, r.seed);
  return out;
}

template <typename T>
TaskResult evaluate_task(const Embedder<T>& embedder, const SyntheticTask& task, const TaskData& data) {
  if (data.queries.size() != data.gold.size() || data.documents.empty())
    throw ShapeError("evaluate: task '" + task.name + "' queries and gold labels disagree");
  for (Index g : data.gold)
    if (g < 0 || g >= static_cast<Index>(data.documents.size()))
      throw ShapeError("evaluate: task '" + task.name + "' gold index outside its corpus");
  const auto index = build_index(embedder, data.documents);
  Index hits = 0;
  for (std::size_t i = 0; i < data.queries.size(); ++i) {
    const RowVector<float> q = embedder(data.queries[i]).values.template cast<float>();
    if (search(index, q, 1).front().doc_id == data.gold[i]) ++hits;
  }
  TaskResult r;
  r.task = task.name;
  r.group = task.group;
  r.queries = static_cast<Index>(data.queries.size());
  r.acc_at_1 = r.queries ? double(hits) / double(r.queries) : 0.0;
  r.seed = task.seed;
  return r;
}

template <typename T>
EvalReport evaluate(const Embedder<T>& embedder, const std::vector<SyntheticTask>& tasks, const TaskVocabulary& vocab,
                    const std::string& arm, Index k, std::uint64_t seed, const std::string& fingerprint) {
  EvalReport rep;
  rep.seed = seed;
  rep.fingerprint = fingerprint;
  for (const auto& t : tasks) {
    auto r = evaluate_task(embedder, t, generate_task(t, vocab));
    r.arm = arm;
    r.k = k;
    rep.tasks.push_back(std::move(r));
  }
  rep.summarize();
  return rep;
}

std::vector<AblationArm> make_arms(const TrainerConfig& base, const std::vector<std::string>& names,
                                   const std::vector<Index>& k_sweep) {
  std::vector<AblationArm> arms;
  for (const auto& n : names) {
    AblationArm a{n, base};
    if (n == "full") {
    } else if (n == "eos-pooling") {
      a.trainer.pooling = PoolingKind::eos_last;
    } else if (n == "no-mask") {
      a.trainer.mask = MaskArm::none;
    } else if (n == "no-ntp") {
      a.trainer.ntp = false;
    } else {
      throw ConfigError("ablate.arms", "unknown arm '" + n + "'");
    }
    arms.push_back(std::move(a));
  }
  for (Index k : k_sweep) {
    if (k < 1) throw ConfigError("ablate.k_sweep", "K must be at least 1");
    AblationArm a{"K=" + std::to_string(k), base};
    a.trainer.btok_count = k;
    arms.push_back(std::move(a));
  }
  return arms;
}

const std::vector<ReferenceDelta>& reference_deltas() {
  static const std::vector<ReferenceDelta> refs = {{"eos-pooling", -2.9}, {"no-mask", -1.1}, {"no-ntp", -1.4}};
  return refs;
}

const std::map<Index, double>& reference_k_sweep() {
  static const std::map<Index, double> refs = {{1, 57.15}, {4, 58.96}};
  return refs;
}

namespace {

Index reported_k(const TrainerConfig& c) { return c.pooling == PoolingKind::eos_last ? 1 : c.btok_count; }

template <typename T>
std::vector<TaskResult> train_and_eval(const AblationSpec& spec, const AblationArm& arm, std::uint64_t seed,
                                       const TaskVocabulary& vocab) {
  TrainerConfig cfg = arm.trainer;
  cfg.seed = seed;
  const auto source = [&spec, &vocab, &cfg, seed](Index step) {
    return training_batch(spec.train_task, vocab, cfg.global_batch, seed, step);
  };
  Trainer<T> trainer(spec.model, cfg, source);
  while (trainer.next_step() < cfg.total_steps) trainer.step();
  std::vector<SyntheticTask> tasks = spec.eval_tasks;
  for (auto& t : tasks) t.seed = derive_seed(seed, "eval." + t.name);
  const auto rep = evaluate(make_embedder(trainer.state(), cfg), tasks, vocab, arm.name, reported_k(cfg), seed, "");
  return rep.tasks;
}

}  // namespace

AblationReport run_ablation(const AblationSpec& spec, const std::function<void(const std::string&)>& on_progress) {
  if (spec.arms.empty()) throw ConfigError("ablate.arms", "no arms given");
  if (spec.seeds.empty()) throw ConfigError("ablate.seeds", "no seeds given");
  if (spec.eval_tasks.empty()) throw ConfigError("run.eval_tasks", "no evaluation tasks");
  spec.model.validate();
  const auto vocab = TaskVocabulary::for_size(spec.model.vocab_size);
  AblationReport rep;
  for (const auto& arm : spec.arms) {
    ArmSummary s{arm.name, reported_k(arm.trainer), 0.0, 0.0, {}};
    for (auto seed : spec.seeds) {
      auto rows = spec.model.dtype == DType::f64 ? train_and_eval<double>(spec, arm, seed, vocab)
                                                 : train_and_eval<float>(spec, arm, seed, vocab);
      EvalReport one;
      one.tasks = rows;
      one.summarize();
      s.per_seed.push_back(one.overall);
      rep.rows.insert(rep.rows.end(), rows.begin(), rows.end());
      if (on_progress) on_progress(fmt::format("arm={} seed={} overall={:.4f}", arm.name, seed, one.overall));
    }
    s.mean_overall = std::accumulate(s.per_seed.begin(), s.per_seed.end(), 0.0) / double(s.per_seed.size());
    rep.arms.push_back(std::move(s));
  }
  const auto full = std::find_if(rep.arms.begin(), rep.arms.end(), [](const ArmSummary& a) { return a.arm == "full"; });
  if (full != rep.arms.end())
    for (auto& a : rep.arms) a.delta_vs_full = a.mean_overall - full->mean_overall;
  return rep;
}

std::string AblationReport::to_text() const {
  std::string out = fmt::format("{:<14} {:>3} {:>9} {:>10} {:>10}\n", "arm", "K", "acc@1", "delta_pts", "ref_pts");
  for (const auto& a : arms) {
    std::string ref = "-";
    for (const auto& r : reference_deltas())
      if (r.arm == a.arm) ref = fmt::format("{:+.1f}", r.delta);
    if (a.arm.starts_with("K=")) {
      const auto it = reference_k_sweep().find(a.k);
      if (it != reference_k_sweep().end()) ref = fmt::format("{:.2f}", it->second);
    }
    out += fmt::format("{:<14} {:>3} {:>9.4f} {:>+10.1f} {:>10}\n", a.arm, a.k, a.mean_overall, 100.0 * a.delta_vs_full, ref);
  }
  out += "# acc@1: mean over seeds of the macro overall. delta_pts: acc@1 points vs full. ref_pts: full-scale "
         "reference delta, or the reference overall score on K rows\n";
  return out;
}

#define BTOK_INSTANTIATE(T)                                                                                       \
  template struct Embedder<T>;                                                                                    \
  template EmbeddingIndex build_index<T>(const Embedder<T>&, const std::vector<TokenSequence>&);                  \
  template TaskResult evaluate_task<T>(const Embedder<T>&, const SyntheticTask&, const TaskData&);               \
  template EvalReport evaluate<T>(const Embedder<T>&, const std::vector<SyntheticTask>&, const TaskVocabulary&, \
                                  const std::string&, Index, std::uint64_t, const std::string&);

BTOK_INSTANTIATE(float)
BTOK_INSTANTIATE(double)

}  // namespace btok
