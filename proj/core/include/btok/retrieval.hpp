#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "btok/trainer.hpp"

namespace btok {

// Token layout shared by all synthetic tasks:
//   0 unused, 1 EOS, 2 question marker, then keys, their values (one per key),
//   and the remaining ids as distractors.
struct TaskVocabulary {
  TokenId eos = 1;
  TokenId marker = 2;
  TokenId key_begin = 3;
  Index n_keys = 0;
  TokenId value_begin = 0;
  TokenId distractor_begin = 0;
  Index n_distractors = 0;

  static TaskVocabulary for_size(Index vocab_size);
  TokenId value_of(TokenId key) const { return static_cast<TokenId>(key - key_begin + value_begin); }
  bool is_key(TokenId t) const { return t >= key_begin && t < key_begin + n_keys; }
  bool is_value(TokenId t) const { return t >= value_begin && t < value_begin + n_keys; }
};

enum class TaskFamily { payload_recall, permutation_match, needle_recall };
const char* task_family_name(TaskFamily f);
TaskFamily parse_task_family(const std::string& s);

struct SyntheticTask {
  std::string name = "payload";
  TaskFamily family = TaskFamily::payload_recall;
  std::string group = "recall";
  std::uint64_t seed = 0;
  Index query_len_min = 8;
  Index query_len_max = 12;
  Index doc_len_min = 6;
  Index doc_len_max = 10;
  Index payload_size = 3;
  // Fraction of non-payload query slots copied from a negative document; the rest are fresh distractors.
  double distractor_rate = 0.5;
  Index corpus_size = 256;
  Index query_count = 256;

  void validate(const TaskVocabulary& vocab) const;
};

struct TaskData {
  std::vector<TokenSequence> queries;
  std::vector<TokenSequence> documents;
  std::vector<TokenSequence> targets;  // NTP segment per query
  std::vector<Index> gold;             // gold[i] == i by construction
};

TaskData generate_task(const SyntheticTask& task, const TaskVocabulary& vocab);

// A fresh batch of (query, positive, target) triples for a training step; a pure function of (seed, step).
Batch training_batch(const SyntheticTask& task, const TaskVocabulary& vocab, Index batch_size, std::uint64_t seed,
                     Index step);

// Chooses the pooling path for a trained or baseline model.
template <typename T>
struct Embedder {
  const Parameters<T>* params = nullptr;
  const BTokBank<T>* bank = nullptr;
  PoolingKind pooling = PoolingKind::btok_mean;
  TokenId eos_id = 1;

  EmbeddingVector<T> operator()(std::span<const TokenId> x) const;
};

template <typename T>
Embedder<T> make_embedder(const ModelState<T>& state, const TrainerConfig& cfg) {
  return {&state.params, &state.bank, cfg.pooling, cfg.eos_id};
}

struct EmbeddingIndex {
  Matrix<float> matrix;  // [num_docs x d]
  std::vector<std::int64_t> doc_ids;
  PoolingKind produced_by = PoolingKind::btok_mean;
  std::vector<double> norms;

  Index size() const { return matrix.rows(); }
  Index dim() const { return matrix.cols(); }
};

template <typename T>
EmbeddingIndex build_index(const Embedder<T>& embedder, const std::vector<TokenSequence>& documents);
// Recomputes the norm cache; throws NumericalError on a zero row.
void refresh_norms(EmbeddingIndex& index);

struct SearchHit {
  std::int64_t doc_id = 0;
  double score = 0.0;
};

// Exact cosine scan. Scores descend; equal scores go to the smaller doc id.
std::vector<SearchHit> search(const EmbeddingIndex& index, const RowVector<float>& query, Index top_k);

inline constexpr std::uint32_t kIndexVersion = 1;
void save_index(const std::filesystem::path& path, const EmbeddingIndex& index);
EmbeddingIndex load_index(const std::filesystem::path& path);

struct TaskResult {
  std::string task;
  std::string group;
  std::string arm;
  Index k = 0;
  double acc_at_1 = 0.0;
  Index queries = 0;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::vector<TaskResult> tasks;
  std::map<std::string, double> group_means;
  double overall = 0.0;
  std::string fingerprint;
  std::uint64_t seed = 0;

  // Recomputes group means and overall from `tasks`.
  void summarize();
  std::string to_text() const;
};

std::string report_table_header();
std::string report_table_rows(const std::vector<TaskResult>& rows);

// acc@1 of one prepared task against its own corpus.
template <typename T>
TaskResult evaluate_task(const Embedder<T>& embedder, const SyntheticTask& task, const TaskData& data);

template <typename T>
EvalReport evaluate(const Embedder<T>& embedder, const std::vector<SyntheticTask>& tasks, const TaskVocabulary& vocab,
                    const std::string& arm, Index k, std::uint64_t seed, const std::string& fingerprint);

struct AblationArm {
  std::string name;
  TrainerConfig trainer;
};

// Arm names: full, eos-pooling, no-mask, no-ntp, and K=<n> for the bottleneck-count sweep.
std::vector<AblationArm> make_arms(const TrainerConfig& base, const std::vector<std::string>& names,
                                   const std::vector<Index>& k_sweep);

struct AblationSpec {
  ModelConfig model;
  std::vector<AblationArm> arms;
  SyntheticTask train_task;
  std::vector<SyntheticTask> eval_tasks;
  std::vector<std::uint64_t> seeds;
};

struct ArmSummary {
  std::string arm;
  Index k = 0;
  double mean_overall = 0.0;
  double delta_vs_full = 0.0;
  std::vector<double> per_seed;
};

struct AblationReport {
  std::vector<TaskResult> rows;
  std::vector<ArmSummary> arms;
  std::string to_text() const;
};

// Reference numbers from the full-scale study; reported next to ours, never asserted.
struct ReferenceDelta {
  std::string arm;
  double delta;
};
const std::vector<ReferenceDelta>& reference_deltas();
const std::map<Index, double>& reference_k_sweep();

// Trains one model per (arm, seed) and evaluates every arm on the same corpora.
// `on_progress` is called after each finished run.
AblationReport run_ablation(const AblationSpec& spec,
                            const std::function<void(const std::string&)>& on_progress = {});

}  // namespace btok
