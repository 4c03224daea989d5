#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "btok/retrieval.hpp"

namespace btok {

// Everything a CLI run needs, read from flat `section.key = value` text.
struct RunConfig {
  ModelConfig model;
  TrainerConfig trainer;
  std::vector<SyntheticTask> tasks;  // defaults: payload, permutation, needle
  std::string train_task = "payload";
  std::vector<std::string> eval_tasks = {"payload", "permutation", "needle"};
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;
  Index checkpoint_every = 100;
  std::vector<std::string> ablate_arms = {"full", "eos-pooling", "no-mask", "no-ntp"};
  std::vector<Index> ablate_k_sweep;
  std::vector<std::uint64_t> ablate_seeds = {0, 1, 2, 3, 4};
  Index verify_layouts = 20;

  // Pushes run.seed into the trainer and checks every section.
  void finalize();
  TaskVocabulary vocabulary() const { return TaskVocabulary::for_size(model.vocab_size); }
  const SyntheticTask& task(const std::string& name) const;
  // Eval tasks with generator seeds split off the root seed.
  std::vector<SyntheticTask> resolved_eval_tasks() const;
};

std::vector<SyntheticTask> default_tasks();

// Unknown keys and malformed values throw ConfigError naming the key.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
// Canonical text with every key; parse_run_config(serialize(c)) == c.
std::string serialize_run_config(const RunConfig& cfg);

std::string serialize_trainer_config(const TrainerConfig& cfg);
// Keys whose values differ between two trainer configs.
std::vector<std::string> config_diff(const TrainerConfig& a, const TrainerConfig& b);
// Short stable hash of the canonical text.
std::string config_fingerprint(const std::string& canonical_text);

}  // namespace btok
