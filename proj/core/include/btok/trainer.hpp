#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "btok/condensation.hpp"
#include "btok/model.hpp"
#include "btok/objectives.hpp"
#include "btok/pooling.hpp"

namespace btok {

enum class MaskArm { condensation, none };

struct TrainerConfig {
  Index global_batch = 64;
  Index sub_batch = 16;
  Index total_steps = 500;
  Index warmup_steps = 50;
  double peak_lr = 5e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  LambdaSchedule lambda{0.1, 200, 500};
  Index btok_count = kDefaultBTokCount;
  PoolingKind pooling = PoolingKind::btok_mean;
  MaskArm mask = MaskArm::condensation;
  bool ntp = true;
  // dense_oracle runs the one-pass masked forward instead; both give the same numbers.
  CondensedMode condensation_mode = CondensedMode::two_pass;
  ContrastiveConfig contrastive;
  // Also condense the positive side into its own target segment (off: query side only).
  bool candidate_gic = false;
  TokenId eos_id = 1;
  // Upper bound on the estimated activation bytes of one sub-batch; 0 disables the check.
  std::size_t memory_budget_bytes = 0;

  Index sub_batches() const { return global_batch / sub_batch; }
  void validate() const;
};

struct TrainingPair {
  TokenSequence query;
  TokenSequence positive;
  TokenSequence target;  // NTP target segment for the query side
  TokenSequence positive_target;  // only read with candidate_gic
};

using Batch = std::vector<TrainingPair>;

// Everything that receives gradients: backbone plus BTok bank.
template <typename T>
struct ModelState {
  Parameters<T> params;
  BTokBank<T> bank;

  static ModelState zeros_like(const ModelState& other);
  template <typename F>
  void for_each(F&& f) {
    params.for_each(f);
    f(std::string("btok.bank"), bank.rows);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<ModelState*>(this)->for_each([&](const std::string& n, Matrix<T>& m) { f(n, std::as_const(m)); });
  }
};

template <typename T>
ModelState<T> init_model_state(const ModelConfig& model, const TrainerConfig& cfg);

template <typename T>
struct AdamState {
  ModelState<T> m;
  ModelState<T> v;
  Index steps_taken = 0;
};

template <typename T>
struct EmbeddingBuffer {
  std::vector<RowVector<T>> queries;
  std::vector<RowVector<T>> candidates;
};

template <typename T>
struct GradientCache {
  std::vector<RowVector<T>> queries;
  std::vector<RowVector<T>> candidates;
  double loss = 0.0;
  Matrix<double> similarity;
  bool vacuous = false;
};

template <typename T>
struct PhaseBResult {
  ModelState<T> grads;
  LossReport report;
  EmbeddingBuffer<T> reforward;
  int max_live_contexts = 0;
};

// Rough activation footprint of one sub-batch with gradient recording.
std::size_t estimate_sub_batch_bytes(const ModelConfig& model, const TrainerConfig& cfg, const Batch& batch,
                                     std::size_t scalar_bytes);

// Forward-only embeddings for all |B| pairs, S sub-batches at a time.
template <typename T>
EmbeddingBuffer<T> phase_a(const ModelState<T>& state, const TrainerConfig& cfg, const Batch& batch);

// Full-batch contrastive loss on the buffer and its gradient per embedding.
template <typename T>
GradientCache<T> contrastive_grads(const EmbeddingBuffer<T>& buffer, const ContrastiveConfig& cfg);

// Re-forwards each sub-batch with recording, injects the cached embedding
// gradients at the pooling output, backpropagates lambda(t) * L_ntp in the same
// pass, and accumulates parameter gradients over sub-batches in index order.
template <typename T>
PhaseBResult<T> phase_b(const ModelState<T>& state, const TrainerConfig& cfg, const Batch& batch,
                        const GradientCache<T>& cache, Index step);

// One recording context over the whole batch; the reference for phase_b.
template <typename T>
PhaseBResult<T> monolithic_gradients(const ModelState<T>& state, const TrainerConfig& cfg, const Batch& batch,
                                     Index step);

// Linear warm-up from 0 to peak, then cosine decay to 0 at total_steps.
double learning_rate(const TrainerConfig& cfg, Index step);

// AdamW with decoupled weight decay. Non-finite gradients throw NumericalError
// before anything is modified. Normalization gains and the BTok bank are not decayed.
template <typename T>
void optimizer_step(ModelState<T>& state, AdamState<T>& adam, const ModelState<T>& grads, Index step,
                    const TrainerConfig& cfg);

// Binary checkpoint: model config, step, metadata, named tensors.
template <typename T>
struct Checkpoint {
  ModelState<T> state;
  std::optional<AdamState<T>> optimizer;
  Index step = 0;
  std::map<std::string, std::string> metadata;
};

struct CheckpointInfo {
  std::uint32_t version = 0;
  DType dtype = DType::f32;
  ModelConfig model;
  Index step = 0;
  std::map<std::string, std::string> metadata;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt);
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

template <typename T>
class Trainer {
 public:
  using BatchSource = std::function<Batch(Index step)>;

  Trainer(const ModelConfig& model, const TrainerConfig& cfg, BatchSource source);
  // Resumes from a checkpoint written by save().
  Trainer(Checkpoint<T> ckpt, const TrainerConfig& cfg, BatchSource source);

  // Runs step next_step() and advances.
  LossReport step();
  Index next_step() const { return step_; }
  const ModelState<T>& state() const { return state_; }
  const AdamState<T>& optimizer() const { return adam_; }
  const TrainerConfig& config() const { return cfg_; }
  int max_live_contexts() const { return max_live_contexts_; }

  Checkpoint<T> checkpoint() const;
  void save(const std::filesystem::path& path) const { save_checkpoint(path, checkpoint()); }

 private:
  TrainerConfig cfg_;
  BatchSource source_;
  ModelState<T> state_;
  AdamState<T> adam_;
  Index step_ = 0;
  int max_live_contexts_ = 0;
};

std::map<std::string, std::string> trainer_metadata(const TrainerConfig& cfg);

}  // namespace btok
