#include "btok/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include "btok/rng.hpp"

namespace btok {

void TrainerConfig::validate() const {
  if (global_batch <= 0) throw ConfigError("trainer.global_batch", "must be positive");
  if (sub_batch <= 0) throw ConfigError("trainer.sub_batch", "must be positive");
  if (global_batch % sub_batch != 0) throw ConfigError("trainer.sub_batch", "must divide trainer.global_batch");
  if (total_steps <= 0) throw ConfigError("trainer.total_steps", "must be positive");
  if (warmup_steps < 0 || warmup_steps > total_steps) throw ConfigError("trainer.warmup_steps", "must lie in [0, total_steps]");
  if (!(peak_lr >= 0.0) || !std::isfinite(peak_lr)) throw ConfigError("trainer.peak_lr", "must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("trainer.weight_decay", "must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("trainer.beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("trainer.beta2", "must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("trainer.adam_eps", "must be > 0");
  if (btok_count < 1) throw ConfigError("btok.count", "K must be at least 1");
  if (eos_id < 0) throw ConfigError("btok.eos_id", "must be a token id");
  lambda.validate();
  if (lambda.total_steps != total_steps)
    throw ConfigError("objective.lambda.total_steps", "must equal trainer.total_steps");
  contrastive.validate();
}

template <typename T>
ModelState<T> ModelState<T>::zeros_like(const ModelState& other) {
  ModelState z{Parameters<T>::zeros(other.params.config), {}};
  z.bank.rows = Matrix<T>::Zero(other.bank.rows.rows(), other.bank.rows.cols());
  return z;
}

template <typename T>
ModelState<T> init_model_state(const ModelConfig& model, const TrainerConfig& cfg) {
  cfg.validate();
  ModelState<T> s;
  s.params = init_parameters<T>(model, derive_seed(cfg.seed, "init"));
  s.bank = init_btoks(s.params, cfg.btok_count, cfg.eos_id);
  return s;
}

namespace {

bool ntp_active(const TrainerConfig& cfg, Index step) { return cfg.ntp && lambda_at(cfg.lambda, step) > 0.0; }

template <typename T>
struct ExampleVars {
  typename Tape<T>::Var query;
  typename Tape<T>::Var candidate;
  std::vector<typename Tape<T>::Var> ntp;
};

// Records one (query, positive) pair. The query side carries the NTP branch when active.
template <typename T>
ExampleVars<T> record_example(Tape<T>& tape, const ModelVars<T>& vars, typename Tape<T>::Var bank,
                              const TrainerConfig& cfg, const TrainingPair& pair, bool with_ntp) {
  const auto bottleneck = cfg.pooling == PoolingKind::btok_mean ? bank : eos_bottleneck(tape, vars, cfg.eos_id);
  ExampleVars<T> ex;
  const auto mode = cfg.mask == MaskArm::none ? CondensedMode::unmasked_causal : cfg.condensation_mode;
  auto side = [&](const TokenSequence& x, const TokenSequence& target, bool condense) {
    if (!condense) return pool_bottleneck(tape, vars, x, bottleneck).embedding;
    const auto cf = condensed_forward(tape, vars, segment_inputs(tape, vars, bottleneck, x, target), mode);
    ex.ntp.push_back(tape.cross_entropy(cf.target_logits, target));
    return cf.embedding;
  };
  ex.query = side(pair.query, pair.target, with_ntp);
  ex.candidate = side(pair.positive, pair.positive_target, with_ntp && cfg.candidate_gic);
  return ex;
}

void check_batch(const TrainerConfig& cfg, const Batch& batch) {
  if (static_cast<Index>(batch.size()) != cfg.global_batch)
    throw ShapeError("batch holds " + std::to_string(batch.size()) + " pairs, expected trainer.global_batch = " +
                     std::to_string(cfg.global_batch));
}

void check_budget(const ModelConfig& model, const TrainerConfig& cfg, const Batch& batch, std::size_t scalar_bytes) {
  if (cfg.memory_budget_bytes == 0) return;
  const std::size_t need = estimate_sub_batch_bytes(model, cfg, batch, scalar_bytes);
  if (need > cfg.memory_budget_bytes)
    throw ResourceError("sub-batch activation estimate " + std::to_string(need) + " bytes exceeds budget " +
                        std::to_string(cfg.memory_budget_bytes) + "; lower trainer.sub_batch");
}

template <typename T>
RowVector<T> row_of(const Tape<T>& tape, typename Tape<T>::Var v) {
  return tape.value(v);
}

}  // namespace

std::size_t estimate_sub_batch_bytes(const ModelConfig& model, const TrainerConfig& cfg, const Batch& batch,
                                     std::size_t scalar_bytes) {
  const auto d = static_cast<std::size_t>(model.d_model);
  const auto h = static_cast<std::size_t>(model.mlp_hidden());
  const auto heads = static_cast<std::size_t>(model.n_heads);
  const auto layers = static_cast<std::size_t>(model.n_layers);
  const auto k = static_cast<std::size_t>(cfg.pooling == PoolingKind::btok_mean ? cfg.btok_count : 1);
  auto seq_bytes = [&](std::size_t len) { return len * layers * (12 * d + 3 * h + heads * len) * scalar_bytes; };
  std::size_t worst = 0;
  for (std::size_t s = 0; s < batch.size(); s += static_cast<std::size_t>(cfg.sub_batch)) {
    std::size_t total = 0;
    for (std::size_t i = s; i < std::min(batch.size(), s + static_cast<std::size_t>(cfg.sub_batch)); ++i) {
      total += seq_bytes(batch[i].query.size() + k + batch[i].target.size());
      total += seq_bytes(batch[i].positive.size() + k + (cfg.candidate_gic ? batch[i].positive_target.size() : 0));
    }
    worst = std::max(worst, total);
  }
  return worst;
}

template <typename T>
EmbeddingBuffer<T> phase_a(const ModelState<T>& state, const TrainerConfig& cfg, const Batch& batch) {
  cfg.validate();
  check_batch(cfg, batch);
  check_budget(state.params.config, cfg, batch, sizeof(T));
  EmbeddingBuffer<T> buf;
  buf.queries.reserve(batch.size());
  buf.candidates.reserve(batch.size());
  for (Index s = 0; s < cfg.sub_batches(); ++s) {
    Tape<T> tape(GradMode::inference);
    const auto vars = bind(tape, state.params, nullptr);
    const auto bank = tape.parameter(state.bank.rows, nullptr);
    for (Index i = s * cfg.sub_batch; i < (s + 1) * cfg.sub_batch; ++i) {
      const auto ex = record_example(tape, vars, bank, cfg, batch[static_cast<std::size_t>(i)], false);
      buf.queries.push_back(row_of(tape, ex.query));
      buf.candidates.push_back(row_of(tape, ex.candidate));
    }
  }
  return buf;
}

template <typename T>
GradientCache<T> contrastive_grads(const EmbeddingBuffer<T>& buffer, const ContrastiveConfig& cfg) {
  if (buffer.queries.empty() || buffer.queries.size() != buffer.candidates.size())
    throw ShapeError("contrastive_grads: incomplete embedding buffer");
  const auto r = infonce_with_grad<T>(buffer.queries, buffer.candidates, cfg);
  GradientCache<T> c;
  c.queries = r.query_grads;
  c.candidates = r.cand_grads;
  c.loss = static_cast<double>(r.loss);
  c.similarity = r.similarity.template cast<double>();
  c.vacuous = r.vacuous;
  return c;
}

template <typename T>
PhaseBResult<T> phase_b(const ModelState<T>& state, const TrainerConfig& cfg, const Batch& batch,
                        const GradientCache<T>& cache, Index step) {
  cfg.validate();
  check_batch(cfg, batch);
  if (cache.queries.size() != batch.size() || cache.candidates.size() != batch.size())
    throw ShapeError("phase_b: gradient cache is not aligned with the batch");
  check_budget(state.params.config, cfg, batch, sizeof(T));

  const double lambda = lambda_at(cfg.lambda, step);
  const bool with_ntp = ntp_active(cfg, step);
  const T ntp_weight = static_cast<T>(lambda / static_cast<double>(batch.size()));

  PhaseBResult<T> out;
  out.grads = ModelState<T>::zeros_like(state);
  double ntp_sum = 0.0;
  for (Index s = 0; s < cfg.sub_batches(); ++s) {
    Tape<T> tape(GradMode::record);
    out.max_live_contexts = std::max(out.max_live_contexts, Tape<T>::live_recording_contexts());
    const auto vars = bind(tape, state.params, &out.grads.params);
    const auto bank = tape.parameter(state.bank.rows, &out.grads.bank.rows);
    std::vector<typename Tape<T>::Seed> seeds;
    for (Index i = s * cfg.sub_batch; i < (s + 1) * cfg.sub_batch; ++i) {
      const auto iu = static_cast<std::size_t>(i);
      const auto ex = record_example(tape, vars, bank, cfg, batch[iu], with_ntp);
      seeds.push_back({ex.query, cache.queries[iu]});
      seeds.push_back({ex.candidate, cache.candidates[iu]});
      for (const auto n : ex.ntp) {
        seeds.push_back({n, Matrix<T>::Constant(1, 1, ntp_weight)});
        ntp_sum += static_cast<double>(tape.value(n)(0, 0));
      }
      out.reforward.queries.push_back(row_of(tape, ex.query));
      out.reforward.candidates.push_back(row_of(tape, ex.candidate));
    }
    tape.backward(seeds);
  }

  auto& r = out.report;
  r.step = step;
  r.lr = learning_rate(cfg, step);
  r.lambda = lambda;
  r.ctr = cache.loss;
  r.ntp = with_ntp ? ntp_sum / static_cast<double>(batch.size()) : 0.0;
  r.total = joint_loss(r.ctr, r.ntp, r.lambda);
  r.similarity = cache.similarity;
  return out;
}

template <typename T>
PhaseBResult<T> monolithic_gradients(const ModelState<T>& state, const TrainerConfig& cfg, const Batch& batch,
                                     Index step) {
  using Var = typename Tape<T>::Var;
  cfg.validate();
  check_batch(cfg, batch);
  const double lambda = lambda_at(cfg.lambda, step);
  const bool with_ntp = ntp_active(cfg, step);
  const T ntp_weight = static_cast<T>(lambda / static_cast<double>(batch.size()));

  PhaseBResult<T> out;
  out.grads = ModelState<T>::zeros_like(state);
  Tape<T> tape(GradMode::record);
  out.max_live_contexts = Tape<T>::live_recording_contexts();
  const auto vars = bind(tape, state.params, &out.grads.params);
  const auto bank = tape.parameter(state.bank.rows, &out.grads.bank.rows);
  std::vector<Var> qs, cs, ntps;
  for (const auto& pair : batch) {
    const auto ex = record_example(tape, vars, bank, cfg, pair, with_ntp);
    qs.push_back(ex.query);
    cs.push_back(ex.candidate);
    ntps.insert(ntps.end(), ex.ntp.begin(), ex.ntp.end());
    out.reforward.queries.push_back(row_of(tape, ex.query));
    out.reforward.candidates.push_back(row_of(tape, ex.candidate));
  }
  std::vector<TokenId> labels(batch.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<TokenId>(i);
  const T inv_tau = static_cast<T>(1.0 / cfg.contrastive.temperature);
  const Var u = tape.l2_normalize_rows(tape.concat_rows(qs));
  const Var w = tape.l2_normalize_rows(tape.concat_rows(cs));
  const Var sim = tape.matmul_nt(u, w);
  Var ctr = tape.cross_entropy(tape.scale(sim, inv_tau), labels);
  if (cfg.contrastive.symmetric) {
    const Var back = tape.cross_entropy(tape.scale(tape.matmul_nt(w, u), inv_tau), labels);
    ctr = tape.scale(tape.add(ctr, back), T(0.5));
  }
  Var total = ctr;
  double ntp_sum = 0.0;
  for (Var n : ntps) {
    total = tape.add(total, tape.scale(n, ntp_weight));
    ntp_sum += static_cast<double>(tape.value(n)(0, 0));
  }
  tape.backward(total);

  auto& r = out.report;
  r.step = step;
  r.lr = learning_rate(cfg, step);
  r.lambda = lambda;
  r.ctr = static_cast<double>(tape.value(ctr)(0, 0));
  r.ntp = with_ntp ? ntp_sum / static_cast<double>(batch.size()) : 0.0;
  r.total = joint_loss(r.ctr, r.ntp, r.lambda);
  r.similarity = tape.value(sim).template cast<double>();
  return out;
}

double learning_rate(const TrainerConfig& cfg, Index step) {
  if (step < 0 || step >= cfg.total_steps) throw std::out_of_range("learning_rate: step outside the schedule");
  if (step < cfg.warmup_steps) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const double span = static_cast<double>(std::max<Index>(1, cfg.total_steps - cfg.warmup_steps));
  const double progress = static_cast<double>(step - cfg.warmup_steps) / span;
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

bool decays(const std::string& name) { return !name.ends_with("norm") && name != "btok.bank"; }

}  // namespace

template <typename T>
void optimizer_step(ModelState<T>& state, AdamState<T>& adam, const ModelState<T>& grads, Index step,
                    const TrainerConfig& cfg) {
  bool finite = true;
  grads.for_each([&](const std::string&, const Matrix<T>& g) { finite = finite && g.allFinite(); });
  if (!finite) throw NumericalError("optimizer_step: non-finite gradient; step rejected");
  if (adam.m.params.layers.empty()) {
    adam.m = ModelState<T>::zeros_like(state);
    adam.v = ModelState<T>::zeros_like(state);
  }

  const double lr = learning_rate(cfg, step);
  const Index n = adam.steps_taken + 1;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(n)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(n)));
  const T eps = static_cast<T>(cfg.adam_eps);
  const T step_lr = static_cast<T>(lr);
  const T decay = static_cast<T>(lr * cfg.weight_decay);

  std::vector<Matrix<T>*> ms, vs;
  std::vector<const Matrix<T>*> gs;
  adam.m.for_each([&](const std::string&, Matrix<T>& m) { ms.push_back(&m); });
  adam.v.for_each([&](const std::string&, Matrix<T>& v) { vs.push_back(&v); });
  grads.for_each([&](const std::string&, const Matrix<T>& g) { gs.push_back(&g); });
  std::size_t i = 0;
  state.for_each([&](const std::string& name, Matrix<T>& p) {
    Matrix<T>& m = *ms[i];
    Matrix<T>& v = *vs[i];
    const Matrix<T>& g = *gs[i];
    ++i;
    if (decays(name) && decay != T(0)) p -= decay * p;
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
    p.array() -= step_lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  });
  adam.steps_taken = n;
}

std::map<std::string, std::string> trainer_metadata(const TrainerConfig& cfg) {
  return {
      {"btok.count", std::to_string(cfg.btok_count)},
      {"btok.eos_id", std::to_string(cfg.eos_id)},
      {"trainer.pooling", pooling_name(cfg.pooling)},
      {"trainer.mask", cfg.mask == MaskArm::condensation ? "condensation" : "none"},
      {"trainer.ntp", cfg.ntp ? "on" : "off"},
      {"trainer.seed", std::to_string(cfg.seed)},
  };
}

template <typename T>
Trainer<T>::Trainer(const ModelConfig& model, const TrainerConfig& cfg, BatchSource source)
    : cfg_(cfg), source_(std::move(source)), state_(init_model_state<T>(model, cfg)) {
  adam_.m = ModelState<T>::zeros_like(state_);
  adam_.v = ModelState<T>::zeros_like(state_);
}

template <typename T>
Trainer<T>::Trainer(Checkpoint<T> ckpt, const TrainerConfig& cfg, BatchSource source)
    : cfg_(cfg), source_(std::move(source)), state_(std::move(ckpt.state)), step_(ckpt.step) {
  cfg_.validate();
  if (ckpt.optimizer) {
    adam_ = std::move(*ckpt.optimizer);
  } else {
    adam_.m = ModelState<T>::zeros_like(state_);
    adam_.v = ModelState<T>::zeros_like(state_);
  }
}

template <typename T>
LossReport Trainer<T>::step() {
  if (step_ >= cfg_.total_steps) throw std::out_of_range("Trainer::step: schedule exhausted");
  const auto t0 = std::chrono::steady_clock::now();
  const Batch batch = source_(step_);
  const auto buffer = phase_a(state_, cfg_, batch);
  const auto cache = contrastive_grads(buffer, cfg_.contrastive);
  auto pb = phase_b(state_, cfg_, batch, cache, step_);
  max_live_contexts_ = std::max(max_live_contexts_, pb.max_live_contexts);
  optimizer_step(state_, adam_, pb.grads, step_, cfg_);
  ++step_;
  pb.report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return pb.report;
}

template <typename T>
Checkpoint<T> Trainer<T>::checkpoint() const {
  Checkpoint<T> c;
  c.state = state_;
  c.optimizer = adam_;
  c.step = step_;
  c.metadata = trainer_metadata(cfg_);
  return c;
}

#define BTOK_INSTANTIATE(T)                                                                                       \
  template struct ModelState<T>;                                                                                  \
  template ModelState<T> init_model_state<T>(const ModelConfig&, const TrainerConfig&);                           \
  template EmbeddingBuffer<T> phase_a<T>(const ModelState<T>&, const TrainerConfig&, const Batch&);               \
  template GradientCache<T> contrastive_grads<T>(const EmbeddingBuffer<T>&, const ContrastiveConfig&);            \
  template PhaseBResult<T> phase_b<T>(const ModelState<T>&, const TrainerConfig&, const Batch&,                   \
                                      const GradientCache<T>&, Index);                                            \
  template PhaseBResult<T> monolithic_gradients<T>(const ModelState<T>&, const TrainerConfig&, const Batch&, Index); \
  template void optimizer_step<T>(ModelState<T>&, AdamState<T>&, const ModelState<T>&, Index, const TrainerConfig&); \
  template class Trainer<T>;

BTOK_INSTANTIATE(float)
BTOK_INSTANTIATE(double)

}  // namespace btok
