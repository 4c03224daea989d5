#pragma once

#include <cstdint>
#include <optional>
#include <type_traits>
#include <span>
#include <string>
#include <vector>

#include "btok/autograd.hpp"
#include "btok/tensor.hpp"

namespace btok {

struct ModelConfig {
  Index vocab_size = 64;
  Index d_model = 32;
  Index n_layers = 2;
  Index n_heads = 4;
  double mlp_ratio = 2.0;
  Index max_seq_len = 256;
  DType dtype = DType::f32;

  Index head_dim() const { return d_model / n_heads; }
  Index mlp_hidden() const;
  // Throws ConfigError naming the first invalid field.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerWeights {
  Matrix<T> attn_norm;  // [1 x d]
  Matrix<T> wq, wk, wv, wo;  // [d x d]
  Matrix<T> mlp_norm;  // [1 x d]
  Matrix<T> w_gate, w_up;  // [d x hidden]
  Matrix<T> w_down;  // [hidden x d]
};

// Backbone weights. Also used, zero-filled, as the gradient accumulator.
template <typename T>
struct Parameters {
  ModelConfig config;
  Matrix<T> token_embedding;  // [vocab x d]
  std::vector<LayerWeights<T>> layers;
  Matrix<T> final_norm;  // [1 x d]
  Matrix<T> output_head;  // [d x vocab]

  static Parameters zeros(const ModelConfig& config);

  // Visits every tensor in checkpoint order with its stable name.
  template <typename F>
  void for_each(F&& f) {
    f(std::string("token_embedding"), token_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& w = layers[l];
      f(p + "attn_norm", w.attn_norm);
      f(p + "wq", w.wq);
      f(p + "wk", w.wk);
      f(p + "wv", w.wv);
      f(p + "wo", w.wo);
      f(p + "mlp_norm", w.mlp_norm);
      f(p + "w_gate", w.w_gate);
      f(p + "w_up", w.w_up);
      f(p + "w_down", w.w_down);
    }
    f(std::string("final_norm"), final_norm);
    f(std::string("output_head"), output_head);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<Parameters*>(this)->for_each([&](const std::string& n, Matrix<T>& m) { f(n, std::as_const(m)); });
  }

  std::size_t count() const;
};

// Deterministic for fixed (config, seed): N(0, 0.02) weights, unit normalization gains.
template <typename T>
Parameters<T> init_parameters(const ModelConfig& config, std::uint64_t seed);

// Parameters bound as leaves of one tape.
template <typename T>
struct ModelVars {
  using Var = typename Tape<T>::Var;
  struct Layer {
    Var attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down;
  };
  const ModelConfig* config = nullptr;
  Var token_embedding;
  std::vector<Layer> layers;
  Var final_norm;
  Var output_head;
};

// `grads` may be null, in which case the parameters are constants on the tape.
template <typename T>
ModelVars<T> bind(Tape<T>& tape, const Parameters<T>& params, std::type_identity_t<Parameters<T>>* grads);

enum class MaskKind { standard_causal, explicit_dense };

struct AttentionMaskSpec {
  MaskKind kind = MaskKind::standard_causal;
  std::optional<BinaryMask> dense;  // [T x (past + T)] for explicit_dense

  static AttentionMaskSpec causal() { return {}; }
  static AttentionMaskSpec explicit_mask(BinaryMask m) { return {MaskKind::explicit_dense, std::move(m)}; }
};

enum class KvConnectivity { connected, detached };

// Per-layer post-rotary keys and values, stored as vars of the tape that made them.
template <typename T>
struct KVCache {
  using Var = typename Tape<T>::Var;
  std::vector<Var> keys;    // [cached_len x d] per layer
  std::vector<Var> values;  // [cached_len x d] per layer
  Index cached_len = 0;
  KvConnectivity connectivity = KvConnectivity::connected;
};

// Rows [begin, begin + count) of `cache`; detached selection cuts gradient flow into the source.
template <typename T>
KVCache<T> select_cache_rows(Tape<T>& tape, const KVCache<T>& cache, Index begin, Index count,
                             KvConnectivity connectivity);

// Constant per-layer K/V that replace rows [begin, begin + n) of the new segment.
template <typename T>
struct KvOverride {
  Index begin = 0;
  std::vector<Matrix<T>> keys;
  std::vector<Matrix<T>> values;
};

template <typename T>
struct ForwardOptions {
  bool want_cache = false;
  bool want_logits = true;
  // Absolute rotary positions per new row; defaults to past.cached_len + i.
  std::span<const Index> positions = {};
  const KvOverride<T>* kv_override = nullptr;
};

template <typename T>
struct ForwardResult {
  using Var = typename Tape<T>::Var;
  Var hidden;  // [T x d] final-normalized hidden states
  Var logits;  // [T x vocab]; invalid when not requested
  std::optional<KVCache<T>> cache;  // past rows followed by new rows
  std::vector<T> attention_row_sums;  // last layer, averaged over heads
  Index positions_processed = 0;
};

template <typename T>
typename Tape<T>::Var embed_tokens(Tape<T>& tape, const ModelVars<T>& vars, std::span<const TokenId> tokens);

// Runs the decoder over `inputs` ([T x d] input embeddings).
template <typename T>
ForwardResult<T> forward(Tape<T>& tape, const ModelVars<T>& vars, typename Tape<T>::Var inputs,
                         const AttentionMaskSpec& mask, const std::type_identity_t<KVCache<T>>* past = nullptr,
                         const ForwardOptions<T>& options = {});

// Projects final hidden rows to vocabulary logits.
template <typename T>
typename Tape<T>::Var lm_head(Tape<T>& tape, const ModelVars<T>& vars, typename Tape<T>::Var hidden);

inline constexpr double kRmsEps = 1e-5;
inline constexpr double kRopeBase = 10000.0;

}  // namespace btok
