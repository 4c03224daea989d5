#include "btok/model.hpp"

#include <cmath>
#include <random>

namespace btok {

Index ModelConfig::mlp_hidden() const {
  return static_cast<Index>(std::llround(mlp_ratio * static_cast<double>(d_model)));
}

void ModelConfig::validate() const {
  if (vocab_size <= 0) throw ConfigError("model.vocab_size", "must be positive");
  if (d_model <= 0) throw ConfigError("model.d_model", "must be positive");
  if (n_layers <= 0) throw ConfigError("model.n_layers", "must be positive");
  if (n_heads <= 0) throw ConfigError("model.n_heads", "must be positive");
  if (d_model % n_heads != 0) throw ConfigError("model.n_heads", "must divide d_model");
  if (head_dim() % 2 != 0) throw ConfigError("model.n_heads", "head dimension d_model/n_heads must be even");
  if (!(mlp_ratio > 0.0) || mlp_hidden() < 1) throw ConfigError("model.mlp_ratio", "must be positive");
  if (max_seq_len <= 0) throw ConfigError("model.max_seq_len", "must be positive");
}

template <typename T>
Parameters<T> Parameters<T>::zeros(const ModelConfig& config) {
  config.validate();
  const Index d = config.d_model;
  const Index h = config.mlp_hidden();
  Parameters<T> p;
  p.config = config;
  p.token_embedding = Matrix<T>::Zero(config.vocab_size, d);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& w : p.layers) {
    w.attn_norm = Matrix<T>::Zero(1, d);
    w.wq = w.wk = w.wv = w.wo = Matrix<T>::Zero(d, d);
    w.mlp_norm = Matrix<T>::Zero(1, d);
    w.w_gate = w.w_up = Matrix<T>::Zero(d, h);
    w.w_down = Matrix<T>::Zero(h, d);
  }
  p.final_norm = Matrix<T>::Zero(1, d);
  p.output_head = Matrix<T>::Zero(d, config.vocab_size);
  return p;
}

template <typename T>
std::size_t Parameters<T>::count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Matrix<T>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <typename T>
Parameters<T> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  Parameters<T> p = Parameters<T>::zeros(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  p.for_each([&](const std::string& name, Matrix<T>& m) {
    const bool is_gain = name.ends_with("norm");
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = is_gain ? T(1) : static_cast<T>(normal(rng));
  });
  return p;
}

template <typename T>
ModelVars<T> bind(Tape<T>& tape, const Parameters<T>& params, std::type_identity_t<Parameters<T>>* grads) {
  ModelVars<T> v;
  v.config = &params.config;
  auto sink = [&](auto member) -> Matrix<T>* { return grads ? &((*grads).*member) : nullptr; };
  v.token_embedding = tape.parameter(params.token_embedding, sink(&Parameters<T>::token_embedding));
  v.layers.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& w = params.layers[l];
    LayerWeights<T>* g = grads ? &grads->layers[l] : nullptr;
    auto bind_one = [&](const Matrix<T>& m, Matrix<T> LayerWeights<T>::*member) {
      return tape.parameter(m, g ? &(g->*member) : nullptr);
    };
    auto& lv = v.layers[l];
    lv.attn_norm = bind_one(w.attn_norm, &LayerWeights<T>::attn_norm);
    lv.wq = bind_one(w.wq, &LayerWeights<T>::wq);
    lv.wk = bind_one(w.wk, &LayerWeights<T>::wk);
    lv.wv = bind_one(w.wv, &LayerWeights<T>::wv);
    lv.wo = bind_one(w.wo, &LayerWeights<T>::wo);
    lv.mlp_norm = bind_one(w.mlp_norm, &LayerWeights<T>::mlp_norm);
    lv.w_gate = bind_one(w.w_gate, &LayerWeights<T>::w_gate);
    lv.w_up = bind_one(w.w_up, &LayerWeights<T>::w_up);
    lv.w_down = bind_one(w.w_down, &LayerWeights<T>::w_down);
  }
  v.final_norm = tape.parameter(params.final_norm, sink(&Parameters<T>::final_norm));
  v.output_head = tape.parameter(params.output_head, sink(&Parameters<T>::output_head));
  return v;
}

template <typename T>
KVCache<T> select_cache_rows(Tape<T>& tape, const KVCache<T>& cache, Index begin, Index count,
                             KvConnectivity connectivity) {
  if (begin < 0 || count < 0 || begin + count > cache.cached_len) throw ShapeError("select_cache_rows: range out of bounds");
  KVCache<T> out;
  out.cached_len = count;
  out.connectivity = connectivity;
  for (std::size_t l = 0; l < cache.keys.size(); ++l) {
    auto k = tape.slice_rows(cache.keys[l], begin, count);
    auto v = tape.slice_rows(cache.values[l], begin, count);
    if (connectivity == KvConnectivity::detached) {
      k = tape.detach(k);
      v = tape.detach(v);
    }
    out.keys.push_back(k);
    out.values.push_back(v);
  }
  return out;
}

template <typename T>
typename Tape<T>::Var embed_tokens(Tape<T>& tape, const ModelVars<T>& vars, std::span<const TokenId> tokens) {
  return tape.gather_rows(vars.token_embedding, tokens);
}

template <typename T>
typename Tape<T>::Var lm_head(Tape<T>& tape, const ModelVars<T>& vars, typename Tape<T>::Var hidden) {
  return tape.matmul(hidden, vars.output_head);
}

template <typename T>
ForwardResult<T> forward(Tape<T>& tape, const ModelVars<T>& vars, typename Tape<T>::Var inputs,
                         const AttentionMaskSpec& mask, const std::type_identity_t<KVCache<T>>* past, const ForwardOptions<T>& options) {
  using Var = typename Tape<T>::Var;
  const ModelConfig& cfg = *vars.config;
  const Index len = tape.value(inputs).rows();
  const Index past_len = past ? past->cached_len : 0;
  if (tape.value(inputs).cols() != cfg.d_model) throw ShapeError("forward: input width must equal d_model");
  if (len + past_len > cfg.max_seq_len) {
    throw ShapeError("forward: length overflow (" + std::to_string(len + past_len) + " > max_seq_len " +
                     std::to_string(cfg.max_seq_len) + ")");
  }
  if (past && static_cast<Index>(past->keys.size()) != cfg.n_layers) throw ShapeError("forward: cache layer count mismatch");

  std::vector<Index> positions(static_cast<std::size_t>(len));
  if (!options.positions.empty()) {
    if (static_cast<Index>(options.positions.size()) != len) throw ShapeError("forward: one position per token required");
    positions.assign(options.positions.begin(), options.positions.end());
  } else {
    for (Index i = 0; i < len; ++i) positions[static_cast<std::size_t>(i)] = past_len + i;
  }

  AttendRule rule;
  rule.causal_offset = past_len;
  if (mask.kind == MaskKind::explicit_dense) {
    if (!mask.dense) throw ShapeError("forward: explicit mask kind without a matrix");
    const BinaryMask& m = *mask.dense;
    if (m.rows() != len || m.cols() != past_len + len) throw ShapeError("forward: mask shape mismatch");
    for (Index i = 0; i < len; ++i)
      if (!m(i, past_len + i)) throw ShapeError("forward: mask must permit every diagonal entry");
    rule.dense = &m;
  }

  const auto* ov = options.kv_override;
  if (ov) {
    const Index n = ov->keys.empty() ? 0 : ov->keys[0].rows();
    if (static_cast<Index>(ov->keys.size()) != cfg.n_layers || ov->begin < 0 || ov->begin + n > len)
      throw ShapeError("forward: kv override out of range");
  }

  ForwardResult<T> res;
  if (options.want_cache) {
    res.cache.emplace();
    res.cache->cached_len = past_len + len;
  }
  const T eps = static_cast<T>(kRmsEps);
  const T base = static_cast<T>(kRopeBase);
  Var x = inputs;
  for (Index l = 0; l < cfg.n_layers; ++l) {
    const auto& w = vars.layers[static_cast<std::size_t>(l)];
    Var hn = tape.rms_norm(x, w.attn_norm, eps);
    Var q = tape.rope(tape.matmul(hn, w.wq), positions, cfg.n_heads, base);
    Var k = tape.rope(tape.matmul(hn, w.wk), positions, cfg.n_heads, base);
    Var v = tape.matmul(hn, w.wv);
    if (ov) {
      const auto lu = static_cast<std::size_t>(l);
      const Index n = ov->keys[lu].rows();
      auto splice = [&](Var full, const Matrix<T>& rows) {
        std::vector<Var> parts{tape.slice_rows(full, 0, ov->begin), tape.constant(rows),
                               tape.slice_rows(full, ov->begin + n, len - ov->begin - n)};
        return tape.concat_rows(parts);
      };
      k = splice(k, ov->keys[lu]);
      v = splice(v, ov->values[lu]);
    }
    if (past) {
      std::vector<Var> ks{past->keys[static_cast<std::size_t>(l)], k};
      std::vector<Var> vs{past->values[static_cast<std::size_t>(l)], v};
      k = tape.concat_rows(ks);
      v = tape.concat_rows(vs);
    }
    if (res.cache) {
      res.cache->keys.push_back(k);
      res.cache->values.push_back(v);
    }
    const bool last = l + 1 == cfg.n_layers;
    Var a = tape.attention(q, k, v, cfg.n_heads, rule, last ? &res.attention_row_sums : nullptr);
    x = tape.add(x, tape.matmul(a, w.wo));
    Var hm = tape.rms_norm(x, w.mlp_norm, eps);
    Var gated = tape.mul(tape.silu(tape.matmul(hm, w.w_gate)), tape.matmul(hm, w.w_up));
    x = tape.add(x, tape.matmul(gated, w.w_down));
  }
  res.hidden = tape.rms_norm(x, vars.final_norm, eps);
  if (!tape.value(res.hidden).allFinite()) throw NumericalError("forward: non-finite activations");
  if (options.want_logits) res.logits = lm_head(tape, vars, res.hidden);
  res.positions_processed = len;
  return res;
}

#define BTOK_INSTANTIATE(T)                                                                                  \
  template struct Parameters<T>;                                                                             \
  template Parameters<T> init_parameters<T>(const ModelConfig&, std::uint64_t);                              \
  template ModelVars<T> bind<T>(Tape<T>&, const Parameters<T>&, Parameters<T>*);                             \
  template KVCache<T> select_cache_rows<T>(Tape<T>&, const KVCache<T>&, Index, Index, KvConnectivity);       \
  template Tape<T>::Var embed_tokens<T>(Tape<T>&, const ModelVars<T>&, std::span<const TokenId>);            \
  template Tape<T>::Var lm_head<T>(Tape<T>&, const ModelVars<T>&, Tape<T>::Var);                             \
  template ForwardResult<T> forward<T>(Tape<T>&, const ModelVars<T>&, Tape<T>::Var, const AttentionMaskSpec&, \
                                       const KVCache<T>*, const ForwardOptions<T>&);

BTOK_INSTANTIATE(float)
BTOK_INSTANTIATE(double)

}  // namespace btok
