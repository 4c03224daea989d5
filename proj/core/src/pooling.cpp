#include "btok/pooling.hpp"

namespace btok {

const char* pooling_name(PoolingKind p) { return p == PoolingKind::btok_mean ? "btok" : "eos"; }

template <typename T>
BTokBank<T> init_btoks(const Parameters<T>& params, Index k, TokenId init_token_id) {
  if (k <= 0) throw ConfigError("btok.count", "K must be at least 1");
  if (init_token_id < 0 || init_token_id >= params.config.vocab_size)
    throw ConfigError("btok.init_token", "token id out of vocabulary range");
  BTokBank<T> bank;
  bank.rows = params.token_embedding.row(init_token_id).replicate(k, 1);
  return bank;
}

namespace {

template <typename T>
AugmentedSequence<T> augment_embeddings(Tape<T>& tape, const ModelVars<T>& vars, typename Tape<T>::Var inputs,
                                        typename Tape<T>::Var bottleneck) {
  const Index n = tape.value(inputs).rows();
  const Index k = tape.value(bottleneck).rows();
  if (k < 1) throw ShapeError("augment: empty bottleneck");
  if (n + k > vars.config->max_seq_len) throw ShapeError("augment: length overflow");
  std::vector<typename Tape<T>::Var> parts{inputs, bottleneck};
  return AugmentedSequence<T>{tape.concat_rows(parts), n, k};
}

}  // namespace

template <typename T>
AugmentedSequence<T> augment(Tape<T>& tape, const ModelVars<T>& vars, std::span<const TokenId> x,
                             typename Tape<T>::Var bottleneck) {
  if (static_cast<Index>(x.size()) + tape.value(bottleneck).rows() > vars.config->max_seq_len)
    throw ShapeError("augment: length overflow");
  return augment_embeddings(tape, vars, embed_tokens(tape, vars, x), bottleneck);
}

template <typename T>
PooledOutput<T> pool_bottleneck(Tape<T>& tape, const ModelVars<T>& vars, std::span<const TokenId> x,
                                typename Tape<T>::Var bottleneck, bool want_cache) {
  if (static_cast<Index>(x.size()) + tape.value(bottleneck).rows() > vars.config->max_seq_len)
    throw ShapeError("augment: length overflow");
  return pool_bottleneck(tape, vars, embed_tokens(tape, vars, x), bottleneck, want_cache);
}

template <typename T>
PooledOutput<T> pool_bottleneck(Tape<T>& tape, const ModelVars<T>& vars, typename Tape<T>::Var input_embeddings,
                                typename Tape<T>::Var bottleneck, bool want_cache) {
  PooledOutput<T> out;
  out.sequence = augment_embeddings(tape, vars, input_embeddings, bottleneck);
  ForwardOptions<T> opts;
  opts.want_cache = want_cache;
  opts.want_logits = false;
  out.forward = forward(tape, vars, out.sequence.embeddings, AttentionMaskSpec::causal(), nullptr, opts);
  auto rows = tape.slice_rows(out.forward.hidden, out.sequence.btok_begin(), out.sequence.btok_count);
  out.embedding = tape.mean_rows(rows);
  return out;
}

template <typename T>
typename Tape<T>::Var eos_bottleneck(Tape<T>& tape, const ModelVars<T>& vars, TokenId eos_id) {
  const TokenId ids[1] = {eos_id};
  return embed_tokens(tape, vars, std::span<const TokenId>(ids));
}

template <typename T>
EmbeddingVector<T> embed(const Parameters<T>& params, const BTokBank<T>& bank, std::span<const TokenId> x) {
  Tape<T> tape(GradMode::inference);
  auto vars = bind(tape, params, nullptr);
  auto b = tape.parameter(bank.rows, nullptr);
  auto pooled = pool_bottleneck(tape, vars, x, b);
  return EmbeddingVector<T>{tape.value(pooled.embedding), PoolingKind::btok_mean, pooled.forward.positions_processed};
}

template <typename T>
EmbeddingVector<T> embed_eos_baseline(const Parameters<T>& params, std::span<const TokenId> x, TokenId eos_id) {
  Tape<T> tape(GradMode::inference);
  auto vars = bind(tape, params, nullptr);
  auto pooled = pool_bottleneck(tape, vars, x, eos_bottleneck(tape, vars, eos_id));
  return EmbeddingVector<T>{tape.value(pooled.embedding), PoolingKind::eos_last, pooled.forward.positions_processed};
}

#define BTOK_INSTANTIATE(T)                                                                                     \
  template BTokBank<T> init_btoks<T>(const Parameters<T>&, Index, TokenId);                                     \
  template AugmentedSequence<T> augment<T>(Tape<T>&, const ModelVars<T>&, std::span<const TokenId>, Tape<T>::Var); \
  template PooledOutput<T> pool_bottleneck<T>(Tape<T>&, const ModelVars<T>&, std::span<const TokenId>,          \
                                              Tape<T>::Var, bool);                                              \
  template PooledOutput<T> pool_bottleneck<T>(Tape<T>&, const ModelVars<T>&, Tape<T>::Var, Tape<T>::Var, bool); \
  template Tape<T>::Var eos_bottleneck<T>(Tape<T>&, const ModelVars<T>&, TokenId);                              \
  template EmbeddingVector<T> embed<T>(const Parameters<T>&, const BTokBank<T>&, std::span<const TokenId>);      \
  template EmbeddingVector<T> embed_eos_baseline<T>(const Parameters<T>&, std::span<const TokenId>, TokenId);

BTOK_INSTANTIATE(float)
BTOK_INSTANTIATE(double)

}  // namespace btok
