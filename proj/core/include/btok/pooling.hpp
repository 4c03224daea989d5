#pragma once

#include "btok/model.hpp"

namespace btok {

// K learnable Bottleneck Tokens. Rows are free vectors fed directly as input
// embeddings; they never pass through the vocabulary table.
template <typename T>
struct BTokBank {
  Matrix<T> rows;  // [K x d]
  Index size() const { return rows.rows(); }
};

inline constexpr Index kDefaultBTokCount = 4;

// Every row starts as a copy of the embedding-table row of `init_token_id`.
template <typename T>
BTokBank<T> init_btoks(const Parameters<T>& params, Index k, TokenId init_token_id);

enum class PoolingKind : std::uint32_t { btok_mean = 1, eos_last = 2 };
const char* pooling_name(PoolingKind p);

template <typename T>
struct AugmentedSequence {
  typename Tape<T>::Var embeddings;  // [N + K x d]
  Index input_len = 0;
  Index btok_count = 0;
  Index length() const { return input_len + btok_count; }
  Index btok_begin() const { return input_len; }  // zero-based first BTok slot
};

// [x_1..x_N ; bottleneck rows]. `bottleneck` is normally the bound BTok bank.
template <typename T>
AugmentedSequence<T> augment(Tape<T>& tape, const ModelVars<T>& vars, std::span<const TokenId> x,
                             typename Tape<T>::Var bottleneck);

template <typename T>
struct EmbeddingVector {
  RowVector<T> values;
  PoolingKind produced_by = PoolingKind::btok_mean;
  Index positions_processed = 0;
};

// Mean of the trailing bottleneck hidden states after one causal pass.
template <typename T>
struct PooledOutput {
  typename Tape<T>::Var embedding;  // [1 x d]
  ForwardResult<T> forward;
  AugmentedSequence<T> sequence;
};

// Shared by inference, Phase A/B and pass 1 of the two-pass forward so that the
// same inputs produce bitwise-identical embeddings on every path.
template <typename T>
PooledOutput<T> pool_bottleneck(Tape<T>& tape, const ModelVars<T>& vars, std::span<const TokenId> x,
                                typename Tape<T>::Var bottleneck, bool want_cache = false);
// Same, starting from input embeddings [N x d] instead of token ids.
template <typename T>
PooledOutput<T> pool_bottleneck(Tape<T>& tape, const ModelVars<T>& vars, typename Tape<T>::Var input_embeddings,
                                typename Tape<T>::Var bottleneck, bool want_cache = false);

// The EOS token's table row as a one-row bottleneck.
template <typename T>
typename Tape<T>::Var eos_bottleneck(Tape<T>& tape, const ModelVars<T>& vars, TokenId eos_id);

// Single causal pass over augment(x, bank); exactly N + K positions.
template <typename T>
EmbeddingVector<T> embed(const Parameters<T>& params, const BTokBank<T>& bank, std::span<const TokenId> x);

// Implicit pooling baseline: append EOS, return the last hidden state.
template <typename T>
EmbeddingVector<T> embed_eos_baseline(const Parameters<T>& params, std::span<const TokenId> x, TokenId eos_id);

}  // namespace btok
