#pragma once

#include <functional>
#include <vector>

#include "btok/model.hpp"
#include "btok/pooling.hpp"

namespace btok {

// Training sequence [query (N_q) ; bottleneck (K) ; target (N_t)].
struct SegmentLayout {
  Index query_len = 0;
  Index btok_count = 1;
  Index target_len = 1;

  Index total() const { return query_len + btok_count + target_len; }
  Index btok_begin() const { return query_len; }
  Index target_begin() const { return query_len + btok_count; }
  // Throws ShapeError unless N_q >= 0, K >= 1, N_t >= 1 and total() <= max_seq_len.
  void validate(Index max_seq_len) const;
  friend bool operator==(const SegmentLayout&, const SegmentLayout&) = default;
};

// Block mask: query causal; BToks see every query token and earlier BToks;
// targets see every BTok and earlier targets, and no query token.
struct CondensationMask {
  SegmentLayout layout;
  BinaryMask dense;
};

CondensationMask build_mask(const SegmentLayout& layout);

// Rotary positions that make one dense pass match the two-pass procedure:
// query and BToks at 0..N_q+K-1, targets restarting at K (the pass-2 cache length).
std::vector<Index> condensation_positions(const SegmentLayout& layout);

enum class CondensedMode { dense_oracle, two_pass, unmasked_causal };
const char* condensed_mode_name(CondensedMode m);

template <typename T>
struct CondensedForward {
  using Var = typename Tape<T>::Var;
  Var btok_hidden;  // [K x d]
  Var embedding;  // [1 x d] mean of btok_hidden
  // [N_t x vocab]; row i predicts target token i. Row 0 is read from the last
  // BTok, rows i > 0 from target position i - 1.
  Var target_logits;
  CondensedMode mode = CondensedMode::two_pass;
  std::vector<MaskKind> mask_kinds_used;
  Index pass2_cache_len = 0;
};

template <typename T>
struct SegmentInputs {
  typename Tape<T>::Var query;  // [N_q x d] input embeddings
  typename Tape<T>::Var bottleneck;  // [K x d]
  typename Tape<T>::Var target;  // [N_t x d]
};

template <typename T>
SegmentInputs<T> segment_inputs(Tape<T>& tape, const ModelVars<T>& vars, typename Tape<T>::Var bottleneck,
                                std::span<const TokenId> query, std::span<const TokenId> target);

using MaskBuilder = std::function<CondensationMask(const SegmentLayout&)>;

// One forward over the full training sequence under build_mask(layout), or under
// `builder` when given (test fixtures swap in broken masks here).
template <typename T>
CondensedForward<T> dense_forward(Tape<T>& tape, const ModelVars<T>& vars, const SegmentInputs<T>& in,
                                  const MaskBuilder& builder = {});

// Pass 1: causal over query + BToks with cache capture, BTok rows of the cache
// selected. Pass 2: causal over targets with only the BTok cache as prefix.
// `detached` severs everything pass 2 reads from pass 1 (the BTok cache and the
// last BTok state that seeds the first prediction).
template <typename T>
CondensedForward<T> two_pass_forward(Tape<T>& tape, const ModelVars<T>& vars, const SegmentInputs<T>& in,
                                     KvConnectivity connectivity = KvConnectivity::connected);

// Shortcut-enabled variant: causal attention over the whole sequence, so
// targets read the query directly. Run as two causal passes split at the
// target boundary with the full query + BTok cache as prefix.
template <typename T>
CondensedForward<T> unmasked_forward(Tape<T>& tape, const ModelVars<T>& vars, const SegmentInputs<T>& in);

template <typename T>
CondensedForward<T> condensed_forward(Tape<T>& tape, const ModelVars<T>& vars, const SegmentInputs<T>& in,
                                      CondensedMode mode, KvConnectivity connectivity = KvConnectivity::connected);

}  // namespace btok
