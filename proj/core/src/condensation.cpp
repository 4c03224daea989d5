#include "btok/condensation.hpp"

#include <string>

namespace btok {

void SegmentLayout::validate(Index max_seq_len) const {
  if (query_len < 0) throw ShapeError("layout: query length must be non-negative");
  if (btok_count < 1) throw ShapeError("layout: at least one bottleneck token required");
  if (target_len < 1) throw ShapeError("layout: at least one target token required");
  if (total() > max_seq_len)
    throw ShapeError("layout: length " + std::to_string(total()) + " exceeds max_seq_len " + std::to_string(max_seq_len));
}

CondensationMask build_mask(const SegmentLayout& layout) {
  const Index t = layout.total();
  const Index b0 = layout.btok_begin();
  const Index t0 = layout.target_begin();
  CondensationMask m{layout, BinaryMask(t, t)};
  for (Index i = 0; i < t; ++i) {
    for (Index j = 0; j <= i; ++j) {
      bool allow = false;
      if (i < b0) {
        allow = true;  // query: causal among queries
      } else if (i < t0) {
        allow = true;  // BTok: all queries, causal among BToks
      } else {
        allow = j >= b0;  // target: BToks and earlier targets only
      }
      m.dense.set(i, j, allow);
    }
  }
  return m;
}

std::vector<Index> condensation_positions(const SegmentLayout& layout) {
  std::vector<Index> pos;
  pos.reserve(static_cast<std::size_t>(layout.total()));
  for (Index i = 0; i < layout.target_begin(); ++i) pos.push_back(i);
  for (Index i = 0; i < layout.target_len; ++i) pos.push_back(layout.btok_count + i);
  return pos;
}

const char* condensed_mode_name(CondensedMode m) {
  switch (m) {
    case CondensedMode::dense_oracle:
      return "dense-oracle";
    case CondensedMode::two_pass:
      return "two-pass";
    case CondensedMode::unmasked_causal:
      return "unmasked-causal";
  }
  return "?";
}

template <typename T>
SegmentInputs<T> segment_inputs(Tape<T>& tape, const ModelVars<T>& vars, typename Tape<T>::Var bottleneck,
                                std::span<const TokenId> query, std::span<const TokenId> target) {
  return SegmentInputs<T>{embed_tokens(tape, vars, query), bottleneck, embed_tokens(tape, vars, target)};
}

namespace {

template <typename T>
SegmentLayout layout_of(const Tape<T>& tape, const ModelVars<T>& vars, const SegmentInputs<T>& in) {
  SegmentLayout l{tape.value(in.query).rows(), tape.value(in.bottleneck).rows(), tape.value(in.target).rows()};
  l.validate(vars.config->max_seq_len);
  return l;
}

// Single pass over the concatenated sequence; prediction rows are the
// contiguous hidden rows starting at the last BTok.
template <typename T>
CondensedForward<T> single_pass(Tape<T>& tape, const ModelVars<T>& vars, const SegmentInputs<T>& in,
                                const AttentionMaskSpec& mask, std::span<const Index> positions,
                                const SegmentLayout& layout, CondensedMode mode) {
  std::vector<typename Tape<T>::Var> parts{in.query, in.bottleneck, in.target};
  auto x = tape.concat_rows(parts);
  ForwardOptions<T> opts;
  opts.want_logits = false;
  opts.positions = positions;
  auto fr = forward(tape, vars, x, mask, nullptr, opts);
  CondensedForward<T> out;
  out.mode = mode;
  out.mask_kinds_used.push_back(mask.kind);
  out.btok_hidden = tape.slice_rows(fr.hidden, layout.btok_begin(), layout.btok_count);
  out.embedding = tape.mean_rows(out.btok_hidden);
  auto pred = tape.slice_rows(fr.hidden, layout.target_begin() - 1, layout.target_len);
  out.target_logits = lm_head(tape, vars, pred);
  return out;
}

}  // namespace

template <typename T>
CondensedForward<T> dense_forward(Tape<T>& tape, const ModelVars<T>& vars, const SegmentInputs<T>& in,
                                  const MaskBuilder& builder) {
  const SegmentLayout layout = layout_of(tape, vars, in);
  const auto positions = condensation_positions(layout);
  auto mask = builder ? builder(layout) : build_mask(layout);
  if (!(mask.layout == layout)) throw ShapeError("dense_forward: mask builder returned a different layout");
  return single_pass(tape, vars, in, AttentionMaskSpec::explicit_mask(std::move(mask.dense)), positions, layout,
                     CondensedMode::dense_oracle);
}

// The shortcut-enabled arm. One causal pass over [query, BToks, targets] split
// at the target boundary, so the query/BTok rows reuse the embedding path.
template <typename T>
CondensedForward<T> unmasked_forward(Tape<T>& tape, const ModelVars<T>& vars, const SegmentInputs<T>& in) {
  const SegmentLayout layout = layout_of(tape, vars, in);
  CondensedForward<T> out;
  out.mode = CondensedMode::unmasked_causal;
  auto pass1 = pool_bottleneck(tape, vars, in.query, in.bottleneck, /*want_cache=*/true);
  out.mask_kinds_used.push_back(MaskKind::standard_causal);
  out.btok_hidden = tape.slice_rows(pass1.forward.hidden, layout.btok_begin(), layout.btok_count);
  out.embedding = pass1.embedding;
  out.pass2_cache_len = pass1.forward.cache->cached_len;
  ForwardOptions<T> opts;
  opts.want_logits = false;
  auto pass2 = forward(tape, vars, in.target, AttentionMaskSpec::causal(), &*pass1.forward.cache, opts);
  out.mask_kinds_used.push_back(MaskKind::standard_causal);
  std::vector<typename Tape<T>::Var> pred{tape.slice_rows(pass1.forward.hidden, layout.target_begin() - 1, 1),
                                          tape.slice_rows(pass2.hidden, 0, layout.target_len - 1)};
  out.target_logits = lm_head(tape, vars, tape.concat_rows(pred));
  return out;
}

template <typename T>
CondensedForward<T> two_pass_forward(Tape<T>& tape, const ModelVars<T>& vars, const SegmentInputs<T>& in,
                                     KvConnectivity connectivity) {
  const SegmentLayout layout = layout_of(tape, vars, in);
  CondensedForward<T> out;
  out.mode = CondensedMode::two_pass;

  // Pass 1: query + BToks, identical to the inference embedding path.
  auto pass1 = pool_bottleneck(tape, vars, in.query, in.bottleneck, /*want_cache=*/true);
  out.mask_kinds_used.push_back(MaskKind::standard_causal);
  out.btok_hidden = tape.slice_rows(pass1.forward.hidden, layout.btok_begin(), layout.btok_count);
  out.embedding = pass1.embedding;
  KVCache<T> btok_kv =
      select_cache_rows(tape, *pass1.forward.cache, layout.btok_begin(), layout.btok_count, connectivity);
  auto seed = tape.slice_rows(pass1.forward.hidden, layout.target_begin() - 1, 1);
  if (connectivity == KvConnectivity::detached) seed = tape.detach(seed);

  // Pass 2: targets with the BTok cache as a fixed prefix.
  if (btok_kv.cached_len != layout.btok_count) throw ShapeError("two_pass_forward: cache length mismatch");
  out.pass2_cache_len = btok_kv.cached_len;
  ForwardOptions<T> opts;
  opts.want_logits = false;
  auto pass2 = forward(tape, vars, in.target, AttentionMaskSpec::causal(), &btok_kv, opts);
  out.mask_kinds_used.push_back(MaskKind::standard_causal);

  std::vector<typename Tape<T>::Var> pred{seed, tape.slice_rows(pass2.hidden, 0, layout.target_len - 1)};
  out.target_logits = lm_head(tape, vars, tape.concat_rows(pred));
  return out;
}

template <typename T>
CondensedForward<T> condensed_forward(Tape<T>& tape, const ModelVars<T>& vars, const SegmentInputs<T>& in,
                                      CondensedMode mode, KvConnectivity connectivity) {
  switch (mode) {
    case CondensedMode::dense_oracle:
      return dense_forward(tape, vars, in, {});
    case CondensedMode::unmasked_causal:
      return unmasked_forward(tape, vars, in);
    case CondensedMode::two_pass:
      break;
  }
  return two_pass_forward(tape, vars, in, connectivity);
}

#define BTOK_INSTANTIATE(T)                                                                                       \
  template SegmentInputs<T> segment_inputs<T>(Tape<T>&, const ModelVars<T>&, Tape<T>::Var,                        \
                                              std::span<const TokenId>, std::span<const TokenId>);                \
  template CondensedForward<T> dense_forward<T>(Tape<T>&, const ModelVars<T>&, const SegmentInputs<T>&,          \
                                                const MaskBuilder&);                                           \
  template CondensedForward<T> unmasked_forward<T>(Tape<T>&, const ModelVars<T>&, const SegmentInputs<T>&);       \
  template CondensedForward<T> two_pass_forward<T>(Tape<T>&, const ModelVars<T>&, const SegmentInputs<T>&,        \
                                                   KvConnectivity);                                               \
  template CondensedForward<T> condensed_forward<T>(Tape<T>&, const ModelVars<T>&, const SegmentInputs<T>&,       \
                                                    CondensedMode, KvConnectivity);

BTOK_INSTANTIATE(float)
BTOK_INSTANTIATE(double)

}  // namespace btok
