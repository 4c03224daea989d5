#include "btok/verify.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>

#include <fmt/format.h>

#include "btok/rng.hpp"

namespace btok {

namespace {

using Rng = std::mt19937_64;
using M = Matrix<double>;

Index pick(Rng& g, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(g); }

TokenSequence random_tokens(Rng& g, Index n, Index vocab, TokenId lo = 0) {
  TokenSequence s(static_cast<std::size_t>(n));
  for (auto& t : s) t = static_cast<TokenId>(pick(g, lo, vocab - 1));
  return s;
}

M random_matrix(Rng& g, Index r, Index c, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  M m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(g);
  return m;
}

double max_abs(const M& a, const M& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
  return a.size() ? (a - b).cwiseAbs().maxCoeff() : 0.0;
}

double max_abs(const ModelState<double>& a, const ModelState<double>& b) {
  std::vector<const M*> xs;
  a.for_each([&](const std::string&, const M& m) { xs.push_back(&m); });
  double d = 0.0;
  std::size_t i = 0;
  b.for_each([&](const std::string&, const M& m) { d = std::max(d, max_abs(*xs[i++], m)); });
  return d;
}

ModelConfig random_config(Rng& g) {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = std::array<Index, 4>{8, 16, 32, 64}[static_cast<std::size_t>(pick(g, 0, 3))];
  c.n_layers = pick(g, 1, 4);
  do {
    c.n_heads = std::array<Index, 3>{1, 2, 4}[static_cast<std::size_t>(pick(g, 0, 2))];
  } while (c.d_model % c.n_heads != 0 || (c.d_model / c.n_heads) % 2 != 0);
  c.mlp_ratio = 2.0;
  c.max_seq_len = 64;
  c.dtype = DType::f64;
  return c;
}

ModelState<double> random_state(const ModelConfig& cfg, Index k, std::uint64_t seed) {
  ModelState<double> s;
  s.params = random_parameters(cfg, seed);
  Rng g(derive_seed(seed, "bank"));
  s.bank.rows = random_matrix(g, k, cfg.d_model, 1.0);
  return s;
}

struct ModeRun {
  M logits;
  M hidden;
  ModelState<double> grads;
  std::vector<MaskKind> kinds;
  Index cache_len = 0;
};

ModeRun run_mode(const ModelState<double>& s, const TokenSequence& q, const TokenSequence& t, CondensedMode mode) {
  ModeRun r;
  r.grads = ModelState<double>::zeros_like(s);
  Tape<double> tape(GradMode::record);
  const auto vars = bind(tape, s.params, &r.grads.params);
  const auto bank = tape.parameter(s.bank.rows, &r.grads.bank.rows);
  const auto cf = condensed_forward(tape, vars, segment_inputs(tape, vars, bank, q, t), mode);
  tape.backward(tape.cross_entropy(cf.target_logits, t));
  r.logits = tape.value(cf.target_logits);
  r.hidden = tape.value(cf.btok_hidden);
  r.kinds = cf.mask_kinds_used;
  r.cache_len = cf.pass2_cache_len;
  return r;
}

CheckResult finish(std::string name, double delta, double tol, std::string detail = {}, bool nonzero = false) {
  CheckResult c{std::move(name), delta, tol, nonzero, false, std::move(detail)};
  c.passed = std::isfinite(delta) && (nonzero ? delta > tol : delta <= tol);
  return c;
}

SegmentLayout random_layout(Rng& g, Index max_total, bool allow_empty_query) {
  SegmentLayout l;
  l.btok_count = pick(g, 1, 6);
  l.target_len = pick(g, 1, 10);
  l.query_len = pick(g, allow_empty_query ? 0 : 1, std::min<Index>(16, max_total - l.btok_count - l.target_len));
  return l;
}

}  // namespace

Parameters<double> random_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = init_parameters<double>(cfg, seed);
  Rng g(derive_seed(seed, "spread"));
  std::normal_distribution<double> n(0.0, 1.0);
  p.for_each([&](const std::string& name, M& m) {
    const bool gain = name.ends_with("norm");
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = gain ? 1.0 + 0.2 * n(g) : 0.3 * n(g);
  });
  return p;
}

CheckResult check_mode_equivalence(std::uint64_t seed, Index layouts, std::vector<LayoutDelta>* rows) {
  Rng g(derive_seed(seed, "verify.equivalence"));
  double logit = 0.0, hidden = 0.0, grad = 0.0;
  for (Index i = 0; i < layouts; ++i) {
    const ModelConfig cfg = random_config(g);
    SegmentLayout l = random_layout(g, 32, true);
    if (i == 0) l.query_len = 0;
    const auto state = random_state(cfg, l.btok_count, derive_seed(seed, "verify.model", static_cast<std::uint64_t>(i)));
    const auto q = random_tokens(g, l.query_len, cfg.vocab_size);
    const auto t = random_tokens(g, l.target_len, cfg.vocab_size);
    const auto dense = run_mode(state, q, t, CondensedMode::dense_oracle);
    const auto two = run_mode(state, q, t, CondensedMode::two_pass);
    LayoutDelta row{l, cfg.d_model, cfg.n_layers, max_abs(dense.logits, two.logits), max_abs(dense.hidden, two.hidden),
                    max_abs(dense.grads, two.grads)};
    logit = std::max(logit, row.logit_delta);
    hidden = std::max(hidden, row.hidden_delta);
    grad = std::max(grad, row.grad_delta);
    if (rows) rows->push_back(row);
  }
  // Values are held to 1e-10; the gradient tolerance (1e-9) is folded into `passed`.
  auto c = finish("equivalence.dense_vs_two_pass", std::max(logit, hidden), 1e-10,
                  fmt::format("{} layouts, max|dgrad|={:.3e} (tol 1e-9)", layouts, grad));
  c.passed = c.passed && grad <= 1e-9;
  return c;
}

CheckResult check_two_pass_kernels(std::uint64_t seed) {
  Rng g(derive_seed(seed, "verify.kernels"));
  double violations = 0;
  for (int i = 0; i < 5; ++i) {
    const ModelConfig cfg = random_config(g);
    const SegmentLayout l = random_layout(g, 32, true);
    const auto state = random_state(cfg, l.btok_count, derive_seed(seed, "verify.kernels.model", static_cast<std::uint64_t>(i)));
    const auto r = run_mode(state, random_tokens(g, l.query_len, cfg.vocab_size),
                            random_tokens(g, l.target_len, cfg.vocab_size), CondensedMode::two_pass);
    for (auto k : r.kinds)
      if (k != MaskKind::standard_causal) violations += 1;
    if (r.kinds.size() != 2 || r.cache_len != l.btok_count) violations += 1;
  }
  return finish("two_pass.causal_kernels_only", violations, 0.0, "dense masks or cache-length mismatches counted");
}

std::vector<CheckResult> check_shortcut_gradients(std::uint64_t seed, Index cases) {
  Rng g(derive_seed(seed, "verify.shortcut"));
  double detached = 0.0;
  double connected = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < cases; ++i) {
    const ModelConfig cfg = random_config(g);
    const SegmentLayout l = random_layout(g, 32, false);
    const auto state = random_state(cfg, l.btok_count, derive_seed(seed, "verify.shortcut.model", static_cast<std::uint64_t>(i)));
    const M qe = random_matrix(g, l.query_len, cfg.d_model, 1.0);
    const M te = random_matrix(g, l.target_len, cfg.d_model, 1.0);
    const M upstream = random_matrix(g, l.target_len, cfg.vocab_size, 1.0);
    for (auto conn : {KvConnectivity::detached, KvConnectivity::connected}) {
      Tape<double> tape(GradMode::record);
      const auto vars = bind(tape, state.params, nullptr);
      SegmentInputs<double> in{tape.leaf(qe), tape.parameter(state.bank.rows, nullptr), tape.leaf(te)};
      const auto cf = two_pass_forward(tape, vars, in, conn);
      std::vector<Tape<double>::Seed> seeds{{cf.target_logits, upstream}};
      tape.backward(seeds);
      const M dq = tape.grad(in.query);
      if (conn == KvConnectivity::detached)
        detached = std::max(detached, dq.cwiseAbs().maxCoeff());
      else
        connected = std::min(connected, dq.norm());
    }
  }
  return {finish("shortcut.detached_grad_zero", detached, 0.0, fmt::format("{} cases, max|d logits/d query|", cases)),
          finish("shortcut.connected_grad_nonzero", connected, 0.0,
                 fmt::format("{} cases, min ||d logits/d query||", cases), true)};
}

CheckResult check_shortcut_freeze(std::uint64_t seed, Index cases, const MaskBuilder& builder) {
  Rng g(derive_seed(seed, "verify.freeze"));
  double worst = 0.0;
  for (Index i = 0; i < cases; ++i) {
    const ModelConfig cfg = random_config(g);
    const SegmentLayout l = random_layout(g, 32, false);
    const auto state = random_state(cfg, l.btok_count, derive_seed(seed, "verify.freeze.model", static_cast<std::uint64_t>(i)));
    const M qe = random_matrix(g, l.query_len, cfg.d_model, 1.0);
    const M te = random_matrix(g, l.target_len, cfg.d_model, 1.0);
    const auto positions = condensation_positions(l);
    const auto mask = AttentionMaskSpec::explicit_mask((builder ? builder(l) : build_mask(l)).dense);

    Tape<double> tape(GradMode::inference);
    const auto vars = bind(tape, state.params, nullptr);
    const auto bank = tape.constant(state.bank.rows);
    auto run = [&](const M& query, const KvOverride<double>* ov, bool want_cache) {
      std::vector<Tape<double>::Var> parts{tape.constant(query), bank, tape.constant(te)};
      ForwardOptions<double> o;
      o.want_cache = want_cache;
      o.want_logits = false;
      o.positions = positions;
      o.kv_override = ov;
      return forward(tape, vars, tape.concat_rows(parts), mask, nullptr, o);
    };
    const auto ref = run(qe, nullptr, true);
    KvOverride<double> ov;
    ov.begin = l.btok_begin();
    for (Index layer = 0; layer < cfg.n_layers; ++layer) {
      const auto lu = static_cast<std::size_t>(layer);
      ov.keys.push_back(tape.value(ref.cache->keys[lu]).middleRows(l.btok_begin(), l.btok_count));
      ov.values.push_back(tape.value(ref.cache->values[lu]).middleRows(l.btok_begin(), l.btok_count));
    }
    const auto probe = run(M::Zero(l.query_len, cfg.d_model), &ov, false);
    worst = std::max(worst, max_abs(M(tape.value(ref.hidden).bottomRows(l.target_len)),
                                    M(tape.value(probe.hidden).bottomRows(l.target_len))));
  }
  return finish("shortcut.freeze_and_perturb", worst, 0.0,
                fmt::format("{} cases, target states with BTok K/V held and query zeroed", cases));
}

CheckResult check_mask_blocks(std::uint64_t seed, const MaskBuilder& builder) {
  const MaskBuilder build = builder ? builder : MaskBuilder(build_mask);
  const int expected[6][6] = {{1, 0, 0, 0, 0, 0}, {1, 1, 0, 0, 0, 0}, {1, 1, 1, 0, 0, 0},
                              {1, 1, 1, 1, 0, 0}, {0, 0, 1, 1, 1, 0}, {0, 0, 1, 1, 1, 1}};
  double bad = 0;
  const auto m = build({2, 2, 2});
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 6; ++j)
      if (m.dense(i, j) != (expected[i][j] == 1)) bad += 1;
  Rng g(derive_seed(seed, "verify.mask"));
  for (int c = 0; c < 100; ++c) {
    const SegmentLayout l = random_layout(g, 64, true);
    const auto r = build(l);
    for (Index i = 0; i < l.total(); ++i) {
      if (!r.dense(i, i)) bad += 1;
      if (i >= l.target_begin())
        for (Index j = 0; j < l.query_len; ++j)
          if (r.dense(i, j)) bad += 1;
    }
  }
  return finish("mask.block_structure", bad, 0.0, "mismatched entries: 6x6 example, diagonals, target x query block");
}

CheckResult check_finite_differences(std::uint64_t seed) {
  ModelConfig cfg{16, 8, 2, 2, 2.0, 64, DType::f64};
  TrainerConfig tc;
  tc.global_batch = 4;
  tc.sub_batch = 2;
  tc.total_steps = 10;
  tc.warmup_steps = 0;
  tc.lambda = {0.5, 5, 10};
  tc.btok_count = 2;
  auto state = random_state(cfg, tc.btok_count, derive_seed(seed, "verify.fd.model"));
  Rng g(derive_seed(seed, "verify.fd.data"));
  Batch batch(4);
  for (auto& p : batch) {
    p.query = random_tokens(g, pick(g, 2, 5), cfg.vocab_size, 2);
    p.positive = random_tokens(g, pick(g, 2, 5), cfg.vocab_size, 2);
    p.target = random_tokens(g, pick(g, 1, 3), cfg.vocab_size, 2);
  }
  const auto cache = contrastive_grads(phase_a(state, tc, batch), tc.contrastive);
  const auto analytic = phase_b(state, tc, batch, cache, 0).grads;
  std::vector<const M*> grads;
  analytic.for_each([&](const std::string&, const M& m) { grads.push_back(&m); });

  const double h = 1e-5;
  double worst = 0.0;
  std::string where;
  std::size_t t = 0;
  Index count = 0;
  state.for_each([&](const std::string& name, M& p) {
    const M& a = *grads[t++];
    for (Index i = 0; i < p.size(); ++i) {
      const double keep = p.data()[i];
      p.data()[i] = keep + h;
      const double up = monolithic_gradients(state, tc, batch, 0).report.total;
      p.data()[i] = keep - h;
      const double down = monolithic_gradients(state, tc, batch, 0).report.total;
      p.data()[i] = keep;
      const double num = (up - down) / (2 * h);
      const double ana = a.data()[i];
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-6});
      if (rel > worst) {
        worst = rel;
        where = fmt::format("{}[{}]", name, i);
      }
      ++count;
    }
  });
  return finish("gradients.finite_difference", worst, 1e-4,
                fmt::format("{} parameters, h=1e-5, worst at {}", count, where));
}

CheckResult check_gradient_cache(std::uint64_t seed) {
  ModelConfig cfg{32, 16, 2, 2, 2.0, 64, DType::f64};
  double worst = 0.0;
  std::string detail;
  for (Index b : {4, 8, 16}) {
    for (Index s : {2, 4}) {
      TrainerConfig tc;
      tc.global_batch = b;
      tc.sub_batch = b / s;
      tc.total_steps = 10;
      tc.warmup_steps = 0;
      tc.lambda = {0.1, 5, 10};
      const auto state = random_state(cfg, tc.btok_count, derive_seed(seed, "verify.gc.model", static_cast<std::uint64_t>(b)));
      Rng g(derive_seed(seed, "verify.gc.data", static_cast<std::uint64_t>(b * 10 + s)));
      Batch batch(static_cast<std::size_t>(b));
      for (auto& p : batch) {
        p.query = random_tokens(g, pick(g, 2, 8), cfg.vocab_size, 2);
        p.positive = random_tokens(g, pick(g, 2, 8), cfg.vocab_size, 2);
        p.target = random_tokens(g, pick(g, 1, 4), cfg.vocab_size, 2);
      }
      const auto cache = contrastive_grads(phase_a(state, tc, batch), tc.contrastive);
      const auto split = phase_b(state, tc, batch, cache, 0);
      const auto mono = monolithic_gradients(state, tc, batch, 0);
      const double d = std::max(max_abs(split.grads, mono.grads), std::abs(split.report.total - mono.report.total));
      if (split.max_live_contexts > 1) worst = std::numeric_limits<double>::infinity();
      if (d > worst) {
        worst = d;
        detail = fmt::format("worst at |B|={} S={}", b, s);
      }
    }
  }
  return finish("gradient_cache.vs_monolithic", worst, 1e-10, detail + ", includes BTok bank");
}

CheckResult check_loss_oracles() {
  ContrastiveConfig unit{1.0, false};
  RowVector<double> e1(2), e2(2);
  e1 << 1, 0;
  e2 << 0, 1;
  const std::vector<RowVector<double>> ortho{e1, e2};
  const double a = std::abs(infonce<double>(ortho, ortho, unit).loss - std::log1p(std::exp(-1.0)));
  const Index vocab = 64;
  const TokenSequence targets{3, 7, 11};
  const double b = std::abs(ntp_loss<double>(M::Zero(3, vocab), targets) - std::log(double(vocab)));
  const std::vector<RowVector<double>> same(5, e1);
  const double c = std::abs(infonce<double>(same, same, ContrastiveConfig{}).loss - std::log(5.0));
  return finish("losses.closed_form", std::max({a, b, c}), 1e-12,
                fmt::format("infonce |B|=2 {:.1e}, uniform ntp {:.1e}, identical batch {:.1e}", a, b, c));
}

bool VerifyReport::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

std::string VerifyReport::to_text() const {
  std::string out;
  for (const auto& c : checks)
    out += fmt::format("{:<34} delta={:<10.3e} tol={}{:<8.1e} {}  {}\n", c.name, c.delta, c.expect_nonzero ? ">" : "<=",
                       c.tolerance, c.passed ? "PASS" : "FAIL", c.detail);
  out += fmt::format("{}\n", all_passed() ? "all checks passed" : "verification FAILED");
  return out;
}

std::string VerifyReport::equivalence_table() const {
  std::string out = fmt::format("{:>6} {:>4} {:>3} {:>4} {:>4} {:>3} {:>12} {:>12} {:>12}\n", "layout", "N_q", "K",
                                "N_t", "d", "L", "max|dlogit|", "max|dh_b|", "max|dgrad|");
  for (std::size_t i = 0; i < layouts.size(); ++i) {
    const auto& r = layouts[i];
    out += fmt::format("{:>6} {:>4} {:>3} {:>4} {:>4} {:>3} {:>12.3e} {:>12.3e} {:>12.3e}\n", i, r.layout.query_len,
                       r.layout.btok_count, r.layout.target_len, r.d_model, r.n_layers, r.logit_delta,
                       r.hidden_delta, r.grad_delta);
  }
  return out;
}

VerifyReport run_verify(const VerifyOptions& o) {
  VerifyReport r;
  r.checks.push_back(check_mode_equivalence(o.seed, o.layouts, &r.layouts));
  r.checks.push_back(check_two_pass_kernels(o.seed));
  for (auto& c : check_shortcut_gradients(o.seed, o.shortcut_cases)) r.checks.push_back(std::move(c));
  r.checks.push_back(check_shortcut_freeze(o.seed, o.shortcut_cases, o.mask_builder));
  r.checks.push_back(check_mask_blocks(o.seed, o.mask_builder));
  if (o.finite_differences) r.checks.push_back(check_finite_differences(o.seed));
  r.checks.push_back(check_gradient_cache(o.seed));
  r.checks.push_back(check_loss_oracles());
  return r;
}

}  // namespace btok
