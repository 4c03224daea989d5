#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "btok/trainer.hpp"

namespace btok::testing {

using Rng = std::mt19937_64;
using M = Matrix<double>;

inline ModelConfig tiny_config(Index vocab = 16, Index d = 8, Index layers = 2, Index heads = 2, Index max_len = 64) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = heads;
  c.mlp_ratio = 2.0;
  c.max_seq_len = max_len;
  c.dtype = DType::f64;
  return c;
}

inline Index pick(Rng& g, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(g); }

inline TokenSequence random_tokens(Rng& g, Index n, Index vocab, TokenId lo = 0) {
  TokenSequence s(static_cast<std::size_t>(n));
  for (auto& t : s) t = static_cast<TokenId>(pick(g, lo, vocab - 1));
  return s;
}

inline M random_matrix(Rng& g, Index r, Index c, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  M m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(g);
  return m;
}

// Weights at a scale where attention is far from uniform.
inline ModelState<double> spread_state(const ModelConfig& cfg, Index k, std::uint64_t seed) {
  ModelState<double> s;
  s.params = init_parameters<double>(cfg, seed);
  Rng g(seed * 7919 + 17);
  std::normal_distribution<double> n(0.0, 1.0);
  s.params.for_each([&](const std::string& name, M& m) {
    const bool gain = name.ends_with("norm");
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = gain ? 1.0 + 0.2 * n(g) : 0.3 * n(g);
  });
  s.bank.rows = random_matrix(g, k, cfg.d_model);
  return s;
}

template <typename A, typename B>
double max_abs(const A& a, const B& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
  if (a.size() == 0) return 0.0;
  return (a.template cast<double>() - b.template cast<double>()).cwiseAbs().maxCoeff();
}

template <typename T>
std::vector<Matrix<T>> flatten(const ModelState<T>& s) {
  std::vector<Matrix<T>> out;
  s.for_each([&](const std::string&, const Matrix<T>& m) { out.push_back(m); });
  return out;
}

template <typename T>
double max_abs_state(const ModelState<T>& a, const ModelState<T>& b) {
  const auto xa = flatten(a), xb = flatten(b);
  if (xa.size() != xb.size()) return std::numeric_limits<double>::infinity();
  double d = 0.0;
  for (std::size_t i = 0; i < xa.size(); ++i) d = std::max(d, max_abs(xa[i], xb[i]));
  return d;
}

template <typename T>
bool bitwise_equal(const Matrix<T>& a, const Matrix<T>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::equal(a.data(), a.data() + a.size(), b.data());
}

template <typename T>
bool bitwise_equal_state(const ModelState<T>& a, const ModelState<T>& b) {
  const auto xa = flatten(a), xb = flatten(b);
  if (xa.size() != xb.size()) return false;
  for (std::size_t i = 0; i < xa.size(); ++i)
    if (!bitwise_equal(xa[i], xb[i])) return false;
  return true;
}

// Independent mean NLL with a max-shifted log-sum-exp per row.
inline double reference_nll(const M& logits, const TokenSequence& y) {
  double total = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    double s = 0.0;
    for (Index j = 0; j < logits.cols(); ++j) s += std::exp(logits(i, j) - mx);
    total += mx + std::log(s) - logits(i, y[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<double>(logits.rows());
}

// Independent InfoNCE, query to candidate direction.
inline double reference_infonce(const std::vector<RowVector<double>>& q, const std::vector<RowVector<double>>& c,
                                double tau) {
  const std::size_t n = q.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> z(n);
    for (std::size_t j = 0; j < n; ++j) z[j] = q[i].dot(c[j]) / (q[i].norm() * c[j].norm()) / tau;
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    total += mx + std::log(s) - z[i];
  }
  return total / static_cast<double>(n);
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("btok-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << s;
}

inline Batch random_batch(Rng& g, Index n, Index vocab, Index max_len = 6) {
  Batch b(static_cast<std::size_t>(n));
  for (auto& p : b) {
    p.query = random_tokens(g, pick(g, 2, max_len), vocab, 2);
    p.positive = random_tokens(g, pick(g, 2, max_len), vocab, 2);
    p.target = random_tokens(g, pick(g, 1, 4), vocab, 2);
    p.positive_target = random_tokens(g, pick(g, 1, 4), vocab, 2);
  }
  return b;
}

inline TrainerConfig small_trainer(Index batch, Index sub) {
  TrainerConfig tc;
  tc.global_batch = batch;
  tc.sub_batch = sub;
  tc.total_steps = 10;
  tc.warmup_steps = 2;
  tc.lambda = {0.1, 5, 10};
  tc.btok_count = 2;
  return tc;
}

}  // namespace btok::testing
