#pragma once

// Plain Eigen decoder used as an oracle: no tape, no caches, one explicit mask.

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "btok/model.hpp"

namespace btok::reference {

using Mat = Eigen::MatrixXd;
using Row = Eigen::RowVectorXd;
using Allowed = std::vector<std::vector<bool>>;

inline Mat rms(const Mat& x, const Mat& gain) {
  Mat y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double ms = x.row(r).squaredNorm() / double(x.cols());
    y.row(r) = x.row(r).cwiseProduct(gain.row(0)) / std::sqrt(ms + kRmsEps);
  }
  return y;
}

inline Mat rotary(const Mat& x, const std::vector<Index>& pos, Index heads) {
  const Index hd = x.cols() / heads;
  Mat y = x;
  for (Index r = 0; r < x.rows(); ++r)
    for (Index h = 0; h < heads; ++h)
      for (Index p = 0; p < hd / 2; ++p) {
        const double theta = double(pos[std::size_t(r)]) / std::pow(kRopeBase, double(2 * p) / double(hd));
        const Index a = h * hd + 2 * p;
        y(r, a) = x(r, a) * std::cos(theta) - x(r, a + 1) * std::sin(theta);
        y(r, a + 1) = x(r, a) * std::sin(theta) + x(r, a + 1) * std::cos(theta);
      }
  return y;
}

inline Mat silu(const Mat& x) { return x.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); }); }

// Final-normalized hidden states of `inputs` under `allowed` (row i may read column j).
inline Mat hidden_states(const Parameters<double>& p, const Mat& inputs, const std::vector<Index>& pos,
                         const Allowed& allowed) {
  const auto& cfg = p.config;
  const Index n = inputs.rows(), hd = cfg.head_dim();
  Mat x = inputs;
  for (const auto& w : p.layers) {
    const Mat hn = rms(x, w.attn_norm);
    const Mat q = rotary(hn * w.wq, pos, cfg.n_heads);
    const Mat k = rotary(hn * w.wk, pos, cfg.n_heads);
    const Mat v = hn * w.wv;
    Mat att = Mat::Zero(n, cfg.d_model);
    for (Index h = 0; h < cfg.n_heads; ++h)
      for (Index i = 0; i < n; ++i) {
        std::vector<double> s(std::size_t(n), 0.0);
        double mx = -INFINITY, z = 0.0;
        for (Index j = 0; j < n; ++j)
          if (allowed[std::size_t(i)][std::size_t(j)]) {
            s[std::size_t(j)] = q.row(i).segment(h * hd, hd).dot(k.row(j).segment(h * hd, hd)) / std::sqrt(double(hd));
            mx = std::max(mx, s[std::size_t(j)]);
          }
        for (Index j = 0; j < n; ++j)
          if (allowed[std::size_t(i)][std::size_t(j)]) z += std::exp(s[std::size_t(j)] - mx);
        for (Index j = 0; j < n; ++j)
          if (allowed[std::size_t(i)][std::size_t(j)])
            att.row(i).segment(h * hd, hd) += std::exp(s[std::size_t(j)] - mx) / z * v.row(j).segment(h * hd, hd);
      }
    x += att * w.wo;
    const Mat hm = rms(x, w.mlp_norm);
    x += silu(hm * w.w_gate).cwiseProduct(hm * w.w_up) * w.w_down;
  }
  return rms(x, p.final_norm);
}

inline Allowed causal(Index n) {
  Allowed a(std::size_t(n), std::vector<bool>(std::size_t(n), false));
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) a[std::size_t(i)][std::size_t(j)] = true;
  return a;
}

// Query causal; bottleneck rows see the query and earlier bottleneck rows;
// target rows see the bottleneck and earlier targets only.
inline Allowed condensation(Index nq, Index k, Index nt) {
  const Index n = nq + k + nt;
  Allowed a(std::size_t(n), std::vector<bool>(std::size_t(n), false));
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) {
      const bool target_row = i >= nq + k, query_col = j < nq;
      a[std::size_t(i)][std::size_t(j)] = !(target_row && query_col);
    }
  return a;
}

inline Mat rows_of(const Mat& table, const TokenSequence& ids) {
  Mat out(Index(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(Index(i)) = table.row(ids[i]);
  return out;
}

inline Mat stack(std::initializer_list<Mat> parts) {
  Index rows = 0, cols = 0;
  for (const auto& m : parts) {
    rows += m.rows();
    if (m.cols()) cols = m.cols();
  }
  Mat out(rows, cols);
  Index at = 0;
  for (const auto& m : parts) {
    if (m.rows()) out.middleRows(at, m.rows()) = m;
    at += m.rows();
  }
  return out;
}

inline double log_softmax_at(const Row& logits, Index label) {
  const double mx = logits.maxCoeff();
  return logits(label) - mx - std::log((logits.array() - mx).exp().sum());
}

struct Condensed {
  Mat btok_hidden;      // [K x d]
  Row embedding;        // mean of btok_hidden
  Mat target_logits;    // [N_t x vocab]
  double ntp = 0.0;     // mean target NLL
};

// Query embedding and target predictions under the block mask. Targets take
// rotary positions K, K+1, ... so that they sit right after a K-row prefix.
inline Condensed condensed(const Parameters<double>& p, const Mat& bank, const TokenSequence& query,
                           const TokenSequence& target) {
  const Index nq = Index(query.size()), k = bank.rows(), nt = Index(target.size());
  const Mat in = stack({rows_of(p.token_embedding, query), bank, rows_of(p.token_embedding, target)});
  std::vector<Index> pos;
  for (Index i = 0; i < nq + k; ++i) pos.push_back(i);
  for (Index i = 0; i < nt; ++i) pos.push_back(k + i);
  const Mat h = hidden_states(p, in, pos, condensation(nq, k, nt));
  Condensed c;
  c.btok_hidden = h.middleRows(nq, k);
  c.embedding = c.btok_hidden.colwise().mean();
  c.target_logits = h.middleRows(nq + k - 1, nt) * p.output_head;
  for (Index i = 0; i < nt; ++i) c.ntp -= log_softmax_at(c.target_logits.row(i), target[std::size_t(i)]);
  c.ntp /= double(nt);
  return c;
}

// Mean of the trailing bottleneck states after one causal pass over [x ; bank].
inline Row pooled(const Parameters<double>& p, const Mat& bank, const TokenSequence& x) {
  const Mat in = stack({rows_of(p.token_embedding, x), bank});
  std::vector<Index> pos;
  for (Index i = 0; i < in.rows(); ++i) pos.push_back(i);
  const Mat h = hidden_states(p, in, pos, causal(in.rows()));
  return h.bottomRows(bank.rows()).colwise().mean();
}

inline double infonce(const std::vector<Row>& q, const std::vector<Row>& c, double tau) {
  const std::size_t n = q.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Row s(static_cast<Index>(n));
    for (std::size_t j = 0; j < n; ++j) s(Index(j)) = q[i].dot(c[j]) / (q[i].norm() * c[j].norm()) / tau;
    loss -= log_softmax_at(s, Index(i));
  }
  return loss / double(n);
}

}  // namespace btok::reference
