#include "btok/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>

namespace btok {

const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

namespace {

void require(bool cond, const char* op, const char* what) {
  if (!cond) throw ShapeError(std::string(op) + ": " + what);
}

}  // namespace

template <typename T>
Tape<T>::Tape(GradMode mode) : mode_(mode) {
  if (recording()) ++live_recording_;
}

template <typename T>
Tape<T>::~Tape() {
  if (recording()) --live_recording_;
}

template <typename T>
typename Tape<T>::Node& Tape<T>::node(Var v) {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw std::out_of_range("tape: invalid var");
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw std::out_of_range("tape: invalid var");
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <typename T>
typename Tape<T>::Var Tape<T>::push(Matrix<T> value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad && recording();
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
bool Tape<T>::any_requires(std::initializer_list<Var> vars) const {
  if (!recording()) return false;
  for (Var v : vars)
    if (node(v).requires_grad) return true;
  return false;
}

template <typename T>
void Tape<T>::accumulate(Var v, const Matrix<T>& g) {
  accumulate_expr(v, g);
}

template <typename T>
template <typename Expr>
void Tape<T>::accumulate_expr(Var v, const Expr& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

template <typename T>
typename Tape<T>::Var Tape<T>::constant(Matrix<T> value) {
  return push(std::move(value), false);
}

template <typename T>
typename Tape<T>::Var Tape<T>::leaf(Matrix<T> value) {
  return push(std::move(value), true);
}

template <typename T>
typename Tape<T>::Var Tape<T>::parameter(const Matrix<T>& value, Matrix<T>* grad_sink) {
  Node n;
  n.borrowed = &value;
  n.sink = recording() ? grad_sink : nullptr;
  n.requires_grad = recording() && grad_sink != nullptr;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
const Matrix<T>& Tape<T>::value(Var v) const {
  return node(v).value();
}

template <typename T>
Matrix<T> Tape<T>::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.size() == 0) return Matrix<T>::Zero(n.value().rows(), n.value().cols());
  return n.grad;
}

template <typename T>
typename Tape<T>::Var Tape<T>::matmul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require(A.cols() == B.rows(), "matmul", "inner dimension mismatch");
  const bool rg = any_requires({a, b});
  Var out = push(A * B, rg);
  if (rg) {
    node(out).backward = [this, a, b, out] {
      const auto& G = node(out).grad;
      if (node(a).requires_grad) accumulate_expr(a, G * value(b).transpose());
      if (node(b).requires_grad) accumulate_expr(b, value(a).transpose() * G);
    };
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::matmul_nt(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require(A.cols() == B.cols(), "matmul_nt", "inner dimension mismatch");
  const bool rg = any_requires({a, b});
  Var out = push(A * B.transpose(), rg);
  if (rg) {
    node(out).backward = [this, a, b, out] {
      const auto& G = node(out).grad;
      if (node(a).requires_grad) accumulate_expr(a, G * value(b));
      if (node(b).requires_grad) accumulate_expr(b, G.transpose() * value(a));
    };
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::add(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require(A.rows() == B.rows() && A.cols() == B.cols(), "add", "shape mismatch");
  const bool rg = any_requires({a, b});
  Var out = push(A + B, rg);
  if (rg) {
    node(out).backward = [this, a, b, out] {
      const auto& G = node(out).grad;
      accumulate(a, G);
      accumulate(b, G);
    };
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::mul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require(A.rows() == B.rows() && A.cols() == B.cols(), "mul", "shape mismatch");
  const bool rg = any_requires({a, b});
  Var out = push(A.cwiseProduct(B), rg);
  if (rg) {
    node(out).backward = [this, a, b, out] {
      const auto& G = node(out).grad;
      if (node(a).requires_grad) accumulate_expr(a, G.cwiseProduct(value(b)));
      if (node(b).requires_grad) accumulate_expr(b, G.cwiseProduct(value(a)));
    };
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::scale(Var a, T s) {
  const bool rg = any_requires({a});
  Var out = push(value(a) * s, rg);
  if (rg) {
    node(out).backward = [this, a, s, out] { accumulate_expr(a, node(out).grad * s); };
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::silu(Var a) {
  const auto& X = value(a);
  Matrix<T> sig = (T(1) + (-X.array()).exp()).inverse().matrix();
  Matrix<T> y = X.cwiseProduct(sig);
  const bool rg = any_requires({a});
  Var out = push(std::move(y), rg);
  if (rg) {
    auto saved = std::make_shared<Matrix<T>>(std::move(sig));
    node(out).backward = [this, a, out, saved] {
      const auto& X = value(a);
      const auto& s = saved->array();
      Matrix<T> d = (node(out).grad.array() * s * (T(1) + X.array() * (T(1) - s))).matrix();
      accumulate(a, d);
    };
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::rms_norm(Var x, Var gain, T eps) {
  const auto& X = value(x);
  const auto& g = value(gain);
  require(g.rows() == 1 && g.cols() == X.cols(), "rms_norm", "gain must be [1 x d]");
  const Index d = X.cols();
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv(X.rows());
  for (Index r = 0; r < X.rows(); ++r) inv(r) = T(1) / std::sqrt(X.row(r).squaredNorm() / T(d) + eps);
  Matrix<T> y(X.rows(), d);
  for (Index r = 0; r < X.rows(); ++r) y.row(r) = (X.row(r) * inv(r)).cwiseProduct(g);
  const bool rg = any_requires({x, gain});
  Var out = push(std::move(y), rg);
  if (rg) {
    node(out).backward = [this, x, gain, out, inv, d] {
      const auto& X = value(x);
      const auto& g = value(gain);
      const auto& G = node(out).grad;
      if (node(x).requires_grad) {
        Matrix<T> dx(X.rows(), d);
        for (Index r = 0; r < X.rows(); ++r) {
          const RowVector<T> gg = G.row(r).cwiseProduct(g);
          const T dot = gg.dot(X.row(r));
          const T ir = inv(r);
          dx.row(r) = gg * ir - X.row(r) * (ir * ir * ir * dot / T(d));
        }
        accumulate(x, dx);
      }
      if (node(gain).requires_grad) {
        Matrix<T> dg = Matrix<T>::Zero(1, d);
        for (Index r = 0; r < X.rows(); ++r) dg += (X.row(r) * inv(r)).cwiseProduct(G.row(r));
        accumulate(gain, dg);
      }
    };
  }
  return out;
}

namespace {

// Rotates interleaved pairs within each head by angle pos * base^(-2p/head_dim).
// `direction` = -1 applies the inverse rotation.
template <typename T>
Matrix<T> rotate(const Matrix<T>& X, std::span<const Index> positions, Index n_heads, T base, int direction) {
  const Index d = X.cols();
  const Index hd = d / n_heads;
  Matrix<T> Y(X.rows(), d);
  std::vector<T> inv_freq(static_cast<std::size_t>(hd / 2));
  for (Index p = 0; p < hd / 2; ++p)
    inv_freq[static_cast<std::size_t>(p)] = std::pow(base, -T(2 * p) / T(hd));
  for (Index r = 0; r < X.rows(); ++r) {
    const T pos = static_cast<T>(positions[static_cast<std::size_t>(r)]);
    for (Index p = 0; p < hd / 2; ++p) {
      const T ang = pos * inv_freq[static_cast<std::size_t>(p)];
      const T c = std::cos(ang);
      const T s = std::sin(ang) * static_cast<T>(direction);
      for (Index h = 0; h < n_heads; ++h) {
        const Index i0 = h * hd + 2 * p;
        const T x0 = X(r, i0);
        const T x1 = X(r, i0 + 1);
        Y(r, i0) = x0 * c - x1 * s;
        Y(r, i0 + 1) = x0 * s + x1 * c;
      }
    }
  }
  return Y;
}

}  // namespace

template <typename T>
typename Tape<T>::Var Tape<T>::rope(Var x, std::span<const Index> positions, Index n_heads, T base) {
  const auto& X = value(x);
  require(static_cast<Index>(positions.size()) == X.rows(), "rope", "one position per row required");
  require(n_heads > 0 && X.cols() % n_heads == 0 && (X.cols() / n_heads) % 2 == 0, "rope",
          "head dimension must be even");
  const bool rg = any_requires({x});
  Var out = push(rotate(X, positions, n_heads, base, +1), rg);
  if (rg) {
    std::vector<Index> pos(positions.begin(), positions.end());
    node(out).backward = [this, x, out, pos = std::move(pos), n_heads, base] {
      accumulate(x, rotate(node(out).grad, std::span<const Index>(pos), n_heads, base, -1));
    };
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::attention(Var q, Var k, Var v, Index n_heads, const AttendRule& rule,
                                         std::vector<T>* row_sums) {
  const auto& Q = value(q);
  const auto& K = value(k);
  const auto& V = value(v);
  require(K.rows() == V.rows() && K.cols() == Q.cols() && V.cols() == Q.cols(), "attention", "q/k/v shape mismatch");
  require(n_heads > 0 && Q.cols() % n_heads == 0, "attention", "heads must divide width");
  const Index rows = Q.rows();
  const Index cols = K.rows();
  if (rule.dense) {
    require(rule.dense->rows() == rows && rule.dense->cols() == cols, "attention", "mask shape mismatch");
  }
  const Index hd = Q.cols() / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));

  const bool rg = any_requires({q, k, v});
  auto probs = std::make_shared<std::vector<Matrix<T>>>();
  probs->reserve(static_cast<std::size_t>(n_heads));
  Matrix<T> out(rows, Q.cols());
  if (row_sums) row_sums->assign(static_cast<std::size_t>(rows), T(0));

  for (Index h = 0; h < n_heads; ++h) {
    Matrix<T> P = (Q.middleCols(h * hd, hd) * K.middleCols(h * hd, hd).transpose()) * inv_sqrt;
    for (Index i = 0; i < rows; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      auto allowed = [&](Index j) { return rule.dense ? (*rule.dense)(i, j) : j <= rule.causal_offset + i; };
      for (Index j = 0; j < cols; ++j)
        if (allowed(j)) mx = std::max(mx, P(i, j));
      if (!std::isfinite(mx)) throw NumericalError("attention: row with no permitted column");
      T total = 0;
      for (Index j = 0; j < cols; ++j) {
        if (allowed(j)) {
          P(i, j) = std::exp(P(i, j) - mx);
          total += P(i, j);
        } else {
          P(i, j) = 0;
        }
      }
      P.row(i) /= total;
      if (row_sums) (*row_sums)[static_cast<std::size_t>(i)] += P.row(i).sum() / static_cast<T>(n_heads);
    }
    out.middleCols(h * hd, hd).noalias() = P * V.middleCols(h * hd, hd);
    if (rg) probs->push_back(std::move(P));
  }

  Var res = push(std::move(out), rg);
  if (rg) {
    node(res).backward = [this, q, k, v, res, probs, n_heads, hd, inv_sqrt] {
      const auto& G = node(res).grad;
      const auto& Q = value(q);
      const auto& K = value(k);
      const auto& V = value(v);
      Matrix<T> dQ = Matrix<T>::Zero(Q.rows(), Q.cols());
      Matrix<T> dK = Matrix<T>::Zero(K.rows(), K.cols());
      Matrix<T> dV = Matrix<T>::Zero(V.rows(), V.cols());
      for (Index h = 0; h < n_heads; ++h) {
        const Matrix<T>& P = (*probs)[static_cast<std::size_t>(h)];
        const auto Gh = G.middleCols(h * hd, hd);
        dV.middleCols(h * hd, hd).noalias() += P.transpose() * Gh;
        Matrix<T> dP = Gh * V.middleCols(h * hd, hd).transpose();
        Matrix<T> dS(P.rows(), P.cols());
        for (Index i = 0; i < P.rows(); ++i) {
          const T c = P.row(i).dot(dP.row(i));
          dS.row(i) = P.row(i).cwiseProduct((dP.row(i).array() - c).matrix());
        }
        dS *= inv_sqrt;
        dQ.middleCols(h * hd, hd).noalias() += dS * K.middleCols(h * hd, hd);
        dK.middleCols(h * hd, hd).noalias() += dS.transpose() * Q.middleCols(h * hd, hd);
      }
      accumulate(q, dQ);
      accumulate(k, dK);
      accumulate(v, dV);
    };
  }
  return res;
}

template <typename T>
typename Tape<T>::Var Tape<T>::concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  const Index cols = value(parts[0]).cols();
  Index rows = 0;
  bool rg = false;
  for (Var p : parts) {
    require(value(p).cols() == cols, "concat_rows", "column mismatch");
    rows += value(p).rows();
    rg = rg || any_requires({p});
  }
  Matrix<T> out(rows, cols);
  Index at = 0;
  for (Var p : parts) {
    const auto& P = value(p);
    if (P.rows() > 0) out.middleRows(at, P.rows()) = P;
    at += P.rows();
  }
  Var res = push(std::move(out), rg);
  if (rg) {
    std::vector<Var> ps(parts.begin(), parts.end());
    node(res).backward = [this, ps = std::move(ps), res] {
      const auto& G = node(res).grad;
      Index at = 0;
      for (Var p : ps) {
        const Index n = value(p).rows();
        if (node(p).requires_grad && n > 0) accumulate_expr(p, G.middleRows(at, n));
        at += n;
      }
    };
  }
  return res;
}

template <typename T>
typename Tape<T>::Var Tape<T>::slice_rows(Var x, Index begin, Index count) {
  const auto& X = value(x);
  require(begin >= 0 && count >= 0 && begin + count <= X.rows(), "slice_rows", "range out of bounds");
  const bool rg = any_requires({x});
  Var out = push(X.middleRows(begin, count), rg);
  if (rg) {
    node(out).backward = [this, x, out, begin, count] {
      const auto& X = value(x);
      Matrix<T> d = Matrix<T>::Zero(X.rows(), X.cols());
      d.middleRows(begin, count) = node(out).grad;
      accumulate(x, d);
    };
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::gather_rows(Var table, std::span<const TokenId> ids) {
  const auto& E = value(table);
  Matrix<T> out(static_cast<Index>(ids.size()), E.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= E.rows()) throw ShapeError("gather_rows: token id " + std::to_string(ids[i]) + " out of range");
    out.row(static_cast<Index>(i)) = E.row(ids[i]);
  }
  const bool rg = any_requires({table});
  Var res = push(std::move(out), rg);
  if (rg) {
    std::vector<TokenId> idx(ids.begin(), ids.end());
    node(res).backward = [this, table, res, idx = std::move(idx)] {
      const auto& E = value(table);
      const auto& G = node(res).grad;
      Matrix<T> d = Matrix<T>::Zero(E.rows(), E.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += G.row(static_cast<Index>(i));
      accumulate(table, d);
    };
  }
  return res;
}

template <typename T>
typename Tape<T>::Var Tape<T>::mean_rows(Var x) {
  const auto& X = value(x);
  require(X.rows() > 0, "mean_rows", "empty input");
  const bool rg = any_requires({x});
  Matrix<T> m = X.colwise().sum() / static_cast<T>(X.rows());
  Var out = push(std::move(m), rg);
  if (rg) {
    node(out).backward = [this, x, out] {
      const auto& X = value(x);
      Matrix<T> d = node(out).grad.replicate(X.rows(), 1) / static_cast<T>(X.rows());
      accumulate(x, d);
    };
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::sum(Var x) {
  const auto& X = value(x);
  const bool rg = any_requires({x});
  Matrix<T> s(1, 1);
  s(0, 0) = X.sum();
  Var out = push(std::move(s), rg);
  if (rg) {
    node(out).backward = [this, x, out] {
      const auto& X = value(x);
      accumulate_expr(x, Matrix<T>::Constant(X.rows(), X.cols(), node(out).grad(0, 0)));
    };
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::detach(Var x) {
  Node n;
  n.borrowed = &node(x).value();
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
typename Tape<T>::Var Tape<T>::l2_normalize_rows(Var x) {
  const auto& X = value(x);
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms(X.rows());
  Matrix<T> U(X.rows(), X.cols());
  for (Index r = 0; r < X.rows(); ++r) {
    norms(r) = X.row(r).norm();
    if (!(norms(r) > T(0))) throw NumericalError("l2_normalize_rows: zero-norm row");
    U.row(r) = X.row(r) / norms(r);
  }
  const bool rg = any_requires({x});
  Var out = push(std::move(U), rg);
  if (rg) {
    node(out).backward = [this, x, out, norms] {
      const auto& U = value(out);
      const auto& G = node(out).grad;
      Matrix<T> d(U.rows(), U.cols());
      for (Index r = 0; r < U.rows(); ++r) d.row(r) = (G.row(r) - U.row(r) * U.row(r).dot(G.row(r))) / norms(r);
      accumulate(x, d);
    };
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::cross_entropy(Var logits, std::span<const TokenId> labels) {
  const auto& L = value(logits);
  require(static_cast<Index>(labels.size()) == L.rows(), "cross_entropy", "one label per row required");
  require(L.rows() > 0, "cross_entropy", "empty input");
  Matrix<T> probs(L.rows(), L.cols());
  T total = 0;
  for (Index r = 0; r < L.rows(); ++r) {
    const TokenId y = labels[static_cast<std::size_t>(r)];
    require(y >= 0 && y < L.cols(), "cross_entropy", "label out of range");
    const T mx = L.row(r).maxCoeff();
    probs.row(r) = (L.row(r).array() - mx).exp().matrix();
    const T z = probs.row(r).sum();
    probs.row(r) /= z;
    total += -(L(r, y) - mx - std::log(z));
  }
  Matrix<T> out(1, 1);
  out(0, 0) = total / static_cast<T>(L.rows());
  const bool rg = any_requires({logits});
  Var res = push(std::move(out), rg);
  if (rg) {
    auto saved = std::make_shared<Matrix<T>>(std::move(probs));
    std::vector<TokenId> ys(labels.begin(), labels.end());
    node(res).backward = [this, logits, res, saved, ys = std::move(ys)] {
      Matrix<T> d = *saved;
      for (std::size_t r = 0; r < ys.size(); ++r) d(static_cast<Index>(r), ys[r]) -= T(1);
      d *= node(res).grad(0, 0) / static_cast<T>(ys.size());
      accumulate(logits, d);
    };
  }
  return res;
}

template <typename T>
void Tape<T>::backward(std::span<const Seed> seeds) {
  if (!recording() || nodes_.empty()) throw std::logic_error("backward without recorded forward");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  Index last = -1;
  for (const auto& s : seeds) {
    const auto& v = value(s.var);
    require(s.grad.rows() == v.rows() && s.grad.cols() == v.cols(), "backward", "seed shape mismatch");
    accumulate(s.var, s.grad);
    last = std::max<Index>(last, s.var.id);
  }
  for (Index i = last; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward();
    if (n.sink) {
      if (n.sink->size() == 0) {
        *n.sink = n.grad;
      } else {
        *n.sink += n.grad;
      }
    }
  }
}

template <typename T>
void Tape<T>::backward(Var scalar) {
  const auto& v = value(scalar);
  require(v.rows() == 1 && v.cols() == 1, "backward", "scalar output required");
  std::vector<Seed> seeds{Seed{scalar, Matrix<T>::Ones(1, 1)}};
  backward(seeds);
}

template class Tape<float>;
template class Tape<double>;

}  // namespace btok
