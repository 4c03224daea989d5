#include "btok/objectives.hpp"

#include <cmath>
#include <string>

#include <fmt/format.h>

namespace btok {

void ContrastiveConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("objective.temperature", "must be > 0");
}

void LambdaSchedule::validate() const {
  if (!(warm_value >= 0.0) || !std::isfinite(warm_value)) throw ConfigError("objective.lambda.warm_value", "must be >= 0");
  if (boundary_step < 0) throw ConfigError("objective.lambda.boundary_step", "must be >= 0");
  if (total_steps <= 0) throw ConfigError("objective.lambda.total_steps", "must be positive");
}

double lambda_at(const LambdaSchedule& schedule, Index step) {
  if (step < 0 || step >= schedule.total_steps)
    throw std::out_of_range("lambda_at: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(schedule.total_steps) + ")");
  return step < schedule.boundary_step ? schedule.warm_value : 0.0;
}

std::string LossReport::to_log_line() const {
  return fmt::format("step={} lr={:.9g} lambda={:.9g} L_ctr={:.17g} L_ntp={:.17g} L_total={:.17g} wall_ms={:.3f}", step,
                     lr, lambda, ctr, ntp, total, wall_ms);
}

bool LossReport::same_values(const LossReport& o) const {
  return step == o.step && lr == o.lr && lambda == o.lambda && ctr == o.ctr && ntp == o.ntp && total == o.total &&
         similarity.rows() == o.similarity.rows() && similarity.cols() == o.similarity.cols() &&
         similarity == o.similarity;
}

template <typename T>
T cosine_similarity(const RowVector<T>& a, const RowVector<T>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: dimension mismatch");
  const T na = a.norm();
  const T nb = b.norm();
  if (!(na > T(0)) || !(nb > T(0))) throw NumericalError("cosine_similarity: zero-norm vector");
  return a.dot(b) / (na * nb);
}

namespace {

template <typename T>
Matrix<T> normalized_rows(std::span<const RowVector<T>> v, std::vector<T>& norms) {
  const Index d = v.empty() ? 0 : v[0].size();
  Matrix<T> u(static_cast<Index>(v.size()), d);
  norms.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i].size() != d) throw ShapeError("infonce: embedding dimension mismatch");
    norms[i] = v[i].norm();
    if (!(norms[i] > T(0))) throw NumericalError("infonce: zero-norm embedding");
    u.row(static_cast<Index>(i)) = v[i] / norms[i];
  }
  return u;
}

// Row-wise softmax cross-entropy against the diagonal; returns summed loss and
// writes dLoss/dLogits (unscaled by the batch mean) into `dlogits`.
template <typename T>
T diagonal_xent(const Matrix<T>& logits, Matrix<T>& dlogits) {
  T total = 0;
  dlogits.resize(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const T mx = logits.row(i).maxCoeff();
    RowVector<T> e = (logits.row(i).array() - mx).exp().matrix();
    const T z = e.sum();
    total += -(logits(i, i) - mx - std::log(z));
    dlogits.row(i) = e / z;
    dlogits(i, i) -= T(1);
  }
  return total;
}

template <typename T>
ContrastiveResult<T> infonce_impl(std::span<const RowVector<T>> queries, std::span<const RowVector<T>> candidates,
                                  const ContrastiveConfig& cfg, bool want_grad) {
  cfg.validate();
  if (queries.size() != candidates.size()) throw ShapeError("infonce: query and candidate counts differ");
  if (queries.empty()) throw ShapeError("infonce: empty batch");
  const T inv_tau = T(1) / static_cast<T>(cfg.temperature);
  const T inv_b = T(1) / static_cast<T>(queries.size());
  std::vector<T> qn, cn;
  const Matrix<T> U = normalized_rows(queries, qn);
  const Matrix<T> W = normalized_rows(candidates, cn);

  ContrastiveResult<T> r;
  r.vacuous = queries.size() < 2;
  r.similarity = U * W.transpose();
  const Matrix<T> logits = r.similarity * inv_tau;
  Matrix<T> d_rows;
  T loss = diagonal_xent(logits, d_rows) * inv_b;
  // dL/d(similarity), including the 1/tau and 1/|B| factors.
  Matrix<T> dsim = d_rows * (inv_b * inv_tau);
  if (cfg.symmetric) {
    Matrix<T> d_cols;
    const Matrix<T> lt = logits.transpose();
    loss = T(0.5) * (loss + diagonal_xent(lt, d_cols) * inv_b);
    dsim = T(0.5) * (dsim + d_cols.transpose() * (inv_b * inv_tau));
  }
  r.loss = loss;
  if (!want_grad) return r;

  const Matrix<T> dU = dsim * W;
  const Matrix<T> dW = dsim.transpose() * U;
  r.query_grads.resize(queries.size());
  r.cand_grads.resize(candidates.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const Index ii = static_cast<Index>(i);
    r.query_grads[i] = (dU.row(ii) - U.row(ii) * U.row(ii).dot(dU.row(ii))) / qn[i];
    r.cand_grads[i] = (dW.row(ii) - W.row(ii) * W.row(ii).dot(dW.row(ii))) / cn[i];
  }
  return r;
}

}  // namespace

template <typename T>
ContrastiveResult<T> infonce(std::span<const RowVector<T>> queries, std::span<const RowVector<T>> candidates,
                             const ContrastiveConfig& cfg) {
  return infonce_impl(queries, candidates, cfg, false);
}

template <typename T>
ContrastiveResult<T> infonce_with_grad(std::span<const RowVector<T>> queries,
                                       std::span<const RowVector<T>> candidates, const ContrastiveConfig& cfg) {
  return infonce_impl(queries, candidates, cfg, true);
}

template <typename T>
T ntp_loss(const Matrix<T>& logits, std::span<const TokenId> targets) {
  if (logits.rows() != static_cast<Index>(targets.size())) throw ShapeError("ntp_loss: logits/target length mismatch");
  if (targets.empty()) throw ShapeError("ntp_loss: empty target segment");
  T total = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const TokenId y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) throw ShapeError("ntp_loss: target token out of vocabulary");
    const T mx = logits.row(i).maxCoeff();
    const T lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    total += lse - logits(i, y);
  }
  return total / static_cast<T>(logits.rows());
}

double joint_loss(double ctr, double ntp, double lambda) {
  if (!std::isfinite(ctr) || !std::isfinite(ntp) || !std::isfinite(lambda))
    throw NumericalError("joint_loss: non-finite input");
  return ctr + lambda * ntp;
}

#define BTOK_INSTANTIATE(T)                                                                               \
  template T cosine_similarity<T>(const RowVector<T>&, const RowVector<T>&);                              \
  template ContrastiveResult<T> infonce<T>(std::span<const RowVector<T>>, std::span<const RowVector<T>>,  \
                                           const ContrastiveConfig&);                                     \
  template ContrastiveResult<T> infonce_with_grad<T>(std::span<const RowVector<T>>,                       \
                                                     std::span<const RowVector<T>>, const ContrastiveConfig&); \
  template T ntp_loss<T>(const Matrix<T>&, std::span<const TokenId>);

BTOK_INSTANTIATE(float)
BTOK_INSTANTIATE(double)

}  // namespace btok
