#pragma once

#include <span>
#include <string>
#include <vector>

#include "btok/tensor.hpp"

namespace btok {

inline constexpr double kDefaultTemperature = 0.02;

struct ContrastiveConfig {
  double temperature = kDefaultTemperature;
  // Adds the candidate-to-query direction. Off by default; not part of the base objective.
  bool symmetric = false;
  void validate() const;
};

// lambda(t) = warm_value for t < boundary_step, 0 afterwards; t is zero-based.
struct LambdaSchedule {
  double warm_value = 0.1;
  Index boundary_step = 2000;
  Index total_steps = 5000;
  void validate() const;
  friend bool operator==(const LambdaSchedule&, const LambdaSchedule&) = default;
};

double lambda_at(const LambdaSchedule& schedule, Index step);

struct LossReport {
  Index step = 0;
  double lr = 0.0;
  double lambda = 0.0;
  double ctr = 0.0;
  double ntp = 0.0;
  double total = 0.0;
  double wall_ms = 0.0;
  Matrix<double> similarity;  // [|B| x |B|] cosine similarities

  // "step=.. lr=.. lambda=.. L_ctr=.. L_ntp=.. L_total=.. wall_ms=.."
  std::string to_log_line() const;
  // Compares every field except wall_ms.
  bool same_values(const LossReport& other) const;
};

template <typename T>
T cosine_similarity(const RowVector<T>& a, const RowVector<T>& b);

template <typename T>
struct ContrastiveResult {
  T loss = 0;
  Matrix<T> similarity;  // cosine, before temperature
  bool vacuous = false;  // |B| < 2: no negatives
  std::vector<RowVector<T>> query_grads;  // dL/dq_i, filled by infonce_with_grad
  std::vector<RowVector<T>> cand_grads;  // dL/dc_j
};

// -(1/|B|) sum_i log softmax_j(s(q_i, c_j) / tau)[i]
template <typename T>
ContrastiveResult<T> infonce(std::span<const RowVector<T>> queries, std::span<const RowVector<T>> candidates,
                             const ContrastiveConfig& cfg);

// Same loss plus its gradient with respect to every embedding vector.
template <typename T>
ContrastiveResult<T> infonce_with_grad(std::span<const RowVector<T>> queries,
                                       std::span<const RowVector<T>> candidates, const ContrastiveConfig& cfg);

// Mean NLL of logits[i] on target[i], i = 0..N_t-1.
template <typename T>
T ntp_loss(const Matrix<T>& target_logits, std::span<const TokenId> target_tokens);

double joint_loss(double ctr, double ntp, double lambda);

}  // namespace btok
