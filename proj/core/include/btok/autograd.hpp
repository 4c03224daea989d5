#pragma once

#include <atomic>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "btok/tensor.hpp"

namespace btok {

enum class GradMode { record, inference };

// Which key columns each query row may read inside the attention op.
struct AttendRule {
  const BinaryMask* dense = nullptr;  // [rows x cols] when non-null
  Index causal_offset = 0;            // otherwise: row i reads columns j <= causal_offset + i
};

// Reverse-mode tape over row-major matrices.
//
// Every op evaluates eagerly. In `GradMode::record` each op whose inputs need
// gradients also stores a backward closure; in `GradMode::inference` nothing is
// stored beyond the values, and the arithmetic is identical, so values from the
// two modes agree bitwise.
//
// A tape is confined to one thread. Parameters enter through `parameter()`,
// which borrows the value and accumulates gradients into a caller-owned sink
// during `backward()`; sinks are never cleared by the tape.
template <typename T>
class Tape {
 public:
  struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
  };

  struct Seed {
    Var var;
    Matrix<T> grad;
  };

  explicit Tape(GradMode mode = GradMode::record);
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == GradMode::record; }
  std::size_t size() const { return nodes_.size(); }

  // Number of recording tapes currently alive in the process.
  static int live_recording_contexts() { return live_recording_.load(); }

  Var constant(Matrix<T> value);
  // Owned leaf whose gradient is retained (an input activation).
  Var leaf(Matrix<T> value);
  // Borrowed leaf; `grad_sink` (may be null) receives accumulated gradients.
  Var parameter(const Matrix<T>& value, Matrix<T>* grad_sink);

  const Matrix<T>& value(Var v) const;
  // Gradient from the most recent backward(); zeros when none reached `v`.
  Matrix<T> grad(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T s);
  Var silu(Var a);
  Var rms_norm(Var x, Var gain, T eps);
  Var rope(Var x, std::span<const Index> positions, Index n_heads, T base);
  // Multi-head softmax attention; masked columns are excluded from the softmax.
  // `row_sums`, when given, receives the per-row probability mass averaged over heads.
  Var attention(Var q, Var k, Var v, Index n_heads, const AttendRule& rule,
                std::vector<T>* row_sums = nullptr);
  Var concat_rows(std::span<const Var> parts);
  Var slice_rows(Var x, Index begin, Index count);
  Var gather_rows(Var table, std::span<const TokenId> ids);
  Var mean_rows(Var x);
  Var sum(Var x);
  Var detach(Var x);
  Var l2_normalize_rows(Var x);
  // Mean over rows of -log softmax(logits)[row, labels[row]]; returns [1 x 1].
  Var cross_entropy(Var logits, std::span<const TokenId> labels);

  // Seeds d(output)/d(var) = grad for each seed and propagates to every leaf.
  // Node gradients are reset at the start of each call; parameter sinks accumulate.
  void backward(std::span<const Seed> seeds);
  void backward(Var scalar);

 private:
  struct Node {
    Matrix<T> owned;
    const Matrix<T>* borrowed = nullptr;
    Matrix<T> grad;
    Matrix<T>* sink = nullptr;
    bool requires_grad = false;
    std::function<void()> backward;
    const Matrix<T>& value() const { return borrowed ? *borrowed : owned; }
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  Var push(Matrix<T> value, bool requires_grad);
  bool any_requires(std::initializer_list<Var> vars) const;
  void accumulate(Var v, const Matrix<T>& g);
  template <typename Expr>
  void accumulate_expr(Var v, const Expr& g);

  GradMode mode_;
  std::deque<Node> nodes_;
  static inline std::atomic<int> live_recording_{0};
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace btok
