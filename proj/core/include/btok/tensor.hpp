#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "btok/errors.hpp"

namespace btok {

using Index = Eigen::Index;
using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

enum class DType : std::uint32_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

const char* dtype_name(DType d);

// Dense 0/1 matrix. Rows are attending positions, columns attended positions.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(Index rows, Index cols, bool fill = false)
      : rows_(rows), cols_(cols), bits_(static_cast<std::size_t>(rows * cols), fill ? 1 : 0) {}

  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  bool operator()(Index r, Index c) const { return bits_[static_cast<std::size_t>(r * cols_ + c)] != 0; }
  void set(Index r, Index c, bool v) { bits_[static_cast<std::size_t>(r * cols_ + c)] = v ? 1 : 0; }
  Index row_count(Index r) const {
    Index n = 0;
    for (Index c = 0; c < cols_; ++c) n += (*this)(r, c);
    return n;
  }

  static BinaryMask lower_triangular(Index n) {
    BinaryMask m(n, n);
    for (Index r = 0; r < n; ++r)
      for (Index c = 0; c <= r; ++c) m.set(r, c, true);
    return m;
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  Index rows_ = 0;
  Index cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

}  // namespace btok
