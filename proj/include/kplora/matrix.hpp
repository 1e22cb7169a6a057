#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "kplora/error.hpp"

namespace kplora {

// Dense row-major matrix of doubles.
class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* row(std::size_t r) { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const { return data_.data() + r * cols_; }

  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void resize(std::size_t rows, std::size_t cols) {
    rows_ = rows;
    cols_ = cols;
    data_.assign(rows * cols, 0.0);
  }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

namespace matrix_detail {
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
inline Eigen::Map<RowMajor> view(Matrix& m) { return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())}; }
inline Eigen::Map<const RowMajor> view(const Matrix& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
}  // namespace matrix_detail

// C += scale * A * B
inline void add_matmul(Matrix& c, const Matrix& a, const Matrix& b, double scale = 1.0) {
  require(a.cols() == b.rows() && c.rows() == a.rows() && c.cols() == b.cols(), [&] {
    return "matmul shape mismatch: " + shape_str(a) + " * " + shape_str(b) + " -> " + shape_str(c);
  });
  if (c.empty() || a.cols() == 0) return;
  using matrix_detail::view;
  view(c).noalias() += scale * (view(a) * view(b));
}

// C += scale * A^T * B
inline void add_matmul_tn(Matrix& c, const Matrix& a, const Matrix& b, double scale = 1.0) {
  require(a.rows() == b.rows() && c.rows() == a.cols() && c.cols() == b.cols(), [&] {
    return "matmul_tn shape mismatch: " + shape_str(a) + "^T * " + shape_str(b) + " -> " + shape_str(c);
  });
  if (c.empty() || a.rows() == 0) return;
  using matrix_detail::view;
  view(c).noalias() += scale * (view(a).transpose() * view(b));
}

// C += scale * A * B^T
inline void add_matmul_nt(Matrix& c, const Matrix& a, const Matrix& b, double scale = 1.0) {
  require(a.cols() == b.cols() && c.rows() == a.rows() && c.cols() == b.rows(), [&] {
    return "matmul_nt shape mismatch: " + shape_str(a) + " * " + shape_str(b) + "^T -> " + shape_str(c);
  });
  if (c.empty() || a.cols() == 0) return;
  using matrix_detail::view;
  view(c).noalias() += scale * (view(a) * view(b).transpose());
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  add_matmul(c, a, b);
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// a += scale * b
inline void axpy(Matrix& a, const Matrix& b, double scale = 1.0) {
  require(a.same_shape(b), [&] { return "axpy shape mismatch: " + shape_str(a) + " vs " + shape_str(b); });
  auto fa = a.flat();
  auto fb = b.flat();
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] += scale * fb[i];
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace kplora
