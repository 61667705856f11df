#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace fermi {

// Row-major dense matrix of doubles. Deliberately small: exactly the linear
// algebra the toolkit needs, all in 64-bit floating point.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), a_(rows * cols, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix from_row(std::span<const double> row);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return a_.size(); }
  bool empty() const { return a_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return a_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {a_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const {
    return {a_.data() + i * cols_, cols_};
  }

  double* data() { return a_.data(); }
  const double* data() const { return a_.data(); }

  bool same_shape(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> a_;
};

// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
// C = A^T * B
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// C = A * B^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);

// y_ij += bias_0j for every row i. bias must be 1 x cols.
void add_row_vector(Matrix& m, const Matrix& bias);

// Exact element-by-element equality (determinism checks).
bool bitwise_equal(const Matrix& a, const Matrix& b);

// Column means / biased column variances of a batch.
std::vector<double> column_means(const Matrix& m);

}  // namespace fermi
