#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace attnprune {

// Dense row-major matrix of 64-bit reals. The only numeric container in the
// project; everything (weights, activations, gradients) is one of these.
// Treated as an immutable value after construction: operations return new
// matrices, so sharing across threads for reading is safe.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols);  // zero-filled
  Matrix(int rows, int cols, std::vector<double> data);

  static Matrix identity(int n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_str() const;  // e.g. "5x7"

  bool operator==(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);

// Row-wise softmax with per-row max subtraction, so rows of any magnitude
// stay finite and sum to 1.
Matrix softmax_rows(const Matrix& a);

// Per-row norms; p = 1 (sum of absolute values) or p = 2 (Euclidean).
std::vector<double> row_norms(const Matrix& a, int p);

// Throws NumericError if any element is NaN/Inf. Every exported operation
// above runs this on its result.
void check_finite(const Matrix& a, const char* where);

double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace attnprune
