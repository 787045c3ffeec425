#include "attnprune/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>

#include "attnprune/errors.hpp"

namespace attnprune {

Matrix::Matrix(int rows, int cols) : rows_(rows), cols_(cols) {
  if (rows <= 0 || cols <= 0) {
    throw ShapeError("matrix dimensions must be positive, got " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  data_.assign(static_cast<std::size_t>(rows) * cols, 0.0);
}

Matrix::Matrix(int rows, int cols, std::vector<double> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (rows <= 0 || cols <= 0) {
    throw ShapeError("matrix dimensions must be positive, got " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  if (data_.size() != static_cast<std::size_t>(rows) * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(int n) {
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const int r = static_cast<int>(rows.size());
  const int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
  Matrix m(r, c);
  int i = 0;
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != c) {
      throw ShapeError("ragged initializer: row " + std::to_string(i) + " has " +
                       std::to_string(row.size()) + " entries, expected " + std::to_string(c));
    }
    int j = 0;
    for (double v : row) m.at(i, j++) = v;
    ++i;
  }
  return m;
}

std::string Matrix::shape_str() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void check_finite(const Matrix& a, const char* where) {
  for (double v : a.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(where) + ": non-finite element in " + a.shape_str() +
                         " result");
    }
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + a.shape_str() + " vs " + b.shape_str());
  }
  Matrix out(a.rows(), b.cols());
  const int n = a.rows(), k = a.cols(), m = b.cols();
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  double* op = out.data().data();
  // i-k-j order keeps the inner loop contiguous over b and out.
  for (int i = 0; i < n; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const double av = ap[static_cast<std::size_t>(i) * k + kk];
      const double* brow = bp + static_cast<std::size_t>(kk) * m;
      double* orow = op + static_cast<std::size_t>(i) * m;
      for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  check_finite(out, "matmul");
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("add: shape mismatch, " + a.shape_str() + " vs " + b.shape_str());
  }
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  check_finite(out, "add");
  return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("sub: shape mismatch, " + a.shape_str() + " vs " + b.shape_str());
  }
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  check_finite(out, "sub");
  return out;
}

Matrix scale(const Matrix& a, double s) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
  check_finite(out, "scale");
  return out;
}

Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i) {
    double mx = a.at(i, 0);
    for (int j = 1; j < a.cols(); ++j) mx = std::max(mx, a.at(i, j));
    double sum = 0.0;
    for (int j = 0; j < a.cols(); ++j) {
      const double e = std::exp(a.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (int j = 0; j < a.cols(); ++j) out.at(i, j) /= sum;
  }
  check_finite(out, "softmax_rows");
  return out;
}

std::vector<double> row_norms(const Matrix& a, int p) {
  if (p != 1 && p != 2) {
    throw ValidationError("row_norms: p must be 1 or 2, got " + std::to_string(p));
  }
  std::vector<double> norms(a.rows(), 0.0);
  for (int i = 0; i < a.rows(); ++i) {
    double acc = 0.0;
    for (int j = 0; j < a.cols(); ++j) {
      const double v = a.at(i, j);
      acc += (p == 1) ? std::abs(v) : v * v;
    }
    norms[i] = (p == 1) ? acc : std::sqrt(acc);
  }
  return norms;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: shape mismatch, " + a.shape_str() + " vs " + b.shape_str());
  }
  double mx = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::abs(a.data()[i] - b.data()[i]));
  return mx;
}

}  // namespace attnprune
