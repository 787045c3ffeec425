#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "attnprune/errors.hpp"
#include "attnprune/matrix.hpp"
#include "attnprune/rng.hpp"
#include "oracles/oracles.hpp"

using namespace attnprune;

TEST_CASE("matmul identity and hand arithmetic") {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  CHECK(matmul(Matrix::identity(2), a) == a);

  const Matrix row = Matrix::from_rows({{1, 2}});
  const Matrix col = Matrix::from_rows({{3}, {4}});
  const Matrix prod = matmul(row, col);
  CHECK(prod.rows() == 1);
  CHECK(prod.cols() == 1);
  CHECK(prod.at(0, 0) == doctest::Approx(11.0));
}

TEST_CASE("matmul matches the naive triple-loop oracle") {
  Rng rng(42);
  const Matrix a = random_uniform_matrix(rng, 5, 7, -2.0, 2.0);
  const Matrix b = random_uniform_matrix(rng, 7, 3, -2.0, 2.0);
  const Matrix c = matmul(a, b);
  const auto expected = oracle::naive_matmul(a.data(), b.data(), 5, 7, 3);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 3; ++j) {
      CHECK(c.at(i, j) == doctest::Approx(expected[i * 3 + j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const Matrix a(2, 3);
  const Matrix b(4, 2);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), ShapeError);
  try {
    matmul(a, b);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("4x2") != std::string::npos);
  }
}

TEST_CASE("matmul rejects non-finite results") {
  Matrix a(1, 2);
  a.at(0, 0) = 1e300;
  a.at(0, 1) = 1e300;
  Matrix b(2, 1);
  b.at(0, 0) = 1e300;
  b.at(1, 0) = 1e300;
  CHECK_THROWS_AS(matmul(a, b), NumericError);
}

TEST_CASE("softmax rows: symmetry, shift invariance, exp(ln 3)") {
  const Matrix sym = softmax_rows(Matrix::from_rows({{0, 0}}));
  CHECK(sym.at(0, 0) == doctest::Approx(0.5));
  CHECK(sym.at(0, 1) == doctest::Approx(0.5));

  const Matrix big = softmax_rows(Matrix::from_rows({{1000, 1000, 1000}}));
  for (int j = 0; j < 3; ++j) CHECK(big.at(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  const Matrix ln3 = softmax_rows(Matrix::from_rows({{0.0, std::log(3.0)}}));
  CHECK(ln3.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(ln3.at(0, 1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one up to 1e6 magnitudes") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix a = random_uniform_matrix(rng, 4, 6, -1e6, 1e6);
    const Matrix s = softmax_rows(a);
    for (int i = 0; i < s.rows(); ++i) {
      double sum = 0.0;
      for (int j = 0; j < s.cols(); ++j) {
        CHECK(s.at(i, j) >= 0.0);
        sum += s.at(i, j);
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("row norms") {
  const Matrix m = Matrix::from_rows({{3, 4}, {0, 0}});
  const auto l2 = row_norms(m, 2);
  const auto l1 = row_norms(m, 1);
  CHECK(l2[0] == doctest::Approx(5.0));
  CHECK(l1[0] == doctest::Approx(7.0));
  CHECK(l2[1] == 0.0);
  CHECK(l1[1] == 0.0);
  CHECK_THROWS_AS(row_norms(m, 3), ValidationError);
}

TEST_CASE("transpose is an involution, bit-exactly") {
  Rng rng(11);
  const Matrix a = random_normal_matrix(rng, 6, 9, 1.0);
  CHECK(transpose(transpose(a)) == a);
}

TEST_CASE("matmul associativity within 1e-9 relative Frobenius error") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_normal_matrix(rng, 4, 5, 1.0);
    const Matrix b = random_normal_matrix(rng, 5, 6, 1.0);
    const Matrix c = random_normal_matrix(rng, 6, 3, 1.0);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < left.size(); ++i) {
      const double d = left.data()[i] - right.data()[i];
      num += d * d;
      den += left.data()[i] * left.data()[i];
    }
    CHECK(std::sqrt(num) <= 1e-9 * std::max(1.0, std::sqrt(den)));
  }
}

TEST_CASE("add, sub, scale semantics and shape errors") {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{10, 20}, {30, 40}});
  CHECK(add(a, b) == Matrix::from_rows({{11, 22}, {33, 44}}));
  CHECK(sub(b, a) == Matrix::from_rows({{9, 18}, {27, 36}}));
  CHECK(scale(a, 2.0) == Matrix::from_rows({{2, 4}, {6, 8}}));
  CHECK_THROWS_AS(add(a, Matrix(3, 2)), ShapeError);
}

TEST_CASE("matrix construction invariants") {
  CHECK_THROWS_AS(Matrix(0, 3), ShapeError);
  CHECK_THROWS_AS(Matrix(2, 2, {1.0, 2.0, 3.0}), ShapeError);
  const Matrix m(2, 2, {1.0, 2.0, 3.0, 4.0});
  CHECK(m.size() == 4);
}
