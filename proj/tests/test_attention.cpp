#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "attnprune/attention.hpp"
#include "attnprune/errors.hpp"
#include "attnprune/rng.hpp"
#include "oracles/oracles.hpp"

using namespace attnprune;

namespace {

AttentionBlock seed_block(std::uint64_t seed = 42, int d = 8, int n_h = 2, int n_c = 4) {
  Rng rng(seed);
  return make_attention_block(d, n_h, n_c, rng);
}

Matrix seed_input(std::uint64_t seed = 7, int n = 5, int d = 8) {
  Rng rng(seed);
  return random_normal_matrix(rng, n, d, 1.0);
}

}  // namespace

TEST_CASE("zero queries give uniform attention") {
  AttentionBlock b = seed_block();
  for (double& v : b.w_q.data()) v = 0.0;
  const Matrix x = seed_input();
  const Matrix out = attention_forward(b, x);

  // uniform attention averages the value vectors, so every output row is
  // (column mean of x) * w_v^T * w_o^T
  Matrix mean(1, b.d);
  for (int j = 0; j < b.d; ++j) {
    double acc = 0.0;
    for (int i = 0; i < x.rows(); ++i) acc += x.at(i, j);
    mean.at(0, j) = acc / x.rows();
  }
  const Matrix expected = matmul(matmul(mean, transpose(b.w_v)), transpose(b.w_o));
  for (int i = 0; i < out.rows(); ++i) {
    for (int j = 0; j < out.cols(); ++j) {
      CHECK(out.at(i, j) == doctest::Approx(expected.at(0, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("single token ignores queries and keys") {
  const AttentionBlock b = seed_block();
  const Matrix x = seed_input(7, 1, 8);
  const Matrix out = attention_forward(b, x);
  const Matrix expected = matmul(matmul(x, transpose(b.w_v)), transpose(b.w_o));
  CHECK(max_abs_diff(out, expected) <= 1e-14);

  AttentionBlock b2 = b;
  Rng rng(99);
  b2.w_q = random_normal_matrix(rng, b.qk_rows(), b.d, 1.0);
  b2.w_k = random_normal_matrix(rng, b.qk_rows(), b.d, 1.0);
  CHECK(max_abs_diff(attention_forward(b2, x), expected) <= 1e-14);
}

TEST_CASE("forward matches the straight-line oracle") {
  const AttentionBlock b = seed_block();
  const Matrix x = seed_input();
  const Matrix out = attention_forward(b, x);
  const auto expected =
      oracle::attention_forward(x.data(), x.rows(), b.d, b.n_h_qk, b.n_c_qk, b.n_c_vo,
                                b.w_q.data(), b.w_k.data(), b.w_v.data(), b.w_o.data(), b.scale);
  for (int i = 0; i < out.rows(); ++i) {
    for (int j = 0; j < out.cols(); ++j) {
      CHECK(std::abs(out.at(i, j) - expected[i * b.d + j]) <= 1e-12);
    }
  }
}

TEST_CASE("mismatched head counts are rejected") {
  Rng rng(5);
  const AttentionBlock b = make_attention_block(8, 2, 4, 4, 2, rng);
  const Matrix x = seed_input();
  CHECK_THROWS_WITH_AS(attention_forward(b, x), doctest::Contains("head-count mismatch"),
                       ShapeError);
}

TEST_CASE("input width must match the embed dimension") {
  const AttentionBlock b = seed_block();
  CHECK_THROWS_AS(attention_forward(b, Matrix(3, 5)), ShapeError);
}

TEST_CASE("masked forward: empty mask is the identity") {
  const AttentionBlock b = seed_block();
  const Matrix x = seed_input();
  CHECK(attention_forward_masked(b, PruneMask{}, x) == attention_forward(b, x));
}

TEST_CASE("masking all VO channels of a head silences it") {
  const AttentionBlock b = seed_block();
  const Matrix x = seed_input();
  PruneMask mask;
  for (int c = 0; c < b.n_c_vo; ++c) mask.add_vo(1, c);

  AttentionBlock zeroed = b;
  for (int c = 0; c < b.n_c_vo; ++c) {
    const int r = 1 * b.n_c_vo + c;
    for (int j = 0; j < b.d; ++j) {
      zeroed.w_o.at(j, r) = 0.0;
      zeroed.w_v.at(r, j) = 0.0;
    }
  }
  CHECK(attention_forward_masked(b, mask, x) == attention_forward(zeroed, x));
}

TEST_CASE("masking a QK channel equals zeroing those rows explicitly") {
  const AttentionBlock b = seed_block();
  const Matrix x = seed_input();
  PruneMask mask;
  mask.add_qk(0, 1);

  AttentionBlock zeroed = b;
  const int r = 0 * b.n_c_qk + 1;
  for (int j = 0; j < b.d; ++j) {
    zeroed.w_q.at(r, j) = 0.0;
    zeroed.w_k.at(r, j) = 0.0;
  }
  CHECK(attention_forward_masked(b, mask, x) == attention_forward(zeroed, x));
}

TEST_CASE("mask index out of range is rejected") {
  const AttentionBlock b = seed_block();
  PruneMask mask;
  mask.add_qk(0, b.n_c_qk);
  CHECK_THROWS_AS(masked_copy(b, mask), ValidationError);
}

TEST_CASE("backward: zero upstream gives zero gradients") {
  const AttentionBlock b = seed_block();
  const Matrix x = seed_input();
  const AttentionGradients g = attention_backward(b, x, Matrix(x.rows(), b.d));
  for (const Matrix* m : {&g.w_q, &g.w_k, &g.w_v, &g.w_o, &g.x}) {
    for (double v : m->data()) CHECK(v == 0.0);
  }
}

TEST_CASE("backward is linear in the upstream seed") {
  const AttentionBlock b = seed_block();
  const Matrix x = seed_input();
  Rng rng(9);
  const Matrix u = random_normal_matrix(rng, x.rows(), b.d, 1.0);
  const AttentionGradients g1 = attention_backward(b, x, u);
  const AttentionGradients g2 = attention_backward(b, x, scale(u, 2.0));
  CHECK(g2.w_q == scale(g1.w_q, 2.0));
  CHECK(g2.w_k == scale(g1.w_k, 2.0));
  CHECK(g2.w_v == scale(g1.w_v, 2.0));
  CHECK(g2.w_o == scale(g1.w_o, 2.0));
  CHECK(g2.x == scale(g1.x, 2.0));
}

TEST_CASE("backward matches central finite differences on all four matrices") {
  AttentionBlock b = seed_block();
  Matrix x = seed_input();
  Rng rng(9);
  const Matrix u = random_normal_matrix(rng, x.rows(), b.d, 1.0);

  auto loss = [&]() {
    const Matrix out = attention_forward(b, x);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += u.data()[i] * out.data()[i];
    return acc;
  };

  const AttentionGradients g = attention_backward(b, x, u);
  auto check_matrix = [&](Matrix& weights, const Matrix& grad) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const double numeric = oracle::central_diff(&weights.data()[i], loss);
      CHECK(oracle::rel_err(grad.data()[i], numeric) <= 1e-6);
    }
  };
  check_matrix(b.w_q, g.w_q);
  check_matrix(b.w_k, g.w_k);
  check_matrix(b.w_v, g.w_v);
  check_matrix(b.w_o, g.w_o);
  check_matrix(x, g.x);
}

TEST_CASE("forward is permutation-equivariant over token positions") {
  const AttentionBlock b = seed_block();
  const Matrix x = seed_input(7, 6, 8);
  std::vector<int> perm(x.rows());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(21);
  rng.shuffle(perm);

  Matrix permuted(x.rows(), x.cols());
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) permuted.at(i, j) = x.at(perm[i], j);

  // summation order inside softmax rows and A*V follows token order, so the
  // match is to rounding, not bit-exact
  const Matrix out = attention_forward(b, x);
  const Matrix out_perm = attention_forward(b, permuted);
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < b.d; ++j)
      CHECK(out_perm.at(i, j) == doctest::Approx(out.at(perm[i], j)).epsilon(1e-12));
}

TEST_CASE("removing a QK channel shifts logits by exactly -scale * q_c k_c^T") {
  const AttentionBlock b = seed_block();
  const Matrix x = seed_input();
  const int head = 1, channel = 2;

  const Matrix before = attention_head_logits(b, x, head);
  PruneMask mask;
  mask.add_qk(head, channel);
  const Matrix after = attention_head_logits(masked_copy(b, mask), x, head);

  const int r = head * b.n_c_qk + channel;
  std::vector<double> q_c(x.rows()), k_c(x.rows());
  for (int i = 0; i < x.rows(); ++i) {
    double q = 0.0, k = 0.0;
    for (int j = 0; j < b.d; ++j) {
      q += x.at(i, j) * b.w_q.at(r, j);
      k += x.at(i, j) * b.w_k.at(r, j);
    }
    q_c[i] = q;
    k_c[i] = k;
  }
  for (int i = 0; i < x.rows(); ++i) {
    for (int j = 0; j < x.rows(); ++j) {
      const double delta = after.at(i, j) - before.at(i, j);
      CHECK(delta == doctest::Approx(-b.scale * q_c[i] * k_c[j]).epsilon(1e-10));
    }
  }
}

TEST_CASE("block shape invariants are enforced") {
  AttentionBlock b = seed_block();
  b.w_k = Matrix(b.qk_rows() - 1, b.d);
  CHECK_THROWS_AS(b.validate(), ShapeError);

  AttentionBlock b2 = seed_block();
  b2.w_o = Matrix(b2.d, b2.vo_rows() + 1);
  CHECK_THROWS_AS(b2.validate(), ShapeError);
}
