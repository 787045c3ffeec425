#include "attnprune/rng.hpp"

#include <cmath>

namespace attnprune {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

Matrix random_normal_matrix(Rng& rng, int rows, int cols, double stddev) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal() * stddev;
  return m;
}

Matrix random_uniform_matrix(Rng& rng, int rows, int cols, double lo, double hi) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.uniform(lo, hi);
  return m;
}

}  // namespace attnprune
