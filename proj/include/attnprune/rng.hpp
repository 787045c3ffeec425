#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "attnprune/matrix.hpp"

namespace attnprune {

// Deterministic RNG. mt19937_64 has a standardized bit stream, and the
// value conversions below are fixed here rather than delegated to
// std::*_distribution (whose output is implementation-defined), so frozen
// fixtures reproduce across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 significant bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive range.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(engine_() % span);
  }

  // Standard normal via Box-Muller, spare value cached.
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Matrix random_normal_matrix(Rng& rng, int rows, int cols, double stddev);
Matrix random_uniform_matrix(Rng& rng, int rows, int cols, double lo, double hi);

}  // namespace attnprune
