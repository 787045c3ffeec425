#include "test_support.hpp"

#include <algorithm>
#include <numeric>

namespace testsupport {

namespace {

std::vector<int> random_subset(Rng& rng, int universe, int count) {
  std::vector<int> all(universe);
  std::iota(all.begin(), all.end(), 0);
  rng.shuffle(all);
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

PrunePlan random_plan(Rng& rng, const ToyModel& model, Pattern pattern) {
  PrunePlan plan;
  plan.pattern = pattern;
  plan.layers.assign(model.n_layers(), PruneMask{});
  std::size_t removed = 0;
  for (int l = 0; l < model.n_layers(); ++l) {
    const AttentionBlock& b = model.blocks[l];
    PruneMask& m = plan.layers[l];
    switch (pattern) {
      case Pattern::EntireHead: {
        const int k = rng.uniform_int(0, b.n_h_qk - 1);
        for (int h : random_subset(rng, b.n_h_qk, k)) {
          for (int c = 0; c < b.n_c_qk; ++c) m.add_qk(h, c);
          for (int c = 0; c < b.n_c_vo; ++c) m.add_vo(h, c);
          removed += static_cast<std::size_t>(2 * b.n_c_qk + 2 * b.n_c_vo) * b.d;
        }
        break;
      }
      case Pattern::SameChannel: {
        const int kq = rng.uniform_int(0, b.n_c_qk - 1);
        for (int c : random_subset(rng, b.n_c_qk, kq)) {
          for (int h = 0; h < b.n_h_qk; ++h) m.add_qk(h, c);
        }
        const int kv = rng.uniform_int(0, b.n_c_vo - 1);
        for (int c : random_subset(rng, b.n_c_vo, kv)) {
          for (int h = 0; h < b.n_h_vo; ++h) m.add_vo(h, c);
        }
        removed += static_cast<std::size_t>(2 * kq * b.n_h_qk + 2 * kv * b.n_h_vo) * b.d;
        break;
      }
      case Pattern::PerHead: {
        const int kq = rng.uniform_int(0, b.n_c_qk - 1);
        for (int h = 0; h < b.n_h_qk; ++h) {
          for (int c : random_subset(rng, b.n_c_qk, kq)) m.add_qk(h, c);
        }
        const int kv = rng.uniform_int(0, b.n_c_vo - 1);
        for (int h = 0; h < b.n_h_vo; ++h) {
          for (int c : random_subset(rng, b.n_c_vo, kv)) m.add_vo(h, c);
        }
        removed += static_cast<std::size_t>(2 * kq * b.n_h_qk + 2 * kv * b.n_h_vo) * b.d;
        break;
      }
    }
  }
  plan.removed_params = removed;
  const std::size_t total = model.attention_param_count();
  plan.achieved_sparsity = total == 0 ? 0.0 : static_cast<double>(removed) / total;
  plan.declared_sparsity = plan.achieved_sparsity;
  return plan;
}

ToyModel masked_model(const ToyModel& model, const PrunePlan& plan) {
  ToyModel out = model;
  for (int l = 0; l < model.n_layers(); ++l) {
    out.blocks[l] = masked_copy(model.blocks[l], plan.layers[l]);
  }
  return out;
}

}  // namespace testsupport
