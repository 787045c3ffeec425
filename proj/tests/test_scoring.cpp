#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "attnprune/errors.hpp"
#include "attnprune/pruner.hpp"
#include "attnprune/scoring.hpp"
#include "oracles/oracles.hpp"
#include "oracles/test_support.hpp"

using namespace attnprune;

namespace {

ToyModel tiny_model(std::uint64_t seed = 42) {
  ToyModelConfig cfg;
  cfg.d_in = 6;
  cfg.d = 8;
  cfg.n_h = 2;
  cfg.n_c = 4;
  cfg.n_layers = 2;
  cfg.n_classes = 3;
  cfg.seed = seed;
  return make_toy_model(cfg);
}

Sample tiny_sample(const ToyModel& model, std::uint64_t seed, int n_tokens = 5) {
  Rng rng(seed);
  Sample s;
  s.tokens = random_normal_matrix(rng, n_tokens, model.d_in, 1.0);
  s.label = static_cast<int>(seed % model.n_classes);
  return s;
}

const Matrix& model_matrix(const ToyModel& m, int layer, MatrixKind kind) {
  switch (kind) {
    case MatrixKind::Wq: return m.blocks[layer].w_q;
    case MatrixKind::Wk: return m.blocks[layer].w_k;
    case MatrixKind::Wv: return m.blocks[layer].w_v;
    case MatrixKind::Wo: return m.blocks[layer].w_o;
  }
  throw std::runtime_error("bad kind");
}

}  // namespace

TEST_CASE("VO channel magnitude score is norm(w_v row) + norm(w_o column)") {
  ToyModel m = tiny_model();
  // layer 0, head 0, channel 0: w_v row [3,4,0,...], w_o column zero
  const int r = 0;
  for (int j = 0; j < m.d; ++j) {
    m.blocks[0].w_v.at(r, j) = 0.0;
    m.blocks[0].w_o.at(j, r) = 0.0;
  }
  m.blocks[0].w_v.at(r, 0) = 3.0;
  m.blocks[0].w_v.at(r, 1) = 4.0;
  const ScoreTable t = magnitude_score(m, Granularity::Channel, Side::VO, 2);
  CHECK(t.vo_scores[0][0] == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("an all-zero head scores zero and ranks first") {
  ToyModel m = tiny_model();
  const int head = 1;
  for (int c = 0; c < m.blocks[0].n_c_qk; ++c) {
    const int r = head * m.blocks[0].n_c_qk + c;
    for (int j = 0; j < m.d; ++j) {
      m.blocks[0].w_q.at(r, j) = 0.0;
      m.blocks[0].w_k.at(r, j) = 0.0;
    }
  }
  for (int c = 0; c < m.blocks[0].n_c_vo; ++c) {
    const int r = head * m.blocks[0].n_c_vo + c;
    for (int j = 0; j < m.d; ++j) {
      m.blocks[0].w_v.at(r, j) = 0.0;
      m.blocks[0].w_o.at(j, r) = 0.0;
    }
  }
  const ScoreTable t = magnitude_score(m, Granularity::Head, Side::Both, 2);
  CHECK(t.head_scores[0][head] == 0.0);
  double min_score = t.head_scores[0][0];
  for (const auto& layer : t.head_scores)
    for (double v : layer) min_score = std::min(min_score, v);
  CHECK(min_score == t.head_scores[0][head]);
}

TEST_CASE("magnitude scores match a flat per-element oracle") {
  const ToyModel m = tiny_model(42);
  for (int p : {1, 2}) {
    const ScoreTable t = magnitude_score(m, Granularity::Channel, Side::Both, p);
    for (int l = 0; l < m.n_layers(); ++l) {
      const AttentionBlock& b = m.blocks[l];
      for (int h = 0; h < b.n_h_qk; ++h) {
        for (int c = 0; c < b.n_c_qk; ++c) {
          const int r = h * b.n_c_qk + c;
          double nq = 0.0, nk = 0.0;
          for (int j = 0; j < b.d; ++j) {
            nq += p == 1 ? std::abs(b.w_q.at(r, j)) : b.w_q.at(r, j) * b.w_q.at(r, j);
            nk += p == 1 ? std::abs(b.w_k.at(r, j)) : b.w_k.at(r, j) * b.w_k.at(r, j);
          }
          const double expected = p == 1 ? nq + nk : std::sqrt(nq) + std::sqrt(nk);
          CHECK(std::abs(t.qk_scores[l][r] - expected) <= 1e-12);
        }
      }
      for (int h = 0; h < b.n_h_vo; ++h) {
        for (int c = 0; c < b.n_c_vo; ++c) {
          const int r = h * b.n_c_vo + c;
          double nv = 0.0, no = 0.0;
          for (int j = 0; j < b.d; ++j) {
            nv += p == 1 ? std::abs(b.w_v.at(r, j)) : b.w_v.at(r, j) * b.w_v.at(r, j);
            no += p == 1 ? std::abs(b.w_o.at(j, r)) : b.w_o.at(j, r) * b.w_o.at(j, r);
          }
          const double expected = p == 1 ? nv + no : std::sqrt(nv) + std::sqrt(no);
          CHECK(std::abs(t.vo_scores[l][r] - expected) <= 1e-12);
        }
      }
    }
    // head score is the sum of the head's channel scores over both sides
    const ScoreTable heads = magnitude_score(m, Granularity::Head, Side::Both, p);
    for (int l = 0; l < m.n_layers(); ++l) {
      const AttentionBlock& b = m.blocks[l];
      for (int h = 0; h < b.n_h_qk; ++h) {
        double expected = 0.0;
        for (int c = 0; c < b.n_c_qk; ++c) expected += t.qk_scores[l][h * b.n_c_qk + c];
        for (int c = 0; c < b.n_c_vo; ++c) expected += t.vo_scores[l][h * b.n_c_vo + c];
        CHECK(heads.head_scores[l][h] == doctest::Approx(expected).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("invalid norm order is rejected") {
  CHECK_THROWS_AS(magnitude_score(tiny_model(), Granularity::Head, Side::Both, 3),
                  ValidationError);
}

TEST_CASE("scaling one layer's weights scales its L2 scores by the same factor") {
  const ToyModel m = tiny_model();
  ToyModel scaled = m;
  const double s = 2.0;  // power of two keeps the identity exact in fp
  for (Matrix* w : {&scaled.blocks[0].w_q, &scaled.blocks[0].w_k, &scaled.blocks[0].w_v,
                    &scaled.blocks[0].w_o}) {
    for (double& v : w->data()) v *= s;
  }
  const ScoreTable base = magnitude_score(m, Granularity::Head, Side::Both, 2);
  const ScoreTable after = magnitude_score(scaled, Granularity::Head, Side::Both, 2);
  for (int h = 0; h < m.blocks[0].n_h_qk; ++h) {
    CHECK(after.head_scores[0][h] == s * base.head_scores[0][h]);
  }
  for (int h = 0; h < m.blocks[1].n_h_qk; ++h) {
    CHECK(after.head_scores[1][h] == base.head_scores[1][h]);
  }
}

TEST_CASE("fisher estimate is the mean of squared per-sample gradients") {
  const ToyModel m = tiny_model();
  const Sample s1 = tiny_sample(m, 100);
  const Sample s2 = tiny_sample(m, 200);

  ModelGradients g1, g2;
  model_loss(m, s1.tokens, s1.label, &g1);
  model_loss(m, s2.tokens, s2.label, &g2);

  FisherAccumulator acc(m);
  acc.accumulate(m, s1);
  acc.accumulate(m, s2);
  CHECK(acc.sample_count() == 2);

  const double a = g1.blocks[0].w_q.at(0, 0);
  const double b = g2.blocks[0].w_q.at(0, 0);
  CHECK(acc.fisher_value({0, MatrixKind::Wq, 0}) ==
        doctest::Approx((a * a + b * b) / 2.0).epsilon(1e-12));
}

TEST_CASE("a head contributing nothing to the output has zero VO fisher") {
  ToyModel m = tiny_model();
  const int head = 0;
  for (int c = 0; c < m.blocks[1].n_c_vo; ++c) {
    const int r = head * m.blocks[1].n_c_vo + c;
    for (int j = 0; j < m.d; ++j) {
      m.blocks[1].w_v.at(r, j) = 0.0;
      m.blocks[1].w_o.at(j, r) = 0.0;
    }
  }
  FisherAccumulator acc(m);
  for (std::uint64_t s = 0; s < 4; ++s) acc.accumulate(m, tiny_sample(m, 300 + s));
  const ScoreTable t = fisher_group_score(acc, Granularity::Channel, Side::VO);
  for (int c = 0; c < m.blocks[1].n_c_vo; ++c) {
    CHECK(t.vo_scores[1][head * m.blocks[1].n_c_vo + c] == 0.0);
  }
}

TEST_CASE("group fisher equals the sum over an explicit parameter index list") {
  const ToyModel m = tiny_model();
  FisherAccumulator acc(m);
  for (std::uint64_t s = 0; s < 6; ++s) acc.accumulate(m, tiny_sample(m, 400 + s));

  for (Granularity g : {Granularity::Head, Granularity::Channel}) {
    std::vector<ParamGroup> groups;
    const ScoreTable t = fisher_group_score(acc, g, Side::Both, &groups);
    for (const ParamGroup& grp : groups) {
      double expected = 0.0;
      for (const ParamRef& ref : expand_group(grp, acc.layers())) {
        expected += acc.fisher_value(ref);
      }
      const double got =
          g == Granularity::Head
              ? t.head_scores[grp.layer][grp.head]
              : (grp.side == Side::QK
                     ? t.qk_scores[grp.layer][grp.head * t.layers[grp.layer].n_c_qk + grp.channel]
                     : t.vo_scores[grp.layer][grp.head * t.layers[grp.layer].n_c_vo +
                                              grp.channel]);
      CHECK(got == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("fisher and magnitude group the same parameter index sets") {
  const ToyModel m = tiny_model();
  FisherAccumulator acc(m);
  acc.accumulate(m, tiny_sample(m, 1));

  for (Granularity g : {Granularity::Head, Granularity::Channel}) {
    std::vector<ParamGroup> mag_groups, fisher_groups;
    magnitude_score(m, g, Side::Both, 2, &mag_groups);
    fisher_group_score(acc, g, Side::Both, &fisher_groups);
    REQUIRE(mag_groups.size() == fisher_groups.size());
    for (std::size_t i = 0; i < mag_groups.size(); ++i) {
      auto a = expand_group(mag_groups[i], factorizations_of(m));
      auto b = expand_group(fisher_groups[i], acc.layers());
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      CHECK(a == b);
    }
    // groups within one table never overlap and cover each matrix row/col once
    std::set<std::tuple<int, int, std::size_t>> seen;
    for (const auto& grp : mag_groups) {
      for (const ParamRef& ref : expand_group(grp, factorizations_of(m))) {
        const bool inserted =
            seen.insert({ref.layer, static_cast<int>(ref.matrix), ref.flat_index}).second;
        CHECK(inserted);
      }
    }
    CHECK(seen.size() == m.attention_param_count());
  }
}

TEST_CASE("fisher is invariant to sample order within rounding") {
  const ToyModel m = tiny_model();
  std::vector<Sample> samples;
  for (std::uint64_t s = 0; s < 5; ++s) samples.push_back(tiny_sample(m, 500 + s));

  FisherAccumulator forward_order(m), reverse_order(m);
  for (const Sample& s : samples) forward_order.accumulate(m, s);
  for (auto it = samples.rbegin(); it != samples.rend(); ++it) reverse_order.accumulate(m, *it);

  const ScoreTable a = fisher_group_score(forward_order, Granularity::Channel, Side::Both);
  const ScoreTable b = fisher_group_score(reverse_order, Granularity::Channel, Side::Both);
  for (int l = 0; l < a.n_layers(); ++l) {
    for (std::size_t i = 0; i < a.qk_scores[l].size(); ++i) {
      CHECK(a.qk_scores[l][i] == doctest::Approx(b.qk_scores[l][i]).epsilon(1e-12));
    }
    for (std::size_t i = 0; i < a.vo_scores[l].size(); ++i) {
      CHECK(a.vo_scores[l][i] == doctest::Approx(b.vo_scores[l][i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("merge sums accumulators and counts") {
  const ToyModel m = tiny_model();
  FisherAccumulator all(m), part1(m), part2(m);
  std::vector<Sample> samples;
  for (std::uint64_t s = 0; s < 4; ++s) samples.push_back(tiny_sample(m, 600 + s));
  for (const Sample& s : samples) all.accumulate(m, s);
  part1.accumulate(m, samples[0]);
  part1.accumulate(m, samples[1]);
  part2.accumulate(m, samples[2]);
  part2.accumulate(m, samples[3]);
  part1.merge(part2);
  CHECK(part1.sample_count() == 4);
  const ScoreTable a = fisher_group_score(all, Granularity::Head, Side::Both);
  const ScoreTable b = fisher_group_score(part1, Granularity::Head, Side::Both);
  for (int l = 0; l < a.n_layers(); ++l) {
    for (std::size_t h = 0; h < a.head_scores[l].size(); ++h) {
      CHECK(a.head_scores[l][h] == doctest::Approx(b.head_scores[l][h]).epsilon(1e-12));
    }
  }
}

TEST_CASE("pruning the model stales the accumulator") {
  ToyModel m = tiny_model();
  FisherAccumulator acc(m);
  acc.accumulate(m, tiny_sample(m, 1));

  Rng rng(3);
  PrunePlan plan = testsupport::random_plan(rng, m, Pattern::EntireHead);
  while (plan.empty()) plan = testsupport::random_plan(rng, m, Pattern::EntireHead);
  m = apply_plan(m, plan);
  CHECK_THROWS_WITH_AS(acc.accumulate(m, tiny_sample(m, 2)), doctest::Contains("stale"),
                       ValidationError);
}

TEST_CASE("empty accumulator is rejected") {
  const ToyModel m = tiny_model();
  FisherAccumulator acc(m);
  CHECK_THROWS_AS(fisher_group_score(acc, Granularity::Head, Side::Both), ValidationError);
}

TEST_CASE("fisher group scores match a finite-difference squared-gradient oracle") {
  ToyModel m = tiny_model(7);
  std::vector<Sample> samples;
  for (std::uint64_t s = 0; s < 8; ++s) samples.push_back(tiny_sample(m, 700 + s));

  FisherAccumulator acc(m);
  for (const Sample& s : samples) acc.accumulate(m, s);
  const ScoreTable t = fisher_group_score(acc, Granularity::Channel, Side::Both);

  // independent estimate: numeric gradient of the loss per sample, squared,
  // averaged, summed over the group's explicit parameter list
  auto numeric_group_score = [&](const ParamGroup& grp) {
    double total = 0.0;
    for (const ParamRef& ref : expand_group(grp, factorizations_of(m))) {
      Matrix& w = const_cast<Matrix&>(model_matrix(m, ref.layer, ref.matrix));
      double sum_sq = 0.0;
      for (const Sample& s : samples) {
        const double g = oracle::central_diff(
            &w.data()[ref.flat_index], [&]() { return model_loss(m, s.tokens, s.label); });
        sum_sq += g * g;
      }
      total += sum_sq / samples.size();
    }
    return total;
  };

  const auto groups = enumerate_groups(factorizations_of(m), Granularity::Channel, Side::Both);
  // spot-check a deterministic subset; the full sweep runs in acceptance
  for (std::size_t i = 0; i < groups.size(); i += 7) {
    const ParamGroup& grp = groups[i];
    const double expected = numeric_group_score(grp);
    const double got =
        grp.side == Side::QK
            ? t.qk_scores[grp.layer][grp.head * t.layers[grp.layer].n_c_qk + grp.channel]
            : t.vo_scores[grp.layer][grp.head * t.layers[grp.layer].n_c_vo + grp.channel];
    CHECK(std::abs(got - expected) <= 1e-5 * std::max({1e-12, std::abs(got), std::abs(expected)}));
  }
}

TEST_CASE("score table TSV round-trips") {
  const ToyModel m = tiny_model();
  for (Granularity g : {Granularity::Head, Granularity::Channel}) {
    const ScoreTable t = magnitude_score(m, g, Side::Both, 2);
    std::istringstream in(t.to_tsv());
    const ScoreTable back = ScoreTable::from_tsv(in);
    CHECK(back.metric == t.metric);
    CHECK(back.granularity == t.granularity);
    CHECK(back.layers == t.layers);
    CHECK(back.head_scores == t.head_scores);
    CHECK(back.qk_scores == t.qk_scores);
    CHECK(back.vo_scores == t.vo_scores);
  }
}

TEST_CASE("score table validation catches factorization drift") {
  const ToyModel m = tiny_model();
  ScoreTable t = magnitude_score(m, Granularity::Head, Side::Both, 2);
  t.head_scores[0].pop_back();
  CHECK_THROWS_AS(t.validate(), ValidationError);
}
