#include "attnprune/planner.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <sstream>
#include <tuple>

#include "attnprune/errors.hpp"

namespace attnprune {

namespace {

constexpr double kBudgetEps = 1e-9;

std::size_t layer_params(const LayerFactorization& f) {
  return 2 * static_cast<std::size_t>(f.n_h_qk) * f.n_c_qk * f.d +
         2 * static_cast<std::size_t>(f.n_h_vo) * f.n_c_vo * f.d;
}

std::size_t total_params(const std::vector<LayerFactorization>& layers) {
  std::size_t n = 0;
  for (const auto& f : layers) n += layer_params(f);
  return n;
}

std::size_t head_cost(const LayerFactorization& f) {
  return 2 * static_cast<std::size_t>(f.n_c_qk) * f.d +
         2 * static_cast<std::size_t>(f.n_c_vo) * f.d;
}

void check_target(double target) {
  if (!(target >= 0.0 && target < 1.0)) {
    throw ValidationError("target sparsity must be in [0, 1), got " + std::to_string(target));
  }
}

void finish_plan(PrunePlan& plan, std::size_t total) {
  plan.achieved_sparsity = total == 0 ? 0.0 : static_cast<double>(plan.removed_params) / total;
  if (std::abs(plan.achieved_sparsity - plan.declared_sparsity) > 1e-12) {
    std::ostringstream w;
    w.precision(4);
    w << std::fixed << "achieved sparsity " << 100.0 * plan.achieved_sparsity
      << "% differs from requested " << 100.0 * plan.declared_sparsity
      << "% (whole-unit rounding)";
    plan.warnings.push_back(w.str());
  }
}

}  // namespace

std::string to_string(Pattern p) {
  switch (p) {
    case Pattern::EntireHead: return "entire-head";
    case Pattern::SameChannel: return "same-channel";
    case Pattern::PerHead: return "per-head";
  }
  return "?";
}

std::string to_string(Threshold t) { return t == Threshold::Global ? "global" : "local"; }

Pattern pattern_from_string(const std::string& s) {
  if (s == "entire-head") return Pattern::EntireHead;
  if (s == "same-channel") return Pattern::SameChannel;
  if (s == "per-head") return Pattern::PerHead;
  throw ValidationError("unknown pattern '" + s +
                        "' (expected entire-head, same-channel or per-head)");
}

Threshold threshold_from_string(const std::string& s) {
  if (s == "global") return Threshold::Global;
  if (s == "local") return Threshold::Local;
  throw ValidationError("unknown threshold '" + s + "' (expected global or local)");
}

bool PrunePlan::empty() const {
  for (const auto& m : layers)
    if (!m.empty()) return false;
  return true;
}

PrunePlan plan_entire_head(const ScoreTable& scores, double target_sparsity,
                           Threshold threshold) {
  check_target(target_sparsity);
  scores.validate();
  if (scores.granularity != Granularity::Head) {
    throw ValidationError("plan_entire_head needs head-granularity scores, got " +
                          to_string(scores.granularity));
  }
  const auto& layers = scores.layers;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].n_h_qk != layers[l].n_h_vo) {
      throw ValidationError("plan_entire_head: layer " + std::to_string(l) +
                            " has unequal head counts on the two sides");
    }
  }
  const std::size_t total = total_params(layers);

  PrunePlan plan;
  plan.pattern = Pattern::EntireHead;
  plan.declared_sparsity = target_sparsity;
  plan.layers.assign(layers.size(), PruneMask{});

  struct Cand {
    double score;
    int layer;
    int head;
  };
  std::vector<std::vector<int>> removed_heads(layers.size());

  auto take = [&](const Cand& c) {
    const LayerFactorization& f = layers[c.layer];
    for (int ch = 0; ch < f.n_c_qk; ++ch) plan.layers[c.layer].add_qk(c.head, ch);
    for (int ch = 0; ch < f.n_c_vo; ++ch) plan.layers[c.layer].add_vo(c.head, ch);
    removed_heads[c.layer].push_back(c.head);
    plan.removed_params += head_cost(f);
    plan.removed_score += c.score;
  };

  if (threshold == Threshold::Global) {
    std::vector<Cand> cands;
    for (int l = 0; l < scores.n_layers(); ++l)
      for (int h = 0; h < layers[l].n_h_qk; ++h) cands.push_back({scores.head_scores[l][h], l, h});
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      return std::tie(a.score, a.layer, a.head) < std::tie(b.score, b.layer, b.head);
    });
    const double budget = target_sparsity * static_cast<double>(total);
    std::vector<Cand> skipped;
    for (const Cand& c : cands) {
      const double cost = static_cast<double>(head_cost(layers[c.layer]));
      if (static_cast<double>(plan.removed_params) + cost > budget + kBudgetEps) continue;
      if (static_cast<int>(removed_heads[c.layer].size()) + 1 >= layers[c.layer].n_h_qk) {
        skipped.push_back(c);  // would leave the layer headless
        continue;
      }
      take(c);
    }
    const double remaining = budget - static_cast<double>(plan.removed_params);
    for (const Cand& c : skipped) {
      if (static_cast<double>(head_cost(layers[c.layer])) <= remaining + kBudgetEps) {
        throw ValidationError("target sparsity " + std::to_string(target_sparsity) +
                              " would remove every head of layer " + std::to_string(c.layer));
      }
    }
  } else {
    for (int l = 0; l < scores.n_layers(); ++l) {
      const int n_h = layers[l].n_h_qk;
      const int k = static_cast<int>(std::lround(target_sparsity * n_h));
      if (k >= n_h) {
        throw ValidationError("target sparsity " + std::to_string(target_sparsity) +
                              " would remove every head of layer " + std::to_string(l));
      }
      std::vector<Cand> cands;
      for (int h = 0; h < n_h; ++h) cands.push_back({scores.head_scores[l][h], l, h});
      std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        return std::tie(a.score, a.head) < std::tie(b.score, b.head);
      });
      for (int i = 0; i < k; ++i) take(cands[i]);
    }
  }

  // dense renumbering of surviving heads
  plan.head_remap.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    std::sort(removed_heads[l].begin(), removed_heads[l].end());
    plan.head_remap[l].assign(layers[l].n_h_qk, -1);
    int next = 0;
    for (int h = 0; h < layers[l].n_h_qk; ++h) {
      if (!std::binary_search(removed_heads[l].begin(), removed_heads[l].end(), h)) {
        plan.head_remap[l][h] = next++;
      }
    }
  }
  finish_plan(plan, total);
  return plan;
}

SameChannelScores collapse_over_heads(const ScoreTable& channel_scores) {
  channel_scores.validate();
  if (channel_scores.granularity != Granularity::Channel) {
    throw ValidationError("collapse_over_heads needs channel-granularity scores");
  }
  SameChannelScores out;
  out.metric = channel_scores.metric;
  out.layers = channel_scores.layers;
  const std::size_t n = out.layers.size();
  out.qk.resize(n);
  out.vo.resize(n);
  for (std::size_t l = 0; l < n; ++l) {
    const LayerFactorization& f = out.layers[l];
    if (!channel_scores.qk_scores.empty()) {
      out.qk[l].assign(f.n_c_qk, 0.0);
      for (int h = 0; h < f.n_h_qk; ++h)
        for (int c = 0; c < f.n_c_qk; ++c)
          out.qk[l][c] += channel_scores.qk_scores[l][h * f.n_c_qk + c];
    }
    if (!channel_scores.vo_scores.empty()) {
      out.vo[l].assign(f.n_c_vo, 0.0);
      for (int h = 0; h < f.n_h_vo; ++h)
        for (int c = 0; c < f.n_c_vo; ++c)
          out.vo[l][c] += channel_scores.vo_scores[l][h * f.n_c_vo + c];
    }
  }
  return out;
}

PrunePlan plan_same_channel(const SameChannelScores& scores, double target_sparsity,
                            Threshold threshold) {
  check_target(target_sparsity);
  const auto& layers = scores.layers;
  if (scores.qk.size() != layers.size() || scores.vo.size() != layers.size()) {
    throw ValidationError("plan_same_channel: per-side channel sums missing");
  }
  const std::size_t total = total_params(layers);

  PrunePlan plan;
  plan.pattern = Pattern::SameChannel;
  plan.declared_sparsity = target_sparsity;
  plan.layers.assign(layers.size(), PruneMask{});

  // side: 0 = QK, 1 = VO (QK sorts first on ties)
  struct Cand {
    double score;
    int layer;
    int side;
    int channel;
  };
  auto cand_cost = [&](const Cand& c) -> std::size_t {
    const LayerFactorization& f = layers[c.layer];
    return c.side == 0 ? 2 * static_cast<std::size_t>(f.n_h_qk) * f.d
                       : 2 * static_cast<std::size_t>(f.n_h_vo) * f.d;
  };
  std::vector<std::vector<int>> removed_qk(layers.size()), removed_vo(layers.size());
  auto would_empty = [&](const Cand& c) {
    const LayerFactorization& f = layers[c.layer];
    return c.side == 0
               ? static_cast<int>(removed_qk[c.layer].size()) + 1 >= f.n_c_qk
               : static_cast<int>(removed_vo[c.layer].size()) + 1 >= f.n_c_vo;
  };
  auto take = [&](const Cand& c) {
    const LayerFactorization& f = layers[c.layer];
    if (c.side == 0) {
      for (int h = 0; h < f.n_h_qk; ++h) plan.layers[c.layer].add_qk(h, c.channel);
      removed_qk[c.layer].push_back(c.channel);
    } else {
      for (int h = 0; h < f.n_h_vo; ++h) plan.layers[c.layer].add_vo(h, c.channel);
      removed_vo[c.layer].push_back(c.channel);
    }
    plan.removed_params += cand_cost(c);
    plan.removed_score += c.score;
  };
  auto sorted_cands = [&](int only_layer) {
    std::vector<Cand> cands;
    for (int l = 0; l < static_cast<int>(layers.size()); ++l) {
      if (only_layer >= 0 && l != only_layer) continue;
      for (int c = 0; c < layers[l].n_c_qk; ++c) cands.push_back({scores.qk[l][c], l, 0, c});
      for (int c = 0; c < layers[l].n_c_vo; ++c) cands.push_back({scores.vo[l][c], l, 1, c});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      return std::tie(a.score, a.layer, a.side, a.channel) <
             std::tie(b.score, b.layer, b.side, b.channel);
    });
    return cands;
  };

  if (threshold == Threshold::Global) {
    const double budget = target_sparsity * static_cast<double>(total);
    std::vector<Cand> skipped;
    for (const Cand& c : sorted_cands(-1)) {
      const double cost = static_cast<double>(cand_cost(c));
      if (static_cast<double>(plan.removed_params) + cost > budget + kBudgetEps) continue;
      if (would_empty(c)) {
        skipped.push_back(c);
        continue;
      }
      take(c);
    }
    const double remaining = budget - static_cast<double>(plan.removed_params);
    for (const Cand& c : skipped) {
      if (static_cast<double>(cand_cost(c)) <= remaining + kBudgetEps) {
        throw ValidationError("target sparsity " + std::to_string(target_sparsity) +
                              " would remove every " + (c.side == 0 ? "QK" : "VO") +
                              " channel of layer " + std::to_string(c.layer));
      }
    }
  } else {
    for (int l = 0; l < static_cast<int>(layers.size()); ++l) {
      const int pool = layers[l].n_c_qk + layers[l].n_c_vo;
      const int k = static_cast<int>(std::lround(target_sparsity * pool));
      int taken = 0;
      for (const Cand& c : sorted_cands(l)) {
        if (taken == k) break;
        if (would_empty(c)) continue;
        take(c);
        ++taken;
      }
      if (taken < k) {
        throw ValidationError("target sparsity " + std::to_string(target_sparsity) +
                              " would remove every channel of a side in layer " +
                              std::to_string(l));
      }
    }
  }
  finish_plan(plan, total);
  return plan;
}

Allocation greedy_allocate(const std::vector<AllocationPool>& pools, double param_budget) {
  for (const auto& p : pools) {
    if (p.max_units > static_cast<int>(p.marginal_costs.size())) {
      throw ValidationError("allocation pool: max_units exceeds marginal cost list");
    }
    for (std::size_t m = 1; m < p.marginal_costs.size(); ++m) {
      if (p.marginal_costs[m] < p.marginal_costs[m - 1]) {
        throw ValidationError("allocation pool: marginal costs must be non-decreasing");
      }
    }
  }
  Allocation a;
  a.units.assign(pools.size(), 0);
  while (true) {
    int best = -1;
    double best_cost = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pools.size(); ++i) {
      if (a.units[i] >= pools[i].max_units) continue;
      if (static_cast<double>(a.total_params + pools[i].unit_params) >
          param_budget + kBudgetEps) {
        continue;
      }
      const double cost = pools[i].marginal_costs[a.units[i]];
      if (cost < best_cost) {
        best_cost = cost;
        best = static_cast<int>(i);
      }
    }
    if (best < 0) break;
    a.units[best] += 1;
    a.total_cost += best_cost;
    a.total_params += pools[best].unit_params;
  }
  return a;
}

Allocation brute_force_allocation(const std::vector<AllocationPool>& pools, int budget_units) {
  int total_units = 0;
  for (const auto& p : pools) {
    if (p.unit_params != pools[0].unit_params) {
      throw ValidationError("brute_force_allocation requires uniform unit_params");
    }
    total_units += p.max_units;
  }
  if (total_units > 24) {
    throw ValidationError("brute_force_allocation: instance too large (" +
                          std::to_string(total_units) + " units, guard is 24)");
  }
  if (budget_units < 0 || budget_units > total_units) {
    throw ValidationError("brute_force_allocation: infeasible budget " +
                          std::to_string(budget_units));
  }
  // prefix cost of taking u units from pool i
  std::vector<std::vector<double>> prefix(pools.size());
  std::vector<int> cap_suffix(pools.size() + 1, 0);
  for (std::size_t i = 0; i < pools.size(); ++i) {
    prefix[i].assign(pools[i].max_units + 1, 0.0);
    for (int u = 1; u <= pools[i].max_units; ++u) {
      prefix[i][u] = prefix[i][u - 1] + pools[i].marginal_costs[u - 1];
    }
  }
  for (int i = static_cast<int>(pools.size()) - 1; i >= 0; --i) {
    cap_suffix[i] = cap_suffix[i + 1] + pools[i].max_units;
  }

  Allocation best;
  best.total_cost = std::numeric_limits<double>::infinity();
  std::vector<int> current(pools.size(), 0);
  auto dfs = [&](auto&& self, std::size_t i, int left, double cost) -> void {
    if (i == pools.size()) {
      if (left == 0 && cost < best.total_cost) {
        best.total_cost = cost;
        best.units = current;
      }
      return;
    }
    const int lo = std::max(0, left - cap_suffix[i + 1]);
    const int hi = std::min(pools[i].max_units, left);
    for (int u = lo; u <= hi; ++u) {
      current[i] = u;
      self(self, i + 1, left - u, cost + prefix[i][u]);
    }
    current[i] = 0;
  };
  dfs(dfs, 0, budget_units, 0.0);
  best.total_params = static_cast<std::size_t>(budget_units) * pools[0].unit_params;
  if (budget_units == 0) best.total_cost = 0.0;
  return best;
}

PrunePlan plan_per_head_greedy(const ScoreTable& channel_scores, double target_sparsity,
                               Threshold threshold) {
  check_target(target_sparsity);
  channel_scores.validate();
  if (channel_scores.granularity != Granularity::Channel) {
    throw ValidationError("plan_per_head_greedy needs channel-granularity scores");
  }
  const auto& layers = channel_scores.layers;
  const std::size_t total = total_params(layers);

  // One pool per (layer, side), QK before VO. Channels of each head sorted
  // ascending by (score, channel); unit m removes every head's m-th entry.
  struct Pool {
    int layer;
    int side;  // 0 QK, 1 VO
    std::vector<std::vector<int>> sorted_channels;  // [head][rank] -> channel
    AllocationPool alloc;
  };
  std::vector<Pool> pools;
  for (int l = 0; l < static_cast<int>(layers.size()); ++l) {
    const LayerFactorization& f = layers[l];
    auto build = [&](int side, int n_h, int n_c, const std::vector<double>& scores_flat) {
      Pool p;
      p.layer = l;
      p.side = side;
      p.sorted_channels.resize(n_h);
      p.alloc.marginal_costs.assign(n_c, 0.0);
      for (int h = 0; h < n_h; ++h) {
        std::vector<std::pair<double, int>> order;
        order.reserve(n_c);
        for (int c = 0; c < n_c; ++c) order.emplace_back(scores_flat[h * n_c + c], c);
        std::sort(order.begin(), order.end());
        p.sorted_channels[h].reserve(n_c);
        for (int m = 0; m < n_c; ++m) {
          p.sorted_channels[h].push_back(order[m].second);
          p.alloc.marginal_costs[m] += order[m].first;
        }
      }
      p.alloc.max_units = n_c - 1;  // a side never loses its last channel
      p.alloc.unit_params = 2 * static_cast<std::size_t>(n_h) * f.d;
      pools.push_back(std::move(p));
    };
    if (!channel_scores.qk_scores.empty()) {
      build(0, f.n_h_qk, f.n_c_qk, channel_scores.qk_scores[l]);
    }
    if (!channel_scores.vo_scores.empty()) {
      build(1, f.n_h_vo, f.n_c_vo, channel_scores.vo_scores[l]);
    }
  }

  PrunePlan plan;
  plan.pattern = Pattern::PerHead;
  plan.declared_sparsity = target_sparsity;
  plan.layers.assign(layers.size(), PruneMask{});

  auto apply_allocation = [&](const std::vector<Pool*>& subset, const Allocation& a) {
    for (std::size_t i = 0; i < subset.size(); ++i) {
      const Pool& p = *subset[i];
      for (int h = 0; h < static_cast<int>(p.sorted_channels.size()); ++h) {
        for (int m = 0; m < a.units[i]; ++m) {
          if (p.side == 0) {
            plan.layers[p.layer].add_qk(h, p.sorted_channels[h][m]);
          } else {
            plan.layers[p.layer].add_vo(h, p.sorted_channels[h][m]);
          }
        }
      }
      for (int m = 0; m < a.units[i]; ++m) plan.removed_score += p.alloc.marginal_costs[m];
    }
    plan.removed_params += a.total_params;
  };
  auto check_exhaustion = [&](const std::vector<Pool*>& subset, const Allocation& a,
                              double budget) {
    const double remaining = budget - static_cast<double>(a.total_params);
    for (std::size_t i = 0; i < subset.size(); ++i) {
      if (a.units[i] >= subset[i]->alloc.max_units &&
          static_cast<double>(subset[i]->alloc.unit_params) <= remaining + kBudgetEps) {
        throw ValidationError("target sparsity " + std::to_string(target_sparsity) +
                              " exhausts the prunable channels of layer " +
                              std::to_string(subset[i]->layer) + " (" +
                              (subset[i]->side == 0 ? "QK" : "VO") + " side)");
      }
    }
  };

  if (threshold == Threshold::Global) {
    std::vector<Pool*> subset;
    std::vector<AllocationPool> alloc_pools;
    for (auto& p : pools) {
      subset.push_back(&p);
      alloc_pools.push_back(p.alloc);
    }
    const double budget = target_sparsity * static_cast<double>(total);
    const Allocation a = greedy_allocate(alloc_pools, budget);
    check_exhaustion(subset, a, budget);
    apply_allocation(subset, a);
  } else {
    for (int l = 0; l < static_cast<int>(layers.size()); ++l) {
      std::vector<Pool*> subset;
      std::vector<AllocationPool> alloc_pools;
      for (auto& p : pools) {
        if (p.layer == l) {
          subset.push_back(&p);
          alloc_pools.push_back(p.alloc);
        }
      }
      const double budget = target_sparsity * static_cast<double>(layer_params(layers[l]));
      const Allocation a = greedy_allocate(alloc_pools, budget);
      check_exhaustion(subset, a, budget);
      apply_allocation(subset, a);
    }
  }

  if (plan.removed_params == 0 && target_sparsity > 0.0) {
    plan.warnings.push_back("parameter budget is smaller than one structural unit; empty plan");
  }
  finish_plan(plan, total);
  return plan;
}

std::string PrunePlan::to_tsv() const {
  std::ostringstream out;
  out << "pattern\tdeclared_sparsity\tachieved_sparsity\tlayer\tside\thead\tchannel\n";
  out.precision(17);
  for (int l = 0; l < n_layers(); ++l) {
    const PruneMask& m = layers[l];
    if (m.empty()) {
      out << to_string(pattern) << '\t' << declared_sparsity << '\t' << achieved_sparsity << '\t'
          << l << "\tnone\t-1\t-1\n";
      continue;
    }
    for (const auto& [h, c] : m.qk()) {
      out << to_string(pattern) << '\t' << declared_sparsity << '\t' << achieved_sparsity << '\t'
          << l << "\tqk\t" << h << '\t' << c << '\n';
    }
    for (const auto& [h, c] : m.vo()) {
      out << to_string(pattern) << '\t' << declared_sparsity << '\t' << achieved_sparsity << '\t'
          << l << "\tvo\t" << h << '\t' << c << '\n';
    }
  }
  return out.str();
}

PrunePlan PrunePlan::from_tsv(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw IoError("plan: empty input");
  if (header != "pattern\tdeclared_sparsity\tachieved_sparsity\tlayer\tside\thead\tchannel") {
    throw IoError("plan: unrecognized header line");
  }
  PrunePlan plan;
  bool first = true;
  int max_layer = -1;
  std::string line;
  std::vector<std::tuple<int, std::string, int, int>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string pattern_s, side_s;
    double declared, achieved;
    int layer, head, channel;
    if (!(ls >> pattern_s >> declared >> achieved >> layer >> side_s >> head >> channel)) {
      throw IoError("plan: malformed row: " + line);
    }
    const Pattern p = pattern_from_string(pattern_s);
    if (first) {
      plan.pattern = p;
      plan.declared_sparsity = declared;
      plan.achieved_sparsity = achieved;
      first = false;
    } else if (p != plan.pattern) {
      throw IoError("plan: mixed patterns in one file");
    }
    max_layer = std::max(max_layer, layer);
    rows.emplace_back(layer, side_s, head, channel);
  }
  if (first) throw IoError("plan: no data rows");
  plan.layers.assign(max_layer + 1, PruneMask{});
  for (const auto& [layer, side_s, head, channel] : rows) {
    if (side_s == "none") continue;
    if (layer < 0 || head < 0 || channel < 0) {
      throw IoError("plan: negative index in removal row");
    }
    if (side_s == "qk") {
      plan.layers[layer].add_qk(head, channel);
    } else if (side_s == "vo") {
      plan.layers[layer].add_vo(head, channel);
    } else {
      throw IoError("plan: unknown side '" + side_s + "'");
    }
  }
  return plan;
}

}  // namespace attnprune
