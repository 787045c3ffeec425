#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "attnprune/scoring.hpp"

namespace attnprune {

enum class Pattern { EntireHead, SameChannel, PerHead };
enum class Threshold { Global, Local };

std::string to_string(Pattern p);
std::string to_string(Threshold t);
Pattern pattern_from_string(const std::string& s);
Threshold threshold_from_string(const std::string& s);

// The exact set of structural removals, one mask per layer.
//
// Pattern invariants:
//   entire-head  - a removed head loses all of its channels on both sides,
//                  and only whole heads are removed
//   same-channel - within a layer, the removed channel indices are the same
//                  in every head (QK and VO independently)
//   per-head     - within a layer and side, every head loses the same count
//                  of channels (indices may differ per head)
// No plan ever removes every channel of a layer's side.
struct PrunePlan {
  Pattern pattern = Pattern::EntireHead;
  std::vector<PruneMask> layers;
  double declared_sparsity = 0.0;
  double achieved_sparsity = 0.0;  // removed / original attention params
  std::size_t removed_params = 0;
  double removed_score = 0.0;  // total score of removed groups
  // entire-head only: head_remap[layer][old_head] = new index or -1
  std::vector<std::vector<int>> head_remap;
  std::vector<std::string> warnings;

  int n_layers() const { return static_cast<int>(layers.size()); }
  bool empty() const;

  std::string to_tsv() const;
  static PrunePlan from_tsv(std::istream& in);
};

// Head-granularity scores in, whole-head removals out. Global consolidates
// every (layer, head) into one ascending ranking and removes the cheapest
// heads that fit the parameter budget; local removes round(target * n_h)
// cheapest heads in every layer, so each layer is pruned by the same
// amount. Ties break on (layer, head). Throws if the target would strip a
// layer of all its heads.
PrunePlan plan_entire_head(const ScoreTable& scores, double target_sparsity, Threshold threshold);

// Per-channel scores summed across heads, per side.
struct SameChannelScores {
  Metric metric = Metric::L2;
  std::vector<LayerFactorization> layers;
  std::vector<std::vector<double>> qk;  // [layer][c]
  std::vector<std::vector<double>> vo;  // [layer][c]
};

SameChannelScores collapse_over_heads(const ScoreTable& channel_scores);

// Candidates are (layer, side, channel) triples, each removing that channel
// from every head of the side; QK and VO compete in one pooled ranking.
PrunePlan plan_same_channel(const SameChannelScores& scores, double target_sparsity,
                            Threshold threshold);

// Budget allocation over (layer, side) pools: taking the m-th unit of a pool
// removes the m-th cheapest channel in every head of that layer-side, so a
// pool's marginal costs are non-decreasing and greedy allocation is optimal.
PrunePlan plan_per_head_greedy(const ScoreTable& channel_scores, double target_sparsity,
                               Threshold threshold);

// --- allocation core (exposed for the planner's oracle tests) ---

struct AllocationPool {
  std::vector<double> marginal_costs;  // must be non-decreasing
  int max_units = 0;
  std::size_t unit_params = 1;
};

struct Allocation {
  std::vector<int> units;  // per pool
  double total_cost = 0.0;
  std::size_t total_params = 0;
};

// Repeatedly takes the cheapest next unit that still fits the parameter
// budget, most-affordable pools first on ties (by pool index).
Allocation greedy_allocate(const std::vector<AllocationPool>& pools, double param_budget);

// Exhaustive enumeration of per-pool unit counts summing exactly to
// budget_units; minimum total cost wins. Requires uniform unit_params and at
// most 24 total candidate units.
Allocation brute_force_allocation(const std::vector<AllocationPool>& pools, int budget_units);

}  // namespace attnprune
