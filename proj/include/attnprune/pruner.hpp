#pragma once

#include <string>
#include <vector>

#include "attnprune/model.hpp"
#include "attnprune/planner.hpp"

namespace attnprune {

struct Violation {
  int layer = -1;
  std::string message;
};

// Checks a plan against a model: pattern invariants, index ranges,
// never-empties-a-side. Returns every violation found; an empty list means
// the plan is applicable.
std::vector<Violation> validate_plan(const ToyModel& model, const PrunePlan& plan);

// Physically removes the planned rows/columns, producing genuinely smaller
// matrices. QK removals delete the paired w_q/w_k rows; VO removals delete
// w_v rows and the matching w_o columns. Survivors keep their relative
// order; after entire-head pruning the remaining heads are renumbered
// densely. The softmax scale is left untouched, so the pruned block is
// exactly equivalent to the masked original. Throws ValidationError when
// validate_plan reports anything.
ToyModel apply_plan(const ToyModel& model, const PrunePlan& plan);

// Single-block version used by apply_plan.
AttentionBlock apply_mask(const AttentionBlock& block, const PruneMask& mask);

struct LayerSparsity {
  std::size_t original_params = 0;
  std::size_t current_params = 0;
  double fraction_removed = 0.0;
};

struct SparsityReport {
  std::vector<LayerSparsity> layers;  // ordered from input to output
  std::size_t original_total = 0;
  std::size_t current_total = 0;
  double total_fraction = 0.0;

  std::string to_tsv() const;
  // two columns (layer, sparsity) for external plotting
  std::string to_plot_data() const;
};

SparsityReport sparsity_report(const ToyModel& original, const ToyModel& pruned);

}  // namespace attnprune
