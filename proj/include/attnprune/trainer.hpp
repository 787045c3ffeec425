#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnprune/model.hpp"
#include "attnprune/planner.hpp"

namespace attnprune {

struct TrainOptions {
  int epochs = 3;
  double lr = 1e-4;
  int batch_size = 32;
  std::uint64_t shuffle_seed = 17;
};

struct EpochStats {
  double mean_loss = 0.0;
  double accuracy = 0.0;  // running accuracy over the epoch's batches
};

// Mini-batch gradient descent on softmax cross-entropy, through the full
// attention backward pass. Deterministic given the shuffle seed. Aborts
// with NumericError (and the epoch/batch position) if the loss goes
// non-finite.
std::vector<EpochStats> train(ToyModel& model, const std::vector<Sample>& samples,
                              const TrainOptions& opts);

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

EvalResult evaluate(const ToyModel& model, const std::vector<Sample>& split);

// Scheduling for the iterative prune -> fine-tune loop. step_sparsity is in
// absolute percentage points of the ORIGINAL attention parameter count, so
// the defaults (6 steps of 10%) land at 60% total.
struct PruneConfig {
  Pattern pattern = Pattern::EntireHead;
  Metric metric = Metric::Fisher;
  Threshold threshold = Threshold::Global;
  double step_sparsity = 0.10;
  int steps = 6;
  int ft_epochs = 3;
  double learning_rate = 1e-4;
  int batch_size = 32;
  std::uint64_t shuffle_seed = 17;

  void validate() const;  // 0 < step_sparsity * steps < 1, counts positive
};

struct StepReport {
  int step = 0;  // 0 is the baseline row
  double target_sparsity = 0.0;    // cumulative target
  double achieved_sparsity = 0.0;  // cumulative, over the original params
  double pre_ft_train_acc = 0.0, pre_ft_train_loss = 0.0;
  double post_ft_train_acc = 0.0, post_ft_train_loss = 0.0;
  double pre_ft_test_acc = 0.0, pre_ft_test_loss = 0.0;
  double post_ft_test_acc = 0.0, post_ft_test_loss = 0.0;
  std::vector<double> layer_sparsity;  // cumulative per layer
  std::vector<std::string> warnings;
};

struct RunReport {
  PruneConfig config;
  std::uint64_t model_seed = 0;
  std::uint64_t dataset_seed = 0;
  std::vector<StepReport> steps;

  std::string steps_tsv() const;
  std::string layer_sparsity_tsv() const;
  std::string summary() const;  // free-form block; echoes all seeds
};

// Per step: score the current model (Fisher on the validation split, or
// weight magnitudes), plan the next slice of the budget, apply it, fine-tune
// on the train split, evaluate. A plan that fails validation aborts the run
// naming the step.
RunReport iterative_prune_finetune(ToyModel& model, const SynthDataset& dataset,
                                   const PruneConfig& config);

// Scores the model the way the loop would (shared by the `score` command).
ScoreTable score_model(const ToyModel& model, Metric metric, Granularity granularity,
                       const std::vector<Sample>& fisher_samples);

// Plans one step at `target` sparsity of the given model's current params.
PrunePlan plan_for_pattern(const ScoreTable& scores, Pattern pattern, double target,
                           Threshold threshold);

}  // namespace attnprune
