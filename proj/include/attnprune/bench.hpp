#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnprune/model.hpp"
#include "attnprune/trainer.hpp"

namespace attnprune {

struct BatchSpec {
  int batch_size = 64;
  int n_tokens = 16;
  std::uint64_t seed = 99;
};

struct TimingStats {
  double min_s = 0.0;
  double median_s = 0.0;
  double mean_s = 0.0;
  double stddev_s = 0.0;
  int reps = 0;
};

// Wall-clock time of a full-batch forward pass, measured_reps times after
// warmup_reps unmeasured passes. The input batch is generated once from the
// seed. threads > 1 splits the batch across threads (throughput curiosity
// only; benchmarks default to single-threaded to keep variance down).
TimingStats bench_forward(const ToyModel& model, const BatchSpec& batch, int warmup_reps,
                          int measured_reps, int threads = 1);

// Analytic per-sample forward FLOPs. Matmuls count 2*m*n*k, softmax rows
// count 5 ops per entry (max, subtract, exp, sum, divide), the logit scale
// one per entry, residual adds and mean-pool one per entry. Deterministic,
// so usable as a speed proxy where wall-clock is too noisy.
std::uint64_t attention_flops(const AttentionBlock& block, int n_tokens);
std::uint64_t model_flops(const ToyModel& model, int n_tokens);

struct SweepConfig {
  Pattern pattern = Pattern::EntireHead;
  Threshold threshold = Threshold::Global;
  Metric metric = Metric::L2;  // magnitude only: the sweep has no data
  BatchSpec batch;
  int warmup_reps = 3;
  int measured_reps = 9;
  int threads = 1;
};

struct SweepRow {
  double level = 0.0;     // requested sparsity
  double achieved = 0.0;  // after whole-unit rounding
  TimingStats timing;
  std::uint64_t flops = 0;  // per sample
};

// Prunes fresh copies of the model to each level (no fine-tuning; timing
// does not depend on weight values) and benchmarks each copy. Levels must
// ascend within [0, 0.7).
std::vector<SweepRow> bench_sweep(const ToyModel& model, const SweepConfig& config,
                                  const std::vector<double>& levels);

std::string sweep_tsv(const std::vector<SweepRow>& rows);

}  // namespace attnprune
