#include "attnprune/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <thread>

#include "attnprune/errors.hpp"
#include "attnprune/pruner.hpp"
#include "attnprune/rng.hpp"

namespace attnprune {

namespace {

volatile double g_sink;  // keeps the forward passes observable

double run_batch(const ToyModel& model, const std::vector<Matrix>& inputs, int threads) {
  const auto t0 = std::chrono::steady_clock::now();
  if (threads <= 1) {
    double acc = 0.0;
    for (const Matrix& x : inputs) acc += model_logits(model, x)[0];
    g_sink = acc;
  } else {
    std::vector<std::thread> workers;
    std::vector<double> accs(threads, 0.0);
    for (int t = 0; t < threads; ++t) {
      workers.emplace_back([&, t] {
        double acc = 0.0;
        for (std::size_t i = t; i < inputs.size(); i += threads) {
          acc += model_logits(model, inputs[i])[0];
        }
        accs[t] = acc;
      });
    }
    double acc = 0.0;
    for (int t = 0; t < threads; ++t) {
      workers[t].join();
      acc += accs[t];
    }
    g_sink = acc;
  }
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count();
}

}  // namespace

TimingStats bench_forward(const ToyModel& model, const BatchSpec& batch, int warmup_reps,
                          int measured_reps, int threads) {
  if (measured_reps < 1) throw ValidationError("bench_forward: measured_reps must be >= 1");
  if (batch.batch_size < 1) throw ValidationError("bench_forward: batch_size must be >= 1");

  Rng rng(batch.seed);
  std::vector<Matrix> inputs;
  inputs.reserve(batch.batch_size);
  for (int i = 0; i < batch.batch_size; ++i) {
    inputs.push_back(random_normal_matrix(rng, batch.n_tokens, model.d_in, 1.0));
  }

  for (int i = 0; i < warmup_reps; ++i) run_batch(model, inputs, threads);

  std::vector<double> times(measured_reps);
  for (int i = 0; i < measured_reps; ++i) times[i] = run_batch(model, inputs, threads);

  TimingStats st;
  st.reps = measured_reps;
  std::vector<double> sorted = times;
  std::sort(sorted.begin(), sorted.end());
  st.min_s = sorted.front();
  const int mid = measured_reps / 2;
  st.median_s = measured_reps % 2 == 1 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  double sum = 0.0;
  for (double t : times) sum += t;
  st.mean_s = sum / measured_reps;
  double var = 0.0;
  for (double t : times) var += (t - st.mean_s) * (t - st.mean_s);
  st.stddev_s = measured_reps > 1 ? std::sqrt(var / (measured_reps - 1)) : 0.0;
  return st;
}

std::uint64_t attention_flops(const AttentionBlock& block, int n_tokens) {
  const std::uint64_t n = n_tokens;
  const std::uint64_t d = block.d;
  const std::uint64_t qk_rows = block.qk_rows();
  const std::uint64_t vo_rows = block.vo_rows();
  const std::uint64_t heads = block.n_h_qk;

  std::uint64_t flops = 0;
  flops += 2 * n * d * qk_rows;  // Q projection
  flops += 2 * n * d * qk_rows;  // K projection
  flops += 2 * n * d * vo_rows;  // V projection
  // per head: logits (2*n^2*n_c_qk), scale (n^2), softmax (5*n^2), A*V
  flops += heads * (2 * n * n * static_cast<std::uint64_t>(block.n_c_qk) + n * n + 5 * n * n);
  flops += heads * (2 * n * n * static_cast<std::uint64_t>(block.n_c_vo));
  flops += 2 * n * d * vo_rows;  // output projection
  return flops;
}

std::uint64_t model_flops(const ToyModel& model, int n_tokens) {
  const std::uint64_t n = n_tokens;
  std::uint64_t flops = 2 * n * static_cast<std::uint64_t>(model.d_in) * model.d;
  for (const auto& block : model.blocks) {
    flops += attention_flops(block, n_tokens);
    flops += n * static_cast<std::uint64_t>(model.d);  // residual add
  }
  flops += n * static_cast<std::uint64_t>(model.d) + model.d;         // mean pool
  flops += 2 * static_cast<std::uint64_t>(model.d) * model.n_classes; // classifier
  return flops;
}

std::vector<SweepRow> bench_sweep(const ToyModel& model, const SweepConfig& config,
                                  const std::vector<double>& levels) {
  if (levels.empty()) throw ValidationError("bench_sweep: no sparsity levels given");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i] < 0.0 || levels[i] >= 0.7) {
      throw ValidationError("bench_sweep: levels must lie in [0, 0.7), got " +
                            std::to_string(levels[i]));
    }
    if (i > 0 && levels[i] < levels[i - 1]) {
      throw ValidationError("bench_sweep: levels must be ascending");
    }
  }
  if (config.metric == Metric::Fisher) {
    throw ValidationError("bench_sweep prunes without data; use a magnitude metric (l1/l2)");
  }

  std::vector<SweepRow> rows;
  for (double level : levels) {
    ToyModel pruned = model;
    if (level > 0.0) {
      const Granularity granularity =
          config.pattern == Pattern::EntireHead ? Granularity::Head : Granularity::Channel;
      const ScoreTable scores =
          magnitude_score(model, granularity, Side::Both, config.metric == Metric::L1 ? 1 : 2);
      const PrunePlan plan = plan_for_pattern(scores, config.pattern, level, config.threshold);
      pruned = apply_plan(model, plan);
    }
    SweepRow row;
    row.level = level;
    row.achieved = sparsity_report(model, pruned).total_fraction;
    row.timing = bench_forward(pruned, config.batch, config.warmup_reps, config.measured_reps,
                               config.threads);
    row.flops = model_flops(pruned, config.batch.n_tokens);
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_tsv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "sparsity\tachieved\tmedian_seconds\tmean_seconds\tmin_seconds\tstddev_seconds"
      << "\tflops_per_sample\n";
  out.precision(17);
  for (const SweepRow& r : rows) {
    out << r.level << '\t' << r.achieved << '\t' << r.timing.median_s << '\t' << r.timing.mean_s
        << '\t' << r.timing.min_s << '\t' << r.timing.stddev_s << '\t' << r.flops << '\n';
  }
  return out.str();
}

}  // namespace attnprune
