#include "attnprune/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "attnprune/errors.hpp"
#include "attnprune/pruner.hpp"
#include "attnprune/rng.hpp"

namespace attnprune {

namespace {

void axpy_into(Matrix& dst, const Matrix& g, double a) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += a * g.data()[i];
}

void apply_update(ToyModel& model, const ModelGradients& grads, double step) {
  axpy_into(model.input_proj, grads.input_proj, step);
  for (int l = 0; l < model.n_layers(); ++l) {
    axpy_into(model.blocks[l].w_q, grads.blocks[l].w_q, step);
    axpy_into(model.blocks[l].w_k, grads.blocks[l].w_k, step);
    axpy_into(model.blocks[l].w_v, grads.blocks[l].w_v, step);
    axpy_into(model.blocks[l].w_o, grads.blocks[l].w_o, step);
  }
  axpy_into(model.classifier, grads.classifier, step);
}

void add_grads(ModelGradients& acc, const ModelGradients& g) {
  if (acc.blocks.empty()) {
    acc = g;
    return;
  }
  axpy_into(acc.input_proj, g.input_proj, 1.0);
  for (std::size_t l = 0; l < acc.blocks.size(); ++l) {
    axpy_into(acc.blocks[l].w_q, g.blocks[l].w_q, 1.0);
    axpy_into(acc.blocks[l].w_k, g.blocks[l].w_k, 1.0);
    axpy_into(acc.blocks[l].w_v, g.blocks[l].w_v, 1.0);
    axpy_into(acc.blocks[l].w_o, g.blocks[l].w_o, 1.0);
  }
  axpy_into(acc.classifier, g.classifier, 1.0);
}

}  // namespace

std::vector<EpochStats> train(ToyModel& model, const std::vector<Sample>& samples,
                              const TrainOptions& opts) {
  if (opts.epochs < 1) throw ValidationError("train: epochs must be >= 1");
  if (opts.batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
  if (samples.empty()) throw ValidationError("train: empty training split");

  std::vector<EpochStats> history;
  Rng rng(opts.shuffle_seed);
  std::vector<int> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    long correct = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      ModelGradients batch_grads;
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = samples[order[i]];
        ModelGradients g;
        double loss;
        try {
          loss = model_loss(model, s.tokens, s.label, &g);
        } catch (const NumericError& e) {
          throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                             ", batch starting at sample " + std::to_string(start) + ": " +
                             e.what());
        }
        loss_sum += loss;
        if (model_predict(model, s.tokens) == s.label) ++correct;
        add_grads(batch_grads, g);
      }
      const double step = -opts.lr / static_cast<double>(end - start);
      apply_update(model, batch_grads, step);
    }
    EpochStats st;
    st.mean_loss = loss_sum / static_cast<double>(samples.size());
    st.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    history.push_back(st);
  }
  return history;
}

EvalResult evaluate(const ToyModel& model, const std::vector<Sample>& split) {
  if (split.empty()) throw ValidationError("evaluate: empty split");
  EvalResult r;
  long correct = 0;
  double loss_sum = 0.0;
  for (const Sample& s : split) {
    loss_sum += model_loss(model, s.tokens, s.label);
    if (model_predict(model, s.tokens) == s.label) ++correct;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(split.size());
  r.mean_loss = loss_sum / static_cast<double>(split.size());
  return r;
}

void PruneConfig::validate() const {
  if (steps < 0) throw ValidationError("prune config: steps must be >= 0");
  if (steps > 0) {
    const double total = step_sparsity * steps;
    if (!(step_sparsity > 0.0 && total < 1.0)) {
      throw ValidationError("prune config: need 0 < step_sparsity * steps < 1, got " +
                            std::to_string(step_sparsity) + " * " + std::to_string(steps));
    }
  }
  if (ft_epochs < 0) throw ValidationError("prune config: ft_epochs must be >= 0");
  if (batch_size < 1) throw ValidationError("prune config: batch_size must be >= 1");
}

ScoreTable score_model(const ToyModel& model, Metric metric, Granularity granularity,
                       const std::vector<Sample>& fisher_samples) {
  if (metric == Metric::Fisher) {
    if (fisher_samples.empty()) {
      throw ValidationError("fisher scoring needs data samples");
    }
    FisherAccumulator acc(model);
    for (const Sample& s : fisher_samples) acc.accumulate(model, s);
    return fisher_group_score(acc, granularity, Side::Both);
  }
  return magnitude_score(model, granularity, Side::Both, metric == Metric::L1 ? 1 : 2);
}

PrunePlan plan_for_pattern(const ScoreTable& scores, Pattern pattern, double target,
                           Threshold threshold) {
  switch (pattern) {
    case Pattern::EntireHead:
      return plan_entire_head(scores, target, threshold);
    case Pattern::SameChannel:
      return plan_same_channel(collapse_over_heads(scores), target, threshold);
    case Pattern::PerHead:
      return plan_per_head_greedy(scores, target, threshold);
  }
  throw ValidationError("unknown pattern");
}

RunReport iterative_prune_finetune(ToyModel& model, const SynthDataset& dataset,
                                   const PruneConfig& config) {
  config.validate();
  const ToyModel original = model;
  const std::size_t original_attn = original.attention_param_count();

  RunReport report;
  report.config = config;
  report.model_seed = model.init_seed;
  report.dataset_seed = dataset.config.seed;

  const Granularity granularity =
      config.pattern == Pattern::EntireHead ? Granularity::Head : Granularity::Channel;

  auto make_step = [&](int step_index, double target) {
    StepReport sr;
    sr.step = step_index;
    sr.target_sparsity = target;
    const SparsityReport sp = sparsity_report(original, model);
    sr.achieved_sparsity = sp.total_fraction;
    for (const auto& ls : sp.layers) sr.layer_sparsity.push_back(ls.fraction_removed);
    return sr;
  };

  {
    StepReport sr = make_step(0, 0.0);
    const EvalResult train_eval = evaluate(model, dataset.train);
    const EvalResult test_eval = evaluate(model, dataset.test);
    sr.pre_ft_train_acc = sr.post_ft_train_acc = train_eval.accuracy;
    sr.pre_ft_train_loss = sr.post_ft_train_loss = train_eval.mean_loss;
    sr.pre_ft_test_acc = sr.post_ft_test_acc = test_eval.accuracy;
    sr.pre_ft_test_loss = sr.post_ft_test_loss = test_eval.mean_loss;
    report.steps.push_back(std::move(sr));
  }

  for (int i = 1; i <= config.steps; ++i) {
    const double cumulative_target = config.step_sparsity * i;
    try {
      const ScoreTable scores =
          score_model(model, config.metric, granularity, dataset.val);

      // The step budget is a slice of the ORIGINAL parameter count; express
      // it as a fraction of the current (already pruned) model for the
      // planner, which scores and plans on current structures only.
      const std::size_t current_attn = model.attention_param_count();
      const std::size_t removed_so_far = original_attn - current_attn;
      const double budget_params =
          cumulative_target * static_cast<double>(original_attn) -
          static_cast<double>(removed_so_far);
      const double step_target =
          std::max(0.0, budget_params / static_cast<double>(current_attn));

      PrunePlan plan = plan_for_pattern(scores, config.pattern, step_target, config.threshold);
      const auto violations = validate_plan(model, plan);
      if (!violations.empty()) {
        throw ValidationError("plan validation failed: " + violations.front().message);
      }
      model = apply_plan(model, plan);

      StepReport sr = make_step(i, cumulative_target);
      sr.warnings = plan.warnings;

      const EvalResult pre_train = evaluate(model, dataset.train);
      const EvalResult pre_test = evaluate(model, dataset.test);
      sr.pre_ft_train_acc = pre_train.accuracy;
      sr.pre_ft_train_loss = pre_train.mean_loss;
      sr.pre_ft_test_acc = pre_test.accuracy;
      sr.pre_ft_test_loss = pre_test.mean_loss;

      if (config.ft_epochs > 0) {
        TrainOptions ft;
        ft.epochs = config.ft_epochs;
        ft.lr = config.learning_rate;
        ft.batch_size = config.batch_size;
        ft.shuffle_seed = config.shuffle_seed + static_cast<std::uint64_t>(i);
        train(model, dataset.train, ft);
      }

      const EvalResult post_train = evaluate(model, dataset.train);
      const EvalResult post_test = evaluate(model, dataset.test);
      sr.post_ft_train_acc = post_train.accuracy;
      sr.post_ft_train_loss = post_train.mean_loss;
      sr.post_ft_test_acc = post_test.accuracy;
      sr.post_ft_test_loss = post_test.mean_loss;

      report.steps.push_back(std::move(sr));
    } catch (const ValidationError& e) {
      throw ValidationError("prune step " + std::to_string(i) + " aborted: " + e.what());
    }
  }
  return report;
}

std::string RunReport::steps_tsv() const {
  std::ostringstream out;
  out << "step\ttarget_sparsity\tachieved_sparsity\tpre_ft_train_acc\tpre_ft_train_loss"
      << "\tpost_ft_train_acc\tpost_ft_train_loss\tpre_ft_test_acc\tpre_ft_test_loss"
      << "\tpost_ft_test_acc\tpost_ft_test_loss\n";
  out.precision(17);
  for (const StepReport& s : steps) {
    out << s.step << '\t' << s.target_sparsity << '\t' << s.achieved_sparsity << '\t'
        << s.pre_ft_train_acc << '\t' << s.pre_ft_train_loss << '\t' << s.post_ft_train_acc
        << '\t' << s.post_ft_train_loss << '\t' << s.pre_ft_test_acc << '\t' << s.pre_ft_test_loss
        << '\t' << s.post_ft_test_acc << '\t' << s.post_ft_test_loss << '\n';
  }
  return out.str();
}

std::string RunReport::layer_sparsity_tsv() const {
  std::ostringstream out;
  out << "step\tlayer\tsparsity\n";
  out.precision(17);
  for (const StepReport& s : steps) {
    for (std::size_t l = 0; l < s.layer_sparsity.size(); ++l) {
      out << s.step << '\t' << l << '\t' << s.layer_sparsity[l] << '\n';
    }
  }
  return out.str();
}

std::string RunReport::summary() const {
  std::ostringstream out;
  out << "iterative prune/fine-tune run\n";
  out << "pattern=" << to_string(config.pattern) << " metric=" << to_string(config.metric)
      << " threshold=" << to_string(config.threshold) << "\n";
  out << "step_sparsity=" << config.step_sparsity << " steps=" << config.steps
      << " ft_epochs=" << config.ft_epochs << " lr=" << config.learning_rate
      << " batch_size=" << config.batch_size << "\n";
  out << "seeds: model=" << model_seed << " dataset=" << dataset_seed
      << " shuffle=" << config.shuffle_seed << "\n";
  if (!steps.empty()) {
    const StepReport& last = steps.back();
    out.precision(6);
    out << "final: sparsity=" << last.achieved_sparsity
        << " test_acc=" << last.post_ft_test_acc << " train_acc=" << last.post_ft_train_acc
        << "\n";
  }
  for (const StepReport& s : steps) {
    for (const std::string& w : s.warnings) {
      out << "note (step " << s.step << "): " << w << "\n";
    }
  }
  return out.str();
}

}  // namespace attnprune
