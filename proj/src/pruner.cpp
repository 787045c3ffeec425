#include "attnprune/pruner.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "attnprune/errors.hpp"

namespace attnprune {

namespace {

// per-head removal counts; -1 marks an out-of-range index
std::vector<int> per_head_counts(const std::vector<std::pair<int, int>>& removals, int n_h,
                                 int n_c, bool& in_range) {
  std::vector<int> counts(n_h, 0);
  in_range = true;
  for (const auto& [h, c] : removals) {
    if (h < 0 || h >= n_h || c < 0 || c >= n_c) {
      in_range = false;
      continue;
    }
    counts[h] += 1;
  }
  return counts;
}

}  // namespace

std::vector<Violation> validate_plan(const ToyModel& model, const PrunePlan& plan) {
  std::vector<Violation> out;
  if (plan.n_layers() != model.n_layers()) {
    out.push_back({-1, "plan has " + std::to_string(plan.n_layers()) + " layers, model has " +
                           std::to_string(model.n_layers())});
    return out;
  }
  for (int l = 0; l < model.n_layers(); ++l) {
    const AttentionBlock& b = model.blocks[l];
    const PruneMask& m = plan.layers[l];

    bool qk_ok = true, vo_ok = true;
    const auto qk_counts = per_head_counts(m.qk(), b.n_h_qk, b.n_c_qk, qk_ok);
    const auto vo_counts = per_head_counts(m.vo(), b.n_h_vo, b.n_c_vo, vo_ok);
    if (!qk_ok) out.push_back({l, "QK removal index out of range"});
    if (!vo_ok) out.push_back({l, "VO removal index out of range"});
    if (!qk_ok || !vo_ok) continue;

    if (m.qk().size() == static_cast<std::size_t>(b.n_h_qk) * b.n_c_qk) {
      out.push_back({l, "plan empties the QK side of the layer"});
    }
    if (m.vo().size() == static_cast<std::size_t>(b.n_h_vo) * b.n_c_vo) {
      out.push_back({l, "plan empties the VO side of the layer"});
    }

    switch (plan.pattern) {
      case Pattern::EntireHead: {
        std::set<int> qk_full, vo_full;
        bool partial = false;
        for (int h = 0; h < b.n_h_qk; ++h) {
          if (qk_counts[h] == b.n_c_qk) qk_full.insert(h);
          else if (qk_counts[h] != 0) partial = true;
        }
        for (int h = 0; h < b.n_h_vo; ++h) {
          if (vo_counts[h] == b.n_c_vo) vo_full.insert(h);
          else if (vo_counts[h] != 0) partial = true;
        }
        if (partial) {
          out.push_back({l, "entire-head plan removes a partial head"});
        }
        if (qk_full != vo_full) {
          out.push_back({l, "entire-head plan removes different heads on the QK and VO sides"});
        }
        break;
      }
      case Pattern::SameChannel: {
        auto same_channels = [&](const std::vector<std::pair<int, int>>& removals, int n_h,
                                 const char* side) {
          std::map<int, int> channel_count;
          for (const auto& [h, c] : removals) {
            (void)h;
            channel_count[c] += 1;
          }
          for (const auto& [c, count] : channel_count) {
            if (count != n_h) {
              out.push_back({l, std::string("same-channel plan removes channel ") +
                                    std::to_string(c) + " from " + std::to_string(count) + " of " +
                                    std::to_string(n_h) + " heads on the " + side + " side"});
            }
          }
        };
        same_channels(m.qk(), b.n_h_qk, "QK");
        same_channels(m.vo(), b.n_h_vo, "VO");
        break;
      }
      case Pattern::PerHead: {
        auto equal_counts = [&](const std::vector<int>& counts, const char* side) {
          for (int h = 1; h < static_cast<int>(counts.size()); ++h) {
            if (counts[h] != counts[0]) {
              out.push_back({l, std::string("per-head plan has unequal per-head counts on the ") +
                                    side + " side (" + std::to_string(counts[0]) + " in head 0, " +
                                    std::to_string(counts[h]) + " in head " + std::to_string(h) +
                                    ")"});
              break;
            }
          }
        };
        equal_counts(qk_counts, "QK");
        equal_counts(vo_counts, "VO");
        break;
      }
    }
  }
  return out;
}

AttentionBlock apply_mask(const AttentionBlock& block, const PruneMask& mask) {
  block.validate();
  AttentionBlock out;
  out.d = block.d;
  out.scale = block.scale;

  // surviving (head, channel) slots in original order
  std::vector<int> qk_keep, vo_keep;
  std::vector<int> qk_heads_kept(block.n_h_qk, 0), vo_heads_kept(block.n_h_vo, 0);
  for (int h = 0; h < block.n_h_qk; ++h) {
    for (int c = 0; c < block.n_c_qk; ++c) {
      if (!mask.contains_qk(h, c)) {
        qk_keep.push_back(h * block.n_c_qk + c);
        qk_heads_kept[h] += 1;
      }
    }
  }
  for (int h = 0; h < block.n_h_vo; ++h) {
    for (int c = 0; c < block.n_c_vo; ++c) {
      if (!mask.contains_vo(h, c)) {
        vo_keep.push_back(h * block.n_c_vo + c);
        vo_heads_kept[h] += 1;
      }
    }
  }

  // factorization of the survivors: heads with zero channels disappear,
  // the rest must share one channel count (the validator guarantees it)
  auto surviving = [](const std::vector<int>& kept_per_head, const char* side) {
    int heads = 0, channels = -1;
    for (int k : kept_per_head) {
      if (k == 0) continue;
      ++heads;
      if (channels == -1) channels = k;
      else if (channels != k) {
        throw ValidationError(std::string("apply_mask: surviving ") + side +
                              " channels differ across heads; validate the plan first");
      }
    }
    if (heads == 0) {
      throw ValidationError(std::string("apply_mask: mask empties the ") + side + " side");
    }
    return std::make_pair(heads, channels);
  };
  const auto [n_h_qk, n_c_qk] = surviving(qk_heads_kept, "QK");
  const auto [n_h_vo, n_c_vo] = surviving(vo_heads_kept, "VO");
  out.n_h_qk = n_h_qk;
  out.n_c_qk = n_c_qk;
  out.n_h_vo = n_h_vo;
  out.n_c_vo = n_c_vo;

  auto keep_rows = [](const Matrix& m, const std::vector<int>& keep) {
    Matrix out(static_cast<int>(keep.size()), m.cols());
    for (int i = 0; i < static_cast<int>(keep.size()); ++i)
      for (int j = 0; j < m.cols(); ++j) out.at(i, j) = m.at(keep[i], j);
    return out;
  };
  auto keep_cols = [](const Matrix& m, const std::vector<int>& keep) {
    Matrix out(m.rows(), static_cast<int>(keep.size()));
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < static_cast<int>(keep.size()); ++j) out.at(i, j) = m.at(i, keep[j]);
    return out;
  };
  out.w_q = keep_rows(block.w_q, qk_keep);
  out.w_k = keep_rows(block.w_k, qk_keep);
  out.w_v = keep_rows(block.w_v, vo_keep);
  out.w_o = keep_cols(block.w_o, vo_keep);
  out.validate();
  return out;
}

ToyModel apply_plan(const ToyModel& model, const PrunePlan& plan) {
  const auto violations = validate_plan(model, plan);
  if (!violations.empty()) {
    std::ostringstream msg;
    msg << "apply_plan: plan failed validation with " << violations.size() << " violation(s):";
    for (std::size_t i = 0; i < violations.size() && i < 5; ++i) {
      msg << "\n  layer " << violations[i].layer << ": " << violations[i].message;
    }
    throw ValidationError(msg.str());
  }
  ToyModel out = model;
  for (int l = 0; l < model.n_layers(); ++l) {
    out.blocks[l] = apply_mask(model.blocks[l], plan.layers[l]);
  }
  out.validate();
  return out;
}

SparsityReport sparsity_report(const ToyModel& original, const ToyModel& pruned) {
  if (original.n_layers() != pruned.n_layers()) {
    throw ShapeError("sparsity_report: layer counts differ, " +
                     std::to_string(original.n_layers()) + " vs " +
                     std::to_string(pruned.n_layers()));
  }
  SparsityReport r;
  for (int l = 0; l < original.n_layers(); ++l) {
    LayerSparsity s;
    s.original_params = original.blocks[l].param_count();
    s.current_params = pruned.blocks[l].param_count();
    s.fraction_removed =
        1.0 - static_cast<double>(s.current_params) / static_cast<double>(s.original_params);
    r.original_total += s.original_params;
    r.current_total += s.current_params;
    r.layers.push_back(s);
  }
  r.total_fraction =
      1.0 - static_cast<double>(r.current_total) / static_cast<double>(r.original_total);
  return r;
}

std::string SparsityReport::to_tsv() const {
  std::ostringstream out;
  out << "layer\toriginal_params\tcurrent_params\tfraction_removed\n";
  out.precision(17);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    out << l << '\t' << layers[l].original_params << '\t' << layers[l].current_params << '\t'
        << layers[l].fraction_removed << '\n';
  }
  out << "total\t" << original_total << '\t' << current_total << '\t' << total_fraction << '\n';
  return out.str();
}

std::string SparsityReport::to_plot_data() const {
  std::ostringstream out;
  out << "layer\tsparsity\n";
  out.precision(17);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    out << l << '\t' << layers[l].fraction_removed << '\n';
  }
  return out.str();
}

}  // namespace attnprune
