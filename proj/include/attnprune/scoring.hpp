#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "attnprune/model.hpp"

namespace attnprune {

enum class Metric { Fisher, L1, L2 };
enum class Granularity { Head, Channel };
enum class Side { QK, VO, Both };

std::string to_string(Metric m);
std::string to_string(Granularity g);
std::string to_string(Side s);
Metric metric_from_string(const std::string& s);
Granularity granularity_from_string(const std::string& s);
Side side_from_string(const std::string& s);

// Shape snapshot of one layer; lets score tables and plans be validated and
// costed without the model at hand.
struct LayerFactorization {
  int n_h_qk = 0;
  int n_c_qk = 0;
  int n_h_vo = 0;
  int n_c_vo = 0;
  int d = 0;

  bool operator==(const LayerFactorization&) const = default;
};

LayerFactorization factorization_of(const AttentionBlock& block);
std::vector<LayerFactorization> factorizations_of(const ToyModel& model);

enum class MatrixKind { Wq = 0, Wk = 1, Wv = 2, Wo = 3 };

// One row (or, for w_o, one column) of a projection matrix.
struct ParamSegment {
  MatrixKind matrix;
  int index;      // row index; column index when matrix == Wo
  bool is_column; // true only for Wo
};

// A prunable group: a channel on one side, or a whole head over both sides.
// The segment list is the single source of truth for which parameters a
// group owns; magnitude and Fisher scoring share it, which is what makes the
// two metrics rank the same structures.
struct ParamGroup {
  int layer = 0;
  int head = 0;
  int channel = -1;  // -1 at head granularity
  Side side = Side::Both;
  std::vector<ParamSegment> segments;
};

std::vector<ParamGroup> enumerate_groups(const std::vector<LayerFactorization>& layers,
                                         Granularity granularity, Side side);

// Flat parameter coordinates of a group, for instrumentation and oracles.
struct ParamRef {
  int layer;
  MatrixKind matrix;
  std::size_t flat_index;
  bool operator==(const ParamRef&) const = default;
  bool operator<(const ParamRef& o) const;
};
std::vector<ParamRef> expand_group(const ParamGroup& g,
                                   const std::vector<LayerFactorization>& layers);

// Importance scores per layer at head or (head, channel) granularity.
struct ScoreTable {
  Metric metric = Metric::L2;
  Granularity granularity = Granularity::Head;
  Side side = Side::Both;
  std::vector<LayerFactorization> layers;
  // head granularity: head_scores[layer][h]
  std::vector<std::vector<double>> head_scores;
  // channel granularity: xx_scores[layer][h * n_c + c]
  std::vector<std::vector<double>> qk_scores;
  std::vector<std::vector<double>> vo_scores;

  int n_layers() const { return static_cast<int>(layers.size()); }
  void validate() const;  // finite, nonnegative, lengths match factorization

  std::string to_tsv() const;
  static ScoreTable from_tsv(std::istream& in);
};

// Magnitude scoring: channel score on the QK side is norm_p(w_q row) +
// norm_p(w_k row); on the VO side norm_p(w_v row) + norm_p(w_o column).
// Head score sums the head's channel scores over both sides. No per-layer
// normalization is applied; raw magnitudes compare across layers as-is.
ScoreTable magnitude_score(const ToyModel& model, Granularity granularity, Side side, int p,
                           std::vector<ParamGroup>* captured_groups = nullptr);

// Running per-parameter sums of squared single-sample gradients over the
// four attention matrices of every layer. Estimates E[(dL/dtheta)^2].
class FisherAccumulator {
 public:
  explicit FisherAccumulator(const ToyModel& model);

  // Adds the squared gradient of the sample's loss. Throws ValidationError
  // if the model's shapes drifted since construction (stale accumulator).
  void accumulate(const ToyModel& model, const Sample& sample);

  // Associative merge of accumulators built over disjoint samples.
  void merge(const FisherAccumulator& other);

  long sample_count() const { return count_; }
  const std::vector<LayerFactorization>& layers() const { return layers_; }
  const Matrix& sum_sq(int layer, MatrixKind kind) const {
    return sums_[layer][static_cast<int>(kind)];
  }
  double fisher_value(const ParamRef& ref) const;

 private:
  void check_shapes(const ToyModel& model) const;

  std::vector<LayerFactorization> layers_;
  std::vector<std::array<Matrix, 4>> sums_;
  long count_ = 0;
};

// Group Fisher score: sum over the group's parameters of
// (sum of squared gradients / sample_count). Grouping is identical to
// magnitude_score's. Throws on an empty accumulator.
ScoreTable fisher_group_score(const FisherAccumulator& acc, Granularity granularity, Side side,
                              std::vector<ParamGroup>* captured_groups = nullptr);

}  // namespace attnprune
