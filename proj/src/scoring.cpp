#include "attnprune/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <sstream>
#include <tuple>

#include "attnprune/errors.hpp"

namespace attnprune {

std::string to_string(Metric m) {
  switch (m) {
    case Metric::Fisher: return "fisher";
    case Metric::L1: return "l1";
    case Metric::L2: return "l2";
  }
  return "?";
}

std::string to_string(Granularity g) {
  return g == Granularity::Head ? "head" : "channel";
}

std::string to_string(Side s) {
  switch (s) {
    case Side::QK: return "qk";
    case Side::VO: return "vo";
    case Side::Both: return "both";
  }
  return "?";
}

Metric metric_from_string(const std::string& s) {
  if (s == "fisher") return Metric::Fisher;
  if (s == "l1") return Metric::L1;
  if (s == "l2") return Metric::L2;
  throw ValidationError("unknown metric '" + s + "' (expected fisher, l1 or l2)");
}

Granularity granularity_from_string(const std::string& s) {
  if (s == "head") return Granularity::Head;
  if (s == "channel") return Granularity::Channel;
  throw ValidationError("unknown granularity '" + s + "' (expected head or channel)");
}

Side side_from_string(const std::string& s) {
  if (s == "qk") return Side::QK;
  if (s == "vo") return Side::VO;
  if (s == "both") return Side::Both;
  throw ValidationError("unknown side '" + s + "'");
}

LayerFactorization factorization_of(const AttentionBlock& block) {
  return {block.n_h_qk, block.n_c_qk, block.n_h_vo, block.n_c_vo, block.d};
}

std::vector<LayerFactorization> factorizations_of(const ToyModel& model) {
  std::vector<LayerFactorization> out;
  out.reserve(model.blocks.size());
  for (const auto& b : model.blocks) out.push_back(factorization_of(b));
  return out;
}

bool ParamRef::operator<(const ParamRef& o) const {
  return std::tie(layer, matrix, flat_index) < std::tie(o.layer, o.matrix, o.flat_index);
}

namespace {

void append_qk_channel_segments(std::vector<ParamSegment>& segs, const LayerFactorization& f,
                                int h, int c) {
  const int r = h * f.n_c_qk + c;
  segs.push_back({MatrixKind::Wq, r, false});
  segs.push_back({MatrixKind::Wk, r, false});
}

void append_vo_channel_segments(std::vector<ParamSegment>& segs, const LayerFactorization& f,
                                int h, int c) {
  const int r = h * f.n_c_vo + c;
  segs.push_back({MatrixKind::Wv, r, false});
  segs.push_back({MatrixKind::Wo, r, true});
}

}  // namespace

std::vector<ParamGroup> enumerate_groups(const std::vector<LayerFactorization>& layers,
                                         Granularity granularity, Side side) {
  std::vector<ParamGroup> groups;
  for (int l = 0; l < static_cast<int>(layers.size()); ++l) {
    const LayerFactorization& f = layers[l];
    if (granularity == Granularity::Head) {
      if (f.n_h_qk != f.n_h_vo) {
        throw ValidationError("head groups need equal head counts on both sides, layer " +
                              std::to_string(l) + " has " + std::to_string(f.n_h_qk) + " vs " +
                              std::to_string(f.n_h_vo));
      }
      for (int h = 0; h < f.n_h_qk; ++h) {
        ParamGroup g;
        g.layer = l;
        g.head = h;
        g.side = side;
        if (side == Side::QK || side == Side::Both) {
          for (int c = 0; c < f.n_c_qk; ++c) append_qk_channel_segments(g.segments, f, h, c);
        }
        if (side == Side::VO || side == Side::Both) {
          for (int c = 0; c < f.n_c_vo; ++c) append_vo_channel_segments(g.segments, f, h, c);
        }
        groups.push_back(std::move(g));
      }
    } else {
      if (side == Side::QK || side == Side::Both) {
        for (int h = 0; h < f.n_h_qk; ++h) {
          for (int c = 0; c < f.n_c_qk; ++c) {
            ParamGroup g;
            g.layer = l;
            g.head = h;
            g.channel = c;
            g.side = Side::QK;
            append_qk_channel_segments(g.segments, f, h, c);
            groups.push_back(std::move(g));
          }
        }
      }
      if (side == Side::VO || side == Side::Both) {
        for (int h = 0; h < f.n_h_vo; ++h) {
          for (int c = 0; c < f.n_c_vo; ++c) {
            ParamGroup g;
            g.layer = l;
            g.head = h;
            g.channel = c;
            g.side = Side::VO;
            append_vo_channel_segments(g.segments, f, h, c);
            groups.push_back(std::move(g));
          }
        }
      }
    }
  }
  return groups;
}

std::vector<ParamRef> expand_group(const ParamGroup& g,
                                   const std::vector<LayerFactorization>& layers) {
  const LayerFactorization& f = layers[g.layer];
  std::vector<ParamRef> refs;
  for (const ParamSegment& seg : g.segments) {
    if (seg.is_column) {
      // w_o is d x vo_rows; column seg.index, one entry per row
      const int cols = f.n_h_vo * f.n_c_vo;
      for (int r = 0; r < f.d; ++r) {
        refs.push_back({g.layer, seg.matrix, static_cast<std::size_t>(r) * cols + seg.index});
      }
    } else {
      for (int j = 0; j < f.d; ++j) {
        refs.push_back({g.layer, seg.matrix, static_cast<std::size_t>(seg.index) * f.d + j});
      }
    }
  }
  return refs;
}

void ScoreTable::validate() const {
  auto check = [&](const std::vector<std::vector<double>>& per_layer, const char* what,
                   auto expected_len) {
    if (per_layer.size() != layers.size()) {
      throw ValidationError(std::string("score table: ") + what + " has " +
                            std::to_string(per_layer.size()) + " layers, expected " +
                            std::to_string(layers.size()));
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::size_t want = expected_len(layers[l]);
      if (per_layer[l].size() != want) {
        throw ValidationError(std::string("score table: layer ") + std::to_string(l) + " " +
                              what + " has " + std::to_string(per_layer[l].size()) +
                              " entries, factorization expects " + std::to_string(want));
      }
      for (double v : per_layer[l]) {
        if (!std::isfinite(v) || v < 0.0) {
          throw ValidationError(std::string("score table: layer ") + std::to_string(l) + " " +
                                what + " contains a negative or non-finite score");
        }
      }
    }
  };
  if (granularity == Granularity::Head) {
    check(head_scores, "head scores",
          [](const LayerFactorization& f) { return static_cast<std::size_t>(f.n_h_qk); });
  } else {
    if (side == Side::QK || side == Side::Both) {
      check(qk_scores, "qk channel scores", [](const LayerFactorization& f) {
        return static_cast<std::size_t>(f.n_h_qk) * f.n_c_qk;
      });
    }
    if (side == Side::VO || side == Side::Both) {
      check(vo_scores, "vo channel scores", [](const LayerFactorization& f) {
        return static_cast<std::size_t>(f.n_h_vo) * f.n_c_vo;
      });
    }
  }
}

namespace {

const Matrix& matrix_of(const ToyModel& model, int layer, MatrixKind kind) {
  const AttentionBlock& b = model.blocks[layer];
  switch (kind) {
    case MatrixKind::Wq: return b.w_q;
    case MatrixKind::Wk: return b.w_k;
    case MatrixKind::Wv: return b.w_v;
    case MatrixKind::Wo: return b.w_o;
  }
  throw ValidationError("bad matrix kind");
}

double segment_norm(const Matrix& m, const ParamSegment& seg, int p) {
  double acc = 0.0;
  if (seg.is_column) {
    for (int r = 0; r < m.rows(); ++r) {
      const double v = m.at(r, seg.index);
      acc += (p == 1) ? std::abs(v) : v * v;
    }
  } else {
    for (int j = 0; j < m.cols(); ++j) {
      const double v = m.at(seg.index, j);
      acc += (p == 1) ? std::abs(v) : v * v;
    }
  }
  return (p == 1) ? acc : std::sqrt(acc);
}

ScoreTable table_skeleton(const std::vector<LayerFactorization>& layers, Metric metric,
                          Granularity granularity, Side side) {
  ScoreTable t;
  t.metric = metric;
  t.granularity = granularity;
  t.side = side;
  t.layers = layers;
  const std::size_t n = layers.size();
  if (granularity == Granularity::Head) {
    t.head_scores.resize(n);
    for (std::size_t l = 0; l < n; ++l) t.head_scores[l].assign(layers[l].n_h_qk, 0.0);
  } else {
    if (side == Side::QK || side == Side::Both) {
      t.qk_scores.resize(n);
      for (std::size_t l = 0; l < n; ++l)
        t.qk_scores[l].assign(static_cast<std::size_t>(layers[l].n_h_qk) * layers[l].n_c_qk, 0.0);
    }
    if (side == Side::VO || side == Side::Both) {
      t.vo_scores.resize(n);
      for (std::size_t l = 0; l < n; ++l)
        t.vo_scores[l].assign(static_cast<std::size_t>(layers[l].n_h_vo) * layers[l].n_c_vo, 0.0);
    }
  }
  return t;
}

void place_score(ScoreTable& t, const ParamGroup& g, double score) {
  if (t.granularity == Granularity::Head) {
    t.head_scores[g.layer][g.head] = score;
  } else if (g.side == Side::QK) {
    t.qk_scores[g.layer][g.head * t.layers[g.layer].n_c_qk + g.channel] = score;
  } else {
    t.vo_scores[g.layer][g.head * t.layers[g.layer].n_c_vo + g.channel] = score;
  }
}

}  // namespace

ScoreTable magnitude_score(const ToyModel& model, Granularity granularity, Side side, int p,
                           std::vector<ParamGroup>* captured_groups) {
  if (p != 1 && p != 2) {
    throw ValidationError("magnitude_score: p must be 1 or 2, got " + std::to_string(p));
  }
  const auto layers = factorizations_of(model);
  const auto groups = enumerate_groups(layers, granularity, side);
  ScoreTable t = table_skeleton(layers, p == 1 ? Metric::L1 : Metric::L2, granularity, side);
  for (const ParamGroup& g : groups) {
    double score = 0.0;
    for (const ParamSegment& seg : g.segments) {
      score += segment_norm(matrix_of(model, g.layer, seg.matrix), seg, p);
    }
    place_score(t, g, score);
  }
  if (captured_groups) *captured_groups = groups;
  t.validate();
  return t;
}

FisherAccumulator::FisherAccumulator(const ToyModel& model) : layers_(factorizations_of(model)) {
  sums_.reserve(model.blocks.size());
  for (const auto& b : model.blocks) {
    sums_.push_back({Matrix(b.w_q.rows(), b.w_q.cols()), Matrix(b.w_k.rows(), b.w_k.cols()),
                     Matrix(b.w_v.rows(), b.w_v.cols()), Matrix(b.w_o.rows(), b.w_o.cols())});
  }
}

void FisherAccumulator::check_shapes(const ToyModel& model) const {
  if (factorizations_of(model) != layers_) {
    throw ValidationError(
        "stale accumulator: model factorization changed since the accumulator was created "
        "(model was pruned?); build a fresh FisherAccumulator");
  }
}

void FisherAccumulator::accumulate(const ToyModel& model, const Sample& sample) {
  check_shapes(model);
  ModelGradients grads;
  model_loss(model, sample.tokens, sample.label, &grads);
  for (std::size_t l = 0; l < sums_.size(); ++l) {
    const Matrix* gs[4] = {&grads.blocks[l].w_q, &grads.blocks[l].w_k, &grads.blocks[l].w_v,
                           &grads.blocks[l].w_o};
    for (int k = 0; k < 4; ++k) {
      auto& sum = sums_[l][k].data();
      const auto& g = gs[k]->data();
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += g[i] * g[i];
    }
  }
  ++count_;
}

void FisherAccumulator::merge(const FisherAccumulator& other) {
  if (other.layers_ != layers_) {
    throw ValidationError("merge: accumulators built over different factorizations");
  }
  for (std::size_t l = 0; l < sums_.size(); ++l) {
    for (int k = 0; k < 4; ++k) {
      auto& sum = sums_[l][k].data();
      const auto& o = other.sums_[l][k].data();
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += o[i];
    }
  }
  count_ += other.count_;
}

double FisherAccumulator::fisher_value(const ParamRef& ref) const {
  if (count_ < 1) throw ValidationError("fisher: empty accumulator");
  return sums_[ref.layer][static_cast<int>(ref.matrix)].data()[ref.flat_index] / count_;
}

ScoreTable fisher_group_score(const FisherAccumulator& acc, Granularity granularity, Side side,
                              std::vector<ParamGroup>* captured_groups) {
  if (acc.sample_count() < 1) {
    throw ValidationError("fisher_group_score: empty accumulator (no samples seen)");
  }
  const auto& layers = acc.layers();
  const auto groups = enumerate_groups(layers, granularity, side);
  ScoreTable t = table_skeleton(layers, Metric::Fisher, granularity, side);
  for (const ParamGroup& g : groups) {
    double score = 0.0;
    for (const ParamSegment& seg : g.segments) {
      const Matrix& sums = acc.sum_sq(g.layer, seg.matrix);
      if (seg.is_column) {
        for (int r = 0; r < sums.rows(); ++r) score += sums.at(r, seg.index);
      } else {
        for (int j = 0; j < sums.cols(); ++j) score += sums.at(seg.index, j);
      }
    }
    place_score(t, g, score / acc.sample_count());
  }
  if (captured_groups) *captured_groups = groups;
  t.validate();
  return t;
}

std::string ScoreTable::to_tsv() const {
  std::ostringstream out;
  out << "metric\tgranularity\tlayer\tside\thead\tchannel\tn_h\tn_c\td\tscore\n";
  out.setf(std::ios::scientific);
  out.precision(17);
  for (int l = 0; l < n_layers(); ++l) {
    const LayerFactorization& f = layers[l];
    auto row = [&](const char* sd, int h, int c, int n_h, int n_c, double score) {
      out << to_string(metric) << '\t' << to_string(granularity) << '\t' << l << '\t' << sd
          << '\t' << h << '\t' << c << '\t' << n_h << '\t' << n_c << '\t' << f.d << '\t' << score
          << '\n';
    };
    if (granularity == Granularity::Head) {
      for (int h = 0; h < f.n_h_qk; ++h) row("both", h, -1, f.n_h_qk, f.n_c_qk, head_scores[l][h]);
    } else {
      if (side == Side::QK || side == Side::Both) {
        for (int h = 0; h < f.n_h_qk; ++h)
          for (int c = 0; c < f.n_c_qk; ++c)
            row("qk", h, c, f.n_h_qk, f.n_c_qk, qk_scores[l][h * f.n_c_qk + c]);
      }
      if (side == Side::VO || side == Side::Both) {
        for (int h = 0; h < f.n_h_vo; ++h)
          for (int c = 0; c < f.n_c_vo; ++c)
            row("vo", h, c, f.n_h_vo, f.n_c_vo, vo_scores[l][h * f.n_c_vo + c]);
      }
    }
  }
  return out.str();
}

ScoreTable ScoreTable::from_tsv(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw IoError("score table: empty input");
  if (header != "metric\tgranularity\tlayer\tside\thead\tchannel\tn_h\tn_c\td\tscore") {
    throw IoError("score table: unrecognized header line");
  }
  struct Row {
    Metric metric;
    Granularity gran;
    int layer;
    std::string side;
    int head, channel, n_h, n_c, d;
    double score;
  };
  std::vector<Row> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Row r;
    std::string metric_s, gran_s;
    if (!(ls >> metric_s >> gran_s >> r.layer >> r.side >> r.head >> r.channel >> r.n_h >>
          r.n_c >> r.d >> r.score)) {
      throw IoError("score table: malformed row: " + line);
    }
    r.metric = metric_from_string(metric_s);
    r.gran = granularity_from_string(gran_s);
    rows.push_back(r);
  }
  if (rows.empty()) throw IoError("score table: no data rows");

  ScoreTable t;
  t.metric = rows[0].metric;
  t.granularity = rows[0].gran;
  int max_layer = 0;
  bool any_qk = false, any_vo = false;
  for (const Row& r : rows) {
    if (r.metric != t.metric || r.gran != t.granularity) {
      throw IoError("score table: mixed metrics or granularities in one file");
    }
    max_layer = std::max(max_layer, r.layer);
    any_qk |= r.side == "qk";
    any_vo |= r.side == "vo";
  }
  t.side = t.granularity == Granularity::Head ? Side::Both
           : (any_qk && any_vo)               ? Side::Both
           : any_qk                           ? Side::QK
                                              : Side::VO;
  t.layers.assign(max_layer + 1, LayerFactorization{});
  if (t.granularity == Granularity::Head) {
    t.head_scores.assign(max_layer + 1, {});
  } else {
    t.qk_scores.assign(max_layer + 1, {});
    t.vo_scores.assign(max_layer + 1, {});
  }
  for (const Row& r : rows) {
    LayerFactorization& f = t.layers[r.layer];
    f.d = r.d;
    if (t.granularity == Granularity::Head) {
      f.n_h_qk = f.n_h_vo = r.n_h;
      f.n_c_qk = f.n_c_vo = r.n_c;
      auto& v = t.head_scores[r.layer];
      if (static_cast<int>(v.size()) < r.n_h) v.resize(r.n_h, -1.0);
      v[r.head] = r.score;
    } else if (r.side == "qk") {
      f.n_h_qk = r.n_h;
      f.n_c_qk = r.n_c;
      auto& v = t.qk_scores[r.layer];
      if (v.size() < static_cast<std::size_t>(r.n_h) * r.n_c) v.resize(
          static_cast<std::size_t>(r.n_h) * r.n_c, -1.0);
      v[r.head * r.n_c + r.channel] = r.score;
    } else if (r.side == "vo") {
      f.n_h_vo = r.n_h;
      f.n_c_vo = r.n_c;
      auto& v = t.vo_scores[r.layer];
      if (v.size() < static_cast<std::size_t>(r.n_h) * r.n_c) v.resize(
          static_cast<std::size_t>(r.n_h) * r.n_c, -1.0);
      v[r.head * r.n_c + r.channel] = r.score;
    } else {
      throw IoError("score table: unexpected side '" + r.side + "' for channel granularity");
    }
  }
  // Head tables copy n_h into both sides; channel tables may legitimately
  // come from one side only. Fill the missing side from the present one so
  // the factorization is complete, then validate coverage.
  for (auto& f : t.layers) {
    if (f.n_h_qk == 0 && f.n_h_vo != 0) {
      f.n_h_qk = f.n_h_vo;
      f.n_c_qk = f.n_c_vo;
    }
    if (f.n_h_vo == 0 && f.n_h_qk != 0) {
      f.n_h_vo = f.n_h_qk;
      f.n_c_vo = f.n_c_qk;
    }
  }
  if (t.granularity == Granularity::Channel) {
    if (!any_qk) t.qk_scores.clear();
    if (!any_vo) t.vo_scores.clear();
  }
  t.validate();
  return t;
}

}  // namespace attnprune
