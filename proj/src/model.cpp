#include "attnprune/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "attnprune/errors.hpp"
#include "attnprune/rng.hpp"

namespace attnprune {

std::size_t ToyModel::attention_param_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.param_count();
  return n;
}

std::size_t ToyModel::param_count() const {
  return input_proj.size() + attention_param_count() + classifier.size();
}

void ToyModel::validate() const {
  if (input_proj.rows() != d_in || input_proj.cols() != d) {
    throw ShapeError("toy model: input projection is " + input_proj.shape_str() + ", expected " +
                     std::to_string(d_in) + "x" + std::to_string(d));
  }
  if (classifier.rows() != d || classifier.cols() != n_classes) {
    throw ShapeError("toy model: classifier is " + classifier.shape_str() + ", expected " +
                     std::to_string(d) + "x" + std::to_string(n_classes));
  }
  for (const auto& b : blocks) {
    b.validate();
    if (b.d != d) {
      throw ShapeError("toy model: block embed dim " + std::to_string(b.d) +
                       " != model d " + std::to_string(d));
    }
  }
}

ToyModel make_toy_model(const ToyModelConfig& cfg) {
  if (cfg.n_classes < 2) {
    throw ValidationError("toy model: need at least 2 classes, got " +
                          std::to_string(cfg.n_classes));
  }
  Rng rng(cfg.seed);
  ToyModel m;
  m.d_in = cfg.d_in;
  m.d = cfg.d;
  m.n_classes = cfg.n_classes;
  m.init_seed = cfg.seed;
  m.input_proj = random_normal_matrix(rng, cfg.d_in, cfg.d, cfg.init_std);
  m.blocks.reserve(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    m.blocks.push_back(make_attention_block(cfg.d, cfg.n_h, cfg.n_c, rng, cfg.init_std));
  }
  m.classifier = random_normal_matrix(rng, cfg.d, cfg.n_classes, cfg.init_std);
  m.validate();
  return m;
}

Matrix model_hidden(const ToyModel& model, const Matrix& tokens) {
  if (tokens.cols() != model.d_in) {
    throw ShapeError("model forward: tokens are " + tokens.shape_str() + ", expected n x " +
                     std::to_string(model.d_in));
  }
  Matrix y = matmul(tokens, model.input_proj);
  for (const auto& block : model.blocks) {
    y = add(y, attention_forward(block, y));
  }
  return y;
}

namespace {

std::vector<double> logits_from_hidden(const ToyModel& model, const Matrix& y) {
  const int n = y.rows();
  std::vector<double> pooled(model.d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < model.d; ++j) pooled[j] += y.at(i, j);
  for (double& v : pooled) v /= n;

  std::vector<double> z(model.n_classes, 0.0);
  for (int j = 0; j < model.d; ++j)
    for (int k = 0; k < model.n_classes; ++k) z[k] += pooled[j] * model.classifier.at(j, k);
  return z;
}

std::vector<double> stable_softmax(const std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    p[k] = std::exp(z[k] - mx);
    sum += p[k];
  }
  for (double& v : p) v /= sum;
  return p;
}

}  // namespace

std::vector<double> model_logits(const ToyModel& model, const Matrix& tokens) {
  return logits_from_hidden(model, model_hidden(model, tokens));
}

int model_predict(const ToyModel& model, const Matrix& tokens) {
  const auto z = model_logits(model, tokens);
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

double model_loss(const ToyModel& model, const Matrix& tokens, int label, ModelGradients* grads) {
  if (label < 0 || label >= model.n_classes) {
    throw ValidationError("model_loss: label " + std::to_string(label) + " out of range for " +
                          std::to_string(model.n_classes) + " classes");
  }
  const int n = tokens.rows();

  // Forward, keeping each layer's input for the backward sweep.
  std::vector<Matrix> layer_inputs;
  layer_inputs.reserve(model.blocks.size() + 1);
  layer_inputs.push_back(matmul(tokens, model.input_proj));
  for (const auto& block : model.blocks) {
    const Matrix& y = layer_inputs.back();
    layer_inputs.push_back(add(y, attention_forward(block, y)));
  }
  const Matrix& y_final = layer_inputs.back();

  const std::vector<double> z = logits_from_hidden(model, y_final);
  const std::vector<double> p = stable_softmax(z);
  const double loss = -std::log(std::max(p[label], 1e-300));
  if (!std::isfinite(loss)) {
    throw NumericError("model_loss: non-finite loss");
  }
  if (grads == nullptr) return loss;

  // d loss / d logits = p - onehot(label)
  std::vector<double> dz = p;
  dz[label] -= 1.0;

  std::vector<double> pooled(model.d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < model.d; ++j) pooled[j] += y_final.at(i, j);
  for (double& v : pooled) v /= n;

  grads->classifier = Matrix(model.d, model.n_classes);
  std::vector<double> d_pooled(model.d, 0.0);
  for (int j = 0; j < model.d; ++j) {
    for (int k = 0; k < model.n_classes; ++k) {
      grads->classifier.at(j, k) = pooled[j] * dz[k];
      d_pooled[j] += dz[k] * model.classifier.at(j, k);
    }
  }

  Matrix d_y(n, model.d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < model.d; ++j) d_y.at(i, j) = d_pooled[j] / n;

  grads->blocks.assign(model.blocks.size(), AttentionGradients{});
  for (int l = model.n_layers() - 1; l >= 0; --l) {
    AttentionGradients g = attention_backward(model.blocks[l], layer_inputs[l], d_y);
    d_y = add(d_y, g.x);  // residual: d(input) = d(output) + attention path
    grads->blocks[l] = std::move(g);
  }
  grads->input_proj = matmul(transpose(tokens), d_y);
  return loss;
}

SynthDataset generate_dataset(const DatasetConfig& cfg) {
  if (cfg.n_classes < 2) {
    throw ValidationError("generate_dataset: need at least 2 classes, got " +
                          std::to_string(cfg.n_classes));
  }
  if (cfg.n_train < 1 || cfg.n_val < 0 || cfg.n_test < 0) {
    throw ValidationError("generate_dataset: bad split sizes");
  }
  const ToyModel teacher = dataset_teacher(cfg);

  SynthDataset ds;
  ds.config = cfg;
  ds.class_histogram.assign(cfg.n_classes, 0);
  Rng rng(cfg.seed);
  auto gen_split = [&](int count, std::vector<Sample>& out) {
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
      Sample s;
      s.tokens = random_normal_matrix(rng, cfg.n_tokens, cfg.d_in, 1.0);
      s.label = model_predict(teacher, s.tokens);
      ds.class_histogram[s.label]++;
      out.push_back(std::move(s));
    }
  };
  gen_split(cfg.n_train, ds.train);
  gen_split(cfg.n_val, ds.val);
  gen_split(cfg.n_test, ds.test);
  return ds;
}

ToyModel dataset_teacher(const DatasetConfig& cfg) {
  ToyModelConfig tc;
  tc.d_in = cfg.d_in;
  tc.d = cfg.teacher_d;
  tc.n_h = cfg.teacher_n_h;
  tc.n_c = cfg.teacher_n_c;
  tc.n_layers = cfg.teacher_layers;
  tc.n_classes = cfg.n_classes;
  tc.seed = cfg.seed ^ 0x7e3a9c15d4b2f681ull;  // decorrelate teacher weights from sample stream
  return make_toy_model(tc);
}

}  // namespace attnprune
