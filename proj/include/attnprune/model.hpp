#pragma once

#include <cstdint>
#include <vector>

#include "attnprune/attention.hpp"
#include "attnprune/matrix.hpp"

namespace attnprune {

struct ToyModelConfig {
  int d_in = 16;
  int d = 32;
  int n_h = 4;
  int n_c = 8;
  int n_layers = 4;
  int n_classes = 8;
  std::uint64_t seed = 0;
  double init_std = 0.2;
};

// Small transformer classifier: input projection, a stack of attention
// blocks with residual connections, mean-pool over tokens, linear head.
// Stands in for a full model so Fisher scores and fine-tuning run on real
// task gradients.
struct ToyModel {
  int d_in = 0;
  int d = 0;
  int n_classes = 0;
  std::uint64_t init_seed = 0;

  Matrix input_proj;  // d_in x d
  std::vector<AttentionBlock> blocks;
  Matrix classifier;  // d x n_classes

  int n_layers() const { return static_cast<int>(blocks.size()); }
  std::size_t attention_param_count() const;
  std::size_t param_count() const;
  void validate() const;
};

ToyModel make_toy_model(const ToyModelConfig& cfg);

// Hidden activations after all attention layers (n x d).
Matrix model_hidden(const ToyModel& model, const Matrix& tokens);

// Class logits for one sample (tokens: n x d_in).
std::vector<double> model_logits(const ToyModel& model, const Matrix& tokens);

int model_predict(const ToyModel& model, const Matrix& tokens);

struct ModelGradients {
  Matrix input_proj;
  std::vector<AttentionGradients> blocks;
  Matrix classifier;
};

// Softmax cross-entropy of one sample; when grads is non-null, also fills
// exact reverse-mode gradients for every trainable matrix.
double model_loss(const ToyModel& model, const Matrix& tokens, int label,
                  ModelGradients* grads = nullptr);

struct Sample {
  Matrix tokens;  // n_tokens x d_in
  int label = 0;
};

struct DatasetConfig {
  std::uint64_t seed = 3;
  int n_train = 2048;
  int n_val = 256;
  int n_test = 256;
  int n_tokens = 16;
  int d_in = 16;
  int n_classes = 8;
  // teacher network shape; the teacher itself is discarded after labeling
  int teacher_d = 32;
  int teacher_n_h = 4;
  int teacher_n_c = 8;
  int teacher_layers = 4;
};

// Samples labeled by the argmax of a frozen randomly-initialized teacher,
// so attention genuinely carries task signal. Deterministic given the seed.
struct SynthDataset {
  DatasetConfig config;
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
  std::vector<long> class_histogram;  // over all splits
};

SynthDataset generate_dataset(const DatasetConfig& cfg);

// The teacher reconstructed from the dataset's seed (for audit tests).
ToyModel dataset_teacher(const DatasetConfig& cfg);

}  // namespace attnprune
