#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "oodcv/augment.hpp"
#include "oodcv/imaging.hpp"
#include "oodcv/synthbench.hpp"

namespace oodcv {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class InputNorm {
  Center,       // x - 0.5
  Standardize,  // (x - mean) / std over the whole image
};

/// Flattened H*W*3 input -> hidden ReLU layers -> num_classes logits.
/// Inputs are normalized per `input_norm`, then multiplied by input_scale.
struct ClassifierConfig {
  int input_height = 32;
  int input_width = 32;
  std::vector<int> hidden = {128};
  int num_classes = 5;
  double input_scale = 1.0;
  InputNorm input_norm = InputNorm::Center;

  int input_dim() const noexcept { return input_height * input_width * 3; }
  std::size_t parameter_count() const;
  void validate() const;
  friend bool operator==(const ClassifierConfig&,
                         const ClassifierConfig&) = default;
};

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

class Classifier {
 public:
  Classifier() = default;
  /// All-zero parameters.
  explicit Classifier(ClassifierConfig config);
  /// Zero-mean uniform init scaled by 1/sqrt(fan_in); the first layer is
  /// further divided by input_scale so initial activations do not depend on
  /// it.
  static Classifier initialized(const ClassifierConfig& config,
                                std::uint64_t seed);

  const ClassifierConfig& config() const noexcept { return config_; }
  std::vector<Layer>& layers() noexcept { return layers_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::size_t parameter_count() const;

  std::vector<double> flatten() const;
  void assign(std::span<const double> params);

  friend bool operator==(const Classifier& a, const Classifier& b);

 private:
  ClassifierConfig config_;
  std::vector<Layer> layers_;
};

/// Packs normalized images into an input_dim x N matrix.
Matrix to_batch(std::span<const Image> images, const ClassifierConfig& config);

struct ForwardResult {
  Matrix logits;  // C x N
  Matrix probs;   // C x N
};

ForwardResult forward(const Classifier& model, const Matrix& inputs);
ForwardResult forward(const Classifier& model, std::span<const Image> images);

/// Max-subtracted softmax of each column.
Matrix softmax(const Matrix& logits);
Vector softmax(const Vector& logits);

/// Index of the largest entry; ties go to the lowest index.
int argmax(std::span<const double> v);
int argmax(const Vector& v);

/// -sum_c q_c ln(max(p_c, 1e-12)) with q = (1 - eps) onehot(target) + eps / C.
double smoothed_ce(std::span<const double> probs, int target, double epsilon);
/// (1 - eps) * label + eps / C.
SoftLabel smooth_label(const SoftLabel& label, double epsilon);

enum class LossHead { CrossEntropy, Mse };

/// Per-sample loss weights. loss = sum_i ce[i] * CE_i + mse[i] * MSE_i with
/// CE_i = -sum_c q_ic ln p_ic and MSE_i = mean_c (p_ic - q_ic)^2, plus
/// prior * sum_c (1/C) ln((1/C) / pbar_c) where pbar is the batch-mean
/// probability vector.
struct LossWeights {
  std::vector<double> ce;
  std::vector<double> mse;
  double prior = 0.0;

  static LossWeights mean(std::size_t n, LossHead head);
};

struct Gradients {
  std::vector<Layer> layers;
  double loss = 0.0;

  double squared_norm() const;
};

Gradients backward(const Classifier& model, const Matrix& inputs,
                   const Matrix& targets, const LossWeights& weights);
/// Mean loss over the batch under a single head.
Gradients backward(const Classifier& model, const Matrix& inputs,
                   const Matrix& targets, LossHead head);

struct LrSchedule {
  double warmup_epochs = 3.0;
  double warmup_start = 1e-6;
  double base_lr = 0.01;
  double total_epochs = 100.0;
};

/// Linear warmup from warmup_start to base_lr, then half-cosine to zero at
/// total_epochs.
double lr_at(const LrSchedule& schedule, double epoch);

struct OptimState {
  std::vector<Layer> velocity;
  double momentum = 0.9;
  double weight_decay = 2e-5;
  std::int64_t step = 0;

  static OptimState for_model(const Classifier& model, double momentum,
                              double weight_decay);
};

/// v <- momentum * v + g + wd * theta; theta <- theta - lr * v.
void sgd_step(Classifier& model, const Gradients& grads, OptimState& state,
              double lr);

std::vector<Vector> predict_probs(const Classifier& model,
                                  std::span<const Image> images);
std::vector<int> predict_labels(const Classifier& model,
                                std::span<const Image> images);
double accuracy(const Classifier& model, const LabeledSet& set);

// ------------------------------------------------------------------ pretrain

struct TrainRecipe {
  int max_epochs = 100;
  int batch_size = 64;
  double label_smoothing = 0.1;
  LrSchedule schedule;  // total_epochs is taken from max_epochs
  double momentum = 0.9;
  double weight_decay = 2e-5;
  int patience = 10;
  std::uint64_t seed = 0;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

struct PretrainResult {
  Classifier model;  // best-validation checkpoint
  OptimState optim;  // optimizer state at the best checkpoint
  int best_epoch = 0;
  double best_val_accuracy = 0.0;
  std::vector<EpochLog> history;
};

/// Trains from `init` with the augmentation pipeline until max_epochs or
/// `patience` epochs without validation improvement. Throws ConfigError on
/// empty sets.
PretrainResult pretrain(const LabeledSet& train, const LabeledSet& val,
                        const AugPipeline& pipeline, const TrainRecipe& recipe,
                        const Classifier& init);

// ---------------------------------------------------------------- checkpoint

struct Checkpoint {
  Classifier model;
  std::optional<OptimState> optim;
  int epoch = 0;
  std::string rng_state;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Rejects files whose architecture differs from `expected` when given.
Checkpoint load_checkpoint(
    const std::filesystem::path& path,
    const std::optional<ClassifierConfig>& expected = std::nullopt);

}  // namespace oodcv
