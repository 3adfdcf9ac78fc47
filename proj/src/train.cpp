#include "oodcv/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "oodcv/error.hpp"
#include "oodcv/rng.hpp"

namespace oodcv {
namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kProbFloor = 1e-12;
constexpr std::size_t kEvalChunk = 256;
constexpr double kMinStd = 1.0 / 64.0;

}  // namespace

// -------------------------------------------------------------- classifier

std::size_t ClassifierConfig::parameter_count() const {
  std::size_t total = 0;
  int fan_in = input_dim();
  for (int h : hidden) {
    total += static_cast<std::size_t>(h) * fan_in + h;
    fan_in = h;
  }
  return total + static_cast<std::size_t>(num_classes) * fan_in + num_classes;
}

void ClassifierConfig::validate() const {
  if (input_height < Image::kMinSide || input_width < Image::kMinSide)
    throw ConfigError("input sides must be >= 8", "training.model.input_side");
  if (num_classes < 2)
    throw ConfigError("must be >= 2", "training.model.num_classes");
  if (!(input_scale > 0.0))
    throw ConfigError("must be > 0", "training.model.input_scale");
  for (int h : hidden)
    if (h < 1) throw ConfigError("widths must be positive", "training.model.hidden");
}

Classifier::Classifier(ClassifierConfig config) : config_(std::move(config)) {
  config_.validate();
  int fan_in = config_.input_dim();
  auto add = [&](int out) {
    layers_.push_back({Matrix::Zero(out, fan_in), Vector::Zero(out)});
    fan_in = out;
  };
  for (int h : config_.hidden) add(h);
  add(config_.num_classes);
}

Classifier Classifier::initialized(const ClassifierConfig& config,
                                   std::uint64_t seed) {
  Classifier m(config);
  Rng rng(seed);
  for (auto& layer : m.layers_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
    const double wbound =
        &layer == &m.layers_.front() ? bound / config.input_scale : bound;
    for (Eigen::Index j = 0; j < layer.weight.cols(); ++j)
      for (Eigen::Index i = 0; i < layer.weight.rows(); ++i)
        layer.weight(i, j) = rng.uniform(-wbound, wbound);
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i)
      layer.bias(i) = rng.uniform(-bound, bound);
  }
  return m;
}

std::size_t Classifier::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

std::vector<double> Classifier::flatten() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& l : layers_) {
    out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
    out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
  }
  return out;
}

void Classifier::assign(std::span<const double> params) {
  OODCV_REQUIRE(params.size() == parameter_count(),
                "parameter vector has the wrong length");
  std::size_t k = 0;
  for (auto& l : layers_) {
    std::copy_n(params.data() + k, l.weight.size(), l.weight.data());
    k += static_cast<std::size_t>(l.weight.size());
    std::copy_n(params.data() + k, l.bias.size(), l.bias.data());
    k += static_cast<std::size_t>(l.bias.size());
  }
}

bool operator==(const Classifier& a, const Classifier& b) {
  if (!(a.config_ == b.config_) || a.layers_.size() != b.layers_.size())
    return false;
  for (std::size_t i = 0; i < a.layers_.size(); ++i) {
    if (a.layers_[i].weight != b.layers_[i].weight ||
        a.layers_[i].bias != b.layers_[i].bias)
      return false;
  }
  return true;
}

// ------------------------------------------------------------------ forward

Matrix to_batch(std::span<const Image> images, const ClassifierConfig& config) {
  Matrix x(config.input_dim(), static_cast<Eigen::Index>(images.size()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    OODCV_REQUIRE(img.height() == config.input_height &&
                      img.width() == config.input_width,
                  "input image size does not match the classifier");
    const auto d = img.data();
    double shift = 0.5, gain = config.input_scale;
    if (config.input_norm == InputNorm::Standardize) {
      double sum = 0.0, sq = 0.0;
      for (double v : d) sum += v;
      shift = sum / static_cast<double>(d.size());
      for (double v : d) sq += (v - shift) * (v - shift);
      gain /= std::max(std::sqrt(sq / static_cast<double>(d.size())), kMinStd);
    }
    for (std::size_t k = 0; k < d.size(); ++k)
      x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) =
          (d[k] - shift) * gain;
  }
  return x;
}

Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double m = logits.col(j).maxCoeff();
    p.col(j) = (logits.col(j).array() - m).exp().matrix();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

Vector softmax(const Vector& logits) {
  Matrix m = logits;
  return softmax(m).col(0);
}

namespace {

struct Activations {
  std::vector<Matrix> pre;   // z_l per layer
  std::vector<Matrix> post;  // a_l per hidden layer (a_0 = inputs excluded)
};

Matrix run_forward(const Classifier& model, const Matrix& inputs,
                   Activations* acts) {
  OODCV_REQUIRE(inputs.rows() == model.config().input_dim(),
                "batch dimension does not match the classifier input");
  const auto& layers = model.layers();
  Matrix a = inputs;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Matrix z = layers[l].weight * a;
    z.colwise() += layers[l].bias;
    if (l + 1 == layers.size()) {
      if (acts) acts->pre.push_back(z);
      return z;
    }
    Matrix next = z.cwiseMax(0.0);
    if (acts) {
      acts->pre.push_back(std::move(z));
      acts->post.push_back(next);
    }
    a = std::move(next);
  }
  return a;
}

}  // namespace

ForwardResult forward(const Classifier& model, const Matrix& inputs) {
  Matrix logits = run_forward(model, inputs, nullptr);
  Matrix probs = softmax(logits);
  return {std::move(logits), std::move(probs)};
}

ForwardResult forward(const Classifier& model, std::span<const Image> images) {
  return forward(model, to_batch(images, model.config()));
}

int argmax(std::span<const double> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

int argmax(const Vector& v) {
  return argmax(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

// ------------------------------------------------------------------- losses

double smoothed_ce(std::span<const double> probs, int target, double epsilon) {
  OODCV_REQUIRE(epsilon >= 0.0 && epsilon < 1.0, "epsilon must lie in [0, 1)");
  const int c = static_cast<int>(probs.size());
  OODCV_REQUIRE(target >= 0 && target < c, "target out of range");
  double loss = 0.0;
  for (int k = 0; k < c; ++k) {
    const double q = (k == target ? 1.0 - epsilon : 0.0) + epsilon / c;
    if (q == 0.0) continue;
    loss -= q * std::log(std::max(probs[static_cast<std::size_t>(k)], kProbFloor));
  }
  return loss;
}

SoftLabel smooth_label(const SoftLabel& label, double epsilon) {
  SoftLabel out(label.size());
  const double u = epsilon / static_cast<double>(label.size());
  for (std::size_t k = 0; k < label.size(); ++k)
    out[k] = (1.0 - epsilon) * label[k] + u;
  return out;
}

LossWeights LossWeights::mean(std::size_t n, LossHead head) {
  LossWeights w;
  const double v = n == 0 ? 0.0 : 1.0 / static_cast<double>(n);
  w.ce.assign(n, head == LossHead::CrossEntropy ? v : 0.0);
  w.mse.assign(n, head == LossHead::Mse ? v : 0.0);
  return w;
}

double Gradients::squared_norm() const {
  double s = 0.0;
  for (const auto& l : layers) s += l.weight.squaredNorm() + l.bias.squaredNorm();
  return s;
}

Gradients backward(const Classifier& model, const Matrix& inputs,
                   const Matrix& targets, const LossWeights& weights) {
  const auto n = inputs.cols();
  const auto c = static_cast<Eigen::Index>(model.config().num_classes);
  OODCV_REQUIRE(targets.rows() == c && targets.cols() == n,
                "targets do not match the batch");
  OODCV_REQUIRE(weights.ce.size() == static_cast<std::size_t>(n) &&
                    weights.mse.size() == static_cast<std::size_t>(n),
                "loss weights do not match the batch");

  Activations acts;
  const Matrix logits = run_forward(model, inputs, &acts);
  const Matrix probs = softmax(logits);

  Gradients g;
  Matrix dz(c, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double wce = weights.ce[static_cast<std::size_t>(i)];
    const double wmse = weights.mse[static_cast<std::size_t>(i)];
    const auto p = probs.col(i);
    const auto q = targets.col(i);
    Vector d = Vector::Zero(c);
    if (wce != 0.0) {
      double ce = 0.0;
      for (Eigen::Index k = 0; k < c; ++k)
        if (q(k) != 0.0) ce -= q(k) * std::log(std::max(p(k), kProbFloor));
      g.loss += wce * ce;
      d += wce * (p * q.sum() - q);
    }
    if (wmse != 0.0) {
      const Vector r = p - q;
      g.loss += wmse * r.squaredNorm() / static_cast<double>(c);
      // dL/dp = 2 r / C, pulled back through the softmax Jacobian.
      const Vector dp = 2.0 * r / static_cast<double>(c);
      const double dot = p.dot(dp);
      d += wmse * (p.array() * (dp.array() - dot)).matrix();
    }
    dz.col(i) = d;
  }
  if (weights.prior != 0.0 && n > 0) {
    const Vector pbar = probs.rowwise().mean();
    const double u = 1.0 / static_cast<double>(c);
    Vector dpbar(c);
    for (Eigen::Index k = 0; k < c; ++k) {
      const double pk = std::max(pbar(k), kProbFloor);
      g.loss += weights.prior * u * std::log(u / pk);
      dpbar(k) = -weights.prior * u / pk;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto p = probs.col(i);
      const double dot = p.dot(dpbar);
      dz.col(i) += (p.array() * (dpbar.array() - dot)).matrix() / static_cast<double>(n);
    }
  }

  const auto& layers = model.layers();
  g.layers.resize(layers.size());
  for (std::size_t l = layers.size(); l-- > 0;) {
    const Matrix& a_prev = l == 0 ? inputs : acts.post[l - 1];
    g.layers[l].weight = dz * a_prev.transpose();
    g.layers[l].bias = dz.rowwise().sum();
    if (l == 0) break;
    Matrix da = layers[l].weight.transpose() * dz;
    dz = (acts.pre[l - 1].array() > 0.0).select(da, 0.0);
  }
  return g;
}

Gradients backward(const Classifier& model, const Matrix& inputs,
                   const Matrix& targets, LossHead head) {
  return backward(model, inputs, targets,
                  LossWeights::mean(static_cast<std::size_t>(inputs.cols()), head));
}

// ----------------------------------------------------------------- optimizer

double lr_at(const LrSchedule& s, double epoch) {
  OODCV_REQUIRE(epoch >= 0.0 && epoch <= s.total_epochs,
                "lr_at: epoch outside [0, total_epochs]");
  const double warm = std::min(s.warmup_epochs, s.total_epochs);
  if (epoch < warm)
    return s.warmup_start + (s.base_lr - s.warmup_start) * epoch / warm;
  const double span = s.total_epochs - warm;
  if (span <= 0.0) return s.base_lr;
  return s.base_lr * 0.5 * (1.0 + std::cos(kPi * (epoch - warm) / span));
}

OptimState OptimState::for_model(const Classifier& model, double momentum,
                                 double weight_decay) {
  OptimState s;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  for (const auto& l : model.layers())
    s.velocity.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()),
                          Vector::Zero(l.bias.size())});
  return s;
}

void sgd_step(Classifier& model, const Gradients& grads, OptimState& state,
              double lr) {
  auto& layers = model.layers();
  OODCV_REQUIRE(grads.layers.size() == layers.size() &&
                    state.velocity.size() == layers.size(),
                "sgd_step: shape mismatch");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& p = layers[l];
    auto& v = state.velocity[l];
    const auto& g = grads.layers[l];
    OODCV_REQUIRE(g.weight.rows() == p.weight.rows() &&
                      g.weight.cols() == p.weight.cols() &&
                      v.weight.rows() == p.weight.rows() &&
                      v.weight.cols() == p.weight.cols(),
                  "sgd_step: shape mismatch");
    v.weight = state.momentum * v.weight + g.weight + state.weight_decay * p.weight;
    v.bias = state.momentum * v.bias + g.bias + state.weight_decay * p.bias;
    p.weight -= lr * v.weight;
    p.bias -= lr * v.bias;
  }
  ++state.step;
}

// --------------------------------------------------------------- prediction

std::vector<Vector> predict_probs(const Classifier& model,
                                  std::span<const Image> images) {
  std::vector<Vector> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += kEvalChunk) {
    const auto len = std::min(kEvalChunk, images.size() - start);
    const auto fr = forward(model, images.subspan(start, len));
    for (Eigen::Index j = 0; j < fr.probs.cols(); ++j) out.push_back(fr.probs.col(j));
  }
  return out;
}

std::vector<int> predict_labels(const Classifier& model,
                                std::span<const Image> images) {
  std::vector<int> out;
  out.reserve(images.size());
  for (const auto& p : predict_probs(model, images)) out.push_back(argmax(p));
  return out;
}

double accuracy(const Classifier& model, const LabeledSet& set) {
  if (set.empty()) return 0.0;
  const auto images = set.images();
  const auto pred = predict_labels(model, images);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    hits += pred[i] == set.samples[i].label;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// ----------------------------------------------------------------- pretrain

PretrainResult pretrain(const LabeledSet& train, const LabeledSet& val,
                        const AugPipeline& pipeline, const TrainRecipe& recipe,
                        const Classifier& init) {
  if (train.empty()) throw ConfigError("training set is empty", "data.train");
  if (val.empty()) throw ConfigError("validation set is empty", "data.val");
  if (recipe.batch_size < 1)
    throw ConfigError("must be >= 1", "training.batch_size");
  if (recipe.max_epochs < 0)
    throw ConfigError("must be >= 0", "training.max_epochs");

  const int num_classes = init.config().num_classes;
  PretrainResult result{init,
                        OptimState::for_model(init, recipe.momentum,
                                              recipe.weight_decay),
                        0, -1.0, {}};
  Classifier model = init;
  OptimState state = result.optim;
  LrSchedule schedule = recipe.schedule;
  schedule.total_epochs = recipe.max_epochs;
  Rng rng(recipe.seed);

  const std::size_t n = train.size();
  const std::size_t bs = static_cast<std::size_t>(recipe.batch_size);
  const std::size_t batches = (n + bs - 1) / bs;
  int since_best = 0;
  for (int epoch = 0; epoch < recipe.max_epochs; ++epoch) {
    const auto perm = rng.permutation(n);
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<AugSample> batch;
      for (std::size_t k = b * bs; k < std::min(n, (b + 1) * bs); ++k) {
        const auto& s = train.samples[perm[k]];
        batch.push_back({s.image, s.mask, one_hot(s.label, num_classes), s.label});
      }
      batch = pipeline.apply_batch(std::move(batch), rng);
      std::vector<Image> imgs;
      Matrix targets(num_classes, static_cast<Eigen::Index>(batch.size()));
      for (std::size_t i = 0; i < batch.size(); ++i) {
        imgs.push_back(std::move(batch[i].image));
        const auto q = smooth_label(batch[i].label, recipe.label_smoothing);
        for (int c = 0; c < num_classes; ++c)
          targets(c, static_cast<Eigen::Index>(i)) = q[static_cast<std::size_t>(c)];
      }
      lr = lr_at(schedule, epoch + static_cast<double>(b) / batches);
      const auto grads = backward(model, to_batch(imgs, model.config()), targets,
                                  LossHead::CrossEntropy);
      loss_sum += grads.loss;
      sgd_step(model, grads, state, lr);
    }
    const double val_acc = accuracy(model, val);
    result.history.push_back({epoch + 1, lr, loss_sum / batches, val_acc});
    if (val_acc > result.best_val_accuracy) {
      result.best_val_accuracy = val_acc;
      result.best_epoch = epoch + 1;
      result.model = model;
      result.optim = state;
      since_best = 0;
    } else if (++since_best >= recipe.patience) {
      break;
    }
  }
  if (result.best_val_accuracy < 0.0) result.best_val_accuracy = accuracy(init, val);
  return result;
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'O', 'O', 'D', 'C', 'V', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json config_to_json(const ClassifierConfig& c) {
  return {{"input_height", c.input_height},
          {"input_width", c.input_width},
          {"hidden", c.hidden},
          {"num_classes", c.num_classes},
          {"input_scale", c.input_scale},
          {"input_norm", c.input_norm == InputNorm::Standardize ? "standardize" : "center"}};
}

ClassifierConfig config_from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  c.input_height = j.at("input_height").get<int>();
  c.input_width = j.at("input_width").get<int>();
  c.hidden = j.at("hidden").get<std::vector<int>>();
  c.num_classes = j.at("num_classes").get<int>();
  c.input_scale = j.at("input_scale").get<double>();
  c.input_norm = j.at("input_norm").get<std::string>() == "standardize"
                     ? InputNorm::Standardize
                     : InputNorm::Center;
  return c;
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

void write_layers(std::ostream& out, const std::vector<Layer>& layers) {
  for (const auto& l : layers) {
    out.write(reinterpret_cast<const char*>(l.weight.data()),
              static_cast<std::streamsize>(l.weight.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(l.bias.data()),
              static_cast<std::streamsize>(l.bias.size() * sizeof(double)));
  }
}

void read_layers(std::istream& in, std::vector<Layer>& layers) {
  for (auto& l : layers) {
    in.read(reinterpret_cast<char*>(l.weight.data()),
            static_cast<std::streamsize>(l.weight.size() * sizeof(double)));
    in.read(reinterpret_cast<char*>(l.bias.data()),
            static_cast<std::streamsize>(l.bias.size() * sizeof(double)));
  }
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header = {{"format", "oodcv-checkpoint"},
                           {"model", config_to_json(ckpt.model.config())},
                           {"epoch", ckpt.epoch},
                           {"rng_state", ckpt.rng_state},
                           {"has_optimizer", ckpt.optim.has_value()}};
  if (ckpt.optim) {
    header["momentum"] = ckpt.optim->momentum;
    header["weight_decay"] = ckpt.optim->weight_decay;
    header["step"] = ckpt.optim->step;
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, kCheckpointVersion);
  write_pod(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  write_layers(out, ckpt.model.layers());
  if (ckpt.optim) write_layers(out, ckpt.optim->velocity);
  if (!out) throw IoError("write failed for checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ClassifierConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("'" + path.string() + "' is not an oodcv checkpoint");
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version in '" + path.string() + "'");
  const auto len = read_pod<std::uint64_t>(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint '" + path.string() + "'");

  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(text);
    const auto config = config_from_json(header.at("model"));
    if (expected && !(config == *expected))
      throw ConfigError("checkpoint '" + path.string() +
                            "' was saved with a different architecture",
                        "training.model");
    ckpt.model = Classifier(config);
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.rng_state = header.at("rng_state").get<std::string>();
    read_layers(in, ckpt.model.layers());
    if (header.at("has_optimizer").get<bool>()) {
      auto state = OptimState::for_model(ckpt.model, header.at("momentum").get<double>(),
                                         header.at("weight_decay").get<double>());
      state.step = header.at("step").get<std::int64_t>();
      read_layers(in, state.velocity);
      ckpt.optim = std::move(state);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint header in '" + path.string() + "': " + e.what());
  }
  if (!in) throw IoError("truncated checkpoint '" + path.string() + "'");
  return ckpt;
}

}  // namespace oodcv
