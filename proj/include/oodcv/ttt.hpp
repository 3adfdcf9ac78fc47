#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oodcv/augment.hpp"
#include "oodcv/imaging.hpp"
#include "oodcv/train.hpp"

namespace oodcv {

struct TTTConfig {
  double p = 0.8;                  // clean-probability threshold
  std::optional<double> p_b;       // threshold for model B when it differs
  int refresh_period = 3;          // epochs between pseudo-label refreshes
  bool refresh = true;             // false: labels stay at their initial values
  double sharpen_T = 0.5;
  double mix_alpha = 4.0;
  double lambda_u = 25.0;          // reached after the first refresh period
  double prior_weight = 1.0;       // class-balance penalty on mixed batches
  double lr = 0.02;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  int epochs = 9;
  int aug_views = 2;               // weak views per model for label estimates
  int batch_size = 64;
  int strong_op_count = 2;
  int strong_magnitude = 9;
  double fallback_fraction = 0.1;  // LABELED share when the split comes out empty
  std::uint64_t seed_a = 1;
  std::uint64_t seed_b = 2;

  double threshold_a() const noexcept { return p; }
  double threshold_b() const noexcept { return p_b.value_or(p); }
  /// Throws ConfigError with "ttt.<field>" paths.
  void validate() const;
};

// ---------------------------------------------------------------------- GMM

struct GmmComponent {
  double mean = 0.0;
  double variance = 0.0;
  double weight = 0.0;
};

/// Two-component 1-D mixture over min-max normalized losses. `clean` is the
/// lower-mean component.
struct GmmFit {
  GmmComponent clean;
  GmmComponent noisy;
  double loss_min = 0.0;
  double loss_max = 0.0;
  double log_likelihood = 0.0;  // of the normalized losses
  int iterations = 0;
  bool degenerate = false;      // all losses equal

  /// Posterior of the clean component for a raw loss. The normalized loss is
  /// clamped to [clean.mean, noisy.mean], which keeps the posterior
  /// non-increasing in the loss for any pair of variances.
  double clean_prob(double loss) const;
  std::vector<double> clean_probs(std::span<const double> losses) const;
};

inline constexpr double kGmmVarianceFloor = 1e-4;
inline constexpr int kGmmMaxIterations = 100;
inline constexpr double kGmmTolerance = 1e-6;

/// EM from means at the 10th/90th percentiles, equal weights and a shared
/// initial variance. Requires >= 10 finite losses.
GmmFit fit_loss_gmm(std::span<const double> losses);

/// Log-likelihood of normalized values x under a mixture.
double gmm_log_likelihood(std::span<const double> x, const GmmComponent& a,
                          const GmmComponent& b);

// ---------------------------------------------------------------- division

enum class Split { Labeled, Unlabeled };

struct Division {
  std::vector<double> clean_prob;
  std::vector<Split> split;
  GmmFit fit;
  bool fallback = false;  // split was empty and the lowest losses were used

  std::size_t labeled_count() const;
};

/// LABELED iff clean_prob >= p. When nothing clears p, the
/// ceil(fallback_fraction * n) lowest-loss samples become LABELED.
Division divide(std::span<const double> losses, double p,
                double fallback_fraction = 0.1);

/// Per-sample cross-entropy of the un-augmented images against `labels`
/// (no smoothing).
std::vector<double> per_sample_loss(const Classifier& model,
                                    std::span<const Image> images,
                                    std::span<const int> labels);

// --------------------------------------------------------------- soft labels

/// v_c^(1/T) / sum v^(1/T).
SoftLabel sharpen(std::span<const double> v, double T);

/// sharpen(w * onehot(y) + (1 - w) * mean(view_probs), T).
SoftLabel co_refine(std::span<const SoftLabel> view_probs, double w, int y,
                    double T);
/// sharpen(mean(views_a ++ views_b), T).
SoftLabel co_guess(std::span<const SoftLabel> views_a,
                   std::span<const SoftLabel> views_b, double T);

/// Probabilities of `views` weak augmentations of img.
std::vector<SoftLabel> weak_view_probs(const Classifier& model,
                                       const Image& img, int views, Rng& rng);
SoftLabel co_refine(const Classifier& own, const Image& img, int views,
                    double w, int y, double T, Rng& rng);
SoftLabel co_guess(const Classifier& a, const Classifier& b, const Image& img,
                   int views, double T, Rng& rng);

// ------------------------------------------------------------------ mixmatch

/// The first `labeled` entries belong to the refined labeled batch, the rest
/// to the co-guessed unlabeled batch.
struct MixBatch {
  std::vector<Image> images;
  std::vector<SoftLabel> targets;
  std::size_t labeled = 0;
};

struct MixResult {
  Gradients grads;
  double ce_loss = 0.0;
  double mse_loss = 0.0;  // before the lambda_u weight
  double prior_loss = 0.0;
  double lambda_prime = 1.0;
};

/// Mixes sample i with partners[i] at weight lambda_prime and returns
/// CE over mixed labeled + lambda_u * MSE over mixed unlabeled
/// + prior_weight * class-balance penalty. Images are used as given.
MixResult mix_and_backward(const Classifier& model, const MixBatch& batch,
                           double lambda_prime,
                           std::span<const std::size_t> partners,
                           double lambda_u, double prior_weight = 0.0);

/// Strong-augments every image, draws lambda ~ Beta(alpha, alpha) with
/// lambda' = max(lambda, 1 - lambda) and shuffled partners, then calls
/// mix_and_backward.
MixResult mixmatch_step(const Classifier& model, const MixBatch& batch,
                        const TTTConfig& config, double lambda_u, Rng& rng);

/// lambda_u * min(1, t / refresh_period) for fractional epoch t.
double lambda_u_at(const TTTConfig& config, double t);

// ---------------------------------------------------------------------- loop

/// Argmax of un-augmented predictions, ties to the lowest index.
std::vector<int> assign_noisy_labels(const Classifier& model,
                                     std::span<const Image> images);
/// Same, using the mean of the members' probabilities.
std::vector<int> assign_noisy_labels(std::span<const Classifier> members,
                                     std::span<const Image> images);

struct TTTState {
  Classifier model_a;
  Classifier model_b;
  OptimState optim_a;
  OptimState optim_b;
  std::vector<int> noisy_labels;
  Division division_a;  // trains model A; computed from model B's losses
  Division division_b;  // trains model B; computed from model A's losses
  int epoch = 0;
};

TTTState init_ttt(const Classifier& pretrained, std::span<const Image> images,
                  const TTTConfig& config);
void co_divide(TTTState& state, std::span<const Image> images,
               const TTTConfig& config);
/// Returns how many labels changed.
std::size_t refresh_labels(TTTState& state, std::span<const Image> images);

struct TTTEpochLog {
  int epoch = 0;  // 1-based, after training
  bool refreshed = false;
  std::size_t labels_changed = 0;
  double lambda_u = 0.0;
  std::size_t labeled_a = 0;
  std::size_t labeled_b = 0;
  bool fallback_a = false;
  bool fallback_b = false;
  double ce_loss_a = 0.0;
  double ce_loss_b = 0.0;
  double mse_loss_a = 0.0;
  double mse_loss_b = 0.0;
  double agreement = 0.0;         // A/B argmax agreement after the epoch
  std::vector<int> noisy_labels;  // labels the epoch trained against
};

std::string to_json_line(const TTTEpochLog& log);

struct TTTResult {
  Classifier model_a;
  Classifier model_b;
  std::vector<TTTEpochLog> history;
};

/// Adapts two copies of `pretrained` on unlabeled images. Takes images only,
/// so ground-truth labels cannot reach the loop.
TTTResult run_ttt(const Classifier& pretrained, std::span<const Image> images,
                  const TTTConfig& config);

/// Writes one JSON object per epoch (noisy_labels omitted).
void write_ttt_log(const std::vector<TTTEpochLog>& history,
                   const std::filesystem::path& path);

}  // namespace oodcv
