#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "oodcv/imaging.hpp"
#include "oodcv/rng.hpp"

namespace oodcv {

using SoftLabel = std::vector<double>;

SoftLabel one_hot(int class_id, int num_classes);

// ------------------------------------------------------------- object bank

struct BankEntry {
  Image image;
  Mask mask;
  std::optional<int> class_id;  // empty for task-unrelated objects

  bool task_related() const noexcept { return class_id.has_value(); }
};

/// Segmented foreground objects. Task-related entries carry a class in
/// [0, num_classes); task-unrelated ones carry none. Empty cutouts are
/// rejected on insertion.
class ObjectBank {
 public:
  ObjectBank() = default;
  explicit ObjectBank(int num_classes);

  void add(Image image, Mask mask, std::optional<int> class_id);

  int num_classes() const noexcept { return num_classes_; }
  const std::vector<BankEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  /// Writes objects/NNNNNN.png, masks/NNNNNN.png and index.json under `dir`.
  void save(const std::filesystem::path& dir) const;
  static ObjectBank load(const std::filesystem::path& dir);

 private:
  int num_classes_ = 0;
  std::vector<BankEntry> entries_;
};

// ------------------------------------------------------------ copy-paste

/// Bounds for the random object distortion applied before pasting.
struct JitterRanges {
  double rotation = 0.785398;  // +/- radians
  double scale_min = 0.8;
  double scale_max = 1.2;
  double shear = 0.3;  // +/- radians
  double flip_h_prob = 0.5;
  double flip_v_prob = 0.5;
  double brightness = 0.2;
  double contrast_min = 0.7;
  double contrast_max = 1.3;
  double saturation_min = 0.5;
  double saturation_max = 1.5;
  double hue = 3.14159265358979;  // +/- radians
};

AffineParams sample_affine(const JitterRanges& ranges, Rng& rng);
ColorParams sample_color(const JitterRanges& ranges, Rng& rng);

struct PasteOptions {
  /// Candidate paste offsets are drawn uniformly within this fraction of the
  /// target side around the centred placement.
  double max_offset_fraction = 0.25;
  /// Minimum share of the (warped) object mask that must land in frame.
  double min_in_frame = 0.5;
};

/// Pastes a task-related object onto a randomly chosen task-unrelated
/// background. The background is resized to the object's frame; the label is
/// the object's class. Throws ConfigError on an empty pool.
std::pair<Image, int> copy_paste_context(const std::vector<Image>& bg_pool,
                                         const BankEntry& obj,
                                         const AffineParams& affine,
                                         const ColorParams& color, Rng& rng,
                                         const PasteOptions& options = {});

/// Deterministic core of copy_paste_context with an explicit background and
/// offset.
std::pair<Image, int> copy_paste_context_at(const Image& bg,
                                            const BankEntry& obj,
                                            const AffineParams& affine,
                                            const ColorParams& color,
                                            Offset offset);

/// Pastes a task-unrelated distractor over `base`, limiting its in-frame mask
/// weight to coverage_cap of the base area. The label is unchanged.
std::pair<Image, int> copy_paste_occlusion(const Image& base, int class_id,
                                           const BankEntry& distractor,
                                           const AffineParams& affine,
                                           const ColorParams& color,
                                           double coverage_cap, Rng& rng);

std::pair<Image, int> copy_paste_occlusion_at(const Image& base, int class_id,
                                              const BankEntry& distractor,
                                              const AffineParams& affine,
                                              const ColorParams& color,
                                              double coverage_cap,
                                              Offset offset);

// ------------------------------------------------------------------ weather

enum class Weather { Rain, Snow, Fog, Sunshine };

struct WeatherKind {
  Weather type = Weather::Fog;
  int severity = 1;  // 1..5

  void validate() const;
};

std::string to_string(Weather w);
Weather weather_from_string(const std::string& name);

/// Upper bound of the per-pixel fog blend weight at a severity.
double fog_blend_weight(int severity);

/// Glare geometry for SUNSHINE; drawn from the rng exactly as weather() does.
struct SunshineGlare {
  double gain;       // multiplicative brightness gain
  double amplitude;  // additive glare peak
  double sigma;      // radial falloff, pixels
  double center_y;
  double center_x;
};
SunshineGlare sample_sunshine(int height, int width, int severity, Rng& rng);

Image weather(const Image& img, const WeatherKind& kind, Rng& rng);

// ------------------------------------------------------------------- cutmix

struct CutMixParams {
  double alpha = 1.0;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

/// Axis-aligned pixel rectangle [top, top+h) x [left, left+w).
struct Box {
  int top = 0;
  int left = 0;
  int h = 0;
  int w = 0;
};

/// Replaces `box` of `a` with the same region of `b`; the label weight of `a`
/// is the share of pixels left untouched.
std::pair<Image, SoftLabel> cutmix_box(const Image& a, const SoftLabel& label_a,
                                       const Image& b, const SoftLabel& label_b,
                                       Box box);
std::pair<Image, SoftLabel> cutmix(const Image& a, const SoftLabel& label_a,
                                   const Image& b, const SoftLabel& label_b,
                                   double alpha, Rng& rng);
std::pair<Image, SoftLabel> cutmix(const Image& a, const SoftLabel& label_a,
                                   const Image& b, const SoftLabel& label_b,
                                   const CutMixParams& params);

// ------------------------------------------------------------------- policy

enum class StrongOp {
  Rotate,
  ShearX,
  ShearY,
  TranslateX,
  TranslateY,
  Brightness,
  Contrast,
  Saturation,
  Posterize,
  Solarize,
  Sharpness,
  Equalize,
};
inline constexpr int kStrongOpCount = 12;

struct AugPolicy {
  enum class Kind { Weak, Strong };
  Kind kind = Kind::Weak;
  int op_count = 2;
  int magnitude = 9;  // 0..10
  std::uint64_t rng_seed = 0;

  void validate() const;
};

/// Largest weak-policy translation, in pixels, for an image side.
int weak_max_shift(int side);

/// Keeps the top `bits` bits of each 8-bit-quantized intensity.
Image posterize(const Image& img, int bits);
/// Inverts intensities strictly above `threshold`.
Image solarize(const Image& img, double threshold);
/// Per-channel 256-bin histogram equalization.
Image equalize(const Image& img);
/// Blends with a 3x3 smoothed copy; factor 1 is identity, 0 fully smoothed.
Image sharpness(const Image& img, double factor);
/// Integer pixel shift with zero fill.
Image shift(const Image& img, int dy, int dx);

/// One strong op at strength magnitude/10; signed ops pick a random sign.
Image apply_strong_op(const Image& img, StrongOp op, int magnitude, Rng& rng);

Image apply_policy(const Image& img, const AugPolicy& policy);
/// Same as above but draws from a caller-owned stream instead of the
/// policy's seed.
Image apply_policy(const Image& img, const AugPolicy& policy, Rng& rng);

// ----------------------------------------------------------------- pipeline

enum class StageKind {
  Weak,
  StrongPolicy,
  CopyPasteContext,
  CopyPasteOcclusion,
  Weather,
  CutMix,
};

std::string to_string(StageKind kind);
StageKind stage_kind_from_string(const std::string& name);

struct StageConfig {
  StageKind kind = StageKind::Weak;
  double probability = 0.5;
  int count = 1;           // pastes per image
  int op_count = 2;        // strong policy
  int magnitude = 9;       // strong policy
  int severity_min = 1;    // weather
  int severity_max = 5;    // weather
  double alpha = 1.0;      // cutmix
  double coverage_cap = 0.4;
};

struct PipelineConfig {
  std::vector<StageConfig> stages;
  JitterRanges jitter;
  PasteOptions paste;
};

/// Pools the copy-paste stages draw from.
struct AugResources {
  std::vector<Image> backgrounds;  // task-unrelated scenes
  ObjectBank distractors;          // task-unrelated objects
};

struct AugSample {
  Image image;
  Mask mask;
  SoftLabel label;
  int class_id = 0;
};

/// Stage-1 augmentation pipeline. Immutable after construction; randomness
/// comes in through the per-call rng.
class AugPipeline {
 public:
  AugPipeline(PipelineConfig config, const AugResources* resources);

  const PipelineConfig& config() const noexcept { return config_; }

  /// Applies every per-sample stage in order, each firing with its
  /// probability. CutMix stages are skipped here.
  AugSample apply(AugSample sample, Rng& rng) const;
  /// Per-sample stages, then CutMix stages pairing each sample with a random
  /// partner from the batch.
  std::vector<AugSample> apply_batch(std::vector<AugSample> batch,
                                     Rng& rng) const;

 private:
  PipelineConfig config_;
  const AugResources* resources_;
};

}  // namespace oodcv
