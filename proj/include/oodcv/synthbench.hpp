#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "oodcv/augment.hpp"
#include "oodcv/imaging.hpp"

namespace oodcv {

enum class Nuisance { Iid, Shape, Pose, Context, Texture, Occlusion, Weather };

inline constexpr std::array<Nuisance, 6> kOodNuisances = {
    Nuisance::Shape,   Nuisance::Pose,      Nuisance::Context,
    Nuisance::Texture, Nuisance::Occlusion, Nuisance::Weather};

/// Lower-case tag used in manifests and directory names ("iid", "shape", ...).
std::string to_string(Nuisance n);
/// Column title used in report tables ("IID", "Shape", ...).
std::string display_name(Nuisance n);
Nuisance nuisance_from_string(const std::string& tag);

enum class ShapeClass { Circle, Square, Triangle, Star, Cross };
inline constexpr int kShapeClassCount = 5;

struct BenchSpec {
  int num_classes = 5;
  int image_side = 32;
  int train_size = 2000;
  int val_size = 500;
  int test_size_per_split = 500;
  std::uint64_t rng_seed = 0;
  std::map<Nuisance, double> nuisance_strengths = {
      {Nuisance::Shape, 1.0},   {Nuisance::Pose, 1.0},
      {Nuisance::Context, 1.0}, {Nuisance::Texture, 1.0},
      {Nuisance::Occlusion, 1.0}, {Nuisance::Weather, 1.0}};
  int aux_backgrounds = 256;
  int aux_distractors = 256;

  /// Throws ConfigError naming the offending field ("benchmark.<name>").
  void validate() const;
  double strength(Nuisance n) const;
};

struct Sample {
  Image image;
  Mask mask;
  int label = 0;
  Nuisance tag = Nuisance::Iid;
};

struct LabeledSet {
  int num_classes = 0;
  std::vector<Sample> samples;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }
  std::vector<int> labels() const;
  std::vector<Image> images() const;
  std::vector<std::size_t> class_counts() const;
};

struct Benchmark {
  LabeledSet train;
  LabeledSet val;
  LabeledSet iid_test;
  std::map<Nuisance, LabeledSet> ood_tests;
  /// Task-unrelated pools for copy-paste augmentation (backgrounds with no
  /// class object and distractor blobs).
  AugResources aux;
};

/// The generator's record of which factor values produced a sample. Grouped
/// by nuisance so that OOD bookkeeping can check that exactly one group
/// changed.
struct SampleFactors {
  int label = 0;
  // shape
  double elongation = 1.0;
  double elongation_angle = 0.0;
  double wobble = 0.0;
  std::array<double, 3> wobble_phase{};
  // pose
  double rotation = 0.0;
  // placement (shared, never perturbed)
  double radius = 0.0;
  double center_y = 0.0;
  double center_x = 0.0;
  // context
  int background_family = 0;
  std::uint64_t background_seed = 0;
  // texture
  int fill_family = 0;
  std::uint64_t fill_seed = 0;
  // occlusion
  int occluders = 0;
  std::uint64_t occluder_seed = 0;
  // weather
  bool weathered = false;
  WeatherKind weather;
  std::uint64_t weather_seed = 0;
};

/// Factor groups in which `a` and `b` differ.
std::vector<Nuisance> differing_factors(const SampleFactors& a,
                                        const SampleFactors& b);

/// Base-distribution factors for one sample.
SampleFactors draw_base_factors(const BenchSpec& spec, int label,
                                std::uint64_t sample_seed);
/// Copy of `base` with only the `nuisance` group perturbed, at the spec's
/// strength for that nuisance.
SampleFactors perturb_factors(const BenchSpec& spec, const SampleFactors& base,
                              Nuisance nuisance, std::uint64_t sample_seed);
Sample render_sample(const BenchSpec& spec, const SampleFactors& f,
                     Nuisance tag);

/// Task-unrelated blob with its exact mask.
BankEntry make_distractor(int side, std::uint64_t seed);

Benchmark generate(const BenchSpec& spec);

// ---------------------------------------------------------------- manifests

/// One line per sample: image path, mask path, label ("-" when stripped),
/// nuisance tag; tab separated, paths relative to the manifest directory.
struct ManifestRecord {
  std::string image_path;
  std::string mask_path;
  std::optional<int> label;
  Nuisance tag = Nuisance::Iid;
};

inline constexpr const char* kManifestName = "manifest.tsv";

std::vector<ManifestRecord> export_set(const LabeledSet& set,
                                       const std::filesystem::path& dir);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& dir);
/// Rewrites the manifest in `dir` with every label field replaced by "-".
void strip_manifest_labels(const std::filesystem::path& dir);
LabeledSet import_set(const std::filesystem::path& dir, int num_classes);
/// Images only; the label column is never parsed.
std::vector<Image> import_images(const std::filesystem::path& dir);

void export_backgrounds(const std::vector<Image>& pool,
                        const std::filesystem::path& dir);
std::vector<Image> import_backgrounds(const std::filesystem::path& dir);

}  // namespace oodcv
