#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oodcv/imaging.hpp"
#include "oodcv/synthbench.hpp"
#include "oodcv/train.hpp"

namespace oodcv {

// ------------------------------------------------------------------- tencrop

/// floor(0.875 * side).
int default_crop_side(int side);

/// [TL, TR, BL, BR, C, flip(TL), flip(TR), flip(BL), flip(BR), flip(C)].
/// The center crop starts at ((H - s) / 2, (W - s) / 2), rounded down.
std::vector<Image> tencrop(const Image& img, int crop_side);

/// Mean softmax over the ten crops, each resized back to the model input.
Vector predict_tencrop(const Classifier& model, const Image& img,
                       int crop_side);
/// Batched form; crop_side 0 means default_crop_side of each image.
std::vector<Vector> predict_tencrop(const Classifier& model,
                                    std::span<const Image> images,
                                    int crop_side = 0);

/// Mean of the given per-model probability sets.
std::vector<Vector> average_probs(std::span<const std::vector<Vector>> sets);

// ------------------------------------------------------------------ ensemble

/// H = -sum p ln p with 0 ln 0 = 0.
double entropy(std::span<const double> probs);
double entropy(const Vector& probs);

struct EnsembleConfig {
  std::size_t anchor_index = 0;
  double entropy_factor = 2.0 / 3.0;
  int members = 4;

  /// `member_count` is the number of models actually supplied.
  void validate(std::size_t member_count) const;
};

enum class Route { Anchor, Ensemble };
std::string to_string(Route r);

struct EnsembleOutput {
  std::vector<int> labels;
  std::vector<Vector> probs;
  std::vector<Route> routes;
  std::vector<double> anchor_entropy;
  double mean_entropy = 0.0;  // over the anchor's predictions

  double ensemble_fraction() const;
};

/// Pass 1: anchor entropies and their mean H. Pass 2: sample i keeps the
/// anchor's probabilities when H_i < factor * H, otherwise takes the
/// unweighted mean over all members. member_probs[m][i] is member m's
/// distribution for sample i. factor is not range-checked here so the
/// limits (0, very large) can be exercised directly.
EnsembleOutput adaptive_ensemble(std::span<const std::vector<Vector>> member_probs,
                                 std::size_t anchor_index, double factor);

/// TenCrop predictions of every member, then the routing above.
EnsembleOutput adaptive_ensemble(std::span<const Classifier> members,
                                 std::size_t anchor_index, double factor,
                                 std::span<const Image> images,
                                 int crop_side = 0);

// ------------------------------------------------------------------- metrics

inline constexpr std::array<Nuisance, 7> kEvalSplits = {
    Nuisance::Iid,     Nuisance::Shape,     Nuisance::Pose,   Nuisance::Context,
    Nuisance::Texture, Nuisance::Occlusion, Nuisance::Weather};

/// Column names of the text table, in order.
std::vector<std::string> table_columns();

struct SplitMetrics {
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [truth][predicted]
};

struct MetricsReport {
  std::string name;
  int num_classes = 0;
  std::map<Nuisance, SplitMetrics> splits;
  double ood_average = 0.0;  // unweighted mean of the six nuisance splits
  std::optional<double> ensemble_fraction;
  std::vector<double> pseudo_label_accuracy;  // per TTT epoch, when known

  double accuracy(Nuisance n) const;
};

/// Per-split top-1 accuracy and confusion. Both maps must hold all seven
/// splits with matching lengths.
MetricsReport evaluate(const std::map<Nuisance, std::vector<int>>& predictions,
                       const std::map<Nuisance, std::vector<int>>& truth,
                       int num_classes, std::string name = {});

/// Fraction of labels equal to truth, per entry of `traces`.
std::vector<double> pseudo_label_trace(
    const std::vector<std::vector<int>>& traces, std::span<const int> truth);

// ------------------------------------------------------------------- exports

struct PredictionRecord {
  std::string sample_id;
  int predicted = 0;
  Vector probs;
  Route route = Route::Anchor;
};

/// sample_id, predicted, comma-separated probs, route; tab separated.
void write_predictions(const std::vector<PredictionRecord>& records,
                       const std::filesystem::path& path);
std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path);

std::string to_json(const MetricsReport& report);
void write_metrics_json(const MetricsReport& report,
                        const std::filesystem::path& path);

/// Header of the eight table columns and one row of percentages.
std::string format_table(const MetricsReport& report);
/// Method column plus the eight table columns, one row per report.
std::string format_ablation_table(const std::vector<MetricsReport>& rows);

/// series, epoch, value; tab separated with a header line.
struct PlotPoint {
  std::string series;
  int epoch = 0;
  double value = 0.0;
};
void write_plot_data(const std::vector<PlotPoint>& points,
                     const std::filesystem::path& path);

}  // namespace oodcv
