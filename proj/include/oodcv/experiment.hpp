#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "oodcv/augment.hpp"
#include "oodcv/infer.hpp"
#include "oodcv/synthbench.hpp"
#include "oodcv/train.hpp"
#include "oodcv/ttt.hpp"

namespace oodcv {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kToolVersion = "0.1.0";

enum class Variant { Plain, AutoCutmix, Strong };
std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

enum class EvalMode { Single, TenCrop, Ensemble };
std::string to_string(EvalMode m);
EvalMode eval_mode_from_string(const std::string& s);

/// Stage probabilities for the three pretraining variants. PLAIN uses the
/// weak stage only; AUTO_CUTMIX adds the strong policy and CutMix; STRONG
/// further adds copy-paste (context and occlusion) and weather.
struct AugmentSpec {
  double strong_policy_probability = 0.5;
  int strong_op_count = 2;
  int strong_magnitude = 9;
  double cutmix_probability = 0.5;
  double cutmix_alpha = 1.0;
  double copy_paste_probability = 0.2;
  int copy_paste_count = 1;
  double weather_probability = 0.2;
  int weather_severity_min = 1;
  int weather_severity_max = 5;

  void validate() const;
};

PipelineConfig pipeline_for(Variant v, const AugmentSpec& spec);

struct ModelSpec {
  std::vector<int> hidden = {128};
  double input_scale = 1.0;
  InputNorm input_norm = InputNorm::Center;
};

struct EnsembleSpec {
  EnsembleConfig config;
  int seeds = 2;
  std::vector<double> p_values = {0.8, 0.85};
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  BenchSpec benchmark;
  AugmentSpec augmentation;
  ModelSpec model;
  TrainRecipe training;
  TTTConfig ttt;
  EnsembleSpec ensemble;
  int crop_side = 0;  // 0: floor(0.875 * side)

  /// Throws ConfigError with the dotted path of the first bad field.
  void validate() const;
  ClassifierConfig classifier() const;
};

/// Strict parse: unknown fields and wrong types are ConfigErrors naming the
/// field path. Missing fields keep their defaults. Validates the result.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field, including defaults, in schema order.
std::string dump_config(const ExperimentConfig& config);

/// Named sub-streams of the root seed.
struct SeedStreams {
  std::uint64_t benchmark = 0;
  std::uint64_t pretrain = 0;
  std::uint64_t ttt_a = 0;
  std::uint64_t ttt_b = 0;
  std::uint64_t ensemble = 0;

  static SeedStreams from_root(std::uint64_t root);
};

/// Where each artifact lives under a run directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path train() const { return data() / "train"; }
  std::filesystem::path val() const { return data() / "val"; }
  std::filesystem::path test_root() const { return data() / "test"; }
  std::filesystem::path test(Nuisance n) const;
  std::filesystem::path backgrounds() const { return data() / "aux" / "backgrounds"; }
  std::filesystem::path distractors() const { return data() / "aux" / "distractors"; }
  std::filesystem::path checkpoint(Variant v) const;
  std::filesystem::path pretrain_log(Variant v) const;
  std::filesystem::path adapted(const std::string& name) const;
  std::filesystem::path eval(const std::string& name) const;
};

struct RunManifest {
  std::string command;
  std::string config_json;
  std::map<std::string, std::string> artifacts;  // role -> path
  std::string tool_version = kToolVersion;
  std::map<std::string, double> timings_s;

  /// Checks that every artifact exists, then writes manifest.json.
  void write(const std::filesystem::path& path) const;
};

// ------------------------------------------------------------------ commands

/// Benchmark splits plus the copy-paste pools under data_dir; idempotent.
RunManifest cmd_generate(const ExperimentConfig& config,
                         const std::filesystem::path& data_dir);

struct PretrainOutput {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  PretrainResult result;
};

PretrainOutput cmd_pretrain(const ExperimentConfig& config,
                            const std::filesystem::path& data_dir, Variant variant,
                            const std::filesystem::path& out_dir);

/// One TTT run configuration: seed index (0 = the root ttt-A/ttt-B streams,
/// k > 0 = streams derived from the ensemble stream) and threshold p.
struct AdaptMember {
  int seed_index = 0;
  double p = 0.8;
  std::string name() const;
};

struct AdaptOutput {
  std::filesystem::path dir;  // holds model_a.ckpt, model_b.ckpt, logs
  TTTResult result;
};

inline constexpr const char* kPseudoLabelFile = "pseudo_labels.tsv";

/// Runs TTT on the images of every test split under data_dir/test. Only the
/// image column of each manifest is read, so labels never reach TTT.
AdaptOutput cmd_adapt(const ExperimentConfig& config,
                      const std::filesystem::path& checkpoint,
                      const std::filesystem::path& data_dir,
                      const std::filesystem::path& out_dir,
                      const AdaptMember& member = {});

/// Models: checkpoint files, or adapt directories (A/B probabilities are
/// averaged). Writes metrics.json, table.txt, predictions.tsv and plot.tsv
/// into out_dir.
MetricsReport cmd_evaluate(const ExperimentConfig& config,
                           const std::vector<std::filesystem::path>& models,
                           const std::filesystem::path& data_dir, EvalMode mode,
                           const std::filesystem::path& out_dir,
                           const std::string& name = {});

struct AblationResult {
  std::vector<MetricsReport> chain;    // PLAIN ... STRONG+TTT+TENCROP
  std::vector<MetricsReport> members;  // TenCrop per ensemble member
  std::optional<MetricsReport> ensemble;
  double iid_before_ttt = 0.0;
  double iid_after_ttt = 0.0;
};

/// generate -> pretrain x3 -> adapt -> evaluate; with_ensemble adds the
/// remaining TTT members and the adaptive ensemble. Writes
/// ablation_table.txt and ablation.json under out_dir.
AblationResult run_ablation(const ExperimentConfig& config,
                            const std::filesystem::path& out_dir,
                            bool with_ensemble);

}  // namespace oodcv
