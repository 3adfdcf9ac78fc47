#include "oodcv/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "oodcv/error.hpp"
#include "oodcv/rng.hpp"

namespace oodcv {
namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

// Reads one JSON object field by field and rejects anything it was not asked
// about.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("must be an object", where());
  }

  std::string at(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void read(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError("must be a number", at(key));
      out = v->get<double>();
    }
  }
  void read(const std::string& key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError("must be an integer", at(key));
      out = v->get<int>();
    }
  }
  void read(const std::string& key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned())
        throw ConfigError("must be a non-negative integer", at(key));
      out = v->get<std::uint64_t>();
    }
  }
  void read(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError("must be true or false", at(key));
      out = v->get<bool>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError("must be a string", at(key));
      out = v->get<std::string>();
    }
  }
  void read(const std::string& key, std::optional<double>& out) {
    if (const json* v = find(key)) {
      if (v->is_null()) out.reset();
      else if (v->is_number()) out = v->get<double>();
      else throw ConfigError("must be a number or null", at(key));
    }
  }
  template <class T>
  void read(const std::string& key, std::vector<T>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError("must be an array", at(key));
      std::vector<T> tmp;
      for (std::size_t i = 0; i < v->size(); ++i) {
        const json& e = (*v)[i];
        const bool ok = std::is_integral_v<T> ? e.is_number_integer() : e.is_number();
        if (!ok)
          throw ConfigError("must be a number", at(key) + "[" + std::to_string(i) + "]");
        tmp.push_back(e.get<T>());
      }
      out = std::move(tmp);
    }
  }

  /// Sub-object; absent keys yield nullopt.
  std::optional<Fields> object(const std::string& key) {
    if (const json* v = find(key)) return Fields(*v, at(key));
    return std::nullopt;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.contains(k)) throw ConfigError("unknown field", at(k));
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string input_norm_name(InputNorm n) {
  return n == InputNorm::Center ? "center" : "standardize";
}

InputNorm input_norm_from(const std::string& s, const std::string& field) {
  if (s == "center") return InputNorm::Center;
  if (s == "standardize") return InputNorm::Standardize;
  throw ConfigError("must be \"center\" or \"standardize\"", field);
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void require_dir(const fs::path& dir, const std::string& what) {
  if (!fs::exists(dir / kManifestName))
    throw IoError("missing " + what + ": no " + std::string(kManifestName) +
                  " under '" + dir.string() + "'");
}

void ensure_writable(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw IoError("cannot create output directory '" + dir.string() + "'");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

// A member is one checkpoint, or the two models of an adapt directory.
struct LoadedMember {
  fs::path source;
  std::vector<Classifier> models;
};

LoadedMember load_member(const fs::path& p, const ClassifierConfig& expected) {
  LoadedMember m{p, {}};
  if (fs::is_directory(p)) {
    for (const char* f : {"model_a.ckpt", "model_b.ckpt"}) {
      if (!fs::exists(p / f))
        throw IoError("adapt directory '" + p.string() + "' lacks " + f);
      m.models.push_back(load_checkpoint(p / f, expected).model);
    }
  } else {
    if (!fs::exists(p)) throw IoError("missing checkpoint '" + p.string() + "'");
    m.models.push_back(load_checkpoint(p, expected).model);
  }
  return m;
}

std::vector<Vector> member_probs(const LoadedMember& m,
                                 std::span<const Image> images, bool tencrop,
                                 int crop_side) {
  std::vector<std::vector<Vector>> per;
  for (const auto& c : m.models)
    per.push_back(tencrop ? predict_tencrop(c, images, crop_side)
                          : predict_probs(c, images));
  return average_probs(std::span<const std::vector<Vector>>(per));
}

std::vector<std::vector<int>> read_pseudo_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::vector<std::vector<int>> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos) continue;
    std::vector<int> labels;
    std::istringstream ss(line.substr(tab + 1));
    for (std::string tok; std::getline(ss, tok, ',');) labels.push_back(std::stoi(tok));
    out.push_back(std::move(labels));
  }
  return out;
}

std::vector<EpochLog> read_pretrain_log(const fs::path& path) {
  std::vector<EpochLog> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    out.push_back({j.at("epoch").get<int>(), j.at("lr").get<double>(),
                   j.at("train_loss").get<double>(),
                   j.at("val_accuracy").get<double>()});
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- enums

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Plain: return "PLAIN";
    case Variant::AutoCutmix: return "AUTO_CUTMIX";
    case Variant::Strong: return "STRONG";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  for (auto v : {Variant::Plain, Variant::AutoCutmix, Variant::Strong})
    if (to_string(v) == s) return v;
  throw ConfigError("must be PLAIN, AUTO_CUTMIX or STRONG", "variant");
}

std::string to_string(EvalMode m) {
  switch (m) {
    case EvalMode::Single: return "SINGLE";
    case EvalMode::TenCrop: return "TENCROP";
    case EvalMode::Ensemble: return "ENSEMBLE";
  }
  return "?";
}

EvalMode eval_mode_from_string(const std::string& s) {
  for (auto m : {EvalMode::Single, EvalMode::TenCrop, EvalMode::Ensemble})
    if (to_string(m) == s) return m;
  throw ConfigError("must be SINGLE, TENCROP or ENSEMBLE", "mode");
}

// --------------------------------------------------------------- config

void AugmentSpec::validate() const {
  auto prob = [](double v, const char* f) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("must lie in [0, 1]", f);
  };
  prob(strong_policy_probability, "augmentation.strong_policy_probability");
  prob(cutmix_probability, "augmentation.cutmix_probability");
  prob(copy_paste_probability, "augmentation.copy_paste_probability");
  prob(weather_probability, "augmentation.weather_probability");
  if (strong_op_count < 0)
    throw ConfigError("must be >= 0", "augmentation.strong_op_count");
  if (strong_magnitude < 0 || strong_magnitude > 10)
    throw ConfigError("must lie in [0, 10]", "augmentation.strong_magnitude");
  if (!(cutmix_alpha > 0.0))
    throw ConfigError("must be > 0", "augmentation.cutmix_alpha");
  if (copy_paste_count < 1)
    throw ConfigError("must be >= 1", "augmentation.copy_paste_count");
  if (!(1 <= weather_severity_min && weather_severity_min <= weather_severity_max &&
        weather_severity_max <= 5))
    throw ConfigError("severity range must lie within [1, 5]",
                      "augmentation.weather_severity_min");
}

PipelineConfig pipeline_for(Variant v, const AugmentSpec& spec) {
  auto stage = [](StageKind k, double p) {
    StageConfig s;
    s.kind = k;
    s.probability = p;
    return s;
  };
  PipelineConfig c;
  if (v == Variant::Strong) {
    auto ctx = stage(StageKind::CopyPasteContext, spec.copy_paste_probability);
    auto occ = stage(StageKind::CopyPasteOcclusion, spec.copy_paste_probability);
    ctx.count = occ.count = spec.copy_paste_count;
    auto w = stage(StageKind::Weather, spec.weather_probability);
    w.severity_min = spec.weather_severity_min;
    w.severity_max = spec.weather_severity_max;
    c.stages.insert(c.stages.end(), {ctx, occ, w});
  }
  if (v != Variant::Plain) {
    auto sp = stage(StageKind::StrongPolicy, spec.strong_policy_probability);
    sp.op_count = spec.strong_op_count;
    sp.magnitude = spec.strong_magnitude;
    c.stages.push_back(sp);
  }
  c.stages.push_back(stage(StageKind::Weak, 1.0));
  if (v != Variant::Plain) {
    auto cm = stage(StageKind::CutMix, spec.cutmix_probability);
    cm.alpha = spec.cutmix_alpha;
    c.stages.push_back(cm);
  }
  return c;
}

ClassifierConfig ExperimentConfig::classifier() const {
  ClassifierConfig c;
  c.input_height = c.input_width = benchmark.image_side;
  c.hidden = model.hidden;
  c.num_classes = benchmark.num_classes;
  c.input_scale = model.input_scale;
  c.input_norm = model.input_norm;
  return c;
}

void ExperimentConfig::validate() const {
  if (schema_version != kConfigSchemaVersion)
    throw ConfigError("unsupported schema version " + std::to_string(schema_version) +
                          " (expected " + std::to_string(kConfigSchemaVersion) + ")",
                      "schema_version");
  if (output_dir.empty()) throw ConfigError("must not be empty", "output_dir");
  benchmark.validate();
  augmentation.validate();
  if (model.hidden.empty() || model.hidden.size() > 2)
    throw ConfigError("must list one or two widths", "training.model.hidden");
  classifier().validate();
  if (training.max_epochs < 0)
    throw ConfigError("must be >= 0", "training.max_epochs");
  if (training.batch_size < 1)
    throw ConfigError("must be >= 1", "training.batch_size");
  if (!(training.label_smoothing >= 0.0 && training.label_smoothing < 1.0))
    throw ConfigError("must lie in [0, 1)", "training.label_smoothing");
  if (!(training.schedule.base_lr > 0.0))
    throw ConfigError("must be > 0", "training.lr");
  if (training.schedule.warmup_epochs < 0.0)
    throw ConfigError("must be >= 0", "training.warmup_epochs");
  if (!(training.schedule.warmup_start >= 0.0))
    throw ConfigError("must be >= 0", "training.warmup_start");
  if (training.momentum < 0.0 || training.momentum >= 1.0)
    throw ConfigError("must lie in [0, 1)", "training.momentum");
  if (training.weight_decay < 0.0)
    throw ConfigError("must be >= 0", "training.weight_decay");
  if (training.patience < 1) throw ConfigError("must be >= 1", "training.patience");
  ttt.validate();
  if (ensemble.config.anchor_index >=
      static_cast<std::size_t>(ensemble.config.members))
    throw ConfigError("must index a member", "ensemble.anchor_index");
  if (!(ensemble.config.entropy_factor > 0.0 && ensemble.config.entropy_factor <= 1.0))
    throw ConfigError("must lie in (0, 1]", "ensemble.entropy_factor");
  if (ensemble.seeds < 1) throw ConfigError("must be >= 1", "ensemble.seeds");
  if (ensemble.p_values.empty())
    throw ConfigError("must not be empty", "ensemble.p_values");
  for (std::size_t i = 0; i < ensemble.p_values.size(); ++i)
    if (!(ensemble.p_values[i] > 0.5 && ensemble.p_values[i] < 1.0))
      throw ConfigError("must lie in (0.5, 1)",
                        "ensemble.p_values[" + std::to_string(i) + "]");
  if (ensemble.config.members !=
      ensemble.seeds * static_cast<int>(ensemble.p_values.size()))
    throw ConfigError("must equal seeds x number of p_values", "ensemble.members");
  if (crop_side < 0 || crop_side > benchmark.image_side)
    throw ConfigError("must lie in [0, image_side]", "evaluation.crop_side");
}

ExperimentConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("not valid JSON: ") + e.what(), "<root>");
  }
  ExperimentConfig c;
  Fields f(root, "");
  if (!root.contains("schema_version"))
    throw ConfigError("is required", "schema_version");
  f.read("schema_version", c.schema_version);
  if (c.schema_version != kConfigSchemaVersion) c.validate();
  f.read("seed", c.seed);
  f.read("output_dir", c.output_dir);

  if (auto b = f.object("benchmark")) {
    b->read("num_classes", c.benchmark.num_classes);
    b->read("image_side", c.benchmark.image_side);
    b->read("train_size", c.benchmark.train_size);
    b->read("val_size", c.benchmark.val_size);
    b->read("test_size_per_split", c.benchmark.test_size_per_split);
    b->read("aux_backgrounds", c.benchmark.aux_backgrounds);
    b->read("aux_distractors", c.benchmark.aux_distractors);
    if (auto s = b->object("nuisance_strengths")) {
      for (Nuisance n : kOodNuisances) s->read(to_string(n), c.benchmark.nuisance_strengths[n]);
      s->finish();
    }
    b->finish();
  }
  if (auto a = f.object("augmentation")) {
    auto& s = c.augmentation;
    a->read("strong_policy_probability", s.strong_policy_probability);
    a->read("strong_op_count", s.strong_op_count);
    a->read("strong_magnitude", s.strong_magnitude);
    a->read("cutmix_probability", s.cutmix_probability);
    a->read("cutmix_alpha", s.cutmix_alpha);
    a->read("copy_paste_probability", s.copy_paste_probability);
    a->read("copy_paste_count", s.copy_paste_count);
    a->read("weather_probability", s.weather_probability);
    a->read("weather_severity_min", s.weather_severity_min);
    a->read("weather_severity_max", s.weather_severity_max);
    a->finish();
  }
  if (auto t = f.object("training")) {
    if (auto m = t->object("model")) {
      m->read("hidden", c.model.hidden);
      m->read("input_scale", c.model.input_scale);
      std::string norm = input_norm_name(c.model.input_norm);
      m->read("input_norm", norm);
      c.model.input_norm = input_norm_from(norm, m->at("input_norm"));
      m->finish();
    }
    auto& r = c.training;
    t->read("max_epochs", r.max_epochs);
    t->read("batch_size", r.batch_size);
    t->read("label_smoothing", r.label_smoothing);
    t->read("lr", r.schedule.base_lr);
    t->read("warmup_epochs", r.schedule.warmup_epochs);
    t->read("warmup_start", r.schedule.warmup_start);
    t->read("momentum", r.momentum);
    t->read("weight_decay", r.weight_decay);
    t->read("patience", r.patience);
    t->finish();
  }
  if (auto t = f.object("ttt")) {
    auto& s = c.ttt;
    t->read("p", s.p);
    t->read("p_b", s.p_b);
    t->read("refresh_period", s.refresh_period);
    t->read("refresh", s.refresh);
    t->read("sharpen_T", s.sharpen_T);
    t->read("mix_alpha", s.mix_alpha);
    t->read("lambda_u", s.lambda_u);
    t->read("prior_weight", s.prior_weight);
    t->read("lr", s.lr);
    t->read("weight_decay", s.weight_decay);
    t->read("momentum", s.momentum);
    t->read("epochs", s.epochs);
    t->read("aug_views", s.aug_views);
    t->read("batch_size", s.batch_size);
    t->read("strong_op_count", s.strong_op_count);
    t->read("strong_magnitude", s.strong_magnitude);
    t->read("fallback_fraction", s.fallback_fraction);
    t->finish();
  }
  if (auto e = f.object("ensemble")) {
    e->read("anchor_index", c.ensemble.config.anchor_index);
    e->read("entropy_factor", c.ensemble.config.entropy_factor);
    e->read("members", c.ensemble.config.members);
    e->read("seeds", c.ensemble.seeds);
    e->read("p_values", c.ensemble.p_values);
    e->finish();
  }
  if (auto e = f.object("evaluation")) {
    e->read("crop_side", c.crop_side);
    e->finish();
  }
  f.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const ExperimentConfig& c) {
  ojson j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  ojson strengths;
  for (Nuisance n : kOodNuisances) strengths[to_string(n)] = c.benchmark.strength(n);
  j["benchmark"] = {{"num_classes", c.benchmark.num_classes},
                    {"image_side", c.benchmark.image_side},
                    {"train_size", c.benchmark.train_size},
                    {"val_size", c.benchmark.val_size},
                    {"test_size_per_split", c.benchmark.test_size_per_split},
                    {"aux_backgrounds", c.benchmark.aux_backgrounds},
                    {"aux_distractors", c.benchmark.aux_distractors},
                    {"nuisance_strengths", strengths}};
  const auto& a = c.augmentation;
  j["augmentation"] = {{"strong_policy_probability", a.strong_policy_probability},
                       {"strong_op_count", a.strong_op_count},
                       {"strong_magnitude", a.strong_magnitude},
                       {"cutmix_probability", a.cutmix_probability},
                       {"cutmix_alpha", a.cutmix_alpha},
                       {"copy_paste_probability", a.copy_paste_probability},
                       {"copy_paste_count", a.copy_paste_count},
                       {"weather_probability", a.weather_probability},
                       {"weather_severity_min", a.weather_severity_min},
                       {"weather_severity_max", a.weather_severity_max}};
  const auto& r = c.training;
  j["training"] = {{"model",
                    {{"hidden", c.model.hidden},
                     {"input_scale", c.model.input_scale},
                     {"input_norm", input_norm_name(c.model.input_norm)}}},
                   {"max_epochs", r.max_epochs},
                   {"batch_size", r.batch_size},
                   {"label_smoothing", r.label_smoothing},
                   {"lr", r.schedule.base_lr},
                   {"warmup_epochs", r.schedule.warmup_epochs},
                   {"warmup_start", r.schedule.warmup_start},
                   {"momentum", r.momentum},
                   {"weight_decay", r.weight_decay},
                   {"patience", r.patience}};
  const auto& t = c.ttt;
  j["ttt"] = {{"p", t.p},
              {"p_b", t.p_b ? ojson(*t.p_b) : ojson(nullptr)},
              {"refresh_period", t.refresh_period},
              {"refresh", t.refresh},
              {"sharpen_T", t.sharpen_T},
              {"mix_alpha", t.mix_alpha},
              {"lambda_u", t.lambda_u},
              {"prior_weight", t.prior_weight},
              {"lr", t.lr},
              {"weight_decay", t.weight_decay},
              {"momentum", t.momentum},
              {"epochs", t.epochs},
              {"aug_views", t.aug_views},
              {"batch_size", t.batch_size},
              {"strong_op_count", t.strong_op_count},
              {"strong_magnitude", t.strong_magnitude},
              {"fallback_fraction", t.fallback_fraction}};
  j["ensemble"] = {{"anchor_index", c.ensemble.config.anchor_index},
                   {"entropy_factor", c.ensemble.config.entropy_factor},
                   {"members", c.ensemble.config.members},
                   {"seeds", c.ensemble.seeds},
                   {"p_values", c.ensemble.p_values}};
  j["evaluation"] = {{"crop_side", c.crop_side}};
  return j.dump(2) + "\n";
}

SeedStreams SeedStreams::from_root(std::uint64_t root) {
  return {derive_seed(root, "benchmark"), derive_seed(root, "pretrain"),
          derive_seed(root, "ttt-A"), derive_seed(root, "ttt-B"),
          derive_seed(root, "ensemble")};
}

// --------------------------------------------------------------- layout

fs::path RunLayout::test(Nuisance n) const { return test_root() / to_string(n); }

fs::path RunLayout::checkpoint(Variant v) const {
  std::string name = to_string(v);
  for (auto& ch : name) ch = static_cast<char>(std::tolower(ch));
  return root / "checkpoints" / (name + ".ckpt");
}

fs::path RunLayout::pretrain_log(Variant v) const {
  return fs::path(checkpoint(v)).replace_extension(".jsonl");
}

fs::path RunLayout::adapted(const std::string& name) const {
  return root / "adapted" / name;
}

fs::path RunLayout::eval(const std::string& name) const {
  return root / "eval" / name;
}

void RunManifest::write(const fs::path& path) const {
  for (const auto& [role, p] : artifacts)
    if (!fs::exists(p))
      throw IoError("manifest artifact '" + role + "' missing at '" + p + "'");
  ojson j;
  j["command"] = command;
  j["tool_version"] = tool_version;
  j["config"] = ojson::parse(config_json);
  j["artifacts"] = artifacts;
  j["timings_s"] = timings_s;
  write_text(path, j.dump(2) + "\n");
}

// ------------------------------------------------------------- commands

RunManifest cmd_generate(const ExperimentConfig& config, const fs::path& data_dir) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ensure_writable(data_dir);
  BenchSpec spec = config.benchmark;
  spec.rng_seed = SeedStreams::from_root(config.seed).benchmark;
  const Benchmark b = generate(spec);

  RunManifest m;
  m.command = "generate";
  m.config_json = dump_config(config);
  auto put = [&](const LabeledSet& set, const fs::path& rel) {
    export_set(set, data_dir / rel);
    m.artifacts[rel.generic_string()] = (data_dir / rel).string();
  };
  put(b.train, "train");
  put(b.val, "val");
  put(b.iid_test, fs::path("test") / to_string(Nuisance::Iid));
  for (Nuisance n : kOodNuisances) put(b.ood_tests.at(n), fs::path("test") / to_string(n));
  export_backgrounds(b.aux.backgrounds, data_dir / "aux" / "backgrounds");
  b.aux.distractors.save(data_dir / "aux" / "distractors");
  m.artifacts["aux/backgrounds"] = (data_dir / "aux" / "backgrounds").string();
  m.artifacts["aux/distractors"] = (data_dir / "aux" / "distractors").string();
  write_text(data_dir / "benchmark.json", dump_config(config));
  m.artifacts["benchmark_config"] = (data_dir / "benchmark.json").string();
  m.timings_s["generate"] = seconds_since(t0);
  m.write(data_dir / "manifest.json");
  return m;
}

PretrainOutput cmd_pretrain(const ExperimentConfig& config, const fs::path& data_dir,
                            Variant variant, const fs::path& out_dir) {
  config.validate();
  require_dir(data_dir / "train", "dataset");
  require_dir(data_dir / "val", "dataset");
  ensure_writable(out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  const int C = config.benchmark.num_classes;
  const LabeledSet train = import_set(data_dir / "train", C);
  const LabeledSet val = import_set(data_dir / "val", C);
  AugResources res;
  if (variant == Variant::Strong) {
    res.backgrounds = import_backgrounds(data_dir / "aux" / "backgrounds");
    res.distractors = ObjectBank::load(data_dir / "aux" / "distractors");
  }
  const AugPipeline pipe(pipeline_for(variant, config.augmentation), &res);
  const auto streams = SeedStreams::from_root(config.seed);
  TrainRecipe recipe = config.training;
  recipe.seed = derive_seed(streams.pretrain, "order");
  const auto init =
      Classifier::initialized(config.classifier(), derive_seed(streams.pretrain, "init"));

  PretrainOutput out;
  out.result = pretrain(train, val, pipe, recipe, init);
  out.checkpoint = out_dir / RunLayout{}.checkpoint(variant).filename();
  out.log = fs::path(out.checkpoint).replace_extension(".jsonl");
  save_checkpoint({out.result.model, out.result.optim, out.result.best_epoch, ""},
                  out.checkpoint);
  std::string log;
  for (const auto& e : out.result.history) {
    ojson j;
    j["epoch"] = e.epoch;
    j["lr"] = e.lr;
    j["train_loss"] = e.train_loss;
    j["val_accuracy"] = e.val_accuracy;
    log += j.dump() + "\n";
  }
  write_text(out.log, log);

  RunManifest m;
  m.command = "pretrain " + to_string(variant);
  m.config_json = dump_config(config);
  m.artifacts["checkpoint"] = out.checkpoint.string();
  m.artifacts["log"] = out.log.string();
  m.timings_s["pretrain"] = seconds_since(t0);
  m.write(fs::path(out.checkpoint).replace_extension(".manifest.json"));
  return out;
}

std::string AdaptMember::name() const {
  return "ttt_s" + std::to_string(seed_index) + "_p" + fmt("%.2f", p);
}

AdaptOutput cmd_adapt(const ExperimentConfig& config, const fs::path& checkpoint,
                      const fs::path& data_dir, const fs::path& out_dir,
                      const AdaptMember& member) {
  config.validate();
  TTTConfig tc = config.ttt;
  tc.p = member.p;
  tc.validate();
  if (member.seed_index < 0) throw ConfigError("must be >= 0", "ttt.seed_index");
  if (!fs::exists(checkpoint))
    throw IoError("missing checkpoint '" + checkpoint.string() + "'");
  for (Nuisance n : kEvalSplits) require_dir(data_dir / "test" / to_string(n), "test split");
  ensure_writable(out_dir);
  const auto t0 = std::chrono::steady_clock::now();

  const auto pretrained = load_checkpoint(checkpoint, config.classifier()).model;
  std::vector<Image> images;
  for (Nuisance n : kEvalSplits) {
    auto im = import_images(data_dir / "test" / to_string(n));
    for (auto& x : im) images.push_back(std::move(x));
  }
  const auto streams = SeedStreams::from_root(config.seed);
  if (member.seed_index == 0) {
    tc.seed_a = streams.ttt_a;
    tc.seed_b = streams.ttt_b;
  } else {
    const auto k = derive_seed(streams.ensemble, static_cast<std::uint64_t>(member.seed_index));
    tc.seed_a = derive_seed(k, "ttt-A");
    tc.seed_b = derive_seed(k, "ttt-B");
  }

  AdaptOutput out;
  out.dir = out_dir;
  out.result = run_ttt(pretrained, std::span<const Image>(images), tc);
  save_checkpoint({out.result.model_a, std::nullopt, tc.epochs, ""}, out_dir / "model_a.ckpt");
  save_checkpoint({out.result.model_b, std::nullopt, tc.epochs, ""}, out_dir / "model_b.ckpt");
  write_ttt_log(out.result.history, out_dir / "ttt_log.jsonl");
  std::string labels;
  for (const auto& h : out.result.history) {
    labels += std::to_string(h.epoch) + "\t";
    for (std::size_t i = 0; i < h.noisy_labels.size(); ++i)
      labels += (i ? "," : "") + std::to_string(h.noisy_labels[i]);
    labels += "\n";
  }
  write_text(out_dir / kPseudoLabelFile, labels);

  RunManifest m;
  m.command = "adapt " + member.name();
  m.config_json = dump_config(config);
  m.artifacts["source_checkpoint"] = checkpoint.string();
  m.artifacts["model_a"] = (out_dir / "model_a.ckpt").string();
  m.artifacts["model_b"] = (out_dir / "model_b.ckpt").string();
  m.artifacts["log"] = (out_dir / "ttt_log.jsonl").string();
  m.artifacts["pseudo_labels"] = (out_dir / kPseudoLabelFile).string();
  m.timings_s["adapt"] = seconds_since(t0);
  m.write(out_dir / "manifest.json");
  return out;
}

MetricsReport cmd_evaluate(const ExperimentConfig& config,
                           const std::vector<fs::path>& models,
                           const fs::path& data_dir, EvalMode mode,
                           const fs::path& out_dir, const std::string& name) {
  config.validate();
  if (models.empty()) throw ConfigError("no checkpoints given", "models");
  if (mode == EvalMode::Ensemble) config.ensemble.config.validate(models.size());
  else if (models.size() != 1)
    throw ConfigError(to_string(mode) + " takes exactly one checkpoint", "models");
  for (Nuisance n : kEvalSplits) require_dir(data_dir / "test" / to_string(n), "test split");
  ensure_writable(out_dir);
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<LoadedMember> members;
  for (const auto& p : models) members.push_back(load_member(p, config.classifier()));

  std::vector<Image> images;
  std::map<Nuisance, std::vector<int>> truth;
  std::vector<std::pair<Nuisance, std::size_t>> ids;
  for (Nuisance n : kEvalSplits) {
    const auto set = import_set(data_dir / "test" / to_string(n), config.benchmark.num_classes);
    truth[n] = set.labels();
    for (std::size_t i = 0; i < set.size(); ++i) {
      images.push_back(set.samples[i].image);
      ids.emplace_back(n, i);
    }
  }

  std::vector<Vector> probs;
  std::vector<Route> routes(images.size(), Route::Anchor);
  std::optional<double> ens_fraction;
  if (mode == EvalMode::Ensemble) {
    std::vector<std::vector<Vector>> per;
    for (const auto& m : members) per.push_back(member_probs(m, images, true, config.crop_side));
    auto out = adaptive_ensemble(std::span<const std::vector<Vector>>(per),
                                 config.ensemble.config.anchor_index,
                                 config.ensemble.config.entropy_factor);
    probs = std::move(out.probs);
    routes = std::move(out.routes);
    ens_fraction = 0.0;
    for (Route r : routes) *ens_fraction += r == Route::Ensemble;
    *ens_fraction /= static_cast<double>(routes.size());
  } else {
    probs = member_probs(members[0], images, mode == EvalMode::TenCrop, config.crop_side);
  }

  std::map<Nuisance, std::vector<int>> pred;
  std::vector<PredictionRecord> records;
  std::vector<int> all_truth;
  for (std::size_t k = 0; k < images.size(); ++k) {
    const auto [n, i] = ids[k];
    const int label = argmax(probs[k]);
    pred[n].push_back(label);
    all_truth.push_back(truth[n][i]);
    char id[64];
    std::snprintf(id, sizeof id, "%s/%06zu", to_string(n).c_str(), i);
    records.push_back({id, label, probs[k], routes[k]});
  }

  MetricsReport report = evaluate(pred, truth, config.benchmark.num_classes,
                                  name.empty() ? to_string(mode) : name);
  report.ensemble_fraction = ens_fraction;
  std::vector<PlotPoint> plot;
  const auto& anchor_src =
      members[mode == EvalMode::Ensemble ? config.ensemble.config.anchor_index : 0].source;
  if (fs::is_directory(anchor_src) && fs::exists(anchor_src / kPseudoLabelFile)) {
    report.pseudo_label_accuracy =
        pseudo_label_trace(read_pseudo_labels(anchor_src / kPseudoLabelFile), all_truth);
    for (std::size_t e = 0; e < report.pseudo_label_accuracy.size(); ++e)
      plot.push_back({"pseudo_label_accuracy", static_cast<int>(e) + 1,
                      report.pseudo_label_accuracy[e]});
  } else {
    const auto log = fs::path(anchor_src).replace_extension(".jsonl");
    if (fs::exists(log))
      for (const auto& e : read_pretrain_log(log))
        plot.push_back({"val_accuracy", e.epoch, e.val_accuracy});
  }

  write_metrics_json(report, out_dir / "metrics.json");
  write_text(out_dir / "table.txt", format_table(report));
  write_predictions(records, out_dir / "predictions.tsv");
  write_plot_data(plot, out_dir / "plot.tsv");

  RunManifest m;
  m.command = "evaluate " + to_string(mode);
  m.config_json = dump_config(config);
  for (std::size_t i = 0; i < models.size(); ++i)
    m.artifacts["model" + std::to_string(i)] = models[i].string();
  for (const char* f : {"metrics.json", "table.txt", "predictions.tsv", "plot.tsv"})
    m.artifacts[f] = (out_dir / f).string();
  m.timings_s["evaluate"] = seconds_since(t0);
  m.write(out_dir / "manifest.json");
  return report;
}

AblationResult run_ablation(const ExperimentConfig& config, const fs::path& out_dir,
                            bool with_ensemble) {
  config.validate();
  ensure_writable(out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  const RunLayout L{out_dir};
  RunManifest manifest;
  manifest.command = with_ensemble ? "ablate --ensemble" : "ablate";
  manifest.config_json = dump_config(config);
  auto lap = [&](const std::string& what, auto&& fn) {
    const auto s = std::chrono::steady_clock::now();
    fn();
    manifest.timings_s[what] = seconds_since(s);
  };

  lap("generate", [&] { cmd_generate(config, L.data()); });
  AblationResult r;
  for (Variant v : {Variant::Plain, Variant::AutoCutmix, Variant::Strong}) {
    lap("pretrain " + to_string(v),
        [&] { cmd_pretrain(config, L.data(), v, L.checkpoint(v).parent_path()); });
    manifest.artifacts["checkpoint " + to_string(v)] = L.checkpoint(v).string();
    lap("evaluate " + to_string(v), [&] {
      r.chain.push_back(cmd_evaluate(config, {L.checkpoint(v)}, L.data(), EvalMode::Single,
                                     L.eval(to_string(v)), to_string(v)));
    });
  }

  const AdaptMember main{0, config.ttt.p};
  lap("adapt " + main.name(), [&] {
    cmd_adapt(config, L.checkpoint(Variant::Strong), L.data(), L.adapted(main.name()), main);
  });
  lap("evaluate STRONG+TTT", [&] {
    r.chain.push_back(cmd_evaluate(config, {L.adapted(main.name())}, L.data(),
                                   EvalMode::Single, L.eval("STRONG+TTT"), "STRONG+TTT"));
  });
  lap("evaluate STRONG+TTT+TENCROP", [&] {
    r.chain.push_back(cmd_evaluate(config, {L.adapted(main.name())}, L.data(),
                                   EvalMode::TenCrop, L.eval("STRONG+TTT+TENCROP"),
                                   "STRONG+TTT+TENCROP"));
  });
  r.iid_before_ttt = r.chain[2].accuracy(Nuisance::Iid);
  r.iid_after_ttt = r.chain[3].accuracy(Nuisance::Iid);

  if (with_ensemble) {
    std::vector<fs::path> dirs;
    for (int s = 0; s < config.ensemble.seeds; ++s)
      for (double p : config.ensemble.p_values) {
        const AdaptMember m{s, p};
        const auto dir = L.adapted(m.name());
        if (m.name() != main.name())
          lap("adapt " + m.name(),
              [&] { cmd_adapt(config, L.checkpoint(Variant::Strong), L.data(), dir, m); });
        dirs.push_back(dir);
        lap("evaluate " + m.name(), [&] {
          r.members.push_back(cmd_evaluate(config, {dir}, L.data(), EvalMode::TenCrop,
                                           L.eval(m.name()), m.name()));
        });
      }
    lap("evaluate ENSEMBLE", [&] {
      r.ensemble = cmd_evaluate(config, dirs, L.data(), EvalMode::Ensemble,
                                L.eval("ENSEMBLE"), "ENSEMBLE");
    });
  }

  std::vector<MetricsReport> rows = r.chain;
  rows.insert(rows.end(), r.members.begin(), r.members.end());
  if (r.ensemble) rows.push_back(*r.ensemble);
  write_text(out_dir / "ablation_table.txt", format_ablation_table(rows));

  ojson j;
  ojson chain = ojson::array();
  for (const auto& row : rows)
    chain.push_back({{"name", row.name},
                     {"iid", row.accuracy(Nuisance::Iid)},
                     {"ood_average", row.ood_average}});
  j["rows"] = chain;
  const double d = r.iid_after_ttt - r.iid_before_ttt;
  j["iid_before_ttt"] = r.iid_before_ttt;
  j["iid_after_ttt"] = r.iid_after_ttt;
  j["iid_change_sign"] = d < 0 ? "decreased" : d > 0 ? "increased" : "unchanged";
  if (r.ensemble) j["ensemble_fraction"] = r.ensemble->ensemble_fraction.value_or(0.0);
  write_text(out_dir / "ablation.json", j.dump(2) + "\n");

  manifest.artifacts["ablation_table"] = (out_dir / "ablation_table.txt").string();
  manifest.artifacts["ablation_json"] = (out_dir / "ablation.json").string();
  manifest.timings_s["total"] = seconds_since(t0);
  manifest.write(out_dir / "manifest.json");
  return r;
}

}  // namespace oodcv
