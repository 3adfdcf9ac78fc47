#include "oodcv/infer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "oodcv/error.hpp"
#include "oodcv/parallel.hpp"

namespace oodcv {
namespace {

constexpr std::size_t kCropChunk = 128;

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  return out;
}

std::vector<Image> model_views(const Image& img, int crop_side,
                               const ClassifierConfig& cfg) {
  auto crops = tencrop(img, crop_side);
  for (auto& c : crops) c = resize(c, cfg.input_height, cfg.input_width);
  return crops;
}

}  // namespace

// ------------------------------------------------------------------- tencrop

int default_crop_side(int side) {
  OODCV_REQUIRE(side > 0, "default_crop_side: side must be positive");
  return static_cast<int>(std::floor(0.875 * side));
}

std::vector<Image> tencrop(const Image& img, int crop_side) {
  const int h = img.height(), w = img.width();
  OODCV_REQUIRE(crop_side >= 1 && crop_side <= std::min(h, w),
                "tencrop: crop_side must lie in [1, min(H, W)]");
  const int s = crop_side;
  const std::array<std::pair<int, int>, 5> corners = {{
      {0, 0}, {0, w - s}, {h - s, 0}, {h - s, w - s}, {(h - s) / 2, (w - s) / 2}}};
  std::vector<Image> out;
  out.reserve(10);
  for (auto [top, left] : corners) out.push_back(crop(img, top, left, s, s));
  for (int i = 0; i < 5; ++i) out.push_back(flip_horizontal(out[i]));
  return out;
}

Vector predict_tencrop(const Classifier& model, const Image& img,
                       int crop_side) {
  const auto views = model_views(img, crop_side, model.config());
  const auto fr = forward(model, std::span<const Image>(views));
  return fr.probs.rowwise().mean();
}

std::vector<Vector> predict_tencrop(const Classifier& model,
                                    std::span<const Image> images,
                                    int crop_side) {
  std::vector<Vector> out(images.size());
  const std::size_t chunks = (images.size() + kCropChunk - 1) / kCropChunk;
  parallel_for(chunks, [&](std::size_t k) {
    const std::size_t begin = k * kCropChunk;
    const std::size_t end = std::min(images.size(), begin + kCropChunk);
    std::vector<Image> views;
    views.reserve((end - begin) * 10);
    for (std::size_t i = begin; i < end; ++i) {
      const int side = crop_side > 0
                           ? crop_side
                           : default_crop_side(std::min(images[i].height(),
                                                        images[i].width()));
      auto v = model_views(images[i], side, model.config());
      for (auto& x : v) views.push_back(std::move(x));
    }
    const auto fr = forward(model, std::span<const Image>(views));
    for (std::size_t i = begin; i < end; ++i)
      out[i] = fr.probs.middleCols(static_cast<Eigen::Index>((i - begin) * 10), 10)
                   .rowwise()
                   .mean();
  });
  return out;
}

std::vector<Vector> average_probs(std::span<const std::vector<Vector>> sets) {
  OODCV_REQUIRE(!sets.empty(), "average_probs: no probability sets");
  std::vector<Vector> out = sets[0];
  for (std::size_t m = 1; m < sets.size(); ++m) {
    OODCV_REQUIRE(sets[m].size() == out.size(), "average_probs: size mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sets[m][i];
  }
  for (auto& v : out) v /= static_cast<double>(sets.size());
  return out;
}

// ------------------------------------------------------------------ ensemble

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

double entropy(const Vector& probs) {
  return entropy(std::span<const double>(probs.data(), probs.size()));
}

void EnsembleConfig::validate(std::size_t member_count) const {
  if (!(entropy_factor > 0.0 && entropy_factor <= 1.0))
    throw ConfigError("must lie in (0, 1]", "ensemble.entropy_factor");
  if (members < 2) throw ConfigError("must be >= 2", "ensemble.members");
  if (member_count < 2)
    throw ConfigError("needs at least 2 checkpoints", "ensemble.members");
  if (anchor_index >= member_count)
    throw ConfigError("must index a supplied member", "ensemble.anchor_index");
}

std::string to_string(Route r) {
  return r == Route::Anchor ? "anchor" : "ensemble";
}

double EnsembleOutput::ensemble_fraction() const {
  if (routes.empty()) return 0.0;
  std::size_t n = 0;
  for (Route r : routes) n += r == Route::Ensemble;
  return static_cast<double>(n) / static_cast<double>(routes.size());
}

EnsembleOutput adaptive_ensemble(std::span<const std::vector<Vector>> member_probs,
                                 std::size_t anchor_index, double factor) {
  OODCV_REQUIRE(member_probs.size() >= 2, "adaptive_ensemble: needs >= 2 members");
  OODCV_REQUIRE(anchor_index < member_probs.size(),
                "adaptive_ensemble: anchor index out of range");
  const std::size_t n = member_probs[anchor_index].size();
  for (const auto& m : member_probs)
    OODCV_REQUIRE(m.size() == n, "adaptive_ensemble: member size mismatch");

  EnsembleOutput out;
  const auto& anchor = member_probs[anchor_index];
  out.anchor_entropy.resize(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out.anchor_entropy[i] = entropy(anchor[i]);
    sum += out.anchor_entropy[i];
  }
  out.mean_entropy = n ? sum / static_cast<double>(n) : 0.0;

  const double gate = factor * out.mean_entropy;
  out.probs.resize(n);
  out.routes.resize(n);
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (out.anchor_entropy[i] < gate) {
      out.routes[i] = Route::Anchor;
      out.probs[i] = anchor[i];
    } else {
      out.routes[i] = Route::Ensemble;
      Vector acc = member_probs[0][i];
      for (std::size_t m = 1; m < member_probs.size(); ++m) acc += member_probs[m][i];
      out.probs[i] = acc / static_cast<double>(member_probs.size());
    }
    out.labels[i] = argmax(out.probs[i]);
  }
  return out;
}

EnsembleOutput adaptive_ensemble(std::span<const Classifier> members,
                                 std::size_t anchor_index, double factor,
                                 std::span<const Image> images, int crop_side) {
  std::vector<std::vector<Vector>> probs;
  probs.reserve(members.size());
  for (const auto& m : members) probs.push_back(predict_tencrop(m, images, crop_side));
  return adaptive_ensemble(std::span<const std::vector<Vector>>(probs),
                           anchor_index, factor);
}

// ------------------------------------------------------------------- metrics

std::vector<std::string> table_columns() {
  std::vector<std::string> cols;
  for (Nuisance n : kEvalSplits) cols.push_back(display_name(n));
  cols.push_back("Avg.");
  return cols;
}

double MetricsReport::accuracy(Nuisance n) const {
  const auto it = splits.find(n);
  OODCV_REQUIRE(it != splits.end(), "MetricsReport: split missing");
  return it->second.accuracy;
}

MetricsReport evaluate(const std::map<Nuisance, std::vector<int>>& predictions,
                       const std::map<Nuisance, std::vector<int>>& truth,
                       int num_classes, std::string name) {
  OODCV_REQUIRE(num_classes >= 2, "evaluate: num_classes must be >= 2");
  MetricsReport r;
  r.name = std::move(name);
  r.num_classes = num_classes;
  double ood_sum = 0.0;
  for (Nuisance n : kEvalSplits) {
    const auto p = predictions.find(n);
    const auto t = truth.find(n);
    OODCV_REQUIRE(p != predictions.end() && t != truth.end(),
                  "evaluate: missing split '" + to_string(n) + "'");
    OODCV_REQUIRE(p->second.size() == t->second.size(),
                  "evaluate: prediction/label length mismatch on '" +
                      to_string(n) + "'");
    SplitMetrics s;
    s.count = t->second.size();
    s.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
    for (std::size_t i = 0; i < s.count; ++i) {
      const int y = t->second[i], q = p->second[i];
      OODCV_REQUIRE(y >= 0 && y < num_classes && q >= 0 && q < num_classes,
                    "evaluate: label out of range");
      ++s.confusion[y][q];
      s.correct += y == q;
    }
    s.accuracy = s.count ? static_cast<double>(s.correct) / static_cast<double>(s.count)
                         : 0.0;
    if (n != Nuisance::Iid) ood_sum += s.accuracy;
    r.splits[n] = std::move(s);
  }
  r.ood_average = ood_sum / static_cast<double>(kOodNuisances.size());
  return r;
}

std::vector<double> pseudo_label_trace(
    const std::vector<std::vector<int>>& traces, std::span<const int> truth) {
  std::vector<double> out;
  for (const auto& labels : traces) {
    OODCV_REQUIRE(labels.size() == truth.size(), "pseudo_label_trace: size mismatch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += labels[i] == truth[i];
    out.push_back(truth.empty() ? 0.0
                                : static_cast<double>(hits) /
                                      static_cast<double>(truth.size()));
  }
  return out;
}

// ------------------------------------------------------------------- exports

void write_predictions(const std::vector<PredictionRecord>& records,
                       const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "sample_id\tpredicted\tprobs\trouted\n";
  for (const auto& r : records) {
    out << r.sample_id << '\t' << r.predicted << '\t';
    for (Eigen::Index c = 0; c < r.probs.size(); ++c)
      out << (c ? "," : "") << fmt("%.9f", r.probs[c]);
    out << '\t' << to_string(r.route) << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  std::vector<PredictionRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, pred, probs, route;
    if (!std::getline(ss, id, '\t') || !std::getline(ss, pred, '\t') ||
        !std::getline(ss, probs, '\t') || !std::getline(ss, route))
      throw IoError("malformed prediction line in '" + path.string() + "'");
    PredictionRecord r;
    r.sample_id = id;
    r.predicted = std::stoi(pred);
    std::vector<double> v;
    std::istringstream ps(probs);
    for (std::string tok; std::getline(ps, tok, ',');) v.push_back(std::stod(tok));
    r.probs = Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
    if (route == "anchor") r.route = Route::Anchor;
    else if (route == "ensemble") r.route = Route::Ensemble;
    else throw IoError("unknown route '" + route + "' in '" + path.string() + "'");
    out.push_back(std::move(r));
  }
  return out;
}

std::string to_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["name"] = report.name;
  j["num_classes"] = report.num_classes;
  nlohmann::ordered_json splits = nlohmann::ordered_json::object();
  for (Nuisance n : kEvalSplits) {
    const auto it = report.splits.find(n);
    if (it == report.splits.end()) continue;
    splits[to_string(n)] = {{"count", it->second.count},
                            {"correct", it->second.correct},
                            {"accuracy", it->second.accuracy},
                            {"confusion", it->second.confusion}};
  }
  j["splits"] = splits;
  j["ood_average"] = report.ood_average;
  if (report.ensemble_fraction) j["ensemble_fraction"] = *report.ensemble_fraction;
  if (!report.pseudo_label_accuracy.empty())
    j["pseudo_label_accuracy"] = report.pseudo_label_accuracy;
  return j.dump(2) + "\n";
}

void write_metrics_json(const MetricsReport& report,
                        const std::filesystem::path& path) {
  auto out = open_out(path);
  out << to_json(report);
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

namespace {

std::string pad(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

std::vector<std::string> row_values(const MetricsReport& r) {
  std::vector<std::string> v;
  for (Nuisance n : kEvalSplits) v.push_back(fmt("%.2f", 100.0 * r.accuracy(n)));
  v.push_back(fmt("%.2f", 100.0 * r.ood_average));
  return v;
}

}  // namespace

std::string format_table(const MetricsReport& report) {
  const auto cols = table_columns();
  const auto vals = row_values(report);
  std::string head, row;
  for (std::size_t i = 0; i < cols.size(); ++i) {
    const std::size_t w = std::max<std::size_t>(cols[i].size(), 6) + 2;
    head += i + 1 < cols.size() ? pad(cols[i], w) : cols[i];
    row += i + 1 < cols.size() ? pad(vals[i], w) : vals[i];
  }
  return head + "\n" + row + "\n";
}

std::string format_ablation_table(const std::vector<MetricsReport>& rows) {
  std::size_t first = 6;
  for (const auto& r : rows) first = std::max(first, r.name.size());
  first += 2;
  const auto cols = table_columns();
  std::string out = pad("Method", first);
  for (std::size_t i = 0; i < cols.size(); ++i) {
    const std::size_t w = std::max<std::size_t>(cols[i].size(), 6) + 2;
    out += i + 1 < cols.size() ? pad(cols[i], w) : cols[i];
  }
  out += "\n";
  for (const auto& r : rows) {
    const auto vals = row_values(r);
    out += pad(r.name, first);
    for (std::size_t i = 0; i < cols.size(); ++i) {
      const std::size_t w = std::max<std::size_t>(cols[i].size(), 6) + 2;
      out += i + 1 < cols.size() ? pad(vals[i], w) : vals[i];
    }
    out += "\n";
  }
  return out;
}

void write_plot_data(const std::vector<PlotPoint>& points,
                     const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "series\tepoch\tvalue\n";
  for (const auto& p : points)
    out << p.series << '\t' << p.epoch << '\t' << fmt("%.6f", p.value) << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace oodcv
