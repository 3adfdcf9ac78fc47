#include "oodcv/augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "oodcv/error.hpp"

namespace oodcv {
namespace {

constexpr double kPi = 3.14159265358979323846;

std::string index_name(std::size_t i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

// Alpha layer accumulating anti-aliased splats.
class AlphaLayer {
 public:
  AlphaLayer(int h, int w) : h_(h), w_(w), a_(static_cast<std::size_t>(h) * w) {}

  void splat(double y, double x, double weight) {
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const double fy = y - y0;
    const double fx = x - x0;
    add(y0, x0, weight * (1 - fy) * (1 - fx));
    add(y0, x0 + 1, weight * (1 - fy) * fx);
    add(y0 + 1, x0, weight * fy * (1 - fx));
    add(y0 + 1, x0 + 1, weight * fy * fx);
  }

  // Segment from (y, x) with direction (dy, dx) and given length.
  void line(double y, double x, double dy, double dx, double length,
            double weight) {
    const int steps = std::max(1, static_cast<int>(std::ceil(length * 2)));
    for (int i = 0; i <= steps; ++i) {
      const double t = length * i / steps;
      splat(y + t * dy, x + t * dx, weight * 0.5);
    }
  }

  double at(int r, int c) const {
    return a_[static_cast<std::size_t>(r) * w_ + c];
  }

 private:
  void add(int r, int c, double v) {
    if (r < 0 || r >= h_ || c < 0 || c >= w_) return;
    double& a = a_[static_cast<std::size_t>(r) * w_ + c];
    a = std::min(1.0, a + v);
  }

  int h_, w_;
  std::vector<double> a_;
};

// Diamond-square fractal on a (2^k + 1) grid, normalized to [0, 1].
std::vector<double> plasma(int side, double roughness, Rng& rng) {
  int n = 1;
  while (n + 1 < side) n *= 2;
  const int size = n + 1;
  std::vector<double> g(static_cast<std::size_t>(size) * size, 0.0);
  auto at = [&](int r, int c) -> double& {
    return g[static_cast<std::size_t>(r) * size + c];
  };
  at(0, 0) = rng.uniform();
  at(0, n) = rng.uniform();
  at(n, 0) = rng.uniform();
  at(n, n) = rng.uniform();
  double amp = 1.0;
  for (int step = n; step > 1; step /= 2) {
    const int half = step / 2;
    for (int r = half; r < size; r += step) {
      for (int c = half; c < size; c += step) {
        const double avg = (at(r - half, c - half) + at(r - half, c + half) +
                            at(r + half, c - half) + at(r + half, c + half)) /
                           4.0;
        at(r, c) = avg + amp * (rng.uniform() - 0.5);
      }
    }
    for (int r = 0; r < size; r += half) {
      for (int c = (r / half) % 2 == 0 ? half : 0; c < size; c += step) {
        double sum = 0.0;
        int cnt = 0;
        if (r - half >= 0) sum += at(r - half, c), ++cnt;
        if (r + half < size) sum += at(r + half, c), ++cnt;
        if (c - half >= 0) sum += at(r, c - half), ++cnt;
        if (c + half < size) sum += at(r, c + half), ++cnt;
        at(r, c) = sum / cnt + amp * (rng.uniform() - 0.5);
      }
    }
    amp *= roughness;
  }
  const auto [lo, hi] = std::minmax_element(g.begin(), g.end());
  const double span = *hi - *lo;
  std::vector<double> out(static_cast<std::size_t>(side) * side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c)
      out[static_cast<std::size_t>(r) * side + c] =
          span > 0 ? (at(r, c) - *lo) / span : 0.5;
  return out;
}

std::array<double, 6> centered_linear(double a00, double a01, double a10,
                                      double a11, int h, int w) {
  const double cx = (w - 1) / 2.0;
  const double cy = (h - 1) / 2.0;
  return {a00, a01, cx - (a00 * cx + a01 * cy),
          a10, a11, cy - (a10 * cx + a11 * cy)};
}

}  // namespace

SoftLabel one_hot(int class_id, int num_classes) {
  OODCV_REQUIRE(class_id >= 0 && class_id < num_classes,
                "one_hot: class out of range");
  SoftLabel v(static_cast<std::size_t>(num_classes), 0.0);
  v[static_cast<std::size_t>(class_id)] = 1.0;
  return v;
}

// ------------------------------------------------------------- object bank

ObjectBank::ObjectBank(int num_classes) : num_classes_(num_classes) {
  OODCV_REQUIRE(num_classes >= 1, "object bank needs a positive class count");
}

void ObjectBank::add(Image image, Mask mask, std::optional<int> class_id) {
  OODCV_REQUIRE(mask.matches(image), "object bank: image/mask size mismatch");
  OODCV_REQUIRE(mask.total() > 0.0, "object bank: empty cutout");
  if (class_id) {
    OODCV_REQUIRE(*class_id >= 0 && *class_id < num_classes_,
                  "object bank: class id out of range");
  }
  entries_.push_back({std::move(image), std::move(mask), class_id});
}

void ObjectBank::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "objects", ec);
  fs::create_directories(dir / "masks", ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  nlohmann::json index;
  index["version"] = 1;
  index["num_classes"] = num_classes_;
  index["entries"] = nlohmann::json::array();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    const std::string img_rel = "objects/" + index_name(i) + ".png";
    const std::string mask_rel = "masks/" + index_name(i) + ".png";
    write_png(e.image, dir / img_rel);
    write_mask_png(e.mask, dir / mask_rel);
    nlohmann::json rec;
    rec["image"] = img_rel;
    rec["mask"] = mask_rel;
    rec["class_id"] = e.class_id ? nlohmann::json(*e.class_id) : nlohmann::json();
    rec["task_related"] = e.task_related();
    index["entries"].push_back(rec);
  }
  std::ofstream out(dir / "index.json");
  if (!out) throw IoError("cannot write '" + (dir / "index.json").string() + "'");
  out << index.dump(2) << '\n';
}

ObjectBank ObjectBank::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw IoError("cannot read '" + (dir / "index.json").string() + "'");
  nlohmann::json index;
  try {
    in >> index;
    ObjectBank bank(index.at("num_classes").get<int>());
    for (const auto& rec : index.at("entries")) {
      std::optional<int> cls;
      if (!rec.at("class_id").is_null()) cls = rec.at("class_id").get<int>();
      if (rec.at("task_related").get<bool>() != cls.has_value()) {
        throw IoError("object bank '" + dir.string() +
                      "': task_related flag disagrees with class_id");
      }
      bank.add(read_png(dir / rec.at("image").get<std::string>()),
               read_mask_png(dir / rec.at("mask").get<std::string>()), cls);
    }
    return bank;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed object bank index '" + dir.string() +
                  "': " + e.what());
  }
}

// ------------------------------------------------------------ copy-paste

AffineParams sample_affine(const JitterRanges& r, Rng& rng) {
  AffineParams p;
  p.rotation = rng.uniform(-r.rotation, r.rotation);
  p.scale_x = rng.uniform(r.scale_min, r.scale_max);
  p.scale_y = rng.uniform(r.scale_min, r.scale_max);
  p.shear = rng.uniform(-r.shear, r.shear);
  p.flip_h = rng.bernoulli(r.flip_h_prob);
  p.flip_v = rng.bernoulli(r.flip_v_prob);
  return p;
}

ColorParams sample_color(const JitterRanges& r, Rng& rng) {
  ColorParams c;
  c.brightness_delta = rng.uniform(-r.brightness, r.brightness);
  c.contrast_gain = rng.uniform(r.contrast_min, r.contrast_max);
  c.saturation_gain = rng.uniform(r.saturation_min, r.saturation_max);
  c.hue_shift = rng.uniform(-r.hue, r.hue);
  return c;
}

std::pair<Image, int> copy_paste_context_at(const Image& bg,
                                            const BankEntry& obj,
                                            const AffineParams& affine,
                                            const ColorParams& color,
                                            Offset offset) {
  OODCV_REQUIRE(obj.task_related(), "context paste needs a task-related object");
  auto [img, mask] = warp_affine(obj.image, obj.mask, affine);
  img = apply_color(img, color);
  return {composite(img, mask, bg, offset), *obj.class_id};
}

std::pair<Image, int> copy_paste_context(const std::vector<Image>& bg_pool,
                                         const BankEntry& obj,
                                         const AffineParams& affine,
                                         const ColorParams& color, Rng& rng,
                                         const PasteOptions& options) {
  if (bg_pool.empty()) {
    throw ConfigError("context copy-paste needs at least one background",
                      "augmentation.backgrounds");
  }
  OODCV_REQUIRE(obj.task_related(), "context paste needs a task-related object");
  const auto& raw_bg = bg_pool[static_cast<std::size_t>(
      rng.randint(0, static_cast<int>(bg_pool.size()) - 1))];
  const Image bg = resize(raw_bg, obj.image.height(), obj.image.width());

  auto [img, mask] = warp_affine(obj.image, obj.mask, affine);
  img = apply_color(img, color);

  const int h = bg.height();
  const int w = bg.width();
  const Offset centred{(h - img.height()) / 2, (w - img.width()) / 2};
  const int ry = static_cast<int>(std::lround(options.max_offset_fraction * h));
  const int rx = static_cast<int>(std::lround(options.max_offset_fraction * w));
  const double total = mask.total();
  Offset chosen = centred;
  // Rejection sampling keeps the draw uniform over admissible offsets.
  for (int attempt = 0; attempt < 64; ++attempt) {
    const Offset cand{centred.dy + rng.randint(-ry, ry),
                      centred.dx + rng.randint(-rx, rx)};
    if (total <= 0.0 ||
        in_frame_weight(mask, h, w, cand) >= options.min_in_frame * total) {
      chosen = cand;
      break;
    }
  }
  return {composite(img, mask, bg, chosen), *obj.class_id};
}

namespace {

// Warps and jitters the distractor, shrinking it until its mask weight fits
// within cap * area.
std::pair<Image, Mask> prepare_distractor(const BankEntry& distractor,
                                          AffineParams affine,
                                          const ColorParams& color,
                                          double cap_weight) {
  auto [img, mask] = warp_affine(distractor.image, distractor.mask, affine);
  for (int i = 0; i < 6 && mask.total() > cap_weight; ++i) {
    const double f = std::sqrt(cap_weight / mask.total()) * 0.97;
    affine.scale_x = std::max(0.25, affine.scale_x * f);
    affine.scale_y = std::max(0.25, affine.scale_y * f);
    std::tie(img, mask) = warp_affine(distractor.image, distractor.mask, affine);
  }
  return {apply_color(img, color), std::move(mask)};
}

Image place_capped(const Image& base, const Image& img, const Mask& mask,
                   double cap_weight, Offset offset) {
  const double w = in_frame_weight(mask, base.height(), base.width(), offset);
  if (w <= cap_weight) return composite(img, mask, base, offset);
  // Still above the cap after shrinking: attenuate opacity.
  std::vector<double> scaled(mask.data().begin(), mask.data().end());
  const double f = cap_weight / w;
  for (double& v : scaled) v *= f;
  return composite(img, Mask(mask.height(), mask.width(), std::move(scaled)),
                   base, offset);
}

void check_occlusion_inputs(const BankEntry& distractor, double cap) {
  OODCV_REQUIRE(!distractor.task_related(),
                "occlusion paste needs a task-unrelated distractor");
  OODCV_REQUIRE(cap > 0.0 && cap <= 0.6, "coverage_cap must lie in (0, 0.6]");
}

}  // namespace

std::pair<Image, int> copy_paste_occlusion_at(const Image& base, int class_id,
                                              const BankEntry& distractor,
                                              const AffineParams& affine,
                                              const ColorParams& color,
                                              double coverage_cap,
                                              Offset offset) {
  check_occlusion_inputs(distractor, coverage_cap);
  const double cap_weight =
      coverage_cap * static_cast<double>(base.height()) * base.width();
  auto [img, mask] = prepare_distractor(distractor, affine, color, cap_weight);
  return {place_capped(base, img, mask, cap_weight, offset), class_id};
}

std::pair<Image, int> copy_paste_occlusion(const Image& base, int class_id,
                                           const BankEntry& distractor,
                                           const AffineParams& affine,
                                           const ColorParams& color,
                                           double coverage_cap, Rng& rng) {
  check_occlusion_inputs(distractor, coverage_cap);
  const double cap_weight =
      coverage_cap * static_cast<double>(base.height()) * base.width();
  auto [img, mask] = prepare_distractor(distractor, affine, color, cap_weight);
  const Offset offset{
      rng.randint(-img.height() / 2, base.height() - img.height() / 2),
      rng.randint(-img.width() / 2, base.width() - img.width() / 2)};
  return {place_capped(base, img, mask, cap_weight, offset), class_id};
}

// ------------------------------------------------------------------ weather

void WeatherKind::validate() const {
  OODCV_REQUIRE(severity >= 1 && severity <= 5,
                "weather severity must lie in [1, 5]");
}

std::string to_string(Weather w) {
  switch (w) {
    case Weather::Rain: return "rain";
    case Weather::Snow: return "snow";
    case Weather::Fog: return "fog";
    case Weather::Sunshine: return "sunshine";
  }
  return "unknown";
}

Weather weather_from_string(const std::string& name) {
  if (name == "rain") return Weather::Rain;
  if (name == "snow") return Weather::Snow;
  if (name == "fog") return Weather::Fog;
  if (name == "sunshine") return Weather::Sunshine;
  throw ConfigError("unknown weather kind '" + name + "'");
}

double fog_blend_weight(int severity) {
  static constexpr double kWeights[] = {0.3, 0.4, 0.5, 0.6, 0.7};
  OODCV_REQUIRE(severity >= 1 && severity <= 5,
                "weather severity must lie in [1, 5]");
  return kWeights[severity - 1];
}

SunshineGlare sample_sunshine(int height, int width, int severity, Rng& rng) {
  SunshineGlare g;
  g.gain = 1.0 + 0.08 * severity;
  g.amplitude = 0.1 * severity;
  g.sigma = 0.25 * std::max(height, width);
  g.center_y = rng.uniform(0.0, height / 3.0);
  g.center_x = rng.uniform(0.0, static_cast<double>(width - 1));
  return g;
}

Image weather(const Image& img, const WeatherKind& kind, Rng& rng) {
  kind.validate();
  const int h = img.height();
  const int w = img.width();
  const int s = kind.severity;
  const double area_scale = static_cast<double>(h) * w / 1024.0;
  std::vector<double> v(img.data().begin(), img.data().end());
  auto px = [&](int r, int c, int ch) -> double& {
    return v[(static_cast<std::size_t>(r) * w + c) * 3 + ch];
  };

  switch (kind.type) {
    case Weather::Rain: {
      AlphaLayer layer(h, w);
      const double angle = rng.uniform(0.15, 0.35);  // slant from vertical
      const double dy = std::cos(angle);
      const double dx = -std::sin(angle);
      const int count = static_cast<int>(std::lround(6 * s * area_scale));
      const double length = 3.0 + s;
      for (int i = 0; i < count; ++i) {
        const double y0 = rng.uniform(-length, h - 1.0);
        const double x0 = rng.uniform(0.0, w - 1.0 + length);
        layer.line(y0, x0, dy, dx, length, 1.0);
      }
      const double opacity = 0.2 + 0.1 * s;
      constexpr double kBright = 0.85;
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const double a = opacity * layer.at(r, c);
          for (int ch = 0; ch < 3; ++ch) {
            double& x = px(r, c, ch);
            x += a * (kBright - x);
          }
        }
      break;
    }
    case Weather::Snow: {
      AlphaLayer layer(h, w);
      const double angle = rng.uniform(-0.5, 0.5);
      const double dy = std::cos(angle);
      const double dx = std::sin(angle);
      const int count = static_cast<int>(std::lround(5 * s * area_scale));
      const double blur = 1.0 + 0.5 * s;
      for (int i = 0; i < count; ++i) {
        layer.line(rng.uniform(0.0, h - 1.0), rng.uniform(0.0, w - 1.0), dy,
                   dx, blur, 1.0);
      }
      const double opacity = 0.6 + 0.08 * s;
      const double whiten = 0.08 * s;
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const double a = opacity * layer.at(r, c);
          for (int ch = 0; ch < 3; ++ch) {
            double& x = px(r, c, ch);
            x += a * (1.0 - x);
            x += whiten * (1.0 - x);
          }
        }
      break;
    }
    case Weather::Fog: {
      const int side = std::max(h, w);
      const auto field = plasma(side, 0.55, rng);
      const double w_max = fog_blend_weight(s);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const double haze = 0.4 + 0.6 * field[static_cast<std::size_t>(r) * side + c];
          const double a = w_max * haze;
          for (int ch = 0; ch < 3; ++ch) {
            double& x = px(r, c, ch);
            x += a * (1.0 - x);
          }
        }
      break;
    }
    case Weather::Sunshine: {
      const auto g = sample_sunshine(h, w, s, rng);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const double d2 = (r - g.center_y) * (r - g.center_y) +
                            (c - g.center_x) * (c - g.center_x);
          const double glare =
              g.amplitude * std::exp(-d2 / (2.0 * g.sigma * g.sigma));
          for (int ch = 0; ch < 3; ++ch) {
            double& x = px(r, c, ch);
            x = x * g.gain + glare;
          }
        }
      break;
    }
  }
  return Image(h, w, std::move(v));
}

// ------------------------------------------------------------------- cutmix

void CutMixParams::validate() const {
  OODCV_REQUIRE(alpha > 0.0, "cutmix alpha must be positive");
}

std::pair<Image, SoftLabel> cutmix_box(const Image& a, const SoftLabel& label_a,
                                       const Image& b, const SoftLabel& label_b,
                                       Box box) {
  OODCV_REQUIRE(a.same_shape(b), "cutmix: image size mismatch");
  OODCV_REQUIRE(label_a.size() == label_b.size(), "cutmix: label size mismatch");
  const int r0 = std::clamp(box.top, 0, a.height());
  const int r1 = std::clamp(box.top + box.h, 0, a.height());
  const int c0 = std::clamp(box.left, 0, a.width());
  const int c1 = std::clamp(box.left + box.w, 0, a.width());
  Image out = a;
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c)
      for (int ch = 0; ch < 3; ++ch) out.set(r, c, ch, b.at(r, c, ch));
  const double replaced = static_cast<double>(r1 - r0) * (c1 - c0);
  const double lam = 1.0 - replaced / (static_cast<double>(a.height()) * a.width());
  SoftLabel mixed(label_a.size());
  for (std::size_t k = 0; k < mixed.size(); ++k)
    mixed[k] = lam * label_a[k] + (1.0 - lam) * label_b[k];
  return {std::move(out), std::move(mixed)};
}

std::pair<Image, SoftLabel> cutmix(const Image& a, const SoftLabel& label_a,
                                   const Image& b, const SoftLabel& label_b,
                                   double alpha, Rng& rng) {
  OODCV_REQUIRE(alpha > 0.0, "cutmix alpha must be positive");
  const double lam = rng.beta(alpha, alpha);
  const double ratio = std::sqrt(1.0 - lam);
  const int ch = static_cast<int>(std::lround(a.height() * ratio));
  const int cw = static_cast<int>(std::lround(a.width() * ratio));
  const int cy = rng.randint(0, a.height() - 1);
  const int cx = rng.randint(0, a.width() - 1);
  return cutmix_box(a, label_a, b, label_b,
                    {cy - ch / 2, cx - cw / 2, ch, cw});
}

std::pair<Image, SoftLabel> cutmix(const Image& a, const SoftLabel& label_a,
                                   const Image& b, const SoftLabel& label_b,
                                   const CutMixParams& params) {
  params.validate();
  Rng rng(params.rng_seed);
  return cutmix(a, label_a, b, label_b, params.alpha, rng);
}

// ------------------------------------------------------------------- policy

void AugPolicy::validate() const {
  OODCV_REQUIRE(magnitude >= 0 && magnitude <= 10,
                "policy magnitude must lie in [0, 10]");
  OODCV_REQUIRE(op_count >= 0, "policy op_count must be non-negative");
}

int weak_max_shift(int side) { return side / 8; }

Image posterize(const Image& img, int bits) {
  OODCV_REQUIRE(bits >= 1 && bits <= 8, "posterize bits must lie in [1, 8]");
  const long keep = ~((1L << (8 - bits)) - 1) & 0xff;
  std::vector<double> v(img.data().begin(), img.data().end());
  for (double& x : v) x = (std::lround(x * 255.0) & keep) / 255.0;
  return Image(img.height(), img.width(), std::move(v));
}

Image solarize(const Image& img, double threshold) {
  std::vector<double> v(img.data().begin(), img.data().end());
  for (double& x : v)
    if (x > threshold) x = 1.0 - x;
  return Image(img.height(), img.width(), std::move(v));
}

Image equalize(const Image& img) {
  const std::size_t n = static_cast<std::size_t>(img.height()) * img.width();
  std::vector<double> v(img.data().begin(), img.data().end());
  for (int ch = 0; ch < 3; ++ch) {
    std::array<std::size_t, 256> hist{};
    for (std::size_t i = 0; i < n; ++i) ++hist[std::lround(v[i * 3 + ch] * 255.0)];
    std::array<std::size_t, 256> cdf{};
    std::size_t run = 0;
    for (int b = 0; b < 256; ++b) cdf[b] = run += hist[b];
    std::size_t cdf_min = 0;
    for (int b = 0; b < 256; ++b)
      if (hist[b] != 0) {
        cdf_min = cdf[b];
        break;
      }
    if (cdf_min == n) continue;  // constant channel
    for (std::size_t i = 0; i < n; ++i) {
      const auto b = std::lround(v[i * 3 + ch] * 255.0);
      v[i * 3 + ch] = static_cast<double>(cdf[b] - cdf_min) / (n - cdf_min);
    }
  }
  return Image(img.height(), img.width(), std::move(v));
}

Image sharpness(const Image& img, double factor) {
  const int h = img.height();
  const int w = img.width();
  Image out = img;
  for (int r = 1; r + 1 < h; ++r)
    for (int c = 1; c + 1 < w; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        double sum = 4.0 * img.at(r, c, ch);
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) sum += img.at(r + dr, c + dc, ch);
        const double blur = sum / 13.0;
        out.set(r, c, ch, blur + factor * (img.at(r, c, ch) - blur));
      }
  return out;
}

Image shift(const Image& img, int dy, int dx) {
  if (dy == 0 && dx == 0) return img;
  Image out(img.height(), img.width());
  for (int r = 0; r < img.height(); ++r) {
    const int sr = r - dy;
    if (sr < 0 || sr >= img.height()) continue;
    for (int c = 0; c < img.width(); ++c) {
      const int sc = c - dx;
      if (sc < 0 || sc >= img.width()) continue;
      for (int ch = 0; ch < 3; ++ch) out.set(r, c, ch, img.at(sr, sc, ch));
    }
  }
  return out;
}

Image apply_strong_op(const Image& img, StrongOp op, int magnitude, Rng& rng) {
  OODCV_REQUIRE(magnitude >= 0 && magnitude <= 10,
                "policy magnitude must lie in [0, 10]");
  const double s = magnitude / 10.0;
  const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
  const int h = img.height();
  const int w = img.width();
  switch (op) {
    case StrongOp::Rotate: {
      AffineParams p;
      p.rotation = sign * s * kPi / 6.0;
      return warp_affine(img, p);
    }
    case StrongOp::ShearX:
      return warp_matrix(img, centered_linear(1.0, sign * s * 0.3, 0.0, 1.0, h, w));
    case StrongOp::ShearY:
      return warp_matrix(img, centered_linear(1.0, 0.0, sign * s * 0.3, 1.0, h, w));
    case StrongOp::TranslateX:
      return shift(img, 0, static_cast<int>(std::lround(sign * s * 0.3 * w)));
    case StrongOp::TranslateY:
      return shift(img, static_cast<int>(std::lround(sign * s * 0.3 * h)), 0);
    case StrongOp::Brightness: {
      ColorParams c;
      c.brightness_delta = sign * s * 0.3;
      return apply_color(img, c);
    }
    case StrongOp::Contrast: {
      ColorParams c;
      c.contrast_gain = std::max(0.1, 1.0 + sign * s * 0.9);
      return apply_color(img, c);
    }
    case StrongOp::Saturation: {
      ColorParams c;
      c.saturation_gain = std::max(0.1, 1.0 + sign * s * 0.9);
      return apply_color(img, c);
    }
    case StrongOp::Posterize:
      return posterize(img, 8 - static_cast<int>(std::lround(6.0 * s)));
    case StrongOp::Solarize:
      return solarize(img, 1.0 - s);
    case StrongOp::Sharpness:
      return sharpness(img, 1.0 + sign * s * 0.9);
    case StrongOp::Equalize:
      return equalize(img);
  }
  return img;
}

Image apply_policy(const Image& img, const AugPolicy& policy, Rng& rng) {
  policy.validate();
  if (policy.kind == AugPolicy::Kind::Weak) {
    const bool flip = rng.bernoulli(0.5);
    const int my = weak_max_shift(img.height());
    const int mx = weak_max_shift(img.width());
    const int dy = rng.randint(-my, my);
    const int dx = rng.randint(-mx, mx);
    if (!flip && dy == 0 && dx == 0) return img;
    return shift(flip ? flip_horizontal(img) : img, dy, dx);
  }
  Image out = img;
  for (int i = 0; i < policy.op_count; ++i) {
    const auto op = static_cast<StrongOp>(rng.randint(0, kStrongOpCount - 1));
    out = apply_strong_op(out, op, policy.magnitude, rng);
  }
  return out;
}

Image apply_policy(const Image& img, const AugPolicy& policy) {
  Rng rng(policy.rng_seed);
  return apply_policy(img, policy, rng);
}

// ----------------------------------------------------------------- pipeline

std::string to_string(StageKind kind) {
  switch (kind) {
    case StageKind::Weak: return "weak";
    case StageKind::StrongPolicy: return "strong_policy";
    case StageKind::CopyPasteContext: return "copy_paste_context";
    case StageKind::CopyPasteOcclusion: return "copy_paste_occlusion";
    case StageKind::Weather: return "weather";
    case StageKind::CutMix: return "cutmix";
  }
  return "unknown";
}

StageKind stage_kind_from_string(const std::string& name) {
  for (auto k : {StageKind::Weak, StageKind::StrongPolicy,
                 StageKind::CopyPasteContext, StageKind::CopyPasteOcclusion,
                 StageKind::Weather, StageKind::CutMix}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown augmentation stage '" + name + "'");
}

AugPipeline::AugPipeline(PipelineConfig config, const AugResources* resources)
    : config_(std::move(config)), resources_(resources) {
  for (std::size_t i = 0; i < config_.stages.size(); ++i) {
    const auto& st = config_.stages[i];
    const std::string field = "augmentation.stages[" + std::to_string(i) + "]";
    if (st.probability < 0.0 || st.probability > 1.0)
      throw ConfigError("probability must lie in [0, 1]", field + ".probability");
    if (st.kind == StageKind::CopyPasteContext &&
        (resources_ == nullptr || resources_->backgrounds.empty()))
      throw ConfigError("context copy-paste needs task-unrelated backgrounds",
                        field);
    if (st.kind == StageKind::CopyPasteOcclusion &&
        (resources_ == nullptr || resources_->distractors.empty()))
      throw ConfigError("occlusion copy-paste needs task-unrelated objects",
                        field);
    if (st.kind == StageKind::CopyPasteOcclusion &&
        !(st.coverage_cap > 0.0 && st.coverage_cap <= 0.6))
      throw ConfigError("coverage_cap must lie in (0, 0.6]",
                        field + ".coverage_cap");
    if (st.kind == StageKind::Weather &&
        !(1 <= st.severity_min && st.severity_min <= st.severity_max &&
          st.severity_max <= 5))
      throw ConfigError("severity range must lie within [1, 5]", field);
    if (st.kind == StageKind::CutMix && !(st.alpha > 0.0))
      throw ConfigError("alpha must be positive", field + ".alpha");
    if (st.kind == StageKind::StrongPolicy &&
        !(st.magnitude >= 0 && st.magnitude <= 10 && st.op_count >= 0))
      throw ConfigError("magnitude must lie in [0, 10]", field + ".magnitude");
  }
}

AugSample AugPipeline::apply(AugSample sample, Rng& rng) const {
  for (const auto& st : config_.stages) {
    if (st.kind == StageKind::CutMix) continue;
    if (!rng.bernoulli(st.probability)) continue;
    switch (st.kind) {
      case StageKind::Weak:
        sample.image = apply_policy(sample.image, AugPolicy{}, rng);
        break;
      case StageKind::StrongPolicy: {
        AugPolicy p;
        p.kind = AugPolicy::Kind::Strong;
        p.op_count = st.op_count;
        p.magnitude = st.magnitude;
        sample.image = apply_policy(sample.image, p, rng);
        break;
      }
      case StageKind::CopyPasteContext: {
        const BankEntry obj{sample.image, sample.mask, sample.class_id};
        const auto affine = sample_affine(config_.jitter, rng);
        const auto color = sample_color(config_.jitter, rng);
        sample.image = copy_paste_context(resources_->backgrounds, obj, affine,
                                          color, rng, config_.paste)
                           .first;
        break;
      }
      case StageKind::CopyPasteOcclusion: {
        const auto& pool = resources_->distractors.entries();
        for (int k = 0; k < st.count; ++k) {
          const auto& d = pool[static_cast<std::size_t>(
              rng.randint(0, static_cast<int>(pool.size()) - 1))];
          const auto affine = sample_affine(config_.jitter, rng);
          const auto color = sample_color(config_.jitter, rng);
          sample.image = copy_paste_occlusion(sample.image, sample.class_id, d,
                                              affine, color, st.coverage_cap,
                                              rng)
                             .first;
        }
        break;
      }
      case StageKind::Weather: {
        WeatherKind kind;
        kind.type = static_cast<Weather>(rng.randint(0, 3));
        kind.severity = rng.randint(st.severity_min, st.severity_max);
        sample.image = weather(sample.image, kind, rng);
        break;
      }
      case StageKind::CutMix:
        break;
    }
  }
  return sample;
}

std::vector<AugSample> AugPipeline::apply_batch(std::vector<AugSample> batch,
                                                Rng& rng) const {
  for (auto& s : batch) s = apply(std::move(s), rng);
  for (const auto& st : config_.stages) {
    if (st.kind != StageKind::CutMix || batch.empty()) continue;
    const std::vector<AugSample> partners = batch;
    for (auto& s : batch) {
      if (!rng.bernoulli(st.probability)) continue;
      const auto& p = partners[static_cast<std::size_t>(
          rng.randint(0, static_cast<int>(partners.size()) - 1))];
      std::tie(s.image, s.label) =
          cutmix(s.image, s.label, p.image, p.label, st.alpha, rng);
    }
  }
  return batch;
}

}  // namespace oodcv
