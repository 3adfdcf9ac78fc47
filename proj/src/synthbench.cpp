#include "oodcv/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "oodcv/error.hpp"
#include "oodcv/parallel.hpp"
#include "oodcv/rng.hpp"

namespace oodcv {
namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kDeg = kPi / 180.0;

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0);
  if (h < 0) h += 1.0;
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a.r + t * (b.r - a.r), a.g + t * (b.g - a.g), a.b + t * (b.b - a.b)};
}

void put(Image& img, int r, int c, const Rgb& v) {
  img.set(r, c, 0, v.r);
  img.set(r, c, 1, v.g);
  img.set(r, c, 2, v.b);
}

Rgb muted(Rng& rng) {
  return hsv(rng.uniform(), rng.uniform(0.2, 0.5), rng.uniform(0.15, 0.45));
}
Rgb vivid(Rng& rng) {
  return hsv(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.3, 1.0));
}
Rgb any_color(Rng& rng) {
  return hsv(rng.uniform(), rng.uniform(0.0, 1.0), rng.uniform(0.05, 1.0));
}

// Smooth value-noise field in [0, 1] (bilinear upsample of a coarse grid).
std::vector<double> smooth_field(int side, int cells, Rng& rng) {
  std::vector<double> grid(static_cast<std::size_t>(cells + 1) * (cells + 1));
  for (double& g : grid) g = rng.uniform();
  std::vector<double> out(static_cast<std::size_t>(side) * side);
  for (int r = 0; r < side; ++r) {
    const double gy = static_cast<double>(r) / (side - 1) * cells;
    const int y0 = std::min(static_cast<int>(gy), cells - 1);
    const double fy = gy - y0;
    for (int c = 0; c < side; ++c) {
      const double gx = static_cast<double>(c) / (side - 1) * cells;
      const int x0 = std::min(static_cast<int>(gx), cells - 1);
      const double fx = gx - x0;
      auto g = [&](int y, int x) {
        return grid[static_cast<std::size_t>(y) * (cells + 1) + x];
      };
      const double top = g(y0, x0) + fx * (g(y0, x0 + 1) - g(y0, x0));
      const double bot = g(y0 + 1, x0) + fx * (g(y0 + 1, x0 + 1) - g(y0 + 1, x0));
      out[static_cast<std::size_t>(r) * side + c] = top + fy * (bot - top);
    }
  }
  return out;
}

// ------------------------------------------------------------ backgrounds

constexpr int kIidBackgroundFamilies = 3;  // families 0..2; 3..5 held out

Image draw_background(int family, std::uint64_t seed, int side) {
  Rng rng(seed);
  Image img(side, side);
  switch (family) {
    case 0:
    case 1: {  // vertical / horizontal gradient
      const Rgb a = muted(rng), b = muted(rng);
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
          const double t = static_cast<double>(family == 0 ? r : c) / (side - 1);
          put(img, r, c, mix(a, b, t));
        }
      break;
    }
    case 2: {  // smooth blotches
      const Rgb a = muted(rng), b = muted(rng);
      const auto f = smooth_field(side, 3, rng);
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c)
          put(img, r, c, mix(a, b, f[static_cast<std::size_t>(r) * side + c]));
      break;
    }
    case 3: {  // checkerboard
      const Rgb a = vivid(rng), b = vivid(rng);
      const int cell = rng.randint(3, 6);
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c)
          put(img, r, c, ((r / cell + c / cell) % 2 == 0) ? a : b);
      break;
    }
    case 4: {  // clutter of rectangles
      const Rgb base = vivid(rng);
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) put(img, r, c, base);
      const int n = rng.randint(6, 10);
      for (int k = 0; k < n; ++k) {
        const Rgb col = vivid(rng);
        const int h = rng.randint(3, side / 2), w = rng.randint(3, side / 2);
        const int top = rng.randint(0, side - h), left = rng.randint(0, side - w);
        for (int r = top; r < top + h; ++r)
          for (int c = left; c < left + w; ++c) put(img, r, c, col);
      }
      break;
    }
    default: {  // diagonal stripes
      const Rgb a = vivid(rng), b = vivid(rng);
      const int period = rng.randint(4, 8);
      const int dir = rng.bernoulli(0.5) ? 1 : -1;
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
          const int k = ((r + dir * c) % period + period) % period;
          put(img, r, c, k < period / 2 ? a : b);
        }
      break;
    }
  }
  return img;
}

// Generic task-unrelated scenes for the copy-paste pool.
Image draw_aux_background(std::uint64_t seed, int side) {
  Rng rng(seed);
  Image img(side, side);
  const int family = rng.randint(0, 3);
  switch (family) {
    case 0: {
      const Rgb a = any_color(rng), b = any_color(rng);
      const auto f = smooth_field(side, rng.randint(2, 6), rng);
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c)
          put(img, r, c, mix(a, b, f[static_cast<std::size_t>(r) * side + c]));
      break;
    }
    case 1: {
      const Rgb a = any_color(rng), b = any_color(rng);
      const double theta = rng.uniform(0.0, kPi);
      const double period = rng.uniform(3.0, 10.0);
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
          const double u = c * std::cos(theta) + r * std::sin(theta);
          put(img, r, c, std::fmod(u / period + 100.0, 1.0) < 0.5 ? a : b);
        }
      break;
    }
    case 2: {
      const Rgb base = any_color(rng);
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) put(img, r, c, base);
      const int n = rng.randint(8, 15);
      for (int k = 0; k < n; ++k) {
        const Rgb col = any_color(rng);
        const double cy = rng.uniform(0, side), cx = rng.uniform(0, side);
        const double rad = rng.uniform(2.0, side / 4.0);
        for (int r = 0; r < side; ++r)
          for (int c = 0; c < side; ++c)
            if ((r - cy) * (r - cy) + (c - cx) * (c - cx) < rad * rad)
              put(img, r, c, col);
      }
      break;
    }
    default: {
      const Rgb a = any_color(rng), b = any_color(rng);
      const double theta = rng.uniform(0.0, 2 * kPi);
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
          const double u = ((c - side / 2.0) * std::cos(theta) +
                            (r - side / 2.0) * std::sin(theta)) /
                               side + 0.5;
          put(img, r, c, mix(a, b, std::clamp(u, 0.0, 1.0)));
        }
      break;
    }
  }
  return img;
}

// ------------------------------------------------------------------ shapes

using Polygon = std::vector<std::array<double, 2>>;  // (x, y)

Polygon densify(const Polygon& p, int per_edge) {
  Polygon out;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& a = p[i];
    const auto& b = p[(i + 1) % p.size()];
    for (int k = 0; k < per_edge; ++k) {
      const double t = static_cast<double>(k) / per_edge;
      out.push_back({a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])});
    }
  }
  return out;
}

Polygon unit_shape(ShapeClass cls) {
  Polygon p;
  switch (cls) {
    case ShapeClass::Circle:
      for (int k = 0; k < 48; ++k)
        p.push_back({std::cos(2 * kPi * k / 48), std::sin(2 * kPi * k / 48)});
      return p;
    case ShapeClass::Square:
      return densify({{-0.85, -0.85}, {0.85, -0.85}, {0.85, 0.85}, {-0.85, 0.85}}, 12);
    case ShapeClass::Triangle:
      for (int k = 0; k < 3; ++k) {
        const double a = -kPi / 2 + 2 * kPi * k / 3;
        p.push_back({1.1 * std::cos(a), 1.1 * std::sin(a) + 0.15});
      }
      return densify(p, 16);
    case ShapeClass::Star:
      for (int k = 0; k < 10; ++k) {
        const double a = -kPi / 2 + kPi * k / 5;
        const double rad = (k % 2 == 0) ? 1.1 : 0.45;
        p.push_back({rad * std::cos(a), rad * std::sin(a)});
      }
      return densify(p, 5);
    case ShapeClass::Cross: {
      const double w = 0.33, l = 1.0;
      return densify({{-w, -l}, {w, -l}, {w, -w}, {l, -w}, {l, w}, {w, w},
                      {w, l}, {-w, l}, {-w, w}, {-l, w}, {-l, -w}, {-w, -w}},
                     4);
    }
  }
  return p;
}

bool inside(const Polygon& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > y) != (b[1] > y) &&
        x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0])
      in = !in;
  }
  return in;
}

// 4x4 supersampled coverage.
Mask rasterize(const Polygon& poly, int side) {
  double x0 = 1e9, x1 = -1e9, y0 = 1e9, y1 = -1e9;
  for (const auto& v : poly) {
    x0 = std::min(x0, v[0]), x1 = std::max(x1, v[0]);
    y0 = std::min(y0, v[1]), y1 = std::max(y1, v[1]);
  }
  Mask m(side, side);
  const int r0 = std::max(0, static_cast<int>(std::floor(y0)) - 1);
  const int r1 = std::min(side - 1, static_cast<int>(std::ceil(y1)) + 1);
  const int c0 = std::max(0, static_cast<int>(std::floor(x0)) - 1);
  const int c1 = std::min(side - 1, static_cast<int>(std::ceil(x1)) + 1);
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx)
          hits += inside(poly, c - 0.375 + 0.25 * sx, r - 0.375 + 0.25 * sy);
      m.set(r, c, hits / 16.0);
    }
  return m;
}

Polygon object_polygon(const SampleFactors& f) {
  Polygon p = unit_shape(static_cast<ShapeClass>(f.label));
  const double ce = std::cos(f.elongation_angle), se = std::sin(f.elongation_angle);
  const double cr = std::cos(f.rotation), sr = std::sin(f.rotation);
  for (auto& v : p) {
    double x = v[0], y = v[1];
    if (f.wobble != 0.0) {
      const double theta = std::atan2(y, x);
      const double k = 1.0 + f.wobble * (std::sin(2 * theta + f.wobble_phase[0]) +
                                         std::sin(3 * theta + f.wobble_phase[1]) +
                                         std::sin(5 * theta + f.wobble_phase[2])) /
                                 3.0;
      x *= k, y *= k;
    }
    if (f.elongation != 1.0) {
      double u = ce * x + se * y, w = -se * x + ce * y;
      u *= f.elongation, w /= f.elongation;
      x = ce * u - se * w, y = se * u + ce * w;
    }
    const double xr = cr * x - sr * y, yr = sr * x + cr * y;
    v = {f.center_x + f.radius * xr, f.center_y + f.radius * yr};
  }
  return p;
}

Image draw_fill(int family, std::uint64_t seed, int side) {
  Rng rng(seed);
  Image img(side, side);
  if (family == 0) {
    // In-distribution: warm-to-green solid with light shading.
    const Rgb base = hsv(rng.uniform(0.0, 150.0 / 360.0), rng.uniform(0.6, 1.0),
                         rng.uniform(0.6, 0.95));
    const double theta = rng.uniform(0.0, 2 * kPi);
    for (int r = 0; r < side; ++r)
      for (int c = 0; c < side; ++c) {
        const double t = 0.08 * ((c - side / 2.0) * std::cos(theta) +
                                 (r - side / 2.0) * std::sin(theta)) /
                         (side / 2.0);
        put(img, r, c, {base.r + t, base.g + t, base.b + t});
      }
    return img;
  }
  auto cool = [&] {
    return hsv(rng.uniform(180.0 / 360.0, 330.0 / 360.0), rng.uniform(0.4, 1.0),
               rng.uniform(0.35, 1.0));
  };
  const Rgb a = cool(), b = cool();
  const int period = rng.randint(3, 5);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      bool first = true;
      if (family == 1) first = ((r + c) % period) < (period + 1) / 2;
      else if (family == 2) first = ((r / 2 + c / 2) % 2) == 0;
      else first = rng.bernoulli(0.5);
      put(img, r, c, first ? a : b);
    }
  return img;
}

void check_label(const BenchSpec& spec, int label) {
  OODCV_REQUIRE(label >= 0 && label < spec.num_classes, "label out of range");
}

}  // namespace

// ------------------------------------------------------------------ naming

std::string to_string(Nuisance n) {
  switch (n) {
    case Nuisance::Iid: return "iid";
    case Nuisance::Shape: return "shape";
    case Nuisance::Pose: return "pose";
    case Nuisance::Context: return "context";
    case Nuisance::Texture: return "texture";
    case Nuisance::Occlusion: return "occlusion";
    case Nuisance::Weather: return "weather";
  }
  return "unknown";
}

std::string display_name(Nuisance n) {
  switch (n) {
    case Nuisance::Iid: return "IID";
    case Nuisance::Shape: return "Shape";
    case Nuisance::Pose: return "Pose";
    case Nuisance::Context: return "Context";
    case Nuisance::Texture: return "Texture";
    case Nuisance::Occlusion: return "Occlusion";
    case Nuisance::Weather: return "Weather";
  }
  return "Unknown";
}

Nuisance nuisance_from_string(const std::string& tag) {
  for (auto n : {Nuisance::Iid, Nuisance::Shape, Nuisance::Pose,
                 Nuisance::Context, Nuisance::Texture, Nuisance::Occlusion,
                 Nuisance::Weather}) {
    if (to_string(n) == tag) return n;
  }
  throw ConfigError("unknown nuisance tag '" + tag + "'");
}

// -------------------------------------------------------------------- spec

void BenchSpec::validate() const {
  if (num_classes < 2 || num_classes > kShapeClassCount)
    throw ConfigError("must lie in [2, 5]", "benchmark.num_classes");
  if (image_side < Image::kMinSide)
    throw ConfigError("must be >= 8", "benchmark.image_side");
  if (train_size < 0) throw ConfigError("must be >= 0", "benchmark.train_size");
  if (val_size < 0) throw ConfigError("must be >= 0", "benchmark.val_size");
  if (test_size_per_split < 0)
    throw ConfigError("must be >= 0", "benchmark.test_size_per_split");
  if (aux_backgrounds < 1)
    throw ConfigError("must be >= 1", "benchmark.aux_backgrounds");
  if (aux_distractors < 1)
    throw ConfigError("must be >= 1", "benchmark.aux_distractors");
  for (const auto& [n, s] : nuisance_strengths) {
    if (n == Nuisance::Iid)
      throw ConfigError("iid has no strength", "benchmark.nuisance_strengths");
    if (!(s >= 0.0 && s <= 1.0))
      throw ConfigError("must lie in [0, 1]",
                        "benchmark.nuisance_strengths." + to_string(n));
  }
}

double BenchSpec::strength(Nuisance n) const {
  const auto it = nuisance_strengths.find(n);
  return it == nuisance_strengths.end() ? 0.0 : it->second;
}

std::vector<int> LabeledSet::labels() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

std::vector<Image> LabeledSet::images() const {
  std::vector<Image> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.image);
  return out;
}

std::vector<std::size_t> LabeledSet::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (const auto& s : samples) ++counts[static_cast<std::size_t>(s.label)];
  return counts;
}

// ----------------------------------------------------------------- factors

std::vector<Nuisance> differing_factors(const SampleFactors& a,
                                        const SampleFactors& b) {
  std::vector<Nuisance> out;
  if (a.elongation != b.elongation || a.elongation_angle != b.elongation_angle ||
      a.wobble != b.wobble || a.wobble_phase != b.wobble_phase)
    out.push_back(Nuisance::Shape);
  if (a.rotation != b.rotation) out.push_back(Nuisance::Pose);
  if (a.background_family != b.background_family ||
      a.background_seed != b.background_seed)
    out.push_back(Nuisance::Context);
  if (a.fill_family != b.fill_family || a.fill_seed != b.fill_seed)
    out.push_back(Nuisance::Texture);
  if (a.occluders != b.occluders || a.occluder_seed != b.occluder_seed)
    out.push_back(Nuisance::Occlusion);
  if (a.weathered != b.weathered || a.weather.type != b.weather.type ||
      a.weather.severity != b.weather.severity ||
      a.weather_seed != b.weather_seed)
    out.push_back(Nuisance::Weather);
  return out;
}

SampleFactors draw_base_factors(const BenchSpec& spec, int label,
                                std::uint64_t sample_seed) {
  check_label(spec, label);
  Rng rng(derive_seed(sample_seed, "base"));
  const double side = spec.image_side;
  SampleFactors f;
  f.label = label;
  f.radius = rng.uniform(0.28, 0.36) * side;
  f.center_y = (side - 1) / 2.0 + rng.uniform(-2.0, 2.0) * side / 32.0;
  f.center_x = (side - 1) / 2.0 + rng.uniform(-2.0, 2.0) * side / 32.0;
  f.rotation = rng.uniform(-15.0, 15.0) * kDeg;
  f.background_family = rng.randint(0, kIidBackgroundFamilies - 1);
  f.background_seed = rng.next_u64();
  f.fill_family = 0;
  f.fill_seed = rng.next_u64();
  return f;
}

SampleFactors perturb_factors(const BenchSpec& spec, const SampleFactors& base,
                              Nuisance nuisance, std::uint64_t sample_seed) {
  Rng rng(derive_seed(sample_seed, "perturb"));
  const double s = spec.strength(nuisance);
  SampleFactors f = base;
  switch (nuisance) {
    case Nuisance::Iid:
      break;
    case Nuisance::Shape:
      if (s > 0.0) {
        f.elongation = 1.0 + s * rng.uniform(0.35, 0.6);
        f.elongation_angle = rng.uniform(0.0, kPi);
        f.wobble = s * rng.uniform(0.1, 0.18);
        for (double& ph : f.wobble_phase) ph = rng.uniform(0.0, 2 * kPi);
      }
      break;
    case Nuisance::Pose:
      if (s > 0.0) {
        const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
        f.rotation = base.rotation + sign * s * rng.uniform(25.0, 45.0) * kDeg;
      }
      break;
    case Nuisance::Context:
      if (rng.bernoulli(s)) {
        f.background_family = rng.randint(kIidBackgroundFamilies, 5);
        f.background_seed = rng.next_u64();
      }
      break;
    case Nuisance::Texture:
      if (rng.bernoulli(s)) {
        f.fill_family = rng.randint(1, 3);
        f.fill_seed = rng.next_u64();
      }
      break;
    case Nuisance::Occlusion:
      if (rng.bernoulli(s)) {
        f.occluders = rng.randint(1, 2);
        f.occluder_seed = rng.next_u64();
      }
      break;
    case Nuisance::Weather:
      if (rng.bernoulli(s)) {
        f.weathered = true;
        f.weather.type = static_cast<Weather>(rng.randint(0, 3));
        f.weather.severity = rng.randint(3, 5);
        f.weather_seed = rng.next_u64();
      }
      break;
  }
  const auto diff = differing_factors(base, f);
  OODCV_REQUIRE(diff.empty() || (diff.size() == 1 && diff[0] == nuisance),
                "OOD sample must differ from its base in exactly one factor");
  return f;
}

BankEntry make_distractor(int side, std::uint64_t seed) {
  Rng rng(seed);
  const double big = rng.uniform(0.15, 0.25) * side;
  Polygon p;
  const int n = rng.randint(5, 9);
  const double phase = rng.uniform(0.0, 2 * kPi);
  for (int k = 0; k < n; ++k) {
    const double a = phase + 2 * kPi * k / n;
    const double rad = big * rng.uniform(0.6, 1.0);
    p.push_back({(side - 1) / 2.0 + rad * std::cos(a),
                 (side - 1) / 2.0 + rad * std::sin(a)});
  }
  Mask mask = rasterize(densify(p, 3), side);
  const Rgb col = any_color(rng);
  const double noise = rng.uniform(0.0, 0.15);
  Image img(side, side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const double e = noise * (rng.uniform() - 0.5);
      put(img, r, c, {col.r + e, col.g + e, col.b + e});
    }
  if (mask.total() <= 0.0) mask.set(side / 2, side / 2, 1.0);
  return {std::move(img), std::move(mask), std::nullopt};
}

Sample render_sample(const BenchSpec& spec, const SampleFactors& f,
                     Nuisance tag) {
  const int side = spec.image_side;
  Image bg = draw_background(f.background_family, f.background_seed, side);
  Mask mask = rasterize(object_polygon(f), side);
  Image fill = draw_fill(f.fill_family, f.fill_seed, side);
  Image img = composite(fill, mask, bg, {0, 0});
  if (f.occluders > 0) {
    Rng rng(f.occluder_seed);
    for (int k = 0; k < f.occluders; ++k) {
      const auto d = make_distractor(side, rng.next_u64());
      const double oy = f.center_y + rng.uniform(-0.6, 0.6) * f.radius;
      const double ox = f.center_x + rng.uniform(-0.6, 0.6) * f.radius;
      const Offset off{static_cast<int>(std::lround(oy - (side - 1) / 2.0)),
                       static_cast<int>(std::lround(ox - (side - 1) / 2.0))};
      img = composite(d.image, d.mask, img, off);
    }
  }
  if (f.weathered) {
    Rng rng(f.weather_seed);
    img = weather(img, f.weather, rng);
  }
  return {std::move(img), std::move(mask), f.label, tag};
}

// ---------------------------------------------------------------- generate

namespace {

LabeledSet make_split(const BenchSpec& spec, const std::string& stream,
                      int count, Nuisance nuisance) {
  const std::uint64_t split_seed = derive_seed(spec.rng_seed, stream);
  LabeledSet set;
  set.num_classes = spec.num_classes;
  set.samples.resize(static_cast<std::size_t>(count));
  parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(spec.num_classes));
    const std::uint64_t seed = derive_seed(split_seed, static_cast<std::uint64_t>(i));
    const auto base = draw_base_factors(spec, label, seed);
    const auto f = nuisance == Nuisance::Iid
                       ? base
                       : perturb_factors(spec, base, nuisance, seed);
    set.samples[i] = render_sample(spec, f, nuisance);
  });
  return set;
}

}  // namespace

Benchmark generate(const BenchSpec& spec) {
  spec.validate();
  Benchmark b;
  b.train = make_split(spec, "split:train", spec.train_size, Nuisance::Iid);
  b.val = make_split(spec, "split:val", spec.val_size, Nuisance::Iid);
  b.iid_test = make_split(spec, "split:iid", spec.test_size_per_split, Nuisance::Iid);
  for (auto n : kOodNuisances) {
    b.ood_tests[n] =
        make_split(spec, "split:" + to_string(n), spec.test_size_per_split, n);
  }

  const std::uint64_t aux_seed = derive_seed(spec.rng_seed, "aux");
  b.aux.backgrounds.resize(static_cast<std::size_t>(spec.aux_backgrounds));
  parallel_for(b.aux.backgrounds.size(), [&](std::size_t i) {
    b.aux.backgrounds[i] = draw_aux_background(
        derive_seed(derive_seed(aux_seed, "bg"), i), spec.image_side);
  });
  std::vector<BankEntry> distractors(static_cast<std::size_t>(spec.aux_distractors));
  parallel_for(distractors.size(), [&](std::size_t i) {
    distractors[i] = make_distractor(
        spec.image_side, derive_seed(derive_seed(aux_seed, "distractor"), i));
  });
  b.aux.distractors = ObjectBank(spec.num_classes);
  for (auto& d : distractors)
    b.aux.distractors.add(std::move(d.image), std::move(d.mask), std::nullopt);
  return b;
}

// ---------------------------------------------------------------- manifests

namespace {

constexpr const char* kManifestHeader = "# oodcv-manifest v1";

std::string index_name(std::size_t i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

void write_manifest(const std::vector<ManifestRecord>& records,
                    const std::filesystem::path& dir) {
  const auto path = dir / kManifestName;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << kManifestHeader << '\n'
      << "# image\tmask\tlabel\tnuisance\n";
  for (const auto& r : records) {
    out << r.image_path << '\t' << r.mask_path << '\t'
        << (r.label ? std::to_string(*r.label) : std::string("-")) << '\t'
        << to_string(r.tag) << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// Splits a manifest line into its tab-separated fields.
std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == '\t') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<std::vector<std::string>> read_rows(const std::filesystem::path& dir) {
  const auto path = dir / kManifestName;
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader)
    throw IoError("'" + path.string() + "' is not an oodcv manifest");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto f = fields(line);
    if (f.size() != 4)
      throw IoError("malformed manifest line in '" + path.string() + "': " + line);
    rows.push_back(std::move(f));
  }
  return rows;
}

}  // namespace

std::vector<ManifestRecord> export_set(const LabeledSet& set,
                                       const std::filesystem::path& dir) {
  ensure_dir(dir / "images");
  ensure_dir(dir / "masks");
  std::vector<ManifestRecord> records;
  records.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& s = set.samples[i];
    ManifestRecord r{"images/" + index_name(i) + ".png",
                     "masks/" + index_name(i) + ".png", s.label, s.tag};
    write_png(s.image, dir / r.image_path);
    write_mask_png(s.mask, dir / r.mask_path);
    records.push_back(std::move(r));
  }
  write_manifest(records, dir);
  return records;
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& dir) {
  std::vector<ManifestRecord> out;
  for (const auto& f : read_rows(dir)) {
    ManifestRecord r;
    r.image_path = f[0];
    r.mask_path = f[1];
    if (f[2] != "-") {
      try {
        r.label = std::stoi(f[2]);
      } catch (const std::exception&) {
        throw IoError("bad label '" + f[2] + "' in manifest under '" +
                      dir.string() + "'");
      }
    }
    r.tag = nuisance_from_string(f[3]);
    out.push_back(std::move(r));
  }
  return out;
}

void strip_manifest_labels(const std::filesystem::path& dir) {
  auto records = read_manifest(dir);
  for (auto& r : records) r.label.reset();
  write_manifest(records, dir);
}

LabeledSet import_set(const std::filesystem::path& dir, int num_classes) {
  LabeledSet set;
  set.num_classes = num_classes;
  for (const auto& r : read_manifest(dir)) {
    if (!r.label)
      throw IoError("manifest under '" + dir.string() + "' has no labels");
    if (*r.label < 0 || *r.label >= num_classes)
      throw IoError("label out of range in manifest under '" + dir.string() + "'");
    set.samples.push_back({read_png(dir / r.image_path),
                           read_mask_png(dir / r.mask_path), *r.label, r.tag});
  }
  return set;
}

std::vector<Image> import_images(const std::filesystem::path& dir) {
  std::vector<Image> out;
  for (const auto& f : read_rows(dir)) out.push_back(read_png(dir / f[0]));
  return out;
}

void export_backgrounds(const std::vector<Image>& pool,
                        const std::filesystem::path& dir) {
  ensure_dir(dir);
  const auto list_path = dir / "backgrounds.txt";
  std::ofstream list(list_path);
  if (!list) throw IoError("cannot write '" + list_path.string() + "'");
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const std::string name = index_name(i) + ".png";
    write_png(pool[i], dir / name);
    list << name << '\n';
  }
}

std::vector<Image> import_backgrounds(const std::filesystem::path& dir) {
  const auto list_path = dir / "backgrounds.txt";
  std::ifstream list(list_path);
  if (!list) throw IoError("cannot read '" + list_path.string() + "'");
  std::vector<Image> out;
  std::string name;
  while (std::getline(list, name))
    if (!name.empty()) out.push_back(read_png(dir / name));
  return out;
}

}  // namespace oodcv
