#include "oodcv/imaging.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "oodcv/error.hpp"

namespace oodcv {
namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Bilinear sample of channel `ch` at (y, x); neighbours outside the frame
// contribute zero.
template <typename Getter>
double sample_bilinear(int h, int w, double y, double x, Getter&& get) {
  const double fy0 = std::floor(y);
  const double fx0 = std::floor(x);
  const int y0 = static_cast<int>(fy0);
  const int x0 = static_cast<int>(fx0);
  const double fy = y - fy0;
  const double fx = x - fx0;
  auto v = [&](int r, int c) {
    return (r >= 0 && r < h && c >= 0 && c < w) ? get(r, c) : 0.0;
  };
  const double top = (1.0 - fx) * v(y0, x0) + fx * v(y0, x0 + 1);
  const double bottom = (1.0 - fx) * v(y0 + 1, x0) + fx * v(y0 + 1, x0 + 1);
  return (1.0 - fy) * top + fy * bottom;
}

// Lerp form keeps constant inputs exactly constant.
double lerp(double a, double b, double t) { return a + t * (b - a); }

// Half-pixel-centred source coordinate, clamped to the valid range.
double source_coord(int dst, int src_size, int dst_size) {
  const double s = (dst + 0.5) * static_cast<double>(src_size) / dst_size - 0.5;
  return std::clamp(s, 0.0, static_cast<double>(src_size - 1));
}

template <typename Getter>
double sample_clamped(int h, int w, double y, double x, Getter&& get) {
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0;
  const double fx = x - x0;
  const double top = lerp(get(y0, x0), get(y0, x1), fx);
  const double bottom = lerp(get(y1, x0), get(y1, x1), fx);
  return lerp(top, bottom, fy);
}

}  // namespace

// ---------------------------------------------------------------- Image/Mask

Image::Image(int height, int width, double fill)
    : height_(height), width_(width) {
  OODCV_REQUIRE(height >= kMinSide && width >= kMinSide,
                "image sides must be >= 8");
  data_.assign(static_cast<std::size_t>(height) * width * kChannels,
               clamp01(fill));
}

Image::Image(int height, int width, std::vector<double> data)
    : height_(height), width_(width), data_(std::move(data)) {
  OODCV_REQUIRE(height >= kMinSide && width >= kMinSide,
                "image sides must be >= 8");
  OODCV_REQUIRE(data_.size() == static_cast<std::size_t>(height) * width *
                                    kChannels,
                "image data size does not match dimensions");
  for (double& v : data_) v = clamp01(v);
}

void Image::set(int r, int c, int ch, double v) {
  data_[(static_cast<std::size_t>(r) * width_ + c) * kChannels + ch] =
      clamp01(v);
}

double Image::mean() const {
  if (data_.empty()) return 0.0;
  return std::accumulate(data_.begin(), data_.end(), 0.0) /
         static_cast<double>(data_.size());
}

Mask::Mask(int height, int width, double fill)
    : height_(height), width_(width) {
  OODCV_REQUIRE(height >= 1 && width >= 1, "mask sides must be positive");
  data_.assign(static_cast<std::size_t>(height) * width, clamp01(fill));
}

Mask::Mask(int height, int width, std::vector<double> data)
    : height_(height), width_(width), data_(std::move(data)) {
  OODCV_REQUIRE(height >= 1 && width >= 1, "mask sides must be positive");
  OODCV_REQUIRE(data_.size() == static_cast<std::size_t>(height) * width,
                "mask data size does not match dimensions");
  for (double& v : data_) v = clamp01(v);
}

void Mask::set(int r, int c, double v) {
  data_[static_cast<std::size_t>(r) * width_ + c] = clamp01(v);
}

double Mask::total() const {
  return std::accumulate(data_.begin(), data_.end(), 0.0);
}

double Mask::mean() const {
  return data_.empty() ? 0.0 : total() / static_cast<double>(data_.size());
}

void AffineParams::validate() const {
  OODCV_REQUIRE(scale_x >= 0.25 && scale_x <= 4.0 && scale_y >= 0.25 &&
                    scale_y <= 4.0,
                "affine scale must lie in [0.25, 4]");
  OODCV_REQUIRE(std::abs(translate_x) <= 1.0 && std::abs(translate_y) <= 1.0,
                "affine translation must lie in [-1, 1]");
}

void ColorParams::validate() const {
  OODCV_REQUIRE(contrast_gain >= 0.1 && contrast_gain <= 10.0,
                "contrast gain must lie in [0.1, 10]");
  OODCV_REQUIRE(saturation_gain >= 0.1 && saturation_gain <= 10.0,
                "saturation gain must lie in [0.1, 10]");
}

// ------------------------------------------------------------------- affine

std::array<double, 6> affine_matrix(const AffineParams& p, int height,
                                    int width) {
  const double fx = p.flip_h ? -1.0 : 1.0;
  const double fy = p.flip_v ? -1.0 : 1.0;
  // Scale * Flip
  const double s00 = p.scale_x * fx;
  const double s11 = p.scale_y * fy;
  // Shear * (Scale * Flip)
  const double t = std::tan(p.shear);
  const double h00 = s00;
  const double h01 = t * s11;
  const double h10 = 0.0;
  const double h11 = s11;
  // Rotation * ...
  const double c = std::cos(p.rotation);
  const double s = std::sin(p.rotation);
  const double a00 = c * h00 - s * h10;
  const double a01 = c * h01 - s * h11;
  const double a10 = s * h00 + c * h10;
  const double a11 = s * h01 + c * h11;
  const double cx = (width - 1) / 2.0;
  const double cy = (height - 1) / 2.0;
  const double tx = p.translate_x * width;
  const double ty = p.translate_y * height;
  return {a00, a01, cx + tx - (a00 * cx + a01 * cy),
          a10, a11, cy + ty - (a10 * cx + a11 * cy)};
}

namespace {

// Maps output pixel (r, c) back to its source (y, x) through the inverse of
// a forward 2x3 matrix.
struct InverseMap {
  double i00, i01, i10, i11, b0, b1;

  explicit InverseMap(const std::array<double, 6>& m) {
    const double det = m[0] * m[4] - m[1] * m[3];
    OODCV_REQUIRE(det != 0.0, "warp: singular matrix");
    i00 = m[4] / det;
    i01 = -m[1] / det;
    i10 = -m[3] / det;
    i11 = m[0] / det;
    b0 = m[2];
    b1 = m[5];
  }

  std::pair<double, double> operator()(int r, int c) const {
    const double dx = c - b0;
    const double dy = r - b1;
    return {i10 * dx + i11 * dy, i00 * dx + i01 * dy};
  }
};

std::pair<Image, Mask> warp_impl(const Image& img, const Mask* mask,
                                 const std::array<double, 6>& forward) {
  const int h = img.height();
  const int w = img.width();
  const InverseMap inv(forward);
  Image out(h, w);
  Mask out_mask(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const auto [sy, sx] = inv(r, c);
      for (int ch = 0; ch < Image::kChannels; ++ch) {
        out.set(r, c, ch, sample_bilinear(h, w, sy, sx, [&](int y, int x) {
                  return img.at(y, x, ch);
                }));
      }
      if (mask != nullptr) {
        out_mask.set(r, c, sample_bilinear(h, w, sy, sx, [&](int y, int x) {
                       return mask->at(y, x);
                     }));
      }
    }
  }
  return {std::move(out), std::move(out_mask)};
}

}  // namespace

std::pair<Image, Mask> warp_affine(const Image& img, const Mask& mask,
                                   const AffineParams& params) {
  OODCV_REQUIRE(mask.matches(img), "warp_affine: image/mask size mismatch");
  params.validate();
  return warp_impl(img, &mask,
                   affine_matrix(params, img.height(), img.width()));
}

Image warp_affine(const Image& img, const AffineParams& params) {
  params.validate();
  return warp_impl(img, nullptr,
                   affine_matrix(params, img.height(), img.width()))
      .first;
}

Image warp_matrix(const Image& img, const std::array<double, 6>& forward) {
  return warp_impl(img, nullptr, forward).first;
}

// -------------------------------------------------------------------- color

Image apply_color(const Image& img, const ColorParams& params) {
  params.validate();
  const int h = img.height();
  const int w = img.width();
  std::vector<double> v(img.data().begin(), img.data().end());
  auto clamp_all = [&] {
    for (double& x : v) x = clamp01(x);
  };

  if (params.brightness_delta != 0.0) {
    for (double& x : v) x += params.brightness_delta;
    clamp_all();
  }
  if (params.contrast_gain != 1.0) {
    const double m =
        std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    for (double& x : v) x = m + params.contrast_gain * (x - m);
    clamp_all();
  }
  if (params.saturation_gain != 1.0) {
    for (std::size_t i = 0; i < v.size(); i += 3) {
      const double l = (v[i] + v[i + 1] + v[i + 2]) / 3.0;
      for (int ch = 0; ch < 3; ++ch)
        v[i + ch] = l + params.saturation_gain * (v[i + ch] - l);
    }
    clamp_all();
  }
  if (params.hue_shift != 0.0) {
    const double c = std::cos(params.hue_shift);
    const double s = std::sin(params.hue_shift);
    for (std::size_t i = 0; i < v.size(); i += 3) {
      const double r = v[i], g = v[i + 1], b = v[i + 2];
      const double y = 0.299 * r + 0.587 * g + 0.114 * b;
      const double ii = 0.595716 * r - 0.274453 * g - 0.321263 * b;
      const double q = 0.211456 * r - 0.522591 * g + 0.311135 * b;
      const double i2 = c * ii - s * q;
      const double q2 = s * ii + c * q;
      v[i] = y + 0.9563 * i2 + 0.6210 * q2;
      v[i + 1] = y - 0.2721 * i2 - 0.6474 * q2;
      v[i + 2] = y - 1.1070 * i2 + 1.7046 * q2;
    }
  }
  return Image(h, w, std::move(v));
}

// -------------------------------------------------------------- compositing

Image composite(const Image& fg, const Mask& fg_mask, const Image& bg,
                Offset offset) {
  OODCV_REQUIRE(fg_mask.matches(fg), "composite: fg/mask size mismatch");
  Image out = bg;
  const int r0 = std::max(0, offset.dy);
  const int r1 = std::min(bg.height(), offset.dy + fg.height());
  const int c0 = std::max(0, offset.dx);
  const int c1 = std::min(bg.width(), offset.dx + fg.width());
  for (int r = r0; r < r1; ++r) {
    for (int c = c0; c < c1; ++c) {
      const int fr = r - offset.dy;
      const int fc = c - offset.dx;
      const double m = fg_mask.at(fr, fc);
      if (m == 0.0) continue;
      for (int ch = 0; ch < Image::kChannels; ++ch) {
        out.set(r, c, ch, m * fg.at(fr, fc, ch) + (1.0 - m) * bg.at(r, c, ch));
      }
    }
  }
  return out;
}

double in_frame_weight(const Mask& mask, int target_h, int target_w,
                       Offset offset) {
  double total = 0.0;
  const int r0 = std::max(0, -offset.dy);
  const int r1 = std::min(mask.height(), target_h - offset.dy);
  const int c0 = std::max(0, -offset.dx);
  const int c1 = std::min(mask.width(), target_w - offset.dx);
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c) total += mask.at(r, c);
  return total;
}

// ------------------------------------------------------------------- resize

Image resize(const Image& img, int new_h, int new_w) {
  OODCV_REQUIRE(new_h >= Image::kMinSide && new_w >= Image::kMinSide,
                "resize: target sides must be >= 8");
  if (new_h == img.height() && new_w == img.width()) return img;
  Image out(new_h, new_w);
  for (int r = 0; r < new_h; ++r) {
    const double sy = source_coord(r, img.height(), new_h);
    for (int c = 0; c < new_w; ++c) {
      const double sx = source_coord(c, img.width(), new_w);
      for (int ch = 0; ch < Image::kChannels; ++ch) {
        out.set(r, c, ch,
                sample_clamped(img.height(), img.width(), sy, sx,
                               [&](int y, int x) { return img.at(y, x, ch); }));
      }
    }
  }
  return out;
}

Mask resize(const Mask& mask, int new_h, int new_w) {
  OODCV_REQUIRE(new_h >= 1 && new_w >= 1, "resize: target sides must be >= 1");
  if (new_h == mask.height() && new_w == mask.width()) return mask;
  Mask out(new_h, new_w);
  for (int r = 0; r < new_h; ++r) {
    const double sy = source_coord(r, mask.height(), new_h);
    for (int c = 0; c < new_w; ++c) {
      const double sx = source_coord(c, mask.width(), new_w);
      out.set(r, c,
              sample_clamped(mask.height(), mask.width(), sy, sx,
                             [&](int y, int x) { return mask.at(y, x); }));
    }
  }
  return out;
}

Image flip_horizontal(const Image& img) {
  Image out(img.height(), img.width());
  const int w = img.width();
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < Image::kChannels; ++ch)
        out.set(r, c, ch, img.at(r, w - 1 - c, ch));
  return out;
}

Image crop(const Image& img, int top, int left, int h, int w) {
  OODCV_REQUIRE(top >= 0 && left >= 0 && top + h <= img.height() &&
                    left + w <= img.width(),
                "crop: window outside image");
  Image out(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < Image::kChannels; ++ch)
        out.set(r, c, ch, img.at(top + r, left + c, ch));
  return out;
}

// ---------------------------------------------------------------------- PNG

namespace {

std::vector<png_byte> read_png_bytes(const std::filesystem::path& path,
                                     png_uint_32 format, int& h, int& w) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read PNG '" + path.string() + "': " + image.message);
  }
  image.format = format;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG '" + path.string() + "': " +
                  image.message);
  }
  h = static_cast<int>(image.height);
  w = static_cast<int>(image.width);
  return buf;
}

void write_png_bytes(const std::filesystem::path& path, png_uint_32 format,
                     int h, int w, const std::vector<png_byte>& buf) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0,
                               nullptr)) {
    throw IoError("cannot write PNG '" + path.string() + "': " +
                  image.message);
  }
}

png_byte to_byte(double v) {
  return static_cast<png_byte>(std::lround(clamp01(v) * 255.0));
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  int h = 0, w = 0;
  const auto buf = read_png_bytes(path, PNG_FORMAT_RGB, h, w);
  std::vector<double> data(buf.size());
  std::transform(buf.begin(), buf.end(), data.begin(),
                 [](png_byte b) { return b / 255.0; });
  return Image(h, w, std::move(data));
}

void write_png(const Image& img, const std::filesystem::path& path) {
  std::vector<png_byte> buf(img.size());
  std::transform(img.data().begin(), img.data().end(), buf.begin(), to_byte);
  write_png_bytes(path, PNG_FORMAT_RGB, img.height(), img.width(), buf);
}

Mask read_mask_png(const std::filesystem::path& path) {
  int h = 0, w = 0;
  const auto buf = read_png_bytes(path, PNG_FORMAT_GRAY, h, w);
  std::vector<double> data(buf.size());
  std::transform(buf.begin(), buf.end(), data.begin(),
                 [](png_byte b) { return b / 255.0; });
  return Mask(h, w, std::move(data));
}

void write_mask_png(const Mask& mask, const std::filesystem::path& path) {
  std::vector<png_byte> buf(mask.data().size());
  std::transform(mask.data().begin(), mask.data().end(), buf.begin(), to_byte);
  write_png_bytes(path, PNG_FORMAT_GRAY, mask.height(), mask.width(), buf);
}

}  // namespace oodcv
