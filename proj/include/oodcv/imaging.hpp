#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

namespace oodcv {

/// H x W x 3 image of unit-interval intensities, row-major and
/// channel-interleaved. Every write is clamped to [0, 1].
class Image {
 public:
  static constexpr int kChannels = 3;
  static constexpr int kMinSide = 8;

  Image() = default;
  Image(int height, int width, double fill = 0.0);
  /// Takes ownership of `data` (size height*width*3); values are clamped.
  Image(int height, int width, std::vector<double> data);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t size() const noexcept { return data_.size(); }

  double at(int r, int c, int ch) const {
    return data_[(static_cast<std::size_t>(r) * width_ + c) * kChannels + ch];
  }
  void set(int r, int c, int ch, double v);
  std::span<const double> data() const noexcept { return data_; }

  double mean() const;
  bool same_shape(const Image& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_;
  }
  friend bool operator==(const Image&, const Image&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

/// H x W foreground weights in [0, 1].
class Mask {
 public:
  Mask() = default;
  Mask(int height, int width, double fill = 0.0);
  Mask(int height, int width, std::vector<double> data);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  double at(int r, int c) const {
    return data_[static_cast<std::size_t>(r) * width_ + c];
  }
  void set(int r, int c, double v);
  std::span<const double> data() const noexcept { return data_; }

  double total() const;
  double mean() const;
  bool matches(const Image& img) const noexcept {
    return height_ == img.height() && width_ == img.width();
  }
  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

struct AffineParams {
  double rotation = 0.0;  // radians
  double scale_x = 1.0;
  double scale_y = 1.0;
  double shear = 0.0;        // radians, x-shear
  double translate_x = 0.0;  // fraction of width
  double translate_y = 0.0;  // fraction of height
  bool flip_h = false;
  bool flip_v = false;

  void validate() const;
};

struct ColorParams {
  double brightness_delta = 0.0;
  double contrast_gain = 1.0;
  double saturation_gain = 1.0;
  double hue_shift = 0.0;  // radians

  void validate() const;
};

/// Pixel offset of a pasted layer's top-left corner relative to the target.
struct Offset {
  int dy = 0;
  int dx = 0;
};

/// Forward 2x3 matrix mapping input (x, y) to output coordinates, about the
/// image center: p' = A (p - c) + c + t, with A = R * Shear * Scale * Flip.
std::array<double, 6> affine_matrix(const AffineParams& params, int height,
                                    int width);

std::pair<Image, Mask> warp_affine(const Image& img, const Mask& mask,
                                   const AffineParams& params);
Image warp_affine(const Image& img, const AffineParams& params);
/// Warps by an arbitrary forward 2x3 matrix (output = M * [x y 1]^T).
Image warp_matrix(const Image& img, const std::array<double, 6>& forward);

/// Brightness, then contrast about the image mean, then saturation about the
/// per-pixel channel mean, then hue rotation in YIQ. Neutral stages are
/// skipped so neutral params are an exact identity.
Image apply_color(const Image& img, const ColorParams& params);

/// out = m * fg + (1 - m) * bg over the overlap of fg (placed at `offset`)
/// with bg; bg elsewhere.
Image composite(const Image& fg, const Mask& fg_mask, const Image& bg,
                Offset offset);

/// Mask weight of `mask` that lands inside a target of the given size when
/// placed at `offset`.
double in_frame_weight(const Mask& mask, int target_h, int target_w,
                       Offset offset);

Image resize(const Image& img, int new_h, int new_w);
Mask resize(const Mask& mask, int new_h, int new_w);

Image flip_horizontal(const Image& img);
Image crop(const Image& img, int top, int left, int h, int w);

Image read_png(const std::filesystem::path& path);
void write_png(const Image& img, const std::filesystem::path& path);
Mask read_mask_png(const std::filesystem::path& path);
void write_mask_png(const Mask& mask, const std::filesystem::path& path);

}  // namespace oodcv
