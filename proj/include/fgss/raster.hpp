#pragma once

// Raster and mask primitives shared by every stage: grayscale images in [0,1],
// binary wall masks, crop boxes and per-wall geometry derived from masks.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fgss {

/// Thrown for shape/argument violations in the imaging code.
class RasterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major float image, channel-interleaved, values clamped to [0,1].
class Raster {
 public:
  Raster() = default;
  Raster(int height, int width, int channels = 1, float fill = 0.0f);
  Raster(int height, int width, int channels, std::vector<float> data);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  bool empty() const { return data_.empty(); }

  float at(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }
  float& at(int y, int x, int c = 0) { return data_[index(y, x, c)]; }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  /// Clamps every value back into [0,1].
  void clamp01();

  bool operator==(const Raster&) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 1;
  std::vector<float> data_;
};

/// Binary wall mask (1 = wall).
class BitMask {
 public:
  BitMask() = default;
  BitMask(int height, int width, bool fill = false);

  int height() const { return height_; }
  int width() const { return width_; }

  bool at(int y, int x) const { return bits_[static_cast<std::size_t>(y) * width_ + x] != 0; }
  void set(int y, int x, bool v) { bits_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }
  bool in_bounds(int y, int x) const { return y >= 0 && x >= 0 && y < height_ && x < width_; }

  std::span<const std::uint8_t> bits() const { return bits_; }
  std::span<std::uint8_t> bits() { return bits_; }

  std::size_t count() const;

  /// 0/1 float view, used when masks go through raster resampling.
  Raster to_raster() const;
  /// Pixels strictly above `threshold` become wall.
  static BitMask from_raster(const Raster& r, float threshold = 0.5f);

  bool operator==(const BitMask&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct CropBox {
  int x = 0;
  int y = 0;
  int side = 64;

  bool inside(int height, int width) const {
    return x >= 0 && y >= 0 && x + side <= width && y + side <= height;
  }
  bool operator==(const CropBox&) const = default;
};

struct BoundingBox {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
  bool operator==(const BoundingBox&) const = default;
};

enum class Orientation { horizontal, vertical };

std::string to_string(Orientation o);

struct Pixel {
  int x = 0;
  int y = 0;
  bool operator==(const Pixel&) const = default;
};

struct WallComponent {
  int id = 0;
  std::size_t pixel_count = 0;
  BoundingBox bbox;
  Orientation orientation = Orientation::horizontal;
  int length_px = 0;
  int width_px = 1;
  /// First pixel met by the row-major scan; identifies the component in its mask.
  Pixel seed;
};

/// 8-connected labelling in row-major discovery order, with per-component
/// orientation, major-axis length and estimated width.
std::vector<WallComponent> connected_components(const BitMask& mask);

/// Label image (0 = background, k = component id + 1) matching connected_components.
std::vector<int> label_components(const BitMask& mask, int* count = nullptr);

/// Median over the component's pixels of min(horizontal run, vertical run),
/// rounded half-up, at least 1.
int estimate_wall_width(const WallComponent& component, const BitMask& mask);

/// All pixels 8-connected to the component's seed.
std::vector<Pixel> component_pixels(const WallComponent& component, const BitMask& mask);

/// Intersection over union; 1.0 when both masks are empty.
double iou(const BitMask& predicted, const BitMask& ground_truth);

enum class Resample { bilinear, nearest };

constexpr double kMinRescale = 0.05;
constexpr double kMaxRescale = 20.0;

/// Output dims round(dim × factor), at least 1. Factor must lie in [0.05, 20].
Raster rescale(const Raster& raster, double factor, Resample mode);
BitMask rescale(const BitMask& mask, double factor);

/// Copies a side×side window; pixels outside the raster read as 0.
Raster extract_crop(const Raster& raster, const CropBox& box);

}  // namespace fgss
