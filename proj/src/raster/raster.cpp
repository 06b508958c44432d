#include "fgss/raster.hpp"

#include <algorithm>
#include <cmath>

namespace fgss {

Raster::Raster(int height, int width, int channels, float fill)
    : height_(height), width_(width), channels_(channels) {
  if (height < 0 || width < 0 || channels < 1) throw RasterError("raster: invalid dimensions");
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

Raster::Raster(int height, int width, int channels, std::vector<float> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
  if (height < 0 || width < 0 || channels < 1) throw RasterError("raster: invalid dimensions");
  if (data_.size() != static_cast<std::size_t>(height) * width * channels) {
    throw RasterError("raster: data length does not match height*width*channels");
  }
  for (float v : data_) {
    if (!(v >= 0.0f && v <= 1.0f)) throw RasterError("raster: values must lie in [0,1]");
  }
}

void Raster::clamp01() {
  for (float& v : data_) v = std::clamp(v, 0.0f, 1.0f);
}

BitMask::BitMask(int height, int width, bool fill) : height_(height), width_(width) {
  if (height < 0 || width < 0) throw RasterError("mask: invalid dimensions");
  bits_.assign(static_cast<std::size_t>(height) * width, fill ? 1 : 0);
}

std::size_t BitMask::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

Raster BitMask::to_raster() const {
  Raster r(height_, width_, 1);
  auto out = r.data();
  for (std::size_t i = 0; i < bits_.size(); ++i) out[i] = bits_[i] ? 1.0f : 0.0f;
  return r;
}

BitMask BitMask::from_raster(const Raster& r, float threshold) {
  BitMask m(r.height(), r.width());
  for (int y = 0; y < r.height(); ++y) {
    for (int x = 0; x < r.width(); ++x) m.set(y, x, r.at(y, x, 0) > threshold);
  }
  return m;
}

std::string to_string(Orientation o) { return o == Orientation::vertical ? "vertical" : "horizontal"; }

double iou(const BitMask& predicted, const BitMask& ground_truth) {
  if (predicted.height() != ground_truth.height() || predicted.width() != ground_truth.width()) {
    throw RasterError("iou: mask dimensions differ");
  }
  const auto a = predicted.bits();
  const auto b = ground_truth.bits();
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += static_cast<std::size_t>(a[i] & b[i]);
    uni += static_cast<std::size_t>(a[i] | b[i]);
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

int scaled_dim(int dim, double factor) {
  return std::max(1, static_cast<int>(std::lround(static_cast<double>(dim) * factor)));
}

void check_factor(double factor) {
  if (!(factor >= kMinRescale && factor <= kMaxRescale)) {
    throw RasterError("rescale: factor " + std::to_string(factor) + " outside [0.05, 20]");
  }
}

}  // namespace

Raster rescale(const Raster& raster, double factor, Resample mode) {
  check_factor(factor);
  if (factor == 1.0) return raster;
  const int in_h = raster.height(), in_w = raster.width(), ch = raster.channels();
  const int out_h = scaled_dim(in_h, factor), out_w = scaled_dim(in_w, factor);
  // Per-axis ratio of the realised dims; pixel centres are aligned (half-pixel convention).
  const double sy = static_cast<double>(in_h) / out_h;
  const double sx = static_cast<double>(in_w) / out_w;
  Raster out(out_h, out_w, ch);

  if (mode == Resample::nearest) {
    std::vector<int> xs(out_w);
    for (int x = 0; x < out_w; ++x) {
      xs[x] = std::min(in_w - 1, static_cast<int>(std::floor((x + 0.5) * sx)));
    }
    for (int y = 0; y < out_h; ++y) {
      const int iy = std::min(in_h - 1, static_cast<int>(std::floor((y + 0.5) * sy)));
      for (int x = 0; x < out_w; ++x) {
        for (int c = 0; c < ch; ++c) out.at(y, x, c) = raster.at(iy, xs[x], c);
      }
    }
    return out;
  }

  struct Tap {
    int i0, i1;
    float w1;
  };
  auto taps = [](int out_n, int in_n, double s) {
    std::vector<Tap> t(out_n);
    for (int o = 0; o < out_n; ++o) {
      double src = (o + 0.5) * s - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in_n - 1));
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, in_n - 1);
      t[o] = {i0, i1, static_cast<float>(src - i0)};
    }
    return t;
  };
  const auto ty = taps(out_h, in_h, sy);
  const auto tx = taps(out_w, in_w, sx);
  for (int y = 0; y < out_h; ++y) {
    const Tap& a = ty[y];
    for (int x = 0; x < out_w; ++x) {
      const Tap& b = tx[x];
      for (int c = 0; c < ch; ++c) {
        const float top = raster.at(a.i0, b.i0, c) * (1.0f - b.w1) + raster.at(a.i0, b.i1, c) * b.w1;
        const float bot = raster.at(a.i1, b.i0, c) * (1.0f - b.w1) + raster.at(a.i1, b.i1, c) * b.w1;
        out.at(y, x, c) = std::clamp(top * (1.0f - a.w1) + bot * a.w1, 0.0f, 1.0f);
      }
    }
  }
  return out;
}

BitMask rescale(const BitMask& mask, double factor) {
  return BitMask::from_raster(rescale(mask.to_raster(), factor, Resample::nearest));
}

Raster extract_crop(const Raster& raster, const CropBox& box) {
  Raster out(box.side, box.side, raster.channels());
  for (int y = 0; y < box.side; ++y) {
    const int sy = box.y + y;
    if (sy < 0 || sy >= raster.height()) continue;
    for (int x = 0; x < box.side; ++x) {
      const int sx = box.x + x;
      if (sx < 0 || sx >= raster.width()) continue;
      for (int c = 0; c < raster.channels(); ++c) out.at(y, x, c) = raster.at(sy, sx, c);
    }
  }
  return out;
}

}  // namespace fgss
