#include <algorithm>
#include <cmath>

#include "fgss/raster.hpp"

namespace fgss {

namespace {

constexpr int kDx[8] = {-1, 0, 1, -1, 1, -1, 0, 1};
constexpr int kDy[8] = {-1, -1, -1, 0, 0, 1, 1, 1};

// Horizontal and vertical run length through every wall pixel.
struct RunMaps {
  std::vector<int> h;
  std::vector<int> v;
};

RunMaps run_maps(const BitMask& mask) {
  const int H = mask.height(), W = mask.width();
  RunMaps r{std::vector<int>(static_cast<std::size_t>(H) * W, 0),
            std::vector<int>(static_cast<std::size_t>(H) * W, 0)};
  for (int y = 0; y < H; ++y) {
    int x = 0;
    while (x < W) {
      if (!mask.at(y, x)) {
        ++x;
        continue;
      }
      int end = x;
      while (end < W && mask.at(y, end)) ++end;
      for (int i = x; i < end; ++i) r.h[static_cast<std::size_t>(y) * W + i] = end - x;
      x = end;
    }
  }
  for (int x = 0; x < W; ++x) {
    int y = 0;
    while (y < H) {
      if (!mask.at(y, x)) {
        ++y;
        continue;
      }
      int end = y;
      while (end < H && mask.at(end, x)) ++end;
      for (int i = y; i < end; ++i) r.v[static_cast<std::size_t>(i) * W + x] = end - y;
      y = end;
    }
  }
  return r;
}

int median_min_run(std::vector<int>& mins) {
  if (mins.empty()) return 1;
  const std::size_t n = mins.size();
  const std::size_t mid = n / 2;
  std::nth_element(mins.begin(), mins.begin() + mid, mins.end());
  const int upper = mins[mid];
  double med = upper;
  if (n % 2 == 0) {
    const int lower = *std::max_element(mins.begin(), mins.begin() + mid);
    med = 0.5 * (lower + upper);
  }
  return std::max(1, static_cast<int>(std::floor(med + 0.5)));
}

// Flood fill from `seed`, writing `label` into `labels`; returns visited pixels.
std::vector<Pixel> flood(const BitMask& mask, Pixel seed, std::vector<int>& labels, int label) {
  const int W = mask.width();
  std::vector<Pixel> pixels;
  std::vector<Pixel> stack{seed};
  labels[static_cast<std::size_t>(seed.y) * W + seed.x] = label;
  while (!stack.empty()) {
    const Pixel p = stack.back();
    stack.pop_back();
    pixels.push_back(p);
    for (int k = 0; k < 8; ++k) {
      const int nx = p.x + kDx[k], ny = p.y + kDy[k];
      if (!mask.in_bounds(ny, nx) || !mask.at(ny, nx)) continue;
      int& l = labels[static_cast<std::size_t>(ny) * W + nx];
      if (l != 0) continue;
      l = label;
      stack.push_back({nx, ny});
    }
  }
  return pixels;
}

}  // namespace

std::vector<int> label_components(const BitMask& mask, int* count) {
  const int H = mask.height(), W = mask.width();
  std::vector<int> labels(static_cast<std::size_t>(H) * W, 0);
  int next = 0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (!mask.at(y, x) || labels[static_cast<std::size_t>(y) * W + x] != 0) continue;
      flood(mask, {x, y}, labels, ++next);
    }
  }
  if (count) *count = next;
  return labels;
}

std::vector<WallComponent> connected_components(const BitMask& mask) {
  const int H = mask.height(), W = mask.width();
  std::vector<int> labels(static_cast<std::size_t>(H) * W, 0);
  std::vector<WallComponent> out;
  RunMaps runs;
  bool have_runs = false;
  std::vector<int> mins;

  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (!mask.at(y, x) || labels[static_cast<std::size_t>(y) * W + x] != 0) continue;
      if (!have_runs) {
        runs = run_maps(mask);
        have_runs = true;
      }
      const int id = static_cast<int>(out.size());
      const auto pixels = flood(mask, {x, y}, labels, id + 1);

      int x0 = W, y0 = H, x1 = -1, y1 = -1;
      mins.clear();
      mins.reserve(pixels.size());
      for (const Pixel& p : pixels) {
        x0 = std::min(x0, p.x);
        y0 = std::min(y0, p.y);
        x1 = std::max(x1, p.x);
        y1 = std::max(y1, p.y);
        const std::size_t i = static_cast<std::size_t>(p.y) * W + p.x;
        mins.push_back(std::min(runs.h[i], runs.v[i]));
      }
      WallComponent c;
      c.id = id;
      c.pixel_count = pixels.size();
      c.bbox = {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
      c.orientation = c.bbox.h > c.bbox.w ? Orientation::vertical : Orientation::horizontal;
      c.length_px = std::max(c.bbox.w, c.bbox.h);
      c.width_px = median_min_run(mins);
      c.seed = {x, y};
      out.push_back(c);
    }
  }
  return out;
}

std::vector<Pixel> component_pixels(const WallComponent& component, const BitMask& mask) {
  if (!mask.in_bounds(component.seed.y, component.seed.x) ||
      !mask.at(component.seed.y, component.seed.x)) {
    throw RasterError("component seed is not a wall pixel of this mask");
  }
  std::vector<int> labels(static_cast<std::size_t>(mask.height()) * mask.width(), 0);
  return flood(mask, component.seed, labels, 1);
}

int estimate_wall_width(const WallComponent& component, const BitMask& mask) {
  const auto pixels = component_pixels(component, mask);
  const int H = mask.height(), W = mask.width();
  std::vector<int> mins;
  mins.reserve(pixels.size());
  for (const Pixel& p : pixels) {
    int l = p.x, r = p.x;
    while (l > 0 && mask.at(p.y, l - 1)) --l;
    while (r + 1 < W && mask.at(p.y, r + 1)) ++r;
    int t = p.y, b = p.y;
    while (t > 0 && mask.at(t - 1, p.x)) --t;
    while (b + 1 < H && mask.at(b + 1, p.x)) ++b;
    mins.push_back(std::min(r - l + 1, b - t + 1));
  }
  return median_min_run(mins);
}

}  // namespace fgss
