#include "fgss/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "json.hpp"

namespace fgss::pipeline {

using nlohmann::json;

std::string to_string(CropTag tag) {
  switch (tag) {
    case CropTag::longest_vertical: return "longestVertical";
    case CropTag::longest_horizontal: return "longestHorizontal";
    case CropTag::thinnest_long_vertical: return "thinnestLongVertical";
    case CropTag::thinnest_long_horizontal: return "thinnestLongHorizontal";
    case CropTag::longest_overall: return "longestOverall";
  }
  return "longestOverall";
}

CropTag tag_from_string(const std::string& s) {
  for (CropTag t : kTagOrder) {
    if (to_string(t) == s) return t;
  }
  throw PipelineError("unknown crop tag: " + s);
}

WallCropSet WallCropSet::from_unordered(std::vector<WallCrop> crops) {
  if (crops.size() != 5) throw PipelineError("crop set needs exactly 5 crops, got " + std::to_string(crops.size()));
  WallCropSet set;
  std::array<bool, 5> seen{};
  for (auto& c : crops) {
    const auto i = static_cast<std::size_t>(tag_index(c.tag));
    if (seen[i]) throw PipelineError("duplicate crop tag " + to_string(c.tag));
    seen[i] = true;
    set.crops[i] = std::move(c);
  }
  return set;
}

double measure_mean_width(const std::vector<WallComponent>& components) {
  double sum = 0.0;
  int n = 0;
  for (const auto& c : components) {
    if (c.length_px >= 3 * c.width_px) {
      sum += c.width_px;
      ++n;
    }
  }
  if (n == 0) throw PipelineError("unusable floorplan: no wall component with length >= 3x width");
  return sum / n;
}

double measure_mean_width(const BitMask& mask) { return measure_mean_width(connected_components(mask)); }

Normalized normalize(const Raster& image, const BitMask& mask) {
  if (image.height() != mask.height() || image.width() != mask.width()) {
    throw PipelineError("normalize: image and mask dimensions differ");
  }
  if (mask.count() == 0) throw PipelineError("normalize: mask is empty");
  Normalized out;
  out.result.measured_mean_width = measure_mean_width(mask);
  out.result.scale_factor = kTargetWallWidth / out.result.measured_mean_width;
  out.image = rescale(image, out.result.scale_factor, Resample::bilinear);
  out.mask = rescale(mask, out.result.scale_factor);
  return out;
}

NormalizationResult scale_for_widths(std::span<const double> widths) {
  if (widths.size() != 5) throw PipelineError("annotated widths: exactly 5 values required");
  for (double w : widths) {
    if (!(w > 0.0)) throw PipelineError("annotated widths must be positive");
  }
  NormalizationResult r;
  r.measured_mean_width = std::accumulate(widths.begin(), widths.end(), 0.0) / 5.0;
  r.scale_factor = kTargetWallWidth / r.measured_mean_width;
  return r;
}

std::pair<Raster, NormalizationResult> normalize_by_annotated_widths(const Raster& image,
                                                                     std::span<const double> widths) {
  const NormalizationResult r = scale_for_widths(widths);
  return {rescale(image, r.scale_factor, Resample::bilinear), r};
}

namespace {

// Longer first, then thinner, then top-most, then left-most.
bool ranks_before(const WallComponent& a, const WallComponent& b) {
  if (a.length_px != b.length_px) return a.length_px > b.length_px;
  if (a.width_px != b.width_px) return a.width_px < b.width_px;
  if (a.bbox.y != b.bbox.y) return a.bbox.y < b.bbox.y;
  return a.bbox.x < b.bbox.x;
}

int best_of(const std::vector<WallComponent>& cs, const std::vector<int>& pool) {
  int best = -1;
  for (int i : pool) {
    if (best < 0 || ranks_before(cs[static_cast<std::size_t>(i)], cs[static_cast<std::size_t>(best)])) best = i;
  }
  return best;
}

std::vector<int> thin_band(const std::vector<WallComponent>& cs, const std::vector<int>& pool) {
  int min_w = std::numeric_limits<int>::max();
  for (int i : pool) min_w = std::min(min_w, cs[static_cast<std::size_t>(i)].width_px);
  std::vector<int> band;
  for (int i : pool) {
    if (cs[static_cast<std::size_t>(i)].width_px <= min_w + 1) band.push_back(i);
  }
  return band;
}

}  // namespace

std::array<int, 5> rank_components(const std::vector<WallComponent>& cs) {
  if (cs.empty()) throw PipelineError("crop selection: mask has no wall components");
  std::vector<int> all(cs.size()), vert, horiz;
  std::iota(all.begin(), all.end(), 0);
  for (int i : all) {
    (cs[static_cast<std::size_t>(i)].orientation == Orientation::vertical ? vert : horiz).push_back(i);
  }
  const auto& v = vert.empty() ? all : vert;
  const auto& h = horiz.empty() ? all : horiz;
  return {best_of(cs, v), best_of(cs, h), best_of(cs, thin_band(cs, v)), best_of(cs, thin_band(cs, h)),
          best_of(cs, all)};
}

CropBox centered_crop_box(const WallComponent& c, int image_h, int image_w) {
  if (image_h < kCropSide || image_w < kCropSide) {
    throw PipelineError("image smaller than a 64x64 wall crop");
  }
  const int cx = c.bbox.x + c.bbox.w / 2;
  const int cy = c.bbox.y + c.bbox.h / 2;
  CropBox b;
  b.side = kCropSide;
  b.x = std::clamp(cx - kCropSide / 2, 0, image_w - kCropSide);
  b.y = std::clamp(cy - kCropSide / 2, 0, image_h - kCropSide);
  return b;
}

WallCropSet select_wall_crops(const Raster& image, const BitMask& mask,
                              const std::vector<WallComponent>& components) {
  const auto picks = rank_components(components);
  WallCropSet set;
  for (std::size_t t = 0; t < kTagOrder.size(); ++t) {
    const WallComponent& c = components[static_cast<std::size_t>(picks[t])];
    WallCrop& crop = set.crops[t];
    crop.tag = kTagOrder[t];
    crop.component_id = c.id;
    crop.width_px = c.width_px;
    crop.box = centered_crop_box(c, image.height(), image.width());
    crop.raster = extract_crop(image, crop.box);
  }
  (void)mask;
  return set;
}

WallCropSet select_wall_crops(const Raster& image, const BitMask& mask) {
  if (image.height() != mask.height() || image.width() != mask.width()) {
    throw PipelineError("crop selection: image and mask dimensions differ");
  }
  if (mask.count() == 0) throw PipelineError("crop selection: mask is empty");
  return select_wall_crops(image, mask, connected_components(mask));
}

Augmented rotate(const Raster& image, const BitMask& mask, double degrees) {
  Augmented out;
  out.angle_deg = degrees;
  if (degrees == 0.0) {
    out.image = image;
    out.mask = mask;
    return out;
  }
  out.rotated = true;
  const int H = image.height(), W = image.width();
  const double th = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const int H2 = static_cast<int>(std::ceil(std::abs(W * s) + std::abs(H * c) - 1e-9));
  const int W2 = static_cast<int>(std::ceil(std::abs(W * c) + std::abs(H * s) - 1e-9));

  double border = 0.0;
  int nb = 0;
  for (int x = 0; x < W; ++x) {
    border += image.at(0, x) + image.at(H - 1, x);
    nb += 2;
  }
  for (int y = 0; y < H; ++y) {
    border += image.at(y, 0) + image.at(y, W - 1);
    nb += 2;
  }
  const float fill = nb ? static_cast<float>(border / nb) : 0.0f;

  out.image = Raster(H2, W2, image.channels(), fill);
  out.mask = BitMask(H2, W2);
  const double cx_in = W / 2.0, cy_in = H / 2.0, cx_out = W2 / 2.0, cy_out = H2 / 2.0;
  for (int y = 0; y < H2; ++y) {
    for (int x = 0; x < W2; ++x) {
      const double dx = x + 0.5 - cx_out, dy = y + 0.5 - cy_out;
      // Inverse rotation maps the output pixel centre back into the source.
      const double sx = c * dx + s * dy + cx_in;
      const double sy = -s * dx + c * dy + cy_in;
      const int nx = static_cast<int>(std::floor(sx)), ny = static_cast<int>(std::floor(sy));
      if (nx >= 0 && ny >= 0 && nx < W && ny < H) out.mask.set(y, x, mask.at(ny, nx));
      const double fx = sx - 0.5, fy = sy - 0.5;
      const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
      if (x0 < -1 || y0 < -1 || x0 >= W || y0 >= H) continue;
      const double ax = fx - x0, ay = fy - y0;
      for (int ch = 0; ch < image.channels(); ++ch) {
        auto px = [&](int yy, int xx) -> double {
          if (xx < 0 || yy < 0 || xx >= W || yy >= H) return fill;
          return image.at(yy, xx, ch);
        };
        const double v = (1 - ay) * ((1 - ax) * px(y0, x0) + ax * px(y0, x0 + 1)) +
                         ay * ((1 - ax) * px(y0 + 1, x0) + ax * px(y0 + 1, x0 + 1));
        out.image.at(y, x, ch) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

Augmented augment_rotate(const Raster& image, const BitMask& mask, Rng& rng, double prob) {
  if (!rng.bernoulli(prob)) {
    Augmented out;
    out.image = image;
    out.mask = mask;
    return out;
  }
  return rotate(image, mask, rng.uniform(-45.0, 45.0));
}

std::vector<TrainTile> make_train_tiles(const Raster& image, const BitMask& mask, Rng& rng, int tiles_per_plan,
                                        int source_id, const TilePolicy& policy) {
  const int side = policy.side;
  const int H = std::max(image.height(), side), W = std::max(image.width(), side);
  // Integral image of wall pixels over the padded canvas.
  std::vector<int> integral(static_cast<std::size_t>(H + 1) * (W + 1), 0);
  auto I = [&](int y, int x) -> int& { return integral[static_cast<std::size_t>(y) * (W + 1) + x]; };
  for (int y = 0; y < H; ++y) {
    int row = 0;
    for (int x = 0; x < W; ++x) {
      row += (y < mask.height() && x < mask.width() && mask.at(y, x)) ? 1 : 0;
      I(y + 1, x + 1) = I(y, x + 1) + row;
    }
  }
  auto wall_fraction = [&](int oy, int ox) {
    const int s = I(oy + side, ox + side) - I(oy, ox + side) - I(oy + side, ox) + I(oy, ox);
    return static_cast<double>(s) / (static_cast<double>(side) * side);
  };

  std::vector<TrainTile> tiles;
  tiles.reserve(static_cast<std::size_t>(std::max(0, tiles_per_plan)));
  for (int t = 0; t < tiles_per_plan; ++t) {
    int oy = rng.uniform_int(0, H - side), ox = rng.uniform_int(0, W - side);
    if (rng.bernoulli(policy.biased_prob)) {
      for (int a = 1; a < policy.max_attempts && wall_fraction(oy, ox) < policy.min_wall_fraction; ++a) {
        oy = rng.uniform_int(0, H - side);
        ox = rng.uniform_int(0, W - side);
      }
    }
    TrainTile tile;
    tile.source_id = source_id;
    tile.offset = {ox, oy};
    tile.image = Raster(side, side, image.channels(), 0.0f);
    tile.mask = BitMask(side, side);
    for (int y = 0; y < side; ++y) {
      const int sy = oy + y;
      if (sy >= image.height()) break;
      for (int x = 0; x < side; ++x) {
        const int sx = ox + x;
        if (sx >= image.width()) break;
        for (int c = 0; c < image.channels(); ++c) tile.image.at(y, x, c) = image.at(sy, sx, c);
        tile.mask.set(y, x, mask.at(sy, sx));
      }
    }
    tiles.push_back(std::move(tile));
  }
  return tiles;
}

std::string sidecar_to_json(const CropSidecar& s) {
  json crops = json::array();
  for (const auto& c : s.crops) {
    crops.push_back({{"tag", to_string(c.tag)}, {"x", c.box.x}, {"y", c.box.y}, {"side", c.box.side},
                     {"widthPx", c.width_px}});
  }
  return json{{"floorplanId", s.floorplan_id}, {"crops", crops}}.dump(2);
}

CropSidecar sidecar_from_json(const std::string& text) {
  CropSidecar s;
  try {
    const json j = json::parse(text);
    s.floorplan_id = j.value("floorplanId", std::string{});
    for (const auto& c : j.at("crops")) {
      CropSpec cs;
      cs.tag = tag_from_string(c.at("tag").get<std::string>());
      cs.box.x = c.at("x").get<int>();
      cs.box.y = c.at("y").get<int>();
      cs.box.side = c.value("side", kCropSide);
      cs.width_px = c.at("widthPx").get<double>();
      s.crops.push_back(cs);
    }
  } catch (const json::exception& e) {
    throw PipelineError(std::string("malformed crop sidecar: ") + e.what());
  }
  return s;
}

CropSidecar sidecar_from_set(const std::string& floorplan_id, const WallCropSet& set) {
  CropSidecar s;
  s.floorplan_id = floorplan_id;
  for (const auto& c : set.crops) s.crops.push_back({c.tag, c.box, c.width_px});
  return s;
}

WallCropSet crop_set_from_sidecar(const Raster& image, const CropSidecar& sidecar, double scale) {
  if (sidecar.crops.size() != 5) {
    throw PipelineError("crop sidecar needs exactly 5 crops, got " + std::to_string(sidecar.crops.size()));
  }
  if (image.height() < kCropSide || image.width() < kCropSide) {
    throw PipelineError("image smaller than a 64x64 wall crop");
  }
  std::vector<WallCrop> crops;
  for (const auto& spec : sidecar.crops) {
    if (spec.box.side != kCropSide) throw PipelineError("crop side must be 64");
    const double cx = (spec.box.x + spec.box.side / 2.0) * scale;
    const double cy = (spec.box.y + spec.box.side / 2.0) * scale;
    WallCrop c;
    c.tag = spec.tag;
    c.width_px = spec.width_px * scale;
    c.box.side = kCropSide;
    c.box.x = std::clamp(static_cast<int>(std::lround(cx)) - kCropSide / 2, 0, image.width() - kCropSide);
    c.box.y = std::clamp(static_cast<int>(std::lround(cy)) - kCropSide / 2, 0, image.height() - kCropSide);
    c.raster = extract_crop(image, c.box);
    crops.push_back(std::move(c));
  }
  return WallCropSet::from_unordered(std::move(crops));
}

}  // namespace fgss::pipeline
