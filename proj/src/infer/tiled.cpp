#include "fgss/infer/tiled.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

#include "fgss/image_io.hpp"

namespace fgss::infer {

using nn::Tensor;

void InferenceConfig::validate() const {
  if (tile <= 0) throw InferenceError("tile side must be positive");
  if (stride < 1 || stride > tile) {
    throw InferenceError("stride must lie in [1, " + std::to_string(tile) + "], got " + std::to_string(stride));
  }
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw InferenceError("threshold must lie in [0, 1]");
  if (threads < 1 || batch < 1) throw InferenceError("threads and batch must be at least 1");
}

namespace {

std::vector<int> axis_offsets(int padded, int tile, int stride) {
  std::vector<int> out;
  for (int o = 0;; o += stride) {
    if (o + tile >= padded) {
      out.push_back(padded - tile);
      break;
    }
    out.push_back(o);
  }
  return out;
}

}  // namespace

TileGrid plan_tile_grid(int height, int width, const InferenceConfig& cfg) {
  cfg.validate();
  if (height <= 0 || width <= 0) throw InferenceError("image dimensions must be positive");
  TileGrid g;
  g.padded_h = std::max(height, cfg.tile);
  g.padded_w = std::max(width, cfg.tile);
  const auto ys = axis_offsets(g.padded_h, cfg.tile, cfg.stride);
  const auto xs = axis_offsets(g.padded_w, cfg.tile, cfg.stride);
  for (int y : ys) {
    for (int x : xs) g.offsets.push_back({x, y});
  }
  return g;
}

Tensor<float> TileModel::encode_crops(const pipeline::WallCropSet&) const {
  throw InferenceError("model takes no crop set");
}

SegModel::SegModel(model::SegmenterConfig seg, model::FeatExConfig fx) : seg_(std::move(seg)) {
  if (seg_.config().fused()) fx_ = std::make_unique<model::FeatureExtractor<float>>(std::move(fx));
}

Tensor<float> SegModel::encode_crops(const pipeline::WallCropSet& crops) const {
  if (!fx_) throw InferenceError("model takes no crop set");
  Tensor<float> z = model::encode_crop_set(*fx_, crops);
  if (z.c() != seg_.config().injected_channels) {
    throw InferenceError("crop latent has " + std::to_string(z.c()) + " channels, segmenter expects " +
                         std::to_string(seg_.config().injected_channels));
  }
  return z;
}

Tensor<float> SegModel::tile_logits(const Tensor<float>& tiles, const Tensor<float>* injected) const {
  return seg_.infer(tiles, injected).logits;
}

SegmentationResult segment_with_latent(const Raster& image, const Tensor<float>* injected, const TileModel& model,
                                       const InferenceConfig& cfg_in) {
  const auto t0 = std::chrono::steady_clock::now();
  if (image.channels() != 1) throw InferenceError("segmentation expects a single-channel image");
  if (model.needs_injection() && !injected) throw InferenceError("this model needs a crop set (missing crops)");
  if (!model.needs_injection() && injected) throw InferenceError("this model takes no crop set");
  InferenceConfig cfg = cfg_in;
  cfg.tile = model.tile_side();
  const TileGrid grid = plan_tile_grid(image.height(), image.width(), cfg);
  const int T = cfg.tile;
  const int H = image.height(), W = image.width();
  const std::size_t tile_px = static_cast<std::size_t>(T) * T;

  std::vector<double> sum(static_cast<std::size_t>(grid.padded_h) * grid.padded_w, 0.0);
  std::vector<int> count(sum.size(), 0);

  // Work proceeds in rounds of threads×batch tiles; each round's outputs are
  // merged in tile order so the result does not depend on the thread count.
  const int n_tiles = static_cast<int>(grid.offsets.size());
  const int round = cfg.threads * cfg.batch;
  std::vector<std::vector<float>> probs(static_cast<std::size_t>(std::min(round, n_tiles)));

  auto run_batch = [&](int first, int n, int slot0) {
    Tensor<float> x(n, 1, T, T);
    for (int b = 0; b < n; ++b) {
      const Pixel off = grid.offsets[static_cast<std::size_t>(first + b)];
      float* dst = x.sample(b);
      for (int y = 0; y < T; ++y) {
        const int iy = off.y + y;
        if (iy >= H) continue;  // black padding
        const int w = std::min(T, W - off.x);
        for (int xx = 0; xx < w; ++xx) dst[static_cast<std::size_t>(y) * T + xx] = image.at(iy, off.x + xx, 0);
      }
    }
    const Tensor<float> logits = model.tile_logits(x, injected);
    if (logits.n() != n || logits.sample_size() != tile_px) throw InferenceError("model returned wrong logit shape");
    for (int b = 0; b < n; ++b) {
      auto& p = probs[static_cast<std::size_t>(slot0 + b)];
      p.resize(tile_px);
      const float* z = logits.sample(b);
      for (std::size_t i = 0; i < tile_px; ++i) p[i] = 1.0f / (1.0f + std::exp(-z[i]));
    }
  };

  for (int start = 0; start < n_tiles; start += round) {
    const int in_round = std::min(round, n_tiles - start);
    if (cfg.threads == 1) {
      for (int b = 0; b < in_round; b += cfg.batch) run_batch(start + b, std::min(cfg.batch, in_round - b), b);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(static_cast<std::size_t>(cfg.threads));
      for (int t = 0; t < cfg.threads; ++t) {
        const int b = t * cfg.batch;
        if (b >= in_round) break;
        pool.emplace_back([&, t, b] {
          try {
            run_batch(start + b, std::min(cfg.batch, in_round - b), b);
          } catch (...) {
            errors[static_cast<std::size_t>(t)] = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }
    for (int b = 0; b < in_round; ++b) {
      const Pixel off = grid.offsets[static_cast<std::size_t>(start + b)];
      const auto& p = probs[static_cast<std::size_t>(b)];
      for (int y = 0; y < T; ++y) {
        const std::size_t row = static_cast<std::size_t>(off.y + y) * grid.padded_w + off.x;
        for (int xx = 0; xx < T; ++xx) {
          sum[row + xx] += p[static_cast<std::size_t>(y) * T + xx];
          ++count[row + xx];
        }
      }
    }
  }

  SegmentationResult r;
  r.probability = Raster(H, W, 1);
  r.mask = BitMask(H, W);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * grid.padded_w + x;
      const double p = sum[i] / count[i];
      r.probability.at(y, x, 0) = static_cast<float>(p);
      r.mask.set(y, x, p > cfg.threshold);
    }
  }
  r.tiles = n_tiles;
  r.millis = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

SegmentationResult segment_floorplan(const Raster& image, const pipeline::WallCropSet* crops, const TileModel& model,
                                     const InferenceConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  if (model.needs_injection() && !crops) throw InferenceError("this model needs a crop set (missing crops)");
  std::optional<Tensor<float>> z;
  if (model.needs_injection()) z = model.encode_crops(*crops);
  SegmentationResult r = segment_with_latent(image, z ? &*z : nullptr, model, cfg);
  r.millis = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<SweepRow> stride_sweep(const std::vector<SweepItem>& items, const TileModel& model,
                                   const std::vector<int>& strides, const InferenceConfig& base) {
  if (items.empty()) throw InferenceError("stride sweep needs at least one image");
  std::vector<SweepRow> rows;
  for (int s : strides) {
    InferenceConfig cfg = base;
    cfg.stride = s;
    SweepRow row;
    row.stride = s;
    const auto t0 = std::chrono::steady_clock::now();
    double total = 0.0;
    for (const auto& it : items) {
      const auto res = segment_floorplan(it.image, it.crops ? &*it.crops : nullptr, model, cfg);
      total += iou(res.mask, it.truth);
      row.tiles += res.tiles;
    }
    row.millis = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    row.mean_iou = total / static_cast<double>(items.size());
    rows.push_back(row);
  }
  return rows;
}

std::vector<std::uint8_t> probability_png(const Raster& probability) { return io::encode_png(probability); }

AnnotatedInput prepare_annotated(const Raster& original, const pipeline::CropSidecar& sidecar) {
  if (sidecar.crops.size() != 5) {
    throw InferenceError("crop set needs exactly 5 crops, got " + std::to_string(sidecar.crops.size()));
  }
  std::vector<double> widths;
  for (const auto& c : sidecar.crops) {
    if (!(c.width_px > 0)) throw InferenceError("annotated crop widths must be positive");
    widths.push_back(c.width_px);
  }
  AnnotatedInput a;
  auto [img, norm] = pipeline::normalize_by_annotated_widths(original, widths);
  a.image = std::move(img);
  a.norm = norm;
  a.crops = pipeline::crop_set_from_sidecar(a.image, sidecar, norm.scale_factor);
  return a;
}

Raster resample_to(const Raster& r, int height, int width) {
  if (r.height() == height && r.width() == width) return r;
  Raster out(height, width, r.channels());
  const double sy = static_cast<double>(r.height()) / height;
  const double sx = static_cast<double>(r.width()) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(r.height() - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, r.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(r.width() - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, r.width() - 1);
      const double wx = fx - x0;
      for (int c = 0; c < r.channels(); ++c) {
        const double top = r.at(y0, x0, c) * (1 - wx) + r.at(y0, x1, c) * wx;
        const double bot = r.at(y1, x0, c) * (1 - wx) + r.at(y1, x1, c) * wx;
        out.at(y, x, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

SegmentationResult to_original(const SegmentationResult& r, int height, int width, double threshold) {
  SegmentationResult out;
  out.tiles = r.tiles;
  out.millis = r.millis;
  out.probability = resample_to(r.probability, height, width);
  out.mask = BitMask(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) out.mask.set(y, x, out.probability.at(y, x) > threshold);
  }
  return out;
}

}  // namespace fgss::infer
