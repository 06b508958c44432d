#pragma once

// Sliding-window segmentation of whole floorplans with per-pixel averaging
// of tile probabilities.

#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include "fgss/model/featx.hpp"
#include "fgss/model/segmenter.hpp"
#include "fgss/pipeline.hpp"
#include "fgss/raster.hpp"

namespace fgss::infer {

class InferenceError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct InferenceConfig {
  int stride = 30;
  double threshold = 0.5;
  int tile = 256;
  int threads = 1;
  int batch = 4;  // tiles per forward call

  void validate() const;
};

struct TileGrid {
  int padded_h = 0;
  int padded_w = 0;
  std::vector<Pixel> offsets;  // top-left corners, row-major
};

/// Offsets at stride spacing with the last row/column clamped to end on the
/// padded boundary; images smaller than a tile are padded up to one tile.
TileGrid plan_tile_grid(int height, int width, const InferenceConfig& cfg);

/// Anything that maps a batch of tiles to logits.
class TileModel {
 public:
  virtual ~TileModel() = default;
  virtual int tile_side() const = 0;
  virtual bool needs_injection() const = 0;
  /// [1, C, s, s] latent for a crop set; only called when needs_injection().
  virtual nn::Tensor<float> encode_crops(const pipeline::WallCropSet& crops) const;
  /// tiles [N, 1, T, T] → logits [N, 1, T, T]. `injected` is [1, C, s, s] or null.
  virtual nn::Tensor<float> tile_logits(const nn::Tensor<float>& tiles, const nn::Tensor<float>* injected) const = 0;
};

/// Trained weights: the segmenter plus, for fused variants, the crop encoder
/// and width head.
class SegModel : public TileModel {
 public:
  SegModel(model::SegmenterConfig seg, model::FeatExConfig fx = {});

  int tile_side() const override { return seg_.config().tile; }
  bool needs_injection() const override { return seg_.config().fused(); }
  nn::Tensor<float> encode_crops(const pipeline::WallCropSet& crops) const override;
  nn::Tensor<float> tile_logits(const nn::Tensor<float>& tiles, const nn::Tensor<float>* injected) const override;

  model::Segmenter<float>& segmenter() { return seg_; }
  const model::Segmenter<float>& segmenter() const { return seg_; }
  model::FeatureExtractor<float>* featx() { return fx_.get(); }
  const model::FeatureExtractor<float>* featx() const { return fx_.get(); }

 private:
  model::Segmenter<float> seg_;
  std::unique_ptr<model::FeatureExtractor<float>> fx_;
};

struct SegmentationResult {
  BitMask mask;
  Raster probability;
  int tiles = 0;
  double millis = 0.0;
};

/// `crops` must be given iff the model needs an injected latent. The latent
/// is computed once and reused for every tile.
SegmentationResult segment_floorplan(const Raster& image, const pipeline::WallCropSet* crops, const TileModel& model,
                                     const InferenceConfig& cfg);

/// Same, with a precomputed latent ([1, C, s, s]) or null.
SegmentationResult segment_with_latent(const Raster& image, const nn::Tensor<float>* injected, const TileModel& model,
                                       const InferenceConfig& cfg);

struct SweepItem {
  Raster image;
  std::optional<pipeline::WallCropSet> crops;
  BitMask truth;
};

struct SweepRow {
  int stride = 0;
  double mean_iou = 0.0;
  double millis = 0.0;
  int tiles = 0;
};

std::vector<SweepRow> stride_sweep(const std::vector<SweepItem>& items, const TileModel& model,
                                   const std::vector<int>& strides, const InferenceConfig& base);

/// Operator-annotated input: the image rescaled so the annotated widths
/// average the target width, and the crops re-extracted from it.
struct AnnotatedInput {
  Raster image;
  pipeline::WallCropSet crops;
  pipeline::NormalizationResult norm;
};
/// Crop boxes and widths are in original-image coordinates.
AnnotatedInput prepare_annotated(const Raster& original, const pipeline::CropSidecar& sidecar);

/// Bilinear resample to exact dims (pixel-centre aligned).
Raster resample_to(const Raster& r, int height, int width);

/// Maps a result computed on a rescaled image back to `height`×`width`;
/// the mask is re-thresholded (strictly greater) on the resampled probability.
SegmentationResult to_original(const SegmentationResult& r, int height, int width, double threshold);

/// 8-bit gray PNG of a probability raster, value = round(255·p).
std::vector<std::uint8_t> probability_png(const Raster& probability);

}  // namespace fgss::infer
