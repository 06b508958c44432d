#pragma once

// Floorplan preparation: width normalisation, the five representative wall
// crops, rotation augmentation and 256×256 training tiles.

#include <array>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgss/raster.hpp"
#include "fgss/rng.hpp"

namespace fgss::pipeline {

/// Corpus-wide mean wall width every floorplan is rescaled to.
constexpr double kTargetWallWidth = 24.18;
constexpr int kCropSide = 64;
constexpr int kTileSide = 256;

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CropTag {
  longest_vertical,
  longest_horizontal,
  thinnest_long_vertical,
  thinnest_long_horizontal,
  longest_overall,
};

/// Canonical order; also the channel order of the fused 1280-channel latent.
inline constexpr std::array<CropTag, 5> kTagOrder{
    CropTag::longest_vertical, CropTag::longest_horizontal, CropTag::thinnest_long_vertical,
    CropTag::thinnest_long_horizontal, CropTag::longest_overall};

std::string to_string(CropTag tag);
CropTag tag_from_string(const std::string& s);
inline int tag_index(CropTag t) { return static_cast<int>(t); }

struct WallCrop {
  CropTag tag = CropTag::longest_vertical;
  CropBox box;
  Raster raster;
  double width_px = 0.0;
  int component_id = -1;
};

/// Exactly five crops, stored at tag_index(tag).
struct WallCropSet {
  std::array<WallCrop, 5> crops;

  const WallCrop& operator[](CropTag t) const { return crops[static_cast<std::size_t>(tag_index(t))]; }
  WallCrop& operator[](CropTag t) { return crops[static_cast<std::size_t>(tag_index(t))]; }

  /// Builds a set from crops given in any order; throws unless each tag occurs once.
  static WallCropSet from_unordered(std::vector<WallCrop> crops);
};

struct NormalizationResult {
  double scale_factor = 1.0;
  double measured_mean_width = kTargetWallWidth;
  double target_width = kTargetWallWidth;
};

struct Normalized {
  Raster image;
  BitMask mask;
  NormalizationResult result;
};

/// Mean estimated width over components with length ≥ 3×width. Throws
/// PipelineError when no component passes.
double measure_mean_width(const BitMask& mask);
double measure_mean_width(const std::vector<WallComponent>& components);

Normalized normalize(const Raster& image, const BitMask& mask);

/// Deployment path: scale from operator-annotated widths of the five crops.
std::pair<Raster, NormalizationResult> normalize_by_annotated_widths(const Raster& image,
                                                                     std::span<const double> widths);
NormalizationResult scale_for_widths(std::span<const double> widths);

/// Component index chosen for each tag (kTagOrder order).
std::array<int, 5> rank_components(const std::vector<WallComponent>& components);

/// 64×64 window centred on the component's bbox centre, clamped inside the image.
CropBox centered_crop_box(const WallComponent& c, int image_h, int image_w);

WallCropSet select_wall_crops(const Raster& image, const BitMask& mask);
WallCropSet select_wall_crops(const Raster& image, const BitMask& mask,
                              const std::vector<WallComponent>& components);

struct Augmented {
  Raster image;
  BitMask mask;
  bool rotated = false;
  double angle_deg = 0.0;
};

/// Rotation about the centre, expanding the canvas so no wall pixel is cut.
/// Image resampled bilinearly (exposed corners take the mean border tone),
/// mask by nearest neighbour.
Augmented rotate(const Raster& image, const BitMask& mask, double degrees);

/// With probability `prob` rotates by θ ~ U(−45°, 45°); otherwise identity.
Augmented augment_rotate(const Raster& image, const BitMask& mask, Rng& rng, double prob = 0.2);

struct TrainTile {
  Raster image;
  BitMask mask;
  int source_id = 0;
  Pixel offset;
};

struct TilePolicy {
  int side = kTileSide;
  double biased_prob = 0.9;
  double min_wall_fraction = 0.01;
  int max_attempts = 20;
};

/// Pads undersized plans with black to `side`, then samples n windows.
std::vector<TrainTile> make_train_tiles(const Raster& image, const BitMask& mask, Rng& rng, int tiles_per_plan,
                                        int source_id = 0, const TilePolicy& policy = {});

/// Crop-set sidecar: {floorplanId, crops: [{tag, x, y, side, widthPx}]}.
struct CropSpec {
  CropTag tag = CropTag::longest_vertical;
  CropBox box;
  double width_px = 0.0;
};

struct CropSidecar {
  std::string floorplan_id;
  std::vector<CropSpec> crops;
};

std::string sidecar_to_json(const CropSidecar& s);
CropSidecar sidecar_from_json(const std::string& text);
CropSidecar sidecar_from_set(const std::string& floorplan_id, const WallCropSet& set);

/// Cuts the sidecar's boxes out of `image`. Boxes are given in the coordinates
/// of the image before rescaling by `scale`; their centres are mapped through
/// the scale and the 64×64 window re-clamped. Widths are scaled likewise.
WallCropSet crop_set_from_sidecar(const Raster& image, const CropSidecar& sidecar, double scale = 1.0);

}  // namespace fgss::pipeline
