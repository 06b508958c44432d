#pragma once

// Two-phase training: the crop feature extractor first, then the segmenter
// with the frozen (or optionally fine-tuned) crop encoder.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fgss/infer/tiled.hpp"
#include "fgss/model/featx.hpp"
#include "fgss/model/segmenter.hpp"
#include "fgss/train/dataset.hpp"
#include "fgss/train/manifest.hpp"
#include "json.hpp"

namespace fgss::train {

nlohmann::json to_json(const model::FeatExConfig& c);
model::FeatExConfig featx_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const model::SegmenterConfig& c);
model::SegmenterConfig seg_config_from_json(const nlohmann::json& j);

struct FeatxTrainConfig {
  model::FeatExConfig model;
  int epochs = 60;
  double lr = 1e-3;
  double decay = 0.9;  // lr multiplier every `decay_every` epochs
  int decay_every = 10;
  int batch = 256;
  double w1 = 0.001;
  double w2 = 10.0;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static FeatxTrainConfig from_json(const nlohmann::json& j);
  void validate() const;
};

struct SegTrainConfig {
  model::SegmenterConfig model;
  int epochs = 120;
  double lr = 1e-4;
  double decay = 0.9;
  int decay_every = 10;
  int batch = 12;
  double w3 = 1.0;
  double w4 = 0.3;
  double rotate_prob = 0.2;
  int tiles_per_plan = 4;
  bool freeze_e2 = true;
  int val_every = 1;
  std::uint64_t seed = 1;
  infer::InferenceConfig val_infer;  // tile is taken from the model

  nlohmann::json to_json() const;
  static SegTrainConfig from_json(const nlohmann::json& j);
  void validate() const;
};

struct RunOptions {
  std::filesystem::path out_dir;
  std::string dataset_hash;
  bool resume = false;  // continue from out_dir/last.json
  int stop_after = 0;   // > 0: return after this many epochs in this call
  std::function<void(const MetricRow&)> on_epoch;
  std::function<bool(const MetricRow&)> stop_when;  // early stop after an epoch
};

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes last.{json,tensors}, best.{json,tensors} and metrics.csv into
/// out_dir; returns the manifest of the last completed epoch.
CheckpointManifest train_feature_extractor(const std::vector<CropSample>& train, const std::vector<CropSample>& val,
                                           const FeatxTrainConfig& cfg, const RunOptions& opt);

/// `fx` is required for fused variants; its encoder and head are stored in
/// every checkpoint so the segmenter checkpoint is self-contained.
CheckpointManifest train_segmenter(const std::vector<PreparedPlan>& train, const std::vector<PreparedPlan>& val,
                                   const model::FeatureExtractor<float>* fx, const SegTrainConfig& cfg,
                                   const RunOptions& opt);

std::unique_ptr<model::FeatureExtractor<float>> load_featx(const std::filesystem::path& manifest,
                                                           CheckpointManifest* out = nullptr);
std::unique_ptr<infer::SegModel> load_seg_model(const std::filesystem::path& manifest,
                                                CheckpointManifest* out = nullptr);

/// Stacks single-channel rasters of equal size into [N, 1, h, w].
nn::Tensor<float> stack_rasters(const std::vector<const Raster*>& rasters);
nn::Tensor<float> stack_masks(const std::vector<const BitMask*>& masks);

}  // namespace fgss::train
