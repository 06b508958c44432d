#pragma once

// Dataset IoU with the grey-crop ablation, width-deviation histograms,
// latent export and model-size audits.

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "fgss/infer/tiled.hpp"
#include "fgss/model/param_count.hpp"
#include "fgss/train/dataset.hpp"
#include "json.hpp"

namespace fgss::eval {

enum class Ablation { none, grey };
std::string to_string(Ablation a);
Ablation ablation_from_string(const std::string& s);

struct EvalConfig {
  infer::InferenceConfig infer;
  Ablation ablation = Ablation::none;
  std::uint64_t grey_seed = 7;
};

struct PlanScore {
  std::string id;
  double iou = 0.0;
  double millis = 0.0;
  int tiles = 0;
};

struct EvalReport {
  std::string model;  // checkpoint path or label
  std::string split;
  EvalConfig config;
  std::vector<PlanScore> plans;  // dataset order
  double mean_iou = 0.0;
  double total_millis = 0.0;

  nlohmann::json to_json() const;
  /// floorplanId,iou,millis,tiles
  std::string to_csv() const;
};

/// Each crop replaced by a constant raster, grey level ~ U(0.2, 0.8).
pipeline::WallCropSet grey_crop_set(const pipeline::WallCropSet& set, Rng& rng);

/// Crops are only passed to models that take an injected latent; the grey
/// draw for plan i comes from a stream seeded by (grey_seed, plan index).
EvalReport evaluate_dataset(const std::vector<train::PreparedPlan>& plans, const infer::TileModel& model,
                            const EvalConfig& cfg, const std::string& model_label = "",
                            const std::string& split = "test");

struct WidthDeviationHistogram {
  std::map<int, int> counts;  // predicted − true width (px) → samples
  int samples = 0;
  double within1 = 0.0;  // share with |deviation| <= 1
  double exact = 0.0;

  nlohmann::json to_json() const;
  /// deviationPx,count
  std::string to_csv() const;
};

WidthDeviationHistogram width_deviation_histogram(const std::vector<int>& predicted_px,
                                                  const std::vector<int>& true_px);

/// Argmax class of the width head, converted back to pixels.
std::vector<int> predict_widths(const model::FeatureExtractor<float>& fx, const std::vector<train::CropSample>& samples);

/// floorplanId,tag,trueWidth,z0000,...; one row per crop.
void export_latents(const model::FeatureExtractor<float>& fx, const std::vector<train::CropSample>& samples,
                    std::ostream& out);
std::vector<std::string> latent_header(int values);

nlohmann::json audit_json(const std::vector<model::AuditRow>& rows);
/// name,params,mib,flops,e1,bottleneck,d1,out,e3,e2,head
std::string audit_csv(const std::vector<model::AuditRow>& rows);

}  // namespace fgss::eval
