#pragma once

// Checkpoint metadata written beside each tensor archive, plus the per-epoch
// metric history that is also exported as CSV.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace fgss::train {

struct MetricRow {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;                // featx: w1·mse + w2·ce on the val crops
  std::optional<double> val_metric;     // featx: ±1-px accuracy, segmenter: val IoU
  std::optional<double> recon_mse;      // featx only
  std::optional<double> width_top1;     // featx only
  std::optional<double> width_within1;  // featx only
};

struct CheckpointManifest {
  static constexpr int kVersion = 1;
  std::string phase;    // "featx" or "segmenter"
  std::string variant;  // segmenter: fgss/unet; featx: "featx"
  nlohmann::json config;  // model + training config snapshot
  std::string config_hash;
  int epoch = 0;          // completed epochs
  std::vector<MetricRow> history;
  std::string weight_archive;  // relative to the manifest's directory
  std::string created_at;      // ISO-8601 UTC
  std::string dataset_hash;
  std::string notes;

  nlohmann::json to_json() const;
  static CheckpointManifest from_json(const nlohmann::json& j);

  void write(const std::filesystem::path& path) const;
  /// Parses and checks that the referenced archive exists.
  static CheckpointManifest read(const std::filesystem::path& path);
};

/// FNV-1a 64 as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);
std::string hash_file(const std::filesystem::path& path);
/// Hash of the canonical (sorted-key, compact) dump of a config snapshot.
std::string config_hash(const nlohmann::json& config);
std::string utc_timestamp();

/// epoch,lr,trainLoss,valMetric
std::string metrics_csv(const std::vector<MetricRow>& rows);

/// Accepts a manifest file or a run directory (uses best.json inside it).
std::filesystem::path resolve_manifest(const std::filesystem::path& p);

}  // namespace fgss::train
