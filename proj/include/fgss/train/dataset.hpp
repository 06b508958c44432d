#pragma once

// Loads a generated dataset split into normalised plans with their crop sets.

#include <filesystem>
#include <string>
#include <vector>

#include "fgss/pipeline.hpp"
#include "fgss/synthgen.hpp"

namespace fgss::train {

struct PreparedPlan {
  int index = 0;
  std::string id;  // zero-padded index, as in the file names
  Raster image;    // width-normalised
  BitMask mask;
  pipeline::NormalizationResult norm;
  pipeline::WallCropSet crops;
};

std::string plan_id(int index);

PreparedPlan prepare_plan(const std::filesystem::path& root, const synth::ManifestEntry& entry);

struct PreparedSplit {
  std::vector<PreparedPlan> plans;
  std::vector<std::string> skipped;  // "id: reason" for plans that failed normalisation
};

/// `limit` > 0 keeps only the first `limit` indices.
PreparedSplit prepare_split(const std::filesystem::path& root, const synth::DatasetManifest& manifest,
                            const std::vector<int>& indices, int limit = 0);

enum class SplitName { train, val, test };
SplitName split_from_string(const std::string& s);
const std::vector<int>& split_indices(const synth::DatasetManifest& m, SplitName s);

struct CropSample {
  std::string plan_id;
  pipeline::CropTag tag = pipeline::CropTag::longest_vertical;
  Raster crop;
  int width_px = 1;  // mask-estimated width of the cropped wall
};

/// Five samples per plan, in tag order.
std::vector<CropSample> crop_samples(const std::vector<PreparedPlan>& plans);

}  // namespace fgss::train
