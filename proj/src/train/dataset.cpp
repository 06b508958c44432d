#include "fgss/train/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "fgss/image_io.hpp"

namespace fgss::train {

std::string plan_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", index);
  return buf;
}

PreparedPlan prepare_plan(const std::filesystem::path& root, const synth::ManifestEntry& entry) {
  const Raster image = io::read_gray(root / entry.image);
  const BitMask mask = io::read_mask(root / entry.mask);
  if (image.height() != mask.height() || image.width() != mask.width()) {
    throw std::runtime_error("image/mask size mismatch for " + entry.image);
  }
  PreparedPlan p;
  p.index = entry.index;
  p.id = plan_id(entry.index);
  auto n = pipeline::normalize(image, mask);
  p.image = std::move(n.image);
  p.mask = std::move(n.mask);
  p.norm = n.result;
  p.crops = pipeline::select_wall_crops(p.image, p.mask);
  return p;
}

PreparedSplit prepare_split(const std::filesystem::path& root, const synth::DatasetManifest& manifest,
                            const std::vector<int>& indices, int limit) {
  PreparedSplit out;
  for (int idx : indices) {
    if (limit > 0 && static_cast<int>(out.plans.size()) >= limit) break;
    if (idx < 0 || idx >= static_cast<int>(manifest.entries.size())) {
      throw std::out_of_range("split index " + std::to_string(idx) + " outside manifest");
    }
    try {
      out.plans.push_back(prepare_plan(root, manifest.entries[static_cast<std::size_t>(idx)]));
    } catch (const pipeline::PipelineError& e) {
      out.skipped.push_back(plan_id(idx) + ": " + e.what());
    }
  }
  return out;
}

SplitName split_from_string(const std::string& s) {
  if (s == "train") return SplitName::train;
  if (s == "val") return SplitName::val;
  if (s == "test") return SplitName::test;
  throw std::invalid_argument("unknown split '" + s + "' (expected train, val or test)");
}

const std::vector<int>& split_indices(const synth::DatasetManifest& m, SplitName s) {
  switch (s) {
    case SplitName::train:
      return m.split.train;
    case SplitName::val:
      return m.split.val;
    case SplitName::test:
      break;
  }
  return m.split.test;
}

std::vector<CropSample> crop_samples(const std::vector<PreparedPlan>& plans) {
  std::vector<CropSample> out;
  for (const auto& p : plans) {
    for (auto tag : pipeline::kTagOrder) {
      const auto& c = p.crops[tag];
      out.push_back({p.id, tag, c.raster, std::max(1, static_cast<int>(std::lround(c.width_px)))});
    }
  }
  return out;
}

}  // namespace fgss::train
