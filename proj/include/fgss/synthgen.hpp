#pragma once

// Procedural floorplans with exact per-wall ground truth.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fgss/raster.hpp"

namespace fgss::synth {

enum class Texture : std::uint8_t { solid = 1, double_line = 2, hatched = 4 };

std::string to_string(Texture t);
Texture texture_from_string(const std::string& s);

struct IntRange {
  int lo = 0;
  int hi = 0;
};

struct SynthSpec {
  std::uint64_t seed = 0;
  int canvas_size = 768;
  IntRange room_rows{2, 4};
  IntRange room_cols{2, 4};
  IntRange wall_width{6, 30};
  std::vector<Texture> textures{Texture::solid, Texture::double_line, Texture::hatched};
  double door_gap_prob = 0.3;
  double diagonal_wall_prob = 0.1;
};

/// Throws std::invalid_argument when the spec violates its invariants or the
/// canvas cannot hold the largest room grid the spec allows.
void validate(const SynthSpec& spec);

struct WallRecord {
  BoundingBox bbox;
  double width_px = 0.0;  // true thickness
  Orientation orientation = Orientation::horizontal;
  int length_px = 0;
  bool diagonal = false;
  Texture texture = Texture::solid;
};

struct SynthSample {
  Raster image;
  BitMask mask;
  std::vector<WallRecord> walls;
};

SynthSample generate(const SynthSpec& spec);

struct Split {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
};

/// 70/15/15 contiguous split; train gets the remainder so it is never empty.
Split split_indices(int count);

struct ManifestEntry {
  int index = 0;
  std::uint64_t seed = 0;
  std::string image;  // relative to the dataset root
  std::string mask;
  std::vector<WallRecord> walls;
};

struct DatasetManifest {
  int version = 1;
  SynthSpec spec;
  std::vector<ManifestEntry> entries;
  Split split;
};

/// Writes <dir>/images/NNNN.png, <dir>/masks/NNNN.png and <dir>/manifest.json.
/// Sample i uses seed spec.seed + i. `threads` > 1 renders in parallel; the
/// manifest is always in index order.
DatasetManifest generate_set(const SynthSpec& spec, int count, const std::filesystem::path& out_dir,
                             int threads = 1);

DatasetManifest load_manifest(const std::filesystem::path& dir);
std::string manifest_json(const DatasetManifest& m);

/// Sample index → spec that regenerates it.
SynthSpec spec_for_entry(const DatasetManifest& m, const ManifestEntry& e);

}  // namespace fgss::synth
