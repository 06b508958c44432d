#pragma once

// Closed-form parameter, size and multiply-accumulate counts. Nothing here
// allocates weights, so the 600M-parameter configurations audit instantly.

#include <cstddef>
#include <string>
#include <vector>

#include "fgss/model/featx.hpp"
#include "fgss/model/segmenter.hpp"

namespace fgss::model {

struct ParamBreakdown {
  std::size_t e1 = 0;          // encoder stages
  std::size_t bottleneck = 0;  // both bottleneck convs (second one sees the fused block)
  std::size_t d1 = 0;
  std::size_t out = 0;
  std::size_t e3 = 0;
  std::size_t e2 = 0;    // crop encoder, fgss only
  std::size_t head = 0;  // width head, fgss only
  std::size_t total() const { return e1 + bottleneck + d1 + out + e3 + e2 + head; }
};

ParamBreakdown count_parameters(const SegmenterConfig& seg, const FeatExConfig& fx = {});

/// Parameters of the crop decoder, which is dropped once the extractor is trained.
std::size_t count_featx_decoder(const FeatExConfig& fx = {});

/// float32 footprint in MiB.
inline double mib(std::size_t params) { return static_cast<double>(params) * 4.0 / (1024.0 * 1024.0); }

/// Multiply-accumulates for one tile forward pass, plus the five crop
/// encodings for fgss variants.
double count_macs(const SegmenterConfig& seg, const FeatExConfig& fx = {});

struct AuditRow {
  std::string name;
  SegmenterConfig config;
  ParamBreakdown params;
  double mib = 0.0;
  double flops = 0.0;  // multiply-accumulate count
};

/// fgss16, fgss16-norec, fgss32, fgss32-norec, unet16, unet32.
std::vector<std::string> audit_names();
SegmenterConfig config_for_name(const std::string& name);
AuditRow audit_model(const std::string& name);

}  // namespace fgss::model
