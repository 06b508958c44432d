#include "fgss/model/param_count.hpp"

#include <stdexcept>

namespace fgss::model {

namespace {

std::size_t conv(std::size_t in, std::size_t out, std::size_t k) { return out * in * k * k + out; }
std::size_t bn(std::size_t c) { return 2 * c; }
std::size_t cbr(std::size_t in, std::size_t out) { return conv(in, out, 3) + bn(out); }
std::size_t up(std::size_t in, std::size_t out) { return in * out * 9 + out; }

double conv_macs(double in, double out, double k, double out_side) { return out_side * out_side * in * out * k * k; }

}  // namespace

ParamBreakdown count_parameters(const SegmenterConfig& seg, const FeatExConfig& fx) {
  seg.validate();
  ParamBreakdown p;
  std::size_t cin = static_cast<std::size_t>(seg.in_channels);
  for (int i = 0; i < seg.stages; ++i) {
    const std::size_t c = static_cast<std::size_t>(seg.stage_channels(i));
    p.e1 += cbr(cin, c) + cbr(c, c);
    cin = c;
  }
  const std::size_t b = static_cast<std::size_t>(seg.bottleneck_channels());
  p.bottleneck = cbr(cin, b) + cbr(static_cast<std::size_t>(seg.fused_channels()), b);
  std::size_t cur = b;
  for (int i = seg.stages - 1; i >= 0; --i) {
    const std::size_t c = static_cast<std::size_t>(seg.stage_channels(i));
    p.d1 += up(cur, c) + cbr(2 * c, c) + cbr(c, c);
    cur = c;
  }
  p.out = conv(cur, 1, 1);
  if (seg.has_e3()) {
    std::size_t ce = cur;
    for (std::size_t i = 0; i < seg.e3_plan.size(); ++i) {
      const std::size_t c = static_cast<std::size_t>(seg.e3_plan[i]);
      p.e3 += i + 1 < seg.e3_plan.size() ? cbr(ce, c) : conv(ce, c, 3);
      ce = c;
    }
  }
  if (seg.fused()) {
    fx.validate();
    std::size_t c0 = static_cast<std::size_t>(fx.in_channels);
    for (int i = 0; i < fx.stages(); ++i) {
      for (int j = 0; j < fx.convs_per_stage[static_cast<std::size_t>(i)]; ++j) {
        const std::size_t c = static_cast<std::size_t>(fx.stage_channels[static_cast<std::size_t>(i)]);
        p.e2 += cbr(c0, c);
        c0 = c;
      }
    }
    p.head = static_cast<std::size_t>(fx.latent_channels()) * fx.width_classes + fx.width_classes;
  }
  return p;
}

std::size_t count_featx_decoder(const FeatExConfig& fx) {
  fx.validate();
  const int s = fx.stages();
  std::size_t n = 0;
  std::size_t cin = static_cast<std::size_t>(fx.latent_channels());
  for (int i = 0; i < s; ++i) {
    const std::size_t c = static_cast<std::size_t>(i + 1 < s ? fx.stage_channels[static_cast<std::size_t>(s - 2 - i)]
                                                             : fx.stage_channels[0]);
    n += up(cin, c) + conv(c, c, 3);
    cin = c;
  }
  return n + conv(cin, static_cast<std::size_t>(fx.in_channels), 1);
}

double count_macs(const SegmenterConfig& seg, const FeatExConfig& fx) {
  seg.validate();
  double m = 0.0;
  double side = seg.tile;
  double cin = seg.in_channels;
  for (int i = 0; i < seg.stages; ++i) {
    const double c = seg.stage_channels(i);
    m += conv_macs(cin, c, 3, side) + conv_macs(c, c, 3, side);
    cin = c;
    side /= 2;
  }
  const double b = seg.bottleneck_channels();
  m += conv_macs(cin, b, 3, side) + conv_macs(seg.fused_channels(), b, 3, side);
  double cur = b;
  for (int i = seg.stages - 1; i >= 0; --i) {
    const double c = seg.stage_channels(i);
    m += side * side * cur * c * 9;  // transposed conv: one k×k scatter per input pixel
    side *= 2;
    m += conv_macs(2 * c, c, 3, side) + conv_macs(c, c, 3, side);
    cur = c;
  }
  m += conv_macs(cur, 1, 1, side);
  if (seg.has_e3()) {
    double ce = cur;
    for (int c : seg.e3_plan) {
      side /= 2;
      m += conv_macs(ce, c, 3, side);
      ce = c;
    }
  }
  if (seg.fused()) {
    double s2 = fx.input_side;
    double c0 = fx.in_channels;
    double e2 = 0.0;
    for (int i = 0; i < fx.stages(); ++i) {
      for (int j = 0; j < fx.convs_per_stage[static_cast<std::size_t>(i)]; ++j) {
        const double c = fx.stage_channels[static_cast<std::size_t>(i)];
        e2 += conv_macs(c0, c, 3, s2);
        c0 = c;
      }
      s2 /= 2;
    }
    m += 5 * e2;
  }
  return m;
}

std::vector<std::string> audit_names() {
  return {"fgss16", "fgss16-norec", "fgss32", "fgss32-norec", "unet16", "unet32"};
}

SegmenterConfig config_for_name(const std::string& name) {
  const bool norec = name.ends_with("-norec");
  const std::string base = norec ? name.substr(0, name.size() - 6) : name;
  return SegmenterConfig::named(base, !norec);
}

AuditRow audit_model(const std::string& name) {
  AuditRow r;
  r.name = name;
  r.config = config_for_name(name);
  r.params = count_parameters(r.config);
  r.mib = mib(r.params.total());
  r.flops = count_macs(r.config);
  return r;
}

}  // namespace fgss::model
