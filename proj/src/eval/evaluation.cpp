#include "fgss/eval/evaluation.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "fgss/train/trainer.hpp"

namespace fgss::eval {

using nlohmann::json;
using nn::Tensor;

std::string to_string(Ablation a) { return a == Ablation::grey ? "grey" : "none"; }

Ablation ablation_from_string(const std::string& s) {
  if (s == "none") return Ablation::none;
  if (s == "grey" || s == "gray") return Ablation::grey;
  throw std::invalid_argument("unknown ablation '" + s + "' (expected none or grey)");
}

json EvalReport::to_json() const {
  json rows = json::array();
  for (const auto& p : plans) rows.push_back({{"floorplanId", p.id}, {"iou", p.iou}, {"millis", p.millis}, {"tiles", p.tiles}});
  return {{"model", model},
          {"split", split},
          {"ablation", eval::to_string(config.ablation)},
          {"config",
           {{"stride", config.infer.stride},
            {"threshold", config.infer.threshold},
            {"threads", config.infer.threads},
            {"greySeed", config.grey_seed}}},
          {"meanIou", mean_iou},
          {"count", plans.size()},
          {"totalMillis", total_millis},
          {"perFloorplan", rows}};
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "floorplanId,iou,millis,tiles\n";
  for (const auto& p : plans) os << p.id << ',' << p.iou << ',' << p.millis << ',' << p.tiles << '\n';
  return os.str();
}

pipeline::WallCropSet grey_crop_set(const pipeline::WallCropSet& set, Rng& rng) {
  pipeline::WallCropSet out = set;
  for (auto& c : out.crops) {
    const auto level = static_cast<float>(rng.uniform(0.2, 0.8));
    for (float& v : c.raster.data()) v = level;
  }
  return out;
}

EvalReport evaluate_dataset(const std::vector<train::PreparedPlan>& plans, const infer::TileModel& model,
                            const EvalConfig& cfg, const std::string& model_label, const std::string& split) {
  EvalReport r;
  r.model = model_label;
  r.split = split;
  r.config = cfg;
  double sum = 0.0;
  for (const auto& p : plans) {
    const pipeline::WallCropSet* crops = nullptr;
    pipeline::WallCropSet grey;
    if (model.needs_injection()) {
      crops = &p.crops;
      if (cfg.ablation == Ablation::grey) {
        Rng g(Rng::mix(cfg.grey_seed, static_cast<std::uint64_t>(p.index)));
        grey = grey_crop_set(p.crops, g);
        crops = &grey;
      }
    }
    const auto res = infer::segment_floorplan(p.image, crops, model, cfg.infer);
    PlanScore s{p.id, iou(res.mask, p.mask), res.millis, res.tiles};
    sum += s.iou;
    r.total_millis += s.millis;
    r.plans.push_back(s);
  }
  r.mean_iou = plans.empty() ? 0.0 : sum / static_cast<double>(plans.size());
  return r;
}

json WidthDeviationHistogram::to_json() const {
  json bins = json::array();
  for (const auto& [d, c] : counts) bins.push_back({{"deviationPx", d}, {"count", c}});
  return {{"samples", samples}, {"within1", within1}, {"exact", exact}, {"bins", bins}};
}

std::string WidthDeviationHistogram::to_csv() const {
  std::ostringstream os;
  os << "deviationPx,count\n";
  for (const auto& [d, c] : counts) os << d << ',' << c << '\n';
  return os.str();
}

WidthDeviationHistogram width_deviation_histogram(const std::vector<int>& predicted_px,
                                                  const std::vector<int>& true_px) {
  if (predicted_px.size() != true_px.size()) throw std::invalid_argument("histogram: prediction/truth count mismatch");
  WidthDeviationHistogram h;
  h.samples = static_cast<int>(true_px.size());
  int near = 0, hit = 0;
  for (std::size_t i = 0; i < true_px.size(); ++i) {
    const int d = predicted_px[i] - true_px[i];
    ++h.counts[d];
    if (d >= -1 && d <= 1) ++near;
    if (d == 0) ++hit;
  }
  if (h.samples > 0) {
    h.within1 = static_cast<double>(near) / h.samples;
    h.exact = static_cast<double>(hit) / h.samples;
  }
  return h;
}

namespace {

template <typename F>
void in_chunks(const std::vector<train::CropSample>& samples, F&& f) {
  constexpr std::size_t kChunk = 64;
  for (std::size_t at = 0; at < samples.size(); at += kChunk) {
    const std::size_t n = std::min(kChunk, samples.size() - at);
    std::vector<const Raster*> rs;
    for (std::size_t i = 0; i < n; ++i) rs.push_back(&samples[at + i].crop);
    f(at, n, train::stack_rasters(rs));
  }
}

}  // namespace

std::vector<int> predict_widths(const model::FeatureExtractor<float>& fx, const std::vector<train::CropSample>& samples) {
  std::vector<int> out;
  const int classes = fx.config().width_classes;
  in_chunks(samples, [&](std::size_t, std::size_t n, const Tensor<float>& x) {
    const Tensor<float> logits = fx.predict_width(fx.encode(x));
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = logits.sample(static_cast<int>(i));
      out.push_back(model::class_width(static_cast<int>(std::max_element(p, p + classes) - p)));
    }
  });
  return out;
}

std::vector<std::string> latent_header(int values) {
  std::vector<std::string> h{"floorplanId", "tag", "trueWidth"};
  char buf[16];
  for (int i = 0; i < values; ++i) {
    std::snprintf(buf, sizeof buf, "z%04d", i);
    h.emplace_back(buf);
  }
  return h;
}

void export_latents(const model::FeatureExtractor<float>& fx, const std::vector<train::CropSample>& samples,
                    std::ostream& out) {
  const auto& c = fx.config();
  const int values = c.latent_channels() * c.latent_side() * c.latent_side();
  const auto header = latent_header(values);
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  char buf[32];
  in_chunks(samples, [&](std::size_t at, std::size_t n, const Tensor<float>& x) {
    const Tensor<float> z = fx.encode(x);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = samples[at + i];
      out << s.plan_id << ',' << pipeline::to_string(s.tag) << ',' << s.width_px;
      const float* v = z.sample(static_cast<int>(i));
      for (int k = 0; k < values; ++k) {
        std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(v[k]));
        out << buf;
      }
      out << '\n';
    }
  });
}

json audit_json(const std::vector<model::AuditRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    const auto& p = r.params;
    out.push_back({{"name", r.name},
                   {"params", p.total()},
                   {"mib", r.mib},
                   {"flops", r.flops},
                   {"breakdown",
                    {{"e1", p.e1}, {"bottleneck", p.bottleneck}, {"d1", p.d1}, {"out", p.out},
                     {"e3", p.e3}, {"e2", p.e2}, {"head", p.head}}}});
  }
  return out;
}

std::string audit_csv(const std::vector<model::AuditRow>& rows) {
  std::ostringstream os;
  os << "name,params,mib,flops,e1,bottleneck,d1,out,e3,e2,head\n";
  for (const auto& r : rows) {
    const auto& p = r.params;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f,%.4g", r.mib, r.flops);
    os << r.name << ',' << p.total() << ',' << buf << ',' << p.e1 << ',' << p.bottleneck << ',' << p.d1 << ','
       << p.out << ',' << p.e3 << ',' << p.e2 << ',' << p.head << '\n';
  }
  return os.str();
}

}  // namespace fgss::eval
