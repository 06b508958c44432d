#include "fgss/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "fgss/nn/optim.hpp"
#include "fgss/train/archive.hpp"

namespace fgss::train {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Tensor;

json to_json(const model::FeatExConfig& c) {
  return {{"inputSide", c.input_side},         {"inChannels", c.in_channels},
          {"stageChannels", c.stage_channels}, {"convsPerStage", c.convs_per_stage},
          {"widthClasses", c.width_classes},   {"dropout", c.dropout}};
}

model::FeatExConfig featx_config_from_json(const json& j) {
  model::FeatExConfig c;
  c.input_side = j.value("inputSide", c.input_side);
  c.in_channels = j.value("inChannels", c.in_channels);
  c.stage_channels = j.value("stageChannels", c.stage_channels);
  c.convs_per_stage = j.value("convsPerStage", c.convs_per_stage);
  c.width_classes = j.value("widthClasses", c.width_classes);
  c.dropout = j.value("dropout", c.dropout);
  c.validate();
  return c;
}

json to_json(const model::SegmenterConfig& c) {
  return {{"variant", model::to_string(c.variant)}, {"base", c.base},
          {"stages", c.stages},                     {"tile", c.tile},
          {"inChannels", c.in_channels},            {"withRec", c.with_rec},
          {"injectedChannels", c.injected_channels}, {"e3Plan", c.e3_plan}};
}

model::SegmenterConfig seg_config_from_json(const json& j) {
  model::SegmenterConfig c;
  c.variant = model::variant_from_string(j.value("variant", std::string("fgss")));
  c.base = j.value("base", c.base);
  c.stages = j.value("stages", c.stages);
  c.tile = j.value("tile", c.tile);
  c.in_channels = j.value("inChannels", c.in_channels);
  c.with_rec = j.value("withRec", c.with_rec);
  c.injected_channels = j.value("injectedChannels", c.injected_channels);
  c.e3_plan = j.value("e3Plan", c.e3_plan);
  c.validate();
  return c;
}

json FeatxTrainConfig::to_json() const {
  return {{"model", train::to_json(model)}, {"epochs", epochs}, {"lr", lr},   {"decay", decay},
          {"decayEvery", decay_every},      {"batch", batch},   {"w1", w1},   {"w2", w2},
          {"seed", seed}};
}

FeatxTrainConfig FeatxTrainConfig::from_json(const json& j) {
  FeatxTrainConfig c;
  if (j.contains("model")) c.model = featx_config_from_json(j["model"]);
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.decay = j.value("decay", c.decay);
  c.decay_every = j.value("decayEvery", c.decay_every);
  c.batch = j.value("batch", c.batch);
  c.w1 = j.value("w1", c.w1);
  c.w2 = j.value("w2", c.w2);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

void FeatxTrainConfig::validate() const {
  model.validate();
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
  if (!(decay > 0 && decay <= 1)) throw std::invalid_argument("decay must lie in (0, 1]");
  if (decay_every < 1) throw std::invalid_argument("decayEvery must be >= 1");
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (w1 < 0 || w2 < 0) throw std::invalid_argument("loss weights must be >= 0");
}

json SegTrainConfig::to_json() const {
  return {{"model", train::to_json(model)},
          {"epochs", epochs},
          {"lr", lr},
          {"decay", decay},
          {"decayEvery", decay_every},
          {"batch", batch},
          {"w3", w3},
          {"w4", w4},
          {"rotateProb", rotate_prob},
          {"tilesPerPlan", tiles_per_plan},
          {"freezeE2", freeze_e2},
          {"valEvery", val_every},
          {"seed", seed},
          {"valStride", val_infer.stride},
          {"valThreshold", val_infer.threshold}};
}

SegTrainConfig SegTrainConfig::from_json(const json& j) {
  SegTrainConfig c;
  if (j.contains("model")) c.model = seg_config_from_json(j["model"]);
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.decay = j.value("decay", c.decay);
  c.decay_every = j.value("decayEvery", c.decay_every);
  c.batch = j.value("batch", c.batch);
  c.w3 = j.value("w3", c.w3);
  c.w4 = j.value("w4", c.w4);
  c.rotate_prob = j.value("rotateProb", c.rotate_prob);
  c.tiles_per_plan = j.value("tilesPerPlan", c.tiles_per_plan);
  c.freeze_e2 = j.value("freezeE2", c.freeze_e2);
  c.val_every = j.value("valEvery", c.val_every);
  c.seed = j.value("seed", c.seed);
  c.val_infer.stride = j.value("valStride", c.val_infer.stride);
  c.val_infer.threshold = j.value("valThreshold", c.val_infer.threshold);
  c.validate();
  return c;
}

void SegTrainConfig::validate() const {
  model.validate();
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
  if (!(decay > 0 && decay <= 1)) throw std::invalid_argument("decay must lie in (0, 1]");
  if (decay_every < 1) throw std::invalid_argument("decayEvery must be >= 1");
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (w3 < 0 || w4 < 0) throw std::invalid_argument("loss weights must be >= 0");
  if (rotate_prob < 0 || rotate_prob > 1) throw std::invalid_argument("rotateProb must lie in [0, 1]");
  if (tiles_per_plan < 1) throw std::invalid_argument("tilesPerPlan must be >= 1");
  if (val_every < 1) throw std::invalid_argument("valEvery must be >= 1");
  infer::InferenceConfig v = val_infer;
  v.tile = model.tile;
  v.validate();
}

Tensor<float> stack_rasters(const std::vector<const Raster*>& rasters) {
  if (rasters.empty()) return {};
  const int h = rasters[0]->height(), w = rasters[0]->width();
  Tensor<float> t(static_cast<int>(rasters.size()), 1, h, w);
  for (std::size_t i = 0; i < rasters.size(); ++i) {
    const Raster& r = *rasters[i];
    if (r.height() != h || r.width() != w || r.channels() != 1) {
      throw nn::ShapeError("stack_rasters: rasters differ in size or are not single-channel");
    }
    std::copy(r.data().begin(), r.data().end(), t.sample(static_cast<int>(i)));
  }
  return t;
}

Tensor<float> stack_masks(const std::vector<const BitMask*>& masks) {
  if (masks.empty()) return {};
  const int h = masks[0]->height(), w = masks[0]->width();
  Tensor<float> t(static_cast<int>(masks.size()), 1, h, w);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const BitMask& m = *masks[i];
    if (m.height() != h || m.width() != w) throw nn::ShapeError("stack_masks: masks differ in size");
    float* dst = t.sample(static_cast<int>(i));
    const auto bits = m.bits();
    for (std::size_t k = 0; k < bits.size(); ++k) dst[k] = bits[k] ? 1.0f : 0.0f;
  }
  return t;
}

namespace {

// Step counter as four 16-bit chunks so it survives the f32 archive exactly.
void store_steps(TensorArchive& ar, std::int64_t steps) {
  std::vector<float> v(4);
  auto u = static_cast<std::uint64_t>(steps);
  for (auto& f : v) {
    f = static_cast<float>(u & 0xFFFF);
    u >>= 16;
  }
  ar.add("optim.steps", {4}, v);
}

std::int64_t restore_steps(const TensorArchive& ar) {
  const NamedTensor* t = ar.find("optim.steps");
  if (!t || t->data.size() != 4) throw ArchiveError("archive lacks optimiser step counter (optim.steps)");
  std::uint64_t u = 0;
  for (int i = 3; i >= 0; --i) u = (u << 16) | static_cast<std::uint64_t>(t->data[static_cast<std::size_t>(i)]);
  return static_cast<std::int64_t>(u);
}

std::vector<nn::BufferRef<float>> prefixed(std::vector<nn::BufferRef<float>> refs, const std::string& prefix) {
  for (auto& r : refs) r.name = prefix + r.name;
  return refs;
}

std::string decay_note(double decay, int every) {
  return "learning rate x" + json(decay).dump() + " every " + std::to_string(every) + " epochs; no L2 weight decay";
}

void save(const fs::path& dir, const std::string& stem, CheckpointManifest m, const TensorArchive& ar) {
  m.weight_archive = stem + ".tensors";
  m.created_at = utc_timestamp();
  ar.write(dir / m.weight_archive);
  m.write(dir / (stem + ".json"));
}

void write_metrics(const fs::path& dir, const std::vector<MetricRow>& rows) {
  std::ofstream f(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
  if (!f) throw TrainError("cannot write " + (dir / "metrics.csv").string());
  f << metrics_csv(rows);
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i - 1)));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

struct ResumeState {
  int start = 0;
  std::vector<MetricRow> history;
  bool have_best = false;
  double best = 0.0;
};

ResumeState load_resume(const RunOptions& opt, const std::string& phase, const std::string& hash,
                        nn::ParamList<float>& list, nn::Adam& adam, bool higher_is_better) {
  ResumeState rs;
  if (!opt.resume) return rs;
  const fs::path last = opt.out_dir / "last.json";
  if (!fs::exists(last)) throw TrainError("cannot resume: " + last.string() + " does not exist");
  const auto m = CheckpointManifest::read(last);
  if (m.phase != phase) throw TrainError("cannot resume: checkpoint phase is " + m.phase + ", expected " + phase);
  if (m.config_hash != hash) throw TrainError("cannot resume: configuration differs from the checkpoint's");
  const auto ar = TensorArchive::read(opt.out_dir / m.weight_archive);
  restore(ar, list);
  restore(ar, prefixed(adam.state(), "optim."));
  adam.set_steps(restore_steps(ar));
  rs.start = m.epoch;
  rs.history = m.history;
  const fs::path best = opt.out_dir / "best.json";
  if (fs::exists(best)) {
    const auto b = CheckpointManifest::read(best);
    if (!b.history.empty()) {
      const auto& row = b.history.back();
      if (higher_is_better && row.val_metric) {
        rs.have_best = true;
        rs.best = *row.val_metric;
      } else if (!higher_is_better) {
        rs.have_best = true;
        rs.best = row.val_loss;
      }
    }
  }
  return rs;
}

// ---------------------------------------------------------------- featx

struct FeatxEval {
  double loss = 0.0, mse = 0.0, top1 = 0.0, within1 = 0.0;
};

FeatxEval eval_featx(const model::FeatureExtractor<float>& fx, const std::vector<CropSample>& set,
                     const FeatxTrainConfig& cfg) {
  FeatxEval r;
  if (set.empty()) return r;
  constexpr std::size_t kChunk = 64;
  const int classes = cfg.model.width_classes;
  for (std::size_t at = 0; at < set.size(); at += kChunk) {
    const std::size_t n = std::min(kChunk, set.size() - at);
    std::vector<const Raster*> rs;
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) {
      rs.push_back(&set[at + i].crop);
      labels.push_back(model::width_class(set[at + i].width_px, classes));
    }
    const Tensor<float> x = stack_rasters(rs);
    const Tensor<float> z = fx.encode(x);
    const Tensor<float> recon = fx.decode(z);
    const Tensor<float> logits = fx.predict_width(z);
    const auto l = model::featex_loss(recon, x, logits, labels, cfg.w1, cfg.w2);
    r.loss += l.total * static_cast<double>(n);
    r.mse += l.mse * static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = logits.sample(static_cast<int>(i));
      const int pred = static_cast<int>(std::max_element(p, p + classes) - p);
      if (pred == labels[i]) r.top1 += 1;
      if (std::abs(pred - labels[i]) <= 1) r.within1 += 1;
    }
  }
  const double n = static_cast<double>(set.size());
  r.loss /= n;
  r.mse /= n;
  r.top1 /= n;
  r.within1 /= n;
  return r;
}

void check_crops(const std::vector<CropSample>& set, int side, const char* what) {
  for (const auto& s : set) {
    if (s.crop.height() != side || s.crop.width() != side || s.crop.channels() != 1) {
      throw TrainError(std::string(what) + " crop of plan " + s.plan_id + " is not " + std::to_string(side) + "x" +
                       std::to_string(side) + " single-channel");
    }
  }
}

}  // namespace

CheckpointManifest train_feature_extractor(const std::vector<CropSample>& train, const std::vector<CropSample>& val,
                                           const FeatxTrainConfig& cfg, const RunOptions& opt) {
  cfg.validate();
  if (train.empty()) throw TrainError("feature-extractor training needs at least one crop");
  check_crops(train, cfg.model.input_side, "train");
  check_crops(val, cfg.model.input_side, "val");
  fs::create_directories(opt.out_dir);

  const json snapshot = {{"phase", "featx"}, {"train", cfg.to_json()}};
  const std::string hash = config_hash(snapshot);

  model::FeatureExtractor<float> fx(cfg.model);
  Rng init(Rng::mix(cfg.seed, 1));
  fx.init(init);
  nn::ParamList<float> list;
  fx.collect(list);
  nn::Adam adam(list, {.lr = cfg.lr});
  ResumeState rs = load_resume(opt, "featx", hash, list, adam, false);

  CheckpointManifest m;
  m.phase = "featx";
  m.variant = "featx";
  m.config = snapshot;
  m.config_hash = hash;
  m.dataset_hash = opt.dataset_hash;
  m.notes = decay_note(cfg.decay, cfg.decay_every);
  m.history = rs.history;
  m.epoch = rs.start;

  const int classes = cfg.model.width_classes;
  int ran = 0;
  for (int e = rs.start; e < cfg.epochs; ++e) {
    if (opt.stop_after > 0 && ran >= opt.stop_after) break;
    const double lr = nn::apply_decay(cfg.lr, e, cfg.decay, cfg.decay_every);
    adam.set_lr(lr);
    Rng er(Rng::mix(cfg.seed, 1000 + static_cast<std::uint64_t>(e)));
    const auto order = shuffled(train.size(), er);
    double loss_sum = 0.0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t n = std::min(static_cast<std::size_t>(cfg.batch), order.size() - at);
      std::vector<const Raster*> rs_;
      std::vector<int> labels;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& s = train[order[at + i]];
        rs_.push_back(&s.crop);
        labels.push_back(model::width_class(s.width_px, classes));
      }
      const Tensor<float> x = stack_rasters(rs_);
      auto out = fx.forward(x, er);
      auto l = model::featex_loss(out.recon, x, out.logits, labels, cfg.w1, cfg.w2);
      adam.zero_grad();
      fx.backward(l.d_recon, l.d_logits);
      adam.step();
      loss_sum += l.total * static_cast<double>(n);
    }

    MetricRow row;
    row.epoch = e + 1;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(train.size());
    const FeatxEval ev = eval_featx(fx, val.empty() ? train : val, cfg);
    row.val_loss = ev.loss;
    row.val_metric = ev.within1;
    row.recon_mse = ev.mse;
    row.width_top1 = ev.top1;
    row.width_within1 = ev.within1;
    m.history.push_back(row);
    m.epoch = e + 1;

    TensorArchive weights;
    store(weights, list);
    TensorArchive last = weights;
    store(last, prefixed(adam.state(), "optim."));
    store_steps(last, adam.steps());
    save(opt.out_dir, "last", m, last);
    if (!rs.have_best || row.val_loss < rs.best) {
      rs.have_best = true;
      rs.best = row.val_loss;
      save(opt.out_dir, "best", m, weights);
    }
    write_metrics(opt.out_dir, m.history);
    if (opt.on_epoch) opt.on_epoch(row);
    ++ran;
    if (opt.stop_when && opt.stop_when(row)) break;
  }
  return m;
}

// ---------------------------------------------------------------- segmenter

namespace {

// Wraps the in-training modules for validation inference.
class TrainView : public infer::TileModel {
 public:
  TrainView(const model::Segmenter<float>& seg, const model::FeatureExtractor<float>* fx) : seg_(seg), fx_(fx) {}
  int tile_side() const override { return seg_.config().tile; }
  bool needs_injection() const override { return seg_.config().fused(); }
  Tensor<float> encode_crops(const pipeline::WallCropSet& crops) const override {
    return model::encode_crop_set(*fx_, crops);
  }
  Tensor<float> tile_logits(const Tensor<float>& tiles, const Tensor<float>* injected) const override {
    return seg_.infer(tiles, injected).logits;
  }

 private:
  const model::Segmenter<float>& seg_;
  const model::FeatureExtractor<float>* fx_;
};

void check_fusion(const model::SegmenterConfig& sc, const model::FeatExConfig& fc) {
  const int expected = 5 * fc.latent_channels();
  if (sc.injected_channels != expected) {
    throw TrainError("segmenter expects " + std::to_string(sc.injected_channels) +
                     " injected channels but the feature extractor yields " + std::to_string(expected));
  }
  if (sc.bottleneck_side() != fc.latent_side()) {
    throw TrainError("segmenter bottleneck is " + std::to_string(sc.bottleneck_side()) +
                     " px but the crop latent is " + std::to_string(fc.latent_side()) + " px");
  }
}

// Gathers per-tile latents [B, C, s, s] from per-plan cached latents.
Tensor<float> gather_latents(const std::vector<Tensor<float>>& cache, const std::vector<int>& plan_of) {
  const auto& first = cache[static_cast<std::size_t>(plan_of[0])];
  Tensor<float> z(static_cast<int>(plan_of.size()), first.c(), first.h(), first.w());
  for (std::size_t i = 0; i < plan_of.size(); ++i) {
    const auto& src = cache[static_cast<std::size_t>(plan_of[i])];
    std::copy(src.vec().begin(), src.vec().end(), z.sample(static_cast<int>(i)));
  }
  return z;
}

Tensor<float> reshaped(const Tensor<float>& t, int n, int c, int h, int w) {
  Tensor<float> out(n, c, h, w);
  if (out.numel() != t.numel()) throw nn::ShapeError("reshape: element count differs");
  std::copy(t.vec().begin(), t.vec().end(), out.data());
  return out;
}

}  // namespace

CheckpointManifest train_segmenter(const std::vector<PreparedPlan>& train, const std::vector<PreparedPlan>& val,
                                   const model::FeatureExtractor<float>* fx_in, const SegTrainConfig& cfg,
                                   const RunOptions& opt) {
  cfg.validate();
  const auto& sc = cfg.model;
  if (train.empty()) throw TrainError("segmenter training needs at least one plan");
  if (sc.fused() && !fx_in) throw TrainError("the fused variant needs a trained feature extractor");
  std::unique_ptr<model::FeatureExtractor<float>> fx;
  if (sc.fused()) {
    check_fusion(sc, fx_in->config());
    fx = std::make_unique<model::FeatureExtractor<float>>(*fx_in);
  }
  fs::create_directories(opt.out_dir);

  json snapshot = {{"phase", "segmenter"}, {"train", cfg.to_json()}};
  if (fx) snapshot["featx"] = to_json(fx->config());
  const std::string hash = config_hash(snapshot);

  model::Segmenter<float> seg(sc);
  Rng init(Rng::mix(cfg.seed, 2));
  seg.init(init);

  nn::ParamList<float> trainable;
  seg.collect(trainable);
  const bool tune_e2 = fx && !cfg.freeze_e2;
  if (tune_e2) fx->collect_encoder(trainable);
  // Everything a checkpoint holds: segmenter, crop encoder and width head.
  nn::ParamList<float> saved;
  seg.collect(saved);
  if (fx) {
    fx->collect_encoder(saved);
    fx->collect_head(saved);
  }

  nn::Adam adam(trainable, {.lr = cfg.lr});
  ResumeState rs = load_resume(opt, "segmenter", hash, saved, adam, true);

  CheckpointManifest m;
  m.phase = "segmenter";
  m.variant = model::to_string(sc.variant);
  m.config = snapshot;
  m.config_hash = hash;
  m.dataset_hash = opt.dataset_hash;
  m.notes = decay_note(cfg.decay, cfg.decay_every) + (tune_e2 ? "; crop encoder fine-tuned" : "");
  m.history = rs.history;
  m.epoch = rs.start;

  pipeline::TilePolicy policy;
  policy.side = sc.tile;

  // Fixed validation tiles for the loss column.
  std::vector<pipeline::TrainTile> val_tiles;
  std::vector<int> val_tile_plan;
  {
    Rng vr(Rng::mix(cfg.seed, 3));
    for (std::size_t i = 0; i < val.size(); ++i) {
      auto t = pipeline::make_train_tiles(val[i].image, val[i].mask, vr, cfg.tiles_per_plan, static_cast<int>(i), policy);
      for (auto& tt : t) {
        val_tiles.push_back(std::move(tt));
        val_tile_plan.push_back(static_cast<int>(i));
      }
    }
  }

  std::vector<Tensor<float>> train_latents;
  auto refresh_latents = [&](std::vector<Tensor<float>>& cache, const std::vector<PreparedPlan>& plans) {
    cache.clear();
    if (!fx) return;
    for (const auto& p : plans) cache.push_back(model::encode_crop_set(*fx, p.crops));
  };
  if (fx && cfg.freeze_e2) refresh_latents(train_latents, train);

  int ran = 0;
  for (int e = rs.start; e < cfg.epochs; ++e) {
    if (opt.stop_after > 0 && ran >= opt.stop_after) break;
    const double lr = nn::apply_decay(cfg.lr, e, cfg.decay, cfg.decay_every);
    adam.set_lr(lr);
    const std::uint64_t eseed = Rng::mix(cfg.seed, 1000 + static_cast<std::uint64_t>(e));
    Rng er(eseed);

    std::vector<pipeline::TrainTile> tiles;
    for (std::size_t i = 0; i < train.size(); ++i) {
      Rng pr(Rng::mix(eseed, i));
      const auto aug = pipeline::augment_rotate(train[i].image, train[i].mask, pr, cfg.rotate_prob);
      auto t = pipeline::make_train_tiles(aug.image, aug.mask, pr, cfg.tiles_per_plan, static_cast<int>(i), policy);
      for (auto& tt : t) tiles.push_back(std::move(tt));
    }
    const auto order = shuffled(tiles.size(), er);

    double loss_sum = 0.0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t n = std::min(static_cast<std::size_t>(cfg.batch), order.size() - at);
      std::vector<const Raster*> ims;
      std::vector<const BitMask*> ms;
      std::vector<int> plan_of;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& t = tiles[order[at + i]];
        ims.push_back(&t.image);
        ms.push_back(&t.mask);
        plan_of.push_back(t.source_id);
      }
      const Tensor<float> x = stack_rasters(ims);
      const Tensor<float> y = stack_masks(ms);

      Tensor<float> z;
      if (fx && cfg.freeze_e2) {
        z = gather_latents(train_latents, plan_of);
      } else if (fx) {
        std::vector<const Raster*> crops;
        for (int p : plan_of) {
          for (auto tag : pipeline::kTagOrder) crops.push_back(&train[static_cast<std::size_t>(p)].crops[tag].raster);
        }
        const Tensor<float> zc = fx->encode_train(stack_rasters(crops));
        z = reshaped(zc, static_cast<int>(n), 5 * zc.c(), zc.h(), zc.w());
      }

      const Tensor<float>* zp = fx ? &z : nullptr;
      auto out = seg.forward(x, zp);
      const bool rec = out.has_e3;
      // The latent acts as a fixed target for the reconstruction term.
      auto l = model::seg_loss(out.logits, y, rec ? &out.e3 : nullptr, rec ? zp : nullptr, cfg.w3, cfg.w4);
      adam.zero_grad();
      const Tensor<float> dz = seg.backward(l.d_logits, rec ? &l.d_e3 : nullptr);
      if (tune_e2) {
        fx->backward_encoder(reshaped(dz, static_cast<int>(n) * 5, dz.c() / 5, dz.h(), dz.w()));
      }
      adam.step();
      loss_sum += l.total * static_cast<double>(n);
    }

    MetricRow row;
    row.epoch = e + 1;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(tiles.size());

    // Validation loss on the fixed tiles.
    if (!val_tiles.empty()) {
      std::vector<Tensor<float>> val_latents;
      refresh_latents(val_latents, val);
      double vsum = 0.0;
      for (std::size_t at = 0; at < val_tiles.size(); at += static_cast<std::size_t>(cfg.batch)) {
        const std::size_t n = std::min(static_cast<std::size_t>(cfg.batch), val_tiles.size() - at);
        std::vector<const Raster*> ims;
        std::vector<const BitMask*> ms;
        std::vector<int> plan_of;
        for (std::size_t i = 0; i < n; ++i) {
          ims.push_back(&val_tiles[at + i].image);
          ms.push_back(&val_tiles[at + i].mask);
          plan_of.push_back(val_tile_plan[at + i]);
        }
        Tensor<float> z;
        if (fx) z = gather_latents(val_latents, plan_of);
        const auto out = seg.infer(stack_rasters(ims), fx ? &z : nullptr);
        const auto l = model::seg_loss(out.logits, stack_masks(ms), out.has_e3 ? &out.e3 : nullptr,
                                       out.has_e3 ? &z : nullptr, cfg.w3, cfg.w4);
        vsum += l.total * static_cast<double>(n);
      }
      row.val_loss = vsum / static_cast<double>(val_tiles.size());

      const bool due = (e + 1) % cfg.val_every == 0 || e + 1 == cfg.epochs;
      if (due) {
        const TrainView view(seg, fx.get());
        double iou_sum = 0.0;
        for (std::size_t i = 0; i < val.size(); ++i) {
          const auto r = infer::segment_with_latent(val[i].image, fx ? &val_latents[i] : nullptr, view, cfg.val_infer);
          iou_sum += iou(r.mask, val[i].mask);
        }
        row.val_metric = iou_sum / static_cast<double>(val.size());
      }
    } else {
      row.val_loss = row.train_loss;
    }
    m.history.push_back(row);
    m.epoch = e + 1;

    TensorArchive weights;
    store(weights, saved);
    TensorArchive last = weights;
    store(last, prefixed(adam.state(), "optim."));
    store_steps(last, adam.steps());
    save(opt.out_dir, "last", m, last);
    bool better = false;
    if (row.val_metric) {
      better = !rs.have_best || *row.val_metric > rs.best;
      if (better) rs.best = *row.val_metric;
    } else if (val.empty()) {
      // No validation plans: keep the lowest training loss, stored negated.
      better = !rs.have_best || -row.train_loss > rs.best;
      if (better) rs.best = -row.train_loss;
    }
    if (better) {
      rs.have_best = true;
      save(opt.out_dir, "best", m, weights);
    }
    write_metrics(opt.out_dir, m.history);
    if (opt.on_epoch) opt.on_epoch(row);
    ++ran;
    if (opt.stop_when && opt.stop_when(row)) break;
  }
  if (!fs::exists(opt.out_dir / "best.json") && m.epoch > 0) {
    TensorArchive weights;
    store(weights, saved);
    save(opt.out_dir, "best", m, weights);
  }
  return m;
}

std::unique_ptr<model::FeatureExtractor<float>> load_featx(const fs::path& manifest, CheckpointManifest* out) {
  const fs::path path = resolve_manifest(manifest);
  const auto m = CheckpointManifest::read(path);
  if (m.phase != "featx") throw TrainError(path.string() + " is a " + m.phase + " checkpoint, expected featx");
  const auto cfg = FeatxTrainConfig::from_json(m.config.at("train"));
  auto fx = std::make_unique<model::FeatureExtractor<float>>(cfg.model);
  nn::ParamList<float> list;
  fx->collect(list);
  restore(TensorArchive::read(path.parent_path() / m.weight_archive), list);
  if (out) *out = m;
  return fx;
}

std::unique_ptr<infer::SegModel> load_seg_model(const fs::path& manifest, CheckpointManifest* out) {
  const fs::path path = resolve_manifest(manifest);
  const auto m = CheckpointManifest::read(path);
  if (m.phase != "segmenter") throw TrainError(path.string() + " is a " + m.phase + " checkpoint, expected segmenter");
  const auto cfg = SegTrainConfig::from_json(m.config.at("train"));
  model::FeatExConfig fc;
  if (cfg.model.fused()) {
    if (!m.config.contains("featx")) throw TrainError(path.string() + " lacks the feature-extractor config");
    fc = featx_config_from_json(m.config["featx"]);
  }
  auto model = std::make_unique<infer::SegModel>(cfg.model, fc);
  nn::ParamList<float> list;
  model->segmenter().collect(list);
  if (auto* fx = model->featx()) {
    fx->collect_encoder(list);
    fx->collect_head(list);
  }
  restore(TensorArchive::read(path.parent_path() / m.weight_archive), list);
  if (out) *out = m;
  return model;
}

}  // namespace fgss::train
