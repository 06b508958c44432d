#include <doctest.h>

#include <cmath>
#include <fstream>

#include "fgss/nn/optim.hpp"
#include "fgss/train/trainer.hpp"
#include "util.hpp"

using namespace fgss;
using namespace fgss::train;
namespace fs = std::filesystem;

namespace {

struct Toy {
  fs::path root;
  synth::DatasetManifest manifest;
  std::vector<PreparedPlan> train, val;
};

// Ten small plans, generated once per test binary.
const Toy& toy() {
  static const Toy t = [] {
    Toy out;
    out.root = testutil::scratch("toyset");
    synth::SynthSpec spec;
    spec.seed = 31;
    spec.canvas_size = 448;
    spec.room_rows = {2, 2};
    spec.room_cols = {2, 2};
    spec.wall_width = {16, 32};
    out.manifest = synth::generate_set(spec, 10, out.root);
    out.train = prepare_split(out.root, out.manifest, split_indices(out.manifest, SplitName::train), 2).plans;
    out.val = prepare_split(out.root, out.manifest, split_indices(out.manifest, SplitName::val), 1).plans;
    return out;
  }();
  return t;
}

FeatxTrainConfig small_featx() {
  FeatxTrainConfig c;
  c.model.stage_channels = {2, 4, 4, 8, 8};
  c.epochs = 1;
  c.batch = 4;
  c.seed = 3;
  return c;
}

SegTrainConfig small_seg(model::Variant v, int injected) {
  SegTrainConfig c;
  c.model.variant = v;
  c.model.base = 2;
  c.model.stages = 5;
  c.model.tile = 64;
  c.model.injected_channels = injected;
  c.model.e3_plan = {2, 2, 4, 4, injected};
  c.model.with_rec = v == model::Variant::fgss;
  c.epochs = 1;
  c.batch = 4;
  c.tiles_per_plan = 2;
  c.val_infer.stride = 48;
  c.seed = 5;
  return c;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// One trained featx shared by the segmenter tests.
const fs::path& featx_run() {
  static const fs::path dir = [] {
    const auto d = testutil::scratch("featx_shared");
    const auto samples = crop_samples(toy().train);
    train_feature_extractor(samples, crop_samples(toy().val), small_featx(), {.out_dir = d});
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("dataset preparation") {
  const auto& t = toy();
  REQUIRE(t.train.size() == 2);
  REQUIRE(t.val.size() == 1);
  CHECK(t.train[0].id == "0000");
  CHECK(plan_id(42) == "0042");
  const auto samples = crop_samples(t.train);
  CHECK(samples.size() == 10);
  for (const auto& s : samples) {
    CHECK(s.crop.height() == 64);
    CHECK(s.width_px >= 1);
  }
  CHECK(split_from_string("val") == SplitName::val);
  CHECK_THROWS(split_from_string("bogus"));
}

TEST_CASE("feature extractor: one epoch on ten samples") {
  const auto dir = testutil::scratch("featx_one");
  const auto samples = crop_samples(toy().train);
  std::vector<MetricRow> seen;
  const auto m = train_feature_extractor(samples, {}, small_featx(),
                                         {.out_dir = dir, .on_epoch = [&](const MetricRow& r) { seen.push_back(r); }});
  CHECK(m.epoch == 1);
  CHECK(m.phase == "featx");
  REQUIRE(seen.size() == 1);
  CHECK(std::isfinite(seen[0].train_loss));
  CHECK(seen[0].train_loss > 0);
  for (const char* f : {"last.json", "last.tensors", "best.json", "best.tensors", "metrics.csv"}) {
    CHECK(fs::exists(dir / f));
  }
  const auto fx = load_featx(dir);
  CHECK(fx->config().stage_channels == small_featx().model.stage_channels);
  CHECK(m.notes.find("no L2") != std::string::npos);
}

TEST_CASE("feature extractor: fixed seed is bit reproducible") {
  const auto a = testutil::scratch("featx_seed_a");
  const auto b = testutil::scratch("featx_seed_b");
  auto cfg = small_featx();
  cfg.epochs = 2;
  const auto samples = crop_samples(toy().train);
  const auto ma = train_feature_extractor(samples, {}, cfg, {.out_dir = a});
  const auto mb = train_feature_extractor(samples, {}, cfg, {.out_dir = b});
  CHECK(slurp(a / "last.tensors") == slurp(b / "last.tensors"));
  for (std::size_t i = 0; i < ma.history.size(); ++i) CHECK(ma.history[i].train_loss == mb.history[i].train_loss);
  cfg.seed = 4;
  const auto c = testutil::scratch("featx_seed_c");
  train_feature_extractor(samples, {}, cfg, {.out_dir = c});
  CHECK(slurp(a / "last.tensors") != slurp(c / "last.tensors"));
}

TEST_CASE("feature extractor: resume matches an uninterrupted run") {
  const auto full = testutil::scratch("featx_full");
  const auto part = testutil::scratch("featx_part");
  auto cfg = small_featx();
  cfg.epochs = 3;
  const auto samples = crop_samples(toy().train);
  const auto val = crop_samples(toy().val);
  const auto mf = train_feature_extractor(samples, val, cfg, {.out_dir = full});
  const auto m1 = train_feature_extractor(samples, val, cfg, {.out_dir = part, .stop_after = 1});
  CHECK(m1.epoch == 1);
  const auto m2 = train_feature_extractor(samples, val, cfg, {.out_dir = part, .resume = true});
  REQUIRE(m2.epoch == 3);
  for (int e = 0; e < 3; ++e) {
    CHECK(std::abs(m2.history[e].train_loss - mf.history[e].train_loss) < 1e-6);
    CHECK(std::abs(m2.history[e].val_loss - mf.history[e].val_loss) < 1e-6);
  }
  CHECK(slurp(full / "last.tensors") == slurp(part / "last.tensors"));

  SUBCASE("resume with a different config is refused") {
    auto other = cfg;
    other.lr = 5e-3;
    CHECK_THROWS_AS(train_feature_extractor(samples, val, other, {.out_dir = part, .resume = true}), TrainError);
  }
  SUBCASE("resume without a checkpoint is refused") {
    const auto empty = testutil::scratch("featx_empty");
    CHECK_THROWS_AS(train_feature_extractor(samples, val, cfg, {.out_dir = empty, .resume = true}), TrainError);
  }
}

TEST_CASE("segmenter: fgss trains one epoch and reloads") {
  const auto fx = load_featx(featx_run());
  const int inj = 5 * fx->config().latent_channels();
  const auto dir = testutil::scratch("seg_fgss");
  const auto cfg = small_seg(model::Variant::fgss, inj);
  const auto m = train_segmenter(toy().train, toy().val, fx.get(), cfg, {.out_dir = dir});
  CHECK(m.epoch == 1);
  REQUIRE(m.history[0].val_metric.has_value());
  CHECK(*m.history[0].val_metric >= 0.0);
  CHECK(*m.history[0].val_metric <= 1.0);
  CheckpointManifest back;
  const auto model = load_seg_model(dir, &back);
  CHECK(model->needs_injection());
  CHECK(model->tile_side() == 64);
  CHECK(back.variant == "fgss");
  REQUIRE(model->featx() != nullptr);
  // Encoder weights in the checkpoint are the ones it was trained with (frozen).
  nn::ParamList<float> a, b;
  const_cast<model::FeatureExtractor<float>&>(*fx).collect_encoder(a);
  model->featx()->collect_encoder(b);
  REQUIRE(a.params.size() == b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) CHECK(a.params[i].param->value.vec() == b.params[i].param->value.vec());
}

TEST_CASE("segmenter: seed reproducibility and resume") {
  const auto fx = load_featx(featx_run());
  auto cfg = small_seg(model::Variant::fgss, 5 * fx->config().latent_channels());
  cfg.epochs = 2;
  const auto a = testutil::scratch("seg_a");
  const auto b = testutil::scratch("seg_b");
  const auto ma = train_segmenter(toy().train, toy().val, fx.get(), cfg, {.out_dir = a});
  train_segmenter(toy().train, toy().val, fx.get(), cfg, {.out_dir = b, .stop_after = 1});
  const auto mb = train_segmenter(toy().train, toy().val, fx.get(), cfg, {.out_dir = b, .resume = true});
  REQUIRE(mb.epoch == 2);
  for (int e = 0; e < 2; ++e) CHECK(std::abs(ma.history[e].train_loss - mb.history[e].train_loss) < 1e-6);
  CHECK(slurp(a / "last.tensors") == slurp(b / "last.tensors"));
}

TEST_CASE("segmenter: fine-tuning the crop encoder changes it") {
  const auto fx = load_featx(featx_run());
  auto cfg = small_seg(model::Variant::fgss, 5 * fx->config().latent_channels());
  cfg.freeze_e2 = false;
  const auto dir = testutil::scratch("seg_tune");
  train_segmenter(toy().train, {}, fx.get(), cfg, {.out_dir = dir});
  const auto model = load_seg_model(dir / "last.json");
  nn::ParamList<float> a, b;
  const_cast<model::FeatureExtractor<float>&>(*fx).collect_encoder(a);
  model->featx()->collect_encoder(b);
  bool changed = false;
  for (std::size_t i = 0; i < a.params.size(); ++i) changed |= a.params[i].param->value.vec() != b.params[i].param->value.vec();
  CHECK(changed);
}

TEST_CASE("segmenter: unet needs no feature extractor") {
  const auto dir = testutil::scratch("seg_unet");
  const auto m = train_segmenter(toy().train, toy().val, nullptr, small_seg(model::Variant::unet, 0), {.out_dir = dir});
  CHECK(m.variant == "unet");
  CHECK_FALSE(load_seg_model(dir)->needs_injection());
}

TEST_CASE("segmenter: configuration errors") {
  const auto fx = load_featx(featx_run());
  const auto dir = testutil::scratch("seg_err");
  CHECK_THROWS_AS(train_segmenter(toy().train, {}, nullptr, small_seg(model::Variant::fgss, 40), {.out_dir = dir}),
                  TrainError);
  // Latent of 5 × 8 channels does not fit a segmenter expecting 60.
  CHECK_THROWS_AS(train_segmenter(toy().train, {}, fx.get(), small_seg(model::Variant::fgss, 60), {.out_dir = dir}),
                  TrainError);
  CHECK_THROWS_AS(train_segmenter({}, {}, fx.get(), small_seg(model::Variant::fgss, 40), {.out_dir = dir}), TrainError);
  // A featx checkpoint is not a segmenter checkpoint.
  CHECK_THROWS_AS(load_seg_model(featx_run()), TrainError);
}

TEST_CASE("training configs serialise and validate") {
  const auto f = small_featx();
  CHECK(FeatxTrainConfig::from_json(f.to_json()).to_json() == f.to_json());
  const auto s = small_seg(model::Variant::fgss, 40);
  CHECK(SegTrainConfig::from_json(s.to_json()).to_json() == s.to_json());

  FeatxTrainConfig d;
  CHECK(d.epochs == 60);
  CHECK(d.batch == 256);
  CHECK(d.w1 == 0.001);
  CHECK(d.w2 == 10.0);
  SegTrainConfig sd;
  CHECK(sd.epochs == 120);
  CHECK(sd.batch == 12);
  CHECK(sd.lr == 1e-4);
  CHECK(sd.w4 == 0.3);
  CHECK(sd.freeze_e2);

  auto bad = f;
  bad.decay = 0;
  CHECK_THROWS(bad.validate());
  bad = f;
  bad.batch = 0;
  CHECK_THROWS(bad.validate());
  auto bs = s;
  bs.rotate_prob = 1.5;
  CHECK_THROWS(bs.validate());
}

TEST_CASE("step decay examples") {
  CHECK(nn::apply_decay(1e-4, 9, 0.9) == 1e-4);
  CHECK(nn::apply_decay(1e-4, 10, 0.9) == doctest::Approx(9e-5));
  CHECK(nn::apply_decay(1e-4, 119, 0.9) == doctest::Approx(1e-4 * std::pow(0.9, 11)));
}
