#include <doctest.h>

#include <set>

#include "fgss/infer/tiled.hpp"
#include "fgss/pipeline.hpp"
#include "tiled_oracle.hpp"

using namespace fgss;
using namespace fgss::infer;
using nn::Tensor;

namespace {

Raster random_image(int h, int w, Rng& rng) {
  Raster r(h, w);
  for (auto& v : r.data()) v = static_cast<float>(rng.uniform());
  return r;
}

// Logit of each pixel is a fixed function of its value, so tiles disagree
// only through their padding.
class PixelModel : public TileModel {
 public:
  explicit PixelModel(int t, float bias = 0.0f) : t_(t), bias_(bias) {}
  int tile_side() const override { return t_; }
  bool needs_injection() const override { return false; }
  Tensor<float> tile_logits(const Tensor<float>& x, const Tensor<float>*) const override {
    Tensor<float> y = x;
    for (auto& v : y.vec()) v = 4.0f * v - 2.0f + bias_;
    return y;
  }

 private:
  int t_;
  float bias_;
};

SegModel random_seg(bool fused, Rng& rng) {
  model::SegmenterConfig sc;
  sc.variant = fused ? model::Variant::fgss : model::Variant::unet;
  sc.base = 2;
  sc.stages = 5;
  sc.tile = 64;
  model::FeatExConfig fc;
  fc.stage_channels = {2, 2, 2, 4, 4};
  sc.injected_channels = 20;
  sc.e3_plan = {2, 2, 2, 4, 20};
  SegModel m(sc, fc);
  m.segmenter().init(rng);
  if (m.featx()) m.featx()->init(rng);
  return m;
}

pipeline::WallCropSet random_crops(Rng& rng) {
  pipeline::WallCropSet s;
  for (int i = 0; i < 5; ++i) {
    auto& c = s.crops[static_cast<std::size_t>(i)];
    c.tag = pipeline::kTagOrder[static_cast<std::size_t>(i)];
    c.raster = random_image(64, 64, rng);
    c.width_px = 20;
  }
  return s;
}

}  // namespace

TEST_CASE("tile grid covers the image with clamped last windows") {
  for (auto [h, w, stride] : std::vector<std::tuple<int, int, int>>{
           {300, 300, 30}, {256, 256, 30}, {100, 90, 10}, {513, 260, 120}, {257, 1000, 256}, {300, 301, 1}}) {
    CAPTURE(h);
    CAPTURE(w);
    CAPTURE(stride);
    InferenceConfig cfg;
    cfg.stride = stride;
    const auto g = plan_tile_grid(h, w, cfg);
    CHECK(g.padded_h == std::max(h, 256));
    CHECK(g.padded_w == std::max(w, 256));
    const auto ys = oracle::axis_offsets(h, 256, stride);
    const auto xs = oracle::axis_offsets(w, 256, stride);
    REQUIRE(g.offsets.size() == ys.size() * xs.size());
    std::size_t i = 0;
    for (int y : ys) {
      for (int x : xs) {
        CHECK(g.offsets[i] == Pixel{x, y});
        ++i;
      }
    }
    CHECK(g.offsets.back() == Pixel{g.padded_w - 256, g.padded_h - 256});
  }
}

TEST_CASE("config validation") {
  InferenceConfig c;
  c.stride = 0;
  CHECK_THROWS_AS(c.validate(), InferenceError);
  c.stride = 257;
  CHECK_THROWS_AS(c.validate(), InferenceError);
  c.stride = 30;
  c.threshold = 1.5;
  CHECK_THROWS_AS(c.validate(), InferenceError);
  c.threshold = 0.5;
  c.threads = 0;
  CHECK_THROWS_AS(c.validate(), InferenceError);
}

TEST_CASE("pixelwise model reproduces itself away from padding") {
  Rng rng(1);
  const auto img = random_image(70, 90, rng);
  PixelModel m(32);
  InferenceConfig cfg;
  cfg.stride = 7;
  const auto r = segment_floorplan(img, nullptr, m, cfg);
  REQUIRE(r.probability.height() == 70);
  REQUIRE(r.probability.width() == 90);
  for (int y = 0; y < 70; ++y) {
    for (int x = 0; x < 90; ++x) {
      const double expect = 1.0 / (1.0 + std::exp(-(4.0 * img.at(y, x) - 2.0)));
      CHECK(r.probability.at(y, x) == doctest::Approx(expect).epsilon(1e-6));
    }
  }
}

TEST_CASE("threshold is strict") {
  Raster img(40, 40, 1, 0.5f);  // logit exactly 0 → probability 0.5
  PixelModel m(16);
  InferenceConfig cfg;
  cfg.stride = 8;
  const auto r = segment_floorplan(img, nullptr, m, cfg);
  CHECK(r.probability.at(3, 3) == 0.5f);
  CHECK(r.mask.count() == 0);
  cfg.threshold = 0.49;
  CHECK(segment_floorplan(img, nullptr, m, cfg).mask.count() == 1600);
}

TEST_CASE("random-weight segmenter matches brute-force window averaging") {
  for (bool fused : {false, true}) {
    CAPTURE(fused);
    Rng rng(fused ? 7 : 8);
    const auto model = random_seg(fused, rng);
    const auto img = random_image(300, 300, rng);
    const auto crops = random_crops(rng);
    std::optional<Tensor<float>> z;
    if (fused) z = model.encode_crops(crops);
    InferenceConfig cfg;
    cfg.stride = 30;
    cfg.batch = 3;
    const auto r = segment_floorplan(img, fused ? &crops : nullptr, model, cfg);
    const auto ref = oracle::tiled_probability(img, model, z ? &*z : nullptr, 30);
    CHECK(oracle::max_abs_diff(r.probability, ref) < 1e-5);
    CHECK(r.tiles == 81);  // 9 window origins per axis
  }
}

TEST_CASE("thread count does not change the result") {
  Rng rng(3);
  const auto model = random_seg(true, rng);
  const auto img = random_image(200, 170, rng);
  const auto crops = random_crops(rng);
  InferenceConfig one;
  one.stride = 20;
  auto four = one;
  four.threads = 4;
  four.batch = 2;
  const auto a = segment_floorplan(img, &crops, model, one);
  const auto b = segment_floorplan(img, &crops, model, four);
  double m = 0;
  for (std::size_t i = 0; i < a.probability.data().size(); ++i) {
    m = std::max(m, std::abs(double(a.probability.data()[i]) - b.probability.data()[i]));
  }
  CHECK(m < 1e-5);
  // Same thread count twice: bit identical.
  CHECK(segment_floorplan(img, &crops, model, four).probability == b.probability);
}

TEST_CASE("crop set presence must match the model") {
  Rng rng(2);
  const auto fused = random_seg(true, rng);
  const auto plain = random_seg(false, rng);
  const auto img = random_image(64, 64, rng);
  const auto crops = random_crops(rng);
  InferenceConfig cfg;
  CHECK_THROWS_AS(segment_floorplan(img, nullptr, fused, cfg), InferenceError);
  // Models without injection ignore a crop set.
  CHECK(segment_floorplan(img, &crops, plain, cfg).mask == segment_floorplan(img, nullptr, plain, cfg).mask);
  CHECK_THROWS_AS(segment_floorplan(Raster(64, 64, 3), nullptr, plain, cfg), InferenceError);
}

TEST_CASE("stride sweep reports every stride") {
  Rng rng(4);
  PixelModel m(32);
  SweepItem it{random_image(100, 100, rng), std::nullopt, BitMask(100, 100)};
  for (int y = 0; y < 100; ++y) {
    for (int x = 0; x < 100; ++x) it.truth.set(y, x, it.image.at(y, x) > 0.5f);
  }
  const auto rows = stride_sweep({it}, m, {4, 8, 32}, {});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].tiles > rows[1].tiles);
  CHECK(rows[1].tiles > rows[2].tiles);
  for (const auto& r : rows) CHECK(r.mean_iou == doctest::Approx(1.0));
  CHECK_THROWS_AS(stride_sweep({}, m, {4}, {}), InferenceError);
}

TEST_CASE("annotated input and mapping back") {
  Rng rng(6);
  const auto img = random_image(200, 300, rng);
  pipeline::CropSidecar sc;
  for (auto tag : pipeline::kTagOrder) sc.crops.push_back({tag, {10, 20, 64}, 12.09});
  const auto a = prepare_annotated(img, sc);
  CHECK(a.norm.scale_factor == doctest::Approx(2.0));
  CHECK(a.image.height() == 400);
  CHECK(a.image.width() == 600);
  sc.crops.pop_back();
  CHECK_THROWS_AS(prepare_annotated(img, sc), InferenceError);
  sc.crops.push_back({pipeline::CropTag::longest_overall, {0, 0, 64}, 0.0});
  CHECK_THROWS_AS(prepare_annotated(img, sc), InferenceError);

  CHECK(resample_to(img, 200, 300) == img);
  SegmentationResult r;
  r.probability = Raster(400, 600, 1, 0.7f);
  r.mask = BitMask(400, 600, true);
  const auto back = to_original(r, 200, 300, 0.5);
  CHECK(back.probability.height() == 200);
  CHECK(back.mask.count() == 200u * 300u);
  CHECK(to_original(r, 200, 300, 0.7).mask.count() == 0);
}
