#include <doctest.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "fgss/train/archive.hpp"
#include "fgss/train/manifest.hpp"
#include "util.hpp"

using namespace fgss;
using namespace fgss::train;

namespace {

TensorArchive random_archive(Rng& rng) {
  TensorArchive ar;
  const int count = rng.uniform_int(0, 6);
  for (int t = 0; t < count; ++t) {
    const int ndim = rng.uniform_int(0, 4);
    std::vector<std::uint32_t> dims;
    std::size_t n = 1;
    for (int d = 0; d < ndim; ++d) {
      dims.push_back(static_cast<std::uint32_t>(rng.uniform_int(1, 5)));
      n *= dims.back();
    }
    std::vector<float> data(n);
    // Raw bit patterns, including NaNs, infinities and denormals.
    for (auto& v : data) v = std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64()));
    ar.add("t" + std::to_string(t) + "." + std::to_string(rng.uniform_int(0, 999)), dims, data);
  }
  return ar;
}

bool bit_equal(const TensorArchive& a, const TensorArchive& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.tensors()[i];
    const auto& y = b.tensors()[i];
    if (x.name != y.name || x.dims != y.dims || x.data.size() != y.data.size()) return false;
    if (!x.data.empty() && std::memcmp(x.data.data(), y.data.data(), x.data.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("randomised round trips are bit exact") {
  Rng rng(2024);
  const auto dir = testutil::scratch("archive_rt");
  for (int i = 0; i < 120; ++i) {
    const auto ar = random_archive(rng);
    CHECK(bit_equal(ar, TensorArchive::from_bytes(ar.to_bytes())));
    if (i % 10 == 0) {
      const auto path = dir / ("a" + std::to_string(i) + ".tensors");
      ar.write(path);
      CHECK(bit_equal(ar, TensorArchive::read(path)));
    }
  }
}

TEST_CASE("byte layout is little-endian and documented") {
  TensorArchive ar;
  ar.add("ab", {2}, {1.0f, -2.0f});
  const auto b = ar.to_bytes();
  REQUIRE(b.size() == 4 + 4 + 4 + 4 + 2 + 4 + 4 + 8);
  CHECK(std::string(b.begin(), b.begin() + 4) == "FGSS");
  CHECK(b[4] == 1);
  CHECK(b[8] == 1);
  CHECK(b[12] == 2);
  CHECK(b[16] == 'a');
  CHECK(b[18] == 1);  // ndim
  CHECK(b[22] == 2);  // dim 0
  float first;
  std::memcpy(&first, b.data() + 26, 4);
  CHECK(first == 1.0f);
}

TEST_CASE("corrupt archives are rejected") {
  Rng rng(5);
  TensorArchive ar;
  ar.add("w", {3, 4}, std::vector<float>(12, 0.5f));
  ar.add("b", {4}, std::vector<float>(4, 1.5f));
  const auto good = ar.to_bytes();

  SUBCASE("every truncation") {
    for (std::size_t n = 0; n < good.size(); ++n) {
      CAPTURE(n);
      std::vector<std::uint8_t> cut(good.begin(), good.begin() + static_cast<long>(n));
      CHECK_THROWS_AS(TensorArchive::from_bytes(cut), ArchiveError);
    }
  }
  SUBCASE("bad magic") {
    auto b = good;
    b[0] = 'X';
    CHECK_THROWS_AS(TensorArchive::from_bytes(b), ArchiveError);
  }
  SUBCASE("bad version") {
    auto b = good;
    b[4] = 9;
    CHECK_THROWS_AS(TensorArchive::from_bytes(b), ArchiveError);
  }
  SUBCASE("trailing bytes") {
    auto b = good;
    b.push_back(0);
    CHECK_THROWS_AS(TensorArchive::from_bytes(b), ArchiveError);
  }
  SUBCASE("huge dimension") {
    auto b = good;
    // first tensor's first dim lives after magic, version, count, name_len, "w", ndim
    b[4 + 4 + 4 + 4 + 1 + 4 + 3] = 0x7f;
    CHECK_THROWS_AS(TensorArchive::from_bytes(b), ArchiveError);
  }
  SUBCASE("random byte flips never crash") {
    for (int i = 0; i < 200; ++i) {
      auto b = good;
      b[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(b.size()) - 1))] ^=
          static_cast<std::uint8_t>(rng.uniform_int(1, 255));
      try {
        (void)TensorArchive::from_bytes(b);
      } catch (const ArchiveError&) {
      }
    }
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(TensorArchive::read("/nonexistent/x.tensors"), ArchiveError); }
  SUBCASE("invalid adds") {
    TensorArchive t;
    CHECK_THROWS_AS(t.add("x", {2, 2}, {1, 2, 3}), ArchiveError);
    t.add("x", {1}, {1});
    CHECK_THROWS_AS(t.add("x", {1}, {1}), ArchiveError);
  }
}

TEST_CASE("store and restore parameter lists") {
  Rng rng(1);
  nn::Conv2d<float> a(2, 3, 3, 1, 1), b(2, 3, 3, 1, 1), c(3, 3, 3, 1, 1);
  a.init(rng);
  b.init(rng);
  nn::ParamList<float> la, lb, lc;
  a.collect(la, "conv");
  b.collect(lb, "conv");
  c.collect(lc, "conv");
  TensorArchive ar;
  store(ar, la);
  restore(ar, lb);
  CHECK(a.weight().value.vec() == b.weight().value.vec());
  CHECK(a.bias().value.vec() == b.bias().value.vec());
  CHECK_THROWS_AS(restore(ar, lc), ArchiveError);
  nn::ParamList<float> other;
  nn::Conv2d<float> d(2, 3, 3, 1, 1);
  d.collect(other, "renamed");
  CHECK_THROWS_WITH_AS(restore(ar, other), doctest::Contains("renamed.weight"), ArchiveError);
}

TEST_CASE("manifest round trip and validation") {
  const auto dir = testutil::scratch("manifest");
  TensorArchive ar;
  ar.add("x", {1}, {1.0f});
  ar.write(dir / "w.tensors");

  CheckpointManifest m;
  m.phase = "segmenter";
  m.variant = "fgss";
  m.config = {{"b", 2}, {"a", {1, 2}}};
  m.config_hash = config_hash(m.config);
  m.epoch = 2;
  m.history = {{1, 1e-4, 0.5, 0.4, 0.6, {}, {}, {}}, {2, 1e-4, 0.4, 0.3, 0.7, {}, {}, {}}};
  m.weight_archive = "w.tensors";
  m.created_at = utc_timestamp();
  m.write(dir / "m.json");
  const auto back = CheckpointManifest::read(dir / "m.json");
  CHECK(back.to_json() == m.to_json());
  CHECK(resolve_manifest(dir / "m.json") == dir / "m.json");

  CHECK(config_hash({{"a", {1, 2}}, {"b", 2}}) == m.config_hash);
  CHECK(config_hash({{"a", {1, 2}}, {"b", 3}}) != m.config_hash);
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");

  auto j = m.to_json();
  SUBCASE("hash mismatch") {
    j["config"]["b"] = 5;
    CHECK_THROWS(CheckpointManifest::from_json(j));
  }
  SUBCASE("unknown phase") {
    j["phase"] = "other";
    CHECK_THROWS(CheckpointManifest::from_json(j));
  }
  SUBCASE("history length") {
    j["epoch"] = 3;
    CHECK_THROWS(CheckpointManifest::from_json(j));
  }
  SUBCASE("missing archive") {
    std::filesystem::remove(dir / "w.tensors");
    CHECK_THROWS(CheckpointManifest::read(dir / "m.json"));
  }
  SUBCASE("not json") {
    std::ofstream(dir / "bad.json") << "{nope";
    CHECK_THROWS(CheckpointManifest::read(dir / "bad.json"));
  }
}

TEST_CASE("metrics csv") {
  std::vector<MetricRow> rows{{1, 0.001, 2.5, 1.0, 0.5, {}, {}, {}}, {2, 0.001, 2.0, 0.9, {}, {}, {}, {}}};
  const auto csv = metrics_csv(rows);
  CHECK(csv.rfind("epoch,lr,trainLoss,valMetric\n", 0) == 0);
  CHECK(csv.find("\n1,") != std::string::npos);
}
