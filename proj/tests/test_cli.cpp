#include <doctest.h>

#include <fstream>
#include <sstream>

#include "../tools/cli.hpp"
#include "fgss/image_io.hpp"
#include "fgss/pipeline.hpp"
#include "fgss/synthgen.hpp"
#include "json.hpp"
#include "util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fgss");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = fgss::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::vector<std::string> gen_args(const fs::path& out, int count) {
  return {"gen", "--seed", "5", "--count", std::to_string(count), "--out", out.string(), "--canvas", "448",
          "--wall-min", "16", "--wall-max", "32", "--rooms-min", "2", "--rooms-max", "2"};
}

}  // namespace

TEST_CASE("help and usage errors") {
  auto r = cli({"--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("train-featx") != std::string::npos);

  r = cli({"gen", "--count", "3"});
  CHECK(r.code == 1);
  CHECK(r.err.find("--out") != std::string::npos);

  r = cli({"nonsense"});
  CHECK(r.code == 1);

  r = cli({"audit", "--format", "xml"});
  CHECK(r.code == 1);
}

TEST_CASE("audit output") {
  // stdout carries JSON-lines records; the config record always comes first
  auto r = cli({"audit", "--format", "csv"});
  REQUIRE(r.code == 0);
  const auto nl = r.out.find('\n');
  CHECK(json::parse(r.out.substr(0, nl)).at("event") == "config");
  CHECK(r.out.compare(nl + 1, 21, "name,params,mib,flops") == 0);
  r = cli({"audit"});
  REQUIRE(r.code == 0);
  std::istringstream lines(r.out);
  std::string line;
  std::getline(lines, line);
  std::getline(lines, line);
  const auto rec = json::parse(line);
  CHECK(rec.at("event") == "audit");
  CHECK(rec.at("models").size() == 6);
}

TEST_CASE("gen is deterministic") {
  const auto a = testutil::scratch("gen_a");
  const auto b = testutil::scratch("gen_b");
  REQUIRE(cli(gen_args(a, 3)).code == 0);
  REQUIRE(cli(gen_args(b, 3)).code == 0);
  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
  CHECK(slurp(a / "images" / "0002.png") == slurp(b / "images" / "0002.png"));
  CHECK(slurp(a / "masks" / "0000.png") == slurp(b / "masks" / "0000.png"));
}

TEST_CASE("gen rejects a canvas too small for the room grid") {
  const auto d = testutil::scratch("gen_small");
  auto args = gen_args(d, 1);
  args[8] = "128";
  const auto r = cli(args);
  CHECK(r.code != 0);
  CHECK_FALSE(r.err.empty());
}

TEST_CASE("end to end: gen, train-featx, train, infer, eval") {
  const auto root = testutil::scratch("e2e");
  const auto data = root / "data";
  REQUIRE(cli(gen_args(data, 10)).code == 0);

  auto r = cli({"train-featx", "--data", data.string(), "--out", (root / "fx").string(), "--epochs", "1", "--batch",
                "8", "--limit", "3"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  // First log line is the resolved configuration.
  const auto first = json::parse(r.out.substr(0, r.out.find('\n')));
  CHECK(first.at("event") == "config");
  CHECK(fs::exists(root / "fx" / "best.json"));

  r = cli({"train", "--data", data.string(), "--out", (root / "seg").string(), "--featx", (root / "fx").string(),
           "--epochs", "1", "--batch", "4", "--base", "2", "--tile", "64", "--stages", "5", "--tiles-per-plan", "2",
           "--val-stride", "48", "--limit", "3"});
  REQUIRE_MESSAGE(r.code == 0, r.err);

  // fgss without --featx is a usage problem
  r = cli({"train", "--data", data.string(), "--out", (root / "bad").string(), "--epochs", "1", "--base", "2",
           "--tile", "64", "--stages", "5"});
  CHECK(r.code != 0);

  // infer
  const auto m = fgss::synth::load_manifest(data);
  const auto img = data / m.entries[9].image;
  r = cli({"infer", "--image", img.string(), "--ckpt", (root / "seg").string(), "--out", (root / "m.png").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("--crops") != std::string::npos);

  const auto gray = fgss::io::read_gray(img);
  const auto mask = fgss::io::read_mask(data / m.entries[9].mask);
  const auto set = fgss::pipeline::select_wall_crops(gray, mask);
  std::ofstream(root / "crops.json") << fgss::pipeline::sidecar_to_json(fgss::pipeline::sidecar_from_set("0009", set));
  r = cli({"infer", "--image", img.string(), "--ckpt", (root / "seg").string(), "--crops",
           (root / "crops.json").string(), "--out", (root / "m.png").string(), "--probability",
           (root / "p.png").string(), "--stride", "48"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto out_mask = fgss::io::read_mask(root / "m.png");
  CHECK(out_mask.height() == gray.height());
  CHECK(out_mask.width() == gray.width());
  CHECK(fs::exists(root / "p.png"));

  // inference twice gives identical bytes
  r = cli({"infer", "--image", img.string(), "--ckpt", (root / "seg").string(), "--crops",
           (root / "crops.json").string(), "--out", (root / "m2.png").string(), "--stride", "48"});
  REQUIRE(r.code == 0);
  CHECK(slurp(root / "m.png") == slurp(root / "m2.png"));

  // eval
  r = cli({"eval", "--data", data.string(), "--ckpt", (root / "seg").string(), "--report",
           (root / "report.json").string(), "--split", "train", "--limit", "2", "--stride", "48"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto report = json::parse(slurp(root / "report.json"));
  CHECK(report.at("perFloorplan").size() == 2);
  CHECK(fs::exists(root / "report.csv"));

  r = cli({"widths", "--data", data.string(), "--ckpt", (root / "fx").string(), "--limit", "2", "--out",
           (root / "w.csv").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(slurp(root / "w.csv").rfind("deviationPx,count\n", 0) == 0);

  r = cli({"export-latents", "--data", data.string(), "--ckpt", (root / "fx").string(), "--count", "4", "--out",
           (root / "z.csv").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto z = slurp(root / "z.csv");
  CHECK(std::count(z.begin(), z.end(), '\n') == 5);

  r = cli({"sweep", "--data", data.string(), "--ckpt", (root / "seg").string(), "--strides", "32,64", "--limit",
           "1", "--out", (root / "sweep.csv").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(slurp(root / "sweep.csv").rfind("stride,meanIou,millis,tiles\n", 0) == 0);
}
