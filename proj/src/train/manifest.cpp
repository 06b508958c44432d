#include "fgss/train/manifest.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fgss::train {

using nlohmann::json;

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

json CheckpointManifest::to_json() const {
  json hist = json::array();
  for (const auto& r : history) {
    hist.push_back({{"epoch", r.epoch},
                    {"lr", r.lr},
                    {"trainLoss", r.train_loss},
                    {"valLoss", r.val_loss},
                    {"valMetric", opt(r.val_metric)},
                    {"reconMse", opt(r.recon_mse)},
                    {"widthTop1", opt(r.width_top1)},
                    {"widthWithin1", opt(r.width_within1)}});
  }
  return {{"version", kVersion},       {"phase", phase},         {"variant", variant},
          {"config", config},          {"configHash", config_hash}, {"epoch", epoch},
          {"metricHistory", hist},     {"weightArchive", weight_archive}, {"createdAt", created_at},
          {"datasetHash", dataset_hash}, {"notes", notes}};
}

CheckpointManifest CheckpointManifest::from_json(const json& j) {
  if (!j.is_object()) throw std::runtime_error("manifest is not a JSON object");
  if (j.value("version", 0) != kVersion) throw std::runtime_error("unsupported manifest version");
  CheckpointManifest m;
  m.phase = j.at("phase").get<std::string>();
  if (m.phase != "featx" && m.phase != "segmenter") throw std::runtime_error("unknown phase '" + m.phase + "'");
  m.variant = j.at("variant").get<std::string>();
  m.config = j.at("config");
  m.config_hash = j.at("configHash").get<std::string>();
  if (m.config_hash != train::config_hash(m.config)) throw std::runtime_error("config hash does not match config snapshot");
  m.epoch = j.at("epoch").get<int>();
  for (const auto& r : j.at("metricHistory")) {
    MetricRow row;
    row.epoch = r.at("epoch").get<int>();
    row.lr = r.at("lr").get<double>();
    row.train_loss = r.at("trainLoss").get<double>();
    row.val_loss = r.value("valLoss", 0.0);
    row.val_metric = opt_from(r, "valMetric");
    row.recon_mse = opt_from(r, "reconMse");
    row.width_top1 = opt_from(r, "widthTop1");
    row.width_within1 = opt_from(r, "widthWithin1");
    m.history.push_back(row);
  }
  if (static_cast<int>(m.history.size()) != m.epoch) {
    throw std::runtime_error("metric history length does not match completed epochs");
  }
  m.weight_archive = j.at("weightArchive").get<std::string>();
  m.created_at = j.value("createdAt", "");
  m.dataset_hash = j.value("datasetHash", "");
  m.notes = j.value("notes", "");
  return m;
}

void CheckpointManifest::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f << to_json().dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

CheckpointManifest CheckpointManifest::read(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  CheckpointManifest m;
  try {
    m = from_json(j);
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest " + path.string() + ": " + e.what());
  }
  const auto archive = path.parent_path() / m.weight_archive;
  if (!std::filesystem::exists(archive)) throw std::runtime_error("weight archive " + archive.string() + " missing");
  return m;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string hash_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return "";
  std::ostringstream ss;
  ss << f.rdbuf();
  return fnv1a_hex(ss.str());
}

std::string config_hash(const json& config) { return fnv1a_hex(config.dump()); }

std::string utc_timestamp() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream ss;
  ss.precision(10);
  ss << "epoch,lr,trainLoss,valMetric\n";
  for (const auto& r : rows) {
    ss << r.epoch << ',' << r.lr << ',' << r.train_loss << ',';
    if (r.val_metric) ss << *r.val_metric;
    ss << '\n';
  }
  return ss.str();
}

std::filesystem::path resolve_manifest(const std::filesystem::path& p) {
  if (std::filesystem::is_directory(p)) return p / "best.json";
  return p;
}

}  // namespace fgss::train
