#include "fgss/service/service.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <thread>
#include <vector>

#include "fgss/eval/evaluation.hpp"
#include "fgss/image_io.hpp"
#include "fgss/infer/tiled.hpp"
#include "fgss/model/param_count.hpp"
#include "fgss/train/trainer.hpp"
#include "httplib.h"
#include "json.hpp"

namespace fgss::service {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class JobStatus { queued, running, done, failed };

const char* to_string(JobStatus s) {
  switch (s) {
    case JobStatus::queued:
      return "queued";
    case JobStatus::running:
      return "running";
    case JobStatus::done:
      return "done";
    case JobStatus::failed:
      break;
  }
  return "failed";
}

struct Artifacts {
  std::vector<std::uint8_t> mask, probability, overlay;
};

struct Job {
  std::string id;
  std::string session_id;
  std::uint64_t generation = 0;
  JobStatus status = JobStatus::queued;
  json config;
  std::string model;
  eval::Ablation ablation = eval::Ablation::none;
  infer::InferenceConfig infer;
  std::uint64_t seed = 0;
  std::string error;
  std::string queued_at, started_at, finished_at;
  double millis = 0.0;
  int tiles = 0;
  std::optional<double> iou;
  // Inputs captured at submission so later crop edits cannot race the job.
  Raster original;
  std::optional<infer::AnnotatedInput> annotated;
  std::optional<BitMask> truth;
};

struct Session {
  std::mutex mu;
  std::string id;
  Raster original;
  std::optional<BitMask> truth;
  std::optional<pipeline::CropSidecar> sidecar;
  std::optional<infer::AnnotatedInput> annotated;
  std::uint64_t generation = 0;  // bumped by every crops PUT
  std::string active_job;        // queued or running
  std::string last_job;
  std::optional<Artifacts> result;
};

struct ModelEntry {
  std::string name;
  fs::path manifest;
  train::CheckpointManifest m;
  std::size_t params = 0;
  bool segmenter = false;
  bool fused = false;
};

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& msg) {
  send_json(res, status, {{"error", msg}});
}

// Draws a capture from a regex route.
std::string arg(const httplib::Request& req, std::size_t i) { return req.matches[static_cast<int>(i)].str(); }

Raster overlay_rgb(const Raster& gray, const BitMask& mask) {
  constexpr float kAlpha = 0.5f;
  constexpr float kColor[3] = {1.0f, 0.15f, 0.1f};
  Raster out(gray.height(), gray.width(), 3);
  for (int y = 0; y < gray.height(); ++y) {
    for (int x = 0; x < gray.width(); ++x) {
      const float g = gray.at(y, x);
      for (int c = 0; c < 3; ++c) {
        out.at(y, x, c) = mask.at(y, x) ? (1 - kAlpha) * g + kAlpha * kColor[c] : g;
      }
    }
  }
  return out;
}

}  // namespace

struct Service::Impl {
  ServiceConfig cfg;

  std::mutex sessions_mu;
  std::map<std::string, std::shared_ptr<Session>> sessions;

  std::mutex jobs_mu;
  std::condition_variable jobs_cv;
  std::condition_variable idle_cv;
  std::map<std::string, std::shared_ptr<Job>> jobs;
  std::deque<std::shared_ptr<Job>> queue;
  int busy = 0;
  bool stopping = false;
  std::vector<std::thread> workers;

  std::mutex models_mu;
  std::map<std::string, std::shared_ptr<const infer::SegModel>> seg_cache;
  std::map<std::string, std::shared_ptr<const model::FeatureExtractor<float>>> fx_cache;

  std::mutex id_mu;
  std::mt19937_64 id_rng{std::random_device{}()};

  explicit Impl(ServiceConfig c) : cfg(std::move(c)) {
    if (cfg.models_dir.empty()) {
      if (const char* env = std::getenv("FGSS_MODELS_DIR")) cfg.models_dir = env;
    }
    if (cfg.workers < 1) cfg.workers = 1;
    for (int i = 0; i < cfg.workers; ++i) workers.emplace_back([this] { work(); });
  }

  ~Impl() {
    {
      std::lock_guard lock(jobs_mu);
      stopping = true;
    }
    jobs_cv.notify_all();
    for (auto& t : workers) t.join();
  }

  std::string new_id() {
    std::lock_guard lock(id_mu);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(id_rng()));
    return buf;
  }

  std::shared_ptr<Session> find_session(const std::string& id) {
    std::lock_guard lock(sessions_mu);
    auto it = sessions.find(id);
    return it == sessions.end() ? nullptr : it->second;
  }

  // ------------------------------------------------------------ models

  std::pair<std::vector<ModelEntry>, json> scan_models() {
    std::vector<ModelEntry> out;
    json warnings = json::array();
    if (cfg.models_dir.empty() || !fs::is_directory(cfg.models_dir)) return {out, warnings};
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(cfg.models_dir)) {
      if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::string name = fs::relative(f, cfg.models_dir).replace_extension().generic_string();
      try {
        ModelEntry me;
        me.name = name;
        me.manifest = f;
        me.m = train::CheckpointManifest::read(f);
        if (me.m.phase == "segmenter") {
          const auto tc = train::SegTrainConfig::from_json(me.m.config.at("train"));
          model::FeatExConfig fc;
          if (tc.model.fused()) fc = train::featx_config_from_json(me.m.config.at("featx"));
          me.params = model::count_parameters(tc.model, fc).total();
          me.segmenter = true;
          me.fused = tc.model.fused();
        } else if (me.m.phase == "featx") {
          const auto tc = train::FeatxTrainConfig::from_json(me.m.config.at("train"));
          me.params = model::FeatureExtractor<float>(tc.model, false).param_count();
        } else {
          throw std::runtime_error("unknown phase '" + me.m.phase + "'");
        }
        out.push_back(std::move(me));
      } catch (const std::exception& e) {
        warnings.push_back({{"file", name + ".json"}, {"reason", e.what()}});
      }
    }
    return {out, warnings};
  }

  std::optional<ModelEntry> find_model(const std::string& name, bool need_segmenter) {
    auto [entries, _] = scan_models();
    for (auto& e : entries) {
      if (!name.empty() && e.name != name) continue;
      if (need_segmenter && !e.segmenter) continue;
      return e;
    }
    return std::nullopt;
  }

  std::shared_ptr<const infer::SegModel> seg_model(const ModelEntry& e) {
    std::lock_guard lock(models_mu);
    const std::string key = e.manifest.string() + "@" + e.m.created_at;
    auto it = seg_cache.find(key);
    if (it != seg_cache.end()) return it->second;
    std::shared_ptr<const infer::SegModel> m = train::load_seg_model(e.manifest);
    seg_cache[key] = m;
    return m;
  }

  // Width predictor: a featx checkpoint, or the crop encoder inside a fused segmenter.
  std::shared_ptr<const model::FeatureExtractor<float>> width_model(const ModelEntry& e) {
    if (e.segmenter) {
      auto m = seg_model(e);
      if (!m->featx()) return nullptr;
      return std::shared_ptr<const model::FeatureExtractor<float>>(m, m->featx());
    }
    std::lock_guard lock(models_mu);
    const std::string key = e.manifest.string() + "@" + e.m.created_at;
    auto it = fx_cache.find(key);
    if (it != fx_cache.end()) return it->second;
    std::shared_ptr<const model::FeatureExtractor<float>> fx = train::load_featx(e.manifest);
    fx_cache[key] = fx;
    return fx;
  }

  // ------------------------------------------------------------ jobs

  void work() {
    for (;;) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock lock(jobs_mu);
        jobs_cv.wait(lock, [&] { return stopping || !queue.empty(); });
        if (stopping && queue.empty()) return;
        job = queue.front();
        queue.pop_front();
        job->status = JobStatus::running;
        job->started_at = train::utc_timestamp();
        ++busy;
      }
      run(*job);
      {
        std::lock_guard lock(jobs_mu);
        --busy;
      }
      idle_cv.notify_all();
    }
  }

  void run(Job& job) {
    const auto t0 = std::chrono::steady_clock::now();
    std::optional<Artifacts> art;
    std::string error;
    std::optional<double> score;
    int tiles = 0;
    try {
      const auto entry = find_model(job.model, true);
      if (!entry) throw std::runtime_error("model '" + job.model + "' is not available");
      const auto model = seg_model(*entry);
      const Raster& image = job.annotated ? job.annotated->image : job.original;
      const pipeline::WallCropSet* crops = nullptr;
      pipeline::WallCropSet grey;
      if (model->needs_injection()) {
        if (!job.annotated) throw std::runtime_error("crops missing for a fused model");
        crops = &job.annotated->crops;
        if (job.ablation == eval::Ablation::grey) {
          Rng g(job.seed);
          grey = eval::grey_crop_set(job.annotated->crops, g);
          crops = &grey;
        }
      }
      auto r = infer::segment_floorplan(image, crops, *model, job.infer);
      r = infer::to_original(r, job.original.height(), job.original.width(), job.infer.threshold);
      tiles = r.tiles;
      if (job.truth) score = iou(r.mask, *job.truth);
      art = Artifacts{io::encode_png(r.mask), infer::probability_png(r.probability),
                      io::encode_png_rgb(overlay_rgb(job.original, r.mask))};
    } catch (const std::exception& e) {
      error = e.what();
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    // Publish to the session first so "done" always implies retrievable artifacts.
    std::shared_ptr<Session> s = find_session(job.session_id);
    if (s) {
      std::lock_guard lock(s->mu);
      if (art && s->generation == job.generation) {
        s->result = *art;
        s->last_job = job.id;
      }
      if (s->active_job == job.id) s->active_job.clear();
    }
    std::lock_guard lock(jobs_mu);
    job.millis = ms;
    job.tiles = tiles;
    job.iou = score;
    job.finished_at = train::utc_timestamp();
    job.error = error;
    job.status = art ? JobStatus::done : JobStatus::failed;
    job.original = Raster();
    job.annotated.reset();
    job.truth.reset();
  }

  json job_json(const Job& j) {
    json out = {{"jobId", j.id},          {"sessionId", j.session_id}, {"status", to_string(j.status)},
                {"config", j.config},     {"queuedAt", j.queued_at},   {"startedAt", j.started_at},
                {"finishedAt", j.finished_at}, {"millis", j.millis},   {"tiles", j.tiles}};
    if (!j.error.empty()) out["error"] = j.error;
    out["iou"] = j.iou ? json(*j.iou) : json(nullptr);
    return out;
  }

  // ------------------------------------------------------------ handlers

  void post_floorplan(const httplib::Request& req, httplib::Response& res) {
    if (req.body.size() > cfg.max_upload_bytes) return send_error(res, 413, "upload exceeds 32 MiB");
    const std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size());
    if (io::sniff_format(bytes) == io::ImageFormat::unknown) {
      return send_error(res, 415, "unsupported image format (PNG or JPEG expected)");
    }
    Raster img;
    try {
      img = io::decode_gray(bytes);
    } catch (const std::exception& e) {
      return send_error(res, 415, std::string("cannot decode image: ") + e.what());
    }
    auto s = std::make_shared<Session>();
    s->id = new_id();
    s->original = std::move(img);
    const json body = {{"sessionId", s->id}, {"widthPx", s->original.width()}, {"heightPx", s->original.height()}};
    {
      std::lock_guard lock(sessions_mu);
      sessions[s->id] = s;
    }
    res.set_header("Location", "/api/floorplans/" + s->id);
    send_json(res, 201, body);
  }

  void get_floorplan(const httplib::Request& req, httplib::Response& res) {
    auto s = find_session(arg(req, 1));
    if (!s) return send_error(res, 404, "unknown session");
    std::lock_guard lock(s->mu);
    json out = {{"sessionId", s->id},
                {"widthPx", s->original.width()},
                {"heightPx", s->original.height()},
                {"hasGroundTruth", s->truth.has_value()},
                {"hasResult", s->result.has_value()},
                {"activeJob", s->active_job.empty() ? json(nullptr) : json(s->active_job)},
                {"lastJob", s->last_job.empty() ? json(nullptr) : json(s->last_job)}};
    if (s->sidecar) {
      out["crops"] = json::parse(pipeline::sidecar_to_json(*s->sidecar))["crops"];
      out["scaleFactor"] = s->annotated->norm.scale_factor;
    } else {
      out["crops"] = nullptr;
      out["scaleFactor"] = nullptr;
    }
    send_json(res, 200, out);
  }

  void put_crops(const httplib::Request& req, httplib::Response& res) {
    auto s = find_session(arg(req, 1));
    if (!s) return send_error(res, 404, "unknown session");
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception& e) {
      return send_error(res, 400, std::string("malformed JSON: ") + e.what());
    }
    const json list = body.is_array() ? body : body.value("crops", json());
    if (!list.is_array()) return send_error(res, 422, "expected {\"crops\": [...]} with 5 entries");
    if (list.size() != 5) return send_error(res, 422, "exactly 5 crops required, got " + std::to_string(list.size()));
    pipeline::CropSidecar sc;
    sc.floorplan_id = s->id;
    try {
      for (const auto& c : list) {
        pipeline::CropSpec cs;
        cs.tag = pipeline::tag_from_string(c.at("tag").get<std::string>());
        cs.box.x = c.at("x").get<int>();
        cs.box.y = c.at("y").get<int>();
        cs.box.side = c.value("side", pipeline::kCropSide);
        cs.width_px = c.contains("annotatedWidthPx") ? c["annotatedWidthPx"].get<double>() : c.at("widthPx").get<double>();
        if (cs.box.side != pipeline::kCropSide) throw std::invalid_argument("crop side must be 64");
        if (!(cs.width_px > 0)) throw std::invalid_argument("annotated widths must be positive");
        sc.crops.push_back(cs);
      }
    } catch (const std::exception& e) {
      return send_error(res, 422, e.what());
    }

    Raster original;
    {
      std::lock_guard lock(s->mu);
      original = s->original;
    }
    infer::AnnotatedInput a;
    try {
      a = infer::prepare_annotated(original, sc);
    } catch (const std::exception& e) {
      return send_error(res, 422, e.what());
    }

    // Width assist: argmax+1 of the width head on each normalised crop.
    json predicted = nullptr, predicted_orig = nullptr, used = nullptr;
    const std::string want = req.has_param("model") ? req.get_param_value("model")
                                                    : (body.is_object() ? body.value("model", std::string()) : "");
    try {
      std::optional<ModelEntry> entry;
      auto [entries, _] = scan_models();
      for (auto& e : entries) {
        const bool match = want.empty() ? (e.fused || e.m.phase == "featx") : e.name == want;
        if (match) {
          entry = e;
          break;
        }
      }
      if (!want.empty() && !entry) return send_error(res, 404, "unknown model '" + want + "'");
      if (entry) {
        if (auto fx = width_model(*entry)) {
          std::vector<train::CropSample> samples;
          for (const auto& spec : sc.crops) {
            samples.push_back({s->id, spec.tag, a.crops[spec.tag].raster, 1});
          }
          const auto w = eval::predict_widths(*fx, samples);
          predicted = w;
          predicted_orig = json::array();
          for (int v : w) predicted_orig.push_back(std::lround(v / a.norm.scale_factor));
          used = entry->name;
        }
      }
    } catch (const std::exception& e) {
      return send_error(res, 500, std::string("width prediction failed: ") + e.what());
    }

    {
      std::lock_guard lock(s->mu);
      s->sidecar = sc;
      s->annotated = std::move(a);
      ++s->generation;
      s->result.reset();
      s->last_job.clear();
      send_json(res, 200,
                {{"sessionId", s->id},
                 {"scaleFactor", s->annotated->norm.scale_factor},
                 {"normalizedWidthPx", s->annotated->image.width()},
                 {"normalizedHeightPx", s->annotated->image.height()},
                 {"predictedWidths", predicted},
                 {"predictedWidthsOriginalPx", predicted_orig},
                 {"model", used}});
    }
  }

  void put_groundtruth(const httplib::Request& req, httplib::Response& res) {
    auto s = find_session(arg(req, 1));
    if (!s) return send_error(res, 404, "unknown session");
    const std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size());
    if (io::sniff_format(bytes) != io::ImageFormat::png) return send_error(res, 415, "ground truth must be a PNG mask");
    Raster r;
    try {
      r = io::decode_gray(bytes);
    } catch (const std::exception& e) {
      return send_error(res, 415, e.what());
    }
    std::lock_guard lock(s->mu);
    if (r.height() != s->original.height() || r.width() != s->original.width()) {
      return send_error(res, 422, "ground-truth mask must match the image dimensions");
    }
    s->truth = BitMask::from_raster(r, 0.5f);
    res.status = 204;
  }

  void post_segment(const httplib::Request& req, httplib::Response& res) {
    auto s = find_session(arg(req, 1));
    if (!s) return send_error(res, 404, "unknown session");
    json body = json::object();
    if (!req.body.empty()) {
      try {
        body = json::parse(req.body);
      } catch (const json::exception& e) {
        return send_error(res, 400, std::string("malformed JSON: ") + e.what());
      }
      if (!body.is_object()) return send_error(res, 422, "expected a JSON object");
    }
    auto job = std::make_shared<Job>();
    try {
      job->infer.stride = body.value("stride", 30);
      job->infer.threshold = body.value("threshold", 0.5);
      job->infer.threads = std::max(1, cfg.infer_threads);
      job->ablation = eval::ablation_from_string(body.value("ablation", std::string("none")));
      job->seed = body.value("seed", cfg.grey_seed);
      job->infer.tile = 32;  // replaced by the model's tile; validated below
      job->infer.validate();
    } catch (const std::exception& e) {
      return send_error(res, 422, e.what());
    }
    const std::string want = body.value("model", std::string());
    const auto entry = find_model(want, true);
    if (!entry) {
      return want.empty() ? send_error(res, 422, "no segmentation model available")
                          : send_error(res, 404, "unknown model '" + want + "'");
    }
    job->model = entry->name;
    job->config = {{"stride", job->infer.stride},
                   {"threshold", job->infer.threshold},
                   {"model", job->model},
                   {"ablation", eval::to_string(job->ablation)},
                   {"seed", job->seed}};

    {
      std::lock_guard lock(s->mu);
      if (!s->active_job.empty()) return send_error(res, 409, "a job is already running for this session");
      if (entry->fused && !s->annotated) return send_error(res, 422, "crops missing: PUT 5 crops before segmenting");
      job->id = new_id();
      job->session_id = s->id;
      job->generation = s->generation;
      job->original = s->original;
      job->annotated = s->annotated;
      job->truth = s->truth;
      job->queued_at = train::utc_timestamp();
      s->active_job = job->id;
    }
    {
      std::lock_guard lock(jobs_mu);
      jobs[job->id] = job;
      queue.push_back(job);
    }
    jobs_cv.notify_one();
    res.set_header("Location", "/api/jobs/" + job->id);
    send_json(res, 202, {{"jobId", job->id}, {"status", "queued"}});
  }

  void get_job(const httplib::Request& req, httplib::Response& res) {
    std::lock_guard lock(jobs_mu);
    auto it = jobs.find(arg(req, 1));
    if (it == jobs.end()) return send_error(res, 404, "unknown job");
    send_json(res, 200, job_json(*it->second));
  }

  void get_result(const httplib::Request& req, httplib::Response& res) {
    auto s = find_session(arg(req, 1));
    if (!s) return send_error(res, 404, "unknown session");
    const std::string kind = arg(req, 2);
    std::lock_guard lock(s->mu);
    if (!s->result) return send_error(res, 404, "no result yet for this session");
    const std::vector<std::uint8_t>* b = nullptr;
    if (kind == "mask") b = &s->result->mask;
    if (kind == "probability") b = &s->result->probability;
    if (kind == "overlay") b = &s->result->overlay;
    if (!b) return send_error(res, 404, "unknown result kind (mask, probability or overlay)");
    res.status = 200;
    res.set_content(std::string(b->begin(), b->end()), "image/png");
  }

  void get_models(const httplib::Request&, httplib::Response& res) {
    auto [entries, warnings] = scan_models();
    json list = json::array();
    for (const auto& e : entries) {
      json summary = {{"phase", e.m.phase},
                      {"epoch", e.m.epoch},
                      {"createdAt", e.m.created_at},
                      {"configHash", e.m.config_hash},
                      {"datasetHash", e.m.dataset_hash}};
      if (!e.m.history.empty()) {
        const auto& last = e.m.history.back();
        summary["trainLoss"] = last.train_loss;
        summary["valMetric"] = last.val_metric ? json(*last.val_metric) : json(nullptr);
      }
      list.push_back({{"name", e.name}, {"variant", e.m.variant}, {"params", e.params}, {"manifest", summary}});
    }
    send_json(res, 200, {{"models", list}, {"warnings", warnings}});
  }
};

Service::Service(ServiceConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}
Service::~Service() = default;

const ServiceConfig& Service::config() const { return impl_->cfg; }

void Service::wait_idle() {
  std::unique_lock lock(impl_->jobs_mu);
  impl_->idle_cv.wait(lock, [&] { return impl_->queue.empty() && impl_->busy == 0; });
}

void Service::mount(httplib::Server& srv) {
  Impl* im = impl_.get();
  srv.set_payload_max_length(im->cfg.max_upload_bytes);
  srv.set_default_headers({{"Access-Control-Allow-Origin", im->cfg.cors_origin},
                           {"Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  srv.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string msg = "internal error";
    try {
      if (ep) std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      msg = e.what();
    } catch (...) {
    }
    send_error(res, 500, msg);
  });
  srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      const int status = res.status;
      send_error(res, status, status == 413 ? "upload exceeds the size limit" : httplib::status_message(status));
    }
  });

  using Rq = const httplib::Request&;
  using Rs = httplib::Response&;
  srv.Post("/api/floorplans", [im](Rq q, Rs r) { im->post_floorplan(q, r); });
  srv.Get(R"(/api/floorplans/([0-9a-f]+))", [im](Rq q, Rs r) { im->get_floorplan(q, r); });
  srv.Put(R"(/api/floorplans/([0-9a-f]+)/crops)", [im](Rq q, Rs r) { im->put_crops(q, r); });
  srv.Put(R"(/api/floorplans/([0-9a-f]+)/groundtruth)", [im](Rq q, Rs r) { im->put_groundtruth(q, r); });
  srv.Post(R"(/api/floorplans/([0-9a-f]+)/segment)", [im](Rq q, Rs r) { im->post_segment(q, r); });
  srv.Get(R"(/api/floorplans/([0-9a-f]+)/result/([a-z]+))", [im](Rq q, Rs r) { im->get_result(q, r); });
  srv.Get(R"(/api/jobs/([0-9a-f]+))", [im](Rq q, Rs r) { im->get_job(q, r); });
  srv.Get("/api/models", [im](Rq q, Rs r) { im->get_models(q, r); });
}

int serve(const ServiceConfig& cfg, const std::string& host, int port) {
  Service svc(cfg);
  httplib::Server srv;
  svc.mount(srv);
  if (!srv.listen(host, port)) return 2;
  return 0;
}

}  // namespace fgss::service
