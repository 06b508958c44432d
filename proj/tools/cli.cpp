#include "cli.hpp"

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "fgss/eval/evaluation.hpp"
#include "fgss/image_io.hpp"
#include "fgss/infer/tiled.hpp"
#include "fgss/model/param_count.hpp"
#include "fgss/service/service.hpp"
#include "fgss/synthgen.hpp"
#include "fgss/train/dataset.hpp"
#include "fgss/train/trainer.hpp"
#include "fgss/util/json_log.hpp"

namespace fgss::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Missing-flag style errors found after parsing (exit 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

int resolve_threads(int flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("FGSS_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v > 0) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("FGSS_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

std::string dataset_hash(const fs::path& data) { return train::hash_file(data / "manifest.json"); }

train::PreparedSplit load_split(const fs::path& data, const std::string& split, int limit) {
  const auto m = synth::load_manifest(data);
  return train::prepare_split(data, m, train::split_indices(m, train::split_from_string(split)), limit);
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

std::vector<int> e3_plan_for(int stages, int injected) {
  std::vector<int> plan{16, 16, 16, 32, 32, 64};
  while (static_cast<int>(plan.size()) > stages - 1) plan.erase(plan.begin());
  while (static_cast<int>(plan.size()) < stages - 1) plan.push_back(plan.back() * 2);
  plan.push_back(injected);
  return plan;
}

struct Common {
  int threads = 0;
};

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Floorplan wall segmentation workbench"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");
  util::JsonLog log(out);
  Common common;
  std::function<int()> action;

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic floorplan dataset");
  synth::SynthSpec spec;
  int gen_count = 200;
  std::string gen_out;
  gen->add_option("--seed", spec.seed, "Base seed (sample i uses seed+i)")->capture_default_str();
  gen->add_option("--count", gen_count, "Number of plans")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--canvas", spec.canvas_size, "Canvas side in pixels")->capture_default_str();
  gen->add_option("--wall-min", spec.wall_width.lo, "Minimum wall width")->capture_default_str();
  gen->add_option("--wall-max", spec.wall_width.hi, "Maximum wall width")->capture_default_str();
  gen->add_option("--rooms-min", spec.room_rows.lo, "Minimum room rows/cols")->capture_default_str();
  gen->add_option("--rooms-max", spec.room_rows.hi, "Maximum room rows/cols")->capture_default_str();
  gen->add_option("--threads", common.threads, "Worker threads (FGSS_THREADS fallback)");
  gen->callback([&] {
    action = [&] {
      spec.room_cols = spec.room_rows;
      const int threads = resolve_threads(common.threads);
      log.event("config", {{"subcommand", "gen"},
                           {"seed", spec.seed},
                           {"count", gen_count},
                           {"out", gen_out},
                           {"canvas", spec.canvas_size},
                           {"wallWidth", {spec.wall_width.lo, spec.wall_width.hi}},
                           {"rooms", {spec.room_rows.lo, spec.room_rows.hi}},
                           {"threads", threads}});
      const auto m = synth::generate_set(spec, gen_count, gen_out, threads);
      log.event("done", {{"plans", m.entries.size()},
                         {"train", m.split.train.size()},
                         {"val", m.split.val.size()},
                         {"test", m.split.test.size()}});
      return 0;
    };
  });

  // train-featx
  auto* tfx = app.add_subcommand("train-featx", "Train the wall-crop feature extractor");
  train::FeatxTrainConfig fcfg;
  std::string fx_data, fx_out;
  bool fx_resume = false;
  int fx_limit = 0;
  tfx->add_option("--data", fx_data, "Dataset directory")->required();
  tfx->add_option("--out", fx_out, "Run directory")->required();
  tfx->add_option("--epochs", fcfg.epochs)->capture_default_str()->check(CLI::PositiveNumber);
  tfx->add_option("--lr", fcfg.lr)->capture_default_str();
  tfx->add_option("--batch", fcfg.batch)->capture_default_str()->check(CLI::PositiveNumber);
  tfx->add_option("--w1", fcfg.w1, "Reconstruction weight")->capture_default_str();
  tfx->add_option("--w2", fcfg.w2, "Width-classification weight")->capture_default_str();
  tfx->add_option("--decay", fcfg.decay, "Learning-rate factor every --decay-every epochs")->capture_default_str();
  tfx->add_option("--decay-every", fcfg.decay_every)->capture_default_str();
  tfx->add_option("--seed", fcfg.seed)->capture_default_str();
  tfx->add_option("--limit", fx_limit, "Use at most N plans per split (0 = all)")->capture_default_str();
  tfx->add_flag("--resume", fx_resume, "Continue from <out>/last.json");
  tfx->add_option("--threads", common.threads, "Worker threads (FGSS_THREADS fallback)");
  tfx->callback([&] {
    action = [&] {
      const int threads = resolve_threads(common.threads);
      log.event("config", {{"subcommand", "train-featx"}, {"data", fx_data}, {"out", fx_out},
                           {"resume", fx_resume}, {"threads", threads}, {"train", fcfg.to_json()}});
      fcfg.validate();
      const auto tr = load_split(fx_data, "train", fx_limit);
      const auto va = load_split(fx_data, "val", fx_limit);
      for (const auto& s : tr.skipped) log.event("skipped", {{"plan", s}});
      train::RunOptions opt;
      opt.out_dir = fx_out;
      opt.dataset_hash = dataset_hash(fx_data);
      opt.resume = fx_resume;
      opt.on_epoch = [&](const train::MetricRow& r) {
        log.event("epoch", {{"epoch", r.epoch}, {"lr", r.lr}, {"trainLoss", r.train_loss}, {"valLoss", r.val_loss},
                            {"reconMse", r.recon_mse.value_or(0)}, {"widthTop1", r.width_top1.value_or(0)},
                            {"widthWithin1", r.width_within1.value_or(0)}});
      };
      const auto m = train::train_feature_extractor(train::crop_samples(tr.plans), train::crop_samples(va.plans), fcfg, opt);
      log.event("done", {{"epochs", m.epoch}, {"best", (fs::path(fx_out) / "best.json").string()}});
      return 0;
    };
  });

  // train
  auto* tsg = app.add_subcommand("train", "Train a segmenter");
  train::SegTrainConfig scfg;
  std::string sg_data, sg_out, sg_featx, sg_variant = "fgss16";
  bool sg_norec = false, sg_resume = false, sg_tune = false;
  int sg_limit = 0, sg_base = 0, sg_tile = 0, sg_stages = 0;
  tsg->add_option("--data", sg_data, "Dataset directory")->required();
  tsg->add_option("--out", sg_out, "Run directory")->required();
  tsg->add_option("--featx", sg_featx, "Feature-extractor checkpoint (fgss variants)");
  tsg->add_option("--variant", sg_variant)
      ->capture_default_str()
      ->check(CLI::IsMember({"fgss16", "fgss32", "unet16", "unet32"}));
  tsg->add_flag("--no-rec", sg_norec, "Drop the reconstruction head");
  tsg->add_option("--epochs", scfg.epochs)->capture_default_str()->check(CLI::PositiveNumber);
  tsg->add_option("--lr", scfg.lr)->capture_default_str();
  tsg->add_option("--batch", scfg.batch)->capture_default_str()->check(CLI::PositiveNumber);
  tsg->add_option("--w3", scfg.w3, "Segmentation weight")->capture_default_str();
  tsg->add_option("--w4", scfg.w4, "Latent-reconstruction weight")->capture_default_str();
  tsg->add_option("--decay", scfg.decay)->capture_default_str();
  tsg->add_option("--decay-every", scfg.decay_every)->capture_default_str();
  tsg->add_option("--tiles-per-plan", scfg.tiles_per_plan)->capture_default_str();
  tsg->add_option("--rotate-prob", scfg.rotate_prob)->capture_default_str();
  tsg->add_option("--val-every", scfg.val_every, "Validation IoU every K epochs")->capture_default_str();
  tsg->add_option("--val-stride", scfg.val_infer.stride)->capture_default_str();
  tsg->add_option("--seed", scfg.seed)->capture_default_str();
  tsg->add_option("--base", sg_base, "Override base channel width");
  tsg->add_option("--tile", sg_tile, "Override tile side");
  tsg->add_option("--stages", sg_stages, "Override encoder depth");
  tsg->add_option("--limit", sg_limit, "Use at most N plans per split (0 = all)")->capture_default_str();
  tsg->add_flag("--tune-e2", sg_tune, "Fine-tune the crop encoder instead of freezing it");
  tsg->add_flag("--resume", sg_resume, "Continue from <out>/last.json");
  tsg->add_option("--threads", common.threads, "Worker threads (FGSS_THREADS fallback)");
  tsg->callback([&] {
    action = [&] {
      auto mc = model::SegmenterConfig::named(sg_variant, !sg_norec);
      if (sg_base > 0) mc.base = sg_base;
      if (sg_tile > 0) mc.tile = sg_tile;
      if (sg_stages > 0) {
        mc.stages = sg_stages;
        mc.e3_plan = e3_plan_for(sg_stages, mc.injected_channels);
      }
      scfg.model = mc;
      scfg.freeze_e2 = !sg_tune;
      scfg.val_infer.threads = resolve_threads(common.threads);
      log.event("config", {{"subcommand", "train"}, {"data", sg_data}, {"out", sg_out}, {"featx", sg_featx},
                           {"resume", sg_resume}, {"threads", scfg.val_infer.threads}, {"train", scfg.to_json()}});
      scfg.validate();
      std::unique_ptr<model::FeatureExtractor<float>> fx;
      if (mc.fused()) {
        if (sg_featx.empty()) throw UsageError("--featx is required for fgss variants");
        fx = train::load_featx(sg_featx);
      }
      const auto tr = load_split(sg_data, "train", sg_limit);
      const auto va = load_split(sg_data, "val", sg_limit);
      train::RunOptions opt;
      opt.out_dir = sg_out;
      opt.dataset_hash = dataset_hash(sg_data);
      opt.resume = sg_resume;
      opt.on_epoch = [&](const train::MetricRow& r) {
        json rec = {{"epoch", r.epoch}, {"lr", r.lr}, {"trainLoss", r.train_loss}, {"valLoss", r.val_loss}};
        rec["valIou"] = r.val_metric ? json(*r.val_metric) : json(nullptr);
        log.event("epoch", rec);
      };
      const auto m = train::train_segmenter(tr.plans, va.plans, fx.get(), scfg, opt);
      log.event("done", {{"epochs", m.epoch}, {"best", (fs::path(sg_out) / "best.json").string()}});
      return 0;
    };
  });

  // infer
  auto* inf = app.add_subcommand("infer", "Segment one floorplan image");
  std::string in_image, in_ckpt, in_crops, in_out, in_prob, in_overlay;
  infer::InferenceConfig icfg;
  inf->add_option("--image", in_image, "Input PNG/JPEG")->required()->check(CLI::ExistingFile);
  inf->add_option("--ckpt", in_ckpt, "Segmenter checkpoint (manifest or run dir)")->required();
  inf->add_option("--crops", in_crops, "Crop sidecar JSON (required for fgss checkpoints)");
  inf->add_option("--stride", icfg.stride)->capture_default_str();
  inf->add_option("--threshold", icfg.threshold)->capture_default_str();
  inf->add_option("--batch", icfg.batch, "Tiles per forward call")->capture_default_str();
  inf->add_option("--out", in_out, "Mask PNG")->required();
  inf->add_option("--probability", in_prob, "Also write the probability PNG");
  inf->add_option("--threads", common.threads, "Worker threads (FGSS_THREADS fallback)");
  inf->callback([&] {
    action = [&] {
      icfg.threads = resolve_threads(common.threads);
      log.event("config", {{"subcommand", "infer"}, {"image", in_image}, {"ckpt", in_ckpt}, {"crops", in_crops},
                           {"stride", icfg.stride}, {"threshold", icfg.threshold}, {"threads", icfg.threads},
                           {"out", in_out}});
      const auto model = train::load_seg_model(in_ckpt);
      if (model->needs_injection() && in_crops.empty()) {
        throw UsageError("--crops is required for fgss checkpoints");
      }
      const Raster image = io::read_gray(in_image);
      icfg.tile = model->tile_side();
      icfg.validate();
      infer::SegmentationResult r;
      if (!in_crops.empty()) {
        std::ifstream f(in_crops);
        if (!f) throw std::runtime_error("cannot read " + in_crops);
        std::stringstream ss;
        ss << f.rdbuf();
        const auto sidecar = pipeline::sidecar_from_json(ss.str());
        const auto a = infer::prepare_annotated(image, sidecar);
        r = infer::segment_floorplan(a.image, model->needs_injection() ? &a.crops : nullptr, *model, icfg);
        r = infer::to_original(r, image.height(), image.width(), icfg.threshold);
      } else {
        r = infer::segment_floorplan(image, nullptr, *model, icfg);
      }
      io::write_png(in_out, r.mask);
      if (!in_prob.empty()) io::write_file(in_prob, infer::probability_png(r.probability));
      log.event("done", {{"tiles", r.tiles}, {"millis", r.millis}, {"wallPixels", r.mask.count()}});
      return 0;
    };
  });

  // eval
  auto* ev = app.add_subcommand("eval", "Mean IoU over a dataset split");
  std::string ev_data, ev_ckpt, ev_report, ev_split = "test", ev_ablation = "none";
  eval::EvalConfig ecfg;
  int ev_limit = 0;
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--ckpt", ev_ckpt, "Segmenter checkpoint")->required();
  ev->add_option("--ablation", ev_ablation)->capture_default_str()->check(CLI::IsMember({"none", "grey"}));
  ev->add_option("--grey-seed", ecfg.grey_seed)->capture_default_str();
  ev->add_option("--split", ev_split)->capture_default_str()->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--stride", ecfg.infer.stride)->capture_default_str();
  ev->add_option("--threshold", ecfg.infer.threshold)->capture_default_str();
  ev->add_option("--limit", ev_limit)->capture_default_str();
  ev->add_option("--report", ev_report, "Report path (.json; a .csv is written beside it)")->required();
  ev->add_option("--threads", common.threads, "Worker threads (FGSS_THREADS fallback)");
  ev->callback([&] {
    action = [&] {
      ecfg.infer.threads = resolve_threads(common.threads);
      ecfg.ablation = eval::ablation_from_string(ev_ablation);
      log.event("config", {{"subcommand", "eval"}, {"data", ev_data}, {"ckpt", ev_ckpt}, {"split", ev_split},
                           {"ablation", ev_ablation}, {"greySeed", ecfg.grey_seed}, {"stride", ecfg.infer.stride},
                           {"threshold", ecfg.infer.threshold}, {"threads", ecfg.infer.threads}});
      const auto model = train::load_seg_model(ev_ckpt);
      const auto split = load_split(ev_data, ev_split, ev_limit);
      const auto rep = eval::evaluate_dataset(split.plans, *model, ecfg, ev_ckpt, ev_split);
      write_text(ev_report, rep.to_json().dump(2) + "\n");
      write_text(fs::path(ev_report).replace_extension(".csv"), rep.to_csv());
      log.event("done", {{"meanIou", rep.mean_iou}, {"plans", rep.plans.size()}, {"report", ev_report}});
      return 0;
    };
  });

  // sweep
  auto* sw = app.add_subcommand("sweep", "IoU and wall-clock over inference strides");
  std::string sw_data, sw_ckpt, sw_split = "test", sw_out;
  std::vector<int> sw_strides{10, 20, 30, 40, 60, 120};
  int sw_limit = 0;
  infer::InferenceConfig swcfg;
  sw->add_option("--data", sw_data, "Dataset directory")->required();
  sw->add_option("--ckpt", sw_ckpt, "Segmenter checkpoint")->required();
  sw->add_option("--strides", sw_strides, "Comma-separated strides")->delimiter(',')->capture_default_str();
  sw->add_option("--split", sw_split)->capture_default_str()->check(CLI::IsMember({"train", "val", "test"}));
  sw->add_option("--limit", sw_limit)->capture_default_str();
  sw->add_option("--out", sw_out, "CSV path (stride,meanIou,millis,tiles)");
  sw->add_option("--threads", common.threads, "Worker threads (FGSS_THREADS fallback)");
  sw->callback([&] {
    action = [&] {
      swcfg.threads = resolve_threads(common.threads);
      log.event("config", {{"subcommand", "sweep"}, {"data", sw_data}, {"ckpt", sw_ckpt}, {"split", sw_split},
                           {"strides", sw_strides}, {"threads", swcfg.threads}});
      const auto model = train::load_seg_model(sw_ckpt);
      swcfg.tile = model->tile_side();
      const auto split = load_split(sw_data, sw_split, sw_limit);
      std::vector<infer::SweepItem> items;
      for (const auto& p : split.plans) {
        infer::SweepItem it{p.image, std::nullopt, p.mask};
        if (model->needs_injection()) it.crops = p.crops;
        items.push_back(std::move(it));
      }
      const auto rows = infer::stride_sweep(items, *model, sw_strides, swcfg);
      std::ostringstream csv;
      csv << "stride,meanIou,millis,tiles\n";
      for (const auto& r : rows) {
        csv << r.stride << ',' << r.mean_iou << ',' << r.millis << ',' << r.tiles << '\n';
        log.event("stride", {{"stride", r.stride}, {"meanIou", r.mean_iou}, {"millis", r.millis}, {"tiles", r.tiles}});
      }
      if (!sw_out.empty()) write_text(sw_out, csv.str());
      return 0;
    };
  });

  // widths
  auto* wd = app.add_subcommand("widths", "Width-deviation histogram of a feature extractor");
  std::string wd_data, wd_ckpt, wd_out, wd_split = "test";
  int wd_limit = 0;
  wd->add_option("--data", wd_data, "Dataset directory")->required();
  wd->add_option("--ckpt", wd_ckpt, "Feature-extractor checkpoint")->required();
  wd->add_option("--split", wd_split)->capture_default_str()->check(CLI::IsMember({"train", "val", "test"}));
  wd->add_option("--limit", wd_limit)->capture_default_str();
  wd->add_option("--out", wd_out, "Histogram CSV");
  wd->callback([&] {
    action = [&] {
      log.event("config", {{"subcommand", "widths"}, {"data", wd_data}, {"ckpt", wd_ckpt}, {"split", wd_split}});
      const auto fx = train::load_featx(wd_ckpt);
      const auto samples = train::crop_samples(load_split(wd_data, wd_split, wd_limit).plans);
      std::vector<int> truth;
      for (const auto& s : samples) truth.push_back(s.width_px);
      const auto h = eval::width_deviation_histogram(eval::predict_widths(*fx, samples), truth);
      if (!wd_out.empty()) write_text(wd_out, h.to_csv());
      log.event("done", h.to_json());
      return 0;
    };
  });

  // export-latents
  auto* ex = app.add_subcommand("export-latents", "Write crop latents as CSV");
  std::string ex_data, ex_ckpt, ex_out, ex_split = "test";
  int ex_count = 60;
  ex->add_option("--data", ex_data, "Dataset directory")->required();
  ex->add_option("--ckpt", ex_ckpt, "Feature-extractor checkpoint")->required();
  ex->add_option("--split", ex_split)->capture_default_str()->check(CLI::IsMember({"train", "val", "test"}));
  ex->add_option("--count", ex_count, "Crops to export (0 = all)")->capture_default_str();
  ex->add_option("--out", ex_out, "CSV path")->required();
  ex->callback([&] {
    action = [&] {
      log.event("config", {{"subcommand", "export-latents"}, {"data", ex_data}, {"ckpt", ex_ckpt}, {"count", ex_count}});
      const auto fx = train::load_featx(ex_ckpt);
      auto samples = train::crop_samples(load_split(ex_data, ex_split, 0).plans);
      if (ex_count > 0 && static_cast<int>(samples.size()) > ex_count) samples.resize(static_cast<std::size_t>(ex_count));
      std::ostringstream os;
      eval::export_latents(*fx, samples, os);
      write_text(ex_out, os.str());
      log.event("done", {{"rows", samples.size()}, {"out", ex_out}});
      return 0;
    };
  });

  // audit
  auto* au = app.add_subcommand("audit", "Parameter, MiB and FLOP counts of the named models");
  std::string au_format = "json";
  au->add_option("--format", au_format)->capture_default_str()->check(CLI::IsMember({"json", "csv"}));
  au->callback([&] {
    action = [&] {
      log.event("config", {{"subcommand", "audit"}, {"format", au_format}});
      std::vector<model::AuditRow> rows;
      for (const auto& n : model::audit_names()) rows.push_back(model::audit_model(n));
      if (au_format == "csv") {
        out << eval::audit_csv(rows);
      } else {
        log.event("audit", {{"models", eval::audit_json(rows)}});
      }
      return 0;
    };
  });

  // serve
  auto* sv = app.add_subcommand("serve", "Run the HTTP service");
  service::ServiceConfig svc;
  std::string sv_models, sv_host = "127.0.0.1";
  int sv_port = 8080;
  sv->add_option("--port", sv_port)->capture_default_str();
  sv->add_option("--host", sv_host)->capture_default_str();
  sv->add_option("--models-dir", sv_models, "Checkpoint directory (FGSS_MODELS_DIR fallback)");
  sv->add_option("--workers", svc.workers, "Concurrent segmentation jobs")->capture_default_str();
  sv->add_option("--threads", common.threads, "Threads per job (FGSS_THREADS fallback)");
  sv->callback([&] {
    action = [&] {
      svc.models_dir = sv_models;
      svc.infer_threads = resolve_threads(common.threads);
      log.event("config", {{"subcommand", "serve"}, {"host", sv_host}, {"port", sv_port}, {"modelsDir", sv_models},
                           {"workers", svc.workers}, {"threads", svc.infer_threads}});
      return service::serve(svc, sv_host, sv_port);
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return 1;
  }
  try {
    return action ? action() : 1;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace fgss::cli
