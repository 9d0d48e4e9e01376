// deftrans: data generation, translation training, batch translation, pose
// training, evaluation and plotting from one binary.

#include <CLI11.hpp>
#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "deftrans/config.hpp"
#include "deftrans/data.hpp"
#include "deftrans/format.hpp"
#include "deftrans/io.hpp"
#include "deftrans/metrics.hpp"
#include "deftrans/pose.hpp"
#include "deftrans/settings.hpp"
#include "deftrans/tensors.hpp"
#include "deftrans/trainer.hpp"

namespace fs = std::filesystem;
using namespace deftrans;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::string preset;
  std::optional<int64_t> seed;
  std::string out;
  std::string device;
  std::string data;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file of dotted keys");
  cmd->add_option("--preset", c.preset, "named preset (overrides the file's preset)");
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--device", c.device, "compute device (cpu)");
  cmd->add_option("--data", c.data, "dataset root (data.root)");
  cmd->add_option("--set", c.overrides, "override a key, key=value (repeatable)");
}

config::RunConfig resolve(const Common& c) {
  auto cfg = c.config.empty() ? config::RunConfig::from_preset(c.preset.empty() ? "default" : c.preset)
                              : config::RunConfig::from_file(c.config, c.preset);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    cfg.set_text(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.set("seed", *c.seed);
  if (!c.device.empty()) cfg.set("device", c.device);
  if (!c.data.empty()) cfg.set("data.root", c.data);
  const auto device = cfg.text("device");
  if (device != "cpu")
    throw std::invalid_argument("device '" + device + "' is not supported; this build runs on the CPU");
  const auto threads = cfg.integer("threads");
  if (threads < 1) throw std::invalid_argument("threads must be at least 1");
  torch::set_num_threads(static_cast<int>(threads));
  return cfg;
}

fs::path out_dir(const Common& c, const char* fallback) {
  return c.out.empty() ? config::default_output_root() / fallback : fs::path(c.out);
}

Animal animal_of(const config::RunConfig& cfg) { return animal_from_string(cfg.text("animal")); }

// --- generate ------------------------------------------------------------------------

int cmd_generate(const Common& c) {
  const auto cfg = resolve(c);
  const fs::path out = c.out.empty() ? fs::path(cfg.text("data.root")) : fs::path(c.out);
  const auto kind = cfg.text("data.kind");
  if (kind == "sim2sim") {
    const auto bench = data::build_sim2sim_benchmark(benchmark_config(cfg));
    data::write_benchmark(out, bench);
  } else if (kind == "synthetic") {
    data::SyntheticSpec spec;
    spec.animal = animal_of(cfg);
    spec.image_size = static_cast<int>(cfg.integer("image_size"));
    spec.seed = static_cast<uint64_t>(cfg.integer("seed"));
    auto samples = data::gen_synthetic(spec, static_cast<int>(cfg.integer("data.source_train")));
    data::DomainSet set{"source", data::Split::unpaired_train, spec.animal, {}};
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char id[16];
      std::snprintf(id, sizeof(id), "a%04zu", i);
      set.items.push_back({id, samples[i].image, samples[i].mask, samples[i].keypoints});
    }
    data::write_domain_set(out, set);
    nlohmann::ordered_json m;
    m["format"] = "deftrans-dataset";
    m["version"] = 1;
    m["kind"] = "synthetic";
    m["animal"] = cfg.text("animal");
    m["seed"] = cfg.integer("seed");
    m["image_size"] = cfg.integer("image_size");
    m["sets"] = {{{"domain", "source"}, {"split", "unpaired_train"}, {"count", set.items.size()},
                  {"sha256", data::content_hash(set)}}};
    std::ofstream(out / data::kManifestName) << m.dump(2) << '\n';
  } else if (kind == "ingested") {
    throw std::invalid_argument(
        "this preset uses externally rendered source frames; place them under <root>/source/unpaired_train "
        "(images/, masks/, annotations/keypoints.txt) instead of generating");
  } else {
    throw std::invalid_argument("unknown data.kind '" + kind + "'");
  }
  cfg.write_snapshot(out / "config.json");
  std::cout << "wrote " << (out / data::kManifestName).string() << '\n';
  return 0;
}

// --- train-translation ---------------------------------------------------------------

int cmd_train_translation(const Common& c, bool resume) {
  data::enter_training_mode();
  const auto cfg = resolve(c);
  const auto settings = translation_settings(cfg);
  const fs::path root = cfg.text("data.root");
  const fs::path out = out_dir(c, "translation");
  const auto animal = animal_of(cfg);
  const auto source = data::read_domain_set(root, "source", data::Split::unpaired_train, animal);
  const auto target = data::read_domain_set(root, "target", data::Split::unpaired_train, animal);
  fs::create_directories(out);
  cfg.write_snapshot(out / "config.json");
  const auto result = train::train_translation(settings, source, target, out, resume);
  std::cout << "trained " << result.steps << " steps";
  if (!resume) std::cout << " (identity pretraining deviation " << result.pretrain.deviation << ")";
  std::cout << "; run directory " << out.string() << '\n';
  return 0;
}

// --- translate --------------------------------------------------------------------------

fs::path checkpoint_dir(const fs::path& p) {
  if (fs::exists(p / "stn.ckpt")) return p;
  return train::latest_checkpoint(p);
}

int cmd_translate(const Common& c, const std::string& checkpoint, bool dump_fields) {
  data::enter_training_mode();
  const auto cfg = resolve(c);
  if (checkpoint.empty()) throw UsageError("translate needs --checkpoint (a run or checkpoint directory)");
  auto models = train::load_models(checkpoint_dir(checkpoint));
  const fs::path root = cfg.text("data.root");
  const fs::path out = out_dir(c, "translated");
  const auto animal = animal_of(cfg);
  const auto source = data::read_domain_set(root, "source", data::Split::unpaired_train, animal);
  const double tau = cfg.number("translation.tau");

  data::DomainSet translated{"translated", data::Split::unpaired_train, animal, {}};
  std::vector<torch::Tensor> thetas;
  const std::size_t chunk = 16;
  if (dump_fields) fs::create_directories(out / "fields");
  for (std::size_t start = 0; start < source.items.size(); start += chunk) {
    std::vector<Image> imgs;
    std::vector<SilhouetteMask> masks;
    std::vector<KeypointSet> kps;
    const std::size_t end = std::min(source.items.size(), start + chunk);
    for (std::size_t i = start; i < end; ++i) {
      const auto& item = source.items[i];
      if (!item.mask) throw std::runtime_error("source item " + item.id + " has no silhouette");
      imgs.push_back(item.image);
      masks.push_back(*item.mask);
      kps.push_back(item.keypoints.value_or(KeypointSet{}));
    }
    auto tr = train::translate_batch(models, to_tensor(imgs), to_tensor(masks), kps, tau);
    thetas.push_back(tr.fields.theta.matrix);
    for (std::size_t i = start; i < end; ++i) {
      const auto k = static_cast<int64_t>(i - start);
      const auto& id = source.items[i].id;
      translated.items.push_back({id, io::quantized(image_from_tensor(tr.images[k])), mask_from_tensor(tr.masks[k]),
                                  tr.keypoints[static_cast<std::size_t>(k)]});
      if (dump_fields) warp::save_field(out / "fields" / (id + ".field"), tr.fields, k);
    }
  }
  data::write_domain_set(out, translated);
  const auto est = train::estimate_similarity(warp::AffineParams{torch::cat(thetas, 0)});
  nlohmann::ordered_json t{{"items", translated.items.size()},
                           {"scale", est.scale},
                           {"rotation_deg", est.rotation_deg},
                           {"translation", {est.tx, est.ty}}};
  std::ofstream(out / "theta.json") << t.dump(2) << '\n';
  cfg.write_snapshot(out / "config.json");
  std::cout << "translated " << translated.items.size() << " items; mean forward scale " << est.scale
            << ", rotation " << est.rotation_deg << " deg\n";
  return 0;
}

// --- train-pose ------------------------------------------------------------------------------

int cmd_train_pose(const Common& c, const std::string& domain, const std::string& split) {
  data::enter_training_mode();
  const auto cfg = resolve(c);
  const auto settings = pose_settings(cfg);
  const fs::path root = cfg.text("data.root");
  const fs::path out = out_dir(c, "pose");
  const auto set = data::read_domain_set(root, domain, data::split_from_string(split), settings.animal);
  std::vector<pose::PoseSample> samples;
  for (const auto& item : set.items)
    if (item.keypoints) samples.push_back({item.image, *item.keypoints});
  if (samples.empty()) throw std::runtime_error("no annotated items in " + data::set_dir(root, domain, data::split_from_string(split)).string());
  fs::create_directories(out);
  cfg.write_snapshot(out / "config.json");
  auto model = pose::create_pose_model(settings);
  const auto result = pose::train_pose(model, samples, settings, out / "log.csv", out / "nan_dump");
  pose::save_pose_model(out / "pose.ckpt", model, settings.seed, result.steps);
  std::cout << "trained pose model for " << result.steps << " steps on " << samples.size() << " samples; "
            << (out / "pose.ckpt").string() << '\n';
  return 0;
}

// --- eval -------------------------------------------------------------------------------------

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& translated) {
  if (data::in_training_mode()) throw std::logic_error("evaluation cannot run inside a training command");
  const auto cfg = resolve(c);
  if (checkpoint.empty()) throw UsageError("eval needs --checkpoint (a pose.ckpt file)");
  const fs::path root = cfg.text("data.root");
  const fs::path out = out_dir(c, "eval");
  const auto animal = animal_of(cfg);
  const auto& skel = skeleton_for(animal);
  auto test = data::read_domain_set(root, "target", data::Split::test, animal);

  std::optional<data::SealedTruth> sealed;
  std::vector<KeypointSet> gt;
  if (fs::exists(root / data::kManifestName) && fs::exists(root / data::kSealedGtPath)) {
    sealed = data::read_sealed_truth(root);
    for (const auto& item : test.items) {
      const auto rel = "images/" + item.id + ".png";
      auto it = std::find_if(sealed->keypoints.begin(), sealed->keypoints.end(),
                             [&](const auto& r) { return r.image_path == rel; });
      if (it == sealed->keypoints.end()) throw std::runtime_error("no sealed annotation for " + rel);
      gt.push_back(it->keypoints);
    }
  } else {
    for (const auto& item : test.items) {
      if (!item.keypoints) throw std::runtime_error("test item " + item.id + " has no annotation");
      gt.push_back(*item.keypoints);
    }
  }
  auto model = pose::load_pose_model(checkpoint);
  std::vector<Image> images;
  for (const auto& item : test.items) images.push_back(item.image);
  const auto preds = pose::predict(model, images, skel);
  std::vector<KeypointSet> pred_sets;
  std::vector<io::AnnotationRecord> records;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    pred_sets.push_back(preds[i].keypoints);
    records.push_back({"images/" + test.items[i].id + ".png", animal, preds[i].keypoints});
  }
  const auto report = metrics::evaluate(pred_sets, gt, skel.symmetries, cfg.number("eval.t_min"), cfg.number("eval.t_max"));
  fs::create_directories(out);
  metrics::write_report_csv(out / "report.csv", report);
  metrics::write_report_json(out / "report.json", report);
  io::write_annotations(out / "predictions.txt", records);
  cfg.write_snapshot(out / "config.json");

  auto pck_at = [&](const std::vector<double>& curve, double t) {
    for (std::size_t i = 0; i < report.thresholds.size(); ++i)
      if (report.thresholds[i] == t) return curve[i];
    return metrics::pck(pred_sets, gt, t);
  };
  std::cout << "samples " << report.samples << "  RMSE " << report.rmse << "  PI-RMSE " << report.pi_rmse
            << "  PCK@10 " << pck_at(report.pck, 10.0) << "  PI-PCK@10 " << pck_at(report.pi_pck, 10.0) << "  AUC "
            << report.auc << "  PI-AUC " << report.pi_auc << '\n';

  if (!translated.empty()) {
    nlohmann::ordered_json summary;
    const fs::path tdir = translated;
    if (fs::exists(tdir / "theta.json") && sealed) {
      std::ifstream ts(tdir / "theta.json");
      const auto t = nlohmann::json::parse(ts);
      const double scale = t.at("scale").get<double>(), rot = t.at("rotation_deg").get<double>();
      summary["theta"] = {{"scale", scale},
                          {"rotation_deg", rot},
                          {"true_scale", sealed->scale},
                          {"true_rotation_deg", sealed->rotation_deg},
                          {"scale_error", std::abs(scale - sealed->scale)},
                          {"rotation_error_deg", std::abs(rot - sealed->rotation_deg)}};
    }
    const auto tr = data::read_domain_set(tdir, "translated", data::Split::unpaired_train, animal);
    const auto refs = data::read_domain_set(root, "target", data::Split::unpaired_train, animal);
    std::vector<Image> generated, references;
    for (const auto& item : tr.items) generated.push_back(item.image);
    for (const auto& item : refs.items) references.push_back(item.image);
    const metrics::SsimParams sp;
    summary["ssim"] = metrics::mean_ssim_against_references(generated, references,
                                                            static_cast<uint64_t>(cfg.integer("eval.ssim_seed")), sp);
    summary["ssim_params"] = {{"window", sp.window}, {"sigma", sp.sigma}, {"k1", sp.k1}, {"k2", sp.k2},
                              {"dynamic_range", sp.dynamic_range}};
    std::ofstream(out / "translation.json") << summary.dump(2) << '\n';
    std::cout << "translation: " << summary.dump() << '\n';
  }
  return 0;
}

// --- plot -------------------------------------------------------------------------------------

void plot_curves(const fs::path& path, const metrics::EvalReport& r) {
  const int w = 640, h = 420, left = 60, right = 20, top = 20, bottom = 50;
  cv::Mat img(h, w, CV_8UC3, cv::Scalar(255, 255, 255));
  const double t0 = r.thresholds.front(), t1 = r.thresholds.back();
  auto px = [&](double t, double v) {
    const double fx = t1 > t0 ? (t - t0) / (t1 - t0) : 0.0;
    return cv::Point(left + static_cast<int>(fx * (w - left - right)),
                     h - bottom - static_cast<int>(v / 100.0 * (h - top - bottom)));
  };
  cv::rectangle(img, px(t0, 0), px(t1, 100), cv::Scalar(0, 0, 0));
  for (int v = 0; v <= 100; v += 20) {
    cv::line(img, px(t0, v), px(t1, v), cv::Scalar(220, 220, 220));
    cv::putText(img, std::to_string(v), px(t0, v) + cv::Point(-40, 5), cv::FONT_HERSHEY_SIMPLEX, 0.45,
                cv::Scalar(0, 0, 0));
  }
  for (double t = t0; t <= t1; t += 5.0)
    cv::putText(img, format_double(t), px(t, 0) + cv::Point(-8, 20), cv::FONT_HERSHEY_SIMPLEX, 0.45,
                cv::Scalar(0, 0, 0));
  cv::putText(img, "threshold (px)", cv::Point(w / 2 - 60, h - 8), cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0));
  auto curve = [&](const std::vector<double>& v, const cv::Scalar& color) {
    for (std::size_t i = 1; i < v.size(); ++i)
      cv::line(img, px(r.thresholds[i - 1], v[i - 1]), px(r.thresholds[i], v[i]), color, 2, cv::LINE_AA);
  };
  curve(r.pck, cv::Scalar(200, 80, 0));
  curve(r.pi_pck, cv::Scalar(0, 0, 200));
  cv::putText(img, "PCK", cv::Point(left + 10, top + 20), cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(200, 80, 0));
  cv::putText(img, "PI-PCK", cv::Point(left + 10, top + 40), cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 200));
  if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write " + path.string());
}

int cmd_plot(const Common& c, const std::string& report_path, const std::string& grid_domain) {
  const auto cfg = resolve(c);
  const fs::path out = out_dir(c, "plots");
  fs::create_directories(out);
  bool any = false;
  if (!report_path.empty()) {
    const auto report = metrics::read_report_csv(report_path);
    if (report.thresholds.empty()) throw std::runtime_error(report_path + " has no rows");
    metrics::write_report_csv(out / "accuracy.csv", report);
    plot_curves(out / "accuracy.png", report);
    std::cout << "wrote " << (out / "accuracy.png").string() << " and accuracy.csv\n";
    any = true;
  }
  if (!grid_domain.empty()) {
    const fs::path root = cfg.text("data.root");
    const auto set = data::read_domain_set(root, grid_domain, data::Split::unpaired_train, animal_of(cfg));
    std::vector<std::vector<io::GridCell>> rows;
    for (std::size_t i = 0; i < std::min<std::size_t>(8, set.items.size()); ++i) {
      const auto& item = set.items[i];
      std::vector<io::GridCell> row{{item.image, item.keypoints.value_or(KeypointSet{})}};
      if (item.mask) row.push_back({io::mask_to_image(*item.mask), {}});
      rows.push_back(row);
    }
    if (rows.empty()) throw std::runtime_error("no items to plot");
    io::write_grid(out / "samples.png", rows);
    std::cout << "wrote " << (out / "samples.png").string() << '\n';
    any = true;
  }
  if (!any) throw UsageError("plot needs --report and/or --grid");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic-to-target animal image translation and pose training"};
  app.require_subcommand(1);
  Common common;
  bool resume = false, dump_fields = false;
  std::string checkpoint, translated, report, grid;
  std::string pose_domain = "translated", pose_split = "unpaired_train";

  auto* gen = app.add_subcommand("generate", "generate a synthetic dataset or the sim2sim benchmark");
  add_common(gen, common);
  auto* trt = app.add_subcommand("train-translation", "train the shape and appearance translation networks");
  add_common(trt, common);
  trt->add_flag("--resume", resume, "continue from the latest checkpoint in --out");
  auto* tr = app.add_subcommand("translate", "translate the source set with trained generators");
  add_common(tr, common);
  tr->add_option("--checkpoint", checkpoint, "translation run or checkpoint directory");
  tr->add_flag("--dump-fields", dump_fields, "write one deformation field file per item");
  auto* tp = app.add_subcommand("train-pose", "train the pose network on an annotated set");
  add_common(tp, common);
  tp->add_option("--domain", pose_domain, "domain directory under the data root");
  tp->add_option("--split", pose_split, "split (unpaired_train or test)");
  auto* ev = app.add_subcommand("eval", "evaluate a pose model on the target test set");
  add_common(ev, common);
  ev->add_option("--checkpoint", checkpoint, "pose model file");
  ev->add_option("--translated", translated, "translated dataset root for SSIM and affine recovery");
  auto* pl = app.add_subcommand("plot", "accuracy curves and sample grids");
  add_common(pl, common);
  pl->add_option("--report", report, "report CSV written by eval");
  pl->add_option("--grid", grid, "domain under the data root to render as a sample grid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_generate(common);
    if (trt->parsed()) return cmd_train_translation(common, resume);
    if (tr->parsed()) return cmd_translate(common, checkpoint, dump_fields);
    if (tp->parsed()) return cmd_train_pose(common, pose_domain, pose_split);
    if (ev->parsed()) return cmd_eval(common, checkpoint, translated);
    if (pl->parsed()) return cmd_plot(common, report, grid);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
