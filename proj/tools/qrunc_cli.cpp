// qrunc command-line driver.
//
//   qrunc simulate|train|calibrate|detect|eval --config <path> --out <dir> [--seed N]
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "qrunc/qrunc.hpp"

namespace fs = std::filesystem;
using namespace qrunc;
using io::Config;
using io::ConfigError;
using io::Json;

namespace {

struct Run {
  Config cfg;
  fs::path out;
  std::uint64_t seed = 0;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const fs::path& p, const std::string& s) { io::write_file(p, s); }

void write_json(const fs::path& p, const Json& j) { write_text(p, j.dump(2) + "\n"); }

Json read_json(const fs::path& p) {
  try {
    return Json::parse(io::read_file(p));
  } catch (const Json::exception& e) {
    throw io::FormatError(p.string() + ": " + e.what());
  }
}

const Tensor& need(const io::NamedTensors& recs, const std::string& name, const fs::path& from) {
  if (!io::contains(recs, name))
    throw Error(from.string() + " has no '" + name + "' record; produce it with 'qrunc simulate'");
  return io::find(recs, name);
}

fs::path input_path(const Config& c, const std::string& key) {
  const fs::path p = c.str(key);
  if (!fs::exists(p)) throw Error("input '" + key + "' not found: " + p.string());
  return p;
}

double open_unit(const Config& c, const std::string& key, double def) {
  const double v = c.num(key, def);
  if (!(v > 0.0 && v < 1.0)) throw ConfigError("config key '" + key + "' must lie in (0, 1)");
  return v;
}

std::vector<std::size_t> sizes(const Config& c, const std::string& key, std::vector<std::size_t> def) {
  if (!c.has(key)) return def;
  std::vector<std::size_t> out;
  for (double v : c.nums(key, {})) {
    if (v < 0 || v != std::floor(v)) throw ConfigError("config key '" + key + "' expects non-negative integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

Tensor plane(const Tensor& batch, std::size_t i) {
  const Tensor row = batch.slice_rows(i, i + 1);
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  return row.reshaped(s);
}

// ---------------------------------------------------------------------------

void cmd_simulate(const Run& r) {
  const Config& c = r.cfg;
  c.check_known({"seed", "dataset", "n", "latent_noise", "shared_eps", "size", "lesion_p", "radius_min", "radius_max",
                 "contrast_min", "contrast_max", "noise_std", "raters", "rater_radii", "rater_flip_p"});
  const std::string kind = c.str("dataset", "twomoon");
  io::NamedTensors recs;
  Json manifest{{"dataset", kind}, {"seed", r.seed}};
  if (kind == "twomoon") {
    sim::TwoMoonConfig tm;
    tm.n = c.uint("n", 500);
    tm.noise_std = c.num("latent_noise", tm.noise_std);
    tm.seed = r.seed;
    const Tensor z = sim::two_moon_latent(tm);
    Rng rng(mix_seed(r.seed, 1));
    const Tensor x = sim::simulate_4d(z, rng, {c.flag("shared_eps", false)});
    recs = {{"x", x}, {"z", z}};
    manifest["n"] = tm.n;
  } else if (kind == "lesion") {
    sim::LesionImageConfig lc;
    lc.n = c.uint("n", lc.n);
    lc.size = c.uint("size", lc.size);
    lc.lesion_p = c.num("lesion_p", lc.lesion_p);
    lc.radius_min = c.num("radius_min", lc.radius_min);
    lc.radius_max = c.num("radius_max", lc.radius_max);
    lc.contrast_min = c.num("contrast_min", lc.contrast_min);
    lc.contrast_max = c.num("contrast_max", lc.contrast_max);
    lc.noise_std = c.num("noise_std", lc.noise_std);
    lc.seed = r.seed;
    const auto ds = sim::synth_lesion_dataset(lc);
    recs = {{"images", ds.images}, {"masks", ds.masks}};
    manifest["n"] = lc.n;
    manifest["size"] = lc.size;
    if (c.uint("raters", 0) > 0) {
      sim::RaterConfig rc;
      rc.radii = c.nums("rater_radii", rc.radii);
      rc.flip_p = c.num("rater_flip_p", rc.flip_p);
      if (rc.radii.size() != c.uint("raters")) throw ConfigError("'rater_radii' must list one radius per rater");
      const std::size_t R = rc.radii.size(), P = lc.size * lc.size;
      Tensor raters({lc.n, R, lc.size, lc.size});
      Rng rng(mix_seed(r.seed, 2));
      for (std::size_t i = 0; i < lc.n; ++i) {
        const auto masks = sim::synth_multirater(plane(ds.masks, i), rc, rng);
        for (std::size_t k = 0; k < R; ++k)
          std::copy(masks[k].data().begin(), masks[k].data().end(), raters.values().begin() + static_cast<std::ptrdiff_t>((i * R + k) * P));
      }
      recs.emplace_back("raters", raters);
      manifest["raters"] = R;
    }
  } else {
    throw ConfigError("unknown dataset '" + kind + "' (expected twomoon or lesion)");
  }
  io::save_tensors(r.out / "data.qtn", recs);
  Json records = Json::array();
  for (const auto& [name, t] : recs) records.push_back({{"name", name}, {"shape", t.shape()}});
  manifest["records"] = records;
  write_json(r.out / "manifest.json", manifest);
}

// ---------------------------------------------------------------------------

std::vector<bqr::MultiRaterSample> rater_samples(const io::NamedTensors& recs, const fs::path& from) {
  const Tensor& images = need(recs, "images", from);
  const Tensor& raters = need(recs, "raters", from);
  if (raters.rank() != 4 || images.rank() != 4 || raters.dim(0) != images.dim(0))
    throw ShapeError("rater masks do not match images");
  std::vector<bqr::MultiRaterSample> out;
  for (std::size_t i = 0; i < images.dim(0); ++i) {
    const Tensor all = plane(raters, i);
    std::vector<Tensor> masks;
    for (std::size_t k = 0; k < all.dim(0); ++k) masks.push_back(plane(all, k).reshaped(plane(images, i).shape()));
    out.push_back({plane(images, i), std::move(masks)});
  }
  return out;
}

void cmd_train(const Run& r, std::string mode) {
  const Config& c = r.cfg;
  if (mode.empty()) mode = c.str("mode", "");
  if (mode.empty()) throw ConfigError("train needs --mode vae|qrvae|bqr");
  if (mode != "vae" && mode != "qrvae" && mode != "bqr") throw ConfigError("unknown train mode '" + mode + "'");
  const fs::path data_path = input_path(c, "data");
  const auto recs = io::load_tensors(data_path);

  if (mode == "bqr") {
    c.check_known({"seed", "mode", "data", "epochs", "warmup_epochs", "batch_size", "lr", "levels", "base_channels",
                   "warmup_weight", "resume"});
    const auto samples = rater_samples(recs, data_path);
    if (samples.empty()) throw Error("training set is empty");
    bqr::SegModel m;
    if (c.has("resume")) {
      m = io::load_seg(input_path(c, "resume"));
    } else {
      bqr::SegArch a;
      a.image_shape = samples[0].image.shape();
      a.levels = c.nums("levels", a.levels);
      a.base_channels = c.uint("base_channels", a.base_channels);
      m = bqr::make_seg_model(a, r.seed);
    }
    bqr::BqrTrainConfig tc;
    tc.epochs = c.uint("epochs", tc.epochs);
    tc.warmup_epochs = c.uint("warmup_epochs", tc.warmup_epochs);
    tc.batch_size = c.uint("batch_size", tc.batch_size);
    tc.lr = c.num("lr", tc.lr);
    tc.warmup_weight = c.num("warmup_weight", tc.warmup_weight);
    tc.seed = mix_seed(r.seed, 1);
    const auto res = bqr::train_bqr(samples, m, tc);
    std::string csv = "epoch,phase,loss\n";
    for (std::size_t e = 0; e < res.history.size(); ++e)
      csv += std::to_string(e + 1) + (e < tc.warmup_epochs ? ",warmup," : ",bqr,") + num(res.history[e]) + "\n";
    write_text(r.out / "history.csv", csv);
    io::save_seg(r.out / "model.qtn", m);
    if (res.collapsed) std::cerr << "warning: every head predicts an empty region on the training set\n";
    return;
  }

  c.check_known({"seed", "mode", "data", "epochs", "batch_size", "lr", "kl_weight", "latent_dim", "hidden",
                 "conv_blocks", "base_channels", "alpha_lo", "alpha_hi", "output_activation", "resume"});
  const Tensor& x = io::contains(recs, "x") ? io::find(recs, "x") : need(recs, "images", data_path);
  vae::VaeModel m;
  if (c.has("resume")) {
    m = io::load_vae(input_path(c, "resume"));
  } else {
    vae::VaeArch a;
    a.mode = mode == "vae" ? vae::HeadMode::MeanVar : vae::HeadMode::Quantiles;
    a.data_shape = Shape(x.shape().begin() + 1, x.shape().end());
    a.latent_dim = c.uint("latent_dim", a.latent_dim);
    a.hidden = sizes(c, "hidden", a.hidden);
    a.conv_blocks = c.uint("conv_blocks", a.conv_blocks);
    a.base_channels = c.uint("base_channels", a.base_channels);
    a.alpha_lo = open_unit(c, "alpha_lo", a.alpha_lo);
    a.alpha_hi = open_unit(c, "alpha_hi", a.alpha_hi);
    try {
      a.output_activation = io::parse_activation(c.str("output_activation", "identity"));
    } catch (const io::FormatError& e) {
      throw ConfigError(e.what());
    }
    m = vae::make_model(a, r.seed);
  }
  if ((m.arch.mode == vae::HeadMode::MeanVar) != (mode == "vae"))
    throw ConfigError("resumed model head mode does not match --mode " + mode);
  vae::TrainConfig tc;
  tc.epochs = c.uint("epochs", tc.epochs);
  tc.batch_size = c.uint("batch_size", tc.batch_size);
  tc.lr = c.num("lr", tc.lr);
  tc.kl_weight = c.num("kl_weight", tc.kl_weight);
  tc.seed = mix_seed(r.seed, 1);
  const auto hist = mode == "vae" ? vae::train_vae(x, m, tc) : vae::train_qrvae(x, m, tc);
  std::string csv = "epoch,loss,rec,kl\n";
  for (std::size_t e = 0; e < hist.size(); ++e)
    csv += std::to_string(e + 1) + "," + num(hist[e].loss) + "," + num(hist[e].rec) + "," + num(hist[e].kl) + "\n";
  write_text(r.out / "history.csv", csv);
  io::save_vae(r.out / "model.qtn", m);
}

// ---------------------------------------------------------------------------

anomaly::DetectMode detect_mode(const Config& c) {
  const std::string s = c.str("detect_mode", "gaussian");
  if (s == "gaussian") return anomaly::DetectMode::Gaussian;
  if (s == "modelfree") return anomaly::DetectMode::ModelFree;
  throw ConfigError("unknown detect_mode '" + s + "' (expected gaussian or modelfree)");
}

void cmd_calibrate(const Run& r) {
  const Config& c = r.cfg;
  c.check_known({"seed", "alpha", "scores", "model", "data", "detect_mode", "sigma_floor"});
  const double alpha = open_unit(c, "alpha", 0.05);
  Tensor scores;
  if (c.has("scores")) {
    const fs::path p = input_path(c, "scores");
    scores = need(io::load_tensors(p), "scores", p);
  } else {
    const auto m = io::load_vae(input_path(c, "model"));
    const fs::path dp = input_path(c, "data");
    const auto recs = io::load_tensors(dp);
    const Tensor& x = io::contains(recs, "x") ? io::find(recs, "x") : need(recs, "images", dp);
    if (x.dim(0) == 0) throw Error("calibration set is empty");
    const auto [lo, hi] = anomaly::detection_interval(vae::reconstruct(m, x), detect_mode(c), alpha,
                                                      c.num("sigma_floor", anomaly::kDefaultSigmaFloor));
    scores = conformal::conformity_scores(lo, hi, x);
  }
  if (scores.size() == 0) throw Error("calibration set is empty");
  const auto cal = conformal::calibrate(scores, alpha);
  Json j{{"alpha", cal.alpha}, {"n_cal", cal.n_cal}};
  // JSON has no infinity; null means the calibration set is too small for alpha
  j["margin"] = std::isfinite(cal.margin) ? Json(cal.margin) : Json(nullptr);
  write_json(r.out / "calibration.json", j);
}

conformal::Calibration load_calibration(const fs::path& p) {
  const Json j = read_json(p);
  try {
    conformal::Calibration cal;
    cal.alpha = j.at("alpha").get<double>();
    cal.n_cal = j.at("n_cal").get<std::size_t>();
    cal.margin = j.at("margin").is_null() ? std::numeric_limits<double>::infinity() : j.at("margin").get<double>();
    return cal;
  } catch (const Json::exception& e) {
    throw io::FormatError(p.string() + ": " + e.what());
  }
}

void cmd_detect(const Run& r) {
  const Config& c = r.cfg;
  c.check_known({"seed", "model", "data", "calibration", "detect_mode", "fdr_alpha", "median_window", "filter_stage",
                 "interval_alpha", "sigma_floor", "write_pgm"});
  const auto m = io::load_vae(input_path(c, "model"));
  const fs::path dp = input_path(c, "data");
  const auto recs = io::load_tensors(dp);
  const Tensor& images = need(recs, "images", dp);
  const bool have_truth = io::contains(recs, "masks");
  anomaly::DetectOptions opt;
  opt.mode = detect_mode(c);
  opt.fdr_alpha = open_unit(c, "fdr_alpha", opt.fdr_alpha);
  opt.median_window = c.uint("median_window", opt.median_window);
  opt.interval_alpha = open_unit(c, "interval_alpha", opt.interval_alpha);
  opt.sigma_floor = c.num("sigma_floor", opt.sigma_floor);
  const std::string stage = c.str("filter_stage", "zscore");
  if (stage == "zscore") opt.filter_stage = anomaly::FilterStage::ZScore;
  else if (stage == "mask") opt.filter_stage = anomaly::FilterStage::Mask;
  else if (stage == "none") opt.filter_stage = anomaly::FilterStage::None;
  else throw ConfigError("unknown filter_stage '" + stage + "'");
  if (c.has("calibration")) opt.conformal = load_calibration(input_path(c, "calibration"));

  const std::size_t n = images.dim(0);
  const auto maps = vae::reconstruct(m, images);
  Tensor masks(images.shape()), scores(images.shape());
  const std::size_t P = n ? images.size() / n : 0;
  auto image_maps = [&](std::size_t i) -> anomaly::ModelMaps {
    if (const auto* q = std::get_if<anomaly::QuantileMaps>(&maps))
      return anomaly::QuantileMaps{plane(q->lo, i), plane(q->hi, i), q->alpha_lo, q->alpha_hi};
    const auto& g = std::get<anomaly::GaussianMaps>(maps);
    return anomaly::GaussianMaps{plane(g.mean, i), plane(g.sigma, i)};
  };
  std::size_t degenerate = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor x = plane(images, i);
    const auto mm = image_maps(i);
    const auto res = anomaly::detect(x, mm, opt);
    Tensor score;
    if (opt.mode == anomaly::DetectMode::Gaussian) {
      score = anomaly::anomaly_score(res);
    } else {
      auto [lo, hi] = anomaly::detection_interval(mm, opt.mode, opt.conformal ? opt.conformal->alpha : opt.interval_alpha,
                                                  opt.sigma_floor);
      score = conformal::conformity_scores(lo, hi, x);
    }
    degenerate += res.degenerate;
    std::copy(res.mask.data().begin(), res.mask.data().end(), masks.values().begin() + static_cast<std::ptrdiff_t>(i * P));
    std::copy(score.data().begin(), score.data().end(), scores.values().begin() + static_cast<std::ptrdiff_t>(i * P));
  }
  io::save_tensors(r.out / "detections.qtn", {{"mask", masks}, {"score", scores}});

  if (c.flag("write_pgm", true)) {
    fs::create_directories(r.out / "masks");
    for (std::size_t i = 0; i < n; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%05zu.pgm", i);
      write_text(r.out / "masks" / name, io::encode_pgm(plane(masks, i), {0.0, 1.0}));
      write_json(r.out / "masks" / (std::string(name) + ".json"), Json{{"min", 0.0}, {"max", 1.0}});
    }
  }

  Json summary{{"n_images", n}, {"detect_mode", c.str("detect_mode", "gaussian")}, {"degenerate_pixels", degenerate}};
  std::string csv = have_truth ? "index,detected,truth,dice\n" : "index,detected\n";
  if (have_truth) {
    const Tensor& truth = io::find(recs, "masks");
    if (truth.shape() != images.shape()) throw ShapeError("masks do not match images");
    std::vector<double> dices;
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor a = plane(masks, i), t = plane(truth, i);
      const double d = metrics::dice(a, t);
      csv += std::to_string(i) + "," + num(sum(a)) + "," + num(sum(t)) + "," + num(d) + "\n";
      if (sum(t) > 0) dices.push_back(d);
    }
    const double pos = sum(truth);
    summary["auc"] = pos > 0 && pos < static_cast<double>(truth.size()) ? Json(metrics::roc_auc(scores, truth)) : Json(nullptr);
    summary["dice"] = dices.empty() ? Json(nullptr) : Json(mean(Tensor({dices.size()}, dices)));
    summary["empirical_fdr"] = metrics::empirical_fdr(masks, truth);
  } else {
    for (std::size_t i = 0; i < n; ++i) csv += std::to_string(i) + "," + num(sum(plane(masks, i))) + "\n";
    summary["auc"] = nullptr;
    summary["dice"] = nullptr;
  }
  write_text(r.out / "metrics.csv", csv);
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  summary["generated_at"] = stamp;
  write_json(r.out / "summary.json", summary);
}

// ---------------------------------------------------------------------------

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  double m = 0, s = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

void cmd_eval(const Run& r) {
  const Config& c = r.cfg;
  c.check_known({"seed", "truth", "variants", "bqr_model", "bqr_data"});
  if (!c.has("variants") && !c.has("bqr_model"))
    throw ConfigError("eval needs 'variants' (detection runs) and/or 'bqr_model' + 'bqr_data'");

  if (c.has("variants")) {
    const fs::path tp = input_path(c, "truth");
    const Tensor truth = need(io::load_tensors(tp), "masks", tp);
    std::string csv = "variant,auc,dice_mean,dice_std,n_images\n";
    std::istringstream list(c.str("variants"));
    std::string item;
    while (std::getline(list, item, ',')) {
      item.erase(0, item.find_first_not_of(" \t"));
      item.erase(item.find_last_not_of(" \t") + 1);
      const auto colon = item.find(':');
      if (colon == std::string::npos || colon == 0) throw ConfigError("variant '" + item + "' must read name:run_dir");
      const std::string name = item.substr(0, colon);
      const fs::path dp = fs::path(item.substr(colon + 1)) / "detections.qtn";
      if (!fs::exists(dp)) throw Error("variant '" + name + "': " + dp.string() + " not found; run 'qrunc detect' first");
      const auto recs = io::load_tensors(dp);
      const Tensor& masks = need(recs, "mask", dp);
      const Tensor& scores = need(recs, "score", dp);
      if (masks.shape() != truth.shape()) throw ShapeError("variant '" + name + "' does not match the truth masks");
      std::vector<double> d;
      for (std::size_t i = 0; i < truth.dim(0); ++i) {
        const Tensor t = plane(truth, i);
        if (sum(t) > 0) d.push_back(metrics::dice(plane(masks, i), t));
      }
      const auto [dm, ds] = mean_std(d);
      csv += name + "," + num(metrics::roc_auc(scores, truth)) + "," + num(dm) + "," + num(ds) + "," +
             std::to_string(d.size()) + "\n";
    }
    write_text(r.out / "table1.csv", csv);
  }

  if (c.has("bqr_model")) {
    const auto m = io::load_seg(input_path(c, "bqr_model"));
    const fs::path dp = input_path(c, "bqr_data");
    const auto samples = rater_samples(io::load_tensors(dp), dp);
    const std::size_t L = m.arch.levels.size();
    std::vector<std::vector<double>> d(L), area(L);
    for (const auto& s : samples) {
      const auto seg = bqr::predict_regions(m, s.image);
      const Tensor agree = bqr::agreement_map(s);
      for (std::size_t k = 0; k < L; ++k) {
        const Tensor target = bqr::level_region(agree, m.arch.levels[k]);
        area[k].push_back(sum(seg.regions[k]));
        if (sum(target) > 0) d[k].push_back(metrics::dice(seg.regions[k], target));
      }
    }
    std::string csv = "level,dice_mean,dice_std,n_images,area_mean\n";
    for (std::size_t k = 0; k < L; ++k) {
      const auto [dm, ds] = mean_std(d[k]);
      csv += num(m.arch.levels[k]) + "," + num(dm) + "," + num(ds) + "," + std::to_string(d[k].size()) + "," +
             num(mean_std(area[k]).first) + "\n";
    }
    write_text(r.out / "table2.csv", csv);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qrunc: quantile-regression uncertainty experiments"};
  app.require_subcommand(1);
  std::string config_path, out_dir, mode;
  std::optional<std::uint64_t> seed;
  for (const char* name : {"simulate", "train", "calibrate", "detect", "eval"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "key = value config file")->required();
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "overrides the config seed");
    if (std::string(name) == "train") sub->add_option("--mode", mode, "vae | qrvae | bqr");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();

  try {
    Run r;
    r.cfg = Config::load(config_path);
    if (seed) r.cfg.set("seed", std::to_string(*seed));
    r.seed = r.cfg.uint("seed", 0);
    if (cmd == "train" && !mode.empty()) r.cfg.set("mode", mode);
    r.out = out_dir;
    fs::create_directories(r.out);
    io::write_file(r.out / "config.txt", r.cfg.echo());
    if (cmd == "simulate") cmd_simulate(r);
    else if (cmd == "train") cmd_train(r, mode);
    else if (cmd == "calibrate") cmd_calibrate(r);
    else if (cmd == "detect") cmd_detect(r);
    else cmd_eval(r);
  } catch (const ConfigError& e) {
    std::cerr << "qrunc " << cmd << ": config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "qrunc " << cmd << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
