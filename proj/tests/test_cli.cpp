#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "qrunc/qrunc.hpp"

using namespace qrunc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("qrunc_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

int run(const std::string& args) {
  const std::string cmd = std::string(QRUNC_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

fs::path write_cfg(const fs::path& dir, const std::string& name, const std::string& text) {
  const fs::path p = dir / name;
  io::write_file(p, text);
  return p;
}

std::string cli(const std::string& cmd, const fs::path& cfg, const fs::path& out, const std::string& extra = "") {
  return cmd + " --config " + cfg.string() + " --out " + out.string() + (extra.empty() ? "" : " " + extra);
}

std::vector<std::string> csv_field(const fs::path& p, std::size_t column) {
  std::ifstream in(p);
  std::string line;
  std::vector<std::string> out;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string f;
    for (std::size_t k = 0; k <= column; ++k) std::getline(row, f, ',');
    out.push_back(f);
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  const fs::path d = scratch("usage");
  const fs::path cfg = write_cfg(d, "a.cfg", "dataset = twomoon\nn = 10\n");
  CHECK(run("") == 2);
  CHECK(run("bogus --config x --out y") == 2);
  CHECK(run("simulate --out " + (d / "o").string()) == 2);
  CHECK(run(cli("simulate", cfg, d / "o", "--seed notanumber")) == 2);
  CHECK(run(cli("simulate", d / "missing.cfg", d / "o")) == 2);
  CHECK(run(cli("simulate", write_cfg(d, "u.cfg", "dataset = twomoon\nbogus_key = 1\n"), d / "o")) == 2);
  CHECK(run(cli("simulate", write_cfg(d, "b.cfg", "dataset = moons\n"), d / "o")) == 2);
  CHECK(run(cli("train", cfg, d / "o", "--mode gan")) == 2);
  CHECK(run(cli("train", cfg, d / "o")) == 2);
  CHECK(run(cli("simulate", cfg, d / "o")) == 0);
}

TEST_CASE("simulate: deterministic, matches the library, empty datasets") {
  const fs::path d = scratch("simulate");
  const fs::path cfg = write_cfg(d, "s.cfg", "dataset = lesion\nn = 6\nsize = 16\nlesion_p = 0.5\nraters = 4\n");
  REQUIRE(run(cli("simulate", cfg, d / "a", "--seed 9")) == 0);
  REQUIRE(run(cli("simulate", cfg, d / "b", "--seed 9")) == 0);
  REQUIRE(run(cli("simulate", cfg, d / "c", "--seed 10")) == 0);
  for (const char* f : {"data.qtn", "manifest.json", "config.txt"})
    CHECK(io::read_file(d / "a" / f) == io::read_file(d / "b" / f));
  CHECK(io::read_file(d / "a" / "data.qtn") != io::read_file(d / "c" / "data.qtn"));
  CHECK(io::read_file(d / "a" / "config.txt").find("seed = 9") != std::string::npos);

  sim::LesionImageConfig lc;
  lc.n = 6;
  lc.size = 16;
  lc.lesion_p = 0.5;
  lc.seed = 9;
  const auto ds = sim::synth_lesion_dataset(lc);
  const auto recs = io::load_tensors(d / "a" / "data.qtn");
  CHECK(io::find(recs, "images") == ds.images);
  CHECK(io::find(recs, "masks") == ds.masks);
  CHECK(io::find(recs, "raters").shape() == Shape{6, 4, 16, 16});

  const fs::path tm = write_cfg(d, "t.cfg", "dataset = twomoon\nn = 40\nseed = 3\n");
  REQUIRE(run(cli("simulate", tm, d / "t")) == 0);
  const Tensor z = sim::two_moon_latent({40, 0.05, 3});
  Rng rng(mix_seed(3, 1));
  CHECK(io::find(io::load_tensors(d / "t" / "data.qtn"), "x") == sim::simulate_4d(z, rng));

  const fs::path empty = write_cfg(d, "e.cfg", "dataset = twomoon\nn = 0\n");
  REQUIRE(run(cli("simulate", empty, d / "e")) == 0);
  CHECK(io::find(io::load_tensors(d / "e" / "data.qtn"), "x").size() == 0);
}

TEST_CASE("train, resume and detect") {
  const fs::path d = scratch("train");
  const auto data = write_cfg(d, "s.cfg", "dataset = lesion\nn = 12\nsize = 16\nlesion_p = 0.5\nraters = 4\nseed = 1\n");
  REQUIRE(run(cli("simulate", data, d / "data")) == 0);
  const std::string arch = "data = " + (d / "data" / "data.qtn").string() +
                           "\nlatent_dim = 4\nhidden = 16\nconv_blocks = 1\nbase_channels = 3\nepochs = 1\nbatch_size = 4\n";
  const auto tq = write_cfg(d, "q.cfg", arch + "alpha_lo = 0.025\n");
  REQUIRE(run(cli("train", tq, d / "q", "--mode qrvae --seed 5")) == 0);
  CHECK(csv_field(d / "q" / "history.csv", 0) == std::vector<std::string>{"1"});
  const auto hist = csv_field(d / "q" / "history.csv", 1);

  // the same run in process gives the same parameters bit for bit
  vae::VaeArch a;
  a.data_shape = {1, 16, 16};
  a.latent_dim = 4;
  a.hidden = {16};
  a.conv_blocks = 1;
  a.base_channels = 3;
  a.alpha_lo = 0.025;
  auto m = vae::make_model(a, 5);
  vae::TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.seed = mix_seed(5, 1);
  const Tensor images = io::find(io::load_tensors(d / "data" / "data.qtn"), "images");
  const auto h = vae::train_qrvae(images, m, tc);
  CHECK(hist[0] == fmt(h[0].loss));
  const auto saved = io::load_vae(d / "q" / "model.qtn");
  CHECK(vae::encode(saved, images).mu == vae::encode(m, images).mu);
  const auto r0 = std::get<anomaly::QuantileMaps>(vae::reconstruct(saved, images));
  const auto r1 = std::get<anomaly::QuantileMaps>(vae::reconstruct(m, images));
  CHECK(r0.lo == r1.lo);
  CHECK(r0.hi == r1.hi);

  // resuming continues from the saved parameters; optimizer moments start fresh
  const auto resume = write_cfg(d, "r.cfg", arch + "resume = " + (d / "q" / "model.qtn").string() + "\n");
  REQUIRE(run(cli("train", resume, d / "r", "--mode qrvae --seed 6")) == 0);
  m = saved;
  vae::train_qrvae(images, m, [&] {
    auto t = tc;
    t.seed = mix_seed(6, 1);
    return t;
  }());
  CHECK(vae::encode(io::load_vae(d / "r" / "model.qtn"), images).mu == vae::encode(m, images).mu);
  CHECK(run(cli("train", resume, d / "r2", "--mode vae")) == 2);

  const auto tb = write_cfg(d, "b.cfg", "data = " + (d / "data" / "data.qtn").string() +
                                            "\nbase_channels = 3\nepochs = 2\nwarmup_epochs = 1\n");
  REQUIRE(run(cli("train", tb, d / "b", "--mode bqr")) == 0);
  CHECK(csv_field(d / "b" / "history.csv", 1) == std::vector<std::string>{"warmup", "bqr"});
  CHECK(io::load_seg(d / "b" / "model.qtn").arch.levels.size() == 4);

  const auto det = write_cfg(d, "d.cfg", "model = " + (d / "q" / "model.qtn").string() + "\ndata = " +
                                             (d / "data" / "data.qtn").string() + "\n");
  REQUIRE(run(cli("detect", det, d / "d1")) == 0);
  REQUIRE(run(cli("detect", det, d / "d2")) == 0);
  for (const char* f : {"detections.qtn", "metrics.csv", "masks/00000.pgm", "masks/00011.pgm.json"})
    CHECK(io::read_file(d / "d1" / f) == io::read_file(d / "d2" / f));
  const auto summary = io::Json::parse(io::read_file(d / "d1" / "summary.json"));
  CHECK(summary.contains("auc"));
  CHECK(summary.contains("dice"));
  CHECK(summary.contains("generated_at"));
  const Tensor pgm = io::decode_pgm(io::read_file(d / "d1" / "masks" / "00003.pgm"));
  const Tensor mask = io::find(io::load_tensors(d / "d1" / "detections.qtn"), "mask");
  for (std::size_t i = 0; i < 256; ++i) CHECK(pgm[i] == mask[3 * 256 + i] * 255);

  // eval recomputes the table from the saved detections
  const auto ev = write_cfg(d, "e.cfg", "truth = " + (d / "data" / "data.qtn").string() + "\nvariants = a:" +
                                            (d / "d1").string() + ", b:" + (d / "d2").string() + "\nbqr_model = " +
                                            (d / "b" / "model.qtn").string() + "\nbqr_data = " +
                                            (d / "data" / "data.qtn").string() + "\n");
  REQUIRE(run(cli("eval", ev, d / "ev")) == 0);
  CHECK(csv_field(d / "ev" / "table1.csv", 0) == std::vector<std::string>{"a", "b"});
  const Tensor truth = io::find(io::load_tensors(d / "data" / "data.qtn"), "masks");
  const Tensor score = io::find(io::load_tensors(d / "d1" / "detections.qtn"), "score");
  CHECK(csv_field(d / "ev" / "table1.csv", 1)[0] == fmt(metrics::roc_auc(score, truth)));
  CHECK(csv_field(d / "ev" / "table2.csv", 0).size() == 4);
  const auto missing = write_cfg(d, "m.cfg", "truth = " + (d / "data" / "data.qtn").string() + "\nvariants = a:" +
                                                 (d / "nowhere").string() + "\n");
  CHECK(run(cli("eval", missing, d / "m")) == 1);
  CHECK(run(cli("eval", write_cfg(d, "n.cfg", "truth = x\n"), d / "m")) == 2);
}

TEST_CASE("calibrate") {
  const fs::path d = scratch("calibrate");
  // n = 9, alpha = 0.2: rank ceil(10 * 0.8) = 8, the 8th smallest score
  io::save_tensors(d / "s.qtn", {{"scores", Tensor({9}, {0.5, -1, 3, 0.1, 2, -0.3, 0.7, 1.5, 0.9})}});
  const auto cfg = write_cfg(d, "c.cfg", "scores = " + (d / "s.qtn").string() + "\nalpha = 0.2\n");
  REQUIRE(run(cli("calibrate", cfg, d / "o")) == 0);
  const auto j = io::Json::parse(io::read_file(d / "o" / "calibration.json"));
  CHECK(j.at("margin").get<double>() == 2.0);
  CHECK(j.at("n_cal").get<std::size_t>() == 9);
  // too few scores for alpha: infinite margin written as null
  const auto tiny = write_cfg(d, "t.cfg", "scores = " + (d / "s.qtn").string() + "\nalpha = 0.01\n");
  REQUIRE(run(cli("calibrate", tiny, d / "t")) == 0);
  CHECK(io::Json::parse(io::read_file(d / "t" / "calibration.json")).at("margin").is_null());
  CHECK(run(cli("calibrate", write_cfg(d, "a.cfg", "scores = " + (d / "s.qtn").string() + "\nalpha = 1.5\n"), d / "x")) == 2);
  io::save_tensors(d / "e.qtn", {{"scores", Tensor({0})}});
  CHECK(run(cli("calibrate", write_cfg(d, "e.cfg", "scores = " + (d / "e.qtn").string() + "\n"), d / "x")) == 1);
  io::write_file(d / "bad.qtn", "QTN2garbage");
  CHECK(run(cli("calibrate", write_cfg(d, "b.cfg", "scores = " + (d / "bad.qtn").string() + "\n"), d / "x")) == 1);
}
