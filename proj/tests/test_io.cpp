#include <catch_amalgamated.hpp>

#include <filesystem>

#include "qrunc/model_io.hpp"
#include "support.hpp"

using namespace qrunc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("qrunc_io_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string bytes(std::initializer_list<int> v) {
  std::string s;
  for (int b : v) s.push_back(static_cast<char>(b));
  return s;
}

}  // namespace

TEST_CASE("container bytes match the layout written out by hand") {
  const io::NamedTensors recs{{"a", Tensor({2}, {1.0, -2.5})}};
  const std::string expect = std::string("QTN1") + bytes({1, 0, 0, 0}) + bytes({1, 0}) + "a" + bytes({1}) +
                             bytes({2, 0, 0, 0, 0, 0, 0, 0}) + bytes({0, 0, 0, 0, 0, 0, 0xF0, 0x3F}) +
                             bytes({0, 0, 0, 0, 0, 0, 0x04, 0xC0});
  CHECK(io::encode_container(recs) == expect);
  CHECK(io::encode_container({}) == std::string("QTN1") + bytes({0, 0, 0, 0}));
  CHECK(io::decode_container(expect)[0].second == recs[0].second);
}

TEST_CASE("container round trip") {
  Rng rng(91);
  const io::NamedTensors recs{{"x", testing::random_tensor({3, 4}, rng)},
                              {"scalar", Tensor({}, {7.0})},
                              {"empty", Tensor({0, 5})},
                              {"img/level00", testing::random_tensor({1, 2, 3, 2}, rng)}};
  const auto back = io::decode_container(io::encode_container(recs));
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].first == recs[i].first);
    CHECK(back[i].second.shape() == recs[i].second.shape());
    CHECK(back[i].second == recs[i].second);
  }
  const fs::path d = scratch("roundtrip");
  io::save_tensors(d / "t.qtn", recs);
  CHECK(io::find(io::load_tensors(d / "t.qtn"), "x") == recs[0].second);
  CHECK(io::contains(recs, "empty"));
  CHECK_FALSE(io::contains(recs, "nope"));
  CHECK_THROWS(io::find(recs, "nope"));
}

TEST_CASE("container rejects malformed input") {
  const std::string good = io::encode_container({{"a", Tensor({2}, {1.0, 2.0})}});
  std::string bad = good;
  bad[3] = '2';
  CHECK_THROWS_AS(io::decode_container(bad), io::FormatError);
  CHECK_THROWS_AS(io::decode_container("QT"), io::FormatError);
  for (std::size_t cut = 4; cut < good.size(); ++cut)
    CHECK_THROWS_AS(io::decode_container(good.substr(0, cut)), io::FormatError);
  CHECK_THROWS_AS(io::decode_container(good + "x"), io::FormatError);
  CHECK_THROWS_AS(io::encode_container({{"a", Tensor({1})}, {"a", Tensor({1})}}), io::FormatError);
  // duplicate names written by some other tool
  std::string dup = std::string("QTN1") + bytes({2, 0, 0, 0});
  for (int i = 0; i < 2; ++i) dup += bytes({1, 0}) + "a" + bytes({0}) + bytes({0, 0, 0, 0, 0, 0, 0, 0});
  CHECK_THROWS_AS(io::decode_container(dup), io::FormatError);
  CHECK_THROWS(io::load_tensors("/nonexistent/file.qtn"));
}

TEST_CASE("pgm") {
  const Tensor img({2, 3}, {0.0, 0.5, 1.0, -1.0, 2.0, 0.25});
  const std::string p = io::encode_pgm(img);
  CHECK(p.substr(0, 11) == "P5\n3 2\n255\n");
  const Tensor back = io::decode_pgm(p);
  CHECK(back.shape() == Shape{2, 3});
  CHECK(back == Tensor({2, 3}, {0, 128, 255, 0, 255, 64}));
  const auto s = io::minmax_scale(img);
  CHECK(s.min == -1.0);
  CHECK(s.max == 2.0);
  CHECK(io::decode_pgm(io::encode_pgm(img, s))[3] == 0);
  CHECK(io::decode_pgm(io::encode_pgm(img, s))[4] == 255);
  CHECK_THROWS_AS(io::decode_pgm("P2\n1 1\n255\n0"), io::FormatError);
  CHECK_THROWS_AS(io::decode_pgm(p.substr(0, p.size() - 1)), io::FormatError);
  CHECK_THROWS(io::encode_pgm(Tensor({2, 2, 2})));
}

TEST_CASE("config parsing") {
  const auto c = io::Config::parse("# header\nseed = 3\n  alpha=0.05  # trailing\n\nlevels = 0.1, 0.5,0.9\nflag = yes\n");
  CHECK(c.uint("seed") == 3);
  CHECK(c.num("alpha") == 0.05);
  CHECK(c.nums("levels", {}) == std::vector<double>{0.1, 0.5, 0.9});
  CHECK(c.flag("flag", false));
  CHECK(c.num("missing", 2.5) == 2.5);
  CHECK(c.echo() == "alpha = 0.05\nflag = yes\nlevels = 0.1, 0.5,0.9\nseed = 3\n");
  CHECK_NOTHROW(c.check_known({"seed", "alpha", "levels", "flag"}));
  CHECK_THROWS_AS(c.check_known({"seed", "alpha", "levels"}), io::ConfigError);
  CHECK_THROWS_AS(c.str("missing"), io::ConfigError);
  CHECK_THROWS_AS(io::Config::parse("a = 1\na = 2\n"), io::ConfigError);
  CHECK_THROWS_AS(io::Config::parse("just words\n"), io::ConfigError);
  CHECK_THROWS_AS(io::Config::parse("= 4\n"), io::ConfigError);
  CHECK_THROWS_AS(io::Config::parse("n = 1.5\n").uint("n"), io::ConfigError);
  CHECK_THROWS_AS(io::Config::parse("n = -1\n").uint("n"), io::ConfigError);
  CHECK_THROWS_AS(io::Config::parse("x = 1e\n").num("x"), io::ConfigError);
  CHECK_THROWS_AS(io::Config::parse("f = maybe\n").flag("f", true), io::ConfigError);
  CHECK_THROWS_AS(io::Config::load("/nonexistent/qrunc.cfg"), io::ConfigError);
}

TEST_CASE("saved vae reproduces forward outputs bitwise") {
  const fs::path d = scratch("vae");
  Rng rng(92);
  for (auto mode : {vae::HeadMode::Quantiles, vae::HeadMode::MeanVar}) {
    vae::VaeArch a;
    a.mode = mode;
    a.hidden = {8, 6};
    const auto m = vae::make_model(a, 93);
    io::save_vae(d / "m.qtn", m);
    CHECK(fs::exists(io::sidecar_path(d / "m.qtn")));
    const auto back = io::load_vae(d / "m.qtn");
    CHECK(back.arch.mode == mode);
    const Tensor x = testing::random_tensor({5, 4}, rng);
    const auto p0 = vae::encode(m, x), p1 = vae::encode(back, x);
    CHECK(p0.mu == p1.mu);
    CHECK(p0.logvar == p1.logvar);
    const auto d0 = vae::decode(m, p0.mu), d1 = vae::decode(back, p1.mu);
    for (const auto& [k, v] : d0) CHECK(d1.at(k) == v);
  }
  vae::VaeArch conv;
  conv.data_shape = {1, 8, 8};
  conv.conv_blocks = 2;
  conv.base_channels = 3;
  conv.hidden = {6};
  conv.output_activation = nn::Activation::Sigmoid;
  const auto m = vae::make_model(conv, 94);
  io::save_vae(d / "c.qtn", m);
  const auto back = io::load_vae(d / "c.qtn");
  const Tensor x = testing::random_tensor({2, 1, 8, 8}, rng, 0, 1);
  CHECK(vae::encode(back, x).mu == vae::encode(m, x).mu);

  // tampered parameter shape or stray record
  auto recs = io::load_tensors(d / "c.qtn");
  recs.emplace_back("encoder/extra", Tensor({1}));
  io::save_tensors(d / "bad.qtn", recs);
  fs::copy_file(io::sidecar_path(d / "c.qtn"), io::sidecar_path(d / "bad.qtn"));
  CHECK_THROWS_AS(io::load_vae(d / "bad.qtn"), io::FormatError);
}

TEST_CASE("saved segmentation model reproduces logits bitwise") {
  const fs::path d = scratch("seg");
  bqr::SegArch a;
  a.image_shape = {1, 8, 8};
  a.base_channels = 3;
  a.levels = {0.2, 0.6};
  const auto m = bqr::make_seg_model(a, 95);
  io::save_seg(d / "s.qtn", m);
  const auto back = io::load_seg(d / "s.qtn");
  CHECK(back.arch.levels == a.levels);
  Rng rng(96);
  const Tensor x = testing::random_tensor({3, 1, 8, 8}, rng);
  const auto l0 = bqr::predict_logits(m, x), l1 = bqr::predict_logits(back, x);
  REQUIRE(l0.size() == 2);
  for (std::size_t i = 0; i < l0.size(); ++i) CHECK(l0[i] == l1[i]);
  CHECK_THROWS(io::load_vae(d / "s.qtn"));
}
