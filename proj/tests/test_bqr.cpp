#include <catch_amalgamated.hpp>

#include "qrunc/bqr.hpp"
#include "qrunc/metrics.hpp"
#include "qrunc/sim.hpp"
#include "support.hpp"

using namespace qrunc;

namespace {

std::vector<bqr::MultiRaterSample> rater_data(std::size_t n, std::size_t size, const sim::RaterConfig& raters,
                                              std::uint64_t seed) {
  sim::LesionImageConfig cfg;
  cfg.n = n;
  cfg.size = size;
  cfg.lesion_p = 1.0;
  cfg.radius_min = 2.5;
  cfg.radius_max = 4.5;
  cfg.seed = seed;
  const auto ds = sim::synth_lesion_dataset(cfg);
  Rng rng(seed + 1);
  std::vector<bqr::MultiRaterSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor truth = ds.masks.slice_rows(i, i + 1).reshaped({1, size, size});
    out.push_back({ds.images.slice_rows(i, i + 1).reshaped({1, size, size}), sim::synth_multirater(truth, raters, rng)});
  }
  return out;
}

bqr::SegModel small_model(std::size_t size, std::uint64_t seed) {
  bqr::SegArch a;
  a.image_shape = {1, size, size};
  a.base_channels = 6;
  return bqr::make_seg_model(a, seed);
}

}  // namespace

TEST_CASE("agreement map") {
  const Tensor one({1, 2, 2}, 1.0), zero({1, 2, 2}, 0.0);
  CHECK(bqr::agreement_map({one, {one, one, one, one}}) == Tensor({1, 2, 2}, 1.0));
  CHECK(bqr::agreement_map({one, {zero, zero, zero, zero}}) == Tensor({1, 2, 2}, 0.0));
  CHECK(bqr::agreement_map({one, {one, zero, one, zero}}) == Tensor({1, 2, 2}, 0.5));
  Rng rng(71);
  std::vector<Tensor> masks;
  for (int r = 0; r < 4; ++r) {
    Tensor m({1, 4, 4});
    for (double& v : m.values()) v = rng.uniform() < 0.5;
    masks.push_back(m);
  }
  auto permuted = masks;
  std::swap(permuted[0], permuted[3]);
  std::swap(permuted[1], permuted[2]);
  CHECK(bqr::agreement_map({one, masks}) == bqr::agreement_map({one, permuted}));
  CHECK_THROWS(bqr::agreement_map({one, {}}));
  CHECK_THROWS_AS(bqr::agreement_map({one, {one, Tensor({1, 3, 3})}}), ShapeError);
}

TEST_CASE("rater quantile regions") {
  CHECK(bqr::rater_quantile_regions(Tensor({4}, 1.0), QuantileLevel(0.75)) == Tensor({4}, 1.0));
  for (double tau : {0.125, 0.375, 0.625, 0.875})
    CHECK(sum(bqr::rater_quantile_regions(Tensor({4}, 0.0), QuantileLevel(tau))) == 0.0);
  const Tensor a({5}, {0, 0.25, 0.5, 0.75, 1});
  CHECK(sum(bqr::rater_quantile_regions(a, QuantileLevel(0.75))) == 4);
  CHECK(sum(bqr::rater_quantile_regions(a, QuantileLevel(0.5))) == 3);
  CHECK(sum(bqr::rater_quantile_regions(a, QuantileLevel(0.25))) == 2);
  CHECK(sum(bqr::rater_quantile_regions(a, QuantileLevel(0.125))) == 1);
  // default levels give exactly "at least 1, 2, 3, 4 raters"
  const std::vector<double> levels{0.125, 0.375, 0.625, 0.875};
  for (std::size_t n = 0; n < 4; ++n) {
    const Tensor r = bqr::level_region(a, levels[n]);
    for (std::size_t i = 0; i < 5; ++i) CHECK(r[i] == (a[i] >= 0.25 * static_cast<double>(n + 1) ? 1.0 : 0.0));
  }
}

TEST_CASE("regions from logits: boundary, nesting, enforcement") {
  const std::vector<double> levels{0.125, 0.375, 0.625, 0.875};
  const std::vector<Tensor> zeros(4, Tensor({1, 3, 3}));
  for (const auto& r : bqr::regions_from_logits(levels, zeros).regions) CHECK(r == Tensor({1, 3, 3}, 1.0));

  Rng rng(72);
  const Tensor base = testing::random_tensor({1, 5, 5}, rng, -2, 2);
  std::vector<Tensor> decreasing;
  for (int n = 0; n < 4; ++n) decreasing.push_back(map(base, [n](double v) { return v - 0.5 * n; }));
  const auto seg = bqr::regions_from_logits(levels, decreasing);
  for (int n = 0; n < 4; ++n)
    CHECK(seg.regions[n] == map(decreasing[n], [](double f) { return f >= 0 ? 1.0 : 0.0; }));

  for (int t = 0; t < 200; ++t) {
    std::vector<Tensor> logits;
    for (int n = 0; n < 4; ++n) logits.push_back(testing::random_tensor({1, 6, 6}, rng));
    const auto s = bqr::regions_from_logits(levels, logits);
    for (std::size_t n = 1; n < 4; ++n)
      for (std::size_t i = 0; i < 36; ++i) CHECK(s.regions[n][i] <= s.regions[n - 1][i]);
  }
}

TEST_CASE("segmentation network gradients match finite differences") {
  bqr::SegArch a;
  a.image_shape = {1, 4, 4};
  a.base_channels = 2;
  a.levels = {0.25, 0.75};
  auto m = bqr::make_seg_model(a, 73);
  Rng rng(74);
  CHECK(testing::network_grad_error(m.net, m.state, testing::random_tensor({2, 1, 4, 4}, rng), rng) < 1e-6);
}

TEST_CASE("zero network predicts the full region at every level") {
  auto m = small_model(8, 75);
  for (auto& node : m.state.params)
    for (auto& p : node) p.fill(0.0);
  const auto seg = bqr::predict_regions(m, Tensor({1, 8, 8}, 0.4));
  for (const auto& r : seg.regions) CHECK(r == Tensor({1, 8, 8}, 1.0));
}

TEST_CASE("training smoke") {
  auto data = rater_data(8, 16, {}, 76);
  auto m = small_model(16, 77);
  bqr::BqrTrainConfig cfg;
  cfg.epochs = 2;
  const auto res = bqr::train_bqr(data, m, cfg);
  CHECK(res.history.size() == 2);
  CHECK(res.warmup_weight == bqr::label_imbalance(data));
  CHECK(res.warmup_weight > 1.0);
}

TEST_CASE("identical raters: every head finds the same region") {
  auto data = rater_data(96, 16, {{0, 0, 0, 0}, 0.0}, 78);
  auto m = small_model(16, 79);
  bqr::BqrTrainConfig cfg;
  // the high-level heads see positives weighted by 1 - level, so they
  // need a longer schedule to grow out to the shared region
  cfg.epochs = 40;
  cfg.warmup_epochs = 3;
  cfg.lr = 2e-2;
  cfg.seed = 1;
  const auto res = bqr::train_bqr(data, m, cfg);
  CHECK_FALSE(res.collapsed);
  const auto test = rater_data(16, 16, {{0, 0, 0, 0}, 0.0}, 80);
  double d = 0;
  int count = 0;
  for (const auto& s : test) {
    const auto seg = bqr::predict_regions(m, s.image);
    for (std::size_t n = 1; n < seg.regions.size(); ++n) {
      d += metrics::dice(seg.regions[0], seg.regions[n]);
      ++count;
    }
  }
  CHECK(d / count >= 0.95);
}

TEST_CASE("nested raters: head areas shrink with level") {
  auto data = rater_data(48, 16, {}, 81);
  auto m = small_model(16, 82);
  bqr::BqrTrainConfig cfg;
  cfg.epochs = 20;
  cfg.warmup_epochs = 3;
  cfg.seed = 2;
  bqr::train_bqr(data, m, cfg);
  std::vector<double> area(4, 0.0);
  for (const auto& s : rater_data(16, 16, {}, 83)) {
    const auto seg = bqr::predict_regions(m, s.image);
    for (std::size_t n = 0; n < 4; ++n) area[n] += sum(seg.regions[n]);
  }
  for (std::size_t n = 1; n < 4; ++n) CHECK(area[n] < area[n - 1]);
}

TEST_CASE("training rejects inconsistent setups") {
  auto data = rater_data(2, 16, {}, 84);
  auto m = small_model(16, 85);
  bqr::BqrTrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS(bqr::train_bqr(data, m, cfg));
  cfg.epochs = 1;
  CHECK_THROWS(bqr::train_bqr({}, m, cfg));
  auto wrong = small_model(8, 86);
  CHECK_THROWS_AS(bqr::train_bqr(data, wrong, cfg), ShapeError);
  bqr::SegArch bad;
  bad.levels = {0.5, 0.25};
  CHECK_THROWS(bqr::make_seg_model(bad, 1));
}
