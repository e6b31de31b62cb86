#pragma once

// Multi-quantile binary segmentation. A small encoder-decoder with skip
// connections carries one logit head per level; each head is trained with the
// smoothed binary quantile objective against every rater's mask.
//
// Level convention: the region of level l is {P(Y=1|X) > l}, so regions
// shrink as l grows and level 0.125 pairs with "at least one of four raters".
// Under the quantile objective this region is the (1 - l)-quantile of the
// label, so the head for level l is fit with tau = 1 - l.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "qrunc/losses.hpp"
#include "qrunc/nn.hpp"
#include "qrunc/rng.hpp"
#include "qrunc/tensor.hpp"

namespace qrunc::bqr {

struct MultiRaterSample {
  Tensor image;                     // (C, H, W)
  std::vector<Tensor> rater_masks;  // each (H, W) or (1, H, W), binary
};

/// Per-pixel fraction of raters marking the pixel: (sum_r mask_r) / R.
inline Tensor agreement_map(const MultiRaterSample& s) {
  if (s.rater_masks.empty()) throw Error("agreement_map requires at least one rater");
  Tensor acc(s.rater_masks.front().shape());
  for (const auto& m : s.rater_masks) {
    Tensor::require_same_shape(m, acc, "agreement_map");
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i] != 0.0 && m[i] != 1.0) throw Error("agreement_map: rater masks must be binary");
      acc[i] += m[i];
    }
  }
  const double r = static_cast<double>(s.rater_masks.size());
  for (double& v : acc.values()) v /= r;
  return acc;
}

/// Ground-truth region of quantile tau: {agreement >= 1 - tau}.
inline Tensor rater_quantile_regions(const Tensor& agreement, QuantileLevel tau) {
  const double thr = 1.0 - tau.value();
  // agreement values are k/R; compare with a little slack for 1 - tau rounding
  return map(agreement, [thr](double a) { return a >= thr - 1e-12 ? 1.0 : 0.0; });
}

/// Ground truth for a segmentation level l: {agreement >= l}.
inline Tensor level_region(const Tensor& agreement, double level) {
  return rater_quantile_regions(agreement, QuantileLevel(1.0 - level));
}

struct SegArch {
  Shape image_shape{1, 32, 32};
  std::size_t base_channels = 8;
  std::vector<double> levels{0.125, 0.375, 0.625, 0.875};
};

struct SegModel {
  SegArch arch;
  nn::NetworkSpec net;
  nn::NetworkState state;
};

inline std::string head_name(std::size_t level_index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "level%02zu", level_index);
  return buf;
}

inline void validate_levels(const std::vector<double>& levels) {
  if (levels.empty()) throw Error("segmentation needs at least one level");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    QuantileLevel check(levels[i]);
    if (i && !(levels[i] > levels[i - 1])) throw Error("segmentation levels must be strictly increasing");
  }
}

/// Two stride-2 down blocks, two upsample blocks with skip concatenation,
/// then one 3x3 logit head per level.
inline nn::NetworkSpec build_seg_network(const SegArch& a) {
  validate_levels(a.levels);
  if (a.image_shape.size() != 3 || a.image_shape[1] % 4 || a.image_shape[2] % 4) {
    throw Error("segmentation input must be (C,H,W) with H, W divisible by 4");
  }
  using nn::Activation;
  const std::size_t c = a.base_channels;
  nn::NetworkBuilder b(a.image_shape);
  auto relu = [&](nn::NodeId x) { return b.activation(x, Activation::ReLU); };
  const nn::NodeId e1 = relu(b.conv2d(b.input(), c, 3, 1, 1));
  const nn::NodeId e2 = relu(b.conv2d(e1, 2 * c, 3, 2, 1));
  const nn::NodeId e3 = relu(b.conv2d(e2, 4 * c, 3, 2, 1));
  const nn::NodeId u2 = relu(b.conv2d(b.concat(b.upsample2x(e3), e2), 2 * c, 3, 1, 1));
  const nn::NodeId u1 = relu(b.conv2d(b.concat(b.upsample2x(u2), e1), c, 3, 1, 1));
  for (std::size_t i = 0; i < a.levels.size(); ++i) b.head(head_name(i), b.conv2d(u1, 1, 3, 1, 1));
  return b.build();
}

inline SegModel make_seg_model(const SegArch& arch, std::uint64_t seed) {
  SegModel m{arch, build_seg_network(arch), {}};
  Rng rng(seed);
  m.state = nn::init_params(m.net, rng);
  return m;
}

struct QuantileSegmentation {
  std::vector<double> levels;
  std::vector<Tensor> regions;  // binary, one per level, shaped like a rater mask (1, H, W)
};

/// Regions {f >= 0} per level, then region(l_n) &= region(l_{n-1}).
inline QuantileSegmentation regions_from_logits(const std::vector<double>& levels, const std::vector<Tensor>& logits) {
  if (levels.size() != logits.size()) throw Error("one logit map per level required");
  QuantileSegmentation seg{levels, {}};
  for (std::size_t n = 0; n < logits.size(); ++n) {
    Tensor r = map(logits[n], [](double f) { return f >= 0.0 ? 1.0 : 0.0; });
    if (n) {
      Tensor::require_same_shape(r, seg.regions.back(), "regions_from_logits");
      for (std::size_t i = 0; i < r.size(); ++i) r[i] *= seg.regions.back()[i];
    }
    seg.regions.push_back(std::move(r));
  }
  return seg;
}

/// Logit maps per level for a batch of images (N, C, H, W).
inline std::vector<Tensor> predict_logits(const SegModel& m, const Tensor& images) {
  auto out = nn::forward(m.net, m.state, images).outputs;
  std::vector<Tensor> logits;
  for (std::size_t i = 0; i < m.arch.levels.size(); ++i) logits.push_back(std::move(out.at(head_name(i))));
  return logits;
}

inline QuantileSegmentation predict_regions(const SegModel& m, const Tensor& image) {
  Shape s{1};
  s.insert(s.end(), image.shape().begin(), image.shape().end());
  auto logits = predict_logits(m, image.reshaped(s));
  for (auto& l : logits) {
    Shape one(l.shape().begin() + 1, l.shape().end());
    l = l.reshaped(one);
  }
  return regions_from_logits(m.arch.levels, logits);
}

struct BqrTrainConfig {
  std::size_t epochs = 6;         // including warm-up epochs
  std::size_t warmup_epochs = 1;  // weighted cross-entropy epochs
  std::size_t batch_size = 8;
  double lr = 3e-3;
  std::uint64_t seed = 0;
  /// Positive-class weight for warm-up; <= 0 means (zeros / ones) of the training labels.
  double warmup_weight = 0.0;
};

struct BqrTrainResult {
  std::vector<double> history;  // per-epoch mean loss per sample (BCE during warm-up, negated objective after)
  double warmup_weight = 0.0;
  bool collapsed = false;  // every logit < 0 on every training pixel after warm-up
};

/// Zero-to-one label ratio over all rater masks.
inline double label_imbalance(const std::vector<MultiRaterSample>& samples) {
  double pos = 0, total = 0;
  for (const auto& s : samples)
    for (const auto& m : s.rater_masks) {
      pos += sum(m);
      total += static_cast<double>(m.size());
    }
  if (pos == 0) throw Error("training labels contain no positive pixel");
  return (total - pos) / pos;
}

inline BqrTrainResult train_bqr(const std::vector<MultiRaterSample>& samples, SegModel& m, const BqrTrainConfig& cfg) {
  if (m.net.heads().size() != m.arch.levels.size()) throw Error("head count must equal level count");
  if (samples.empty()) throw Error("empty training set");
  if (cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0)) throw Error("invalid training configuration");
  const std::size_t L = m.arch.levels.size();
  BqrTrainResult res;
  res.warmup_weight = cfg.warmup_weight > 0 ? cfg.warmup_weight : label_imbalance(samples);

  std::vector<Tensor> images;
  for (const auto& s : samples) {
    if (s.image.shape() != m.arch.image_shape) throw ShapeError("sample image does not match model input");
    if (s.rater_masks.empty()) throw Error("sample without rater masks");
    images.push_back(s.image);
  }
  const Tensor all = stack(images);
  const nn::AdamConfig adam{cfg.lr};
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  auto all_negative = [&] {
    for (const auto& l : predict_logits(m, all))
      for (double f : l.data())
        if (f >= 0.0) return false;
    return true;
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool warm = epoch < cfg.warmup_epochs;
    rng.shuffle(order);
    double epoch_loss = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const auto idx = std::span<const std::size_t>(order).subspan(b, e - b);
      const Tensor batch = all.gather_rows(idx);
      auto fwd = nn::forward(m.net, m.state, batch);
      const double inv_n = 1.0 / static_cast<double>(idx.size());
      std::map<std::string, Tensor> grads;
      for (std::size_t n = 0; n < L; ++n) {
        const std::string hn = head_name(n);
        const Tensor& logits = fwd.outputs.at(hn);
        const std::size_t plane = logits.size() / idx.size();
        Tensor g(logits.shape());
        for (std::size_t s = 0; s < idx.size(); ++s) {
          const Tensor f({plane}, std::vector<double>(logits.data().begin() + static_cast<std::ptrdiff_t>(s * plane),
                                                      logits.data().begin() + static_cast<std::ptrdiff_t>((s + 1) * plane)));
          for (const auto& mask : samples[idx[s]].rater_masks) {
            const Tensor y = mask.reshaped({plane});
            const LossValue lv = warm ? weighted_bce(f, y, res.warmup_weight)
                                      : bqr_objective(f, y, QuantileLevel(1.0 - m.arch.levels[n]));
            epoch_loss += lv.value;
            for (std::size_t i = 0; i < plane; ++i) g[s * plane + i] += lv.grad[i] * inv_n;
          }
        }
        grads.emplace(hn, std::move(g));
      }
      auto bwd = nn::backward(m.net, m.state, fwd.cache, grads);
      nn::adam_step(m.state, bwd.param_grads, adam);
    }
    res.history.push_back(epoch_loss / static_cast<double>(samples.size()));
    if (!std::isfinite(res.history.back())) throw NumericError("bqr training diverged in epoch " + std::to_string(epoch + 1));
    if (!warm) res.collapsed = all_negative();
  }
  return res;
}

}  // namespace qrunc::bqr
