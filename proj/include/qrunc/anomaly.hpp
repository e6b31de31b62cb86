#pragma once

// Turning quantile (or mean/variance) maps into anomaly detections:
// Gaussian moment recovery, z-scores, two-sided p-values, Benjamini-Hochberg
// thresholding, median filtering and model-free interval masks.

#include <algorithm>
#include <cmath>
#include <optional>
#include <tuple>
#include <variant>
#include <vector>

#include "qrunc/conformal.hpp"
#include "qrunc/stats.hpp"
#include "qrunc/tensor.hpp"

namespace qrunc::anomaly {

inline constexpr double kDefaultSigmaFloor = 1e-3;

struct Moments {
  Tensor mean;
  Tensor sigma;
  std::vector<std::size_t> degenerate;  // flat indices where the quantiles collapsed or crossed
};

/// Gaussian (mu, sigma) from any two quantiles q_lo < q_hi at levels alpha_lo < alpha_hi.
/// Pixels with q_lo >= q_hi get sigma = floor and are reported as degenerate.
inline Moments quantile_pair_to_moments(const Tensor& q_lo, const Tensor& q_hi, double alpha_lo, double alpha_hi,
                                        double sigma_floor = kDefaultSigmaFloor) {
  Tensor::require_same_shape(q_lo, q_hi, "quantile_pair_to_moments");
  if (!(0.0 < alpha_lo && alpha_lo < alpha_hi && alpha_hi < 1.0)) {
    throw Error("quantile levels must satisfy 0 < alpha_lo < alpha_hi < 1");
  }
  const double z_lo = stats::normal_ppf(alpha_lo);
  const double z_hi = alpha_hi == 0.5 ? 0.0 : stats::normal_ppf(alpha_hi);
  const double span = z_hi - z_lo;
  Moments m{Tensor(q_lo.shape()), Tensor(q_lo.shape()), {}};
  for (std::size_t i = 0; i < q_lo.size(); ++i) {
    double s = (q_hi[i] - q_lo[i]) / span;
    if (!(q_lo[i] < q_hi[i])) {
      s = sigma_floor;
      m.degenerate.push_back(i);
    }
    m.sigma[i] = s;
    // keep mu exactly equal to the median head when one of the levels is 0.5
    m.mean[i] = alpha_hi == 0.5 ? q_hi[i] : q_lo[i] - z_lo * s;
  }
  return m;
}

/// mu = q_med, sigma = (q_med - q_low) / Phi^-1(1 - alpha_low).
inline Moments quantiles_to_moments(const Tensor& q_med, const Tensor& q_low, double alpha_low,
                                    double sigma_floor = kDefaultSigmaFloor) {
  if (!(alpha_low > 0.0 && alpha_low < 0.5)) throw Error("quantiles_to_moments requires 0 < alpha_low < 0.5");
  return quantile_pair_to_moments(q_low, q_med, alpha_low, 0.5, sigma_floor);
}

/// Inverse of quantile_pair_to_moments: (mu + z_lo sigma, mu + z_hi sigma).
inline std::pair<Tensor, Tensor> moments_to_quantiles(const Tensor& mu, const Tensor& sigma, double alpha_lo,
                                                      double alpha_hi) {
  const double z_lo = stats::normal_ppf(alpha_lo);
  const double z_hi = alpha_hi == 0.5 ? 0.0 : stats::normal_ppf(alpha_hi);
  return {zip(mu, sigma, [&](double m, double s) { return m + z_lo * s; }),
          zip(mu, sigma, [&](double m, double s) { return m + z_hi * s; })};
}

inline Tensor zscore(const Tensor& x, const Tensor& mu, const Tensor& sigma) {
  Tensor::require_same_shape(x, mu, "zscore");
  Tensor::require_same_shape(x, sigma, "zscore");
  Tensor z(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(sigma[i] > 0.0)) throw Error("zscore: sigma must be positive");
    z[i] = (x[i] - mu[i]) / sigma[i];
  }
  return z;
}

/// Two-sided p = 2 (1 - Phi(|z|)).
inline Tensor pvalue(const Tensor& z) {
  require_finite(z, "pvalue");
  return map(z, [](double v) { return std::min(1.0, 2.0 * stats::normal_sf(std::abs(v))); });
}

struct BhResult {
  double threshold = 0.0;  // largest rejected p-value, 0 when nothing is rejected
  Tensor mask;
  std::size_t rejected = 0;
};

/// Benjamini-Hochberg step-up: k* = max{k : p_(k) <= k alpha / m}; reject p <= p_(k*).
inline BhResult bh_fdr(const Tensor& p, double alpha) {
  if (p.empty()) throw Error("bh_fdr: empty p-value set");
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error("bh_fdr: alpha must lie in (0,1)");
  std::vector<double> sorted(p.data().begin(), p.data().end());
  for (double v : sorted)
    if (!(v >= 0.0 && v <= 1.0)) throw Error("bh_fdr: p-values must lie in [0,1]");
  std::sort(sorted.begin(), sorted.end());
  const double m = static_cast<double>(sorted.size());
  BhResult r{0.0, Tensor(p.shape()), 0};
  std::size_t kstar = 0;
  for (std::size_t k = sorted.size(); k >= 1; --k) {
    if (sorted[k - 1] <= static_cast<double>(k) * alpha / m) {
      kstar = k;
      break;
    }
  }
  if (kstar == 0) return r;
  r.threshold = sorted[kstar - 1];
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= r.threshold) {
      r.mask[i] = 1.0;
      ++r.rejected;
    }
  }
  return r;
}

/// Window x window median over the last two axes with edge replication.
inline Tensor median_filter(const Tensor& img, std::size_t window = 7) {
  if (window % 2 == 0) throw Error("median_filter: window must be odd");
  if (img.rank() < 2) throw ShapeError("median_filter: need at least 2 dimensions");
  const std::size_t H = img.dim(img.rank() - 2), W = img.dim(img.rank() - 1);
  if (window > H || window > W) throw Error("median_filter: window larger than image");
  if (window == 1) return img;
  const std::size_t planes = img.size() / (H * W);
  const auto r = static_cast<long>(window / 2);
  Tensor out(img.shape());
  std::vector<double> buf(window * window);
  const auto mid = buf.begin() + static_cast<std::ptrdiff_t>(buf.size() / 2);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = img.data().data() + pl * H * W;
    for (long y = 0; y < static_cast<long>(H); ++y) {
      for (long x = 0; x < static_cast<long>(W); ++x) {
        std::size_t k = 0;
        for (long dy = -r; dy <= r; ++dy) {
          const long yy = std::clamp(y + dy, 0L, static_cast<long>(H) - 1);
          for (long dx = -r; dx <= r; ++dx) {
            const long xx = std::clamp(x + dx, 0L, static_cast<long>(W) - 1);
            buf[k++] = src[yy * static_cast<long>(W) + xx];
          }
        }
        std::nth_element(buf.begin(), mid, buf.end());
        out[pl * H * W + static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] = *mid;
      }
    }
  }
  return out;
}

/// 1 where x falls strictly outside [q_lo, q_hi].
inline Tensor interval_mask(const Tensor& x, const Tensor& q_lo, const Tensor& q_hi) {
  Tensor::require_same_shape(x, q_lo, "interval_mask");
  Tensor::require_same_shape(x, q_hi, "interval_mask");
  Tensor m(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) m[i] = (x[i] < q_lo[i] || x[i] > q_hi[i]) ? 1.0 : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Detection pipeline

enum class DetectMode { ModelFree, Gaussian };

/// Where the median filter sits in the Gaussian pipeline.
enum class FilterStage { ZScore, Mask, None };

struct QuantileMaps {
  Tensor lo, hi;
  double alpha_lo = 0.15, alpha_hi = 0.5;
};

struct GaussianMaps {
  Tensor mean, sigma;
};

using ModelMaps = std::variant<QuantileMaps, GaussianMaps>;

struct DetectOptions {
  DetectMode mode = DetectMode::Gaussian;
  double fdr_alpha = 0.05;
  std::size_t median_window = 7;
  FilterStage filter_stage = FilterStage::ZScore;
  double sigma_floor = kDefaultSigmaFloor;
  /// Miscoverage of the interval used when model-free detection runs on mean/sigma maps.
  double interval_alpha = 0.05;
  std::optional<conformal::Calibration> conformal;
};

struct DetectionResult {
  Tensor z_map;                // filtered z-scores (Gaussian mode only)
  std::optional<Tensor> p_map;  // Gaussian mode only
  double fdr_threshold = 0.0;
  Tensor mask;
  std::size_t degenerate = 0;
};

inline Moments maps_to_moments(const ModelMaps& maps, double sigma_floor) {
  if (const auto* q = std::get_if<QuantileMaps>(&maps)) {
    return quantile_pair_to_moments(q->lo, q->hi, q->alpha_lo, q->alpha_hi, sigma_floor);
  }
  const auto& g = std::get<GaussianMaps>(maps);
  Moments m{g.mean, g.sigma, {}};
  for (std::size_t i = 0; i < m.sigma.size(); ++i) {
    if (!(m.sigma[i] > 0.0)) {
      m.sigma[i] = sigma_floor;
      m.degenerate.push_back(i);
    }
  }
  return m;
}

/// The interval a mode calibrates and thresholds: the quantile pair itself
/// for model-free detection on quantile maps, otherwise the central
/// (1 - alpha) Gaussian interval mu +/- Phi^-1(1 - alpha/2) sigma.
inline std::pair<Tensor, Tensor> detection_interval(const ModelMaps& maps, DetectMode mode, double alpha,
                                                    double sigma_floor = kDefaultSigmaFloor) {
  if (mode == DetectMode::ModelFree) {
    if (const auto* q = std::get_if<QuantileMaps>(&maps)) return {q->lo, q->hi};
  }
  const Moments m = maps_to_moments(maps, sigma_floor);
  const double z = stats::normal_ppf(1.0 - alpha / 2.0);
  return {zip(m.mean, m.sigma, [z](double mu, double s) { return mu - z * s; }),
          zip(m.mean, m.sigma, [z](double mu, double s) { return mu + z * s; })};
}

/// Runs one image through the chosen pipeline.
///   ModelFree: interval mask only (optionally conformalized).
///   Gaussian:  moments -> z -> median filter -> two-sided p -> BH.
/// With conformal calibration in Gaussian mode, sigma is widened so that the
/// central (1 - cal.alpha) interval matches the conformalized one.
inline DetectionResult detect(const Tensor& x, const ModelMaps& maps, const DetectOptions& opt) {
  DetectionResult res;
  if (opt.mode == DetectMode::ModelFree) {
    const double a = opt.conformal ? opt.conformal->alpha : opt.interval_alpha;
    auto [lo, hi] = detection_interval(maps, opt.mode, a, opt.sigma_floor);
    if (opt.conformal) std::tie(lo, hi) = conformal::conformalize(lo, hi, *opt.conformal);
    res.mask = interval_mask(x, lo, hi);
    return res;
  }

  Moments m = maps_to_moments(maps, opt.sigma_floor);
  res.degenerate = m.degenerate.size();
  if (opt.conformal) {
    const double zc = stats::normal_ppf(1.0 - opt.conformal->alpha / 2.0);
    if (!std::isfinite(opt.conformal->margin)) throw Error("detect: calibration margin is not finite");
    const double dm = opt.conformal->margin / zc;
    for (std::size_t i = 0; i < m.sigma.size(); ++i) m.sigma[i] = std::max(m.sigma[i] + dm, opt.sigma_floor);
  }
  Tensor z = zscore(x, m.mean, m.sigma);
  if (opt.filter_stage == FilterStage::ZScore) z = median_filter(z, opt.median_window);
  Tensor p = pvalue(z);
  BhResult bh = bh_fdr(p, opt.fdr_alpha);
  if (opt.filter_stage == FilterStage::Mask) bh.mask = median_filter(bh.mask, opt.median_window);
  res.z_map = std::move(z);
  res.p_map = std::move(p);
  res.fdr_threshold = bh.threshold;
  res.mask = std::move(bh.mask);
  return res;
}

/// Per-pixel anomaly score used for ROC analysis: |filtered z|.
inline Tensor anomaly_score(const DetectionResult& r) {
  return map(r.z_map, [](double v) { return std::abs(v); });
}

}  // namespace qrunc::anomaly
