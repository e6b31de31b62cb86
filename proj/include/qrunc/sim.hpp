#pragma once

// Synthetic data: the two-moon 4D density-estimation benchmark, lesion
// images with planted ellipses, multi-rater masks, and a k-NN estimator of
// KL divergence between two sample sets.

#include <algorithm>
#include <cmath>
#include <array>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "qrunc/rng.hpp"
#include "qrunc/tensor.hpp"

namespace qrunc::sim {

struct TwoMoonConfig {
  std::size_t n = 500;
  double noise_std = 0.05;
  std::uint64_t seed = 0;
};

/// n x 2 latents. The first floor(n/2) points lie on moon A (cos t, sin t),
/// the rest on moon B (1 - cos t, 0.5 - sin t), with t evenly spaced on
/// [0, pi] and isotropic Gaussian jitter added afterwards.
inline Tensor two_moon_latent(const TwoMoonConfig& cfg) {
  Rng rng(cfg.seed);
  Tensor z({cfg.n, 2});
  const std::size_t n_a = cfg.n / 2, n_b = cfg.n - n_a;
  auto t_at = [](std::size_t i, std::size_t count) {
    return count <= 1 ? 0.0 : std::numbers::pi * static_cast<double>(i) / static_cast<double>(count - 1);
  };
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const bool moon_a = i < n_a;
    const double t = moon_a ? t_at(i, n_a) : t_at(i - n_a, n_b);
    double z1 = moon_a ? std::cos(t) : 1.0 - std::cos(t);
    double z2 = moon_a ? std::sin(t) : 0.5 - std::sin(t);
    if (cfg.noise_std > 0) {
      z1 += cfg.noise_std * rng.normal();
      z2 += cfg.noise_std * rng.normal();
    }
    z[2 * i] = z1;
    z[2 * i + 1] = z2;
  }
  return z;
}

/// Smallest z1 for which every noise radicand below stays non-negative.
inline constexpr double kMinLatent1 = -3.6;

/// Noise-free part of the 4D map.
inline std::array<double, 4> simulate_4d_mean(double z1, double z2) noexcept {
  return {z1 - z2, z1 * z1 - 0.5 * z2, z1 * z2 - z1, z1 + z2};
}

/// Per-coordinate noise standard deviations of the 4D map. z1 is clipped to
/// [-3.6, inf) inside the first radicand.
inline std::array<double, 4> simulate_4d_noise_std(double z1) noexcept {
  const double a = std::abs(z1);
  return {std::sqrt(std::max(0.0, 0.03 + 0.05 * (3.0 + std::max(z1, kMinLatent1)))), std::sqrt(0.03 + 0.03 * a),
          std::sqrt(0.03 + 0.05 * a), std::sqrt(0.03 + 0.03 / (0.02 + a))};
}

struct Sim4dOptions {
  bool shared_eps = false;  // one epsilon per point instead of one per coordinate
};

/// Maps n x 2 latents to n x 4 observations v = mean(z) + eps * std(z).
inline Tensor simulate_4d(const Tensor& latents, Rng& rng, const Sim4dOptions& opt = {}) {
  if (latents.rank() != 2 || latents.dim(1) != 2) throw ShapeError("simulate_4d expects n x 2 latents");
  const std::size_t n = latents.dim(0);
  Tensor v({n, 4});
  for (std::size_t i = 0; i < n; ++i) {
    const double z1 = latents[2 * i], z2 = latents[2 * i + 1];
    const auto mu = simulate_4d_mean(z1, z2);
    const auto sd = simulate_4d_noise_std(z1);
    const double shared = opt.shared_eps ? rng.normal() : 0.0;
    for (std::size_t j = 0; j < 4; ++j) v[4 * i + j] = mu[j] + sd[j] * (opt.shared_eps ? shared : rng.normal());
  }
  return v;
}

// ---------------------------------------------------------------------------
// k-NN KL divergence

namespace detail {

// k-th smallest squared distance from point `p` to rows of `set`, ignoring
// distances <= tie_eps (self matches and exact duplicates).
inline double kth_sq_distance(const double* p, const Tensor& set, std::size_t d, std::size_t k, double tie_eps_sq,
                              std::vector<double>& best) {
  best.assign(k, std::numeric_limits<double>::infinity());
  const std::size_t n = set.dim(0);
  const double* base = set.data().data();
  for (std::size_t j = 0; j < n; ++j) {
    const double* q = base + j * d;
    double s = 0;
    for (std::size_t t = 0; t < d; ++t) {
      const double diff = p[t] - q[t];
      s += diff * diff;
    }
    if (s <= tie_eps_sq || s >= best[k - 1]) continue;
    std::size_t pos = k - 1;
    while (pos > 0 && best[pos - 1] > s) {
      best[pos] = best[pos - 1];
      --pos;
    }
    best[pos] = s;
  }
  return best[k - 1];
}

}  // namespace detail

/// D(P || Q) ~= (d/n) sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1)), where
/// rho_k(i) is the k-th neighbour distance of p_i within P and nu_k(i) within Q.
/// Pairs closer than 1e-12 are treated as the same point and excluded.
inline double knn_kl(const Tensor& p, const Tensor& q, std::size_t k = 5) {
  if (p.rank() != 2 || q.rank() != 2 || p.dim(1) != q.dim(1)) throw ShapeError("knn_kl expects n x d and m x d samples");
  const std::size_t n = p.dim(0), m = q.dim(0), d = p.dim(1);
  if (k == 0 || d == 0 || n <= k || m <= k) throw Error("knn_kl requires n, m > k >= 1 and d >= 1");
  constexpr double tie_eps = 1e-12;
  std::vector<double> best;
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* pi = p.data().data() + i * d;
    const double rho2 = detail::kth_sq_distance(pi, p, d, k, tie_eps * tie_eps, best);
    const double nu2 = detail::kth_sq_distance(pi, q, d, k, tie_eps * tie_eps, best);
    if (!std::isfinite(rho2) || !std::isfinite(nu2)) throw Error("knn_kl: fewer than k distinct neighbours");
    acc += 0.5 * std::log(nu2 / rho2);
  }
  return static_cast<double>(d) / static_cast<double>(n) * acc +
         std::log(static_cast<double>(m) / static_cast<double>(n - 1));
}

// ---------------------------------------------------------------------------
// Lesion images

struct LesionImageConfig {
  std::size_t n = 64;
  std::size_t size = 32;
  std::size_t bumps_min = 2, bumps_max = 4;
  double bump_sigma_min = 4.0, bump_sigma_max = 9.0;
  double background_lo = 0.15, background_hi = 0.85;
  // Pixel noise sd = noise_std + noise_slope * background (heteroscedastic).
  double noise_std = 0.01, noise_slope = 0.04;
  double lesion_p = 0.0;
  double contrast_min = 0.35, contrast_max = 0.55;
  double radius_min = 3.0, radius_max = 6.0;
  std::uint64_t seed = 0;
};

struct LesionDataset {
  Tensor images;  // (n, 1, size, size)
  Tensor masks;   // (n, 1, size, size), 1 on lesion support
};

/// One image per index, seeded by mix_seed(cfg.seed, index) so images are
/// independent of n and may be generated in parallel.
inline void synth_lesion_image(const LesionImageConfig& cfg, std::size_t index, double* img, double* mask) {
  if (cfg.radius_max * 2 + 2 > static_cast<double>(cfg.size)) throw Error("lesion radius does not fit in image");
  if (cfg.bumps_min == 0 || cfg.bumps_max < cfg.bumps_min) throw Error("invalid bump count range");
  Rng rng(mix_seed(cfg.seed, index));
  const std::size_t S = cfg.size, npx = S * S;
  const double sz = static_cast<double>(S);
  std::vector<double> bg(npx, 0.0);
  const std::size_t nb = cfg.bumps_min + static_cast<std::size_t>(rng.below(cfg.bumps_max - cfg.bumps_min + 1));
  for (std::size_t b = 0; b < nb; ++b) {
    const double cx = rng.uniform(0.0, sz), cy = rng.uniform(0.0, sz);
    const double s = rng.uniform(cfg.bump_sigma_min, cfg.bump_sigma_max);
    const double amp = rng.uniform(0.3, 1.0);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        bg[y * S + x] += amp * std::exp(-(dx * dx + dy * dy) / (2 * s * s));
      }
  }
  const auto [mn, mx] = std::minmax_element(bg.begin(), bg.end());
  const double lo = *mn, range = std::max(*mx - *mn, 1e-12);
  for (auto& v : bg) v = cfg.background_lo + (cfg.background_hi - cfg.background_lo) * (v - lo) / range;

  for (std::size_t i = 0; i < npx; ++i) {
    const double sd = cfg.noise_std + cfg.noise_slope * bg[i];
    img[i] = std::clamp(bg[i] + sd * rng.normal(), 0.0, 1.0);
    mask[i] = 0.0;
  }

  if (rng.uniform() < cfg.lesion_p) {
    const double rx = rng.uniform(cfg.radius_min, cfg.radius_max);
    const double ry = rng.uniform(cfg.radius_min, cfg.radius_max);
    const double rmax = std::max(rx, ry);
    const double cx = rng.uniform(rmax + 1, sz - rmax - 1), cy = rng.uniform(rmax + 1, sz - rmax - 1);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
    const double ct = std::cos(theta), st = std::sin(theta);
    double local = 0;
    std::size_t count = 0;
    std::vector<std::size_t> support;
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double u = (ct * dx + st * dy) / rx, w = (-st * dx + ct * dy) / ry;
        if (u * u + w * w <= 1.0) {
          support.push_back(y * S + x);
          local += bg[y * S + x];
          ++count;
        }
      }
    // bright on dark background, dark on bright background
    const double sign = count && local / static_cast<double>(count) > 0.5 ? -1.0 : 1.0;
    for (std::size_t i : support) {
      img[i] = std::clamp(img[i] + sign * contrast, 0.0, 1.0);
      mask[i] = 1.0;
    }
  }
}

inline LesionDataset synth_lesion_dataset(const LesionImageConfig& cfg) {
  const std::size_t S = cfg.size;
  LesionDataset ds{Tensor({cfg.n, 1, S, S}), Tensor({cfg.n, 1, S, S})};
  for (std::size_t i = 0; i < cfg.n; ++i)
    synth_lesion_image(cfg, i, ds.images.data().data() + i * S * S, ds.masks.data().data() + i * S * S);
  return ds;
}

// ---------------------------------------------------------------------------
// Multi-rater masks

struct RaterConfig {
  /// Signed morphology radius per rater: > 0 dilates, < 0 erodes. Sorted from
  /// most lenient to strictest so the expected masks are nested.
  std::vector<double> radii{2.0, 1.0, -1.0, -2.0};
  /// Probability of flipping each pixel on the rater mask boundary.
  double flip_p = 0.0;
};

namespace detail {

inline Tensor morph(const Tensor& mask, std::size_t H, std::size_t W, double radius) {
  Tensor out(mask.shape());
  if (radius == 0.0) return mask;
  const double r = std::abs(radius);
  const long R = static_cast<long>(std::floor(r));
  const bool dilate = radius > 0;
  for (long y = 0; y < static_cast<long>(H); ++y)
    for (long x = 0; x < static_cast<long>(W); ++x) {
      bool hit = !dilate;
      for (long dy = -R; dy <= R && hit != dilate; ++dy)
        for (long dx = -R; dx <= R; ++dx) {
          if (static_cast<double>(dx * dx + dy * dy) > r * r) continue;
          const long yy = y + dy, xx = x + dx;
          const bool inside = yy >= 0 && xx >= 0 && yy < static_cast<long>(H) && xx < static_cast<long>(W);
          const bool on = inside && mask[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)] != 0.0;
          if (dilate && on) {
            hit = true;
            break;
          }
          if (!dilate && !on) {
            hit = false;
            break;
          }
        }
      out[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] = hit ? 1.0 : 0.0;
    }
  return out;
}

}  // namespace detail

/// R noisy masks for one (H, W) truth mask: morphology by each rater's
/// radius, then random flips of boundary pixels.
inline std::vector<Tensor> synth_multirater(const Tensor& truth, const RaterConfig& cfg, Rng& rng) {
  if (cfg.radii.empty()) throw Error("synth_multirater requires at least one rater");
  if (truth.rank() < 2) throw ShapeError("synth_multirater expects an image mask");
  const std::size_t H = truth.dim(truth.rank() - 2), W = truth.dim(truth.rank() - 1);
  std::vector<Tensor> raters;
  for (double r : cfg.radii) {
    Tensor m = detail::morph(truth, H, W, r);
    if (cfg.flip_p > 0) {
      Tensor flipped = m;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double v = m[y * W + x];
          const bool boundary = (y > 0 && m[(y - 1) * W + x] != v) || (y + 1 < H && m[(y + 1) * W + x] != v) ||
                                (x > 0 && m[y * W + x - 1] != v) || (x + 1 < W && m[y * W + x + 1] != v);
          if (boundary && rng.uniform() < cfg.flip_p) flipped[y * W + x] = 1.0 - v;
        }
      m = std::move(flipped);
    }
    raters.push_back(std::move(m));
  }
  return raters;
}

}  // namespace qrunc::sim
