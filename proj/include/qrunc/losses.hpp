#pragma once

// Objectives. Every loss reduces by sum over elements and returns its
// gradient with respect to each prediction input; callers divide by batch size.

#include <cmath>
#include <string>

#include "qrunc/tensor.hpp"

namespace qrunc {

/// A quantile level strictly inside (0, 1).
class QuantileLevel {
 public:
  constexpr QuantileLevel() = default;
  explicit QuantileLevel(double a) : a_(a) {
    if (!(a > 0.0 && a < 1.0)) throw Error("quantile level must lie in (0,1), got " + std::to_string(a));
  }
  constexpr double value() const noexcept { return a_; }
  constexpr operator double() const noexcept { return a_; }

 private:
  double a_ = 0.5;
};

struct LossValue {
  double value = 0.0;
  Tensor grad;
};

/// Loss of two prediction tensors (two heads, or mean/log-variance).
struct PairLossValue {
  double value = 0.0;
  Tensor grad_first;
  Tensor grad_second;
};

namespace detail {

inline double sigmoid(double x) noexcept {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + e^x) without overflow.
inline double softplus(double x) noexcept { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline void require_binary(const Tensor& y, const char* what) {
  for (double v : y.data())
    if (v != 0.0 && v != 1.0) throw Error(std::string(what) + ": labels must be 0 or 1");
}

}  // namespace detail

/// Check function rho_alpha(r) with r = target - prediction.
inline double check_loss(double r, double alpha) noexcept { return r > 0 ? alpha * r : (1.0 - alpha) * (-r); }

/// Sum of rho_alpha(target - pred). The subgradient at r = 0 is 0.
inline LossValue pinball(const Tensor& pred, const Tensor& target, QuantileLevel alpha) {
  Tensor::require_same_shape(pred, target, "pinball");
  LossValue out{0.0, Tensor(pred.shape())};
  const double a = alpha;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = target[i] - pred[i];
    out.value += check_loss(r, a);
    out.grad[i] = r > 0 ? -a : (r < 0 ? 1.0 - a : 0.0);
  }
  return out;
}

/// pinball(lo, alpha_lo) + pinball(hi, alpha_hi); no cross-quantile term.
inline PairLossValue joint_quantile_loss(const Tensor& pred_lo, const Tensor& pred_hi, const Tensor& target,
                                         QuantileLevel alpha_lo, QuantileLevel alpha_hi) {
  if (!(alpha_lo.value() < alpha_hi.value())) throw Error("joint_quantile_loss requires alpha_lo < alpha_hi");
  auto lo = pinball(pred_lo, target, alpha_lo);
  auto hi = pinball(pred_hi, target, alpha_hi);
  return {lo.value + hi.value, std::move(lo.grad), std::move(hi.grad)};
}

/// Negative Gaussian log-likelihood without the constant:
/// sum 0.5*logvar + (x - mu)^2 / (2 exp(logvar)). Gradients w.r.t. (mu, logvar).
inline PairLossValue gaussian_nll(const Tensor& x, const Tensor& mu, const Tensor& logvar) {
  Tensor::require_same_shape(x, mu, "gaussian_nll");
  Tensor::require_same_shape(x, logvar, "gaussian_nll");
  PairLossValue out{0.0, Tensor(x.shape()), Tensor(x.shape())};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double inv_var = std::exp(-logvar[i]);
    const double d = x[i] - mu[i];
    out.value += 0.5 * logvar[i] + 0.5 * d * d * inv_var;
    out.grad_first[i] = -d * inv_var;
    out.grad_second[i] = 0.5 - 0.5 * d * d * inv_var;
  }
  return out;
}

/// KL(N(mu, exp(logvar)) || N(0, 1)) summed over elements.
inline PairLossValue kl_diag_gaussian(const Tensor& mu, const Tensor& logvar) {
  Tensor::require_same_shape(mu, logvar, "kl_diag_gaussian");
  PairLossValue out{0.0, Tensor(mu.shape()), Tensor(mu.shape())};
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double var = std::exp(logvar[i]);
    out.value += 0.5 * (var + mu[i] * mu[i] - 1.0 - logvar[i]);
    out.grad_first[i] = mu[i];
    out.grad_second[i] = 0.5 * (var - 1.0);
  }
  return out;
}

/// Smoothed binary quantile regression objective sum [y - (1 - tau)] K(f)
/// with K the sigmoid. It is maximized, so `value` holds its negation.
inline LossValue bqr_objective(const Tensor& logits, const Tensor& labels, QuantileLevel tau) {
  Tensor::require_same_shape(logits, labels, "bqr_objective");
  detail::require_binary(labels, "bqr_objective");
  LossValue out{0.0, Tensor(logits.shape())};
  const double offset = 1.0 - tau.value();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double k = detail::sigmoid(logits[i]);
    const double c = labels[i] - offset;
    out.value -= c * k;
    out.grad[i] = -c * k * (1.0 - k);
  }
  return out;
}

/// Binary cross-entropy on logits with the positive class weighted by w.
inline LossValue weighted_bce(const Tensor& logits, const Tensor& labels, double weight_pos) {
  Tensor::require_same_shape(logits, labels, "weighted_bce");
  if (!(weight_pos > 0.0)) throw Error("weighted_bce: positive-class weight must be > 0");
  LossValue out{0.0, Tensor(logits.shape())};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double f = logits[i], y = labels[i];
    // -log K(f) = softplus(-f), -log(1 - K(f)) = softplus(f)
    out.value += weight_pos * y * detail::softplus(-f) + (1.0 - y) * detail::softplus(f);
    const double k = detail::sigmoid(f);
    out.grad[i] = -weight_pos * y * (1.0 - k) + (1.0 - y) * k;
  }
  return out;
}

}  // namespace qrunc
