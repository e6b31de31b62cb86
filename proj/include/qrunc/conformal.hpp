#pragma once

// Split-conformal calibration of quantile intervals (CQR): one conformity
// score per calibration target, a finite-sample corrected empirical quantile
// of the scores, and a symmetric widening of the interval by that margin.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "qrunc/tensor.hpp"

namespace qrunc::conformal {

struct Calibration {
  double margin = 0.0;  // +inf when the calibration set is too small for alpha
  std::size_t n_cal = 0;
  double alpha = 0.05;
};

/// max(q_lo - y, y - q_hi), elementwise.
inline Tensor conformity_scores(const Tensor& q_lo, const Tensor& q_hi, const Tensor& y) {
  Tensor::require_same_shape(q_lo, y, "conformity_scores");
  Tensor::require_same_shape(q_hi, y, "conformity_scores");
  Tensor out(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = std::max(q_lo[i] - y[i], y[i] - q_hi[i]);
  return out;
}

/// 1-based rank of the order statistic used as the margin: ceil((n+1)(1-alpha)).
inline std::size_t margin_rank(std::size_t n_cal, double alpha) {
  const double v = (static_cast<double>(n_cal) + 1.0) * (1.0 - alpha);
  // guard against 90.00000000000001-style products before taking the ceiling
  return static_cast<std::size_t>(std::ceil(v - 1e-9));
}

inline void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error("conformal alpha must lie in (0,1)");
}

/// Margin = the ceil((n+1)(1-alpha))-th smallest score; +inf if that rank exceeds n.
inline Calibration calibrate(std::span<const double> scores, double alpha) {
  check_alpha(alpha);
  if (scores.empty()) throw Error("calibrate: empty calibration scores");
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericError("calibrate: non-finite score");
  const std::size_t n = scores.size();
  const std::size_t k = margin_rank(n, alpha);
  Calibration cal{std::numeric_limits<double>::infinity(), n, alpha};
  if (k == 0) {
    cal.margin = -std::numeric_limits<double>::infinity();
  } else if (k <= n) {
    std::vector<double> v(scores.begin(), scores.end());
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end());
    cal.margin = v[k - 1];
  }
  return cal;
}

inline Calibration calibrate(const Tensor& scores, double alpha) { return calibrate(scores.data(), alpha); }

/// Per-element margins from a stack of calibration score maps (n_cal, ...).
inline Tensor calibrate_per_element(const Tensor& score_stack, double alpha) {
  if (score_stack.rank() < 2 || score_stack.dim(0) == 0) throw Error("calibrate_per_element: need (n_cal, ...) scores");
  const std::size_t n = score_stack.dim(0), m = score_stack.size() / n;
  Shape s(score_stack.shape().begin() + 1, score_stack.shape().end());
  Tensor out(s);
  std::vector<double> col(n);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = score_stack[i * m + j];
    out[j] = calibrate(col, alpha).margin;
  }
  return out;
}

/// (q_lo - margin, q_hi + margin).
inline std::pair<Tensor, Tensor> conformalize(const Tensor& q_lo, const Tensor& q_hi, const Calibration& cal) {
  Tensor::require_same_shape(q_lo, q_hi, "conformalize");
  if (!std::isfinite(cal.margin)) throw Error("conformalize: calibration margin is not finite (calibration set too small)");
  return {map(q_lo, [m = cal.margin](double v) { return v - m; }),
          map(q_hi, [m = cal.margin](double v) { return v + m; })};
}

/// Elementwise variant for per-element margins.
inline std::pair<Tensor, Tensor> conformalize(const Tensor& q_lo, const Tensor& q_hi, const Tensor& margins) {
  Tensor::require_same_shape(q_lo, q_hi, "conformalize");
  Tensor::require_same_shape(q_lo, margins, "conformalize");
  require_finite(margins, "conformalize margins");
  return {zip(q_lo, margins, [](double v, double m) { return v - m; }),
          zip(q_hi, margins, [](double v, double m) { return v + m; })};
}

}  // namespace qrunc::conformal
