#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "qrunc/tensor.hpp"

namespace qrunc::metrics {

namespace detail {
inline void require_binary(const Tensor& t, const char* what) {
  for (double v : t.data())
    if (v != 0.0 && v != 1.0) throw Error(std::string(what) + ": input must be binary");
}
}  // namespace detail

/// 2|a & b| / (|a| + |b|); 1.0 when both masks are empty.
inline double dice(const Tensor& a, const Tensor& b) {
  Tensor::require_same_shape(a, b, "dice");
  detail::require_binary(a, "dice");
  detail::require_binary(b, "dice");
  double inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] * b[i];
    sa += a[i];
    sb += b[i];
  }
  return sa + sb == 0 ? 1.0 : 2.0 * inter / (sa + sb);
}

/// Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie), via midranks.
inline double roc_auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return scores[i] < scores[j]; });
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      const double y = labels[idx[t]];
      if (y != 0.0 && y != 1.0) throw Error("roc_auc: labels must be binary");
      if (y == 1.0) {
        pos += 1;
        rank_sum += midrank;
      }
    }
    i = j;
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0 || neg == 0) throw Error("roc_auc: both classes must be present");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

inline double roc_auc(const Tensor& scores, const Tensor& labels) {
  Tensor::require_same_shape(scores, labels, "roc_auc");
  return roc_auc(scores.data(), labels.data());
}

/// Fraction of elements with lo <= y <= hi.
inline double coverage(const Tensor& lo, const Tensor& hi, const Tensor& y) {
  Tensor::require_same_shape(lo, y, "coverage");
  Tensor::require_same_shape(hi, y, "coverage");
  if (y.empty()) return 0.0;
  std::size_t in = 0;
  for (std::size_t i = 0; i < y.size(); ++i) in += (lo[i] <= y[i] && y[i] <= hi[i]);
  return static_cast<double>(in) / static_cast<double>(y.size());
}

/// FP / max(1, FP + TP).
inline double empirical_fdr(const Tensor& mask, const Tensor& truth) {
  Tensor::require_same_shape(mask, truth, "empirical_fdr");
  double fp = 0, tp = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0.0) continue;
    (truth[i] != 0.0 ? tp : fp) += 1;
  }
  return fp / std::max(1.0, fp + tp);
}

}  // namespace qrunc::metrics
