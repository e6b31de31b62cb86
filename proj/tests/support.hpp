#pragma once

// Finite-difference oracles shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "qrunc/losses.hpp"
#include "qrunc/nn.hpp"
#include "qrunc/vae.hpp"

namespace qrunc::testing {

inline constexpr double kFdStep = 1e-5;

/// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero gradients from
/// turning round-off into huge relative errors.
inline double rel_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences of f around x, compared against grad.
inline double max_rel_error(Tensor x, const Tensor& grad, const std::function<double(const Tensor&)>& f,
                            const std::function<bool(std::size_t)>& skip = {}) {
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (skip && skip(i)) continue;
    const double x0 = x[i];
    x[i] = x0 + kFdStep;
    const double up = f(x);
    x[i] = x0 - kFdStep;
    const double down = f(x);
    x[i] = x0;
    worst = std::max(worst, rel_error(grad[i], (up - down) / (2 * kFdStep)));
  }
  return worst;
}

inline Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1, double hi = 1) {
  Tensor t(s);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// Nonzero biases keep ReLU inputs off the kink at exactly 0, which zero
/// biases produce wherever a layer sees an all-zero input patch.
inline void randomize_biases(nn::NetworkState& st, Rng& rng) {
  for (auto& node : st.params)
    if (node.size() == 2)
      for (double& b : node[1].values()) b = rng.uniform(-0.3, 0.3);
}

/// Checks every parameter and the input of a network under the scalar
/// L = sum_h <w_h, out_h> with random head weights w_h.
inline double network_grad_error(const nn::NetworkSpec& spec, nn::NetworkState state, Tensor input, Rng& rng) {
  randomize_biases(state, rng);
  std::map<std::string, Tensor> w;
  const auto fwd = nn::forward(spec, state, input);
  for (const auto& [name, out] : fwd.outputs) w.emplace(name, random_tensor(out.shape(), rng));
  auto objective = [&](const nn::NetworkState& st, const Tensor& x) {
    double s = 0;
    for (const auto& [name, out] : nn::forward(spec, st, x).outputs)
      for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * w.at(name)[i];
    return s;
  };
  const auto bwd = nn::backward(spec, state, fwd.cache, w);
  double worst = max_rel_error(input, bwd.input_grad, [&](const Tensor& x) { return objective(state, x); });
  for (std::size_t n = 0; n < state.params.size(); ++n) {
    for (std::size_t k = 0; k < state.params[n].size(); ++k) {
      const Tensor p0 = state.params[n][k];
      worst = std::max(worst, max_rel_error(p0, bwd.param_grads[n][k], [&](const Tensor& p) {
                         state.params[n][k] = p;
                         const double v = objective(state, input);
                         state.params[n][k] = p0;
                         return v;
                       }));
    }
  }
  return worst;
}

// Largest relative FD error of the ELBO gradient over every parameter.
inline double elbo_grad_error(vae::VaeModel m, const Tensor& x, const vae::TrainConfig& cfg) {
  Rng brng(5);
  randomize_biases(m.encoder_state, brng);
  randomize_biases(m.decoder_state, brng);
  const std::uint64_t eps_seed = 77;
  const double n = static_cast<double>(x.dim(0));
  Rng r0(eps_seed);
  const auto g = vae::elbo_gradients(m, x, r0, cfg);
  auto total = [&] {
    Rng r(eps_seed);
    return vae::elbo_gradients(m, x, r, cfg).terms.total / n;
  };
  double worst = 0;
  auto sweep = [&](nn::NetworkState& st, const nn::ParamList& grads) {
    for (std::size_t i = 0; i < st.params.size(); ++i)
      for (std::size_t k = 0; k < st.params[i].size(); ++k) {
        const Tensor p0 = st.params[i][k];
        worst = std::max(worst, max_rel_error(p0, grads[i][k], [&](const Tensor& p) {
                           st.params[i][k] = p;
                           const double v = total();
                           st.params[i][k] = p0;
                           return v;
                         }));
      }
  };
  sweep(m.encoder_state, g.encoder);
  sweep(m.decoder_state, g.decoder);
  return worst;
}

}  // namespace qrunc::testing
