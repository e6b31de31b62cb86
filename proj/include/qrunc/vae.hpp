#pragma once

// Mean-variance VAE baseline and the quantile-regression VAE. Both share the
// same encoder; the decoder has one shared trunk and two heads that differ
// only in their final layer: (mean, logvar) or (q_lo, q_hi).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "qrunc/anomaly.hpp"
#include "qrunc/losses.hpp"
#include "qrunc/nn.hpp"
#include "qrunc/rng.hpp"
#include "qrunc/tensor.hpp"

namespace qrunc::vae {

enum class HeadMode { MeanVar, Quantiles };

inline constexpr double kLogvarMin = -20.0;
inline constexpr double kLogvarMax = 5.0;

inline constexpr const char* kHeadMean = "mean";
inline constexpr const char* kHeadLogvar = "logvar";
inline constexpr const char* kHeadLo = "q_lo";
inline constexpr const char* kHeadHi = "q_hi";
inline constexpr const char* kEncoderHead = "stats";

struct VaeArch {
  Shape data_shape{4};  // (D) for vectors or (C, H, W) for images
  std::size_t latent_dim = 2;
  /// Dense hidden widths. Used by the whole network when conv_blocks == 0,
  /// otherwise the first entry sizes the dense bottleneck layer (0 = none).
  std::vector<std::size_t> hidden{64, 64};
  std::size_t conv_blocks = 0;  // image data only
  std::size_t base_channels = 8;
  HeadMode mode = HeadMode::Quantiles;
  double alpha_lo = 0.15, alpha_hi = 0.5;
  nn::Activation output_activation = nn::Activation::Identity;  // mean / quantile heads
};

struct VaeModel {
  VaeArch arch;
  nn::NetworkSpec encoder, decoder;
  nn::NetworkState encoder_state, decoder_state;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double kl_weight = 1.0;
  std::uint64_t seed = 0;
};

/// Per-sample averages of one epoch.
struct EpochStats {
  double loss = 0, rec = 0, kl = 0;
};

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(std::size_t epoch, const std::string& what)
      : NumericError("training diverged in epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

inline void validate(const VaeArch& a) {
  if (a.latent_dim == 0) throw Error("latent_dim must be positive");
  if (a.data_shape.empty() || shape_size(a.data_shape) == 0) throw Error("empty data shape");
  if (a.mode == HeadMode::Quantiles && !(0 < a.alpha_lo && a.alpha_lo < a.alpha_hi && a.alpha_hi < 1)) {
    throw Error("quantile heads require 0 < alpha_lo < alpha_hi < 1");
  }
  if (a.conv_blocks > 0) {
    if (a.data_shape.size() != 3) throw Error("conv blocks need (C,H,W) data");
    const std::size_t f = std::size_t{1} << a.conv_blocks;
    if (a.data_shape[1] % f || a.data_shape[2] % f) throw Error("image size must be divisible by 2^conv_blocks");
  }
}

inline std::pair<nn::NetworkSpec, nn::NetworkSpec> build_networks(const VaeArch& a) {
  validate(a);
  using nn::Activation;
  const std::size_t D = shape_size(a.data_shape);
  const bool mv = a.mode == HeadMode::MeanVar;

  nn::NetworkBuilder enc(a.data_shape);
  nn::NodeId h = enc.input();
  Shape conv_shape;
  if (a.conv_blocks > 0) {
    std::size_t ch = a.base_channels;
    for (std::size_t b = 0; b < a.conv_blocks; ++b, ch *= 2) {
      h = enc.activation(enc.conv2d(h, ch, 3, 2, 1), Activation::ReLU);
    }
    conv_shape = enc.shape(h);
    h = enc.flatten(h);
    if (!a.hidden.empty() && a.hidden[0] > 0) h = enc.activation(enc.dense(h, a.hidden[0]), Activation::ReLU);
  } else {
    if (a.data_shape.size() != 1) h = enc.flatten(h);
    for (std::size_t w : a.hidden) h = enc.activation(enc.dense(h, w), Activation::ReLU);
  }
  enc.head(kEncoderHead, enc.dense(h, 2 * a.latent_dim));

  nn::NetworkBuilder dec({a.latent_dim});
  nn::NodeId t = dec.input();
  auto add_heads = [&](auto&& make_final) {
    const char* first = mv ? kHeadMean : kHeadLo;
    const char* second = mv ? kHeadLogvar : kHeadHi;
    dec.head(first, dec.activation(make_final(), a.output_activation));
    dec.head(second, mv ? make_final() : dec.activation(make_final(), a.output_activation));
  };
  if (a.conv_blocks > 0) {
    if (!a.hidden.empty() && a.hidden[0] > 0) t = dec.activation(dec.dense(t, a.hidden[0]), Activation::ReLU);
    t = dec.activation(dec.dense(t, shape_size(conv_shape)), Activation::ReLU);
    t = dec.reshape(t, conv_shape);
    std::size_t ch = conv_shape[0];
    for (std::size_t b = 0; b < a.conv_blocks; ++b) {
      ch = std::max<std::size_t>(ch / 2, a.base_channels);
      t = dec.activation(dec.conv2d(dec.upsample2x(t), ch, 3, 1, 1), Activation::ReLU);
    }
    add_heads([&] { return dec.conv2d(t, a.data_shape[0], 3, 1, 1); });
  } else {
    for (auto it = a.hidden.rbegin(); it != a.hidden.rend(); ++it)
      t = dec.activation(dec.dense(t, *it), Activation::ReLU);
    add_heads([&] {
      nn::NodeId o = dec.dense(t, D);
      return a.data_shape.size() == 1 ? o : dec.reshape(o, a.data_shape);
    });
  }
  return {enc.build(), dec.build()};
}

inline VaeModel make_model(const VaeArch& arch, std::uint64_t seed) {
  auto [e, d] = build_networks(arch);
  Rng rng(seed);
  VaeModel m{arch, std::move(e), std::move(d), {}, {}};
  m.encoder_state = nn::init_params(m.encoder, rng);
  m.decoder_state = nn::init_params(m.decoder, rng);
  return m;
}

inline Shape batch_shape(std::size_t n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

inline void check_data(const VaeModel& m, const Tensor& x) {
  const Shape& s = m.arch.data_shape;
  if (x.rank() != s.size() + 1 || !std::equal(s.begin(), s.end(), x.shape().begin() + 1)) {
    throw ShapeError("data shape " + shape_str(x.shape()) + " does not match model data shape " + shape_str(s));
  }
}

struct Posterior {
  Tensor mu, logvar;  // (N, latent_dim) each
};

namespace detail {

inline Posterior split_stats(const Tensor& stats, std::size_t L) {
  const std::size_t n = stats.dim(0);
  Posterior p{Tensor({n, L}), Tensor({n, L})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < L; ++j) {
      p.mu[i * L + j] = stats[i * 2 * L + j];
      p.logvar[i * L + j] = stats[i * 2 * L + L + j];
    }
  return p;
}

inline Tensor join_stats(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.dim(0), L = a.dim(1);
  Tensor out({n, 2 * L});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < L; ++j) {
      out[i * 2 * L + j] = a[i * L + j];
      out[i * 2 * L + L + j] = b[i * L + j];
    }
  return out;
}

inline Tensor clamp_logvar(const Tensor& raw) {
  return map(raw, [](double v) { return std::clamp(v, kLogvarMin, kLogvarMax); });
}

}  // namespace detail

/// Posterior mean and log-variance for a batch (N, data_shape...).
inline Posterior encode(const VaeModel& m, const Tensor& x) {
  check_data(m, x);
  auto out = nn::forward(m.encoder, m.encoder_state, x);
  return detail::split_stats(out.outputs.at(kEncoderHead), m.arch.latent_dim);
}

/// z = mu + exp(logvar / 2) * eps with eps drawn row-major from rng.
inline Tensor reparameterize(const Tensor& mu, const Tensor& logvar, Rng& rng) {
  Tensor::require_same_shape(mu, logvar, "reparameterize");
  Tensor z(mu.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = mu[i] + std::exp(0.5 * logvar[i]) * rng.normal();
  return z;
}

/// Decoder heads for latents (N, latent_dim). A mean-variance model's
/// logvar head is returned clamped to [-20, 5].
inline std::map<std::string, Tensor> decode(const VaeModel& m, const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != m.arch.latent_dim) {
    throw ShapeError("latent batch must be (N, " + std::to_string(m.arch.latent_dim) + ")");
  }
  auto out = nn::forward(m.decoder, m.decoder_state, z).outputs;
  if (m.arch.mode == HeadMode::MeanVar) out[kHeadLogvar] = detail::clamp_logvar(out[kHeadLogvar]);
  return out;
}

struct LossTerms {
  double rec = 0, kl = 0, total = 0;  // sums over the batch; total = rec + kl_weight * kl
};

struct ElboGradients {
  LossTerms terms;
  nn::ParamList encoder, decoder;  // gradients of total / batch size
};

/// One-sample ELBO on a batch and its parameter gradients. Draws one normal
/// per latent coordinate from rng.
inline ElboGradients elbo_gradients(const VaeModel& m, const Tensor& x, Rng& rng, const TrainConfig& cfg) {
  check_data(m, x);
  const std::size_t n = x.dim(0);
  const double inv_n = 1.0 / static_cast<double>(n);
  auto enc = nn::forward(m.encoder, m.encoder_state, x);
  Posterior post = detail::split_stats(enc.outputs.at(kEncoderHead), m.arch.latent_dim);
  Tensor eps(post.mu.shape());
  for (double& e : eps.values()) e = rng.normal();
  Tensor z(post.mu.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = post.mu[i] + std::exp(0.5 * post.logvar[i]) * eps[i];

  auto dec = nn::forward(m.decoder, m.decoder_state, z);
  std::map<std::string, Tensor> head_grads;
  LossTerms t;
  if (m.arch.mode == HeadMode::MeanVar) {
    const Tensor& raw_lv = dec.outputs.at(kHeadLogvar);
    auto nll = gaussian_nll(x, dec.outputs.at(kHeadMean), detail::clamp_logvar(raw_lv));
    t.rec = nll.value;
    for (std::size_t i = 0; i < raw_lv.size(); ++i)
      if (raw_lv[i] < kLogvarMin || raw_lv[i] > kLogvarMax) nll.grad_second[i] = 0.0;
    head_grads[kHeadMean] = std::move(nll.grad_first *= inv_n);
    head_grads[kHeadLogvar] = std::move(nll.grad_second *= inv_n);
  } else {
    auto q = joint_quantile_loss(dec.outputs.at(kHeadLo), dec.outputs.at(kHeadHi), x, QuantileLevel(m.arch.alpha_lo),
                                 QuantileLevel(m.arch.alpha_hi));
    t.rec = q.value;
    head_grads[kHeadLo] = std::move(q.grad_first *= inv_n);
    head_grads[kHeadHi] = std::move(q.grad_second *= inv_n);
  }
  auto kl = kl_diag_gaussian(post.mu, post.logvar);
  t.kl = kl.value;
  t.total = t.rec + cfg.kl_weight * t.kl;
  if (!std::isfinite(t.total)) throw NumericError("non-finite loss");

  auto bd = nn::backward(m.decoder, m.decoder_state, dec.cache, head_grads);
  const Tensor& dz = bd.input_grad;
  Tensor dmu(post.mu.shape()), dlv(post.mu.shape());
  for (std::size_t i = 0; i < dz.size(); ++i) {
    const double s = std::exp(0.5 * post.logvar[i]);
    dmu[i] = dz[i] + cfg.kl_weight * kl.grad_first[i] * inv_n;
    dlv[i] = dz[i] * eps[i] * 0.5 * s + cfg.kl_weight * kl.grad_second[i] * inv_n;
  }
  auto be = nn::backward(m.encoder, m.encoder_state, enc.cache, {{kEncoderHead, detail::join_stats(dmu, dlv)}});
  return {t, std::move(be.param_grads), std::move(bd.param_grads)};
}

/// One-sample ELBO step on a batch: forward, loss, backward, Adam.
/// Returns the batch sums of the loss terms.
inline LossTerms train_step(VaeModel& m, const Tensor& x, Rng& rng, const TrainConfig& cfg) {
  auto g = elbo_gradients(m, x, rng, cfg);
  const nn::AdamConfig adam{cfg.lr};
  nn::adam_step(m.decoder_state, g.decoder, adam);
  nn::adam_step(m.encoder_state, g.encoder, adam);
  return g.terms;
}

namespace detail {

inline std::vector<EpochStats> train_loop(const Tensor& data, VaeModel& m, const TrainConfig& cfg) {
  check_data(m, data);
  if (cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0) || !(cfg.kl_weight >= 0)) {
    throw Error("invalid training configuration");
  }
  const std::size_t n = data.dim(0);
  if (n == 0) throw Error("empty training set");
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochStats> history;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    EpochStats s;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      const std::size_t e = std::min(n, b + cfg.batch_size);
      const Tensor batch = data.gather_rows(std::span<const std::size_t>(order).subspan(b, e - b));
      LossTerms t;
      try {
        t = train_step(m, batch, rng, cfg);
      } catch (const NumericError& err) {
        throw TrainingDiverged(epoch, err.what());
      }
      s.loss += t.total;
      s.rec += t.rec;
      s.kl += t.kl;
    }
    const double dn = static_cast<double>(n);
    s.loss /= dn;
    s.rec /= dn;
    s.kl /= dn;
    if (!std::isfinite(s.loss)) throw TrainingDiverged(epoch, "non-finite epoch loss");
    history.push_back(s);
  }
  return history;
}

}  // namespace detail

/// Trains a mean-variance model: Gaussian NLL + kl_weight * KL.
inline std::vector<EpochStats> train_vae(const Tensor& data, VaeModel& m, const TrainConfig& cfg) {
  if (m.arch.mode != HeadMode::MeanVar) throw Error("train_vae requires a mean-variance model");
  return detail::train_loop(data, m, cfg);
}

/// Trains a quantile model: joint pinball loss over both heads + kl_weight * KL.
inline std::vector<EpochStats> train_qrvae(const Tensor& data, VaeModel& m, const TrainConfig& cfg) {
  if (m.arch.mode != HeadMode::Quantiles) throw Error("train_qrvae requires a quantile model");
  return detail::train_loop(data, m, cfg);
}

/// Per-pixel model maps for inputs x, decoding the posterior mean.
inline anomaly::ModelMaps reconstruct(const VaeModel& m, const Tensor& x) {
  const Posterior post = encode(m, x);
  auto heads = decode(m, post.mu);
  if (m.arch.mode == HeadMode::MeanVar) {
    Tensor sigma = map(heads.at(kHeadLogvar), [](double lv) { return std::exp(0.5 * lv); });
    return anomaly::GaussianMaps{std::move(heads.at(kHeadMean)), std::move(sigma)};
  }
  return anomaly::QuantileMaps{std::move(heads.at(kHeadLo)), std::move(heads.at(kHeadHi)), m.arch.alpha_lo,
                               m.arch.alpha_hi};
}

/// Per-pixel (mu, sigma) for a batch; quantile heads are converted under the
/// Gaussian assumption.
inline anomaly::Moments predicted_moments(const VaeModel& m, const Tensor& x,
                                          double sigma_floor = anomaly::kDefaultSigmaFloor) {
  return anomaly::maps_to_moments(reconstruct(m, x), sigma_floor);
}

/// Draws n samples: z ~ N(0, I), decode, then x ~ N(mu, sigma^2) per element.
/// Consumes exactly latent_dim + data_dim normal draws per sample.
inline Tensor sample_generative(const VaeModel& m, std::size_t n, Rng& rng) {
  Tensor out(batch_shape(n, m.arch.data_shape));
  if (n == 0) return out;
  Tensor z({n, m.arch.latent_dim});
  for (double& v : z.values()) v = rng.normal();
  auto heads = decode(m, z);
  Tensor mu, sigma;
  if (m.arch.mode == HeadMode::MeanVar) {
    mu = std::move(heads.at(kHeadMean));
    sigma = map(heads.at(kHeadLogvar), [](double lv) { return std::exp(0.5 * lv); });
  } else {
    auto mom = anomaly::quantile_pair_to_moments(heads.at(kHeadLo), heads.at(kHeadHi), m.arch.alpha_lo,
                                                 m.arch.alpha_hi);
    mu = std::move(mom.mean);
    sigma = std::move(mom.sigma);
  }
  require_finite(sigma, "sample_generative sigma");
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mu[i] + sigma[i] * rng.normal();
  return out;
}

}  // namespace qrunc::vae
