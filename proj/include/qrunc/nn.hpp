#pragma once

// Small deterministic layer-graph engine: dense and 2D convolution layers,
// hand-written reverse pass, Adam. Values are double precision throughout.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <map>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "qrunc/parallel.hpp"
#include "qrunc/rng.hpp"
#include "qrunc/tensor.hpp"

namespace qrunc::nn {

enum class Activation { Identity, ReLU, Sigmoid };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::ReLU: return "relu";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

struct Input {
  Shape shape;
};
struct Dense {
  std::size_t in = 0, out = 0;
};
struct Conv2D {
  std::size_t in_ch = 0, out_ch = 0, kernel = 3, stride = 1, pad = 0;
};
struct Act {
  Activation fn = Activation::Identity;
};
struct Upsample2x {};
struct Reshape {
  Shape to;
};
/// Concatenation along the first per-sample axis (channels for images).
struct Concat {};

using LayerOp = std::variant<Input, Dense, Conv2D, Act, Upsample2x, Reshape, Concat>;
using NodeId = std::size_t;

struct Node {
  LayerOp op;
  std::vector<NodeId> inputs;
  Shape shape;  // per-sample output shape
};

/// Immutable layer graph. Node 0 is the input; every other node only reads
/// from earlier nodes, so index order is a topological order. Heads are named
/// outputs; they may share any prefix of the graph.
class NetworkSpec {
 public:
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const Shape& input_shape() const noexcept { return nodes_.front().shape; }
  /// Heads sorted by name.
  const std::vector<std::pair<std::string, NodeId>>& heads() const noexcept { return heads_; }

  const Shape& head_shape(const std::string& name) const {
    for (const auto& [n, id] : heads_)
      if (n == name) return nodes_[id].shape;
    throw Error("unknown head '" + name + "'");
  }

  static bool has_params(const LayerOp& op) noexcept {
    return std::holds_alternative<Dense>(op) || std::holds_alternative<Conv2D>(op);
  }

 private:
  friend class NetworkBuilder;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, NodeId>> heads_;
};

/// Builds a NetworkSpec, checking that shapes compose at every step.
class NetworkBuilder {
 public:
  explicit NetworkBuilder(Shape input_shape) {
    if (input_shape.empty() || shape_size(input_shape) == 0) throw ShapeError("empty network input shape");
    spec_.nodes_.push_back({Input{input_shape}, {}, input_shape});
  }

  static constexpr NodeId input() noexcept { return 0; }

  const Shape& shape(NodeId x) const { return node(x).shape; }

  NodeId dense(NodeId x, std::size_t out) {
    const std::size_t in = shape_size(node(x).shape);
    if (node(x).shape.size() != 1) throw ShapeError("dense input must be a flat vector, got " + shape_str(node(x).shape));
    if (out == 0) throw ShapeError("dense layer with zero outputs");
    return add(Dense{in, out}, {x}, {out});
  }

  NodeId conv2d(NodeId x, std::size_t out_ch, std::size_t kernel, std::size_t stride = 1, std::size_t pad = 0) {
    const Shape& s = node(x).shape;
    if (s.size() != 3) throw ShapeError("conv2d input must be (C,H,W), got " + shape_str(s));
    if (kernel == 0 || stride == 0 || out_ch == 0) throw ShapeError("conv2d with zero kernel/stride/channels");
    if (s[1] + 2 * pad < kernel || s[2] + 2 * pad < kernel) throw ShapeError("conv2d kernel larger than padded input");
    const std::size_t oh = (s[1] + 2 * pad - kernel) / stride + 1;
    const std::size_t ow = (s[2] + 2 * pad - kernel) / stride + 1;
    return add(Conv2D{s[0], out_ch, kernel, stride, pad}, {x}, {out_ch, oh, ow});
  }

  NodeId activation(NodeId x, Activation fn) { return add(Act{fn}, {x}, node(x).shape); }

  NodeId upsample2x(NodeId x) {
    const Shape& s = node(x).shape;
    if (s.size() != 3) throw ShapeError("upsample input must be (C,H,W)");
    return add(Upsample2x{}, {x}, {s[0], 2 * s[1], 2 * s[2]});
  }

  NodeId reshape(NodeId x, Shape to) {
    if (shape_size(to) != shape_size(node(x).shape)) {
      throw ShapeError("reshape " + shape_str(node(x).shape) + " -> " + shape_str(to));
    }
    return add(Reshape{to}, {x}, to);
  }

  NodeId flatten(NodeId x) { return reshape(x, {shape_size(node(x).shape)}); }

  NodeId concat(NodeId a, NodeId b) {
    Shape sa = node(a).shape, sb = node(b).shape;
    if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
      throw ShapeError("concat " + shape_str(sa) + " with " + shape_str(sb));
    }
    Shape out = sa;
    out[0] += sb[0];
    return add(Concat{}, {a, b}, out);
  }

  void head(std::string name, NodeId x) {
    node(x);
    for (const auto& h : spec_.heads_)
      if (h.first == name) throw Error("duplicate head '" + name + "'");
    spec_.heads_.emplace_back(std::move(name), x);
  }

  NetworkSpec build() const {
    if (spec_.heads_.empty()) throw Error("network has no heads");
    NetworkSpec out = spec_;
    std::sort(out.heads_.begin(), out.heads_.end());
    return out;
  }

 private:
  const Node& node(NodeId x) const {
    if (x >= spec_.nodes_.size()) throw Error("unknown node id " + std::to_string(x));
    return spec_.nodes_[x];
  }

  NodeId add(LayerOp op, std::vector<NodeId> inputs, Shape shape) {
    spec_.nodes_.push_back({std::move(op), std::move(inputs), std::move(shape)});
    return spec_.nodes_.size() - 1;
  }

  NetworkSpec spec_;
};

/// Per-node parameter tensors ({weight, bias} for Dense/Conv2D, empty otherwise).
using ParamList = std::vector<std::vector<Tensor>>;

struct NetworkState {
  ParamList params;
  ParamList m;  // Adam first moment
  ParamList v;  // Adam second moment
  std::uint64_t step = 0;
};

inline std::vector<Shape> param_shapes(const LayerOp& op) {
  if (const auto* d = std::get_if<Dense>(&op)) return {{d->out, d->in}, {d->out}};
  if (const auto* c = std::get_if<Conv2D>(&op)) return {{c->out_ch, c->in_ch, c->kernel, c->kernel}, {c->out_ch}};
  return {};
}

inline const char* param_name(std::size_t slot) { return slot == 0 ? "weight" : "bias"; }

/// Zero-filled tensors matching every parameter of the spec.
inline ParamList zeros_like(const NetworkSpec& spec) {
  ParamList out(spec.nodes().size());
  for (std::size_t i = 0; i < spec.nodes().size(); ++i)
    for (const auto& s : param_shapes(spec.nodes()[i].op)) out[i].emplace_back(s);
  return out;
}

inline void check_state(const NetworkSpec& spec, const NetworkState& state) {
  if (state.params.size() != spec.nodes().size()) throw ShapeError("network state does not match spec");
  for (std::size_t i = 0; i < spec.nodes().size(); ++i) {
    const auto shapes = param_shapes(spec.nodes()[i].op);
    if (state.params[i].size() != shapes.size()) throw ShapeError("parameter count mismatch at node " + std::to_string(i));
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      if (state.params[i][k].shape() != shapes[k]) throw ShapeError("parameter shape mismatch at node " + std::to_string(i));
    }
  }
}

enum class InitScheme {
  LeCunUniform,  // U(-sqrt(3/fan_in), +sqrt(3/fan_in)), std 1/sqrt(fan_in)
  HeUniform,     // U(-sqrt(6/fan_in), +sqrt(6/fan_in)), std sqrt(2/fan_in)
};

inline std::size_t fan_in(const LayerOp& op) {
  if (const auto* d = std::get_if<Dense>(&op)) return d->in;
  if (const auto* c = std::get_if<Conv2D>(&op)) return c->in_ch * c->kernel * c->kernel;
  return 0;
}

/// Standard deviation the scheme targets for a layer with the given fan-in.
inline double init_target_std(InitScheme scheme, std::size_t fan) {
  const double f = static_cast<double>(fan);
  return scheme == InitScheme::HeUniform ? std::sqrt(2.0 / f) : std::sqrt(1.0 / f);
}

/// Weights fan-in-scaled uniform, biases zero, Adam moments zero.
inline NetworkState init_params(const NetworkSpec& spec, Rng& rng, InitScheme scheme = InitScheme::HeUniform) {
  NetworkState st;
  st.params = zeros_like(spec);
  st.m = zeros_like(spec);
  st.v = zeros_like(spec);
  for (std::size_t i = 0; i < spec.nodes().size(); ++i) {
    if (st.params[i].empty()) continue;
    const double bound = std::sqrt(3.0) * init_target_std(scheme, fan_in(spec.nodes()[i].op));
    for (double& w : st.params[i][0].values()) w = rng.uniform(-bound, bound);
  }
  return st;
}

struct ForwardCache {
  std::vector<Tensor> values;  // output of every node, batch-leading
  std::size_t batch = 0;
};

struct ForwardResult {
  std::map<std::string, Tensor> outputs;
  ForwardCache cache;
};

struct BackwardResult {
  ParamList param_grads;
  Tensor input_grad;
};

namespace detail {

inline Shape batched(std::size_t n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

inline double sigmoid(double x) noexcept {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Valid output-index range [lo, hi) for one kernel tap along one axis.
inline std::pair<std::size_t, std::size_t> tap_range(std::size_t k, std::size_t stride, std::size_t pad,
                                                     std::size_t in, std::size_t out) {
  // need 0 <= o*stride + k - pad < in
  std::size_t lo = 0;
  if (pad > k) lo = (pad - k + stride - 1) / stride;
  const long long top = static_cast<long long>(in) - 1 + static_cast<long long>(pad) - static_cast<long long>(k);
  if (top < 0) return {0, 0};
  std::size_t hi = static_cast<std::size_t>(top) / stride + 1;
  hi = std::min(hi, out);
  return {std::min(lo, hi), hi};
}

inline void dense_forward(const Dense& d, const Tensor& w, const Tensor& b, const Tensor& x, Tensor& y, std::size_t n) {
  for (std::size_t s = 0; s < n; ++s) {
    const double* xi = x.data().data() + s * d.in;
    double* yo = y.data().data() + s * d.out;
    for (std::size_t j = 0; j < d.out; ++j) {
      const double* wj = w.data().data() + j * d.in;
      double acc = b[j];
      for (std::size_t i = 0; i < d.in; ++i) acc += wj[i] * xi[i];
      yo[j] = acc;
    }
  }
}

inline void dense_backward(const Dense& d, const Tensor& w, const Tensor& x, const Tensor& gy, Tensor& gw, Tensor& gb,
                           Tensor& gx, std::size_t n) {
  for (std::size_t s = 0; s < n; ++s) {
    const double* xi = x.data().data() + s * d.in;
    const double* g = gy.data().data() + s * d.out;
    double* gxi = gx.data().data() + s * d.in;
    for (std::size_t j = 0; j < d.out; ++j) {
      const double gj = g[j];
      if (gj == 0.0) continue;
      gb[j] += gj;
      const double* wj = w.data().data() + j * d.in;
      double* gwj = gw.data().data() + j * d.in;
      for (std::size_t i = 0; i < d.in; ++i) {
        gwj[i] += gj * xi[i];
        gxi[i] += gj * wj[i];
      }
    }
  }
}

inline void conv_forward(const Conv2D& c, const Shape& in_s, const Shape& out_s, const Tensor& w, const Tensor& b,
                         const Tensor& x, Tensor& y, std::size_t n) {
  const std::size_t H = in_s[1], W = in_s[2], OH = out_s[1], OW = out_s[2], K = c.kernel;
  const std::size_t in_plane = H * W, out_plane = OH * OW;
  parallel_for(n, [&](std::size_t s) {
    for (std::size_t o = 0; o < c.out_ch; ++o) {
      double* yo = y.data().data() + (s * c.out_ch + o) * out_plane;
      std::fill(yo, yo + out_plane, b[o]);
      for (std::size_t ci = 0; ci < c.in_ch; ++ci) {
        const double* xp = x.data().data() + (s * c.in_ch + ci) * in_plane;
        const double* wk = w.data().data() + (o * c.in_ch + ci) * K * K;
        for (std::size_t ky = 0; ky < K; ++ky) {
          const auto [oy0, oy1] = tap_range(ky, c.stride, c.pad, H, OH);
          for (std::size_t kx = 0; kx < K; ++kx) {
            const double wv = wk[ky * K + kx];
            const auto [ox0, ox1] = tap_range(kx, c.stride, c.pad, W, OW);
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              const double* xr = xp + (oy * c.stride + ky - c.pad) * W + kx - c.pad;
              double* yr = yo + oy * OW;
              for (std::size_t ox = ox0; ox < ox1; ++ox) yr[ox] += wv * xr[ox * c.stride];
            }
          }
        }
      }
    }
  });
}

inline void conv_backward(const Conv2D& c, const Shape& in_s, const Shape& out_s, const Tensor& w, const Tensor& x,
                          const Tensor& gy, Tensor& gw, Tensor& gb, Tensor& gx, std::size_t n) {
  const std::size_t H = in_s[1], W = in_s[2], OH = out_s[1], OW = out_s[2], K = c.kernel;
  const std::size_t in_plane = H * W, out_plane = OH * OW;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t o = 0; o < c.out_ch; ++o) {
      const double* go = gy.data().data() + (s * c.out_ch + o) * out_plane;
      double bsum = 0.0;
      for (std::size_t i = 0; i < out_plane; ++i) bsum += go[i];
      gb[o] += bsum;
      for (std::size_t ci = 0; ci < c.in_ch; ++ci) {
        const double* xp = x.data().data() + (s * c.in_ch + ci) * in_plane;
        double* gxp = gx.data().data() + (s * c.in_ch + ci) * in_plane;
        const double* wk = w.data().data() + (o * c.in_ch + ci) * K * K;
        double* gwk = gw.data().data() + (o * c.in_ch + ci) * K * K;
        for (std::size_t ky = 0; ky < K; ++ky) {
          const auto [oy0, oy1] = tap_range(ky, c.stride, c.pad, H, OH);
          for (std::size_t kx = 0; kx < K; ++kx) {
            const double wv = wk[ky * K + kx];
            const auto [ox0, ox1] = tap_range(kx, c.stride, c.pad, W, OW);
            double gacc = 0.0;
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              const std::size_t row = (oy * c.stride + ky - c.pad) * W + kx - c.pad;
              const double* xr = xp + row;
              double* gxr = gxp + row;
              const double* gr = go + oy * OW;
              for (std::size_t ox = ox0; ox < ox1; ++ox) {
                gacc += gr[ox] * xr[ox * c.stride];
                gxr[ox * c.stride] += gr[ox] * wv;
              }
            }
            gwk[ky * K + kx] += gacc;
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Runs the graph on a batch. `input` has shape (N, input_shape...).
inline ForwardResult forward(const NetworkSpec& spec, const NetworkState& state, const Tensor& input) {
  check_state(spec, state);
  const Shape& in_s = spec.input_shape();
  if (input.rank() != in_s.size() + 1 || !std::equal(in_s.begin(), in_s.end(), input.shape().begin() + 1)) {
    throw ShapeError("network input expects (N," + shape_str(in_s).substr(1) + ", got " + shape_str(input.shape()));
  }
  const std::size_t n = input.dim(0);
  ForwardResult res;
  auto& vals = res.cache.values;
  res.cache.batch = n;
  vals.reserve(spec.nodes().size());
  vals.push_back(input);
  for (std::size_t id = 1; id < spec.nodes().size(); ++id) {
    const Node& node = spec.nodes()[id];
    Tensor y(detail::batched(n, node.shape));
    const Tensor& x = vals[node.inputs[0]];
    const auto& p = state.params[id];
    std::visit(
        [&](const auto& op) {
          using T = std::decay_t<decltype(op)>;
          if constexpr (std::is_same_v<T, Dense>) {
            detail::dense_forward(op, p[0], p[1], x, y, n);
          } else if constexpr (std::is_same_v<T, Conv2D>) {
            detail::conv_forward(op, spec.nodes()[node.inputs[0]].shape, node.shape, p[0], p[1], x, y, n);
          } else if constexpr (std::is_same_v<T, Act>) {
            for (std::size_t i = 0; i < x.size(); ++i) {
              switch (op.fn) {
                case Activation::Identity: y[i] = x[i]; break;
                case Activation::ReLU: y[i] = x[i] > 0.0 ? x[i] : 0.0; break;
                case Activation::Sigmoid: y[i] = detail::sigmoid(x[i]); break;
              }
            }
          } else if constexpr (std::is_same_v<T, Upsample2x>) {
            const Shape& s = spec.nodes()[node.inputs[0]].shape;
            const std::size_t C = s[0], H = s[1], W = s[2];
            for (std::size_t b = 0; b < n * C; ++b)
              for (std::size_t yy = 0; yy < 2 * H; ++yy)
                for (std::size_t xx = 0; xx < 2 * W; ++xx)
                  y[(b * 2 * H + yy) * 2 * W + xx] = x[(b * H + yy / 2) * W + xx / 2];
          } else if constexpr (std::is_same_v<T, Reshape>) {
            std::copy(x.data().begin(), x.data().end(), y.data().begin());
          } else if constexpr (std::is_same_v<T, Concat>) {
            const Tensor& x2 = vals[node.inputs[1]];
            const std::size_t a = shape_size(spec.nodes()[node.inputs[0]].shape);
            const std::size_t bsz = shape_size(spec.nodes()[node.inputs[1]].shape);
            for (std::size_t s = 0; s < n; ++s) {
              std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(s * a), a,
                          y.data().begin() + static_cast<std::ptrdiff_t>(s * (a + bsz)));
              std::copy_n(x2.data().begin() + static_cast<std::ptrdiff_t>(s * bsz), bsz,
                          y.data().begin() + static_cast<std::ptrdiff_t>(s * (a + bsz) + a));
            }
          }
        },
        node.op);
    if (!y.all_finite()) throw NumericError("non-finite activation at node " + std::to_string(id));
    vals.push_back(std::move(y));
  }
  for (const auto& [name, id] : spec.heads()) res.outputs.emplace(name, vals[id]);
  return res;
}

/// Reverse pass. Heads absent from `head_grads` contribute zero gradient.
inline BackwardResult backward(const NetworkSpec& spec, const NetworkState& state, const ForwardCache& cache,
                               const std::map<std::string, Tensor>& head_grads) {
  if (cache.values.size() != spec.nodes().size()) throw Error("backward called without a matching forward cache");
  check_state(spec, state);
  const std::size_t n = cache.batch;
  std::vector<Tensor> grads(spec.nodes().size());
  auto grad_of = [&](NodeId id) -> Tensor& {
    if (grads[id].empty() && grads[id].shape().empty()) grads[id] = Tensor(cache.values[id].shape());
    return grads[id];
  };
  for (const auto& [name, g] : head_grads) {
    NodeId id = spec.nodes().size();
    for (const auto& [hn, hid] : spec.heads())
      if (hn == name) id = hid;
    if (id == spec.nodes().size()) throw Error("gradient for unknown head '" + name + "'");
    Tensor::require_same_shape(g, cache.values[id], "head gradient");
    grad_of(id) += g;
  }

  BackwardResult res;
  res.param_grads = zeros_like(spec);
  for (std::size_t id = spec.nodes().size() - 1; id >= 1; --id) {
    if (grads[id].shape().empty()) continue;  // nothing flows through this node
    const Node& node = spec.nodes()[id];
    const Tensor& gy = grads[id];
    const Tensor& x = cache.values[node.inputs[0]];
    Tensor& gx = grad_of(node.inputs[0]);
    std::visit(
        [&](const auto& op) {
          using T = std::decay_t<decltype(op)>;
          if constexpr (std::is_same_v<T, Dense>) {
            auto& pg = res.param_grads[id];
            detail::dense_backward(op, state.params[id][0], x, gy, pg[0], pg[1], gx, n);
          } else if constexpr (std::is_same_v<T, Conv2D>) {
            auto& pg = res.param_grads[id];
            detail::conv_backward(op, spec.nodes()[node.inputs[0]].shape, node.shape, state.params[id][0], x, gy, pg[0],
                                  pg[1], gx, n);
          } else if constexpr (std::is_same_v<T, Act>) {
            const Tensor& y = cache.values[id];
            for (std::size_t i = 0; i < gy.size(); ++i) {
              switch (op.fn) {
                case Activation::Identity: gx[i] += gy[i]; break;
                case Activation::ReLU: gx[i] += x[i] > 0.0 ? gy[i] : 0.0; break;
                case Activation::Sigmoid: gx[i] += gy[i] * y[i] * (1.0 - y[i]); break;
              }
            }
          } else if constexpr (std::is_same_v<T, Upsample2x>) {
            const Shape& s = spec.nodes()[node.inputs[0]].shape;
            const std::size_t C = s[0], H = s[1], W = s[2];
            for (std::size_t b = 0; b < n * C; ++b)
              for (std::size_t yy = 0; yy < 2 * H; ++yy)
                for (std::size_t xx = 0; xx < 2 * W; ++xx)
                  gx[(b * H + yy / 2) * W + xx / 2] += gy[(b * 2 * H + yy) * 2 * W + xx];
          } else if constexpr (std::is_same_v<T, Reshape>) {
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
          } else if constexpr (std::is_same_v<T, Concat>) {
            Tensor& gx2 = grad_of(node.inputs[1]);
            const std::size_t a = shape_size(spec.nodes()[node.inputs[0]].shape);
            const std::size_t bsz = shape_size(spec.nodes()[node.inputs[1]].shape);
            for (std::size_t s = 0; s < n; ++s) {
              for (std::size_t i = 0; i < a; ++i) gx[s * a + i] += gy[s * (a + bsz) + i];
              for (std::size_t i = 0; i < bsz; ++i) gx2[s * bsz + i] += gy[s * (a + bsz) + a + i];
            }
          }
        },
        node.op);
  }
  res.input_grad = grads[0].shape().empty() ? Tensor(cache.values[0].shape()) : std::move(grads[0]);
  return res;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam update with bias correction; increments the step counter.
inline void adam_step(NetworkState& state, const ParamList& grads, const AdamConfig& cfg) {
  if (grads.size() != state.params.size()) throw ShapeError("gradient list does not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != state.params[i].size()) throw ShapeError("gradient list does not match parameters");
    for (std::size_t k = 0; k < grads[i].size(); ++k) {
      Tensor::require_same_shape(grads[i][k], state.params[i][k], "adam");
      require_finite(grads[i][k], "adam gradient");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    for (std::size_t k = 0; k < grads[i].size(); ++k) {
      auto p = state.params[i][k].data();
      auto m = state.m[i][k].data();
      auto v = state.v[i][k].data();
      auto g = grads[i][k].data();
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        p[j] -= cfg.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
      }
    }
  }
}

/// Flat (name, tensor) view of the parameters: "nNNN.weight" / "nNNN.bias",
/// ordered by node index, ASCII-sorted within a node.
inline std::vector<std::pair<std::string, const Tensor*>> named_params(const NetworkState& state) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "n%03zu.", i);
    const std::size_t nk = state.params[i].size();
    // bias < weight in ASCII order
    for (std::size_t slot : {std::size_t{1}, std::size_t{0}})
      if (slot < nk) out.emplace_back(std::string(buf) + param_name(slot), &state.params[i][slot]);
  }
  return out;
}

}  // namespace qrunc::nn
