#pragma once

// Model persistence: parameters go into a QTN1 container, architecture and
// quantile levels into a JSON sidecar next to it ("<path>.json").
// Optimizer moments are not stored.

#include <filesystem>
#include <string>

#include "json.hpp"
#include "qrunc/bqr.hpp"
#include "qrunc/io.hpp"
#include "qrunc/vae.hpp"

namespace qrunc::io {

using Json = nlohmann::ordered_json;

inline std::filesystem::path sidecar_path(const std::filesystem::path& p) { return p.string() + ".json"; }

inline void append_params(NamedTensors& out, const std::string& prefix, const nn::NetworkState& state) {
  for (const auto& [name, t] : nn::named_params(state)) out.emplace_back(prefix + name, *t);
}

inline void restore_params(const NamedTensors& in, const std::string& prefix, const nn::NetworkSpec& spec,
                           nn::NetworkState& state) {
  state.params = nn::zeros_like(spec);
  state.m = nn::zeros_like(spec);
  state.v = nn::zeros_like(spec);
  state.step = 0;
  std::size_t used = 0;
  NamedTensors expected;
  append_params(expected, prefix, state);
  for (std::size_t i = 0, k = 0; i < state.params.size(); ++i) {
    for (std::size_t slot : {std::size_t{1}, std::size_t{0}}) {
      if (slot >= state.params[i].size()) continue;
      const auto& [name, shape_ref] = expected[k++];
      const Tensor& t = find(in, name);
      if (t.shape() != shape_ref.shape()) throw FormatError("record '" + name + "' has shape " + shape_str(t.shape()));
      state.params[i][slot] = t;
      ++used;
    }
  }
  std::size_t with_prefix = 0;
  for (const auto& [n, t] : in)
    if (n.rfind(prefix, 0) == 0) ++with_prefix;
  if (with_prefix != used) throw FormatError("unexpected records under '" + prefix + "'");
}

inline const char* head_mode_name(vae::HeadMode m) { return m == vae::HeadMode::MeanVar ? "meanvar" : "quantiles"; }

inline vae::HeadMode parse_head_mode(const std::string& s) {
  if (s == "meanvar") return vae::HeadMode::MeanVar;
  if (s == "quantiles") return vae::HeadMode::Quantiles;
  throw FormatError("unknown head_mode '" + s + "'");
}

inline nn::Activation parse_activation(const std::string& s) {
  for (auto a : {nn::Activation::Identity, nn::Activation::ReLU, nn::Activation::Sigmoid})
    if (s == nn::activation_name(a)) return a;
  throw FormatError("unknown activation '" + s + "'");
}

inline Json vae_arch_json(const vae::VaeArch& a) {
  Json j;
  j["kind"] = "vae";
  j["head_mode"] = head_mode_name(a.mode);
  j["alpha_lo"] = a.alpha_lo;
  j["alpha_hi"] = a.alpha_hi;
  j["data_shape"] = a.data_shape;
  j["latent_dim"] = a.latent_dim;
  j["hidden"] = a.hidden;
  j["conv_blocks"] = a.conv_blocks;
  j["base_channels"] = a.base_channels;
  j["output_activation"] = nn::activation_name(a.output_activation);
  return j;
}

inline void save_vae(const std::filesystem::path& p, const vae::VaeModel& m) {
  NamedTensors rec;
  append_params(rec, "encoder/", m.encoder_state);
  append_params(rec, "decoder/", m.decoder_state);
  save_tensors(p, rec);
  write_file(sidecar_path(p), vae_arch_json(m.arch).dump(2) + "\n");
}

inline vae::VaeModel load_vae(const std::filesystem::path& p) {
  vae::VaeArch a;
  try {
    const Json j = Json::parse(read_file(sidecar_path(p)));
    if (j.at("kind") != "vae") throw FormatError("sidecar does not describe a VAE");
    a.mode = parse_head_mode(j.at("head_mode"));
    a.alpha_lo = j.at("alpha_lo");
    a.alpha_hi = j.at("alpha_hi");
    a.data_shape = j.at("data_shape").get<Shape>();
    a.latent_dim = j.at("latent_dim");
    a.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    a.conv_blocks = j.at("conv_blocks");
    a.base_channels = j.at("base_channels");
    a.output_activation = parse_activation(j.at("output_activation"));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("bad model sidecar: ") + e.what());
  }
  auto [enc, dec] = vae::build_networks(a);
  vae::VaeModel m{a, std::move(enc), std::move(dec), {}, {}};
  const NamedTensors rec = load_tensors(p);
  restore_params(rec, "encoder/", m.encoder, m.encoder_state);
  restore_params(rec, "decoder/", m.decoder, m.decoder_state);
  return m;
}

inline void save_seg(const std::filesystem::path& p, const bqr::SegModel& m) {
  NamedTensors rec;
  append_params(rec, "net/", m.state);
  save_tensors(p, rec);
  Json j;
  j["kind"] = "bqr";
  j["levels"] = m.arch.levels;
  j["image_shape"] = m.arch.image_shape;
  j["base_channels"] = m.arch.base_channels;
  write_file(sidecar_path(p), j.dump(2) + "\n");
}

inline bqr::SegModel load_seg(const std::filesystem::path& p) {
  bqr::SegArch a;
  try {
    const Json j = Json::parse(read_file(sidecar_path(p)));
    if (j.at("kind") != "bqr") throw FormatError("sidecar does not describe a segmentation model");
    a.levels = j.at("levels").get<std::vector<double>>();
    a.image_shape = j.at("image_shape").get<Shape>();
    a.base_channels = j.at("base_channels");
  } catch (const Json::exception& e) {
    throw FormatError(std::string("bad model sidecar: ") + e.what());
  }
  bqr::SegModel m{a, bqr::build_seg_network(a), {}};
  restore_params(load_tensors(p), "net/", m.net, m.state);
  return m;
}

}  // namespace qrunc::io
