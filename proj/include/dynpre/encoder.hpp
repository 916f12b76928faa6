#pragma once

// Window encoder (stacked valid 1D convolutions + linear latent) and the
// mirrored transpose-convolution decoder used by the autoencoder baseline.
//
// Parameter names:
//   conv{1..L}.weight  (C_out, C_in, k)    conv{1..L}.bias  (C_out)
//   fc.weight          (latent, flatten)   fc.bias          (latent)
//   dec.fc.weight      (flatten, latent)   dec.fc.bias      (flatten)
//   dec.tconv{1..L}.weight (C_in, C_out, k)  dec.tconv{1..L}.bias (C_out)
// Flattening is channel-major: feature index = channel * length + position.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynpre/params.hpp"
#include "dynpre/tape.hpp"

namespace dynpre {

enum class EncoderVariant { sim, real };

inline const char* variant_name(EncoderVariant v) { return v == EncoderVariant::sim ? "sim" : "real"; }

inline EncoderVariant parse_variant(const std::string& s) {
  if (s == "sim") return EncoderVariant::sim;
  if (s == "real") return EncoderVariant::real;
  throw std::invalid_argument("unknown encoder variant: " + s);
}

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::sim;
  std::size_t in_channels = 10;
  std::vector<std::size_t> conv_channels{32, 64, 128, 64};
  std::vector<std::size_t> kernel_sizes{4, 4, 3, 2};
  std::size_t latent_dim = 256;
  std::size_t window_length = 20;
  /// Conv layer (1-based) whose post-ReLU output is exposed as the spatial features.
  std::size_t feature_layer = 3;

  static EncoderConfig sim(std::size_t in_channels = 10) { return EncoderConfig{}.with_channels(in_channels); }

  static EncoderConfig real(std::size_t in_channels) {
    EncoderConfig c;
    c.variant = EncoderVariant::real;
    c.in_channels = in_channels;
    c.conv_channels = {64, 128, 200};
    c.kernel_sizes = {4, 4, 3};
    return c;
  }

  EncoderConfig with_channels(std::size_t n) const {
    EncoderConfig c = *this;
    c.in_channels = n;
    return c;
  }

  std::size_t n_layers() const { return conv_channels.size(); }

  /// Length after conv layer `layer` (1-based); layer 0 is the input.
  std::size_t length_after(std::size_t layer) const {
    std::size_t len = window_length;
    for (std::size_t i = 0; i < layer; ++i) len = len - kernel_sizes[i] + 1;
    return len;
  }

  std::size_t flatten_dim() const { return conv_channels.back() * length_after(n_layers()); }
  std::size_t feature_channels() const { return conv_channels[feature_layer - 1]; }
  std::size_t feature_length() const { return length_after(feature_layer); }
  std::size_t feature_dim() const { return feature_channels() * feature_length(); }

  void validate() const {
    if (conv_channels.empty() || conv_channels.size() != kernel_sizes.size()) {
      throw std::invalid_argument("encoder config: channel and kernel lists must be non-empty and of equal length");
    }
    if (in_channels == 0 || latent_dim == 0) throw std::invalid_argument("encoder config: zero-sized layer");
    if (feature_layer < 1 || feature_layer > n_layers()) throw std::invalid_argument("encoder config: bad feature layer");
    std::size_t len = window_length;
    for (std::size_t k : kernel_sizes) {
      if (k == 0 || len < k) {
        throw std::invalid_argument("encoder config: window length " + std::to_string(window_length) +
                                    " incompatible with kernel stack");
      }
      len = len - k + 1;
    }
  }

  nlohmann::json to_json() const {
    return {{"variant", variant_name(variant)}, {"in_channels", in_channels}, {"conv_channels", conv_channels},
            {"kernel_sizes", kernel_sizes},     {"latent_dim", latent_dim},   {"window_length", window_length},
            {"feature_layer", feature_layer}};
  }

  static EncoderConfig from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
    c.kernel_sizes = j.at("kernel_sizes").get<std::vector<std::size_t>>();
    c.latent_dim = j.value("latent_dim", std::size_t{256});
    c.window_length = j.value("window_length", std::size_t{20});
    c.feature_layer = j.value("feature_layer", std::size_t{3});
    c.validate();
    return c;
  }
};

inline std::string conv_name(std::size_t layer, const char* what) {
  return "conv" + std::to_string(layer) + "." + what;
}

/// Orthogonally initialized encoder weights with zero biases.
template <class T>
ParamStore<T> build_encoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore<T> store;
  const InitScheme ortho{InitKind::orthogonal, 1.0};
  std::size_t c_in = cfg.in_channels;
  for (std::size_t l = 0; l < cfg.n_layers(); ++l) {
    const std::size_t c_out = cfg.conv_channels[l];
    store.add(conv_name(l + 1, "weight"), init<T>({c_out, c_in, cfg.kernel_sizes[l]}, ortho, rng));
    store.add(conv_name(l + 1, "bias"), Tensor<T>({c_out}));
    c_in = c_out;
  }
  store.add("fc.weight", init<T>({cfg.latent_dim, cfg.flatten_dim()}, ortho, rng));
  store.add("fc.bias", Tensor<T>({cfg.latent_dim}));
  return store;
}

/// Batched encoder outputs on a tape.
struct EncodedBatch {
  Var z;         // latent x N
  Var features;  // feature_channels x (N * feature_length), post-ReLU
};

/// Encodes N windows laid out as in_channels x (N * window_length).
template <class T>
EncodedBatch encode(Tape<T>& tape, const EncoderConfig& cfg, const Binding<T>& params, Var windows) {
  const auto& x = tape.value(windows);
  if (static_cast<std::size_t>(x.rows()) != cfg.in_channels || x.cols() % cfg.window_length != 0) {
    throw ShapeError("encode: expected " + std::to_string(cfg.in_channels) + " x (N*" +
                     std::to_string(cfg.window_length) + ") input, got " + std::to_string(x.rows()) + "x" +
                     std::to_string(x.cols()));
  }
  EncodedBatch out;
  Var h = windows;
  std::size_t len = cfg.window_length;
  for (std::size_t l = 0; l < cfg.n_layers(); ++l) {
    const std::size_t k = cfg.kernel_sizes[l];
    h = ad::relu(tape, ad::conv1d(tape, h, params[conv_name(l + 1, "weight")], params[conv_name(l + 1, "bias")], len, k));
    len = len - k + 1;
    if (l + 1 == cfg.feature_layer) out.features = h;
  }
  Var flat = ad::windows_to_columns(tape, h, len);
  out.z = ad::linear(tape, flat, params["fc.weight"], params["fc.bias"]);
  return out;
}

/// Latent vector and spatial feature map of one window.
template <class T>
struct LatentPair {
  Tensor<T> z;   // (latent)
  Tensor<T> c3;  // (feature_channels, feature_length)
};

template <class T>
LatentPair<T> encoder_forward(const ParamStore<T>& params, const EncoderConfig& cfg, const Tensor<T>& window) {
  if (window.rank() != 2 || window.dims()[0] != cfg.in_channels || window.dims()[1] != cfg.window_length) {
    throw ShapeError("encoder_forward: window dims " + dims_to_string(window.dims()) + " do not match config");
  }
  Tape<T> tape;
  const auto b = bind(tape, params, false);
  const auto enc = encode(tape, cfg, b, tape.constant(window.as_matrix()));
  return {Tensor<T>::from_matrix(tape.value(enc.z), {cfg.latent_dim}),
          Tensor<T>::from_matrix(tape.value(enc.features), {cfg.feature_channels(), cfg.feature_length()})};
}

inline std::string tconv_name(std::size_t layer, const char* what) {
  return "dec.tconv" + std::to_string(layer) + "." + what;
}

/// Mirror of the sim encoder: linear latent -> flatten, reshape, then transpose
/// convolutions back to in_channels x window_length.
template <class T>
ParamStore<T> build_decoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.variant != EncoderVariant::sim) throw std::invalid_argument("build_decoder: only the sim variant has a decoder");
  ParamStore<T> store;
  const InitScheme ortho{InitKind::orthogonal, 1.0};
  store.add("dec.fc.weight", init<T>({cfg.flatten_dim(), cfg.latent_dim}, ortho, rng));
  store.add("dec.fc.bias", Tensor<T>({cfg.flatten_dim()}));
  const std::size_t n = cfg.n_layers();
  for (std::size_t l = 0; l < n; ++l) {
    const std::size_t src = n - 1 - l;  // encoder layer being mirrored
    const std::size_t c_in = cfg.conv_channels[src];
    const std::size_t c_out = src == 0 ? cfg.in_channels : cfg.conv_channels[src - 1];
    store.add(tconv_name(l + 1, "weight"), init<T>({c_in, c_out, cfg.kernel_sizes[src]}, ortho, rng));
    store.add(tconv_name(l + 1, "bias"), Tensor<T>({c_out}));
  }
  return store;
}

/// Decodes latents (latent x N) into in_channels x (N * window_length). ReLU between
/// transpose convolutions, linear output.
template <class T>
Var decode(Tape<T>& tape, const EncoderConfig& cfg, const Binding<T>& params, Var z) {
  Var flat = ad::linear(tape, z, params["dec.fc.weight"], params["dec.fc.bias"]);
  std::size_t len = cfg.length_after(cfg.n_layers());
  Var h = ad::columns_to_windows(tape, flat, cfg.conv_channels.back(), len);
  const std::size_t n = cfg.n_layers();
  for (std::size_t l = 0; l < n; ++l) {
    const std::size_t k = cfg.kernel_sizes[n - 1 - l];
    h = ad::tconv1d(tape, h, params[tconv_name(l + 1, "weight")], params[tconv_name(l + 1, "bias")], len, k);
    len = len + k - 1;
    if (l + 1 < n) h = ad::relu(tape, h);
  }
  return h;
}

template <class T>
Tensor<T> decoder_forward(const ParamStore<T>& params, const EncoderConfig& cfg, const Tensor<T>& z) {
  if (cfg.variant != EncoderVariant::sim) throw std::invalid_argument("decoder_forward: only the sim variant has a decoder");
  if (z.size() != cfg.latent_dim) throw ShapeError("decoder_forward: latent length mismatch");
  Tape<T> tape;
  const auto b = bind(tape, params, false);
  Var zv = tape.constant(Eigen::Map<const Matrix<T>>(z.data().data(), cfg.latent_dim, 1));
  Var out = decode(tape, cfg, b, zv);
  return Tensor<T>::from_matrix(tape.value(out), {cfg.in_channels, cfg.window_length});
}

}  // namespace dynpre
