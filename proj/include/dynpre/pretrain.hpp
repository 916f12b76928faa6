#pragma once

// Self-supervised encoder pretraining.
//
// ST-DIM: for a batch of B (anchor, next-window) pairs, two B x B score
// matrices are built with separable critics,
//   global[t][s] = phi(z_t) . psi(c_s)     local[t][s] = psi(c_t) . psi(c_s),
// where z is the encoder latent and c the flattened spatial features of the
// feature layer. Positives sit on the diagonal; every other partner in the
// batch is a negative. The loss is -(InfoNCE(global) + InfoNCE(local)).
//
// Autoencoder baseline: mean-squared reconstruction error through the
// mirrored decoder.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "dynpre/dataset.hpp"
#include "dynpre/encoder.hpp"
#include "dynpre/params.hpp"
#include "dynpre/rng.hpp"
#include "dynpre/tape.hpp"

namespace dynpre {

enum class PretrainMethod { stdim, ae };

inline const char* method_name(PretrainMethod m) { return m == PretrainMethod::stdim ? "stdim" : "ae"; }

inline PretrainMethod parse_method(const std::string& s) {
  if (s == "stdim") return PretrainMethod::stdim;
  if (s == "ae") return PretrainMethod::ae;
  throw std::invalid_argument("unknown pretraining method: " + s);
}

/// Orthogonal gain of both critic maps.
inline constexpr double kCriticGain = 0.1;

/// Bias-free critic embeddings: phi (embed x latent) and psi (embed x feature_dim).
/// psi is shared by the global and local critics.
template <class T>
ParamStore<T> build_critic(const EncoderConfig& cfg, Rng& rng, std::size_t embed_dim = 128, double gain = kCriticGain) {
  ParamStore<T> store;
  const InitScheme ortho{InitKind::orthogonal, gain};
  store.add("phi.weight", init<T>({embed_dim, cfg.latent_dim}, ortho, rng));
  store.add("psi.weight", init<T>({embed_dim, cfg.feature_dim()}, ortho, rng));
  return store;
}

namespace detail {
template <class T>
Eigen::VectorXd embed(const ParamStore<T>& critic, const char* name, const Tensor<T>& x) {
  const Matrix<T> w = critic.at(name).value.as_matrix();
  if (static_cast<std::size_t>(w.cols()) != x.size()) throw ShapeError(std::string(name) + ": input length mismatch");
  const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> v(x.data().data(), x.size());
  return (w * v).template cast<double>();
}
}  // namespace detail

/// phi(z)^T psi(flatten(c3))
template <class T>
double critic_global(const ParamStore<T>& critic, const Tensor<T>& z, const Tensor<T>& c3) {
  return detail::embed(critic, "phi.weight", z).dot(detail::embed(critic, "psi.weight", c3));
}

/// psi(flatten(c3_t))^T psi(flatten(c3_s))
template <class T>
double critic_local(const ParamStore<T>& critic, const Tensor<T>& c3_t, const Tensor<T>& c3_s) {
  return detail::embed(critic, "psi.weight", c3_t).dot(detail::embed(critic, "psi.weight", c3_s));
}

/// InfoNCE estimator of a B x B score matrix with positives on the diagonal.
inline double infonce(const Eigen::MatrixXd& scores) {
  if (!scores.allFinite()) throw NonFiniteError("infonce: non-finite scores");
  Tape<double> tape;
  return tape.value(ad::infonce(tape, tape.constant(scores)))(0, 0);
}

/// Anchor windows and their successors, each in_channels x (B * window_length).
template <class T>
struct PairBatch {
  Matrix<T> anchors;
  Matrix<T> partners;
  std::vector<std::size_t> series;
  std::vector<std::size_t> positions;  // anchor start; partner starts one window later
  std::size_t window_length = 20;

  std::size_t size() const { return series.size(); }

  /// Anchors followed by partners, as one 2B-window block.
  Matrix<T> stacked() const {
    Matrix<T> out(anchors.rows(), anchors.cols() + partners.cols());
    out << anchors, partners;
    return out;
  }

  template <class U>
  PairBatch<U> cast() const {
    return PairBatch<U>{anchors.template cast<U>(), partners.template cast<U>(), series, positions, window_length};
  }
};

/// Draws B anchors uniformly over (series, start) with start <= T - 2L; each
/// partner is the next non-overlapping window of the same series.
inline PairBatch<float> sample_pair_batch(const Dataset& data, std::size_t batch_size, std::size_t window_length,
                                          Rng& rng) {
  if (batch_size < 1) throw std::invalid_argument("sample_pair_batch: batch size must be positive");
  if (data.size() == 0) throw std::invalid_argument("sample_pair_batch: empty dataset");
  if (data.timepoints < 2 * window_length) {
    throw std::invalid_argument("sample_pair_batch: segment of " + std::to_string(data.timepoints) +
                                " points is shorter than two windows");
  }
  const std::size_t last_start = data.timepoints - 2 * window_length;
  PairBatch<float> out;
  out.window_length = window_length;
  out.anchors.resize(data.channels, batch_size * window_length);
  out.partners.resize(data.channels, batch_size * window_length);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t s = rng.index(data.size());
    const std::size_t t = rng.index(last_start + 1);
    out.series.push_back(s);
    out.positions.push_back(t);
    out.anchors.middleCols(b * window_length, window_length) = data.subjects[s].middleCols(t, window_length);
    out.partners.middleCols(b * window_length, window_length) =
        data.subjects[s].middleCols(t + window_length, window_length);
  }
  return out;
}

struct StdimTerms {
  Var loss;
  Var global_scores;
  Var local_scores;
};

/// ST-DIM objective on a tape. `windows` holds B anchors followed by B partners.
template <class T>
StdimTerms stdim_objective(Tape<T>& tape, const EncoderConfig& cfg, const Binding<T>& encoder, const Binding<T>& critic,
                           Var windows, std::size_t batch_size) {
  if (batch_size < 2) throw std::invalid_argument("stdim: batch size must be >= 2");
  const auto enc = encode(tape, cfg, encoder, windows);
  Var feats = ad::windows_to_columns(tape, enc.features, cfg.feature_length());
  Var z_anchor = ad::col_block(tape, enc.z, 0, batch_size);
  Var f_anchor = ad::col_block(tape, feats, 0, batch_size);
  Var f_partner = ad::col_block(tape, feats, batch_size, batch_size);
  Var phi_a = ad::matmul(tape, critic["phi.weight"], z_anchor);
  Var psi_a = ad::matmul(tape, critic["psi.weight"], f_anchor);
  Var psi_p = ad::matmul(tape, critic["psi.weight"], f_partner);
  StdimTerms out;
  out.global_scores = ad::matmul_tn(tape, phi_a, psi_p);
  out.local_scores = ad::matmul_tn(tape, psi_a, psi_p);
  Var estimate = ad::add(tape, ad::infonce(tape, out.global_scores), ad::infonce(tape, out.local_scores));
  out.loss = ad::scale(tape, estimate, T(-1));
  return out;
}

/// -(I_global + I_local) for one batch.
template <class T>
double stdim_loss(const ParamStore<T>& encoder, const ParamStore<T>& critic, const EncoderConfig& cfg,
                  const PairBatch<T>& batch) {
  Tape<T> tape;
  const auto eb = bind(tape, encoder, false);
  const auto cb = bind(tape, critic, false);
  const auto terms = stdim_objective(tape, cfg, eb, cb, tape.constant(batch.stacked()), batch.size());
  return static_cast<double>(tape.value(terms.loss)(0, 0));
}

/// Reconstruction MSE of a batch of windows.
template <class T>
Var ae_objective(Tape<T>& tape, const EncoderConfig& cfg, const Binding<T>& encoder, const Binding<T>& decoder,
                 Var windows) {
  const auto enc = encode(tape, cfg, encoder, windows);
  const Matrix<T> target = tape.value(windows);
  return ad::mse(tape, decode(tape, cfg, decoder, enc.z), target);
}

template <class T>
double ae_loss(const ParamStore<T>& encoder, const ParamStore<T>& decoder, const EncoderConfig& cfg,
               const Tensor<T>& window) {
  Tape<T> tape;
  const auto eb = bind(tape, encoder, false);
  const auto db = bind(tape, decoder, false);
  return static_cast<double>(tape.value(ae_objective(tape, cfg, eb, db, tape.constant(window.as_matrix())))(0, 0));
}

/// Rows whose diagonal entry is the unique row maximum.
template <class T>
std::size_t contrastive_hits(const Matrix<T>& scores) {
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    bool best = true;
    for (Eigen::Index j = 0; j < scores.cols() && best; ++j) {
      if (j != i && scores(i, j) >= scores(i, i)) best = false;
    }
    hits += best ? 1 : 0;
  }
  return hits;
}

/// Fraction of anchors whose true partner gets the top global-critic score in its batch.
template <class T>
double contrastive_accuracy(const ParamStore<T>& encoder, const ParamStore<T>& critic, const EncoderConfig& cfg,
                            const std::vector<PairBatch<T>>& batches) {
  std::size_t hits = 0, total = 0;
  for (const auto& batch : batches) {
    if (batch.size() < 2) throw std::invalid_argument("contrastive_accuracy: batches need B >= 2");
    Tape<T> tape;
    const auto eb = bind(tape, encoder, false);
    const auto cb = bind(tape, critic, false);
    const auto terms = stdim_objective(tape, cfg, eb, cb, tape.constant(batch.stacked()), batch.size());
    hits += contrastive_hits(tape.value(terms.global_scores));
    total += batch.size();
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

struct PretrainConfig {
  std::size_t batch_size = 64;
  double lr = 3e-4;
  std::size_t epochs = 100;
  std::size_t steps_per_epoch = 200;
  std::size_t val_batches = 16;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double metric = 0.0;  // contrastive accuracy (stdim) or reconstruction MSE (ae), on validation
};

struct PretrainResult {
  EncoderConfig config;
  PretrainMethod method = PretrainMethod::stdim;
  ParamStore<float> encoder;  // best validation checkpoint
  ParamStore<float> critic;
  ParamStore<float> decoder;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  bool diverged = false;
  std::string message;
};

/// Validation score for one method; higher is better after sign handling in pretrain().
inline std::pair<double, double> evaluate_pretraining(PretrainMethod method, const EncoderConfig& cfg,
                                                      const ParamStore<float>& encoder, const ParamStore<float>& critic,
                                                      const ParamStore<float>& decoder,
                                                      const std::vector<PairBatch<float>>& val) {
  double loss = 0.0;
  std::size_t hits = 0, total = 0;
  for (const auto& batch : val) {
    Tape<float> tape;
    const auto eb = bind(tape, encoder, false);
    Var windows = tape.constant(batch.stacked());
    if (method == PretrainMethod::stdim) {
      const auto cb = bind(tape, critic, false);
      const auto terms = stdim_objective(tape, cfg, eb, cb, windows, batch.size());
      loss += tape.value(terms.loss)(0, 0);
      hits += contrastive_hits(tape.value(terms.global_scores));
      total += batch.size();
    } else {
      const auto db = bind(tape, decoder, false);
      loss += tape.value(ae_objective(tape, cfg, eb, db, windows))(0, 0);
    }
  }
  loss /= static_cast<double>(std::max<std::size_t>(val.size(), 1));
  const double metric = method == PretrainMethod::stdim ? static_cast<double>(hits) / static_cast<double>(total) : loss;
  return {loss, metric};
}

/// Adam pretraining with fixed-step epochs. The returned encoder is the epoch with the
/// best validation metric (highest contrastive accuracy, or lowest reconstruction MSE).
/// A non-finite loss stops training and keeps the last good checkpoint.
inline PretrainResult pretrain(PretrainMethod method, const EncoderConfig& cfg, const Dataset& train,
                               const Dataset& val, const PretrainConfig& pc, std::uint64_t seed,
                               const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (train.channels != cfg.in_channels || val.channels != cfg.in_channels) {
    throw ShapeError("pretrain: dataset channels do not match encoder input channels");
  }
  if (pc.batch_size < 2) throw std::invalid_argument("pretrain: batch size must be >= 2");
  Rng init_rng(derive_seed(seed, {label_tag("pretrain-init")}));
  Rng batch_rng(derive_seed(seed, {label_tag("pretrain-batches")}));
  Rng val_rng(derive_seed(seed, {label_tag("pretrain-val")}));

  PretrainResult result;
  result.config = cfg;
  result.method = method;
  ParamStore<float> encoder = build_encoder<float>(cfg, init_rng);
  ParamStore<float> critic = build_critic<float>(cfg, init_rng);
  ParamStore<float> decoder;
  if (method == PretrainMethod::ae) decoder = build_decoder<float>(cfg, init_rng);

  std::vector<PairBatch<float>> val_batches;
  for (std::size_t i = 0; i < pc.val_batches; ++i)
    val_batches.push_back(sample_pair_batch(val, pc.batch_size, cfg.window_length, val_rng));

  const AdamConfig adam{pc.lr};
  double best = -std::numeric_limits<double>::infinity();
  result.encoder = encoder.cast<float>();
  result.critic = critic.cast<float>();
  result.decoder = decoder.cast<float>();

  for (std::size_t epoch = 1; epoch <= pc.epochs; ++epoch) {
    double train_loss = 0.0;
    try {
      for (std::size_t step = 0; step < pc.steps_per_epoch; ++step) {
        const auto batch = sample_pair_batch(train, pc.batch_size, cfg.window_length, batch_rng);
        Tape<float> tape;
        const auto eb = bind(tape, encoder, true);
        Var windows = tape.constant(batch.stacked());
        encoder.zero_grad();
        if (method == PretrainMethod::stdim) {
          const auto cb = bind(tape, critic, true);
          const auto terms = stdim_objective(tape, cfg, eb, cb, windows, batch.size());
          train_loss += tape.value(terms.loss)(0, 0);
          tape.backward(terms.loss);
          critic.zero_grad();
          accumulate_grads(tape, eb, encoder);
          accumulate_grads(tape, cb, critic);
          adam_step(encoder, adam);
          adam_step(critic, adam);
        } else {
          const auto db = bind(tape, decoder, true);
          Var loss = ae_objective(tape, cfg, eb, db, windows);
          train_loss += tape.value(loss)(0, 0);
          tape.backward(loss);
          decoder.zero_grad();
          accumulate_grads(tape, eb, encoder);
          accumulate_grads(tape, db, decoder);
          adam_step(encoder, adam);
          adam_step(decoder, adam);
        }
      }
    } catch (const NonFiniteError& e) {
      result.diverged = true;
      result.message = std::string("diverged in epoch ") + std::to_string(epoch) + ": " + e.what();
      break;
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = train_loss / static_cast<double>(pc.steps_per_epoch);
    std::tie(entry.val_loss, entry.metric) = evaluate_pretraining(method, cfg, encoder, critic, decoder, val_batches);
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    const double score = method == PretrainMethod::stdim ? entry.metric : -entry.metric;
    if (score > best) {
      best = score;
      result.best_epoch = epoch;
      result.encoder = encoder.cast<float>();
      result.critic = critic.cast<float>();
      result.decoder = decoder.cast<float>();
    }
  }
  return result;
}

}  // namespace dynpre
