#pragma once

// Whole-sequence classification: each subject is cut into windows, every
// window is encoded to a latent vector, and a bidirectional LSTM runs over the
// latent sequence. The last forward and last backward hidden states are
// concatenated and classified by dense(2H -> 200, ReLU) -> dense(200 -> 2).
//
// Batches are laid out time-major: window s of batch member b is column
// block s * B + b, so one LSTM step reads a contiguous block of B columns.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynpre/dataset.hpp"
#include "dynpre/encoder.hpp"
#include "dynpre/metrics.hpp"
#include "dynpre/params.hpp"
#include "dynpre/rng.hpp"
#include "dynpre/tape.hpp"

namespace dynpre {

struct WindowingRule {
  std::size_t window_length = 20;
  double overlap = 0.0;  // fraction of a window shared by neighbours, in [0, 1)

  std::size_t stride() const {
    const auto s = static_cast<std::size_t>(std::llround(static_cast<double>(window_length) * (1.0 - overlap)));
    return std::max<std::size_t>(s, 1);
  }

  std::size_t count(std::size_t timepoints) const {
    if (timepoints < window_length) {
      throw std::invalid_argument("windowing: " + std::to_string(timepoints) + " time points is shorter than one window");
    }
    return (timepoints - window_length) / stride() + 1;
  }
};

/// Windows in temporal order; a trailing remainder shorter than the stride is dropped.
template <class T>
std::vector<Matrix<T>> make_windows(const Matrix<T>& subject, const WindowingRule& rule) {
  const std::size_t n = rule.count(subject.cols());
  std::vector<Matrix<T>> out;
  out.reserve(n);
  for (std::size_t w = 0; w < n; ++w) out.emplace_back(subject.middleCols(w * rule.stride(), rule.window_length));
  return out;
}

/// Windows of several subjects, time-major: C x (S * B * L).
inline Matrix<float> batch_windows(const Dataset& data, const std::vector<std::size_t>& ids, const WindowingRule& rule) {
  const std::size_t steps = rule.count(data.timepoints);
  const std::size_t batch = ids.size();
  const std::size_t len = rule.window_length;
  Matrix<float> out(data.channels, steps * batch * len);
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t b = 0; b < batch; ++b) {
      out.middleCols((s * batch + b) * len, len) = data.subjects[ids[b]].middleCols(s * rule.stride(), len);
    }
  }
  return out;
}

struct HeadConfig {
  std::size_t input_dim = 256;
  std::size_t hidden = 200;
  std::size_t dense = 200;
  std::size_t classes = 2;
};

/// biLSTM + dense head, Xavier-initialized with `gain`; biases zero.
template <class T>
ParamStore<T> build_head(const HeadConfig& cfg, double gain, Rng& rng) {
  const InitScheme xavier{InitKind::xavier, gain};
  ParamStore<T> store;
  for (const char* dir : {"lstm_f", "lstm_b"}) {
    const std::string p(dir);
    store.add(p + ".weight_ih", init<T>({4 * cfg.hidden, cfg.input_dim}, xavier, rng));
    store.add(p + ".weight_hh", init<T>({4 * cfg.hidden, cfg.hidden}, xavier, rng));
    store.add(p + ".bias", Tensor<T>({4 * cfg.hidden}));
  }
  store.add("fc1.weight", init<T>({cfg.dense, 2 * cfg.hidden}, xavier, rng));
  store.add("fc1.bias", Tensor<T>({cfg.dense}));
  store.add("fc2.weight", init<T>({cfg.classes, cfg.dense}, xavier, rng));
  store.add("fc2.bias", Tensor<T>({cfg.classes}));
  return store;
}

/// Runs one LSTM direction over `steps` blocks of `batch` columns and returns the last hidden state.
template <class T>
Var lstm_last_state(Tape<T>& tape, const Binding<T>& head, const std::string& prefix, Var sequence,
                    std::size_t steps, std::size_t batch, bool reverse) {
  Var proj = ad::linear(tape, sequence, head[prefix + ".weight_ih"], head[prefix + ".bias"]);
  return ad::lstm_sequence(tape, proj, head[prefix + ".weight_hh"], steps, batch, reverse);
}

/// [h_forward_last; h_backward_last] (2H x B). Passing the same prefix twice ties the cells.
template <class T>
Var bilstm_features(Tape<T>& tape, const Binding<T>& head, Var sequence, std::size_t steps, std::size_t batch,
                    const std::string& forward_prefix = "lstm_f", const std::string& backward_prefix = "lstm_b") {
  if (steps == 0) throw std::invalid_argument("bilstm: empty window sequence");
  Var hf = lstm_last_state(tape, head, forward_prefix, sequence, steps, batch, false);
  Var hb = lstm_last_state(tape, head, backward_prefix, sequence, steps, batch, true);
  return ad::concat_rows(tape, hf, hb);
}

/// Logits (classes x B) from a latent sequence (input_dim x S*B).
template <class T>
Var head_forward(Tape<T>& tape, const Binding<T>& head, Var sequence, std::size_t steps, std::size_t batch) {
  Var feats = bilstm_features(tape, head, sequence, steps, batch);
  Var hidden = ad::relu(tape, ad::linear(tape, feats, head["fc1.weight"], head["fc1.bias"]));
  return ad::linear(tape, hidden, head["fc2.weight"], head["fc2.bias"]);
}

enum class Regime { fpt, ufpt, npt };

inline const char* regime_name(Regime r) {
  switch (r) {
    case Regime::fpt: return "FPT";
    case Regime::ufpt: return "UFPT";
    case Regime::npt: return "NPT";
  }
  return "?";
}

inline Regime parse_regime(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (s == "fpt") return Regime::fpt;
  if (s == "ufpt") return Regime::ufpt;
  if (s == "npt") return Regime::npt;
  throw std::invalid_argument("unknown regime: " + s);
}

struct DownstreamModel {
  EncoderConfig encoder_config;
  ParamStore<float> encoder;
  HeadConfig head_config;
  ParamStore<float> head;
};

/// Logits (2 x B) for subjects `ids`. When `latents` is given (one input_dim x S matrix per
/// subject, indexed like the dataset) the encoder is skipped.
inline Var model_forward(Tape<float>& tape, const DownstreamModel& model, const Binding<float>& encoder,
                         const Binding<float>& head, const Dataset& data, const std::vector<std::size_t>& ids,
                         const WindowingRule& rule, const std::vector<Matrix<float>>* latents = nullptr) {
  const std::size_t steps = rule.count(data.timepoints);
  const std::size_t batch = ids.size();
  Var sequence;
  if (latents) {
    Matrix<float> z(model.head_config.input_dim, steps * batch);
    for (std::size_t s = 0; s < steps; ++s)
      for (std::size_t b = 0; b < batch; ++b) z.col(s * batch + b) = (*latents)[ids[b]].col(s);
    sequence = tape.constant(std::move(z));
  } else {
    sequence = encode(tape, model.encoder_config, encoder, tape.constant(batch_windows(data, ids, rule))).z;
  }
  return head_forward(tape, head, sequence, steps, batch);
}

/// Logits of a single subject.
inline std::vector<double> subject_forward(const DownstreamModel& model, const Matrix<float>& subject,
                                           const WindowingRule& rule) {
  if (static_cast<std::size_t>(subject.cols()) < rule.window_length) {
    throw std::invalid_argument("subject_forward: subject shorter than one window");
  }
  Dataset one;
  one.channels = subject.rows();
  one.timepoints = subject.cols();
  one.subjects = {subject};
  one.splits = {Split::test};
  Tape<float> tape;
  const auto eb = bind(tape, model.encoder, false);
  const auto hb = bind(tape, model.head, false);
  const auto& logits = tape.value(model_forward(tape, model, eb, hb, one, {0}, rule));
  std::vector<double> out(logits.rows());
  for (Eigen::Index k = 0; k < logits.rows(); ++k) out[k] = logits(k, 0);
  return out;
}

/// Encoder latents (input_dim x S) for the given subjects; other slots stay empty.
inline std::vector<Matrix<float>> encode_subjects(const DownstreamModel& model, const Dataset& data,
                                                  const std::vector<std::size_t>& ids, const WindowingRule& rule,
                                                  std::size_t chunk = 32) {
  std::vector<Matrix<float>> out(data.size());
  const std::size_t steps = rule.count(data.timepoints);
  for (std::size_t start = 0; start < ids.size(); start += chunk) {
    const std::vector<std::size_t> part(ids.begin() + start, ids.begin() + std::min(ids.size(), start + chunk));
    Tape<float> tape;
    const auto eb = bind(tape, model.encoder, false);
    const auto& z = tape.value(encode(tape, model.encoder_config, eb, tape.constant(batch_windows(data, part, rule))).z);
    for (std::size_t b = 0; b < part.size(); ++b) {
      Matrix<float> zs(z.rows(), steps);
      for (std::size_t s = 0; s < steps; ++s) zs.col(s) = z.col(s * part.size() + b);
      out[part[b]] = std::move(zs);
    }
  }
  return out;
}

/// Per-subject score logit[1] - logit[0], plus the mean cross-entropy over those subjects.
struct Predictions {
  std::vector<double> scores;
  double loss = 0.0;
};

inline Predictions predict(const DownstreamModel& model, const Dataset& data, const std::vector<std::size_t>& ids,
                           const WindowingRule& rule, const std::vector<Matrix<float>>* latents = nullptr,
                           std::size_t chunk = 32) {
  Predictions out;
  for (std::size_t start = 0; start < ids.size(); start += chunk) {
    const std::vector<std::size_t> part(ids.begin() + start, ids.begin() + std::min(ids.size(), start + chunk));
    Tape<float> tape;
    const auto eb = bind(tape, model.encoder, false);
    const auto hb = bind(tape, model.head, false);
    const auto& logits = tape.value(model_forward(tape, model, eb, hb, data, part, rule, latents));
    for (std::size_t b = 0; b < part.size(); ++b) {
      const double l0 = logits(0, b), l1 = logits(1, b);
      out.scores.push_back(l1 - l0);
      if (data.has_labels()) {
        const double m = std::max(l0, l1);
        const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
        out.loss += lse - (data.labels[part[b]] == 1 ? l1 : l0);
      }
    }
  }
  if (!ids.empty()) out.loss /= static_cast<double>(ids.size());
  return out;
}

inline std::vector<double> predict_scores(const DownstreamModel& model, const Dataset& data,
                                          const std::vector<std::size_t>& ids, const WindowingRule& rule) {
  return predict(model, data, ids, rule).scores;
}

struct DownstreamConfig {
  std::size_t batch_size = 16;
  double lr = 3e-4;
  std::size_t max_epochs = 500;
  /// Stop after this many epochs without a better validation AUC.
  std::size_t patience = 50;
  double clip_norm = 5.0;
  bool plateau = false;
  PlateauConfig plateau_config{};
  double gain = 0.5;
  WindowingRule rule{};
  std::size_t eval_chunk = 32;
};

struct TrialResult {
  Regime regime = Regime::fpt;
  std::string pretrain = "stdim";  // encoder source: stdim, ae, none
  std::size_t n_train = 0;         // per class
  std::uint64_t seed = 0;
  std::size_t trial = 0;
  double gain = 0.5;
  double test_auc = 0.0;
  double test_accuracy = 0.0;
  double val_auc = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;

  /// Row key for summaries: regime name, suffixed with the encoder source when it is not ST-DIM.
  std::string label() const {
    std::string s = regime_name(regime);
    if (regime != Regime::npt && pretrain != "stdim") s += "-" + pretrain;
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    return s;
  }
};

struct StepInfo {
  std::size_t epoch = 0;
  double loss = 0.0;
  double encoder_grad_norm = 0.0;
};

struct TrainOutcome {
  DownstreamModel model;  // best-validation snapshot
  TrialResult result;
  std::vector<std::size_t> train_ids;
  std::vector<std::size_t> val_ids;
  std::vector<std::size_t> test_ids;
};

/// Draws n_per_class training subjects of each label from the train split.
inline std::vector<std::size_t> sample_training_subjects(const Dataset& data, std::size_t n_per_class, Rng& rng) {
  if (!data.has_labels()) throw std::invalid_argument("downstream training needs labels");
  if (n_per_class == 0) throw std::invalid_argument("n_train must be positive");
  std::vector<std::size_t> out;
  for (int label : {0, 1}) {
    auto pool = data.indices(Split::train, label);
    if (pool.empty()) throw std::invalid_argument("class " + std::to_string(label) + " absent from the training split");
    if (pool.size() < n_per_class) {
      throw std::invalid_argument("n_train " + std::to_string(n_per_class) + " exceeds the " +
                                  std::to_string(pool.size()) + " training subjects of class " + std::to_string(label));
    }
    std::shuffle(pool.begin(), pool.end(), rng.engine());
    out.insert(out.end(), pool.begin(), pool.begin() + n_per_class);
  }
  return out;
}

/// Trains the head (and, unless frozen, the encoder) on n_per_class subjects per class.
/// `pretrained` is required for FPT/UFPT and ignored for NPT. `sample_seed` picks the
/// training subjects, `seed` drives initialization and batch order.
inline TrainOutcome train_downstream(Regime regime, const EncoderConfig& encoder_config,
                                     const ParamStore<float>* pretrained, const Dataset& data,
                                     std::size_t n_per_class, const DownstreamConfig& cfg, std::uint64_t seed,
                                     std::uint64_t sample_seed,
                                     const std::function<void(const StepInfo&)>& on_step = {}) {
  data.validate();
  if (data.channels != encoder_config.in_channels) {
    throw ShapeError("train_downstream: dataset has " + std::to_string(data.channels) + " channels, encoder expects " +
                     std::to_string(encoder_config.in_channels));
  }
  if (regime != Regime::npt && pretrained == nullptr) {
    throw std::invalid_argument(std::string(regime_name(regime)) + " needs a pretrained encoder");
  }
  Rng sample_rng(sample_seed);
  Rng init_rng(derive_seed(seed, {label_tag("downstream-init")}));
  Rng order_rng(derive_seed(seed, {label_tag("downstream-order")}));

  TrainOutcome out;
  out.train_ids = sample_training_subjects(data, n_per_class, sample_rng);
  out.val_ids = data.indices(Split::val);
  out.test_ids = data.indices(Split::test);
  if (out.val_ids.empty() || out.test_ids.empty()) throw std::invalid_argument("dataset needs val and test subjects");

  DownstreamModel model;
  model.encoder_config = encoder_config;
  model.encoder = regime == Regime::npt ? build_encoder<float>(encoder_config, init_rng) : pretrained->cast<float>();
  model.head_config.input_dim = encoder_config.latent_dim;
  model.head = build_head<float>(model.head_config, cfg.gain, init_rng);

  const bool frozen = regime == Regime::fpt;
  std::optional<std::vector<Matrix<float>>> latents;
  if (frozen) {
    std::vector<std::size_t> all = out.train_ids;
    all.insert(all.end(), out.val_ids.begin(), out.val_ids.end());
    all.insert(all.end(), out.test_ids.begin(), out.test_ids.end());
    latents = encode_subjects(model, data, all, cfg.rule, cfg.eval_chunk);
  }
  const auto* cache = latents ? &*latents : nullptr;

  std::vector<int> val_labels;
  for (auto i : out.val_ids) val_labels.push_back(data.labels[i]);

  AdamConfig adam{cfg.lr};
  PlateauScheduler scheduler(cfg.lr, cfg.plateau_config);
  const std::size_t batch_size = std::max<std::size_t>(1, std::min(cfg.batch_size, out.train_ids.size()));

  DownstreamModel best = model;
  double best_auc = -1.0, best_loss = std::numeric_limits<double>::infinity();
  std::size_t stagnant = 0;
  std::vector<std::size_t> order = out.train_ids;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng.engine());
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::vector<std::size_t> ids(order.begin() + start, order.begin() + std::min(order.size(), start + batch_size));
      std::vector<int> labels;
      for (auto i : ids) labels.push_back(data.labels[i]);
      Tape<float> tape;
      const auto eb = bind(tape, model.encoder, !frozen);
      const auto hb = bind(tape, model.head, true);
      Var loss = ad::softmax_xent(tape, model_forward(tape, model, eb, hb, data, ids, cfg.rule, cache), labels);
      tape.backward(loss);
      model.head.zero_grad();
      model.encoder.zero_grad();
      accumulate_grads(tape, hb, model.head);
      if (!frozen) accumulate_grads(tape, eb, model.encoder);
      const double enc_norm = grad_norm<float>({&model.encoder});
      if (cfg.clip_norm > 0) clip_grad_norm<float>({&model.head, &model.encoder}, cfg.clip_norm);
      adam_step(model.head, adam);
      if (!frozen) adam_step(model.encoder, adam);
      if (on_step) on_step(StepInfo{epoch, static_cast<double>(tape.value(loss)(0, 0)), enc_norm});
    }
    const auto val = predict(model, data, out.val_ids, cfg.rule, cache, cfg.eval_chunk);
    const double val_auc = auc(val.scores, val_labels);
    out.result.epochs_run = epoch;
    if (cfg.plateau) adam.lr = scheduler.step(val.loss);
    if (val_auc > best_auc || (val_auc == best_auc && val.loss < best_loss)) {
      best_auc = val_auc;
      best_loss = val.loss;
      best = model;
      out.result.best_epoch = epoch;
      stagnant = 0;
    } else if (++stagnant >= cfg.patience) {
      break;
    }
  }

  std::vector<int> test_labels;
  for (auto i : out.test_ids) test_labels.push_back(data.labels[i]);
  const auto test = predict(best, data, out.test_ids, cfg.rule, cache, cfg.eval_chunk);
  out.result.regime = regime;
  out.result.n_train = n_per_class;
  out.result.seed = seed;
  out.result.gain = cfg.gain;
  out.result.val_auc = best_auc;
  out.result.test_auc = auc(test.scores, test_labels);
  out.result.test_accuracy = accuracy(test.scores, test_labels);
  out.result.pretrain = regime == Regime::npt ? "none" : "stdim";
  out.model = std::move(best);
  return out;
}

/// Window-level diagnostic: a linear classifier (latent -> 2) on frozen encoder
/// outputs, each window labeled with its subject's class.
struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double test_auc = 0.0;
  std::size_t train_windows = 0;
  std::size_t test_windows = 0;
};

inline ProbeResult linear_probe(const EncoderConfig& encoder_config, const ParamStore<float>& encoder,
                                const Dataset& data, const std::vector<std::size_t>& train_ids,
                                const std::vector<std::size_t>& test_ids, const WindowingRule& rule,
                                std::uint64_t seed, std::size_t epochs = 200, double lr = 1e-2) {
  DownstreamModel model;
  model.encoder_config = encoder_config;
  model.encoder = encoder.cast<float>();
  std::vector<std::size_t> all = train_ids;
  all.insert(all.end(), test_ids.begin(), test_ids.end());
  const auto latents = encode_subjects(model, data, all, rule);
  auto gather = [&](const std::vector<std::size_t>& ids, std::vector<int>& labels) {
    std::size_t cols = 0;
    for (auto i : ids) cols += latents[i].cols();
    Matrix<float> z(encoder_config.latent_dim, cols);
    std::size_t at = 0;
    for (auto i : ids) {
      z.middleCols(at, latents[i].cols()) = latents[i];
      at += latents[i].cols();
      labels.insert(labels.end(), latents[i].cols(), data.labels[i]);
    }
    return z;
  };
  std::vector<int> train_labels, test_labels;
  const Matrix<float> z_train = gather(train_ids, train_labels);
  const Matrix<float> z_test = gather(test_ids, test_labels);

  Rng rng(derive_seed(seed, {label_tag("probe-init")}));
  ParamStore<float> probe;
  probe.add("probe.weight", init<float>({2, encoder_config.latent_dim}, InitScheme{InitKind::xavier, 1.0}, rng));
  probe.add("probe.bias", Tensor<float>({2}));
  const AdamConfig adam{lr};
  for (std::size_t e = 0; e < epochs; ++e) {
    Tape<float> tape;
    const auto b = bind(tape, probe, true);
    Var loss = ad::softmax_xent(tape, ad::linear(tape, tape.constant(z_train), b["probe.weight"], b["probe.bias"]),
                                train_labels);
    tape.backward(loss);
    probe.zero_grad();
    accumulate_grads(tape, b, probe);
    adam_step(probe, adam);
  }
  auto scores = [&](const Matrix<float>& z) {
    Tape<float> tape;
    const auto b = bind(tape, probe, false);
    const auto& logits = tape.value(ad::linear(tape, tape.constant(z), b["probe.weight"], b["probe.bias"]));
    std::vector<double> out(logits.cols());
    for (Eigen::Index j = 0; j < logits.cols(); ++j) out[j] = static_cast<double>(logits(1, j)) - logits(0, j);
    return out;
  };
  ProbeResult r;
  r.train_windows = train_labels.size();
  r.test_windows = test_labels.size();
  r.train_accuracy = accuracy(scores(z_train), train_labels);
  const auto test_scores = scores(z_test);
  r.test_accuracy = accuracy(test_scores, test_labels);
  r.test_auc = auc(test_scores, test_labels);
  return r;
}

}  // namespace dynpre
