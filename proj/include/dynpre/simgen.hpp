#pragma once

// Stable VAR transition matrices, VAR simulation, rate-2 undersampling (SVAR)
// and assembly of the pretraining / downstream simulation datasets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "dynpre/dataset.hpp"
#include "dynpre/rng.hpp"

namespace dynpre::sim {

enum SeriesLabel : int { kSvar = 0, kVar = 1 };

/// Largest eigenvalue modulus.
inline double spectral_radius(const Eigen::MatrixXd& a) {
  if (a.size() == 0) return 0.0;
  Eigen::EigenSolver<Eigen::MatrixXd> es(a, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

struct TransitionMatrix {
  Eigen::MatrixXd a;
  std::size_t n_nodes = 0;
  double spectral_radius = 0.0;
  std::uint64_t graph_id = 0;
};

struct TimeSeries {
  Eigen::MatrixXd data;  // channels x T
  int label = kVar;
  std::uint64_t graph_id = 0;
  int rate = 1;

  std::size_t channels() const { return data.rows(); }
  std::size_t length() const { return data.cols(); }
};

/// Random sparse matrix with entries uniform in [-1, 1], rescaled so that its
/// spectral radius equals `spectral_target`.
inline TransitionMatrix gen_stable_transition(std::size_t n_nodes, double density, double spectral_target, Rng& rng,
                                              std::uint64_t graph_id = 0) {
  if (n_nodes < 1) throw std::invalid_argument("gen_stable_transition: n_nodes must be >= 1");
  if (!(spectral_target > 0.0 && spectral_target < 1.0)) {
    throw std::invalid_argument("gen_stable_transition: spectral_target must lie in (0, 1)");
  }
  if (!(density > 0.0 && density <= 1.0)) throw std::invalid_argument("gen_stable_transition: density must lie in (0, 1]");
  const Eigen::Index n = static_cast<Eigen::Index>(n_nodes);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        const double keep = rng.uniform(0.0, 1.0);
        const double value = rng.uniform(-1.0, 1.0);
        if (density >= 1.0 || keep < density) a(i, j) = value;
      }
    }
    const double rho = spectral_radius(a);
    // Nilpotent or empty draws cannot be rescaled.
    if (rho < 1e-8) continue;
    a = (a / rho) * spectral_target;
    return TransitionMatrix{a, n_nodes, spectral_radius(a), graph_id};
  }
  throw std::runtime_error("gen_stable_transition: could not draw a matrix with nonzero spectral radius");
}

struct SimulateOptions {
  std::size_t burn_in = 200;
  /// Forces the first recorded column; burn-in is skipped when set.
  std::optional<Eigen::VectorXd> initial_state;
};

/// x_t = A x_{t-1} + eps_t, eps_t ~ N(0, noise_std^2 I); x_0 drawn from the noise law.
inline TimeSeries simulate_var(const TransitionMatrix& tm, std::size_t length, double noise_std, Rng& rng,
                               const SimulateOptions& opts = {}) {
  if (length < 1) throw std::invalid_argument("simulate_var: length must be >= 1");
  if (noise_std < 0.0) throw std::invalid_argument("simulate_var: noise_std must be >= 0");
  if (!(tm.spectral_radius < 1.0)) throw std::invalid_argument("simulate_var: transition matrix is not stable");
  const Eigen::Index n = tm.a.rows();
  auto noise = [&]() {
    Eigen::VectorXd e(n);
    for (Eigen::Index i = 0; i < n; ++i) e(i) = rng.normal(0.0, noise_std);
    return e;
  };
  Eigen::VectorXd x;
  if (opts.initial_state) {
    if (opts.initial_state->size() != n) throw ShapeError("simulate_var: initial state has wrong length");
    x = *opts.initial_state;
  } else {
    x = noise();
    for (std::size_t t = 0; t < opts.burn_in; ++t) x = tm.a * x + noise();
  }
  TimeSeries ts;
  ts.data.resize(n, static_cast<Eigen::Index>(length));
  ts.data.col(0) = x;
  for (std::size_t t = 1; t < length; ++t) {
    x = tm.a * x + noise();
    ts.data.col(static_cast<Eigen::Index>(t)) = x;
  }
  ts.label = kVar;
  ts.graph_id = tm.graph_id;
  ts.rate = 1;
  return ts;
}

/// Keeps columns 0, rate, 2*rate, ...; marks the result SVAR when rate > 1.
inline TimeSeries undersample(const TimeSeries& ts, int rate) {
  if (rate < 1) throw std::invalid_argument("undersample: rate must be >= 1");
  if (ts.length() < static_cast<std::size_t>(rate)) throw std::invalid_argument("undersample: series shorter than rate");
  if (rate == 1) return ts;
  const std::size_t out_len = (ts.length() + rate - 1) / rate;
  TimeSeries out;
  out.data.resize(ts.data.rows(), static_cast<Eigen::Index>(out_len));
  for (std::size_t t = 0; t < out_len; ++t) out.data.col(t) = ts.data.col(t * rate);
  out.label = kSvar;
  out.graph_id = ts.graph_id;
  out.rate = ts.rate * rate;
  return out;
}

struct SimDatasetSpec {
  std::size_t n_nodes = 10;
  // Pretraining: independent VAR series, each split along time.
  std::size_t n_pretrain_series = 50;
  std::size_t pretrain_length = 20000;
  std::vector<double> pretrain_split{0.7, 0.2, 0.1};
  // Downstream: graphs x series, half VAR / half SVAR, split by subject.
  std::size_t n_graphs = 400;
  std::size_t series_per_graph = 5;
  std::size_t downstream_length = 4000;
  std::vector<double> downstream_split{0.8, 0.1, 0.1};
  double noise_std = 1.0;
  double spectral_target = 0.95;
  double density = 1.0;
  std::size_t burn_in = 200;
  std::size_t window_length = 20;
  std::uint64_t master_seed = 0;

  void validate() const {
    auto check_fractions = [](const std::vector<double>& f, const char* what) {
      if (f.size() != 3) throw std::invalid_argument(std::string(what) + ": need train/val/test fractions");
      double s = 0.0;
      for (double x : f) {
        if (!(x > 0.0)) throw std::invalid_argument(std::string(what) + ": fractions must be positive");
        s += x;
      }
      if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument(std::string(what) + ": fractions must sum to 1");
    };
    check_fractions(pretrain_split, "pretrain_split");
    check_fractions(downstream_split, "downstream_split");
    if (n_nodes < 1 || n_pretrain_series < 1 || pretrain_length < 1 || n_graphs < 1 || series_per_graph < 1 ||
        downstream_length < 1) {
      throw std::invalid_argument("sim spec: all counts must be positive");
    }
    if (downstream_length < window_length) throw std::invalid_argument("sim spec: downstream length below window length");
    if ((n_graphs * series_per_graph) % 2 != 0) throw std::invalid_argument("sim spec: need an even subject count");
  }
};

/// Splits `total` into three parts by fractions; the last part absorbs rounding.
inline std::vector<std::size_t> split_counts(std::size_t total, const std::vector<double>& fractions) {
  const auto a = static_cast<std::size_t>(std::llround(static_cast<double>(total) * fractions[0]));
  const auto b = static_cast<std::size_t>(std::llround(static_cast<double>(total) * fractions[1]));
  if (a + b > total) throw std::invalid_argument("split_counts: fractions exceed total");
  return {a, b, total - a - b};
}

inline Matrix<float> to_float(const Eigen::MatrixXd& m) {
  return m.cast<float>();
}

struct PretrainSet {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Pretraining container: one graph per series; each series cut along time into train/val/test segments.
inline PretrainSet build_pretrain_set(const SimDatasetSpec& spec) {
  spec.validate();
  const auto seg = split_counts(spec.pretrain_length, spec.pretrain_split);
  for (auto s : seg) {
    if (s < 2 * spec.window_length) throw std::invalid_argument("sim spec: pretrain segment shorter than two windows");
  }
  PretrainSet out;
  Dataset* parts[3] = {&out.train, &out.val, &out.test};
  const Split tags[3] = {Split::train, Split::val, Split::test};
  for (int p = 0; p < 3; ++p) {
    parts[p]->channels = spec.n_nodes;
    parts[p]->timepoints = seg[p];
    parts[p]->subjects.resize(spec.n_pretrain_series);
    parts[p]->labels.assign(spec.n_pretrain_series, kVar);
    parts[p]->splits.assign(spec.n_pretrain_series, tags[p]);
  }
  for (std::size_t i = 0; i < spec.n_pretrain_series; ++i) {
    Rng graph_rng(derive_seed(spec.master_seed, {label_tag("pretrain-graph"), i}));
    Rng series_rng(derive_seed(spec.master_seed, {label_tag("pretrain-series"), i}));
    const auto tm = gen_stable_transition(spec.n_nodes, spec.density, spec.spectral_target, graph_rng, i);
    const auto ts = simulate_var(tm, spec.pretrain_length, spec.noise_std, series_rng, {spec.burn_in, std::nullopt});
    std::size_t offset = 0;
    for (int p = 0; p < 3; ++p) {
      parts[p]->subjects[i] = to_float(ts.data.middleCols(offset, seg[p]));
      offset += seg[p];
    }
  }
  return out;
}

/// Downstream container: n_graphs x series_per_graph subjects. Even global
/// subject indices are VAR, odd ones SVAR (a 2T-long VAR undersampled at rate 2).
/// Splits are drawn per class so every split is class balanced.
inline Dataset build_downstream_set(const SimDatasetSpec& spec) {
  spec.validate();
  const std::size_t n = spec.n_graphs * spec.series_per_graph;
  Dataset out;
  out.channels = spec.n_nodes;
  out.timepoints = spec.downstream_length;
  out.subjects.resize(n);
  out.labels.resize(n);
  out.splits.resize(n);
  for (std::size_t g = 0; g < spec.n_graphs; ++g) {
    Rng graph_rng(derive_seed(spec.master_seed, {label_tag("downstream-graph"), g}));
    const auto tm = gen_stable_transition(spec.n_nodes, spec.density, spec.spectral_target, graph_rng, g);
    for (std::size_t s = 0; s < spec.series_per_graph; ++s) {
      const std::size_t i = g * spec.series_per_graph + s;
      Rng series_rng(derive_seed(spec.master_seed, {label_tag("downstream-series"), i}));
      const bool is_var = i % 2 == 0;
      const std::size_t source_len = is_var ? spec.downstream_length : 2 * spec.downstream_length;
      auto ts = simulate_var(tm, source_len, spec.noise_std, series_rng, {spec.burn_in, std::nullopt});
      if (!is_var) ts = undersample(ts, 2);
      if (ts.length() != spec.downstream_length) {
        throw std::logic_error("downstream: SVAR length exceeds simulated source length");
      }
      out.subjects[i] = to_float(ts.data);
      out.labels[i] = ts.label;
    }
  }
  Rng split_rng(derive_seed(spec.master_seed, {label_tag("downstream-split")}));
  for (int label : {kSvar, kVar}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < n; ++i)
      if (out.labels[i] == label) members.push_back(i);
    std::shuffle(members.begin(), members.end(), split_rng.engine());
    const auto counts = split_counts(members.size(), spec.downstream_split);
    for (std::size_t k = 0; k < members.size(); ++k) {
      out.splits[members[k]] = k < counts[0] ? Split::train : (k < counts[0] + counts[1] ? Split::val : Split::test);
    }
  }
  return out;
}

}  // namespace dynpre::sim
