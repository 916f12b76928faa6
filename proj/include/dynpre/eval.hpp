#pragma once

// Experiment grid over (regime, n_train, trial), the Xavier gain sweep,
// per-cell summaries, and the central-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynpre/downstream.hpp"
#include "dynpre/metrics.hpp"
#include "dynpre/params.hpp"
#include "dynpre/rng.hpp"
#include "dynpre/tape.hpp"

namespace dynpre {

// ---------------------------------------------------------------------------
// Gradient oracle

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t checked = 0;  // scalar entries perturbed
};

using LossBuilder = std::function<Var(Tape<double>&, const Binding<double>&)>;

/// Central differences against reverse-mode gradients for every entry of every
/// parameter. Error per parameter tensor: |analytic - numeric| / max(|analytic|, |numeric|)
/// in L2 norm, with both-zero counted as exact agreement.
inline GradCheckReport finite_diff_check(ParamStore<double>& params, const LossBuilder& loss, double h = 1e-4,
                                         double tol = 1e-4) {
  GradCheckReport report;
  auto evaluate = [&]() {
    Tape<double> tape;
    const auto b = bind(tape, params, false);
    return tape.value(loss(tape, b))(0, 0);
  };
  Tape<double> tape;
  const auto b = bind(tape, params, true);
  const Var root = loss(tape, b);
  tape.backward(root);
  for (auto& [name, p] : params) {
    const Matrix<double> analytic = tape.grad(b[name]);
    Matrix<double> numeric(analytic.rows(), analytic.cols());
    auto w = p.value.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + h;
      const double up = evaluate();
      w[i] = saved - h;
      const double down = evaluate();
      w[i] = saved;
      numeric.data()[i] = (up - down) / (2.0 * h);
      ++report.checked;
    }
    const double scale = std::max(analytic.norm(), numeric.norm());
    const double err = scale == 0.0 ? 0.0 : (analytic - numeric).norm() / scale;
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_param = name;
    }
    if (!(err < tol)) report.passed = false;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Grid

struct GridSpec {
  std::vector<Regime> regimes{Regime::fpt, Regime::ufpt, Regime::npt};
  std::vector<std::size_t> n_train{8, 16, 32, 64, 128};
  std::size_t trials = 10;
  bool gain_sweep = false;
  std::string pretrain = "stdim";  // label of the encoder checkpoint used by FPT/UFPT

  void validate() const {
    if (trials < 1) throw std::invalid_argument("grid: trials must be >= 1");
    if (regimes.empty() || n_train.empty()) throw std::invalid_argument("grid: empty regime or n_train list");
    if (!std::is_sorted(n_train.begin(), n_train.end())) throw std::invalid_argument("grid: n_train must be ascending");
  }
};

/// One (regime, n_train, trial) job. `sample_seed` picks the training subjects and is
/// shared across regimes so cells compare on identical samples; `seed` drives init/order.
struct TrialJob {
  Regime regime;
  std::size_t n_train;
  std::size_t trial;
  std::uint64_t seed;
  std::uint64_t sample_seed;
  double gain;
};

using TrialRunner = std::function<TrialResult(const TrialJob&)>;

inline TrialJob make_job(std::uint64_t master_seed, const std::string& pretrain, Regime regime, std::size_t n_train,
                         std::size_t trial, double gain) {
  TrialJob job{regime, n_train, trial, 0, 0, gain};
  job.sample_seed = derive_seed(master_seed, {label_tag("sample"), n_train, trial});
  job.seed = derive_seed(master_seed, {label_tag(regime_name(regime)), label_tag(pretrain), n_train, trial});
  return job;
}

/// Runs every (regime, n_train, trial) cell in a fixed order.
inline std::vector<TrialResult> run_grid(const GridSpec& grid, const TrialRunner& runner, std::uint64_t master_seed,
                                         const std::map<Regime, double>& gains = {},
                                         const std::function<void(const TrialResult&)>& on_result = {}) {
  grid.validate();
  std::vector<TrialResult> rows;
  for (Regime regime : grid.regimes) {
    const auto g = gains.find(regime);
    const double gain = g == gains.end() ? 0.5 : g->second;
    for (std::size_t n : grid.n_train) {
      for (std::size_t trial = 0; trial < grid.trials; ++trial) {
        TrialResult r = runner(make_job(master_seed, grid.pretrain, regime, n, trial, gain));
        r.trial = trial;
        rows.push_back(r);
        if (on_result) on_result(r);
      }
    }
  }
  return rows;
}

/// Candidate Xavier gains 0.05, 0.10, ..., 1.00.
inline std::vector<double> gain_candidates() {
  std::vector<double> out;
  for (int k = 1; k <= 20; ++k) out.push_back(0.05 * k);
  return out;
}

struct GainSweepResult {
  double best_gain = 0.05;
  std::vector<double> gains;
  std::vector<double> median_val_auc;
  std::size_t runs = 0;
};

/// Evaluates `experiments` validation runs per candidate gain and keeps the gain with the
/// best median; ties go to the smaller gain. `validate(gain, experiment)` returns a validation AUC.
inline GainSweepResult gain_sweep(const std::function<double(double, std::size_t)>& validate,
                                  std::size_t experiments = 10) {
  GainSweepResult out;
  out.gains = gain_candidates();
  double best = -std::numeric_limits<double>::infinity();
  for (double gain : out.gains) {
    std::vector<double> aucs;
    for (std::size_t e = 0; e < experiments; ++e) {
      aucs.push_back(validate(gain, e));
      ++out.runs;
    }
    const double m = median(aucs);
    out.median_val_auc.push_back(m);
    if (m > best) {
      best = m;
      out.best_gain = gain;
    }
  }
  return out;
}

/// Encoders available to a grid: FPT/UFPT use `pretrained`, NPT draws fresh weights.
struct GridInputs {
  const Dataset* data = nullptr;
  EncoderConfig encoder_config;
  const ParamStore<float>* pretrained = nullptr;
  std::string pretrain = "stdim";
  DownstreamConfig config;
};

/// The standard runner: full downstream training plus a hold-out isolation check.
inline TrialRunner make_trial_runner(const GridInputs& in) {
  return [in](const TrialJob& job) {
    DownstreamConfig cfg = in.config;
    cfg.gain = job.gain;
    const auto outcome = train_downstream(job.regime, in.encoder_config, in.pretrained, *in.data, job.n_train, cfg,
                                          job.seed, job.sample_seed);
    for (auto t : outcome.test_ids) {
      if (std::find(outcome.train_ids.begin(), outcome.train_ids.end(), t) != outcome.train_ids.end() ||
          std::find(outcome.val_ids.begin(), outcome.val_ids.end(), t) != outcome.val_ids.end()) {
        throw std::logic_error("hold-out subject " + std::to_string(t) + " leaked into training or validation");
      }
    }
    TrialResult r = outcome.result;
    r.pretrain = job.regime == Regime::npt ? "none" : in.pretrain;
    r.trial = job.trial;
    return r;
  };
}

// ---------------------------------------------------------------------------
// Summaries

struct SummaryRow {
  std::string regime;
  std::size_t n_train = 0;
  double median_auc = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
  std::size_t trials = 0;
};

/// Median and quartiles of test AUC per (regime label, n_train), sorted by key.
inline std::vector<SummaryRow> summarize(const std::vector<TrialResult>& rows) {
  std::map<std::pair<std::string, std::size_t>, std::vector<double>> cells;
  for (const auto& r : rows) cells[{r.label(), r.n_train}].push_back(r.test_auc);
  std::vector<SummaryRow> out;
  for (const auto& [key, values] : cells) {
    out.push_back(SummaryRow{key.first, key.second, median(values), quantile(values, 0.25), quantile(values, 0.75),
                             values.size()});
  }
  return out;
}

inline const SummaryRow* find_cell(const std::vector<SummaryRow>& rows, const std::string& regime, std::size_t n) {
  for (const auto& r : rows)
    if (r.regime == regime && r.n_train == n) return &r;
  return nullptr;
}

}  // namespace dynpre
