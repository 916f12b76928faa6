#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "dynpre/eval.hpp"
#include "dynpre/simgen.hpp"

using namespace dynpre;
using Catch::Approx;

namespace {

double brute_force_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

// Deterministic stand-in for training: AUC is a function of the job seeds.
TrialResult fake_trial(const TrialJob& job) {
  TrialResult r;
  r.regime = job.regime;
  r.n_train = job.n_train;
  r.seed = job.seed;
  r.gain = job.gain;
  r.test_auc = static_cast<double>(job.seed % 1000) / 1000.0;
  r.val_auc = static_cast<double>(job.sample_seed % 1000) / 1000.0;
  r.pretrain = job.regime == Regime::npt ? "none" : "stdim";
  return r;
}

}  // namespace

TEST_CASE("auc examples", "[eval]") {
  CHECK(auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);
  CHECK(auc({0.3, 0.3, 0.3, 0.3}, {1, 0, 1, 0}) == 0.5);
  CHECK(auc({0.9, 0.4, 0.6, 0.1}, {1, 0, 1, 0}) == 1.0);
  CHECK(auc({0.9, 0.4, 0.6, 0.1}, {0, 1, 0, 1}) == 0.0);
  CHECK(auc({0.1, 0.5, 0.5, 0.9}, {0, 1, 0, 1}) == Approx(0.875));
  CHECK_THROWS_AS(auc({0.1, 0.2}, {1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(auc({0.1, 0.2}, {1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(auc({0.1}, {1, 0}), std::invalid_argument);
}

TEST_CASE("auc matches brute-force pair counting", "[eval]") {
  Rng rng(17);
  int checked = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 2 + rng.index(199);
    std::vector<double> s(n);
    std::vector<int> y(n);
    const bool coarse = rep % 2 == 0;  // coarse scores force many ties
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse ? static_cast<double>(rng.index(5)) : rng.normal();
      y[i] = static_cast<int>(rng.index(2));
    }
    y[0] = 0;
    y[1] = 1;
    const double fast = auc(s, y);
    CHECK(fast == brute_force_auc(s, y));
    // Strictly monotone transform.
    std::vector<double> t(n);
    std::transform(s.begin(), s.end(), t.begin(), [](double v) { return std::exp(0.5 * v) - 3.0; });
    CHECK(auc(t, y) == fast);
    ++checked;
  }
  CHECK(checked == 1000);
}

TEST_CASE("accuracy and quantiles", "[eval]") {
  CHECK(accuracy({1.0, -1.0, 2.0, 0.0}, {1, 0, 0, 1}) == 0.5);
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
  CHECK(quantile({1.0, 2.0, 3.0, 4.0, 5.0}, 0.25) == 2.0);
  CHECK(quantile({7.0}, 0.75) == 7.0);
  CHECK_THROWS_AS(median({}), std::invalid_argument);
}

TEST_CASE("grid enumerates every cell", "[eval]") {
  GridSpec grid;
  grid.n_train = {16, 32, 64};
  const auto rows = run_grid(grid, fake_trial, 42);
  REQUIRE(rows.size() == 90);
  const auto summary = summarize(rows);
  REQUIRE(summary.size() == 9);
  for (const auto& cell : summary) CHECK(cell.trials == 10);
  for (const auto& r : rows) CHECK(r.gain == 0.5);

  SECTION("rerun with the same master seed") {
    const auto again = run_grid(grid, fake_trial, 42);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      CHECK(again[i].seed == rows[i].seed);
      CHECK(again[i].test_auc == rows[i].test_auc);
    }
  }
  SECTION("subject samples are shared across regimes") {
    const auto a = make_job(42, "stdim", Regime::fpt, 16, 3, 0.5);
    const auto b = make_job(42, "stdim", Regime::npt, 16, 3, 0.5);
    const auto c = make_job(42, "stdim", Regime::npt, 16, 4, 0.5);
    CHECK(a.sample_seed == b.sample_seed);
    CHECK(a.seed != b.seed);
    CHECK(b.sample_seed != c.sample_seed);
  }
  SECTION("gains per regime") {
    const auto g = run_grid(grid, fake_trial, 42, {{Regime::fpt, 0.25}});
    for (const auto& r : g) CHECK(r.gain == (r.regime == Regime::fpt ? 0.25 : 0.5));
  }
  SECTION("invalid grids") {
    GridSpec bad;
    bad.n_train = {32, 16};
    CHECK_THROWS_AS(run_grid(bad, fake_trial, 1), std::invalid_argument);
    bad = GridSpec{};
    bad.trials = 0;
    CHECK_THROWS_AS(run_grid(bad, fake_trial, 1), std::invalid_argument);
  }
}

TEST_CASE("gain sweep", "[eval]") {
  SECTION("flat validation picks the smallest gain") {
    const auto r = gain_sweep([](double, std::size_t) { return 0.7; });
    CHECK(r.runs == 200);
    CHECK(r.gains.size() == 20);
    CHECK(r.best_gain == Approx(0.05));
  }
  SECTION("peak is found") {
    const auto r = gain_sweep([](double g, std::size_t e) { return 1.0 - std::abs(g - 0.6) + 0.001 * (e % 3); });
    CHECK(r.best_gain == Approx(0.6));
    const auto candidates = gain_candidates();
    CHECK(std::find_if(candidates.begin(), candidates.end(),
                       [&](double c) { return std::abs(c - r.best_gain) < 1e-12; }) != candidates.end());
    CHECK(candidates.front() == Approx(0.05));
    CHECK(candidates.back() == Approx(1.0));
  }
}

TEST_CASE("summaries per cell", "[eval]") {
  std::vector<TrialResult> rows;
  auto add = [&](Regime r, std::size_t n, double a) {
    TrialResult t;
    t.regime = r;
    t.n_train = n;
    t.test_auc = a;
    t.pretrain = r == Regime::npt ? "none" : "stdim";
    rows.push_back(t);
  };
  add(Regime::fpt, 16, 0.8);
  add(Regime::fpt, 16, 0.6);
  add(Regime::fpt, 16, 0.7);
  add(Regime::npt, 16, 0.55);
  add(Regime::npt, 32, 0.9);
  add(Regime::npt, 32, 0.9);
  auto s = summarize(rows);
  const auto* fpt = find_cell(s, "FPT", 16);
  REQUIRE(fpt != nullptr);
  CHECK(fpt->median_auc == Approx(0.7));
  CHECK(fpt->q25 == Approx(0.65));
  CHECK(fpt->q75 == Approx(0.75));
  CHECK(find_cell(s, "NPT", 16)->median_auc == 0.55);
  const auto* flat = find_cell(s, "NPT", 32);
  CHECK(flat->q75 - flat->q25 == 0.0);
  CHECK(find_cell(s, "UFPT", 16) == nullptr);

  std::reverse(rows.begin(), rows.end());
  const auto back = summarize(rows);
  CHECK(find_cell(back, "FPT", 16)->median_auc == fpt->median_auc);
}

TEST_CASE("finite differences accept true gradients and catch corrupted ones", "[eval]") {
  Rng rng(3);
  ParamStore<double> params;
  Tensor<double> w({3, 4}), b({3});
  for (auto& x : w.data()) x = rng.normal();
  for (auto& x : b.data()) x = rng.normal();
  params.add("w", w);
  params.add("b", b);
  Matrix<double> x(4, 5);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();

  SECTION("linear layer") {
    const auto report = finite_diff_check(params, [&](Tape<double>& tape, const Binding<double>& p) {
      Var y = ad::linear(tape, tape.constant(x), p["w"], p["b"]);
      return ad::sum(tape, ad::mul(tape, y, y));
    });
    CHECK(report.passed);
    CHECK(report.checked == 15);
    CHECK(report.max_rel_error < 1e-6);
  }
  SECTION("wrong derivative") {
    const auto report = finite_diff_check(params, [&](Tape<double>& tape, const Binding<double>& p) {
      Var w_var = p["w"];
      const Matrix<double> sq = tape.value(w_var).array().square().matrix();
      Var bad = tape.record("bad_square", sq, {w_var}, [w_var](Tape<double>& t, const Matrix<double>& g) {
        t.grad_slot(w_var).array() += 3.0 * t.value(w_var).array() * g.array();
      });
      return ad::sum(tape, bad);
    });
    CHECK_FALSE(report.passed);
    CHECK(report.worst_param == "w");
  }
  SECTION("no parameters") {
    ParamStore<double> empty;
    const auto report = finite_diff_check(empty, [&](Tape<double>& tape, const Binding<double>&) {
      return ad::sum(tape, tape.constant(x));
    });
    CHECK(report.passed);
    CHECK(report.checked == 0);
  }
}

TEST_CASE("trial runner trains on a real grid cell", "[eval]") {
  sim::SimDatasetSpec spec;
  spec.n_graphs = 4;
  spec.downstream_length = 100;
  spec.n_pretrain_series = 1;
  spec.pretrain_length = 200;
  spec.master_seed = 3;
  const auto data = sim::build_downstream_set(spec);
  const auto cfg = EncoderConfig::sim(10);
  Rng rng(5);
  const auto pretrained = build_encoder<float>(cfg, rng);
  GridInputs in;
  in.data = &data;
  in.encoder_config = cfg;
  in.pretrained = &pretrained;
  in.pretrain = "ae";
  in.config.max_epochs = 2;
  GridSpec grid;
  grid.n_train = {4};
  grid.trials = 2;
  const auto rows = run_grid(grid, make_trial_runner(in), 9);
  REQUIRE(rows.size() == 6);
  for (const auto& r : rows) {
    CHECK(r.test_auc >= 0.0);
    CHECK(r.test_auc <= 1.0);
    CHECK(r.pretrain == (r.regime == Regime::npt ? "none" : "ae"));
  }
  CHECK(rows[0].label() == "FPT-AE");
}
