#include <catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "dynpre/downstream.hpp"
#include "dynpre/simgen.hpp"

using namespace dynpre;
using Catch::Approx;

namespace {

Dataset small_downstream(std::uint64_t seed, std::size_t graphs = 8, std::size_t length = 200) {
  sim::SimDatasetSpec spec;
  spec.n_graphs = graphs;
  spec.downstream_length = length;
  spec.n_pretrain_series = 1;
  spec.pretrain_length = 100;
  spec.master_seed = seed;
  return sim::build_downstream_set(spec);
}

DownstreamConfig quick_config() {
  DownstreamConfig cfg;
  cfg.max_epochs = 3;
  cfg.patience = 3;
  return cfg;
}

}  // namespace

TEST_CASE("window counts", "[downstream]") {
  CHECK(WindowingRule{20, 0.5}.count(140) == 13);
  CHECK(WindowingRule{20, 0.0}.count(140) == 7);
  CHECK(WindowingRule{20, 0.0}.count(120) == 6);
  CHECK(WindowingRule{20, 0.0}.count(4000) == 200);
  CHECK(WindowingRule{20, 0.0}.count(20) == 1);
  CHECK(WindowingRule{20, 0.0}.count(39) == 1);
  CHECK_THROWS_AS((WindowingRule{20, 0.0}.count(19)), std::invalid_argument);

  Matrix<float> subject(2, 140);
  for (Eigen::Index t = 0; t < 140; ++t) subject.col(t).setConstant(static_cast<float>(t));
  const auto w = make_windows(subject, WindowingRule{20, 0.5});
  REQUIRE(w.size() == 13);
  CHECK(w[0](0, 0) == 0.0f);
  CHECK(w[1](0, 0) == 10.0f);
  CHECK(w[12](1, 19) == 139.0f);
}

TEST_CASE("batched windows are time-major", "[downstream]") {
  const auto data = small_downstream(1, 2, 60);
  const WindowingRule rule{20, 0.0};
  const std::vector<std::size_t> ids{3, 0};
  const auto m = batch_windows(data, ids, rule);
  REQUIRE(m.cols() == 3 * 2 * 20);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t b = 0; b < 2; ++b)
      CHECK(m.middleCols((s * 2 + b) * 20, 20) == data.subjects[ids[b]].middleCols(s * 20, 20));
}

TEST_CASE("subject forward shapes and zero weights", "[downstream]") {
  Rng rng(2);
  DownstreamModel model;
  model.encoder_config = EncoderConfig::sim(10);
  model.encoder = build_encoder<float>(model.encoder_config, rng);
  model.head = build_head<float>(model.head_config, 0.5, rng);
  Matrix<float> subject(10, 4000);
  for (Eigen::Index i = 0; i < subject.size(); ++i) subject.data()[i] = static_cast<float>(rng.normal());
  const auto logits = subject_forward(model, subject, WindowingRule{});
  CHECK(logits.size() == 2);

  for (auto& [name, p] : model.head) p.value.fill(0.0f);
  for (auto& [name, p] : model.encoder) p.value.fill(0.0f);
  const auto zero = subject_forward(model, subject.leftCols(200), WindowingRule{});
  CHECK(zero[0] == 0.0);
  CHECK(zero[1] == 0.0);
  CHECK_THROWS_AS(subject_forward(model, subject.leftCols(10), WindowingRule{}), std::invalid_argument);
}

TEST_CASE("tied cells swap under sequence reversal", "[downstream]") {
  Rng rng(3);
  HeadConfig hc;
  hc.input_dim = 6;
  hc.hidden = 5;
  const auto head = build_head<double>(hc, 1.0, rng);
  const std::size_t steps = 7, batch = 3;
  Matrix<double> seq(6, steps * batch);
  for (Eigen::Index i = 0; i < seq.size(); ++i) seq.data()[i] = rng.normal();
  Matrix<double> rev(6, steps * batch);
  for (std::size_t s = 0; s < steps; ++s) rev.middleCols(s * batch, batch) = seq.middleCols((steps - 1 - s) * batch, batch);

  Tape<double> tape;
  const auto b = bind(tape, head, false);
  const Matrix<double> f = tape.value(bilstm_features(tape, b, tape.constant(seq), steps, batch, "lstm_f", "lstm_f"));
  const Matrix<double> r = tape.value(bilstm_features(tape, b, tape.constant(rev), steps, batch, "lstm_f", "lstm_f"));
  CHECK(f.topRows(5).isApprox(r.bottomRows(5), 1e-12));
  CHECK(f.bottomRows(5).isApprox(r.topRows(5), 1e-12));
  CHECK_FALSE(f.topRows(5).isApprox(f.bottomRows(5), 1e-6));
}

TEST_CASE("score is the logit difference", "[downstream]") {
  // Head with zero weights and chosen output biases.
  Rng rng(4);
  DownstreamModel model;
  model.encoder_config = EncoderConfig::sim(10);
  model.encoder = build_encoder<float>(model.encoder_config, rng);
  model.head = build_head<float>(model.head_config, 0.5, rng);
  for (auto& [name, p] : model.head) p.value.fill(0.0f);
  const auto data = small_downstream(4, 2, 40);
  auto scores_for = [&](float l0, float l1) {
    model.head.at("fc2.bias").value[0] = l0;
    model.head.at("fc2.bias").value[1] = l1;
    return predict_scores(model, data, {0, 1}, WindowingRule{});
  };
  CHECK(scores_for(0.0f, 1.0f)[0] == Approx(1.0));
  CHECK(scores_for(1.0f, 0.0f)[0] == Approx(-1.0));
  CHECK(scores_for(0.3f, 0.3f)[1] == 0.0);
  CHECK(scores_for(5.3f, 6.3f)[1] == Approx(1.0).margin(1e-6));
}

TEST_CASE("training subjects are drawn per class from the train split", "[downstream]") {
  const auto data = small_downstream(5, 10);
  Rng rng(1);
  const auto ids = sample_training_subjects(data, 4, rng);
  REQUIRE(ids.size() == 8);
  std::vector<std::size_t> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
  int var = 0;
  for (auto i : ids) {
    CHECK(data.splits[i] == Split::train);
    var += data.labels[i];
  }
  CHECK(var == 4);
  Rng again(1);
  CHECK(sample_training_subjects(data, 4, again) == ids);
  CHECK_THROWS_AS(sample_training_subjects(data, 21, rng), std::invalid_argument);
  CHECK_THROWS_AS(sample_training_subjects(data, 0, rng), std::invalid_argument);
}

TEST_CASE("FPT leaves the encoder bit-identical", "[downstream]") {
  const auto data = small_downstream(6);
  const auto cfg = EncoderConfig::sim(10);
  Rng rng(7);
  const auto pretrained = build_encoder<float>(cfg, rng);
  const auto before = pretrained.cast<float>();
  std::vector<double> norms;
  const auto out = train_downstream(Regime::fpt, cfg, &pretrained, data, 4, quick_config(), 1, 2,
                                    [&](const StepInfo& s) { norms.push_back(s.encoder_grad_norm); });
  CHECK(pretrained.same_values(before));
  CHECK(out.model.encoder.same_values(before));
  REQUIRE_FALSE(norms.empty());
  for (double n : norms) CHECK(n == 0.0);
  CHECK(out.result.pretrain == "stdim");
  CHECK(out.result.epochs_run >= 1);
}

TEST_CASE("UFPT and NPT update the encoder from different starts", "[downstream]") {
  const auto data = small_downstream(7);
  const auto cfg = EncoderConfig::sim(10);
  Rng rng(8);
  const auto pretrained = build_encoder<float>(cfg, rng);
  double ufpt_norm = 0.0;
  const auto u = train_downstream(Regime::ufpt, cfg, &pretrained, data, 4, quick_config(), 1, 2,
                                  [&](const StepInfo& s) { ufpt_norm = std::max(ufpt_norm, s.encoder_grad_norm); });
  const auto n = train_downstream(Regime::npt, cfg, nullptr, data, 4, quick_config(), 1, 2);
  CHECK(ufpt_norm > 0.0);
  CHECK_FALSE(n.model.encoder.same_values(pretrained));
  CHECK(u.train_ids == n.train_ids);
  CHECK(n.result.pretrain == "none");
  CHECK_THROWS_AS(train_downstream(Regime::ufpt, cfg, nullptr, data, 4, quick_config(), 1, 2), std::invalid_argument);
  CHECK_THROWS_AS(train_downstream(Regime::npt, EncoderConfig::sim(9), nullptr, data, 4, quick_config(), 1, 2),
                  ShapeError);
}

TEST_CASE("downstream training is deterministic under a fixed seed", "[downstream]") {
  const auto data = small_downstream(8, 4);
  const auto cfg = EncoderConfig::sim(10);
  const auto a = train_downstream(Regime::npt, cfg, nullptr, data, 8, quick_config(), 5, 6);
  const auto b = train_downstream(Regime::npt, cfg, nullptr, data, 8, quick_config(), 5, 6);
  CHECK(a.result.test_auc == b.result.test_auc);
  CHECK(a.result.val_auc == b.result.val_auc);
  CHECK(a.model.head.same_values(b.model.head));
  CHECK(a.model.encoder.same_values(b.model.encoder));
}

TEST_CASE("window order matters to a trained model", "[downstream]") {
  const auto data = small_downstream(9);
  const auto cfg = EncoderConfig::sim(10);
  Rng rng(10);
  const auto pretrained = build_encoder<float>(cfg, rng);
  auto qc = quick_config();
  qc.max_epochs = 5;
  const auto out = train_downstream(Regime::fpt, cfg, &pretrained, data, 8, qc, 3, 4);
  const WindowingRule rule{};
  const auto& subject = data.subjects[out.test_ids[0]];
  const auto base = subject_forward(out.model, subject, rule);
  int changed = 0;
  const int shuffles = 40;
  for (int k = 0; k < shuffles; ++k) {
    std::vector<std::size_t> perm(10);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    Matrix<float> shuffled(subject.rows(), subject.cols());
    for (std::size_t w = 0; w < 10; ++w) shuffled.middleCols(w * 20, 20) = subject.middleCols(perm[w] * 20, 20);
    const auto logits = subject_forward(out.model, shuffled, rule);
    changed += logits != base;
  }
  CHECK(changed >= shuffles * 95 / 100);
}

TEST_CASE("linear probe on frozen latents", "[downstream]") {
  const auto data = small_downstream(10, 4);
  const auto cfg = EncoderConfig::sim(10);
  Rng rng(11);
  const auto enc = build_encoder<float>(cfg, rng);
  const auto r = linear_probe(cfg, enc, data, data.indices(Split::train), data.indices(Split::test), WindowingRule{}, 1,
                              20);
  CHECK(r.train_windows == 16 * 10);
  CHECK(r.test_windows == 2 * 10);
  CHECK(r.test_auc >= 0.0);
  CHECK(r.test_auc <= 1.0);
}

TEST_CASE("regime names round trip", "[downstream]") {
  for (Regime r : {Regime::fpt, Regime::ufpt, Regime::npt}) CHECK(parse_regime(regime_name(r)) == r);
  CHECK_THROWS_AS(parse_regime("xpt"), std::invalid_argument);
  TrialResult t;
  t.regime = Regime::fpt;
  t.pretrain = "ae";
  CHECK(t.label() == "FPT-AE");
  t.regime = Regime::npt;
  CHECK(t.label() == "NPT");
}
