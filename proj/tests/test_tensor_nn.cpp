#include <catch_amalgamated.hpp>

#include <cmath>

#include "dynpre/gradcheck.hpp"
#include "dynpre/nn.hpp"
#include "dynpre/params.hpp"

using namespace dynpre;
using Catch::Approx;

namespace {

Tensor<double> randn(std::vector<std::size_t> dims, Rng& rng) {
  Tensor<double> t(std::move(dims));
  for (auto& x : t.data()) x = rng.normal();
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("tensor keeps dims and data in step", "[tensor-nn]") {
  Tensor<float> t({2, 3, 4});
  CHECK(t.size() == 24);
  t.at(1, 2, 3) = 5.0f;
  CHECK(t[23] == 5.0f);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
  const auto m = t.as_matrix();
  CHECK(m.rows() == 2);
  CHECK(m.cols() == 12);
}

TEST_CASE("conv1d examples", "[tensor-nn]") {
  SECTION("dot product") {
    Tensor<double> x({1, 3}, std::vector<double>{1, 2, 3});
    Tensor<double> w({1, 1, 3}, 1.0);
    Tensor<double> b({1});
    const auto y = nn::conv1d(x, w, b);
    REQUIRE(y.dims() == std::vector<std::size_t>{1, 1});
    CHECK(y[0] == 6.0);
  }
  SECTION("identity kernel") {
    Rng rng(1);
    const auto x = randn({1, 9}, rng);
    const auto y = nn::conv1d(x, Tensor<double>({1, 1, 1}, 1.0), Tensor<double>({1}));
    CHECK(y == x);
  }
  SECTION("10x20 window with k=4") {
    const auto y = nn::conv1d(Tensor<float>({10, 20}), Tensor<float>({32, 10, 4}), Tensor<float>({32}));
    CHECK(y.dims() == std::vector<std::size_t>{32, 17});
  }
  SECTION("matches the definition") {
    Rng rng(2);
    const auto x = randn({3, 7}, rng), w = randn({2, 3, 3}, rng), b = randn({2}, rng);
    const auto y = nn::conv1d(x, w, b);
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t t = 0; t < 5; ++t) {
        double s = b[o];
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t j = 0; j < 3; ++j) s += w.at(o, c, j) * x.at(c, t + j);
        CHECK(y.at(o, t) == Approx(s).epsilon(1e-12));
      }
  }
  SECTION("input shorter than kernel") {
    CHECK_THROWS_AS(nn::conv1d(Tensor<float>({1, 2}), Tensor<float>({1, 1, 3}), Tensor<float>({1})), ShapeError);
  }
}

TEST_CASE("tconv1d examples and adjointness", "[tensor-nn]") {
  CHECK(nn::tconv1d(Tensor<float>({64, 11}), Tensor<float>({64, 128, 2}), Tensor<float>({128})).dims() ==
        std::vector<std::size_t>{128, 12});
  Rng rng(3);
  const auto x = randn({1, 6}, rng);
  CHECK(nn::tconv1d(x, Tensor<double>({1, 1, 1}, 1.0), Tensor<double>({1})) == x);

  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t ci = 1 + rng.index(4), co = 1 + rng.index(4), k = 1 + rng.index(4), len = k + rng.index(6);
    const auto xin = randn({ci, len}, rng);
    const auto w = randn({co, ci, k}, rng);
    const auto y = randn({co, len - k + 1}, rng);
    // The adjoint map reads the same (co, ci, k) tensor as a tconv weight going co -> ci.
    const double lhs = dot(nn::conv1d(xin, w, Tensor<double>({co})), y);
    const double rhs = dot(xin, nn::tconv1d(y, w, Tensor<double>({ci})));
    CHECK(lhs == Approx(rhs).epsilon(1e-10));
  }
  CHECK_THROWS_AS(nn::tconv1d(Tensor<float>({3, 5}), Tensor<float>({2, 2, 2}), Tensor<float>({2})), ShapeError);
}

TEST_CASE("linear examples", "[tensor-nn]") {
  Rng rng(4);
  const auto x = randn({5}, rng);
  Tensor<double> eye({5, 5});
  for (std::size_t i = 0; i < 5; ++i) eye.at(i, i) = 1.0;
  CHECK(nn::linear(x, eye, Tensor<double>({5})) == x);
  const auto b = randn({256}, rng);
  CHECK(nn::linear(Tensor<double>({704}), randn({256, 704}, rng), b) == b);
  CHECK_THROWS_AS(nn::linear(x, Tensor<double>({3, 4}), Tensor<double>({3})), ShapeError);
}

TEST_CASE("relu examples", "[tensor-nn]") {
  const Tensor<float> x({3}, std::vector<float>{-1, 0, 2});
  CHECK(nn::relu(x) == Tensor<float>({3}, std::vector<float>{0, 0, 2}));
  CHECK(nn::relu(Tensor<float>({4}, -3.0f)) == Tensor<float>({4}));
  Rng rng(5);
  const auto r = randn({20}, rng);
  CHECK(nn::relu(nn::relu(r)) == nn::relu(r));
}

TEST_CASE("lstm_cell closed forms", "[tensor-nn]") {
  const std::size_t n = 3, h = 4;
  nn::LstmWeights<double> zero{Tensor<double>({4 * h, n}), Tensor<double>({4 * h, h}), Tensor<double>({4 * h})};
  Rng rng(6);
  const auto x = randn({n}, rng), hp = randn({h}, rng), cp = randn({h}, rng);
  const auto [h1, c1] = nn::lstm_cell(x, hp, cp, zero);
  for (std::size_t i = 0; i < h; ++i) {
    CHECK(c1[i] == Approx(0.5 * cp[i]).epsilon(1e-14));
    CHECK(h1[i] == Approx(0.5 * std::tanh(0.5 * cp[i])).epsilon(1e-14));
  }
  const auto [h0, c0] = nn::lstm_cell(Tensor<double>({n}), Tensor<double>({h}), Tensor<double>({h}), zero);
  CHECK(h0 == Tensor<double>({h}));

  nn::LstmWeights<double> w{randn({4 * h, n}, rng), randn({4 * h, h}, rng), randn({4 * h}, rng)};
  for (int t = 0; t < 20; ++t) {
    auto big = randn({n}, rng);
    for (auto& v : big.data()) v *= 50.0;
    const auto [ht, ct] = nn::lstm_cell(big, hp, cp, w);
    for (double v : ht.data()) CHECK(std::abs(v) <= 1.0);
  }
}

TEST_CASE("loss examples", "[tensor-nn]") {
  Rng rng(7);
  const auto x = randn({3, 4}, rng);
  CHECK(nn::loss_mse(x, x) == 0.0);
  auto shifted = x;
  for (auto& v : shifted.data()) v += 1.0;
  CHECK(nn::loss_mse(shifted, x) == Approx(1.0).epsilon(1e-12));
  CHECK(nn::loss_mse(Tensor<double>({1}, 0.0), Tensor<double>({1}, 2.0)) == 4.0);

  CHECK(nn::loss_softmax_xent(Tensor<double>({2}), 0) == Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(nn::loss_softmax_xent(Tensor<double>({2}, std::vector<double>{20, -20}), 0) < 1e-15);
  const Tensor<double> l({2}, std::vector<double>{0.3, -1.2});
  const Tensor<double> l_shift({2}, std::vector<double>{100.3, 98.8});
  CHECK(nn::loss_softmax_xent(l, 1) == Approx(nn::loss_softmax_xent(l_shift, 1)).epsilon(1e-12));
}

TEST_CASE("softmax_xent gradient is invariant to a common logit shift", "[tensor-nn]") {
  auto grad_at = [](double shift) {
    Tape<double> tape;
    Matrix<double> z(2, 1);
    z << 0.7 + shift, -0.4 + shift;
    Var v = tape.parameter(z);
    tape.backward(ad::softmax_xent(tape, v, {1}));
    return Matrix<double>(tape.grad(v));
  };
  const auto g0 = grad_at(0.0), g1 = grad_at(37.0);
  CHECK((g0 - g1).norm() < 1e-12);
}

TEST_CASE("reverse-mode gradients", "[tensor-nn]") {
  SECTION("quadratic form") {
    Rng rng(8);
    Matrix<double> w = randn({3, 4}, rng).as_matrix();
    Matrix<double> x = randn({4, 1}, rng).as_matrix();
    Tape<double> tape;
    Var wv = tape.parameter(w);
    Var y = ad::matmul(tape, wv, tape.constant(x));
    Var loss = ad::scale(tape, ad::sum(tape, ad::mul(tape, y, y)), 0.5);
    tape.backward(loss);
    const Matrix<double> expected = (w * x) * x.transpose();
    CHECK((tape.grad(wv) - expected).norm() < 1e-12);
  }
  SECTION("constant loss has zero gradient") {
    ParamStore<double> p;
    p.add("w", Tensor<double>({2, 2}, 1.0));
    const auto r = finite_diff_check(p, [](Tape<double>& t, const Binding<double>&) {
      Matrix<double> c(1, 1);
      c(0, 0) = 3.0;
      return t.constant(c);
    });
    CHECK(r.passed);
  }
  SECTION("non-finite values are an error") {
    Tape<double> tape;
    Matrix<double> m(1, 1);
    m(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(tape.parameter(m), NonFiniteError);
  }
}

TEST_CASE("finite-difference suite passes for every op", "[tensor-nn]") {
  const auto results = run_gradcheck_suite(2024, 5);
  std::set<std::string> names;
  for (const auto& c : results) {
    names.insert(c.name);
    INFO(c.name << " shape " << c.shape_index << " rel err " << c.report.max_rel_error << " at " << c.report.worst_param);
    CHECK(c.report.passed);
    CHECK(c.report.checked > 0);
  }
  CHECK(names.count("stdim_loss") == 1);
  CHECK(names.count("ae_loss") == 1);
  CHECK(names.count("lstm_sequence") == 1);
}

TEST_CASE("lstm_sequence agrees with chained lstm_step", "[tensor-nn]") {
  Rng rng(9);
  const std::size_t h = 3, b = 2, steps = 4;
  const Matrix<double> proj = randn({4 * h, steps * b}, rng).as_matrix();
  const Matrix<double> w = randn({4 * h, h}, rng).as_matrix();
  for (bool reverse : {false, true}) {
    Tape<double> tape;
    Var p = tape.constant(proj), wv = tape.constant(w);
    const Matrix<double> fused = tape.value(ad::lstm_sequence(tape, p, wv, steps, b, reverse));
    Var hs = tape.constant(Matrix<double>::Zero(h, b)), cs = hs;
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t blk = reverse ? steps - 1 - s : s;
      std::tie(hs, cs) = ad::lstm_step(tape, ad::col_block(tape, p, blk * b, b), hs, cs, wv);
    }
    CHECK((fused - tape.value(hs)).norm() < 1e-12);
  }
}

TEST_CASE("init schemes", "[tensor-nn]") {
  Rng rng(10);
  SECTION("orthogonal square") {
    const auto q = init<double>({64, 64}, {InitKind::orthogonal, 1.0}, rng).as_matrix();
    CHECK((q.transpose() * q - Matrix<double>::Identity(64, 64)).cwiseAbs().maxCoeff() < 1e-6);
  }
  SECTION("orthogonal conv weight uses the (C_out, C_in*k) view") {
    const auto q = init<double>({8, 3, 4}, {InitKind::orthogonal, 2.0}, rng).as_matrix();
    REQUIRE(q.rows() == 8);
    CHECK((q * q.transpose() - 4.0 * Matrix<double>::Identity(8, 8)).cwiseAbs().maxCoeff() < 1e-6);
  }
  SECTION("orthogonal wide matrix has orthonormal rows") {
    const auto q = init<double>({128, 704}, {InitKind::orthogonal, 1.0}, rng).as_matrix();
    CHECK((q * q.transpose() - Matrix<double>::Identity(128, 128)).cwiseAbs().maxCoeff() < 1e-6);
  }
  SECTION("xavier bounds scale with gain") {
    const auto t = init<double>({3, 3}, {InitKind::xavier, 1.0}, rng);
    for (double v : t.data()) CHECK(std::abs(v) <= 1.0);
    const auto s = init<double>({200, 400}, {InitKind::xavier, 0.05}, rng);
    const double bound = 0.05 * std::sqrt(6.0 / 600.0);
    double max_abs = 0.0;
    for (double v : s.data()) max_abs = std::max(max_abs, std::abs(v));
    CHECK(max_abs <= bound);
    CHECK(max_abs > 0.95 * bound);
  }
  SECTION("same seed, same tensor") {
    Rng a(11), b(11);
    CHECK(init<float>({5, 7}, {InitKind::orthogonal, 1.0}, a) == init<float>({5, 7}, {InitKind::orthogonal, 1.0}, b));
  }
}

TEST_CASE("adam step", "[tensor-nn]") {
  Rng rng(12);
  ParamStore<float> store;
  store.add("w", init<float>({4, 3}, {InitKind::xavier, 1.0}, rng));
  const auto before = store.at("w").value;
  adam_step(store, AdamConfig{});
  CHECK(store.at("w").value == before);

  auto& p = store.at("w");
  for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] = (i % 2 ? 1.0f : -2.0f) * static_cast<float>(i + 1);
  auto twin = store;
  adam_step(store, AdamConfig{1e-3});
  adam_step(twin, AdamConfig{1e-3});
  CHECK(store.at("w").value == twin.at("w").value);
  for (std::size_t i = 0; i < p.grad.size(); ++i) {
    const double step = static_cast<double>(store.at("w").value[i]) - before[i];
    const double sign = p.grad[i] > 0 ? 1.0 : -1.0;
    CHECK(step == Approx(-1e-3 * sign).margin(1e-6));
  }
}

TEST_CASE("reduce lr on plateau", "[tensor-nn]") {
  const PlateauConfig cfg{0.5, 3, 1e-6};
  CHECK(reduce_lr_on_plateau({5, 4, 3, 2, 1}, 1e-3, cfg) == 1e-3);
  CHECK(reduce_lr_on_plateau({2, 2, 2, 2}, 1e-3, cfg) == 0.5e-3);
  CHECK(reduce_lr_on_plateau({2, 2, 2, 2}, 1.5e-6, cfg) == 1e-6);
  CHECK(reduce_lr_on_plateau({2, 2, 2, 2}, 1e-6, cfg) == 1e-6);

  PlateauScheduler s(1e-3, cfg);
  double lr = 1e-3;
  for (int i = 0; i < 100; ++i) {
    const double next = s.step(1.0);
    CHECK(next <= lr);
    CHECK(next >= 1e-6);
    lr = next;
  }
  CHECK(lr == 1e-6);
}

TEST_CASE("gradient clipping by global norm", "[tensor-nn]") {
  ParamStore<float> a, b;
  a.add("x", Tensor<float>({2}));
  b.add("y", Tensor<float>({1}));
  a.at("x").grad[0] = 3.0f;
  a.at("x").grad[1] = 0.0f;
  b.at("y").grad[0] = 4.0f;
  CHECK(grad_norm<float>({&a, &b}) == Approx(5.0));
  clip_grad_norm<float>({&a, &b}, 1.0);
  CHECK(grad_norm<float>({&a, &b}) == Approx(1.0).epsilon(1e-6));
  CHECK(a.at("x").grad[0] == Approx(0.6f));
}
