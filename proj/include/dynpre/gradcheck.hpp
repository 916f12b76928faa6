#pragma once

// Finite-difference suite over every differentiable op and both pretraining
// objectives, in double precision on small random shapes.

#include <algorithm>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dynpre/encoder.hpp"
#include "dynpre/eval.hpp"
#include "dynpre/pretrain.hpp"

namespace dynpre {

struct GradCheckCase {
  std::string name;
  std::size_t shape_index = 0;
  GradCheckReport report;
};

namespace detail {

inline Tensor<double> random_tensor(std::vector<std::size_t> dims, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(dims));
  for (auto& x : t.data()) x = rng.normal(0.0, scale);
  return t;
}

/// Projection onto a fixed random direction so every output entry reaches the loss.
inline Var project(Tape<double>& tape, Var out, Rng& rng) {
  const auto& v = tape.value(out);
  Matrix<double> r(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();
  return ad::sum(tape, ad::mul(tape, out, tape.constant(std::move(r))));
}

/// Values bounded away from 0 so relu's kink is never straddled by h.
inline Tensor<double> away_from_zero(std::vector<std::size_t> dims, Rng& rng) {
  auto t = random_tensor(std::move(dims), rng);
  for (auto& x : t.data()) x += x >= 0 ? 0.1 : -0.1;
  return t;
}

inline constexpr double kReluMargin = 2e-3;

struct CaseSetup {
  ParamStore<double> params;
  LossBuilder loss;
};

using CaseFactory = std::function<CaseSetup(Rng&)>;

inline std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

inline EncoderConfig tiny_encoder(Rng& rng) {
  EncoderConfig c;
  c.variant = EncoderVariant::sim;
  c.in_channels = dim(rng, 1, 3);
  c.conv_channels = {dim(rng, 2, 4), dim(rng, 2, 4), dim(rng, 2, 4), dim(rng, 1, 3)};
  c.kernel_sizes = {dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 2)};
  c.window_length = 8 + rng.index(3);
  c.latent_dim = dim(rng, 3, 6);
  c.feature_layer = 3;
  c.validate();
  return c;
}

/// Smallest |pre-activation| over every relu of the encoder (and decoder, if given).
/// Central differences are only meaningful when no relu input sits within h of its kink.
/// A relu layer that is dead for the whole batch counts as margin 0.
inline double relu_margin(const EncoderConfig& cfg, const ParamStore<double>& params, const Matrix<double>& windows,
                          bool with_decoder) {
  Tape<double> t;
  const auto b = bind(t, params, false);
  double margin = std::numeric_limits<double>::infinity();
  auto note = [&](Var pre) {
    const auto& v = t.value(pre);
    margin = (v.array() > 0.0).any() ? std::min(margin, v.cwiseAbs().minCoeff()) : 0.0;
    return ad::relu(t, pre);
  };
  Var h = t.constant(windows);
  std::size_t len = cfg.window_length;
  for (std::size_t l = 0; l < cfg.n_layers(); ++l) {
    const std::size_t k = cfg.kernel_sizes[l];
    h = note(ad::conv1d(t, h, b[conv_name(l + 1, "weight")], b[conv_name(l + 1, "bias")], len, k));
    len = len - k + 1;
  }
  if (with_decoder) {
    Var z = ad::linear(t, ad::windows_to_columns(t, h, len), b["fc.weight"], b["fc.bias"]);
    Var d = ad::columns_to_windows(t, ad::linear(t, z, b["dec.fc.weight"], b["dec.fc.bias"]), cfg.conv_channels.back(),
                                   len);
    const std::size_t n = cfg.n_layers();
    for (std::size_t l = 0; l + 1 < n; ++l) {
      const std::size_t k = cfg.kernel_sizes[n - 1 - l];
      d = note(ad::tconv1d(t, d, b[tconv_name(l + 1, "weight")], b[tconv_name(l + 1, "bias")], len, k));
      len = len + k - 1;
    }
  }
  return margin;
}

inline std::vector<std::pair<std::string, CaseFactory>> gradcheck_cases() {
  std::vector<std::pair<std::string, CaseFactory>> cases;
  auto unary = [&](const char* name, std::function<Var(Tape<double>&, Var)> op, bool kink = false) {
    cases.emplace_back(name, [op, kink](Rng& rng) {
      CaseSetup s;
      const std::vector<std::size_t> dims{dim(rng, 1, 5), dim(rng, 1, 6)};
      s.params.add("x", kink ? away_from_zero(dims, rng) : random_tensor(dims, rng));
      const std::uint64_t proj_seed = rng.next();
      s.loss = [op, proj_seed](Tape<double>& t, const Binding<double>& b) {
        Rng r(proj_seed);
        return project(t, op(t, b["x"]), r);
      };
      return s;
    });
  };
  auto with_projection = [](std::uint64_t seed, std::function<Var(Tape<double>&, const Binding<double>&)> f) {
    return [seed, f](Tape<double>& t, const Binding<double>& b) {
      Rng r(seed);
      return project(t, f(t, b), r);
    };
  };

  cases.emplace_back("matmul", [=](Rng& rng) {
    CaseSetup s;
    const auto m = dim(rng, 1, 5), k = dim(rng, 1, 5), n = dim(rng, 1, 5);
    s.params.add("a", random_tensor({m, k}, rng));
    s.params.add("b", random_tensor({k, n}, rng));
    s.loss = with_projection(rng.next(), [](Tape<double>& t, const Binding<double>& b) { return ad::matmul(t, b["a"], b["b"]); });
    return s;
  });
  cases.emplace_back("matmul_tn", [=](Rng& rng) {
    CaseSetup s;
    const auto m = dim(rng, 1, 5), k = dim(rng, 1, 5), n = dim(rng, 1, 5);
    s.params.add("a", random_tensor({k, m}, rng));
    s.params.add("b", random_tensor({k, n}, rng));
    s.loss = with_projection(rng.next(),
                             [](Tape<double>& t, const Binding<double>& b) { return ad::matmul_tn(t, b["a"], b["b"]); });
    return s;
  });
  cases.emplace_back("add_bias", [=](Rng& rng) {
    CaseSetup s;
    const auto m = dim(rng, 1, 5), n = dim(rng, 1, 5);
    s.params.add("x", random_tensor({m, n}, rng));
    s.params.add("b", random_tensor({m}, rng));
    s.loss = with_projection(rng.next(),
                             [](Tape<double>& t, const Binding<double>& b) { return ad::add_bias(t, b["x"], b["b"]); });
    return s;
  });
  for (const char* name : {"add", "mul"}) {
    const bool is_add = std::string(name) == "add";
    cases.emplace_back(name, [=](Rng& rng) {
      CaseSetup s;
      const auto m = dim(rng, 1, 5), n = dim(rng, 1, 5);
      s.params.add("a", random_tensor({m, n}, rng));
      s.params.add("b", random_tensor({m, n}, rng));
      s.loss = with_projection(rng.next(), [is_add](Tape<double>& t, const Binding<double>& b) {
        return is_add ? ad::add(t, b["a"], b["b"]) : ad::mul(t, b["a"], b["b"]);
      });
      return s;
    });
  }
  unary("scale", [](Tape<double>& t, Var x) { return ad::scale(t, x, -1.7); });
  unary("sum", [](Tape<double>& t, Var x) { return ad::sum(t, x); });
  unary("relu", [](Tape<double>& t, Var x) { return ad::relu(t, x); }, true);
  unary("sigmoid", [](Tape<double>& t, Var x) { return ad::sigmoid(t, x); });
  unary("tanh", [](Tape<double>& t, Var x) { return ad::tanh(t, x); });

  cases.emplace_back("im2col/col2im", [=](Rng& rng) {
    CaseSetup s;
    const auto c = dim(rng, 1, 3), n = dim(rng, 1, 3), len = dim(rng, 3, 7), k = dim(rng, 1, 3);
    s.params.add("x", random_tensor({c, n * len}, rng));
    s.params.add("y", random_tensor({c * k, n * (len - k + 1)}, rng));
    const std::uint64_t p1 = rng.next();
    const std::uint64_t p2 = rng.next();
    s.loss = [len, k, p1, p2](Tape<double>& t, const Binding<double>& b) {
      Rng r1(p1), r2(p2);
      return ad::add(t, project(t, ad::im2col(t, b["x"], len, k), r1),
                     project(t, ad::col2im(t, b["y"], len - k + 1, k), r2));
    };
    return s;
  });
  cases.emplace_back("windows_to_columns/columns_to_windows", [=](Rng& rng) {
    CaseSetup s;
    const auto c = dim(rng, 1, 3), n = dim(rng, 1, 3), len = dim(rng, 1, 5);
    s.params.add("x", random_tensor({c, n * len}, rng));
    s.params.add("y", random_tensor({c * len, n}, rng));
    const std::uint64_t p1 = rng.next();
    const std::uint64_t p2 = rng.next();
    s.loss = [c, len, p1, p2](Tape<double>& t, const Binding<double>& b) {
      Rng r1(p1), r2(p2);
      return ad::add(t, project(t, ad::windows_to_columns(t, b["x"], len), r1),
                     project(t, ad::columns_to_windows(t, b["y"], c, len), r2));
    };
    return s;
  });
  cases.emplace_back("col_block/row_block", [=](Rng& rng) {
    CaseSetup s;
    const auto m = dim(rng, 2, 5), n = dim(rng, 2, 5);
    s.params.add("x", random_tensor({m, n}, rng));
    const std::uint64_t p1 = rng.next();
    const std::uint64_t p2 = rng.next();
    s.loss = [m, n, p1, p2](Tape<double>& t, const Binding<double>& b) {
      Rng r1(p1), r2(p2);
      return ad::add(t, project(t, ad::col_block(t, b["x"], 1, n - 1), r1),
                     project(t, ad::row_block(t, b["x"], 0, m - 1), r2));
    };
    return s;
  });
  cases.emplace_back("concat_rows/concat_cols", [=](Rng& rng) {
    CaseSetup s;
    const auto m = dim(rng, 1, 4), n = dim(rng, 1, 4);
    s.params.add("a", random_tensor({m, n}, rng));
    s.params.add("b", random_tensor({m, n}, rng));
    const std::uint64_t p1 = rng.next();
    const std::uint64_t p2 = rng.next();
    s.loss = [p1, p2](Tape<double>& t, const Binding<double>& b) {
      Rng r1(p1), r2(p2);
      return ad::add(t, project(t, ad::concat_rows(t, b["a"], b["b"]), r1),
                     project(t, ad::concat_cols(t, b["a"], b["b"]), r2));
    };
    return s;
  });
  cases.emplace_back("mse", [=](Rng& rng) {
    CaseSetup s;
    const auto m = dim(rng, 1, 5), n = dim(rng, 1, 5);
    s.params.add("x", random_tensor({m, n}, rng));
    const Matrix<double> target = random_tensor({m, n}, rng).as_matrix();
    s.loss = [target](Tape<double>& t, const Binding<double>& b) { return ad::mse(t, b["x"], target); };
    return s;
  });
  cases.emplace_back("softmax_xent", [=](Rng& rng) {
    CaseSetup s;
    const auto k = dim(rng, 2, 4), n = dim(rng, 1, 5);
    s.params.add("z", random_tensor({k, n}, rng, 2.0));
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.index(k)));
    s.loss = [labels](Tape<double>& t, const Binding<double>& b) { return ad::softmax_xent(t, b["z"], labels); };
    return s;
  });
  cases.emplace_back("infonce", [=](Rng& rng) {
    CaseSetup s;
    const auto n = dim(rng, 2, 6);
    s.params.add("s", random_tensor({n, n}, rng, 2.0));
    s.loss = [](Tape<double>& t, const Binding<double>& b) { return ad::infonce(t, b["s"]); };
    return s;
  });
  cases.emplace_back("conv1d", [=](Rng& rng) {
    CaseSetup s;
    const auto ci = dim(rng, 1, 3), co = dim(rng, 1, 4), n = dim(rng, 1, 3), len = dim(rng, 4, 8), k = dim(rng, 1, 4);
    s.params.add("x", random_tensor({ci, n * len}, rng));
    s.params.add("w", random_tensor({co, ci, k}, rng));
    s.params.add("b", random_tensor({co}, rng));
    s.loss = with_projection(rng.next(), [len, k](Tape<double>& t, const Binding<double>& b) {
      return ad::conv1d(t, b["x"], b["w"], b["b"], len, k);
    });
    return s;
  });
  cases.emplace_back("tconv1d", [=](Rng& rng) {
    CaseSetup s;
    const auto ci = dim(rng, 1, 4), co = dim(rng, 1, 3), n = dim(rng, 1, 3), len = dim(rng, 2, 6), k = dim(rng, 1, 4);
    s.params.add("x", random_tensor({ci, n * len}, rng));
    s.params.add("w", random_tensor({ci, co, k}, rng));
    s.params.add("b", random_tensor({co}, rng));
    s.loss = with_projection(rng.next(), [len, k](Tape<double>& t, const Binding<double>& b) {
      return ad::tconv1d(t, b["x"], b["w"], b["b"], len, k);
    });
    return s;
  });
  cases.emplace_back("linear", [=](Rng& rng) {
    CaseSetup s;
    const auto ni = dim(rng, 1, 6), no = dim(rng, 1, 5), n = dim(rng, 1, 4);
    s.params.add("x", random_tensor({ni, n}, rng));
    s.params.add("w", random_tensor({no, ni}, rng));
    s.params.add("b", random_tensor({no}, rng));
    s.loss = with_projection(rng.next(), [](Tape<double>& t, const Binding<double>& b) {
      return ad::linear(t, b["x"], b["w"], b["b"]);
    });
    return s;
  });
  cases.emplace_back("lstm_step", [=](Rng& rng) {
    CaseSetup s;
    const auto h = dim(rng, 1, 4), n = dim(rng, 1, 3);
    s.params.add("xp", random_tensor({4 * h, n}, rng));
    s.params.add("h", random_tensor({h, n}, rng));
    s.params.add("c", random_tensor({h, n}, rng));
    s.params.add("w", random_tensor({4 * h, h}, rng, 0.5));
    const std::uint64_t p1 = rng.next();
    const std::uint64_t p2 = rng.next();
    s.loss = [p1, p2](Tape<double>& t, const Binding<double>& b) {
      Rng r1(p1), r2(p2);
      auto [hn, cn] = ad::lstm_step(t, b["xp"], b["h"], b["c"], b["w"]);
      return ad::add(t, project(t, hn, r1), project(t, cn, r2));
    };
    return s;
  });
  cases.emplace_back("lstm_sequence", [=](Rng& rng) {
    CaseSetup s;
    const auto h = dim(rng, 1, 4), n = dim(rng, 1, 3), steps = dim(rng, 1, 5);
    const bool reverse = rng.index(2) == 1;
    s.params.add("xp", random_tensor({4 * h, steps * n}, rng));
    s.params.add("w", random_tensor({4 * h, h}, rng, 0.5));
    s.loss = with_projection(rng.next(), [steps, n, reverse](Tape<double>& t, const Binding<double>& b) {
      return ad::lstm_sequence(t, b["xp"], b["w"], steps, n, reverse);
    });
    return s;
  });
  cases.emplace_back("stdim_loss", [=](Rng& rng) {
    CaseSetup s;
    const auto cfg = tiny_encoder(rng);
    const std::size_t batch = dim(rng, 2, 4);
    const auto enc = build_encoder<double>(cfg, rng);
    const auto critic = build_critic<double>(cfg, rng, dim(rng, 2, 4), 1.0);
    for (const auto& [name, p] : enc) s.params.add(name, p.value);
    for (const auto& [name, p] : critic) s.params.add(name, p.value);
    // Nonzero biases so the bias gradients are exercised away from the all-zero start.
    Matrix<double> windows;
    for (int attempt = 0; attempt < 100; ++attempt) {
      for (auto& [name, p] : s.params)
        if (name.find("bias") != std::string::npos) p.value = random_tensor(p.value.dims(), rng, 0.3);
      windows = random_tensor({cfg.in_channels, 2 * batch * cfg.window_length}, rng).as_matrix();
      if (relu_margin(cfg, s.params, windows, false) > kReluMargin) break;
    }
    s.loss = [cfg, batch, windows](Tape<double>& t, const Binding<double>& b) {
      return stdim_objective(t, cfg, b, b, t.constant(windows), batch).loss;
    };
    return s;
  });
  cases.emplace_back("ae_loss", [=](Rng& rng) {
    CaseSetup s;
    const auto cfg = tiny_encoder(rng);
    const std::size_t n = dim(rng, 1, 3);
    const auto enc = build_encoder<double>(cfg, rng);
    const auto dec = build_decoder<double>(cfg, rng);
    for (const auto& [name, p] : enc) s.params.add(name, p.value);
    for (const auto& [name, p] : dec) s.params.add(name, p.value);
    Matrix<double> windows;
    for (int attempt = 0; attempt < 100; ++attempt) {
      for (auto& [name, p] : s.params)
        if (name.find("bias") != std::string::npos) p.value = random_tensor(p.value.dims(), rng, 0.3);
      windows = random_tensor({cfg.in_channels, n * cfg.window_length}, rng).as_matrix();
      if (relu_margin(cfg, s.params, windows, true) > kReluMargin) break;
    }
    s.loss = [cfg, windows](Tape<double>& t, const Binding<double>& b) {
      return ae_objective(t, cfg, b, b, t.constant(windows));
    };
    return s;
  });
  return cases;
}

}  // namespace detail

/// Runs every case on `shapes` random shapes. A case passes when all its shapes pass.
inline std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed, std::size_t shapes = 5, double h = 1e-4,
                                                      double tol = 1e-4) {
  std::vector<GradCheckCase> out;
  for (const auto& [name, factory] : detail::gradcheck_cases()) {
    for (std::size_t i = 0; i < shapes; ++i) {
      Rng rng(derive_seed(seed, {label_tag(name), i}));
      auto setup = factory(rng);
      out.push_back(GradCheckCase{name, i, finite_diff_check(setup.params, setup.loss, h, tol)});
    }
  }
  return out;
}

}  // namespace dynpre
