#pragma once

// Single-sample forward primitives on Tensors. They run the same kernels the
// batched training path uses, on a throwaway tape of constants.

#include <utility>

#include "dynpre/tape.hpp"
#include "dynpre/tensor.hpp"

namespace dynpre::nn {

namespace detail {
template <class T>
Matrix<T> column(const Tensor<T>& v) {
  return Eigen::Map<const Matrix<T>>(v.data().data(), v.size(), 1);
}
template <class T>
void expect_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " + dims_to_string(t.dims()));
  }
}
}  // namespace detail

/// out[o][t] = bias[o] + sum_{c,j} weight[o][c][j] * input[c][t+j]
template <class T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::expect_rank(input, 2, "conv1d input");
  detail::expect_rank(weight, 3, "conv1d weight");
  const std::size_t c_out = weight.dims()[0], c_in = weight.dims()[1], k = weight.dims()[2];
  const std::size_t len = input.dims()[1];
  if (input.dims()[0] != c_in) throw ShapeError("conv1d: input channels do not match weight");
  if (len < k) throw ShapeError("conv1d: input length " + std::to_string(len) + " shorter than kernel " + std::to_string(k));
  if (bias.size() != c_out) throw ShapeError("conv1d: bias length does not match output channels");
  Tape<T> tape;
  Var x = tape.constant(input.as_matrix());
  Var w = tape.constant(weight.as_matrix());
  Var b = tape.constant(detail::column(bias));
  Var y = ad::conv1d(tape, x, w, b, len, k);
  return Tensor<T>::from_matrix(tape.value(y), {c_out, len - k + 1});
}

/// out[o][t] = bias[o] + sum_{c,j: 0 <= t-j < L} weight[c][o][j] * input[c][t-j]
template <class T>
Tensor<T> tconv1d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::expect_rank(input, 2, "tconv1d input");
  detail::expect_rank(weight, 3, "tconv1d weight");
  const std::size_t c_in = weight.dims()[0], c_out = weight.dims()[1], k = weight.dims()[2];
  const std::size_t len = input.dims()[1];
  if (input.dims()[0] != c_in) throw ShapeError("tconv1d: input channels do not match weight");
  if (bias.size() != c_out) throw ShapeError("tconv1d: bias length does not match output channels");
  Tape<T> tape;
  Var x = tape.constant(input.as_matrix());
  Var w = tape.constant(weight.as_matrix());
  Var b = tape.constant(detail::column(bias));
  Var y = ad::tconv1d(tape, x, w, b, len, k);
  return Tensor<T>::from_matrix(tape.value(y), {c_out, len + k - 1});
}

/// W * input + b
template <class T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::expect_rank(weight, 2, "linear weight");
  const std::size_t m = weight.dims()[0], n = weight.dims()[1];
  if (input.size() != n) throw ShapeError("linear: input length " + std::to_string(input.size()) + " != " + std::to_string(n));
  if (bias.size() != m) throw ShapeError("linear: bias length does not match output");
  Tape<T> tape;
  Var y = ad::linear(tape, tape.constant(detail::column(input)), tape.constant(weight.as_matrix()),
                     tape.constant(detail::column(bias)));
  return Tensor<T>::from_matrix(tape.value(y), {m});
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.storage()) v = std::max(v, T(0));
  return out;
}

/// Weights of one LSTM direction: w_ih (4H x n), w_hh (4H x H), bias (4H); gates i, f, g, o.
template <class T>
struct LstmWeights {
  Tensor<T> w_ih;
  Tensor<T> w_hh;
  Tensor<T> bias;
};

/// One step of the standard LSTM cell. Returns (h_t, c_t).
template <class T>
std::pair<Tensor<T>, Tensor<T>> lstm_cell(const Tensor<T>& x, const Tensor<T>& h_prev, const Tensor<T>& c_prev,
                                          const LstmWeights<T>& w) {
  const std::size_t hidden = h_prev.size();
  if (w.w_ih.rank() != 2 || w.w_ih.dims()[0] != 4 * hidden || w.w_ih.dims()[1] != x.size() ||
      w.w_hh.rank() != 2 || w.w_hh.dims()[0] != 4 * hidden || w.w_hh.dims()[1] != hidden ||
      w.bias.size() != 4 * hidden || c_prev.size() != hidden) {
    throw ShapeError("lstm_cell: weight shapes do not match input/hidden sizes");
  }
  Tape<T> tape;
  Var proj = ad::linear(tape, tape.constant(detail::column(x)), tape.constant(w.w_ih.as_matrix()),
                        tape.constant(detail::column(w.bias)));
  auto [h, c] = ad::lstm_step(tape, proj, tape.constant(detail::column(h_prev)), tape.constant(detail::column(c_prev)),
                              tape.constant(w.w_hh.as_matrix()));
  return {Tensor<T>::from_matrix(tape.value(h), {hidden}), Tensor<T>::from_matrix(tape.value(c), {hidden})};
}

/// Mean over all elements of (prediction - target)^2.
template <class T>
double loss_mse(const Tensor<T>& prediction, const Tensor<T>& target) {
  if (prediction.dims() != target.dims()) throw ShapeError("loss_mse: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = static_cast<double>(prediction[i]) - static_cast<double>(target[i]);
    s += d * d;
  }
  return s / static_cast<double>(prediction.size());
}

/// -log softmax(logits)[label]
template <class T>
double loss_softmax_xent(const Tensor<T>& logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) throw ShapeError("loss_softmax_xent: bad label");
  double m = static_cast<double>(logits[0]);
  for (const T& v : logits.data()) m = std::max(m, static_cast<double>(v));
  double s = 0.0;
  for (const T& v : logits.data()) s += std::exp(static_cast<double>(v) - m);
  return m + std::log(s) - static_cast<double>(logits[label]);
}

}  // namespace dynpre::nn
