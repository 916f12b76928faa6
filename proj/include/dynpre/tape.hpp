#pragma once

// Reverse-mode differentiation over a fixed primitive set.
//
// Every op appends one node holding its value and a backward closure. A node
// requires a gradient iff any of its inputs does, so frozen subgraphs (constant
// inputs, frozen parameters) cost nothing during backward().

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dynpre/kernels.hpp"
#include "dynpre/tensor.hpp"

namespace dynpre {

/// Handle to a node on a Tape.
struct Var {
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = kNone;
  bool valid() const { return id != kNone; }
};

template <class T>
class Tape {
 public:
  using Mat = Matrix<T>;
  using BackwardFn = std::function<void(Tape&, const Mat& out_grad)>;

  Var constant(Mat value) { return push("constant", std::move(value), false, nullptr); }
  Var parameter(Mat value) { return push("parameter", std::move(value), true, nullptr); }

  /// Appends an op result. `backward` runs only when some input requires a gradient.
  Var record(const char* op, Mat value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || nodes_[v.id].requires_grad;
    return push(op, std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool has_grad(Var v) const { return nodes_[v.id].grad.size() != 0; }

  /// Gradient accumulated at v; zeros when nothing flowed into it.
  Mat grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Mutable gradient slot, zero-initialized on first use.
  Mat& grad_slot(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every node.
  void backward(Var root) {
    if (nodes_[root.id].value.size() != 1) throw ShapeError("backward: root must be a scalar");
    if (!nodes_[root.id].requires_grad) return;
    grad_slot(root).setOnes();
    for (std::uint32_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      if (!n.grad.allFinite()) throw NonFiniteError(std::string("non-finite gradient at ") + n.op);
      const Mat g = std::move(n.grad);
      n.grad = Mat();
      n.backward(*this, g);
      n.grad = g;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const char* op;
    Mat value;
    Mat grad;
    BackwardFn backward;
    bool requires_grad;
  };

  Var push(const char* op, Mat value, bool requires_grad, BackwardFn backward) {
    if (!value.allFinite()) throw NonFiniteError(std::string("non-finite value produced by ") + op);
    nodes_.push_back(Node{op, std::move(value), Mat(), std::move(backward), requires_grad});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

namespace ad {

template <class T>
void check_same_shape(const Tape<T>& tape, Var a, Var b, const char* op) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    throw ShapeError(std::string(op) + ": operand shapes " + std::to_string(x.rows()) + "x" +
                     std::to_string(x.cols()) + " and " + std::to_string(y.rows()) + "x" +
                     std::to_string(y.cols()) + " differ");
  }
}

/// a * b
template <class T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  if (x.cols() != y.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(x.cols()) + " and " + std::to_string(y.rows()));
  }
  Matrix<T> out = x * y;
  return tape.record("matmul", std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.grad_slot(a).noalias() += g * t.value(b).transpose();
    if (t.requires_grad(b)) t.grad_slot(b).noalias() += t.value(a).transpose() * g;
  });
}

/// a^T * b
template <class T>
Var matmul_tn(Tape<T>& tape, Var a, Var b) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  if (x.rows() != y.rows()) {
    throw ShapeError("matmul_tn: row counts " + std::to_string(x.rows()) + " and " + std::to_string(y.rows()));
  }
  Matrix<T> out = x.transpose() * y;
  return tape.record("matmul_tn", std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.grad_slot(a).noalias() += t.value(b) * g.transpose();
    if (t.requires_grad(b)) t.grad_slot(b).noalias() += t.value(a) * g;
  });
}

/// x + b broadcast over columns; b is m x 1.
template <class T>
Var add_bias(Tape<T>& tape, Var x, Var b) {
  const auto& xv = tape.value(x);
  const auto& bv = tape.value(b);
  if (bv.cols() != 1 || bv.rows() != xv.rows()) throw ShapeError("add_bias: bias must be a column of matching rows");
  Matrix<T> out = xv.colwise() + bv.col(0);
  return tape.record("add_bias", std::move(out), {x, b}, [x, b](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(x)) t.grad_slot(x) += g;
    if (t.requires_grad(b)) t.grad_slot(b).col(0) += g.rowwise().sum();
  });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  check_same_shape(tape, a, b, "add");
  Matrix<T> out = tape.value(a) + tape.value(b);
  return tape.record("add", std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.grad_slot(a) += g;
    if (t.requires_grad(b)) t.grad_slot(b) += g;
  });
}

/// Elementwise product.
template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  check_same_shape(tape, a, b, "mul");
  Matrix<T> out = tape.value(a).cwiseProduct(tape.value(b));
  return tape.record("mul", std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.grad_slot(a) += g.cwiseProduct(t.value(b));
    if (t.requires_grad(b)) t.grad_slot(b) += g.cwiseProduct(t.value(a));
  });
}

template <class T>
Var scale(Tape<T>& tape, Var a, T factor) {
  Matrix<T> out = tape.value(a) * factor;
  return tape.record("scale", std::move(out), {a}, [a, factor](Tape<T>& t, const Matrix<T>& g) {
    t.grad_slot(a) += g * factor;
  });
}

/// Sum of all entries as a 1x1 value.
template <class T>
Var sum(Tape<T>& tape, Var a) {
  Matrix<T> out(1, 1);
  out(0, 0) = tape.value(a).sum();
  return tape.record("sum", std::move(out), {a}, [a](Tape<T>& t, const Matrix<T>& g) {
    t.grad_slot(a).array() += g(0, 0);
  });
}

template <class T>
Var relu(Tape<T>& tape, Var a) {
  Matrix<T> out = tape.value(a).cwiseMax(T(0));
  Var self{static_cast<std::uint32_t>(tape.size())};
  return tape.record("relu", std::move(out), {a}, [a, self](Tape<T>& t, const Matrix<T>& g) {
    t.grad_slot(a).array() += (t.value(self).array() > T(0)).select(g.array(), T(0));
  });
}

template <class T>
Var sigmoid(Tape<T>& tape, Var a) {
  Matrix<T> out = (T(1) / (T(1) + (-tape.value(a).array()).exp())).matrix();
  Var self{static_cast<std::uint32_t>(tape.size())};
  return tape.record("sigmoid", std::move(out), {a}, [a, self](Tape<T>& t, const Matrix<T>& g) {
    const auto y = t.value(self).array();
    t.grad_slot(a).array() += g.array() * y * (T(1) - y);
  });
}

template <class T>
Var tanh(Tape<T>& tape, Var a) {
  Matrix<T> out = tape.value(a).array().tanh().matrix();
  Var self{static_cast<std::uint32_t>(tape.size())};
  return tape.record("tanh", std::move(out), {a}, [a, self](Tape<T>& t, const Matrix<T>& g) {
    const auto y = t.value(self).array();
    t.grad_slot(a).array() += g.array() * (T(1) - y * y);
  });
}

template <class T>
Var im2col(Tape<T>& tape, Var x, std::size_t window_len, std::size_t k) {
  Matrix<T> out = kernels::im2col(tape.value(x), window_len, k);
  const std::size_t short_len = window_len - k + 1;
  return tape.record("im2col", std::move(out), {x}, [x, short_len, k](Tape<T>& t, const Matrix<T>& g) {
    t.grad_slot(x) += kernels::col2im(g, short_len, k);
  });
}

template <class T>
Var col2im(Tape<T>& tape, Var x, std::size_t short_len, std::size_t k) {
  Matrix<T> out = kernels::col2im(tape.value(x), short_len, k);
  const std::size_t long_len = short_len + k - 1;
  return tape.record("col2im", std::move(out), {x}, [x, long_len, k](Tape<T>& t, const Matrix<T>& g) {
    t.grad_slot(x) += kernels::im2col(g, long_len, k);
  });
}

template <class T>
Var windows_to_columns(Tape<T>& tape, Var x, std::size_t window_len) {
  Matrix<T> out = kernels::windows_to_columns(tape.value(x), window_len);
  const std::size_t channels = tape.value(x).rows();
  return tape.record("windows_to_columns", std::move(out), {x},
                     [x, channels, window_len](Tape<T>& t, const Matrix<T>& g) {
                       t.grad_slot(x) += kernels::columns_to_windows(g, channels, window_len);
                     });
}

template <class T>
Var columns_to_windows(Tape<T>& tape, Var x, std::size_t channels, std::size_t window_len) {
  Matrix<T> out = kernels::columns_to_windows(tape.value(x), channels, window_len);
  return tape.record("columns_to_windows", std::move(out), {x}, [x, window_len](Tape<T>& t, const Matrix<T>& g) {
    t.grad_slot(x) += kernels::windows_to_columns(g, window_len);
  });
}

/// Columns [start, start + count).
template <class T>
Var col_block(Tape<T>& tape, Var x, std::size_t start, std::size_t count) {
  const auto& v = tape.value(x);
  if (start + count > static_cast<std::size_t>(v.cols())) throw ShapeError("col_block: out of range");
  Matrix<T> out = v.middleCols(start, count);
  return tape.record("col_block", std::move(out), {x}, [x, start, count](Tape<T>& t, const Matrix<T>& g) {
    t.grad_slot(x).middleCols(start, count) += g;
  });
}

/// Rows [start, start + count).
template <class T>
Var row_block(Tape<T>& tape, Var x, std::size_t start, std::size_t count) {
  const auto& v = tape.value(x);
  if (start + count > static_cast<std::size_t>(v.rows())) throw ShapeError("row_block: out of range");
  Matrix<T> out = v.middleRows(start, count);
  return tape.record("row_block", std::move(out), {x}, [x, start, count](Tape<T>& t, const Matrix<T>& g) {
    t.grad_slot(x).middleRows(start, count) += g;
  });
}

/// [a; b] stacked vertically.
template <class T>
Var concat_rows(Tape<T>& tape, Var a, Var b) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  if (x.cols() != y.cols()) throw ShapeError("concat_rows: column counts differ");
  Matrix<T> out(x.rows() + y.rows(), x.cols());
  out.topRows(x.rows()) = x;
  out.bottomRows(y.rows()) = y;
  const auto top = x.rows();
  const auto bottom = y.rows();
  return tape.record("concat_rows", std::move(out), {a, b}, [a, b, top, bottom](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.grad_slot(a) += g.topRows(top);
    if (t.requires_grad(b)) t.grad_slot(b) += g.bottomRows(bottom);
  });
}

/// [a, b] side by side.
template <class T>
Var concat_cols(Tape<T>& tape, Var a, Var b) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  if (x.rows() != y.rows()) throw ShapeError("concat_cols: row counts differ");
  Matrix<T> out(x.rows(), x.cols() + y.cols());
  out.leftCols(x.cols()) = x;
  out.rightCols(y.cols()) = y;
  const auto left = x.cols();
  const auto right = y.cols();
  return tape.record("concat_cols", std::move(out), {a, b}, [a, b, left, right](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.grad_slot(a) += g.leftCols(left);
    if (t.requires_grad(b)) t.grad_slot(b) += g.rightCols(right);
  });
}

/// Mean over all elements of (prediction - target)^2.
template <class T>
Var mse(Tape<T>& tape, Var prediction, const Matrix<T>& target) {
  const auto& p = tape.value(prediction);
  if (p.rows() != target.rows() || p.cols() != target.cols()) throw ShapeError("mse: shape mismatch");
  const double n = static_cast<double>(p.size());
  const Matrix<T> diff = p - target;
  Matrix<T> out(1, 1);
  out(0, 0) = static_cast<T>(diff.template cast<double>().squaredNorm() / n);
  return tape.record("mse", std::move(out), {prediction}, [prediction, diff, n](Tape<T>& t, const Matrix<T>& g) {
    t.grad_slot(prediction) += diff * static_cast<T>(2.0 * static_cast<double>(g(0, 0)) / n);
  });
}

/// Column-wise log-sum-exp, accumulated in double.
template <class T>
Eigen::VectorXd logsumexp_cols(const Matrix<T>& x) {
  Eigen::VectorXd out(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double m = static_cast<double>(x.col(j).maxCoeff());
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) s += std::exp(static_cast<double>(x(i, j)) - m);
    out(j) = m + std::log(s);
  }
  return out;
}

/// Mean over columns of -log softmax(logits[:, b])[labels[b]]; logits are K x B.
template <class T>
Var softmax_xent(Tape<T>& tape, Var logits, const std::vector<int>& labels) {
  const auto& z = tape.value(logits);
  if (static_cast<std::size_t>(z.cols()) != labels.size() || labels.empty()) {
    throw ShapeError("softmax_xent: label count does not match batch");
  }
  const Eigen::VectorXd lse = logsumexp_cols(z);
  double total = 0.0;
  Matrix<T> dz(z.rows(), z.cols());
  const double batch = static_cast<double>(labels.size());
  for (Eigen::Index b = 0; b < z.cols(); ++b) {
    const int y = labels[b];
    if (y < 0 || y >= z.rows()) throw ShapeError("softmax_xent: label out of range");
    total += lse(b) - static_cast<double>(z(y, b));
    for (Eigen::Index k = 0; k < z.rows(); ++k) {
      const double p = std::exp(static_cast<double>(z(k, b)) - lse(b));
      dz(k, b) = static_cast<T>((p - (k == y ? 1.0 : 0.0)) / batch);
    }
  }
  Matrix<T> out(1, 1);
  out(0, 0) = static_cast<T>(total / batch);
  return tape.record("softmax_xent", std::move(out), {logits}, [logits, dz](Tape<T>& t, const Matrix<T>& g) {
    t.grad_slot(logits) += dz * g(0, 0);
  });
}

/// Sum over rows t of log( exp(S[t][t]) / sum_s exp(S[t][s]) ) for a square score matrix.
template <class T>
Var infonce(Tape<T>& tape, Var scores) {
  const auto& s = tape.value(scores);
  if (s.rows() != s.cols() || s.rows() < 2) throw ShapeError("infonce: need a square score matrix with B >= 2");
  const Matrix<T> st = s.transpose();
  const Eigen::VectorXd lse = logsumexp_cols(st);
  double total = 0.0;
  Matrix<T> ds(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    total += static_cast<double>(s(i, i)) - lse(i);
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      const double p = std::exp(static_cast<double>(s(i, j)) - lse(i));
      ds(i, j) = static_cast<T>((i == j ? 1.0 : 0.0) - p);
    }
  }
  Matrix<T> out(1, 1);
  out(0, 0) = static_cast<T>(total);
  return tape.record("infonce", std::move(out), {scores}, [scores, ds](Tape<T>& t, const Matrix<T>& g) {
    t.grad_slot(scores) += ds * g(0, 0);
  });
}

// Composite layers.

/// Stride-1 valid convolution over a batch of windows; weight viewed as C_out x (C_in*k).
template <class T>
Var conv1d(Tape<T>& tape, Var x, Var weight, Var bias, std::size_t window_len, std::size_t k) {
  if (static_cast<std::size_t>(tape.value(weight).cols()) != static_cast<std::size_t>(tape.value(x).rows()) * k) {
    throw ShapeError("conv1d: weight does not match input channels x kernel");
  }
  return add_bias(tape, matmul(tape, weight, im2col(tape, x, window_len, k)), bias);
}

/// Stride-1 transpose convolution; weight viewed as C_in x (C_out*k).
template <class T>
Var tconv1d(Tape<T>& tape, Var x, Var weight, Var bias, std::size_t window_len, std::size_t k) {
  if (tape.value(weight).rows() != tape.value(x).rows()) {
    throw ShapeError("tconv1d: weight does not match input channels");
  }
  return add_bias(tape, col2im(tape, matmul_tn(tape, weight, x), window_len, k), bias);
}

template <class T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
  return add_bias(tape, matmul(tape, weight, x), bias);
}

/// One LSTM step given the precomputed input projection x_proj = W_ih x + b (4H x B).
/// Gate order: input, forget, candidate, output.
template <class T>
std::pair<Var, Var> lstm_step(Tape<T>& tape, Var x_proj, Var h_prev, Var c_prev, Var w_hh) {
  const std::size_t hidden = tape.value(w_hh).cols();
  Var gates = add(tape, x_proj, matmul(tape, w_hh, h_prev));
  Var i = sigmoid(tape, row_block(tape, gates, 0, hidden));
  Var f = sigmoid(tape, row_block(tape, gates, hidden, hidden));
  Var g = tanh(tape, row_block(tape, gates, 2 * hidden, hidden));
  Var o = sigmoid(tape, row_block(tape, gates, 3 * hidden, hidden));
  Var c = add(tape, mul(tape, f, c_prev), mul(tape, i, g));
  Var h = mul(tape, o, tanh(tape, c));
  return {h, c};
}

/// Whole-sequence LSTM from zero state. `proj` is the input projection W_ih x + b laid out
/// as 4H x (steps * batch) with step s in column block s; `reverse` walks the blocks from
/// last to first. Returns the final hidden state (H x batch). Equivalent to chaining
/// lstm_step, with a hand-written backward pass that batches the recurrent weight gradient.
template <class T>
Var lstm_sequence(Tape<T>& tape, Var proj, Var w_hh, std::size_t steps, std::size_t batch, bool reverse) {
  const auto& p = tape.value(proj);
  const auto& w = tape.value(w_hh);
  const Eigen::Index hidden = w.cols();
  const Eigen::Index B = static_cast<Eigen::Index>(batch);
  if (w.rows() != 4 * hidden || p.rows() != 4 * hidden || static_cast<std::size_t>(p.cols()) != steps * batch ||
      steps == 0) {
    throw ShapeError("lstm_sequence: projection/recurrent weight shapes do not match");
  }
  struct Saved {
    Matrix<T> act;     // 4H x S*B gate activations (i, f, g, o)
    Matrix<T> cell;    // H x S*B cell states
    Matrix<T> h_prev;  // H x S*B hidden state entering each step
  };
  auto saved = std::make_shared<Saved>();
  saved->act.resize(4 * hidden, p.cols());
  saved->cell.resize(hidden, p.cols());
  saved->h_prev.resize(hidden, p.cols());
  Matrix<T> h = Matrix<T>::Zero(hidden, B);
  Matrix<T> c = Matrix<T>::Zero(hidden, B);
  Matrix<T> gates(4 * hidden, B);
  for (std::size_t k = 0; k < steps; ++k) {
    const std::size_t s = reverse ? steps - 1 - k : k;
    const Eigen::Index col = static_cast<Eigen::Index>(s * batch);
    saved->h_prev.middleCols(col, B) = h;
    gates.noalias() = w * h;
    gates += p.middleCols(col, B);
    auto a = saved->act.middleCols(col, B);
    a.topRows(2 * hidden) = (T(1) / (T(1) + (-gates.topRows(2 * hidden).array()).exp())).matrix();
    a.middleRows(2 * hidden, hidden) = gates.middleRows(2 * hidden, hidden).array().tanh().matrix();
    a.bottomRows(hidden) = (T(1) / (T(1) + (-gates.bottomRows(hidden).array()).exp())).matrix();
    c = (a.middleRows(hidden, hidden).array() * c.array() +
         a.topRows(hidden).array() * a.middleRows(2 * hidden, hidden).array())
            .matrix();
    saved->cell.middleCols(col, B) = c;
    h = (a.bottomRows(hidden).array() * c.array().tanh()).matrix();
  }
  return tape.record(
      "lstm_sequence", std::move(h), {proj, w_hh},
      [proj, w_hh, saved, steps, batch, reverse, hidden, B](Tape<T>& t, const Matrix<T>& g) {
        const auto& w = t.value(w_hh);
        Matrix<T> dz(4 * hidden, static_cast<Eigen::Index>(steps * batch));
        Matrix<T> dh = g;
        Matrix<T> dc = Matrix<T>::Zero(hidden, B);
        for (std::size_t k = steps; k-- > 0;) {
          const std::size_t s = reverse ? steps - 1 - k : k;
          const Eigen::Index col = static_cast<Eigen::Index>(s * batch);
          const auto a = saved->act.middleCols(col, B);
          const auto i = a.topRows(hidden).array();
          const auto f = a.middleRows(hidden, hidden).array();
          const auto gg = a.middleRows(2 * hidden, hidden).array();
          const auto o = a.bottomRows(hidden).array();
          const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic> tc = saved->cell.middleCols(col, B).array().tanh();
          dc.array() += dh.array() * o * (T(1) - tc * tc);
          auto d = dz.middleCols(col, B);
          d.topRows(hidden) = (dc.array() * gg * i * (T(1) - i)).matrix();
          if (k > 0) {
            const std::size_t sp = reverse ? s + 1 : s - 1;
            const auto c_prev = saved->cell.middleCols(static_cast<Eigen::Index>(sp * batch), B).array();
            d.middleRows(hidden, hidden) = (dc.array() * c_prev * f * (T(1) - f)).matrix();
          } else {
            d.middleRows(hidden, hidden).setZero();
          }
          d.middleRows(2 * hidden, hidden) = (dc.array() * i * (T(1) - gg * gg)).matrix();
          d.bottomRows(hidden) = (dh.array() * tc * o * (T(1) - o)).matrix();
          dc = (dc.array() * f).matrix();
          if (k > 0) dh.noalias() = w.transpose() * d;
        }
        if (t.requires_grad(proj)) t.grad_slot(proj) += dz;
        if (t.requires_grad(w_hh)) t.grad_slot(w_hh).noalias() += dz * saved->h_prev.transpose();
      });
}

}  // namespace ad
}  // namespace dynpre
