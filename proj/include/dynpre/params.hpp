#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dynpre/rng.hpp"
#include "dynpre/tape.hpp"
#include "dynpre/tensor.hpp"

namespace dynpre {

/// One trainable array with its gradient slot and Adam moments (kept in double).
template <class T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

/// Ordered name -> Param map. Iteration follows insertion order.
template <class T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    Param<T> p;
    p.grad = Tensor<T>(value.dims());
    p.m.assign(value.size(), 0.0);
    p.v.assign(value.size(), 0.0);
    p.value = std::move(value);
    entries_.emplace_back(name, std::move(p));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Param<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].second;
  }
  const Param<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].second;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : entries_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, p] : entries_) p.grad.fill(T(0));
  }

  /// Values only; gradients and optimizer state are reset.
  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, p] : entries_) out.add(name, p.value.template cast<U>());
    return out;
  }

  /// True when every value tensor matches bit for bit.
  bool same_values(const ParamStore& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].first != other.entries_[i].first) return false;
      if (!(entries_[i].second.value == other.entries_[i].second.value)) return false;
    }
    return true;
  }

 private:
  std::vector<std::pair<std::string, Param<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Parameters placed on a tape as leaves.
template <class T>
class Binding {
 public:
  Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("parameter not bound: " + name);
    return it->second;
  }
  void set(const std::string& name, Var v) { vars_[name] = v; }
  const std::map<std::string, Var>& vars() const { return vars_; }

 private:
  std::map<std::string, Var> vars_;
};

/// Places every parameter of `store` on the tape; frozen parameters enter as constants.
template <class T>
Binding<T> bind(Tape<T>& tape, const ParamStore<T>& store, bool trainable) {
  Binding<T> b;
  for (const auto& [name, p] : store) {
    Matrix<T> m = p.value.as_matrix();
    b.set(name, trainable ? tape.parameter(std::move(m)) : tape.constant(std::move(m)));
  }
  return b;
}

/// Adds the tape gradients of bound parameters into the store's gradient slots.
template <class T>
void accumulate_grads(const Tape<T>& tape, const Binding<T>& binding, ParamStore<T>& store) {
  for (auto& [name, p] : store) {
    const Var v = binding[name];
    if (!tape.has_grad(v)) continue;
    const Matrix<T> g = tape.grad(v);
    if (!g.allFinite()) throw NonFiniteError("non-finite gradient for " + name);
    auto dst = p.grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g.data()[i];
  }
}

// ---------------------------------------------------------------------------
// Initialization

enum class InitKind { orthogonal, xavier, zeros };

struct InitScheme {
  InitKind kind = InitKind::orthogonal;
  double gain = 1.0;
};

/// Fan-in and fan-out as used by Xavier: (dims[1] * receptive, dims[0] * receptive).
inline std::pair<std::size_t, std::size_t> fans(const std::vector<std::size_t>& dims) {
  if (dims.size() < 2) return {dims.empty() ? 1 : dims[0], dims.empty() ? 1 : dims[0]};
  std::size_t receptive = 1;
  for (std::size_t i = 2; i < dims.size(); ++i) receptive *= dims[i];
  return {dims[1] * receptive, dims[0] * receptive};
}

/// Draws a tensor of `dims` under `scheme`. Orthogonal flattens to
/// (dims[0], product of the rest) and orthonormalizes the shorter side.
template <class T>
Tensor<T> init(const std::vector<std::size_t>& dims, const InitScheme& scheme, Rng& rng) {
  if (!(scheme.gain > 0.0) && scheme.kind != InitKind::zeros) throw std::invalid_argument("init gain must be > 0");
  Tensor<T> out(dims);
  switch (scheme.kind) {
    case InitKind::zeros:
      break;
    case InitKind::xavier: {
      const auto [fan_in, fan_out] = fans(dims);
      const double bound = scheme.gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& x : out.storage()) x = static_cast<T>(rng.uniform(-bound, bound));
      break;
    }
    case InitKind::orthogonal: {
      if (dims.size() < 2) throw std::invalid_argument("orthogonal init needs at least 2 dims, got " + dims_to_string(dims));
      const Eigen::Index rows = dims[0];
      const Eigen::Index cols = static_cast<Eigen::Index>(out.size()) / rows;
      const bool tall = rows >= cols;
      Eigen::MatrixXd g(tall ? rows : cols, tall ? cols : rows);
      for (Eigen::Index i = 0; i < g.rows(); ++i)
        for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
      Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());
      const Eigen::MatrixXd r = qr.matrixQR().topRows(g.cols()).template triangularView<Eigen::Upper>();
      for (Eigen::Index j = 0; j < q.cols(); ++j) {
        if (r(j, j) < 0) q.col(j) = -q.col(j);
      }
      Eigen::MatrixXd w = tall ? q : Eigen::MatrixXd(q.transpose());
      w *= scheme.gain;
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) out[i * cols + j] = static_cast<T>(w(i, j));
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimization

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update on every parameter whose gradient is not all zero.
template <class T>
void adam_step(ParamStore<T>& store, const AdamConfig& cfg) {
  for (auto& [name, p] : store) {
    const auto g = p.grad.data();
    bool any = false;
    for (const T& x : g) {
      if (!std::isfinite(static_cast<double>(x))) throw NonFiniteError("non-finite gradient for " + name);
      any = any || x != T(0);
    }
    if (!any) continue;
    ++p.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
    auto w = p.value.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * gi;
      p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = p.m[i] / c1;
      const double vhat = p.v[i] / c2;
      w[i] = static_cast<T>(static_cast<double>(w[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

/// Global L2 norm of the gradients across stores.
template <class T>
double grad_norm(std::initializer_list<const ParamStore<T>*> stores) {
  double s = 0.0;
  for (const auto* store : stores) {
    for (const auto& [name, p] : *store)
      for (const T& x : p.grad.data()) s += static_cast<double>(x) * static_cast<double>(x);
  }
  return std::sqrt(s);
}

/// Rescales gradients so their joint norm is at most max_norm. Returns the pre-clip norm.
template <class T>
double clip_grad_norm(std::initializer_list<ParamStore<T>*> stores, double max_norm) {
  double s = 0.0;
  for (auto* store : stores) {
    for (const auto& [name, p] : *store)
      for (const T& x : p.grad.data()) s += static_cast<double>(x) * static_cast<double>(x);
  }
  const double norm = std::sqrt(s);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (auto* store : stores)
      for (auto& [name, p] : *store)
        for (T& x : p.grad.data()) x = static_cast<T>(static_cast<double>(x) * f);
  }
  return norm;
}

struct PlateauConfig {
  double factor = 0.5;
  std::size_t patience = 10;
  double min_lr = 1e-6;
};

/// Reduced rate when the minimum of `history` (lower is better) is at least
/// `patience` entries old; otherwise `lr`. Never increases lr, never goes below min_lr.
inline double reduce_lr_on_plateau(const std::vector<double>& history, double lr, const PlateauConfig& cfg) {
  if (history.empty()) return lr;
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i] < history[best]) best = i;
  }
  if (history.size() - 1 - best >= cfg.patience) return std::max(cfg.min_lr, std::min(lr, lr * cfg.factor));
  return lr;
}

/// Stateful form: the stagnation counter restarts after every reduction.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, PlateauConfig cfg) : lr_(lr), cfg_(cfg) {}

  double step(double metric) {
    if (metric < best_) {
      best_ = metric;
      bad_ = 0;
    } else if (++bad_ >= cfg_.patience) {
      lr_ = std::max(cfg_.min_lr, std::min(lr_, lr_ * cfg_.factor));
      bad_ = 0;
    }
    return lr_;
  }

  double lr() const { return lr_; }

 private:
  double lr_;
  PlateauConfig cfg_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
};

}  // namespace dynpre
