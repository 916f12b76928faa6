#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace dynpre {

/// Row-major dense matrix used for every activation and weight view.
template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Thrown when a NaN or Inf shows up in a value or gradient.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown on any dimension mismatch between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string dims_to_string(const std::vector<std::size_t>& dims) {
  std::string out = "(";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(dims[i]);
  }
  return out + ")";
}

inline std::size_t dims_product(const std::vector<std::size_t>& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

/// Shaped real array with contiguous row-major storage.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims, T fill = T(0))
      : dims_(std::move(dims)), data_(dims_product(dims_), fill) {}

  Tensor(std::vector<std::size_t> dims, std::vector<T> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != dims_product(dims_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match dims " + dims_to_string(dims_));
    }
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * row_stride() + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * row_stride() + j]; }

  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }

  bool all_finite() const {
    for (const T& x : data_) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  /// Leading dimension by (product of the rest); a 1-D tensor becomes a column.
  std::size_t matrix_rows() const { return dims_.empty() ? 1 : dims_[0]; }
  std::size_t matrix_cols() const { return dims_.empty() ? 1 : size() / std::max<std::size_t>(dims_[0], 1); }

  Matrix<T> as_matrix() const {
    Matrix<T> m(matrix_rows(), matrix_cols());
    std::copy(data_.begin(), data_.end(), m.data());
    return m;
  }

  static Tensor from_matrix(const Matrix<T>& m, std::vector<std::size_t> dims) {
    if (static_cast<std::size_t>(m.size()) != dims_product(dims)) {
      throw ShapeError("matrix of size " + std::to_string(m.size()) + " cannot take dims " +
                       dims_to_string(dims));
    }
    return Tensor(std::move(dims), std::vector<T>(m.data(), m.data() + m.size()));
  }

  static Tensor from_matrix(const Matrix<T>& m) {
    return from_matrix(m, {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(dims_, std::move(out));
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  std::size_t row_stride() const { return dims_.size() < 2 ? 1 : size() / dims_[0]; }

  std::vector<std::size_t> dims_;
  std::vector<T> data_;
};

}  // namespace dynpre
