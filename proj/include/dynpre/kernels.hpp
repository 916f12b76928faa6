#pragma once

// Layout helpers for batches of windows.
//
// A batch of N windows of C channels and length L is a C x (N*L) matrix with
// window n occupying columns [n*L, (n+1)*L). Every convolution in the library
// works on this layout and reduces to one GEMM plus one of the two gathers
// below.

#include <cstddef>

#include "dynpre/tensor.hpp"

namespace dynpre::kernels {

/// Gathers kernel-sized patches: out[c*k + j, n*Lo + t] = x[c, n*L + t + j] with Lo = L - k + 1.
template <class T>
Matrix<T> im2col(const Matrix<T>& x, std::size_t window_len, std::size_t k) {
  if (window_len < k || window_len == 0 || x.cols() % window_len != 0) {
    throw ShapeError("im2col: window length " + std::to_string(window_len) + " incompatible with kernel " +
                     std::to_string(k) + " and " + std::to_string(x.cols()) + " columns");
  }
  const std::size_t channels = x.rows();
  const std::size_t n_windows = x.cols() / window_len;
  const std::size_t out_len = window_len - k + 1;
  Matrix<T> out(channels * k, n_windows * out_len);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t j = 0; j < k; ++j) {
      T* dst = out.row(c * k + j).data();
      const T* src = x.row(c).data();
      for (std::size_t n = 0; n < n_windows; ++n) {
        std::copy_n(src + n * window_len + j, out_len, dst + n * out_len);
      }
    }
  }
  return out;
}

/// Adjoint of im2col: scatter-adds patches back into windows of length L = Li + k - 1,
/// where `cols` has C*k rows and N*Li columns.
template <class T>
Matrix<T> col2im(const Matrix<T>& cols, std::size_t short_len, std::size_t k) {
  if (k == 0 || cols.rows() % k != 0 || short_len == 0 || cols.cols() % short_len != 0) {
    throw ShapeError("col2im: shape mismatch");
  }
  const std::size_t channels = cols.rows() / k;
  const std::size_t n_windows = cols.cols() / short_len;
  const std::size_t long_len = short_len + k - 1;
  Matrix<T> out = Matrix<T>::Zero(channels, n_windows * long_len);
  for (std::size_t c = 0; c < channels; ++c) {
    T* dst = out.row(c).data();
    for (std::size_t j = 0; j < k; ++j) {
      const T* src = cols.row(c * k + j).data();
      for (std::size_t n = 0; n < n_windows; ++n) {
        T* d = dst + n * long_len + j;
        const T* s = src + n * short_len;
        for (std::size_t t = 0; t < short_len; ++t) d[t] += s[t];
      }
    }
  }
  return out;
}

/// C x (N*L) -> (C*L) x N; each window flattened channel-major into one column.
template <class T>
Matrix<T> windows_to_columns(const Matrix<T>& x, std::size_t window_len) {
  if (window_len == 0 || x.cols() % window_len != 0) throw ShapeError("windows_to_columns: shape mismatch");
  const std::size_t channels = x.rows();
  const std::size_t n_windows = x.cols() / window_len;
  Matrix<T> out(channels * window_len, n_windows);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t n = 0; n < n_windows; ++n) {
      for (std::size_t t = 0; t < window_len; ++t) out(c * window_len + t, n) = x(c, n * window_len + t);
    }
  }
  return out;
}

/// Inverse of windows_to_columns.
template <class T>
Matrix<T> columns_to_windows(const Matrix<T>& x, std::size_t channels, std::size_t window_len) {
  if (static_cast<std::size_t>(x.rows()) != channels * window_len) {
    throw ShapeError("columns_to_windows: expected " + std::to_string(channels * window_len) + " rows, got " +
                     std::to_string(x.rows()));
  }
  const std::size_t n_windows = x.cols();
  Matrix<T> out(channels, n_windows * window_len);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t n = 0; n < n_windows; ++n) {
      for (std::size_t t = 0; t < window_len; ++t) out(c, n * window_len + t) = x(c * window_len + t, n);
    }
  }
  return out;
}

}  // namespace dynpre::kernels
