#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "avr/error.hpp"

namespace avr {

/// Dense row-major matrix. Parameters of every module are stored this way so
/// that checkpointing and optimizers can treat them as flat arrays.
template <class T = double>
struct BasicMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  BasicMatrix() = default;
  BasicMatrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;
};

using Matrix = BasicMatrix<double>;

// out = M x (+ out when accumulate)
template <class T>
inline void gemv(const BasicMatrix<T>& m, std::span<const T> x, std::span<T> out, bool accumulate = false) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    const T* row = m.data.data() + r * m.cols;
    T acc = accumulate ? out[r] : T(0);
    for (std::size_t c = 0; c < m.cols; ++c) acc += row[c] * x[c];
    out[r] = acc;
  }
}

// out += M^T g
template <class T>
inline void gemv_t_acc(const BasicMatrix<T>& m, std::span<const T> g, std::span<T> out) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    const T* row = m.data.data() + r * m.cols;
    const T gr = g[r];
    if (gr == T(0)) continue;
    for (std::size_t c = 0; c < m.cols; ++c) out[c] += row[c] * gr;
  }
}

// M += a b^T
template <class T>
inline void outer_acc(BasicMatrix<T>& m, std::span<const T> a, std::span<const T> b) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    const T ar = a[r];
    if (ar == T(0)) continue;
    T* row = m.data.data() + r * m.cols;
    for (std::size_t c = 0; c < m.cols; ++c) row[c] += ar * b[c];
  }
}

template <class T>
inline T dot(std::span<const T> a, std::span<const T> b) {
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// softplus(z) = log(1 + e^z), evaluated without overflow.
template <class T>
inline T softplus(T z) {
  if (z > T(30)) return z + std::exp(-z);
  if (z < T(-30)) return std::exp(z);
  return std::log1p(std::exp(z));
}

template <class T>
inline T sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

/// Norm-wise relative error ||a - b||_inf / ||b||_inf. Zero when both are zero.
template <class T>
inline double max_relative_error(std::span<const T> a, std::span<const T> b) {
  require(a.size() == b.size(), ErrorKind::dimension_mismatch, "relative error of unequal lengths");
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    scale = std::max(scale, std::abs(static_cast<double>(b[i])));
  }
  if (diff == 0.0) return 0.0;
  return diff / std::max(scale, std::numeric_limits<double>::min());
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) fill used by every module's initializer.
template <class Rng>
inline void fill_fan_in(std::span<double> out, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : out) v = dist(rng);
}

template <class Rng>
inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  fill_fan_in(m.data, cols, rng);
  return m;
}

}  // namespace avr
