/*
 * Copyright 2026 The DERM Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Dense numeric kernel shared by every model in the library. All arithmetic
// is 64-bit and every reduction runs in index order, so results are
// bit-reproducible across runs of the same binary.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "derm/error.hpp"

namespace derm {

inline constexpr double kNormEpsilon = 1e-12;

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
  Vector(std::initializer_list<double> values) : data_(values) {}
  explicit Vector(std::vector<double> values) : data_(std::move(values)) {}
  Vector(std::span<const double> values) : data_(values.begin(), values.end()) {}

  std::size_t dim() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }
  const std::vector<double>& raw() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double x) { return std::isfinite(x); });
  }

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

// Row-major dense matrix. Biases are stored as rows x 1 matrices so every
// trainable tensor in the library has the same type.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      fail(ErrorCode::kShapeMismatch,
           "matrix data has " + std::to_string(data_.size()) +
               " entries, expected " + std::to_string(rows_ * cols_));
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }
  double& operator()(std::size_t r, std::size_t c) noexcept {
    return data_[r * cols_ + c];
  }

  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> row(std::size_t r) noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }

  void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void check_same_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    fail(ErrorCode::kDimMismatch, std::string(what) + ": " + std::to_string(a) +
                                      " vs " + std::to_string(b));
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  check_same_dim(a.size(), b.size(), "dot");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] * b[i];
  return sum;
}

inline double dot(const Vector& a, const Vector& b) {
  return dot(a.values(), b.values());
}

inline double l2_norm(std::span<const double> v) {
  double sum = 0.0;
  for (double x : v) sum += x * x;
  return std::sqrt(sum);
}

inline double l2_norm(const Vector& v) { return l2_norm(v.values()); }

inline Vector l2_normalize(const Vector& v, double epsilon = kNormEpsilon) {
  const double norm = l2_norm(v);
  if (!(norm > epsilon)) {
    fail(ErrorCode::kZeroNorm,
         "cannot normalize vector with norm " + std::to_string(norm));
  }
  Vector out(v.dim());
  for (std::size_t i = 0; i < v.dim(); ++i) out[i] = v[i] / norm;
  return out;
}

inline double cosine_similarity(const Vector& a, const Vector& b,
                                double epsilon = kNormEpsilon) {
  check_same_dim(a.dim(), b.dim(), "cosine_similarity");
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (!(na > epsilon) || !(nb > epsilon)) {
    fail(ErrorCode::kZeroNorm, "cosine similarity of a zero-norm vector");
  }
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline Vector softmax(std::span<const double> logits) {
  if (logits.empty()) fail(ErrorCode::kEmptyInput, "softmax of empty input");
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  Vector out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - max_logit);
    total += out[i];
  }
  for (double& x : out) x /= total;
  return out;
}

inline Vector softmax(const Vector& logits) { return softmax(logits.values()); }

inline double log_sum_exp(std::span<const double> logits) {
  if (logits.empty()) fail(ErrorCode::kEmptyInput, "log_sum_exp of empty input");
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double x : logits) total += std::exp(x - max_logit);
  return max_logit + std::log(total);
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Kernels used by the hand-written forward/backward passes. They accumulate
// into their output so callers control zeroing.

// y += W x
inline void gemv_add(const Matrix& w, std::span<const double> x,
                     std::span<double> y) {
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto row = w.row(r);
    double sum = 0.0;
    for (std::size_t c = 0; c < w.cols(); ++c) sum += row[c] * x[c];
    y[r] += sum;
  }
}

// y += W^T x
inline void gemv_transposed_add(const Matrix& w, std::span<const double> x,
                                std::span<double> y) {
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto row = w.row(r);
    const double xr = x[r];
    if (xr == 0.0) continue;
    for (std::size_t c = 0; c < w.cols(); ++c) y[c] += row[c] * xr;
  }
}

// G += a b^T
inline void add_outer(Matrix& g, std::span<const double> a,
                      std::span<const double> b) {
  for (std::size_t r = 0; r < g.rows(); ++r) {
    const double ar = a[r];
    if (ar == 0.0) continue;
    auto row = g.row(r);
    for (std::size_t c = 0; c < g.cols(); ++c) row[c] += ar * b[c];
  }
}

// y += alpha x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

// Affine map W x + b where b is a rows x 1 matrix.
inline Vector affine(const Matrix& w, const Matrix& b, std::span<const double> x) {
  Vector out(b.values());
  gemv_add(w, x, out.values());
  return out;
}

// Backward of the exact Jacobian of v / ||v||, given the normalized output.
inline Vector l2_normalize_backward(const Vector& normalized, double norm,
                                    const Vector& grad_out) {
  const double proj = dot(normalized, grad_out);
  Vector grad_in(normalized.dim());
  for (std::size_t i = 0; i < normalized.dim(); ++i) {
    grad_in[i] = (grad_out[i] - normalized[i] * proj) / norm;
  }
  return grad_in;
}

// Backward of softmax given its output p and the gradient w.r.t. p.
inline Vector softmax_backward(const Vector& p, std::span<const double> grad_p) {
  double inner = 0.0;
  for (std::size_t i = 0; i < p.dim(); ++i) inner += p[i] * grad_p[i];
  Vector out(p.dim());
  for (std::size_t i = 0; i < p.dim(); ++i) out[i] = p[i] * (grad_p[i] - inner);
  return out;
}

inline Vector concat(std::initializer_list<std::span<const double>> parts) {
  std::size_t total = 0;
  for (auto part : parts) total += part.size();
  std::vector<double> out;
  out.reserve(total);
  for (auto part : parts) out.insert(out.end(), part.begin(), part.end());
  return Vector(std::move(out));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

struct GradReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  Vector numeric_grad;

  bool passes(double tolerance) const { return max_rel_error < tolerance; }
};

inline double symmetric_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

// Compares `analytic_grad` against central differences of `f` at `x` with
// step `h`. The relative error per coordinate is |a-n| / max(1e-8, |a|+|n|).
inline GradReport check_gradient(const std::function<double(const Vector&)>& f,
                                 const Vector& x, const Vector& analytic_grad,
                                 double h = 1e-5) {
  check_same_dim(x.dim(), analytic_grad.dim(), "check_gradient");
  GradReport report;
  report.numeric_grad = Vector(x.dim());
  Vector probe = x;
  for (std::size_t i = 0; i < x.dim(); ++i) {
    probe[i] = x[i] + h;
    const double plus = f(probe);
    probe[i] = x[i] - h;
    const double minus = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      fail(ErrorCode::kNonFiniteFunction,
           "function is not finite near coordinate " + std::to_string(i));
    }
    const double numeric = (plus - minus) / (2.0 * h);
    report.numeric_grad[i] = numeric;
    const double err = symmetric_relative_error(analytic_grad[i], numeric);
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
    }
  }
  return report;
}

/// Shortest decimal text that parses back to exactly `v`.
inline std::string shortest_repr(double v) {
  char buf[32];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace derm
