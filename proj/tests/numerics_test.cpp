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

#include "derm/numerics.hpp"

#include <cmath>

#include "derm/random.hpp"
#include "gtest/gtest.h"

namespace derm {
namespace {

Vector random_vector(Rng& rng, std::size_t dim, double scale = 1.0) {
  Vector v(dim);
  for (double& x : v) x = normal(rng, 0.0, scale);
  return v;
}

TEST(L2Normalize, KnownVectors) {
  const Vector a = l2_normalize({3.0, 4.0});
  EXPECT_NEAR(a[0], 0.6, 1e-15);
  EXPECT_NEAR(a[1], 0.8, 1e-15);
  EXPECT_EQ(l2_normalize({0.0, 0.0, 5.0}), (Vector{0.0, 0.0, 1.0}));
  EXPECT_EQ(l2_normalize({1.0, 1.0, 1.0, 1.0}), (Vector{0.5, 0.5, 0.5, 0.5}));
}

TEST(L2Normalize, ZeroNormRejected) {
  try {
    l2_normalize({0.0, 0.0});
    FAIL() << "expected ZeroNorm";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kZeroNorm);
  }
  EXPECT_THROW(l2_normalize({1e-13, 0.0}), Error);
}

TEST(L2Normalize, UnitNormAndIdempotent) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector v = random_vector(rng, 1 + trial % 17, 10.0);
    const Vector n = l2_normalize(v);
    EXPECT_NEAR(l2_norm(n), 1.0, 1e-9);
    const Vector nn = l2_normalize(n);
    for (std::size_t i = 0; i < n.dim(); ++i) EXPECT_NEAR(nn[i], n[i], 1e-12);
    EXPECT_GT(dot(v, n), 0.0);  // direction preserved
  }
}

TEST(Dot, Examples) {
  EXPECT_EQ(dot(Vector{1.0, 0.0}, Vector{0.0, 1.0}), 0.0);
  EXPECT_EQ(dot(Vector{1.0, 2.0}, Vector{3.0, 4.0}), 11.0);
  const Vector u = l2_normalize({1.0, 2.0, 2.0});
  EXPECT_NEAR(dot(u, u), 1.0, 1e-15);
  EXPECT_THROW(dot(Vector{1.0}, Vector{1.0, 2.0}), Error);
}

TEST(Dot, SymmetricAndBilinear) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t dim = 1 + trial % 9;
    const Vector a = random_vector(rng, dim), b = random_vector(rng, dim),
                 c = random_vector(rng, dim);
    const double alpha = normal(rng), beta = normal(rng);
    EXPECT_EQ(dot(a, b), dot(b, a));
    Vector mix(dim);
    for (std::size_t i = 0; i < dim; ++i) mix[i] = alpha * a[i] + beta * c[i];
    EXPECT_NEAR(dot(mix, b), alpha * dot(a, b) + beta * dot(c, b), 1e-10);
  }
}

TEST(Cosine, Examples) {
  EXPECT_DOUBLE_EQ(cosine_similarity({1.0, 0.0}, {1.0, 0.0}), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity({1.0, 0.0}, {0.0, 1.0}), 0.0);
  EXPECT_NEAR(cosine_similarity({1.0, 1.0}, {1.0, 0.0}), 0.70710678118654752, 1e-15);
  EXPECT_THROW(cosine_similarity({0.0, 0.0}, {1.0, 0.0}), Error);
  EXPECT_THROW(cosine_similarity({1.0}, {1.0, 0.0}), Error);
}

TEST(Cosine, MatchesDotOfNormalized) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t dim = 1 + trial % 13;
    const Vector a = random_vector(rng, dim, 3.0), b = random_vector(rng, dim, 0.1);
    const double c = cosine_similarity(a, b);
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
    EXPECT_NEAR(c, dot(l2_normalize(a), l2_normalize(b)), 1e-9);
  }
}

TEST(Softmax, Examples) {
  const Vector u = softmax(Vector{0.0, 0.0, 0.0});
  for (double p : u) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
  for (double c : {-7.0, 0.0, 3.5, 250.0}) {
    const Vector r = softmax(Vector{c, c + std::log(2.0)});
    EXPECT_NEAR(r[0], 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(r[1], 2.0 / 3.0, 1e-12);
  }
  const Vector big = softmax(Vector{1000.0, 1001.0});
  EXPECT_NEAR(big[0], 0.2689414213699951, 1e-12);
  EXPECT_NEAR(big[1], 0.7310585786300049, 1e-12);
  EXPECT_THROW(softmax(Vector{}), Error);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector x = random_vector(rng, 1 + trial % 10, 5.0);
    const double c = normal(rng, 0.0, 50.0);
    Vector shifted = x;
    for (double& v : shifted) v += c;
    const Vector p = softmax(x), q = softmax(shifted);
    double total = 0.0;
    for (std::size_t i = 0; i < p.dim(); ++i) {
      EXPECT_NEAR(p[i], q[i], 1e-12);
      total += p[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(CheckGradient, Quadratic) {
  auto f = [](const Vector& x) { return dot(x, x); };
  const GradReport report = check_gradient(f, {1.0, 2.0}, {2.0, 4.0});
  EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(CheckGradient, SoftmaxCrossEntropy) {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const Vector x = random_vector(rng, 6, 2.0);
    auto f = [](const Vector& v) { return log_sum_exp(v.values()) - v[0]; };
    Vector grad = softmax(x);
    grad[0] -= 1.0;
    EXPECT_LT(check_gradient(f, x, grad).max_rel_error, 1e-4);
  }
}

TEST(CheckGradient, FlagsWrongGradient) {
  auto f = [](const Vector& x) { return dot(x, x); };
  const GradReport report = check_gradient(f, {1.0, 2.0}, {4.0, 8.0});
  EXPECT_NEAR(report.max_rel_error, 1.0 / 3.0, 1e-6);
  EXPECT_FALSE(report.passes(1e-4));
}

TEST(CheckGradient, NonFiniteFunction) {
  auto f = [](const Vector& x) { return std::log(x[0]); };
  EXPECT_THROW(check_gradient(f, {0.0}, {1.0}), Error);
}

TEST(Kernels, NormalizeBackwardMatchesFiniteDifferences) {
  Rng rng(4);
  const Vector v = random_vector(rng, 7);
  const Vector w = random_vector(rng, 7);
  auto f = [&](const Vector& x) { return dot(l2_normalize(x), w); };
  const Vector analytic = l2_normalize_backward(l2_normalize(v), l2_norm(v), w);
  EXPECT_LT(check_gradient(f, v, analytic).max_rel_error, 1e-6);
}

}  // namespace
}  // namespace derm
