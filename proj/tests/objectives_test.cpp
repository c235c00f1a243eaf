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

#include "derm/objectives.hpp"

#include <cmath>

#include "gtest/gtest.h"
#include "test_util.hpp"

namespace derm {
namespace {

ContrastiveBatch random_batch(Rng& rng, std::size_t n, std::size_t dim, std::size_t num_pins,
                              double positive_rate) {
  ContrastiveBatch batch;
  for (std::size_t i = 0; i < n; ++i) {
    batch.pairs.push_back({l2_normalize(Vector(testing::random_values(rng, dim))),
                           l2_normalize(Vector(testing::random_values(rng, dim))),
                           uniform_index(rng, num_pins), bernoulli(rng, positive_rate)});
  }
  batch.pairs[0].positive = true;
  return batch;
}

BatchFrequencies frequencies_of(const ContrastiveBatch& batch) {
  std::vector<std::uint64_t> ids;
  for (const auto& p : batch.pairs) ids.push_back(p.pin_id);
  return estimate_batch_frequencies(ids);
}

TEST(SampledSoftmax, SinglePairNoNegativesIsZero) {
  ContrastiveBatch batch;
  batch.pairs.push_back({{0.6, 0.8}, {1.0, 0.0}, 3, true});
  const auto r = sampled_softmax_loss(batch, {{3, 1.0}}, 0.07, 15, 1);
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.d_log_tau, 0.0);
}

TEST(SampledSoftmax, EqualLogitsGiveLogOfCandidates) {
  ContrastiveBatch batch;
  const Vector e = l2_normalize({1.0, 2.0, 3.0});
  for (std::uint64_t id = 0; id < 4; ++id) batch.pairs.push_back({e, e, id, id == 0});
  const auto r = sampled_softmax_loss(batch, frequencies_of(batch), 0.3, 3, 9);
  EXPECT_NEAR(r.loss, std::log(4.0), 1e-9);
  EXPECT_NEAR(r.loss, 1.386294, 1e-6);
}

TEST(SampledSoftmax, HandComputedExample) {
  ContrastiveBatch batch;
  batch.pairs.push_back({{1.0, 0.0}, {1.0, 0.0}, 0, true});
  batch.pairs.push_back({{0.0, 1.0}, {0.0, 1.0}, 1, false});
  batch.pairs.push_back({{0.0, 1.0}, {-1.0, 0.0}, 2, false});
  const auto q = frequencies_of(batch);
  const auto r = sampled_softmax_loss(batch, q, 1.0, 15, 4);
  // Direct scalar evaluation of the loss with the log Q terms kept.
  const double lq = std::log(1.0 / 3.0);
  const double pos = std::exp(1.0 - lq);
  const double want = -std::log(pos / (pos + std::exp(0.0 - lq) + std::exp(-1.0 - lq)));
  EXPECT_NEAR(r.loss, want, 1e-12);
  EXPECT_NEAR(r.loss, 0.40760596444, 1e-9);
}

TEST(SampledSoftmax, EmptyPositivesFlagged) {
  Rng rng(1);
  ContrastiveBatch batch = random_batch(rng, 5, 4, 5, 0.0);
  batch.pairs[0].positive = false;
  const auto r = sampled_softmax_loss(batch, frequencies_of(batch), 0.1, 3, 1);
  EXPECT_TRUE(r.empty_positives);
  EXPECT_EQ(r.loss, 0.0);
  for (const auto& g : r.d_user) EXPECT_EQ(l2_norm(g), 0.0);
}

TEST(SampledSoftmax, NonPositiveTau) {
  Rng rng(2);
  const ContrastiveBatch batch = random_batch(rng, 4, 4, 4, 0.5);
  try {
    sampled_softmax_loss(batch, frequencies_of(batch), 0.0, 3, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonPositiveTau);
  }
  EXPECT_THROW(sampled_softmax_loss(batch, frequencies_of(batch), -1.0, 3, 1), Error);
}

TEST(SampledSoftmax, DeterministicGivenSeed) {
  Rng rng(3);
  const ContrastiveBatch batch = random_batch(rng, 20, 6, 8, 0.4);
  const auto q = frequencies_of(batch);
  const auto a = sampled_softmax_loss(batch, q, 0.2, 4, 77);
  const auto b = sampled_softmax_loss(batch, q, 0.2, 4, 77);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.d_log_tau, b.d_log_tau);
}

TEST(SampledSoftmax, UniformFrequencyScalingInvariant) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const ContrastiveBatch batch = random_batch(rng, 12, 5, 6, 0.5);
    const auto q = frequencies_of(batch);
    const double c = std::exp(normal(rng, 0.0, 2.0));
    BatchFrequencies scaled = q;
    for (auto& [id, f] : scaled) f *= c;
    const double a = sampled_softmax_loss(batch, q, 0.1, 5, trial).loss;
    const double b = sampled_softmax_loss(batch, scaled, 0.1, 5, trial).loss;
    EXPECT_NEAR(a, b, 1e-9);
  }
}

TEST(SampledSoftmax, PositiveWithNegativesAndDistinctEmbeddings) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const ContrastiveBatch batch = random_batch(rng, 8, 4, 1000, 0.5);
    EXPECT_GT(sampled_softmax_loss(batch, frequencies_of(batch), 0.5, 1, trial).loss, 0.0);
  }
}

TEST(SampledSoftmax, MonotoneInPositiveSimilarity) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    ContrastiveBatch batch = random_batch(rng, 6, 4, 1000, 0.0);
    for (std::size_t i = 1; i < batch.pairs.size(); ++i) batch.pairs[i].positive = false;
    const auto q = frequencies_of(batch);
    const double before = sampled_softmax_loss(batch, q, 0.2, 5, 3).loss;
    // Move the positive pin towards its user: u.p strictly increases.
    Vector& p = batch.pairs[0].pin;
    const Vector& u = batch.pairs[0].user;
    if (dot(u, p) > 0.999) continue;
    Vector moved(p.dim());
    for (std::size_t i = 0; i < p.dim(); ++i) moved[i] = p[i] + 0.3 * u[i];
    const double old_sim = dot(u, p);
    p = moved;
    ASSERT_GT(dot(u, p), old_sim);
    EXPECT_LT(sampled_softmax_loss(batch, q, 0.2, 5, 3).loss, before);
  }
}

TEST(SampledSoftmax, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed : {31u, 32u, 33u}) {
    Rng rng(seed);
    const ContrastiveBatch base = random_batch(rng, 7, 3, 5, 0.6);
    const auto q = frequencies_of(base);
    const double log_tau = std::log(0.3);
    const std::size_t dim = 3, n = base.pairs.size();
    auto unpack = [&](const Vector& x, ContrastiveBatch& b) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < dim; ++d) {
          b.pairs[i].user[d] = x[(2 * i) * dim + d];
          b.pairs[i].pin[d] = x[(2 * i + 1) * dim + d];
        }
      }
      return std::exp(x[2 * n * dim]);
    };
    Vector x(2 * n * dim + 1);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < dim; ++d) {
        x[(2 * i) * dim + d] = base.pairs[i].user[d];
        x[(2 * i + 1) * dim + d] = base.pairs[i].pin[d];
      }
    }
    x[2 * n * dim] = log_tau;
    auto f = [&](const Vector& v) {
      ContrastiveBatch b = base;
      const double tau = unpack(v, b);
      return sampled_softmax_loss(b, q, tau, 4, seed).loss;
    };
    const auto r = sampled_softmax_loss(base, q, std::exp(log_tau), 4, seed);
    Vector analytic(x.dim());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < dim; ++d) {
        analytic[(2 * i) * dim + d] = r.d_user[i][d];
        analytic[(2 * i + 1) * dim + d] = r.d_pin[i][d];
      }
    }
    analytic[2 * n * dim] = r.d_log_tau;
    EXPECT_LT(check_gradient(f, x, analytic).max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(BatchFrequencies, Counting) {
  const std::vector<std::uint64_t> abcd{1, 2, 3, 4};
  for (const auto& [id, f] : estimate_batch_frequencies(abcd)) EXPECT_EQ(f, 0.25);
  const std::vector<std::uint64_t> aabb{1, 1, 2, 2};
  const auto q2 = estimate_batch_frequencies(aabb);
  EXPECT_EQ(q2.at(1), 0.5);
  EXPECT_EQ(q2.at(2), 0.5);
  const std::vector<std::uint64_t> aaab{1, 1, 1, 2};
  const auto q3 = estimate_batch_frequencies(aaab);
  EXPECT_EQ(q3.at(1), 0.75);
  EXPECT_EQ(q3.at(2), 0.25);
  try {
    estimate_batch_frequencies({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyBatch);
  }
}

TEST(Bce, Examples) {
  const auto a = bce_loss(0.0, 1);
  EXPECT_NEAR(a.loss, std::log(2.0), 1e-15);
  EXPECT_NEAR(a.grad, -0.5, 1e-15);
  const auto b = bce_loss(40.0, 1);
  EXPECT_TRUE(std::isfinite(b.loss));
  EXPECT_LT(b.loss, 1e-15);
  EXPECT_LT(std::abs(b.grad), 1e-15);
  const auto c = bce_loss(1.5, 0);
  EXPECT_NEAR(c.loss, std::log(1.0 + std::exp(1.5)), 1e-14);
  EXPECT_NEAR(c.loss, 1.70141327798, 1e-10);
  const auto d = bce_loss(-800.0, 1);
  EXPECT_NEAR(d.loss, 800.0, 1e-9);
}

TEST(Bce, GradientMatchesFiniteDifferences) {
  for (int label : {0, 1}) {
    for (double x : {-3.0, -0.2, 0.0, 0.7, 4.0}) {
      auto f = [&](const Vector& v) { return bce_loss(v[0], label).loss; };
      EXPECT_LT(check_gradient(f, {x}, {bce_loss(x, label).grad}).max_rel_error, 1e-6);
    }
  }
}

TEST(CombinedLoss, Examples) {
  const std::map<std::string, double> sup{{"click", 0.3}, {"conversion", 0.2}};
  EXPECT_NEAR(combined_loss(sup, 0.5, {{"contrastive", 0.0}}), 0.5, 1e-15);
  EXPECT_NEAR(combined_loss(sup, 0.5, {}), 1.0, 1e-15);
  EXPECT_NEAR(combined_loss(sup, 0.5, {{"contrastive", 2.0}, {"click", 0.0}, {"conversion", 1.0}}),
              1.2, 1e-15);
  try {
    combined_loss(sup, 0.5, {{"ctr", 1.0}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownTask);
  }
  EXPECT_THROW(combined_loss(sup, 0.5, {{"click", -1.0}}), Error);
}

}  // namespace
}  // namespace derm
