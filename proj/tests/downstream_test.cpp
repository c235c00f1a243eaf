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

#include <gtest/gtest.h>

#include <cmath>

#include "derm/downstream.hpp"
#include "derm/experiment.hpp"
#include "derm/metrics.hpp"
#include "downstream_fixtures.hpp"
#include "metric_oracles.hpp"

namespace derm {
namespace {

using testing::gradient_config;
using testing::random_downstream_samples;

TEST(RocAuc, Examples) {
  EXPECT_DOUBLE_EQ(roc_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(roc_auc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}), 0.5);
  EXPECT_DOUBLE_EQ(roc_auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}), 0.75);
}

TEST(RocAuc, Errors) {
  try {
    roc_auc({0.1, 0.2}, {1, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateLabels);
  }
  try {
    roc_auc({0.1, 0.2}, {1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

TEST(RocAuc, MatchesPairCountingOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const auto [scores, labels] = testing::random_ranking_instance(rng, 200);
    EXPECT_EQ(roc_auc(scores, labels), testing::pair_counting_auc(scores, labels));
  }
}

TEST(RocAuc, InvariantUnderIncreasingTransforms) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const auto [scores, labels] = testing::random_ranking_instance(rng, 60);
    std::vector<double> affine_scores, tanh_scores;
    for (double s : scores) {
      affine_scores.push_back(2 * s + 1);
      tanh_scores.push_back(std::tanh(s));
    }
    const double base = roc_auc(scores, labels);
    EXPECT_EQ(roc_auc(affine_scores, labels), base);
    EXPECT_EQ(roc_auc(tanh_scores, labels), base);
  }
}

TEST(PrAuc, Examples) {
  EXPECT_DOUBLE_EQ(pr_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}), 1.0);
  for (int n : {2, 5, 17}) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) {
      scores.push_back(n - i);
      labels.push_back(i == n - 1 ? 1 : 0);
    }
    EXPECT_DOUBLE_EQ(pr_auc(scores, labels), 1.0 / n);
  }
  EXPECT_DOUBLE_EQ(pr_auc({0.3, 0.1, 0.7}, {1, 1, 1}), 1.0);
  try {
    pr_auc({0.3, 0.1}, {0, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateLabels);
  }
}

TEST(DownstreamConfig, Validation) {
  DownstreamConfig cfg;
  cfg.derm_inputs = {"ctr-user"};
  cfg.projection_dim = 17;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.projection_dim = 16;
  EXPECT_NO_THROW(cfg.validate());
  cfg.num_experts = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = DownstreamConfig{};
  cfg.derm_inputs = {"ctr-user", "ctr-user"};
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(Projection, IdentityAndShape) {
  Matrix eye(3, 3);
  for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1.0;
  const std::vector<double> x{0.5, -2.0, 7.0};
  EXPECT_EQ(project_embeddings(x, eye, Matrix(3, 1)), Vector(x));
  Rng rng(1);
  const Matrix w = detail::gaussian(16, 64, 0.1, rng);
  const std::vector<double> wide(64, 1.0);
  EXPECT_EQ(project_embeddings(wide, w, Matrix(16, 1)).dim(), 16u);
  try {
    project_embeddings(x, w, Matrix(16, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

TEST(CrossFlops, HalvingProjectionQuartersMatmuls) {
  DownstreamConfig cfg;
  cfg.derm_inputs = {"ctr-user", "ctr-pin", "cvr-user", "cvr-pin"};
  cfg.sequence_encoder = false;
  for (std::size_t d : {64u, 32u, 16u, 8u}) {
    cfg.projection_dim = d;
    const auto full = cross_layer_flops(cfg);
    cfg.projection_dim = d / 2;
    const auto half = cross_layer_flops(cfg);
    EXPECT_EQ(full.matmul, 4 * half.matmul);
    EXPECT_EQ(full.hadamard, 2 * half.hadamard);
  }
}

TEST(DownstreamForward, BaselineArmRunsWithoutEmbeddings) {
  DownstreamConfig cfg = gradient_config(3);
  cfg.derm_inputs.clear();
  cfg.projection_dim.reset();
  Rng rng(3);
  const auto model = make_downstream_model(cfg, rng);
  const auto samples = random_downstream_samples(cfg, rng, 4);
  for (const auto& s : samples) {
    const double a = downstream_forward(model, s);
    EXPECT_TRUE(std::isfinite(a));
    EXPECT_EQ(a, downstream_forward(model, s));
  }
}

TEST(DownstreamForward, ShapeAndIdErrors) {
  const DownstreamConfig cfg = gradient_config(4);
  Rng rng(4);
  const auto model = make_downstream_model(cfg, rng);
  auto s = random_downstream_samples(cfg, rng, 1)[0];
  auto bad = s;
  bad.derm.pop_back();
  EXPECT_THROW(downstream_forward(model, bad), Error);
  bad = s;
  bad.derm[0] = Vector(2);
  EXPECT_THROW(downstream_forward(model, bad), Error);
  bad = s;
  bad.sequence = {cfg.seq_cardinality};
  try {
    downstream_forward(model, bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownCategoricalId);
  }
}

TEST(DownstreamGradient, MatchesFiniteDifferences) {
  for (std::uint64_t seed : {21, 22, 23}) {
    EXPECT_LT(testing::downstream_gradient_error(gradient_config(seed)), 1e-4) << seed;
  }
  DownstreamConfig no_proj = gradient_config(24);
  no_proj.projection_dim.reset();
  no_proj.sequence_encoder = false;
  EXPECT_LT(testing::downstream_gradient_error(no_proj), 1e-4);
}

TEST(TrainDownstream, LearnsSeparableSignal) {
  DownstreamConfig cfg;
  cfg.derm_inputs = {"ctr-user"};
  cfg.derm_dim = 4;
  cfg.sequence_encoder = false;
  cfg.epochs = 8;
  cfg.learning_rate = 0.01;
  cfg.seed = 5;
  Rng rng(5);
  auto make = [&](std::size_t n) {
    std::vector<DownstreamSample> out(n);
    for (auto& s : out) {
      s.derm.push_back(Vector(testing::random_values(rng, 4)));
      s.presence.push_back(1.0);
      s.label = s.derm[0][0] + 0.5 * s.derm[0][1] > 0 ? 1 : 0;
    }
    return out;
  };
  const auto train = make(800);
  const auto test = make(300);
  const auto model = train_downstream(cfg, train);
  const auto report = evaluate_downstream(model, test);
  EXPECT_GT(report.roc_auc, 0.95);
  EXPECT_EQ(report.samples, 300u);
  // Same seed, same model.
  EXPECT_EQ(train_downstream(cfg, train).params, model.params);
}

TEST(Experiment, LiftsAndBaselineRequirement) {
  auto run = [](const std::string& arm, std::uint64_t seed) {
    EvalReport r;
    r.roc_auc = arm == kBaselineArm ? 0.6 : 0.66 + 0.001 * static_cast<double>(seed);
    r.pr_auc = 0.3;
    r.samples = 10;
    r.positives = 3;
    return r;
  };
  const auto table = run_sensitivity_experiment({"baseline", "a"}, {1, 2}, run);
  EXPECT_NEAR(table.arm("baseline").mean_roc_lift, 0.0, 1e-12);
  EXPECT_NEAR(table.arm("a").mean_roc_lift, 100.0 * (0.6615 - 0.6) / 0.6, 1e-9);
  const std::string csv = to_csv(table);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "arm,seed,roc_auc,pr_auc,lift");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  try {
    run_sensitivity_experiment({"a"}, {1}, run);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingBaseline);
  }
}

}  // namespace
}  // namespace derm
