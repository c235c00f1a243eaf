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

// Small downstream models and random samples for gradient checks.

#pragma once

#include <algorithm>
#include <vector>

#include "derm/downstream.hpp"
#include "test_util.hpp"

namespace derm::testing {

// Every component on: base features, sequence encoder, projection, cross
// layers and several experts.
inline DownstreamConfig gradient_config(std::uint64_t seed) {
  DownstreamConfig cfg;
  cfg.task = "ctr";
  cfg.derm_inputs = {"ctr-user", "cvr-pin"};
  cfg.derm_dim = 5;
  cfg.projection_dim = 4;
  cfg.base_dim = 3;
  cfg.seq_cardinality = 6;
  cfg.seq_dim = 3;
  cfg.num_experts = 3;
  cfg.cross_layers = 2;
  cfg.expert_hidden = 4;
  cfg.expert_dim = 3;
  cfg.seed = seed;
  return cfg;
}

inline std::vector<DownstreamSample> random_downstream_samples(const DownstreamConfig& cfg,
                                                               Rng& rng, std::size_t n) {
  std::vector<DownstreamSample> out(n);
  for (auto& s : out) {
    s.base = Vector(random_values(rng, cfg.base_dim));
    const std::size_t len = 1 + uniform_index(rng, 4);
    for (std::size_t i = 0; i < len; ++i) s.sequence.push_back(uniform_index(rng, cfg.seq_cardinality));
    for (std::size_t i = 0; i < cfg.derm_inputs.size(); ++i) {
      const bool present = bernoulli(rng, 0.8);
      s.derm.push_back(present ? Vector(random_values(rng, cfg.derm_dim)) : Vector(cfg.derm_dim));
      s.presence.push_back(present ? 1.0 : 0.0);
    }
    s.label = bernoulli(rng, 0.4) ? 1 : 0;
  }
  return out;
}

/// Largest per-tensor relative error between the analytic downstream
/// gradient and central differences, for one seeded model and batch.
inline double downstream_gradient_error(const DownstreamConfig& cfg) {
  Rng rng(cfg.seed);
  DownstreamModel model = make_downstream_model(cfg, rng);
  // Random (non-zero) biases so every path is exercised.
  model.visit([&](const std::string&, Matrix& m) {
    for (double& x : m.values()) x += normal(rng, 0.0, 0.2);
  });
  const auto samples = random_downstream_samples(cfg, rng, 6);
  std::vector<const DownstreamSample*> batch;
  for (const auto& s : samples) batch.push_back(&s);
  DownstreamModel grads{cfg, zeros_like(model.params)};
  downstream_batch_loss(model, batch, &grads.params);
  const auto checks =
      check_all_tensors(model, grads, [&] { return downstream_batch_loss(model, batch); });
  double worst = 0.0;
  for (const auto& c : checks) worst = std::max(worst, c.max_rel_error);
  return worst;
}

}  // namespace derm::testing
