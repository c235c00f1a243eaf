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

// Brute-force references for the ranking metrics.

#pragma once

#include <utility>
#include <vector>

#include "derm/random.hpp"

namespace derm::testing {

/// (2 * wins + ties) / (2 * P * N) over every positive/negative pair,
/// computed with the same final division as the sorting implementation.
inline double pair_counting_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::uint64_t twice = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] ? pos : neg)++;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      if (scores[i] > scores[j]) twice += 2;
      if (scores[i] == scores[j]) twice += 1;
    }
  }
  return static_cast<double>(twice) / static_cast<double>(2 * pos * neg);
}

/// Random size in [2, max_n] with at least one label of each kind; scores on
/// a coarse grid so ties are common.
inline std::pair<std::vector<double>, std::vector<int>> random_ranking_instance(Rng& rng,
                                                                               std::size_t max_n) {
  const std::size_t n = 2 + uniform_index(rng, max_n - 1);
  std::vector<double> scores(n);
  std::vector<int> labels(n);
  const std::size_t levels = 1 + uniform_index(rng, 20);
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = static_cast<double>(uniform_index(rng, levels)) / 4.0 - 1.0;
    labels[i] = bernoulli(rng, 0.35) ? 1 : 0;
  }
  labels[0] = 1;
  labels[1] = 0;
  return {scores, labels};
}

}  // namespace derm::testing
