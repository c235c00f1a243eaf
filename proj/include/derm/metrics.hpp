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

// Ranking metrics over (score, binary label) pairs.

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "derm/error.hpp"

namespace derm {

namespace detail {

inline void check_metric_input(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    fail(ErrorCode::kShapeMismatch, "scores and labels differ in length");
  }
}

// Indices sorted by ascending score; ties keep index order.
inline std::vector<std::size_t> order_by_score(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return idx;
}

}  // namespace detail

/// P(score+ > score-) + P(tie)/2, exact: the numerator is accumulated as the
/// integer 2 * wins + ties.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_metric_input(scores, labels);
  std::uint64_t pos = 0, neg = 0;
  for (int l : labels) (l ? pos : neg)++;
  if (pos == 0 || neg == 0) {
    fail(ErrorCode::kDegenerateLabels, "roc_auc needs at least one positive and one negative");
  }
  const auto idx = detail::order_by_score(scores);
  std::uint64_t twice_wins = 0, neg_below = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::uint64_t group_pos = 0, group_neg = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? group_pos : group_neg)++;
      ++j;
    }
    twice_wins += group_pos * (2 * neg_below + group_neg);
    neg_below += group_neg;
    i = j;
  }
  return static_cast<double>(twice_wins) / static_cast<double>(2 * pos * neg);
}

inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  return roc_auc(std::span<const double>(scores), std::span<const int>(labels));
}

/// Step-wise area under the precision-recall curve: sum over score
/// thresholds (ties grouped) of recall increment times precision.
inline double pr_auc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_metric_input(scores, labels);
  std::uint64_t pos = 0;
  for (int l : labels) pos += l ? 1 : 0;
  if (pos == 0) fail(ErrorCode::kDegenerateLabels, "pr_auc needs at least one positive");
  auto idx = detail::order_by_score(scores);
  std::reverse(idx.begin(), idx.end());
  double area = 0.0;
  std::uint64_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::uint64_t group_pos = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      group_pos += labels[idx[j]] ? 1 : 0;
      ++j;
    }
    tp += group_pos;
    seen += j - i;
    if (group_pos > 0) {
      area += (static_cast<double>(group_pos) / static_cast<double>(pos)) *
              (static_cast<double>(tp) / static_cast<double>(seen));
    }
    i = j;
  }
  return area;
}

inline double pr_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  return pr_auc(std::span<const double>(scores), std::span<const int>(labels));
}

}  // namespace derm
