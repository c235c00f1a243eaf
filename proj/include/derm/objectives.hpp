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

// Training objectives for the upstream model: the in-batch sampled softmax
// between user and pin tower outputs with log-frequency correction, binary
// cross-entropy for the supervised heads, and their weighted sum.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "derm/error.hpp"
#include "derm/numerics.hpp"
#include "derm/random.hpp"

namespace derm {

inline constexpr const char* kContrastiveTerm = "contrastive";
inline constexpr std::size_t kDefaultNegativesPerPair = 15;

// Estimated in-batch frequency Q(p) per pin id.
using BatchFrequencies = std::map<std::uint64_t, double>;

inline BatchFrequencies estimate_batch_frequencies(std::span<const std::uint64_t> pin_ids) {
  if (pin_ids.empty()) fail(ErrorCode::kEmptyBatch, "cannot estimate frequencies of an empty batch");
  BatchFrequencies q;
  for (std::uint64_t id : pin_ids) q[id] += 1.0;
  const double n = static_cast<double>(pin_ids.size());
  for (auto& [id, count] : q) count /= n;
  return q;
}

struct ContrastivePair {
  Vector user;
  Vector pin;
  std::uint64_t pin_id = 0;
  bool positive = false;
};

struct ContrastiveBatch {
  std::vector<ContrastivePair> pairs;
};

struct ContrastiveResult {
  double loss = 0.0;
  bool empty_positives = false;
  std::size_t num_positives = 0;
  // Gradients w.r.t. each pair's user and pin embedding, and w.r.t. log(tau).
  std::vector<Vector> d_user;
  std::vector<Vector> d_pin;
  double d_log_tau = 0.0;
};

/// Mean over positive pairs of
///   -log( e^{s_i} / (e^{s_i} + sum_{j in N_i} e^{s_j}) ),  s_j = u_i.p_j / tau - log Q(p_j)
/// where N_i holds up to `negatives_per_pair` batch positions sampled without
/// replacement among those whose pin differs from p_i.
inline ContrastiveResult sampled_softmax_loss(const ContrastiveBatch& batch,
                                              const BatchFrequencies& q, double tau,
                                              std::size_t negatives_per_pair,
                                              std::uint64_t rng_seed) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    fail(ErrorCode::kNonPositiveTau, "temperature must be positive, got " + std::to_string(tau));
  }
  const auto& pairs = batch.pairs;
  ContrastiveResult result;
  std::size_t dim = pairs.empty() ? 0 : pairs.front().user.dim();
  std::vector<double> log_q(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].user.dim() != dim || pairs[i].pin.dim() != dim) {
      fail(ErrorCode::kDimMismatch, "contrastive batch embeddings must share one dim");
    }
    auto it = q.find(pairs[i].pin_id);
    if (it == q.end() || !(it->second > 0.0)) {
      fail(ErrorCode::kEmptyBatch, "missing frequency for pin " + std::to_string(pairs[i].pin_id));
    }
    log_q[i] = std::log(it->second);
  }
  result.d_user.assign(pairs.size(), Vector(dim));
  result.d_pin.assign(pairs.size(), Vector(dim));
  for (const auto& pair : pairs) result.num_positives += pair.positive ? 1 : 0;
  if (result.num_positives == 0) {
    result.empty_positives = true;
    return result;
  }

  Rng rng(rng_seed);
  const double inv_tau = 1.0 / tau;
  const double inv_positives = 1.0 / static_cast<double>(result.num_positives);
  std::vector<std::size_t> eligible;
  std::vector<std::size_t> candidates;
  std::vector<double> sims;
  std::vector<double> logits;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!pairs[i].positive) continue;
    eligible.clear();
    for (std::size_t j = 0; j < pairs.size(); ++j) {
      if (pairs[j].pin_id != pairs[i].pin_id) eligible.push_back(j);
    }
    const std::size_t draw = std::min(negatives_per_pair, eligible.size());
    candidates.assign(1, i);
    for (std::size_t d = 0; d < draw; ++d) {
      const std::size_t pick = d + uniform_index(rng, eligible.size() - d);
      std::swap(eligible[d], eligible[pick]);
      candidates.push_back(eligible[d]);
    }

    sims.resize(candidates.size());
    logits.resize(candidates.size());
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      sims[c] = dot(pairs[i].user, pairs[candidates[c]].pin);
      logits[c] = sims[c] * inv_tau - log_q[candidates[c]];
    }
    result.loss += (log_sum_exp(logits) - logits[0]) * inv_positives;

    const Vector probs = softmax(logits);
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      const double g = (probs[c] - (c == 0 ? 1.0 : 0.0)) * inv_positives;
      if (g == 0.0) continue;
      const std::size_t j = candidates[c];
      axpy(g * inv_tau, pairs[j].pin.values(), result.d_user[i].values());
      axpy(g * inv_tau, pairs[i].user.values(), result.d_pin[j].values());
      result.d_log_tau -= g * sims[c] * inv_tau;
    }
  }
  return result;
}

struct BceResult {
  double loss = 0.0;
  double grad = 0.0;  // d loss / d logit
};

/// Binary cross-entropy on a logit, in the overflow-free form
/// max(x, 0) - x*y + log(1 + e^{-|x|}).
inline BceResult bce_loss(double logit, int label) {
  const double y = label != 0 ? 1.0 : 0.0;
  BceResult out;
  out.loss = std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
  out.grad = sigmoid(logit) - y;
  return out;
}

/// Weighted sum of supervised task losses and the contrastive loss. Terms
/// without an explicit weight count with weight 1; the contrastive term is
/// keyed by "contrastive".
inline double combined_loss(const std::map<std::string, double>& supervised_losses,
                            double contrastive, const std::map<std::string, double>& weights) {
  for (const auto& [term, weight] : weights) {
    if (term != kContrastiveTerm && !supervised_losses.contains(term)) {
      fail(ErrorCode::kUnknownTask, "weight given for unknown task '" + term + "'");
    }
    if (!(weight >= 0.0)) {
      fail(ErrorCode::kInvalidConfig, "loss weight for '" + term + "' must be >= 0");
    }
  }
  auto weight_of = [&](const std::string& term) {
    auto it = weights.find(term);
    return it == weights.end() ? 1.0 : it->second;
  };
  double total = 0.0;
  for (const auto& [task, loss] : supervised_losses) total += weight_of(task) * loss;
  total += weight_of(kContrastiveTerm) * contrastive;
  return total;
}

}  // namespace derm
