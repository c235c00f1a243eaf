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

// Daily embedding production: inference from a snapshot, last-of-day
// deduplication, aggregation into the long-lived state, retention, and the
// stability and coverage reports.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "derm/error.hpp"
#include "derm/features.hpp"
#include "derm/numerics.hpp"
#include "derm/towers.hpp"
#include "derm/trainer.hpp"

namespace derm {

struct EmbeddingRecord {
  EntityKey key;
  int day = 0;
  std::uint64_t seq = 0;  // monotone within a day, unique per record
  Vector vector;
  std::string source;

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

// Raw (pre-dedup) records for one day.
struct RawStream {
  int day = 0;
  std::vector<EmbeddingRecord> records;
};

struct DailyStreams {
  RawStream users;
  RawStream pins;
};

// Post-dedup: one record per entity, sorted by key.
struct DailyEmbeddingSet {
  int day = 0;
  std::vector<EmbeddingRecord> records;

  friend bool operator==(const DailyEmbeddingSet&, const DailyEmbeddingSet&) = default;
};

/// Embeds every entity occurrence of a day's samples. Occurrence i yields
/// user record seq 2i and pin record seq 2i+1.
inline DailyStreams infer_daily(const ModelSnapshot& snapshot, const DayPartition& day,
                                const std::string& source) {
  if (snapshot.watermark_day < day.day) {
    fail(ErrorCode::kWatermarkBehindDay, "snapshot watermark " +
                                             std::to_string(snapshot.watermark_day) +
                                             " is behind day " + std::to_string(day.day));
  }
  DailyStreams out{{day.day, {}}, {day.day, {}}};
  const UpstreamModel& m = snapshot.model;
  for (std::size_t i = 0; i < day.samples.size(); ++i) {
    const TrainingSample& s = day.samples[i];
    out.users.records.push_back({{EntityKind::kUser, s.user_id}, day.day, 2 * i,
                                 embed_entity(m.user_tower, s.user), source});
    out.pins.records.push_back({{EntityKind::kPin, s.pin_id}, day.day, 2 * i + 1,
                                embed_entity(m.pin_tower, s.pin), source});
  }
  return out;
}

/// Keeps the record with the greatest sequence number per entity.
inline DailyEmbeddingSet dedup_day(const RawStream& raw) {
  std::map<EntityKey, const EmbeddingRecord*> last;
  for (const auto& r : raw.records) {
    if (r.day != raw.day) {
      fail(ErrorCode::kMixedDays, "record for day " + std::to_string(r.day) +
                                      " in stream for day " + std::to_string(raw.day));
    }
    auto [it, inserted] = last.emplace(r.key, &r);
    if (!inserted && r.seq > it->second->seq) it->second = &r;
  }
  DailyEmbeddingSet out{raw.day, {}};
  out.records.reserve(last.size());
  for (const auto& [key, rec] : last) out.records.push_back(*rec);
  return out;
}

/// Both entity kinds of one day, deduplicated into a single set.
inline DailyEmbeddingSet dedup_streams(const DailyStreams& streams) {
  RawStream merged{streams.users.day, streams.users.records};
  merged.records.insert(merged.records.end(), streams.pins.records.begin(),
                        streams.pins.records.end());
  return dedup_day(merged);
}

/// Re-embeds every day of the window with one snapshot.
inline std::vector<DailyEmbeddingSet> back_infer(const ModelSnapshot& snapshot,
                                                 std::span<const DayPartition> window,
                                                 const std::string& source) {
  std::vector<DailyEmbeddingSet> out;
  for (const auto& day : window) {
    if (day.day < 1 || day.day > snapshot.watermark_day) {
      fail(ErrorCode::kWindowExceedsWatermark,
           "day " + std::to_string(day.day) + " outside [1, " +
               std::to_string(snapshot.watermark_day) + "]");
    }
  }
  for (const auto& day : window) out.push_back(dedup_streams(infer_daily(snapshot, day, source)));
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation.

enum class AggregationKind : std::uint8_t { kAccumulate, kMovingAverage, kAveragePool };

struct AggregationHeuristic {
  AggregationKind kind = AggregationKind::kMovingAverage;
  double weight = 0.8;  // MA only

  static AggregationHeuristic acc() { return {AggregationKind::kAccumulate, 0.0}; }
  static AggregationHeuristic ma(double w) { return {AggregationKind::kMovingAverage, w}; }
  static AggregationHeuristic ap() { return {AggregationKind::kAveragePool, 0.0}; }

  void validate() const {
    if (kind == AggregationKind::kMovingAverage && !(weight >= 0.0 && weight <= 1.0)) {
      fail(ErrorCode::kWeightOutOfRange,
           "moving-average weight " + std::to_string(weight) + " outside [0, 1]");
    }
  }

  friend bool operator==(const AggregationHeuristic&, const AggregationHeuristic&) = default;
};

// "acc", "ap", or "ma:<w>".
inline std::string to_string(const AggregationHeuristic& h) {
  switch (h.kind) {
    case AggregationKind::kAccumulate: return "acc";
    case AggregationKind::kAveragePool: return "ap";
    case AggregationKind::kMovingAverage: break;
  }
  return "ma:" + shortest_repr(h.weight);
}

inline AggregationHeuristic parse_heuristic(std::string_view text) {
  if (text == "acc") return AggregationHeuristic::acc();
  if (text == "ap") return AggregationHeuristic::ap();
  if (text.starts_with("ma:")) {
    const std::string w(text.substr(3));
    std::size_t used = 0;
    double value = 0.0;
    try {
      value = std::stod(w, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != w.size()) {
      fail(ErrorCode::kInvalidConfig, "bad moving-average weight '" + w + "'");
    }
    AggregationHeuristic h = AggregationHeuristic::ma(value);
    h.validate();
    return h;
  }
  fail(ErrorCode::kInvalidConfig, "unknown aggregation heuristic '" + std::string(text) + "'");
}

struct AggregatedEntry {
  Vector vector;
  int last_active_day = 0;
  friend bool operator==(const AggregatedEntry&, const AggregatedEntry&) = default;
};

struct AggregatedState {
  int day = 0;  // last day folded in
  AggregationHeuristic heuristic;
  std::map<EntityKey, AggregatedEntry> entries;
  std::map<EntityKey, Vector> last_daily;  // populated for AP only

  const Vector* find(const EntityKey& key) const {
    auto it = entries.find(key);
    return it == entries.end() ? nullptr : &it->second.vector;
  }

  friend bool operator==(const AggregatedState&, const AggregatedState&) = default;
};

inline AggregatedState aggregate_day(AggregatedState state, const DailyEmbeddingSet& daily,
                                     const AggregationHeuristic& h) {
  h.validate();
  if (daily.day != state.day + 1) {
    fail(ErrorCode::kDayGap, "state is at day " + std::to_string(state.day) +
                                 ", cannot fold day " + std::to_string(daily.day));
  }
  state.heuristic = h;
  for (const auto& rec : daily.records) {
    auto it = state.entries.find(rec.key);
    if (it == state.entries.end()) {
      state.entries.emplace(rec.key, AggregatedEntry{rec.vector, daily.day});
    } else {
      Vector& agg = it->second.vector;
      check_same_dim(agg.dim(), rec.vector.dim(), "aggregate_day");
      switch (h.kind) {
        case AggregationKind::kAccumulate:
          agg = rec.vector;
          break;
        case AggregationKind::kMovingAverage:
          for (std::size_t i = 0; i < agg.dim(); ++i) {
            // w * agg + (1 - w) * daily, arranged so a repeated daily vector
            // is an exact fixed point and w = 0 reproduces the daily exactly.
            agg[i] = rec.vector[i] + h.weight * (agg[i] - rec.vector[i]);
          }
          break;
        case AggregationKind::kAveragePool: {
          auto prev = state.last_daily.find(rec.key);
          if (prev == state.last_daily.end()) {
            agg = rec.vector;
          } else {
            for (std::size_t i = 0; i < agg.dim(); ++i) {
              agg[i] = 0.5 * (prev->second[i] + rec.vector[i]);
            }
          }
          break;
        }
      }
      it->second.last_active_day = daily.day;
    }
    if (h.kind == AggregationKind::kAveragePool) state.last_daily[rec.key] = rec.vector;
  }
  state.day = daily.day;
  return state;
}

/// Drops entities whose last activity is older than `window_days` before
/// `current_day`; the boundary itself is retained.
inline AggregatedState apply_retention(AggregatedState state, int current_day,
                                       int window_days = 90) {
  require(window_days >= 1, ErrorCode::kInvalidConfig, "retention window must be >= 1");
  const int oldest = current_day - window_days;
  for (auto it = state.entries.begin(); it != state.entries.end();) {
    if (it->second.last_active_day < oldest) {
      state.last_daily.erase(it->first);
      it = state.entries.erase(it);
    } else {
      ++it;
    }
  }
  return state;
}

struct StabilityReport {
  std::map<EntityKey, double> per_entity;
  double mean = 0.0;
};

inline StabilityReport stability_report(const AggregatedState& before,
                                        const AggregatedState& after) {
  StabilityReport out;
  double total = 0.0;
  for (const auto& [key, entry] : after.entries) {
    const Vector* prev = before.find(key);
    if (prev == nullptr) continue;
    const double c = cosine_similarity(*prev, entry.vector);
    out.per_entity.emplace(key, c);
    total += c;
  }
  if (out.per_entity.empty()) {
    fail(ErrorCode::kEmptyIntersection, "no entity present in both states");
  }
  out.mean = total / static_cast<double>(out.per_entity.size());
  return out;
}

struct CoverageReport {
  std::optional<double> user;  // empty when the universe has no entity of the kind
  std::optional<double> pin;
  double overall = 0.0;
};

inline CoverageReport coverage_report(const AggregatedState& state,
                                      const std::set<EntityKey>& universe) {
  if (universe.empty()) fail(ErrorCode::kEmptyUniverse, "coverage universe is empty");
  std::size_t seen[2] = {0, 0}, covered[2] = {0, 0};
  for (const auto& key : universe) {
    const auto k = static_cast<std::size_t>(key.kind);
    ++seen[k];
    if (state.entries.count(key)) ++covered[k];
  }
  auto frac = [](std::size_t c, std::size_t n) -> std::optional<double> {
    if (n == 0) return std::nullopt;
    return static_cast<double>(c) / static_cast<double>(n);
  };
  CoverageReport out;
  out.user = frac(covered[0], seen[0]);
  out.pin = frac(covered[1], seen[1]);
  out.overall = static_cast<double>(covered[0] + covered[1]) /
                static_cast<double>(seen[0] + seen[1]);
  return out;
}

/// Entities that appear in the given days.
inline std::set<EntityKey> entity_universe(std::span<const DayPartition> days) {
  std::set<EntityKey> out;
  for (const auto& d : days) {
    for (const auto& s : d.samples) {
      out.insert({EntityKind::kUser, s.user_id});
      out.insert({EntityKind::kPin, s.pin_id});
    }
  }
  return out;
}

}  // namespace derm
