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

// Deterministic synthetic world: latent users and pins, noisy daily
// observations of them, and two day-partitioned impression logs (engagement
// and conversion) whose labels depend on overlapping latent subspaces.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "derm/binary_io.hpp"
#include "derm/error.hpp"
#include "derm/features.hpp"
#include "derm/numerics.hpp"
#include "derm/random.hpp"

namespace derm {

// Feature names produced by the generator.
namespace slots {
inline constexpr const char* kUserObs = "user_obs";
inline constexpr const char* kUserSegment = "user_segment";
inline constexpr const char* kUserInterests = "user_interests";
inline constexpr const char* kPinObs = "pin_obs";
inline constexpr const char* kPinCategory = "pin_category";
inline constexpr const char* kSurface = "surface";
inline constexpr const char* kHour = "hour";
}  // namespace slots

enum class Labeling : std::uint8_t { kBernoulli = 0, kThreshold = 1 };

inline std::string_view to_string(Labeling l) {
  return l == Labeling::kBernoulli ? "bernoulli" : "threshold";
}

inline Labeling parse_labeling(std::string_view text) {
  if (text == "bernoulli") return Labeling::kBernoulli;
  if (text == "threshold") return Labeling::kThreshold;
  fail(ErrorCode::kInvalidConfig, "unknown labeling '" + std::string(text) + "'");
}

enum class Dataset : std::uint8_t { kEngagement = 1, kConversion = 2 };

inline std::string_view to_string(Dataset d) {
  return d == Dataset::kEngagement ? "ctr" : "cvr";
}

struct WorldConfig {
  std::size_t num_users = 600;
  std::size_t num_pins = 300;
  std::size_t latent_dim = 12;  // click reads the first 2/3, conversion the last 2/3
  int days = 28;
  double activity_rate = 0.5;  // per user, day and dataset
  std::size_t impressions_per_active = 4;
  double click_rate = 0.3;
  double conversion_rate = 0.12;
  double signal_scale = 3.0;
  double label_noise = 0.5;  // stddev of logit noise
  double obs_noise = 1.5;    // stddev of daily feature noise
  double surface_effect = 0.3;
  double pin_popularity_exponent = 0.8;
  std::size_t num_categories = 16;
  std::size_t interests_per_day = 4;
  Labeling labeling = Labeling::kBernoulli;
  std::uint64_t seed = 7;

  std::size_t num_surfaces() const { return 3; }
  std::size_t click_dims() const { return latent_dim * 2 / 3; }
  std::size_t conversion_offset() const { return latent_dim - click_dims(); }

  void validate() const {
    auto in_unit = [](double r) { return r > 0.0 && r < 1.0; };
    require(in_unit(click_rate) && in_unit(conversion_rate) && in_unit(activity_rate),
            ErrorCode::kInvalidRates, "rates must lie in (0, 1)");
    require(conversion_rate < click_rate, ErrorCode::kInvalidRates,
            "conversion rate must be below click rate");
    require(num_users > 0 && num_pins > 0 && days > 0 && impressions_per_active > 0,
            ErrorCode::kInvalidConfig, "world sizes must be positive");
    require(latent_dim >= 3 && num_categories >= 1, ErrorCode::kInvalidConfig,
            "latent_dim must be >= 3");
    require(label_noise >= 0.0 && obs_noise >= 0.0 && signal_scale >= 0.0,
            ErrorCode::kInvalidConfig, "noise levels and signal scale must be >= 0");
  }

  friend bool operator==(const WorldConfig&, const WorldConfig&) = default;
};

struct World {
  WorldConfig config;
  std::vector<Vector> user_latent;
  std::vector<Vector> pin_latent;
  std::vector<Vector> centroids;
  std::vector<double> surface_bias;  // index 0 unused
  double click_bias = 0.0;
  double conversion_bias = 0.0;
  std::vector<DayPartition> engagement;  // days 1..D
  std::vector<DayPartition> conversion;  // days 1..D

  const std::vector<DayPartition>& dataset(Dataset d) const {
    return d == Dataset::kEngagement ? engagement : conversion;
  }
};

namespace detail {

inline double subspace_affinity(const WorldConfig& cfg, const Vector& u, const Vector& p,
                                std::string_view task) {
  const std::size_t n = cfg.click_dims();
  const std::size_t off = task == "click" ? 0 : cfg.conversion_offset();
  double s = 0.0;
  for (std::size_t i = off; i < off + n; ++i) s += u[i] * p[i];
  return s / std::sqrt(static_cast<double>(n));
}

inline std::uint64_t nearest_centroid(const std::vector<Vector>& centroids, const Vector& v) {
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centroids.size(); ++k) {
    const double s = dot(centroids[k], v);
    if (s > best_score) {
      best_score = s;
      best = k;
    }
  }
  return best + 1;
}

inline Vector noisy_copy(const Vector& v, double stddev, Rng& rng) {
  Vector out = v;
  for (double& x : out) x += normal(rng, 0.0, stddev);
  return out;
}

// Solves for the logit offset that hits `rate` on a fixed Monte Carlo sample.
inline double calibrate_bias(const World& w, std::string_view task, double rate) {
  const WorldConfig& cfg = w.config;
  Rng rng(mix_seed(cfg.seed, task == "click" ? 901 : 902));
  constexpr std::size_t kDraws = 8000;
  std::vector<double> base(kDraws);
  for (double& b : base) {
    const auto& u = w.user_latent[uniform_index(rng, cfg.num_users)];
    const auto& p = w.pin_latent[uniform_index(rng, cfg.num_pins)];
    const std::size_t surface = 1 + uniform_index(rng, cfg.num_surfaces());
    b = cfg.signal_scale * subspace_affinity(cfg, u, p, task) + w.surface_bias[surface] +
        normal(rng, 0.0, cfg.label_noise);
  }
  auto positive_rate = [&](double bias) {
    double total = 0.0;
    for (double b : base) {
      total += cfg.labeling == Labeling::kBernoulli ? sigmoid(b + bias) : (b + bias > 0.0);
    }
    return total / kDraws;
  };
  double lo = -30.0, hi = 30.0;
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    (positive_rate(mid) < rate ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

inline std::uint8_t draw_label(const WorldConfig& cfg, double logit, Rng& rng) {
  if (cfg.labeling == Labeling::kThreshold) return logit > 0.0 ? 1 : 0;
  return bernoulli(rng, sigmoid(logit)) ? 1 : 0;
}

inline std::uint64_t entity_day_salt(Dataset d, EntityKind kind, std::uint64_t id, int day) {
  return (((static_cast<std::uint64_t>(d) * 2 + static_cast<std::uint64_t>(kind)) << 48) ^
          (id << 12)) + static_cast<std::uint64_t>(day);
}

}  // namespace detail

/// The true logit offset (before noise) a sample's labels were drawn from.
inline double oracle_logit(const World& w, const TrainingSample& s, std::string_view task) {
  const auto* surface = s.context.find(slots::kSurface);
  const std::uint64_t sid = surface ? std::get<CategoricalFeature>(*surface).id : 0;
  const double bias = task == "click" ? w.click_bias : w.conversion_bias;
  return w.config.signal_scale *
             detail::subspace_affinity(w.config, w.user_latent[s.user_id], w.pin_latent[s.pin_id],
                                       task) +
         w.surface_bias.at(sid) + bias;
}

inline World generate_world(const WorldConfig& cfg) {
  cfg.validate();
  World w;
  w.config = cfg;
  Rng rng(mix_seed(cfg.seed, 1));
  for (std::size_t i = 0; i < cfg.num_users; ++i) {
    w.user_latent.push_back(detail::noisy_copy(Vector(cfg.latent_dim), 1.0, rng));
  }
  for (std::size_t i = 0; i < cfg.num_pins; ++i) {
    w.pin_latent.push_back(detail::noisy_copy(Vector(cfg.latent_dim), 1.0, rng));
  }
  for (std::size_t k = 0; k < cfg.num_categories; ++k) {
    w.centroids.push_back(l2_normalize(detail::noisy_copy(Vector(cfg.latent_dim), 1.0, rng)));
  }
  w.surface_bias = {0.0, 0.0, cfg.surface_effect, -cfg.surface_effect};
  w.click_bias = detail::calibrate_bias(w, "click", cfg.click_rate);
  w.conversion_bias = detail::calibrate_bias(w, "conversion", cfg.conversion_rate);

  // Zipf popularity over a random ranking of pins.
  std::vector<std::size_t> ranking(cfg.num_pins);
  for (std::size_t i = 0; i < cfg.num_pins; ++i) ranking[i] = i;
  shuffle_in_place(ranking, rng);
  std::vector<double> cdf(cfg.num_pins);
  double total = 0.0;
  for (std::size_t r = 0; r < cfg.num_pins; ++r) {
    total += 1.0 / std::pow(static_cast<double>(r + 1), cfg.pin_popularity_exponent);
    cdf[r] = total;
  }
  auto sample_pin = [&](Rng& r) {
    const double x = uniform01(r) * total;
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), x);
    return ranking[std::min<std::size_t>(it - cdf.begin(), cfg.num_pins - 1)];
  };

  std::vector<std::uint64_t> segment(cfg.num_users), category(cfg.num_pins);
  for (std::size_t i = 0; i < cfg.num_users; ++i) {
    segment[i] = detail::nearest_centroid(w.centroids, w.user_latent[i]);
  }
  for (std::size_t i = 0; i < cfg.num_pins; ++i) {
    category[i] = detail::nearest_centroid(w.centroids, w.pin_latent[i]);
  }
  const double jitter = 0.1 * cfg.obs_noise;

  for (Dataset ds : {Dataset::kEngagement, Dataset::kConversion}) {
    auto& out = ds == Dataset::kEngagement ? w.engagement : w.conversion;
    for (int day = 1; day <= cfg.days; ++day) {
      DayPartition part{day, {}};
      Rng day_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(ds) * 100000 + day));
      // Daily observations are drawn lazily per (entity, day, dataset) from
      // their own stream so they do not depend on sampling order.
      std::vector<Vector> user_obs(cfg.num_users), pin_obs(cfg.num_pins);
      std::vector<char> pin_seen(cfg.num_pins, 0);
      for (std::size_t u = 0; u < cfg.num_users; ++u) {
        if (!bernoulli(day_rng, cfg.activity_rate)) continue;
        Rng obs_rng(mix_seed(cfg.seed, detail::entity_day_salt(ds, EntityKind::kUser, u, day)));
        user_obs[u] = detail::noisy_copy(w.user_latent[u], cfg.obs_noise, obs_rng);
        std::vector<double> logits(cfg.num_categories);
        for (std::size_t k = 0; k < cfg.num_categories; ++k) {
          logits[k] = 1.5 * dot(w.centroids[k], w.user_latent[u]);
        }
        const Vector probs = softmax(logits);
        std::vector<std::uint64_t> interests;
        for (std::size_t j = 0; j < cfg.interests_per_day; ++j) {
          double x = uniform01(obs_rng), acc = 0.0;
          std::size_t k = 0;
          for (; k + 1 < cfg.num_categories; ++k) {
            acc += probs[k];
            if (x < acc) break;
          }
          interests.push_back(k + 1);
        }
        for (std::size_t n = 0; n < cfg.impressions_per_active; ++n) {
          const std::size_t p = sample_pin(day_rng);
          if (!pin_seen[p]) {
            Rng pin_rng(mix_seed(cfg.seed, detail::entity_day_salt(ds, EntityKind::kPin, p, day)));
            pin_obs[p] = detail::noisy_copy(w.pin_latent[p], cfg.obs_noise, pin_rng);
            pin_seen[p] = 1;
          }
          TrainingSample s;
          s.user_id = u;
          s.pin_id = p;
          s.day = day;
          s.user.set_dense(slots::kUserObs,
                           detail::noisy_copy(user_obs[u], jitter, day_rng).raw());
          s.user.set_categorical(slots::kUserSegment, segment[u]);
          s.user.set_sequence(slots::kUserInterests, interests);
          s.pin.set_dense(slots::kPinObs, detail::noisy_copy(pin_obs[p], jitter, day_rng).raw());
          s.pin.set_categorical(slots::kPinCategory, category[p]);
          s.context.set_categorical(slots::kSurface, 1 + uniform_index(day_rng, cfg.num_surfaces()));
          const double hour = 2.0 * M_PI * uniform01(day_rng);
          s.context.set_dense(slots::kHour, {std::sin(hour), std::cos(hour)});
          s.labels.click = detail::draw_label(
              cfg, oracle_logit(w, s, "click") + normal(day_rng, 0.0, cfg.label_noise), day_rng);
          s.labels.conversion = detail::draw_label(
              cfg, oracle_logit(w, s, "conversion") + normal(day_rng, 0.0, cfg.label_noise),
              day_rng);
          part.samples.push_back(std::move(s));
        }
      }
      out.push_back(std::move(part));
    }
  }
  return w;
}

/// Scores of the Bayes-optimal scorer (true latents, no noise) for the task's
/// dataset over days [first, last].
inline std::vector<double> oracle_scores(const World& w, std::string_view task, int first,
                                         int last, std::vector<int>* labels = nullptr) {
  const auto& days = w.dataset(task == "click" ? Dataset::kEngagement : Dataset::kConversion);
  std::vector<double> scores;
  for (const auto& part : days) {
    if (part.day < first || part.day > last) continue;
    for (const auto& s : part.samples) {
      scores.push_back(oracle_logit(w, s, task));
      if (labels) labels->push_back(label_for_task(s.labels, task));
    }
  }
  return scores;
}

// ---------------------------------------------------------------------------
// Day-partition files: "DDAY", version, day, count, samples, CRC-64.

inline constexpr std::string_view kDayMagic = "DDAY";
inline constexpr std::uint32_t kDayFormatVersion = 1;

inline void write_bundle(ByteWriter& w, const FeatureBundle& b) {
  w.u32(static_cast<std::uint32_t>(b.size()));
  for (const auto& [name, value] : b.entries()) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(kind_of(value)));
    if (const auto* d = std::get_if<DenseFeature>(&value)) {
      w.u32(static_cast<std::uint32_t>(d->values.size()));
      for (double x : d->values) w.f64(x);
    } else if (const auto* c = std::get_if<CategoricalFeature>(&value)) {
      w.u64(c->id);
    } else {
      const auto& ids = std::get<SequenceFeature>(value).ids;
      w.u32(static_cast<std::uint32_t>(ids.size()));
      for (auto id : ids) w.u64(id);
    }
  }
}

inline FeatureBundle read_bundle(ByteReader& r) {
  FeatureBundle b;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    const std::uint8_t kind = r.u8();
    if (kind == static_cast<std::uint8_t>(SlotKind::kDense)) {
      std::vector<double> v(r.u32());
      for (double& x : v) x = r.f64();
      b.set_dense(name, std::move(v));
    } else if (kind == static_cast<std::uint8_t>(SlotKind::kCategorical)) {
      b.set_categorical(name, r.u64());
    } else if (kind == static_cast<std::uint8_t>(SlotKind::kSequence)) {
      std::vector<std::uint64_t> ids(r.u32());
      for (auto& id : ids) id = r.u64();
      b.set_sequence(name, std::move(ids));
    } else {
      fail(ErrorCode::kCorruptFile, "unknown feature kind " + std::to_string(kind));
    }
  }
  return b;
}

inline Bytes serialize_day(const DayPartition& part) {
  ByteWriter w;
  w.raw(kDayMagic);
  w.u32(kDayFormatVersion);
  w.i32(part.day);
  w.u64(part.samples.size());
  for (const auto& s : part.samples) {
    w.u64(s.user_id);
    w.u64(s.pin_id);
    w.i32(s.day);
    w.u8(s.labels.click);
    w.u8(s.labels.conversion);
    write_bundle(w, s.user);
    write_bundle(w, s.pin);
    write_bundle(w, s.context);
  }
  w.seal();
  return w.take();
}

inline DayPartition deserialize_day(std::span<const std::uint8_t> data) {
  ByteReader r(verify_sealed(data, ErrorCode::kCorruptFile));
  if (r.raw(4) != kDayMagic) fail(ErrorCode::kCorruptFile, "bad day-partition magic");
  if (r.u32() != kDayFormatVersion) fail(ErrorCode::kCorruptFile, "unsupported day version");
  DayPartition part;
  part.day = r.i32();
  part.samples.resize(r.u64());
  for (auto& s : part.samples) {
    s.user_id = r.u64();
    s.pin_id = r.u64();
    s.day = r.i32();
    s.labels.click = r.u8();
    s.labels.conversion = r.u8();
    s.user = read_bundle(r);
    s.pin = read_bundle(r);
    s.context = read_bundle(r);
  }
  r.expect_done();
  return part;
}

inline std::filesystem::path day_path(const std::filesystem::path& root, Dataset ds, int day) {
  return root / "data" / std::string(to_string(ds)) / (std::to_string(day) + ".day");
}

inline void write_world(const std::filesystem::path& root, const World& w) {
  for (Dataset ds : {Dataset::kEngagement, Dataset::kConversion}) {
    for (const auto& part : w.dataset(ds)) {
      write_file_atomic(day_path(root, ds, part.day), serialize_day(part));
    }
  }
}

inline DayPartition load_day(const std::filesystem::path& root, Dataset ds, int day) {
  const auto path = day_path(root, ds, day);
  if (!std::filesystem::exists(path)) {
    fail(ErrorCode::kMissingPrerequisite, "missing " + path.string());
  }
  return deserialize_day(read_file(path));
}

}  // namespace derm
