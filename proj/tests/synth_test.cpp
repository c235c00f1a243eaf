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

#include <filesystem>
#include <set>

#include "derm/metrics.hpp"
#include "derm/synth.hpp"

namespace derm {
namespace {

WorldConfig small_world(std::uint64_t seed = 3) {
  WorldConfig cfg;
  cfg.num_users = 120;
  cfg.num_pins = 60;
  cfg.days = 6;
  cfg.seed = seed;
  return cfg;
}

double positive_rate(const World& w, Dataset ds, std::string_view task) {
  double pos = 0, n = 0;
  for (const auto& part : w.dataset(ds)) {
    for (const auto& s : part.samples) {
      pos += label_for_task(s.labels, task);
      n += 1;
    }
  }
  return pos / n;
}

TEST(WorldConfig, RejectsBadRates) {
  WorldConfig cfg;
  cfg.click_rate = 1.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = WorldConfig{};
  cfg.conversion_rate = cfg.click_rate;
  try {
    cfg.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidRates);
  }
}

TEST(GenerateWorld, SameSeedIsBitIdentical) {
  const World a = generate_world(small_world());
  const World b = generate_world(small_world());
  EXPECT_EQ(a.engagement, b.engagement);
  EXPECT_EQ(a.conversion, b.conversion);
  const World c = generate_world(small_world(4));
  EXPECT_NE(a.engagement, c.engagement);
}

TEST(GenerateWorld, ConversionSparserThanClick) {
  const World w = generate_world(WorldConfig{});
  EXPECT_LT(positive_rate(w, Dataset::kConversion, "conversion"),
            positive_rate(w, Dataset::kEngagement, "click"));
  EXPECT_NEAR(positive_rate(w, Dataset::kEngagement, "click"), 0.3, 0.05);
}

TEST(GenerateWorld, ActivityGapsExist) {
  const World w = generate_world(WorldConfig{});
  std::map<std::uint64_t, std::set<int>> active;
  for (const auto& part : w.engagement) {
    for (const auto& s : part.samples) active[s.user_id].insert(part.day);
  }
  std::size_t with_gap = 0;
  for (const auto& [u, days] : active) {
    if (days.size() < static_cast<std::size_t>(w.config.days)) ++with_gap;
  }
  EXPECT_GE(static_cast<double>(with_gap), 0.1 * static_cast<double>(w.config.num_users));
}

TEST(OracleAuc, NoiselessThresholdWorldIsSeparable) {
  WorldConfig cfg = small_world();
  cfg.label_noise = 0.0;
  cfg.labeling = Labeling::kThreshold;
  const World w = generate_world(cfg);
  for (std::string_view task : {"click", "conversion"}) {
    std::vector<int> labels;
    const auto scores = oracle_scores(w, task, 1, cfg.days, &labels);
    EXPECT_DOUBLE_EQ(roc_auc(scores, labels), 1.0) << task;
  }
}

TEST(OracleAuc, PureNoiseIsNearHalf) {
  WorldConfig cfg = small_world();
  cfg.signal_scale = 0.0;
  cfg.surface_effect = 0.0;
  const World w = generate_world(cfg);
  std::vector<int> labels;
  const auto scores = oracle_scores(w, "click", 1, cfg.days, &labels);
  // Every oracle score ties: the scorer carries no information.
  EXPECT_DOUBLE_EQ(roc_auc(scores, labels), 0.5);
}

TEST(OracleAuc, DefaultWorldIsInformative) {
  const World w = generate_world(WorldConfig{});
  std::vector<int> labels;
  const auto scores = oracle_scores(w, "click", 24, 28, &labels);
  EXPECT_GT(roc_auc(scores, labels), 0.8);
}

TEST(DayFiles, RoundTripAndCorruption) {
  const World w = generate_world(small_world());
  const DayPartition& part = w.engagement[2];
  Bytes bytes = serialize_day(part);
  EXPECT_EQ(deserialize_day(bytes), part);
  bytes[bytes.size() / 2] ^= 0x01;
  EXPECT_THROW(deserialize_day(bytes), Error);
}

TEST(DayFiles, LoadMissingNamesPath) {
  const auto root = std::filesystem::temp_directory_path() / "derm_synth_missing";
  std::filesystem::remove_all(root);
  try {
    load_day(root, Dataset::kConversion, 5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingPrerequisite);
    EXPECT_NE(std::string(e.what()).find(day_path(root, Dataset::kConversion, 5).string()),
              std::string::npos);
  }
}

TEST(DayFiles, WriteWorldThenLoad) {
  const auto root = std::filesystem::temp_directory_path() / "derm_synth_world";
  std::filesystem::remove_all(root);
  const World w = generate_world(small_world());
  write_world(root, w);
  for (int day = 1; day <= w.config.days; ++day) {
    EXPECT_EQ(load_day(root, Dataset::kEngagement, day), w.engagement[day - 1]);
    EXPECT_EQ(load_day(root, Dataset::kConversion, day), w.conversion[day - 1]);
  }
  std::filesystem::remove_all(root);
}

}  // namespace
}  // namespace derm
