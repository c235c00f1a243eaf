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

// Raw feature containers and the sample records that flow through training,
// inference and the downstream consumers.

#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "derm/error.hpp"

namespace derm {

enum class SlotKind : std::uint8_t { kDense = 0, kCategorical = 1, kSequence = 2 };

inline std::string_view to_string(SlotKind kind) {
  switch (kind) {
    case SlotKind::kDense: return "dense";
    case SlotKind::kCategorical: return "categorical";
    case SlotKind::kSequence: return "sequence";
  }
  return "?";
}

inline SlotKind parse_slot_kind(std::string_view text) {
  if (text == "dense") return SlotKind::kDense;
  if (text == "categorical") return SlotKind::kCategorical;
  if (text == "sequence") return SlotKind::kSequence;
  fail(ErrorCode::kInvalidConfig, "unknown slot kind '" + std::string(text) + "'");
}

// One input slot of a tower. For dense slots `dim` is the vector length; for
// categorical and sequence slots `dim` is the embedding width and
// `cardinality` the table size. Id 0 is reserved for "missing".
struct FeatureSlot {
  std::string name;
  SlotKind kind = SlotKind::kDense;
  std::size_t cardinality = 0;
  std::size_t dim = 0;

  friend bool operator==(const FeatureSlot&, const FeatureSlot&) = default;
};

struct DenseFeature {
  std::vector<double> values;
  friend bool operator==(const DenseFeature&, const DenseFeature&) = default;
};

struct CategoricalFeature {
  std::uint64_t id = 0;
  friend bool operator==(const CategoricalFeature&, const CategoricalFeature&) = default;
};

struct SequenceFeature {
  std::vector<std::uint64_t> ids;
  friend bool operator==(const SequenceFeature&, const SequenceFeature&) = default;
};

using FeatureValue = std::variant<DenseFeature, CategoricalFeature, SequenceFeature>;

inline SlotKind kind_of(const FeatureValue& value) {
  return static_cast<SlotKind>(value.index());
}

// Typed map of an entity's raw features for one (entity, day).
class FeatureBundle {
 public:
  FeatureBundle& set_dense(const std::string& name, std::vector<double> values) {
    features_[name] = DenseFeature{std::move(values)};
    return *this;
  }
  FeatureBundle& set_categorical(const std::string& name, std::uint64_t id) {
    features_[name] = CategoricalFeature{id};
    return *this;
  }
  FeatureBundle& set_sequence(const std::string& name, std::vector<std::uint64_t> ids) {
    features_[name] = SequenceFeature{std::move(ids)};
    return *this;
  }
  FeatureBundle& set(const std::string& name, FeatureValue value) {
    features_[name] = std::move(value);
    return *this;
  }

  const FeatureValue* find(const std::string& name) const {
    auto it = features_.find(name);
    return it == features_.end() ? nullptr : &it->second;
  }

  void erase(const std::string& name) { features_.erase(name); }
  std::size_t size() const { return features_.size(); }
  const std::map<std::string, FeatureValue>& entries() const { return features_; }

  friend bool operator==(const FeatureBundle&, const FeatureBundle&) = default;

 private:
  std::map<std::string, FeatureValue> features_;
};

enum class EntityKind : std::uint8_t { kUser = 0, kPin = 1 };

inline std::string_view to_string(EntityKind kind) {
  return kind == EntityKind::kUser ? "user" : "pin";
}

inline EntityKind parse_entity_kind(std::string_view text) {
  if (text == "user") return EntityKind::kUser;
  if (text == "pin") return EntityKind::kPin;
  fail(ErrorCode::kInvalidConfig, "unknown entity kind '" + std::string(text) + "'");
}

struct EntityKey {
  EntityKind kind = EntityKind::kUser;
  std::uint64_t id = 0;

  friend auto operator<=>(const EntityKey&, const EntityKey&) = default;
};

struct Labels {
  std::uint8_t click = 0;
  std::uint8_t conversion = 0;
  friend bool operator==(const Labels&, const Labels&) = default;
};

// Label value for a supervised task name ("click" or "conversion").
inline std::uint8_t label_for_task(const Labels& labels, std::string_view task) {
  if (task == "click") return labels.click;
  if (task == "conversion") return labels.conversion;
  fail(ErrorCode::kUnknownTask, "unknown task '" + std::string(task) + "'");
}

struct TrainingSample {
  std::uint64_t user_id = 0;
  std::uint64_t pin_id = 0;
  int day = 0;
  FeatureBundle user;
  FeatureBundle pin;
  FeatureBundle context;
  Labels labels;

  friend bool operator==(const TrainingSample&, const TrainingSample&) = default;
};

struct DayPartition {
  int day = 0;
  std::vector<TrainingSample> samples;
  friend bool operator==(const DayPartition&, const DayPartition&) = default;
};

}  // namespace derm
