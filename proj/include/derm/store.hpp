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

// Immutable embedding generations.
//
// File layout, little-endian:
//   "DERM" | version u32 | dim u32 | count u64 | generation_day u32
//   count x { kind u8 | id u64 | source u16 | dim x f32 }   sorted by key
//   crc64 u64 over everything before it

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "derm/binary_io.hpp"
#include "derm/error.hpp"
#include "derm/features.hpp"
#include "derm/lifecycle.hpp"
#include "derm/numerics.hpp"

namespace derm {

inline constexpr std::string_view kStoreMagic = "DERM";
inline constexpr std::uint32_t kStoreFormatVersion = 1;

// Source model tags and their on-disk codes.
inline std::uint16_t source_code(std::string_view tag) {
  if (tag == "ctr-upstream") return 1;
  if (tag == "cvr-upstream") return 2;
  fail(ErrorCode::kInvalidConfig, "unknown source model '" + std::string(tag) + "'");
}

inline std::string source_tag(std::uint16_t code) {
  if (code == 1) return "ctr-upstream";
  if (code == 2) return "cvr-upstream";
  return "source-" + std::to_string(code);
}

struct StoreKey {
  EntityKind kind = EntityKind::kUser;
  std::uint64_t id = 0;
  std::uint16_t source = 0;

  friend auto operator<=>(const StoreKey&, const StoreKey&) = default;
};

struct StoreKeyHash {
  std::size_t operator()(const StoreKey& k) const {
    return static_cast<std::size_t>(
        mix_seed(k.id, (static_cast<std::uint64_t>(k.kind) << 16) | k.source));
  }
};

class StoreGeneration {
 public:
  StoreGeneration() = default;

  // Vectors are cast to f32. All vectors must share one dim.
  StoreGeneration(std::uint32_t generation_day, std::vector<std::pair<StoreKey, Vector>> entries)
      : day_(generation_day) {
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& [key, v] = entries[i];
      if (i == 0) dim_ = static_cast<std::uint32_t>(v.dim());
      if (v.dim() != dim_) {
        fail(ErrorCode::kDimInconsistent, "vector dim " + std::to_string(v.dim()) +
                                              " differs from " + std::to_string(dim_));
      }
      if (i > 0 && entries[i - 1].first == key) {
        fail(ErrorCode::kDimInconsistent, "duplicate store key");
      }
      keys_.push_back(key);
      for (double x : v) data_.push_back(static_cast<float>(x));
    }
    build_index();
  }

  std::uint32_t day() const { return day_; }
  std::uint32_t dim() const { return dim_; }
  std::size_t size() const { return keys_.size(); }
  const std::vector<StoreKey>& keys() const { return keys_; }

  /// Stored f32 values, or an empty span when the key is missing.
  std::span<const float> lookup_raw(const StoreKey& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) return {};
    return std::span<const float>(data_).subspan(it->second * dim_, dim_);
  }

  bool contains(const StoreKey& key) const { return index_.count(key) > 0; }

  std::optional<Vector> lookup(const StoreKey& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    const auto raw = std::span<const float>(data_).subspan(it->second * dim_, dim_);
    Vector out(dim_);
    for (std::size_t i = 0; i < dim_; ++i) out[i] = raw[i];
    return out;
  }

  Bytes serialize() const {
    ByteWriter w;
    w.raw(kStoreMagic);
    w.u32(kStoreFormatVersion);
    w.u32(dim_);
    w.u64(keys_.size());
    w.u32(day_);
    for (std::size_t i = 0; i < keys_.size(); ++i) {
      w.u8(static_cast<std::uint8_t>(keys_[i].kind));
      w.u64(keys_[i].id);
      w.u16(keys_[i].source);
      for (std::size_t j = 0; j < dim_; ++j) w.f32(data_[i * dim_ + j]);
    }
    w.seal();
    return w.take();
  }

  static StoreGeneration deserialize(std::span<const std::uint8_t> bytes) {
    constexpr ErrorCode kBad = ErrorCode::kCorruptGeneration;
    ByteReader r(verify_sealed(bytes, kBad), kBad);
    if (r.raw(4) != kStoreMagic) fail(kBad, "bad magic");
    if (r.u32() != kStoreFormatVersion) fail(kBad, "unsupported store version");
    StoreGeneration g;
    g.dim_ = r.u32();
    const std::uint64_t count = r.u64();
    g.day_ = r.u32();
    if (count > r.remaining()) fail(kBad, "record count exceeds file size");
    g.keys_.reserve(count);
    g.data_.reserve(count * g.dim_);
    for (std::uint64_t i = 0; i < count; ++i) {
      StoreKey k;
      const std::uint8_t kind = r.u8();
      if (kind > 1) fail(kBad, "bad entity kind " + std::to_string(kind));
      k.kind = static_cast<EntityKind>(kind);
      k.id = r.u64();
      k.source = r.u16();
      if (!g.keys_.empty() && !(g.keys_.back() < k)) fail(kBad, "records not sorted");
      g.keys_.push_back(k);
      for (std::uint32_t j = 0; j < g.dim_; ++j) g.data_.push_back(r.f32());
    }
    r.expect_done();
    g.build_index();
    return g;
  }

  friend bool operator==(const StoreGeneration& a, const StoreGeneration& b) {
    return a.day_ == b.day_ && a.dim_ == b.dim_ && a.keys_ == b.keys_ && a.data_ == b.data_;
  }

 private:
  void build_index() {
    index_.clear();
    index_.reserve(keys_.size());
    for (std::size_t i = 0; i < keys_.size(); ++i) index_.emplace(keys_[i], i);
  }

  std::uint32_t day_ = 0;
  std::uint32_t dim_ = 0;
  std::vector<StoreKey> keys_;
  std::vector<float> data_;
  std::unordered_map<StoreKey, std::size_t, StoreKeyHash> index_;
};

inline StoreGeneration make_generation(const AggregatedState& state, int day,
                                       const std::string& source) {
  const std::uint16_t code = source_code(source);
  std::vector<std::pair<StoreKey, Vector>> entries;
  entries.reserve(state.entries.size());
  for (const auto& [key, entry] : state.entries) {
    entries.push_back({{key.kind, key.id, code}, entry.vector});
  }
  return StoreGeneration(static_cast<std::uint32_t>(day), std::move(entries));
}

/// Same layout for a deduplicated daily set (used for daily dumps).
inline StoreGeneration make_generation(const DailyEmbeddingSet& daily, const std::string& source) {
  const std::uint16_t code = source_code(source);
  std::vector<std::pair<StoreKey, Vector>> entries;
  for (const auto& rec : daily.records) entries.push_back({{rec.key.kind, rec.key.id, code}, rec.vector});
  return StoreGeneration(static_cast<std::uint32_t>(daily.day), std::move(entries));
}

inline std::filesystem::path generation_path(const std::filesystem::path& store_dir,
                                             const std::string& source, int day,
                                             int suffix = 0) {
  const std::string stem = std::to_string(day) + (suffix > 0 ? "." + std::to_string(suffix) : "");
  return store_dir / source / (stem + ".gen");
}

/// Writes `gen` as a new immutable generation; never touches existing files.
/// Returns the path written.
inline std::filesystem::path publish_generation(const StoreGeneration& gen,
                                                const std::string& source,
                                                const std::filesystem::path& store_dir) {
  const int day = static_cast<int>(gen.day());
  int suffix = 0;
  while (std::filesystem::exists(generation_path(store_dir, source, day, suffix))) ++suffix;
  const auto path = generation_path(store_dir, source, day, suffix);
  write_file_atomic(path, gen.serialize());
  return path;
}

inline std::filesystem::path publish(const AggregatedState& state, int day,
                                     const std::string& source,
                                     const std::filesystem::path& store_dir) {
  return publish_generation(make_generation(state, day, source), source, store_dir);
}

inline StoreGeneration load_generation(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    fail(ErrorCode::kMissingPrerequisite, "missing " + path.string());
  }
  return StoreGeneration::deserialize(read_file(path));
}

/// Newest generation file for (source, day): the highest suffix.
inline std::optional<std::filesystem::path> latest_generation(
    const std::filesystem::path& store_dir, const std::string& source, int day) {
  std::optional<std::filesystem::path> found;
  for (int suffix = 0; std::filesystem::exists(generation_path(store_dir, source, day, suffix));
       ++suffix) {
    found = generation_path(store_dir, source, day, suffix);
  }
  return found;
}

/// Merges several generations (e.g. one per source) into one servable view.
inline StoreGeneration merge_generations(std::span<const StoreGeneration> gens) {
  std::vector<std::pair<StoreKey, Vector>> entries;
  std::uint32_t day = 0;
  for (const auto& g : gens) {
    day = std::max(day, g.day());
    for (const auto& k : g.keys()) entries.push_back({k, *g.lookup(k)});
  }
  return StoreGeneration(day, std::move(entries));
}

}  // namespace derm
