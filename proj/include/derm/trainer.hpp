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

// Upstream training: full-model loss and gradient for one batch, plain SGD,
// versioned snapshots, and the two-phase schedule (batch window from scratch,
// then one incremental pass per newly arrived day resumed from a snapshot).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "derm/binary_io.hpp"
#include "derm/error.hpp"
#include "derm/features.hpp"
#include "derm/numerics.hpp"
#include "derm/objectives.hpp"
#include "derm/random.hpp"
#include "derm/towers.hpp"

namespace derm {

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t batch_size = 64;
  std::size_t epochs = 2;
  double momentum = 0.0;
  std::map<std::string, double> loss_weights;  // task name or "contrastive"
  std::size_t negatives_per_pair = kDefaultNegativesPerPair;
  std::uint64_t seed = 1;

  void validate() const {
    require(learning_rate > 0.0, ErrorCode::kInvalidConfig, "learning_rate must be > 0");
    require(batch_size >= 2, ErrorCode::kInvalidConfig,
            "batch_size must be >= 2 for in-batch negatives");
    require(momentum >= 0.0 && momentum < 1.0, ErrorCode::kInvalidConfig,
            "momentum must be in [0, 1)");
    for (const auto& [term, w] : loss_weights) {
      require(w >= 0.0, ErrorCode::kInvalidConfig, "loss weight for '" + term + "' must be >= 0");
    }
  }

  double weight(const std::string& term) const {
    auto it = loss_weights.find(term);
    return it == loss_weights.end() ? 1.0 : it->second;
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct BatchLoss {
  double total = 0.0;
  std::map<std::string, double> supervised;
  double contrastive = 0.0;
  bool empty_positives = false;
};

/// Contrastive anchors are samples carrying a positive label for any of the
/// model's own tasks.
inline bool is_positive_for(const UpstreamModel& model, const TrainingSample& sample) {
  for (const auto& head : model.heads) {
    if (label_for_task(sample.labels, head.task) != 0) return true;
  }
  return false;
}

/// Combined loss of one batch; accumulates d(loss)/d(params) into `grads`
/// when it is non-null.
inline BatchLoss upstream_batch_loss(const UpstreamModel& model,
                                     std::span<const TrainingSample* const> batch,
                                     const TrainConfig& cfg, std::uint64_t contrastive_seed,
                                     UpstreamModel* grads = nullptr) {
  if (batch.empty()) fail(ErrorCode::kEmptyBatch, "empty training batch");
  const std::size_t n = batch.size();
  const std::size_t tasks = model.heads.size();
  std::vector<TowerTrace> user_traces(n), pin_traces(n);
  std::vector<InteractionTrace> inter_traces(n);
  std::vector<TaskLogits> logits(n);
  ContrastiveBatch cbatch;
  cbatch.pairs.resize(n);
  std::vector<std::uint64_t> pin_ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    const TrainingSample& s = *batch[i];
    Vector u = embed_entity(model.user_tower, s.user, &user_traces[i]);
    Vector p = embed_entity(model.pin_tower, s.pin, &pin_traces[i]);
    logits[i] = interaction_forward(model, u, p, s.context, &inter_traces[i]);
    cbatch.pairs[i] = {std::move(u), std::move(p), s.pin_id, is_positive_for(model, s)};
    pin_ids[i] = s.pin_id;
  }

  BatchLoss out;
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<std::vector<double>> d_logits(n, std::vector<double>(tasks, 0.0));
  for (std::size_t t = 0; t < tasks; ++t) {
    const std::string& task = model.heads[t].task;
    const double w = cfg.weight(task);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const BceResult bce = bce_loss(logits[i].logits[t], label_for_task(batch[i]->labels, task));
      sum += bce.loss;
      d_logits[i][t] = w * bce.grad * inv_n;
    }
    out.supervised[task] = sum * inv_n;
  }

  const BatchFrequencies q = estimate_batch_frequencies(pin_ids);
  const ContrastiveResult contrastive = sampled_softmax_loss(
      cbatch, q, model.temperature(), cfg.negatives_per_pair, contrastive_seed);
  out.contrastive = contrastive.loss;
  out.empty_positives = contrastive.empty_positives;
  out.total = combined_loss(out.supervised, out.contrastive, cfg.loss_weights);

  if (grads == nullptr) return out;
  const double wc = cfg.weight(kContrastiveTerm);
  const std::size_t dim = model.user_tower.config.output_dim();
  for (std::size_t i = 0; i < n; ++i) {
    Vector d_user(dim), d_pin(dim);
    if (wc != 0.0) {
      axpy(wc, contrastive.d_user[i].values(), d_user.values());
      axpy(wc, contrastive.d_pin[i].values(), d_pin.values());
    }
    interaction_backward(model, inter_traces[i], d_logits[i], *grads, d_user, d_pin);
    tower_backward_accumulate(model.user_tower, user_traces[i], d_user, grads->user_tower.params);
    tower_backward_accumulate(model.pin_tower, pin_traces[i], d_pin, grads->pin_tower.params);
  }
  grads->log_temperature(0, 0) += wc * contrastive.d_log_tau;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer.

/// p <- p - lr * g for each tensor, in the given order.
inline void sgd_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads,
                     double lr) {
  if (params.size() != grads.size()) {
    fail(ErrorCode::kShapeMismatch, "parameter and gradient lists differ in length");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i])) {
      fail(ErrorCode::kShapeMismatch, "gradient shape differs for tensor " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) axpy(-lr, grads[i]->values(), params[i]->values());
}

/// Heavy-ball momentum variant: v <- mu v + g, p <- p - lr v.
inline void momentum_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads,
                          std::vector<Matrix>& velocity, double lr, double mu) {
  if (velocity.empty()) {
    for (const Matrix* g : grads) velocity.emplace_back(g->rows(), g->cols());
  }
  if (velocity.size() != params.size() || grads.size() != params.size()) {
    fail(ErrorCode::kShapeMismatch, "optimizer state does not match parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto v = velocity[i].values();
    const auto g = grads[i]->values();
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = mu * v[k] + g[k];
    axpy(-lr, velocity[i].values(), params[i]->values());
  }
}

template <typename Model>
std::vector<const Matrix*> const_parameters(Model& model) {
  std::vector<const Matrix*> out;
  for (Matrix* m : model.parameters()) out.push_back(m);
  return out;
}

// ---------------------------------------------------------------------------
// Snapshots.

struct ModelSnapshot {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::uint32_t format_version = kFormatVersion;
  UpstreamModelSpec spec;
  UpstreamModel model;
  std::vector<Matrix> velocity;  // empty unless momentum is enabled
  int watermark_day = 0;
  std::string rng_state;

  friend bool operator==(const ModelSnapshot&, const ModelSnapshot&) = default;
};

namespace detail {

inline constexpr std::string_view kSnapshotMagic = "DSNP";

inline void write_tower_config(ByteWriter& w, const TowerConfig& cfg) {
  w.u32(static_cast<std::uint32_t>(cfg.input_spec.size()));
  for (const auto& slot : cfg.input_spec) {
    w.str(slot.name);
    w.u8(static_cast<std::uint8_t>(slot.kind));
    w.u64(slot.cardinality);
    w.u64(slot.dim);
  }
  w.u64(cfg.extra_dense_dim);
  w.u64(cfg.num_layers);
  w.u32(static_cast<std::uint32_t>(cfg.blocks.size()));
  for (const auto& pair : cfg.blocks) {
    w.u8(static_cast<std::uint8_t>(pair[0]));
    w.u8(static_cast<std::uint8_t>(pair[1]));
  }
  w.u64(cfg.token_dim);
  w.u64(cfg.num_tokens);
  w.u8(cfg.normalize_output ? 1 : 0);
}

inline TowerConfig read_tower_config(ByteReader& r) {
  TowerConfig cfg;
  cfg.input_spec.resize(r.u32());
  for (auto& slot : cfg.input_spec) {
    slot.name = r.str();
    const std::uint8_t kind = r.u8();
    if (kind > 2) fail(ErrorCode::kCorruptFile, "bad slot kind");
    slot.kind = static_cast<SlotKind>(kind);
    slot.cardinality = r.u64();
    slot.dim = r.u64();
  }
  cfg.extra_dense_dim = r.u64();
  cfg.num_layers = r.u64();
  cfg.blocks.resize(r.u32());
  for (auto& pair : cfg.blocks) {
    for (auto& kind : pair) {
      const std::uint8_t k = r.u8();
      if (k > 2) fail(ErrorCode::kCorruptFile, "bad block kind");
      kind = static_cast<BlockKind>(k);
    }
  }
  cfg.token_dim = r.u64();
  cfg.num_tokens = r.u64();
  cfg.normalize_output = r.u8() != 0;
  return cfg;
}

inline void write_matrix(ByteWriter& w, const std::string& name, const Matrix& m) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (double x : m.values()) w.f64(x);
}

inline void read_matrix_into(ByteReader& r, const std::string& expected_name, Matrix& m) {
  const std::string name = r.str();
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  if (name != expected_name || rows != m.rows() || cols != m.cols()) {
    fail(ErrorCode::kCorruptFile, "snapshot tensor '" + name + "' does not match model tensor '" +
                                      expected_name + "'");
  }
  for (double& x : m.values()) x = r.f64();
}

}  // namespace detail

/// Layout (little-endian): "DSNP", u32 version, i32 watermark_day, model spec,
/// u32 tensor count, tensors {name, u32 rows, u32 cols, f64 data}, u32
/// velocity count, velocity tensors, rng state string, u64 CRC-64.
inline Bytes serialize_snapshot(const ModelSnapshot& snap) {
  ByteWriter w;
  w.raw(detail::kSnapshotMagic);
  w.u32(snap.format_version);
  w.i32(snap.watermark_day);
  const auto& spec = snap.spec;
  w.str(spec.name);
  detail::write_tower_config(w, spec.user);
  detail::write_tower_config(w, spec.pin);
  detail::write_tower_config(w, spec.interaction);
  w.u32(static_cast<std::uint32_t>(spec.tasks.size()));
  for (const auto& t : spec.tasks) w.str(t);
  w.f64(spec.initial_temperature);
  w.u64(spec.init_seed);

  std::vector<std::pair<std::string, const Matrix*>> tensors;
  const_cast<UpstreamModel&>(snap.model).visit(
      [&](const std::string& name, Matrix& m) { tensors.emplace_back(name, &m); });
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) detail::write_matrix(w, name, *m);
  w.u32(static_cast<std::uint32_t>(snap.velocity.size()));
  for (std::size_t i = 0; i < snap.velocity.size(); ++i) {
    detail::write_matrix(w, tensors.at(i).first, snap.velocity[i]);
  }
  w.str(snap.rng_state);
  w.seal();
  return w.take();
}

inline ModelSnapshot deserialize_snapshot(std::span<const std::uint8_t> data) {
  const auto body = verify_sealed(data, ErrorCode::kCorruptFile);
  ByteReader r(body);
  if (r.raw(4) != detail::kSnapshotMagic) fail(ErrorCode::kCorruptFile, "not a snapshot file");
  ModelSnapshot snap;
  snap.format_version = r.u32();
  if (snap.format_version != ModelSnapshot::kFormatVersion) {
    fail(ErrorCode::kCorruptFile,
         "unsupported snapshot version " + std::to_string(snap.format_version));
  }
  snap.watermark_day = r.i32();
  auto& spec = snap.spec;
  spec.name = r.str();
  spec.user = detail::read_tower_config(r);
  spec.pin = detail::read_tower_config(r);
  spec.interaction = detail::read_tower_config(r);
  spec.tasks.resize(r.u32());
  for (auto& t : spec.tasks) t = r.str();
  spec.initial_temperature = r.f64();
  spec.init_seed = r.u64();

  snap.model = make_upstream_model(spec);
  std::vector<std::pair<std::string, Matrix*>> tensors;
  snap.model.visit([&](const std::string& name, Matrix& m) { tensors.emplace_back(name, &m); });
  if (r.u32() != tensors.size()) fail(ErrorCode::kCorruptFile, "snapshot tensor count mismatch");
  for (auto& [name, m] : tensors) detail::read_matrix_into(r, name, *m);
  const std::uint32_t velocity_count = r.u32();
  if (velocity_count != 0 && velocity_count != tensors.size()) {
    fail(ErrorCode::kCorruptFile, "snapshot optimizer state count mismatch");
  }
  for (std::uint32_t i = 0; i < velocity_count; ++i) {
    Matrix v(tensors[i].second->rows(), tensors[i].second->cols());
    detail::read_matrix_into(r, tensors[i].first, v);
    snap.velocity.push_back(std::move(v));
  }
  snap.rng_state = r.str();
  r.expect_done();
  return snap;
}

inline std::filesystem::path snapshot_path(const std::filesystem::path& root,
                                           const std::string& model, int day) {
  return root / "snapshots" / model / (std::to_string(day) + ".snap");
}

inline void save_snapshot(const std::filesystem::path& path, const ModelSnapshot& snap) {
  write_file_atomic(path, serialize_snapshot(snap));
}

inline ModelSnapshot load_snapshot(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    fail(ErrorCode::kMissingPrerequisite, "snapshot not found: " + path.string());
  }
  return deserialize_snapshot(read_file(path));
}

// ---------------------------------------------------------------------------
// Training schedule.

/// Single-threaded, deterministic training session. All mutable state
/// (parameters, optimizer state, RNG, watermark) round-trips through
/// ModelSnapshot, so a session rebuilt from a snapshot continues exactly
/// where the original left off.
class UpstreamTrainer {
 public:
  UpstreamTrainer(const UpstreamModelSpec& spec, const TrainConfig& cfg)
      : cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
    snap_.spec = spec;
    snap_.model = make_upstream_model(spec);
    grads_ = zeros_like(snap_.model);
  }

  UpstreamTrainer(ModelSnapshot snapshot, const TrainConfig& cfg)
      : cfg_(cfg), snap_(std::move(snapshot)), rng_(load_rng(snap_.rng_state)) {
    cfg_.validate();
    grads_ = zeros_like(snap_.model);
  }

  /// One shuffled pass over a day's samples.
  void train_pass(const DayPartition& day) {
    std::vector<const TrainingSample*> order;
    order.reserve(day.samples.size());
    for (const auto& s : day.samples) order.push_back(&s);
    shuffle_in_place(order, rng_);
    auto params = snap_.model.parameters();
    auto grads = const_parameters(grads_);
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
      const std::uint64_t step_seed = rng_();
      grads_.visit([](const std::string&, Matrix& m) { m.fill(0.0); });
      BatchLoss loss;
      try {
        loss = upstream_batch_loss(snap_.model, std::span(order).subspan(start, end - start), cfg_,
                                   step_seed, &grads_);
      } catch (const Error& e) {
        // A tower collapsing to zero or overflowing mid-run is divergence.
        if (e.code() != ErrorCode::kZeroNorm || losses_.empty()) throw;
        fail(ErrorCode::kDivergedLoss, std::string(e.what()) + " on day " +
                                           std::to_string(day.day) + " step " +
                                           std::to_string(losses_.size()));
      }
      if (!std::isfinite(loss.total)) {
        fail(ErrorCode::kDivergedLoss, "non-finite loss " + std::to_string(loss.total) +
                                           " on day " + std::to_string(day.day) + " step " +
                                           std::to_string(losses_.size()));
      }
      losses_.push_back(loss.total);
      if (cfg_.momentum > 0.0) {
        momentum_step(params, grads, snap_.velocity, cfg_.learning_rate, cfg_.momentum);
      } else {
        sgd_step(params, grads, cfg_.learning_rate);
      }
      for (const Matrix* m : params) {
        for (double v : m->values()) {
          if (!std::isfinite(v)) {
            fail(ErrorCode::kDivergedLoss, "non-finite parameter after step " +
                                               std::to_string(losses_.size()) + " on day " +
                                               std::to_string(day.day));
          }
        }
      }
    }
  }

  void set_watermark(int day) { snap_.watermark_day = day; }
  int watermark() const { return snap_.watermark_day; }
  const UpstreamModel& model() const { return snap_.model; }
  const std::vector<double>& step_losses() const { return losses_; }

  ModelSnapshot snapshot() const {
    ModelSnapshot out = snap_;
    out.rng_state = save_rng(rng_);
    return out;
  }

 private:
  TrainConfig cfg_;
  ModelSnapshot snap_;
  Rng rng_;
  UpstreamModel grads_;
  std::vector<double> losses_;
};

struct TrainResult {
  ModelSnapshot snapshot;
  std::vector<double> step_losses;
};

/// Trains from scratch over a window of day partitions: `cfg.epochs` passes,
/// each visiting the days in chronological order.
inline TrainResult train_batch_window(const UpstreamModelSpec& spec,
                                      std::span<const DayPartition> window,
                                      const TrainConfig& cfg) {
  if (window.empty()) fail(ErrorCode::kEmptyWindow, "batch training window is empty");
  std::vector<const DayPartition*> days;
  for (const auto& d : window) days.push_back(&d);
  std::stable_sort(days.begin(), days.end(),
                   [](const DayPartition* a, const DayPartition* b) { return a->day < b->day; });
  UpstreamTrainer trainer(spec, cfg);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const DayPartition* day : days) trainer.train_pass(*day);
  }
  trainer.set_watermark(days.back()->day);
  return {trainer.snapshot(), trainer.step_losses()};
}

/// One pass over the next day's data, resumed from `snapshot`.
inline TrainResult train_incremental(const ModelSnapshot& snapshot, const DayPartition& new_day,
                                     const TrainConfig& cfg) {
  if (new_day.day != snapshot.watermark_day + 1) {
    fail(ErrorCode::kWatermarkGap, "snapshot watermark is day " +
                                       std::to_string(snapshot.watermark_day) +
                                       ", cannot train on day " + std::to_string(new_day.day));
  }
  UpstreamTrainer trainer(snapshot, cfg);
  trainer.train_pass(new_day);
  trainer.set_watermark(new_day.day);
  return {trainer.snapshot(), trainer.step_losses()};
}

/// Mean combined loss over `samples` in fixed-order batches, without updates.
inline double evaluate_upstream_loss(const UpstreamModel& model,
                                     std::span<const TrainingSample> samples,
                                     const TrainConfig& cfg, std::uint64_t seed = 7) {
  if (samples.empty()) fail(ErrorCode::kEmptyBatch, "no samples to evaluate");
  std::vector<const TrainingSample*> all;
  for (const auto& s : samples) all.push_back(&s);
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < all.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(all.size(), start + cfg.batch_size);
    total += upstream_batch_loss(model, std::span(all).subspan(start, end - start), cfg,
                                 mix_seed(seed, batches))
                 .total;
    ++batches;
  }
  return total / static_cast<double>(batches);
}

}  // namespace derm
