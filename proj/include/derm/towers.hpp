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

// Upstream three-tower model.
//
// A tower maps a FeatureBundle (plus optional caller-supplied dense inputs)
// to `num_tokens` tokens of width `token_dim`:
//
//   x    = concat(extra_dense, slot_0, slot_1, ...)
//   h_0  = W_in x + b_in
//   h_l+1 = h_l + block_a(h_l) + block_b(h_l)          (one DHEN-style layer)
//   out  = h_L / ||h_L||                             (entity towers only)
//
// Block kinds:
//   masknet_like   y = sigmoid(W_g h + b_g) * (W_p h + b_p)
//   attention_like single-head scaled dot-product self-attention over tokens
//   mlp            y = W_2 relu(W_1 h + b_1) + b_2
//
// Gradients are derived by hand; every backward pass accumulates into a
// parameter set shaped like the forward one.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "derm/error.hpp"
#include "derm/features.hpp"
#include "derm/numerics.hpp"
#include "derm/random.hpp"

namespace derm {

enum class BlockKind : std::uint8_t { kMasknetLike = 0, kAttentionLike = 1, kMlp = 2 };

inline std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::kMasknetLike: return "masknet_like";
    case BlockKind::kAttentionLike: return "attention_like";
    case BlockKind::kMlp: return "mlp";
  }
  return "?";
}

inline BlockKind parse_block_kind(std::string_view text) {
  if (text == "masknet_like") return BlockKind::kMasknetLike;
  if (text == "attention_like") return BlockKind::kAttentionLike;
  if (text == "mlp") return BlockKind::kMlp;
  fail(ErrorCode::kInvalidConfig, "unknown block kind '" + std::string(text) + "'");
}

using LayerBlocks = std::array<BlockKind, 2>;

struct TowerConfig {
  std::vector<FeatureSlot> input_spec;
  // Dense inputs supplied by the caller ahead of the feature slots. The
  // interaction tower receives the entity embeddings this way.
  std::size_t extra_dense_dim = 0;
  std::size_t num_layers = 2;
  std::vector<LayerBlocks> blocks{{BlockKind::kMasknetLike, BlockKind::kMlp},
                                  {BlockKind::kAttentionLike, BlockKind::kMlp}};
  std::size_t token_dim = 8;
  std::size_t num_tokens = 4;
  bool normalize_output = true;

  std::size_t output_dim() const { return token_dim * num_tokens; }

  std::size_t input_dim() const {
    std::size_t total = extra_dense_dim;
    for (const auto& slot : input_spec) total += slot.dim;
    return total;
  }

  void validate() const {
    require(num_layers >= 1, ErrorCode::kInvalidConfig, "tower needs at least one layer");
    require(blocks.size() == num_layers, ErrorCode::kInvalidConfig,
            "tower needs exactly one block pair per layer");
    require(token_dim >= 1 && num_tokens >= 1, ErrorCode::kInvalidConfig,
            "token_dim and num_tokens must be positive");
    require(input_dim() >= 1, ErrorCode::kInvalidConfig, "tower has no inputs");
    for (const auto& slot : input_spec) {
      require(slot.dim >= 1, ErrorCode::kInvalidConfig, "slot '" + slot.name + "' has dim 0");
      if (slot.kind != SlotKind::kDense) {
        require(slot.cardinality >= 1, ErrorCode::kInvalidConfig,
                "slot '" + slot.name + "' needs cardinality >= 1");
      }
    }
  }

  friend bool operator==(const TowerConfig&, const TowerConfig&) = default;
};

struct BlockParams {
  BlockKind kind = BlockKind::kMlp;
  std::vector<Matrix> tensors;

  friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

struct TowerParams {
  std::vector<Matrix> tables;  // categorical and sequence slots, in slot order
  Matrix input_weight;
  Matrix input_bias;
  std::vector<std::array<BlockParams, 2>> layers;

  template <typename F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < tables.size(); ++i) f("table" + std::to_string(i), tables[i]);
    f(std::string("input_weight"), input_weight);
    f(std::string("input_bias"), input_bias);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (std::size_t b = 0; b < 2; ++b) {
        auto& block = layers[l][b];
        for (std::size_t t = 0; t < block.tensors.size(); ++t) {
          f("layer" + std::to_string(l) + "." + std::to_string(b) + "." +
                std::string(to_string(block.kind)) + "." + std::to_string(t),
            block.tensors[t]);
        }
      }
    }
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<TowerParams*>(this)->visit(
        [&](const std::string& name, Matrix& m) { f(name, static_cast<const Matrix&>(m)); });
  }

  friend bool operator==(const TowerParams&, const TowerParams&) = default;
};

struct Tower {
  TowerConfig config;
  TowerParams params;

  friend bool operator==(const Tower&, const Tower&) = default;
};

namespace detail {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (double& x : m.values()) x = normal(rng, 0.0, stddev);
  return m;
}

inline BlockParams init_block(BlockKind kind, std::size_t token_dim, std::size_t num_tokens,
                              Rng& rng) {
  const std::size_t width = token_dim * num_tokens;
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(width));
  BlockParams block;
  block.kind = kind;
  switch (kind) {
    case BlockKind::kMasknetLike:
      block.tensors = {random_matrix(width, width, in_scale, rng), Matrix(width, 1),
                       random_matrix(width, width, 0.5 * in_scale, rng), Matrix(width, 1)};
      break;
    case BlockKind::kAttentionLike: {
      const double tok_scale = 1.0 / std::sqrt(static_cast<double>(token_dim));
      block.tensors = {random_matrix(token_dim, token_dim, tok_scale, rng),
                       random_matrix(token_dim, token_dim, tok_scale, rng),
                       random_matrix(token_dim, token_dim, 0.5 * tok_scale, rng)};
      break;
    }
    case BlockKind::kMlp:
      block.tensors = {random_matrix(width, width, in_scale, rng), Matrix(width, 1),
                       random_matrix(width, width, 0.5 * in_scale, rng), Matrix(width, 1)};
      break;
  }
  return block;
}

// Per-block forward cache.
struct BlockTrace {
  std::vector<Vector> cache;
};

inline Vector masknet_forward(const BlockParams& p, const Vector& h, BlockTrace& trace) {
  Vector gate = affine(p.tensors[0], p.tensors[1], h.values());
  for (double& g : gate) g = sigmoid(g);
  Vector lin = affine(p.tensors[2], p.tensors[3], h.values());
  Vector out(h.dim());
  for (std::size_t i = 0; i < h.dim(); ++i) out[i] = gate[i] * lin[i];
  trace.cache = {std::move(gate), std::move(lin)};
  return out;
}

inline Vector masknet_backward(const BlockParams& p, const BlockTrace& trace, const Vector& h,
                               const Vector& dy, BlockParams& grads) {
  const Vector& gate = trace.cache[0];
  const Vector& lin = trace.cache[1];
  Vector d_lin(h.dim());
  Vector d_gate_pre(h.dim());
  for (std::size_t i = 0; i < h.dim(); ++i) {
    d_lin[i] = dy[i] * gate[i];
    d_gate_pre[i] = dy[i] * lin[i] * gate[i] * (1.0 - gate[i]);
  }
  add_outer(grads.tensors[0], d_gate_pre.values(), h.values());
  axpy(1.0, d_gate_pre.values(), grads.tensors[1].values());
  add_outer(grads.tensors[2], d_lin.values(), h.values());
  axpy(1.0, d_lin.values(), grads.tensors[3].values());
  Vector dh(h.dim());
  gemv_transposed_add(p.tensors[0], d_gate_pre.values(), dh.values());
  gemv_transposed_add(p.tensors[2], d_lin.values(), dh.values());
  return dh;
}

inline Vector mlp_forward(const BlockParams& p, const Vector& h, BlockTrace& trace) {
  Vector pre = affine(p.tensors[0], p.tensors[1], h.values());
  Vector act(pre.dim());
  for (std::size_t i = 0; i < pre.dim(); ++i) act[i] = pre[i] > 0.0 ? pre[i] : 0.0;
  Vector out = affine(p.tensors[2], p.tensors[3], act.values());
  trace.cache = {std::move(pre), std::move(act)};
  return out;
}

inline Vector mlp_backward(const BlockParams& p, const BlockTrace& trace, const Vector& h,
                           const Vector& dy, BlockParams& grads) {
  const Vector& pre = trace.cache[0];
  const Vector& act = trace.cache[1];
  add_outer(grads.tensors[2], dy.values(), act.values());
  axpy(1.0, dy.values(), grads.tensors[3].values());
  Vector d_act(act.dim());
  gemv_transposed_add(p.tensors[2], dy.values(), d_act.values());
  for (std::size_t i = 0; i < pre.dim(); ++i) {
    if (!(pre[i] > 0.0)) d_act[i] = 0.0;
  }
  add_outer(grads.tensors[0], d_act.values(), h.values());
  axpy(1.0, d_act.values(), grads.tensors[1].values());
  Vector dh(h.dim());
  gemv_transposed_add(p.tensors[0], d_act.values(), dh.values());
  return dh;
}

// Tokens are consecutive `token_dim` slices of h. For token t:
//   q_t = W_q x_t, k_t = W_k x_t, v_t = W_v x_t
//   a_t = softmax_s(q_t . k_s / sqrt(token_dim)),  y_t = sum_s a_ts v_s
inline Vector attention_forward(const BlockParams& p, const Vector& h, std::size_t token_dim,
                                std::size_t num_tokens, BlockTrace& trace) {
  const std::size_t width = token_dim * num_tokens;
  const double scale = 1.0 / std::sqrt(static_cast<double>(token_dim));
  Vector q(width), k(width), v(width);
  for (std::size_t t = 0; t < num_tokens; ++t) {
    auto x = h.values().subspan(t * token_dim, token_dim);
    gemv_add(p.tensors[0], x, q.values().subspan(t * token_dim, token_dim));
    gemv_add(p.tensors[1], x, k.values().subspan(t * token_dim, token_dim));
    gemv_add(p.tensors[2], x, v.values().subspan(t * token_dim, token_dim));
  }
  Vector attn(num_tokens * num_tokens);
  Vector out(width);
  std::vector<double> scores(num_tokens);
  for (std::size_t t = 0; t < num_tokens; ++t) {
    auto qt = q.values().subspan(t * token_dim, token_dim);
    for (std::size_t s = 0; s < num_tokens; ++s) {
      scores[s] = scale * dot(qt, k.values().subspan(s * token_dim, token_dim));
    }
    const Vector a = softmax(scores);
    for (std::size_t s = 0; s < num_tokens; ++s) {
      attn[t * num_tokens + s] = a[s];
      axpy(a[s], v.values().subspan(s * token_dim, token_dim),
           out.values().subspan(t * token_dim, token_dim));
    }
  }
  trace.cache = {std::move(q), std::move(k), std::move(v), std::move(attn)};
  return out;
}

inline Vector attention_backward(const BlockParams& p, const BlockTrace& trace, const Vector& h,
                                 const Vector& dy, std::size_t token_dim,
                                 std::size_t num_tokens, BlockParams& grads) {
  const std::size_t width = token_dim * num_tokens;
  const double scale = 1.0 / std::sqrt(static_cast<double>(token_dim));
  const Vector& q = trace.cache[0];
  const Vector& k = trace.cache[1];
  const Vector& v = trace.cache[2];
  const Vector& attn = trace.cache[3];
  auto tok = [&](const Vector& x, std::size_t t) {
    return x.values().subspan(t * token_dim, token_dim);
  };
  auto tok_mut = [&](Vector& x, std::size_t t) {
    return x.values().subspan(t * token_dim, token_dim);
  };

  Vector dq(width), dk(width), dv(width);
  for (std::size_t t = 0; t < num_tokens; ++t) {
    auto dyt = tok(dy, t);
    Vector a(num_tokens), da(num_tokens);
    for (std::size_t s = 0; s < num_tokens; ++s) {
      a[s] = attn[t * num_tokens + s];
      da[s] = dot(dyt, tok(v, s));
      axpy(a[s], dyt, tok_mut(dv, s));
    }
    const Vector dscore = softmax_backward(a, da.values());
    for (std::size_t s = 0; s < num_tokens; ++s) {
      axpy(scale * dscore[s], tok(k, s), tok_mut(dq, t));
      axpy(scale * dscore[s], tok(q, t), tok_mut(dk, s));
    }
  }
  Vector dh(width);
  for (std::size_t t = 0; t < num_tokens; ++t) {
    auto x = tok(h, t);
    add_outer(grads.tensors[0], tok(dq, t), x);
    add_outer(grads.tensors[1], tok(dk, t), x);
    add_outer(grads.tensors[2], tok(dv, t), x);
    auto dx = tok_mut(dh, t);
    gemv_transposed_add(p.tensors[0], tok(dq, t), dx);
    gemv_transposed_add(p.tensors[1], tok(dk, t), dx);
    gemv_transposed_add(p.tensors[2], tok(dv, t), dx);
  }
  return dh;
}

inline Vector block_forward(const BlockParams& p, const Vector& h, const TowerConfig& cfg,
                            BlockTrace& trace) {
  switch (p.kind) {
    case BlockKind::kMasknetLike: return masknet_forward(p, h, trace);
    case BlockKind::kAttentionLike:
      return attention_forward(p, h, cfg.token_dim, cfg.num_tokens, trace);
    case BlockKind::kMlp: return mlp_forward(p, h, trace);
  }
  return {};
}

inline Vector block_backward(const BlockParams& p, const BlockTrace& trace, const Vector& h,
                             const Vector& dy, const TowerConfig& cfg, BlockParams& grads) {
  switch (p.kind) {
    case BlockKind::kMasknetLike: return masknet_backward(p, trace, h, dy, grads);
    case BlockKind::kAttentionLike:
      return attention_backward(p, trace, h, dy, cfg.token_dim, cfg.num_tokens, grads);
    case BlockKind::kMlp: return mlp_backward(p, trace, h, dy, grads);
  }
  return {};
}

}  // namespace detail

/// Builds a tower with freshly initialized parameters drawn from `rng`.
inline Tower make_tower(const TowerConfig& config, Rng& rng) {
  config.validate();
  Tower tower;
  tower.config = config;
  auto& params = tower.params;
  for (const auto& slot : config.input_spec) {
    if (slot.kind == SlotKind::kDense) continue;
    params.tables.push_back(detail::random_matrix(slot.cardinality, slot.dim, 0.5, rng));
  }
  const std::size_t width = config.output_dim();
  params.input_weight = detail::random_matrix(
      width, config.input_dim(), 1.0 / std::sqrt(static_cast<double>(config.input_dim())), rng);
  params.input_bias = Matrix(width, 1);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    params.layers.push_back({detail::init_block(config.blocks[l][0], config.token_dim,
                                                config.num_tokens, rng),
                             detail::init_block(config.blocks[l][1], config.token_dim,
                                                config.num_tokens, rng)});
  }
  return tower;
}

/// Everything the backward pass needs from a forward pass.
struct TowerTrace {
  Vector input;
  std::vector<std::vector<std::uint64_t>> table_ids;  // resolved ids per table slot
  std::vector<Vector> hidden;                         // h_0 .. h_L
  std::vector<std::array<detail::BlockTrace, 2>> blocks;
  Vector output;
  double norm = 0.0;
};

namespace detail {

// Resolves the tower input vector and the table rows each slot reads.
inline Vector assemble_input(const Tower& tower, const FeatureBundle& features,
                             std::span<const double> extra_dense,
                             std::vector<std::vector<std::uint64_t>>& table_ids) {
  const auto& cfg = tower.config;
  if (extra_dense.size() != cfg.extra_dense_dim) {
    fail(ErrorCode::kShapeMismatch, "extra dense input has dim " +
                                        std::to_string(extra_dense.size()) + ", expected " +
                                        std::to_string(cfg.extra_dense_dim));
  }
  std::vector<double> x;
  x.reserve(cfg.input_dim());
  x.insert(x.end(), extra_dense.begin(), extra_dense.end());
  table_ids.clear();
  std::size_t table = 0;
  for (const auto& slot : cfg.input_spec) {
    const FeatureValue* value = features.find(slot.name);
    if (value != nullptr && kind_of(*value) != slot.kind) {
      fail(ErrorCode::kShapeMismatch, "slot '" + slot.name + "' expects " +
                                          std::string(to_string(slot.kind)) + " feature");
    }
    if (slot.kind == SlotKind::kDense) {
      if (value == nullptr) {
        x.insert(x.end(), slot.dim, 0.0);
        continue;
      }
      const auto& dense = std::get<DenseFeature>(*value).values;
      if (dense.size() != slot.dim) {
        fail(ErrorCode::kShapeMismatch, "slot '" + slot.name + "' has dim " +
                                            std::to_string(dense.size()) + ", expected " +
                                            std::to_string(slot.dim));
      }
      x.insert(x.end(), dense.begin(), dense.end());
      continue;
    }
    std::vector<std::uint64_t> ids;
    if (value != nullptr && slot.kind == SlotKind::kCategorical) {
      ids.push_back(std::get<CategoricalFeature>(*value).id);
    } else if (value != nullptr) {
      ids = std::get<SequenceFeature>(*value).ids;
    }
    if (ids.empty()) ids.push_back(0);
    for (std::uint64_t id : ids) {
      if (id >= slot.cardinality) {
        fail(ErrorCode::kUnknownCategoricalId,
             "slot '" + slot.name + "' id " + std::to_string(id) + " >= cardinality " +
                 std::to_string(slot.cardinality));
      }
    }
    const Matrix& tab = tower.params.tables[table];
    std::vector<double> pooled(slot.dim, 0.0);
    for (std::uint64_t id : ids) axpy(1.0, tab.row(id), pooled);
    const double inv = 1.0 / static_cast<double>(ids.size());
    for (double& p : pooled) p *= inv;
    x.insert(x.end(), pooled.begin(), pooled.end());
    table_ids.push_back(std::move(ids));
    ++table;
  }
  return Vector(std::move(x));
}

}  // namespace detail

/// Runs the tower. Returns the L2-normalized output for entity towers and the
/// raw final hidden state otherwise.
inline Vector tower_forward(const Tower& tower, const FeatureBundle& features,
                            std::span<const double> extra_dense = {},
                            TowerTrace* trace = nullptr) {
  TowerTrace local;
  TowerTrace& tr = trace != nullptr ? *trace : local;
  const auto& cfg = tower.config;
  tr.input = detail::assemble_input(tower, features, extra_dense, tr.table_ids);
  tr.hidden.clear();
  tr.blocks.assign(cfg.num_layers, {});
  tr.hidden.push_back(affine(tower.params.input_weight, tower.params.input_bias,
                             tr.input.values()));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const Vector& h = tr.hidden.back();
    Vector next = h;
    for (std::size_t b = 0; b < 2; ++b) {
      const Vector y = detail::block_forward(tower.params.layers[l][b], h, cfg, tr.blocks[l][b]);
      axpy(1.0, y.values(), next.values());
    }
    tr.hidden.push_back(std::move(next));
  }
  if (!cfg.normalize_output) {
    tr.output = tr.hidden.back();
    tr.norm = 1.0;
    return tr.output;
  }
  tr.norm = l2_norm(tr.hidden.back());
  tr.output = l2_normalize(tr.hidden.back());
  return tr.output;
}

/// Entity embedding: Norm(Concat(token_1 .. token_n)).
inline Vector embed_entity(const Tower& tower, const FeatureBundle& features,
                           TowerTrace* trace = nullptr) {
  if (!tower.config.normalize_output) {
    fail(ErrorCode::kShapeMismatch, "embed_entity requires an entity tower");
  }
  return tower_forward(tower, features, {}, trace);
}

inline TowerParams zeros_like(const TowerParams& params) {
  TowerParams out = params;
  out.visit([](const std::string&, Matrix& m) { m.fill(0.0); });
  return out;
}

/// Accumulates parameter gradients into `grads` and returns the gradient with
/// respect to the assembled input vector (extra dense inputs first, then the
/// slot features in spec order).
inline Vector tower_backward_accumulate(const Tower& tower, const TowerTrace& trace,
                                        const Vector& upstream_grad, TowerParams& grads) {
  const auto& cfg = tower.config;
  if (upstream_grad.dim() != cfg.output_dim()) {
    fail(ErrorCode::kShapeMismatch, "upstream gradient has dim " +
                                        std::to_string(upstream_grad.dim()) + ", expected " +
                                        std::to_string(cfg.output_dim()));
  }
  Vector g = cfg.normalize_output
                 ? l2_normalize_backward(trace.output, trace.norm, upstream_grad)
                 : upstream_grad;
  for (std::size_t l = cfg.num_layers; l-- > 0;) {
    const Vector& h = trace.hidden[l];
    Vector dh = g;
    for (std::size_t b = 0; b < 2; ++b) {
      const Vector d = detail::block_backward(tower.params.layers[l][b], trace.blocks[l][b], h,
                                              g, cfg, grads.layers[l][b]);
      axpy(1.0, d.values(), dh.values());
    }
    g = std::move(dh);
  }
  add_outer(grads.input_weight, g.values(), trace.input.values());
  axpy(1.0, g.values(), grads.input_bias.values());
  Vector dx(trace.input.dim());
  gemv_transposed_add(tower.params.input_weight, g.values(), dx.values());

  std::size_t offset = cfg.extra_dense_dim;
  std::size_t table = 0;
  for (const auto& slot : cfg.input_spec) {
    if (slot.kind != SlotKind::kDense) {
      const auto& ids = trace.table_ids[table];
      const double inv = 1.0 / static_cast<double>(ids.size());
      auto dslot = dx.values().subspan(offset, slot.dim);
      for (std::uint64_t id : ids) axpy(inv, dslot, grads.tables[table].row(id));
      ++table;
    }
    offset += slot.dim;
  }
  return dx;
}

struct TowerGradients {
  TowerParams param_grads;
  Vector input_grads;
};

inline TowerGradients tower_backward(const Tower& tower, const TowerTrace& trace,
                                     const Vector& upstream_grad) {
  TowerGradients out{zeros_like(tower.params), {}};
  out.input_grads = tower_backward_accumulate(tower, trace, upstream_grad, out.param_grads);
  return out;
}

// ---------------------------------------------------------------------------
// Three-tower upstream model.

struct TaskHead {
  std::string task;
  Matrix weight;  // 1 x interaction width
  Matrix bias;    // 1 x 1

  friend bool operator==(const TaskHead&, const TaskHead&) = default;
};

struct UpstreamModelSpec {
  std::string name = "ctr";
  TowerConfig user;
  TowerConfig pin;
  TowerConfig interaction;  // extra_dense_dim and normalize_output are derived
  std::vector<std::string> tasks{"click"};
  double initial_temperature = 0.07;
  std::uint64_t init_seed = 1;

  friend bool operator==(const UpstreamModelSpec&, const UpstreamModelSpec&) = default;
};

struct UpstreamModel {
  std::string name;
  Tower user_tower;
  Tower pin_tower;
  Tower interaction_tower;
  std::vector<TaskHead> heads;
  Matrix log_temperature{1, 1};

  double temperature() const { return std::exp(log_temperature(0, 0)); }

  template <typename F>
  void visit(F&& f) {
    user_tower.params.visit([&](const std::string& n, Matrix& m) { f("user." + n, m); });
    pin_tower.params.visit([&](const std::string& n, Matrix& m) { f("pin." + n, m); });
    interaction_tower.params.visit(
        [&](const std::string& n, Matrix& m) { f("interaction." + n, m); });
    for (auto& head : heads) {
      f("head." + head.task + ".weight", head.weight);
      f("head." + head.task + ".bias", head.bias);
    }
    f(std::string("log_temperature"), log_temperature);
  }

  std::vector<Matrix*> parameters() {
    std::vector<Matrix*> out;
    visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
    return out;
  }

  friend bool operator==(const UpstreamModel&, const UpstreamModel&) = default;
};

inline TowerConfig interaction_config_for(const UpstreamModelSpec& spec) {
  TowerConfig cfg = spec.interaction;
  cfg.extra_dense_dim = 3 * spec.user.output_dim();
  cfg.normalize_output = false;
  return cfg;
}

inline UpstreamModel make_upstream_model(const UpstreamModelSpec& spec) {
  if (spec.user.output_dim() != spec.pin.output_dim()) {
    fail(ErrorCode::kInvalidConfig, "user and pin towers must share output_dim");
  }
  require(spec.initial_temperature > 0.0, ErrorCode::kNonPositiveTau,
          "initial temperature must be positive");
  require(!spec.tasks.empty(), ErrorCode::kInvalidConfig, "upstream model needs a task head");
  Rng rng(spec.init_seed);
  UpstreamModel model;
  model.name = spec.name;
  TowerConfig user = spec.user;
  TowerConfig pin = spec.pin;
  user.normalize_output = pin.normalize_output = true;
  user.extra_dense_dim = pin.extra_dense_dim = 0;
  model.user_tower = make_tower(user, rng);
  model.pin_tower = make_tower(pin, rng);
  model.interaction_tower = make_tower(interaction_config_for(spec), rng);
  const std::size_t width = model.interaction_tower.config.output_dim();
  for (const auto& task : spec.tasks) {
    model.heads.push_back(
        {task, detail::random_matrix(1, width, 1.0 / std::sqrt(static_cast<double>(width)), rng),
         Matrix(1, 1)});
  }
  model.log_temperature(0, 0) = std::log(spec.initial_temperature);
  return model;
}

inline UpstreamModel zeros_like(const UpstreamModel& model) {
  UpstreamModel out = model;
  out.visit([](const std::string&, Matrix& m) { m.fill(0.0); });
  return out;
}

struct TaskLogits {
  std::vector<std::string> tasks;
  std::vector<double> logits;

  double at(std::string_view task) const {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      if (tasks[i] == task) return logits[i];
    }
    fail(ErrorCode::kUnknownTask, "no head for task '" + std::string(task) + "'");
  }
};

struct InteractionTrace {
  Vector user_emb;
  Vector pin_emb;
  TowerTrace tower;
};

/// Overall interaction tower: crosses [u, p, u*p] with context features and
/// emits one logit per task head. Context never reaches the entity towers.
inline TaskLogits interaction_forward(const UpstreamModel& model, const Vector& user_emb,
                                      const Vector& pin_emb, const FeatureBundle& context,
                                      InteractionTrace* trace = nullptr) {
  const std::size_t dim = model.user_tower.config.output_dim();
  if (user_emb.dim() != dim || pin_emb.dim() != dim) {
    fail(ErrorCode::kShapeMismatch, "entity embeddings must have dim " + std::to_string(dim));
  }
  std::vector<double> extra;
  extra.reserve(3 * dim);
  extra.insert(extra.end(), user_emb.begin(), user_emb.end());
  extra.insert(extra.end(), pin_emb.begin(), pin_emb.end());
  for (std::size_t i = 0; i < dim; ++i) extra.push_back(user_emb[i] * pin_emb[i]);
  InteractionTrace local;
  InteractionTrace& tr = trace != nullptr ? *trace : local;
  const Vector hidden = tower_forward(model.interaction_tower, context, extra, &tr.tower);
  tr.user_emb = user_emb;
  tr.pin_emb = pin_emb;
  TaskLogits out;
  for (const auto& head : model.heads) {
    out.tasks.push_back(head.task);
    out.logits.push_back(dot(head.weight.row(0), hidden.values()) + head.bias(0, 0));
  }
  return out;
}

/// Accumulates head and interaction-tower gradients for d(loss)/d(logit) and
/// adds the gradients w.r.t. the two entity embeddings into d_user / d_pin.
inline void interaction_backward(const UpstreamModel& model, const InteractionTrace& trace,
                                 std::span<const double> d_logits, UpstreamModel& grads,
                                 Vector& d_user, Vector& d_pin) {
  const Vector& hidden = trace.tower.output;
  Vector d_hidden(hidden.dim());
  for (std::size_t t = 0; t < model.heads.size(); ++t) {
    if (d_logits[t] == 0.0) continue;
    axpy(d_logits[t], hidden.values(), grads.heads[t].weight.row(0));
    grads.heads[t].bias(0, 0) += d_logits[t];
    axpy(d_logits[t], model.heads[t].weight.row(0), d_hidden.values());
  }
  const Vector dx = tower_backward_accumulate(model.interaction_tower, trace.tower, d_hidden,
                                              grads.interaction_tower.params);
  const std::size_t dim = trace.user_emb.dim();
  for (std::size_t i = 0; i < dim; ++i) {
    const double d_prod = dx[2 * dim + i];
    d_user[i] += dx[i] + d_prod * trace.pin_emb[i];
    d_pin[i] += dx[dim + i] + d_prod * trace.user_emb[i];
  }
}

}  // namespace derm
