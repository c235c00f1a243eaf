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

// Downstream ranking model that consumes served embeddings.
//
//   x0  = [base dense | attention-pooled sequence | projected embeddings]
//   x_{l+1} = x0 * (W_l x_l + b_l) + x_l                    (cross layers)
//   z   = [x_L | presence flags]
//   out = head( sum_k softmax(G z)_k * expert_k(z) )        (mixture of experts)

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "derm/error.hpp"
#include "derm/metrics.hpp"
#include "derm/numerics.hpp"
#include "derm/objectives.hpp"
#include "derm/random.hpp"

namespace derm {

inline constexpr std::array<const char*, 4> kDermInputNames = {"ctr-user", "ctr-pin", "cvr-user",
                                                               "cvr-pin"};

inline bool is_derm_input(std::string_view name) {
  return std::find(kDermInputNames.begin(), kDermInputNames.end(), name) != kDermInputNames.end();
}

struct DownstreamConfig {
  std::string task = "ctr";  // ctr | cvr
  std::vector<std::string> derm_inputs;
  std::size_t derm_dim = 16;  // width of each served embedding
  std::optional<std::size_t> projection_dim;
  std::size_t num_experts = 4;
  std::size_t cross_layers = 2;
  bool sequence_encoder = true;
  std::size_t base_dim = 0;  // 0 disables base features
  std::size_t seq_cardinality = 17;
  std::size_t seq_dim = 8;
  std::size_t expert_hidden = 16;
  std::size_t expert_dim = 8;

  double learning_rate = 0.003;
  std::size_t batch_size = 64;
  std::size_t epochs = 3;
  std::uint64_t seed = 1;

  std::string label_task() const { return task == "ctr" ? "click" : "conversion"; }
  std::size_t derm_concat_dim() const { return derm_inputs.size() * derm_dim; }
  std::size_t derm_out_dim() const {
    return projection_dim && !derm_inputs.empty() ? *projection_dim : derm_concat_dim();
  }
  std::size_t seq_out_dim() const { return sequence_encoder ? seq_dim : 0; }
  std::size_t cross_dim() const { return base_dim + seq_out_dim() + derm_out_dim(); }
  std::size_t moe_input_dim() const { return cross_dim() + derm_inputs.size(); }

  void validate() const {
    require(task == "ctr" || task == "cvr", ErrorCode::kInvalidConfig,
            "downstream task must be ctr or cvr");
    for (std::size_t i = 0; i < derm_inputs.size(); ++i) {
      require(is_derm_input(derm_inputs[i]), ErrorCode::kInvalidConfig,
              "unknown embedding input '" + derm_inputs[i] + "'");
      for (std::size_t j = 0; j < i; ++j) {
        require(derm_inputs[i] != derm_inputs[j], ErrorCode::kInvalidConfig,
                "duplicate embedding input '" + derm_inputs[i] + "'");
      }
    }
    if (projection_dim) {
      require(*projection_dim >= 1, ErrorCode::kInvalidConfig, "projection_dim must be >= 1");
      require(derm_inputs.empty() || *projection_dim <= derm_concat_dim(),
              ErrorCode::kInvalidConfig, "projection_dim exceeds concatenated embedding dim");
    }
    require(num_experts >= 1, ErrorCode::kInvalidConfig, "num_experts must be >= 1");
    require(cross_dim() >= 1, ErrorCode::kInvalidConfig, "downstream model has no inputs");
    require(batch_size >= 1 && learning_rate > 0.0, ErrorCode::kInvalidConfig,
            "bad downstream training settings");
  }

  friend bool operator==(const DownstreamConfig&, const DownstreamConfig&) = default;
};

/// One prepared example. Missing embeddings are zero vectors with presence 0.
struct DownstreamSample {
  Vector base;
  std::vector<std::uint64_t> sequence;
  std::vector<Vector> derm;
  std::vector<double> presence;
  int label = 0;
};

struct DownstreamParams {
  Matrix seq_table, seq_query, seq_key, seq_value;
  Matrix proj_w, proj_b;
  std::vector<Matrix> cross_w, cross_b;
  Matrix gate_w, gate_b;
  std::vector<Matrix> expert_w1, expert_b1, expert_w2, expert_b2;
  Matrix head_w, head_b;

  template <typename F>
  void visit(F&& f) {
    auto each = [&](const std::string& name, Matrix& m) {
      if (m.size() > 0) f(name, m);
    };
    each("seq.table", seq_table);
    each("seq.query", seq_query);
    each("seq.key", seq_key);
    each("seq.value", seq_value);
    each("proj.w", proj_w);
    each("proj.b", proj_b);
    for (std::size_t l = 0; l < cross_w.size(); ++l) {
      each("cross." + std::to_string(l) + ".w", cross_w[l]);
      each("cross." + std::to_string(l) + ".b", cross_b[l]);
    }
    each("gate.w", gate_w);
    each("gate.b", gate_b);
    for (std::size_t k = 0; k < expert_w1.size(); ++k) {
      const std::string p = "expert." + std::to_string(k);
      each(p + ".w1", expert_w1[k]);
      each(p + ".b1", expert_b1[k]);
      each(p + ".w2", expert_w2[k]);
      each(p + ".b2", expert_b2[k]);
    }
    each("head.w", head_w);
    each("head.b", head_b);
  }

  std::vector<Matrix*> parameters() {
    std::vector<Matrix*> out;
    visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
    return out;
  }

  friend bool operator==(const DownstreamParams&, const DownstreamParams&) = default;
};

struct DownstreamModel {
  DownstreamConfig config;
  DownstreamParams params;

  template <typename F>
  void visit(F&& f) {
    params.visit(std::forward<F>(f));
  }
};

namespace detail {

inline Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (double& x : m.values()) x = normal(rng, 0.0, stddev);
  return m;
}

inline double fan_in_scale(std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

}  // namespace detail

inline DownstreamModel make_downstream_model(const DownstreamConfig& cfg, Rng& rng) {
  cfg.validate();
  DownstreamModel model{cfg, {}};
  auto& p = model.params;
  using detail::fan_in_scale;
  using detail::gaussian;
  if (cfg.sequence_encoder) {
    const std::size_t e = cfg.seq_dim;
    p.seq_table = gaussian(cfg.seq_cardinality, e, 0.3, rng);
    p.seq_query = gaussian(e, 1, fan_in_scale(e), rng);
    p.seq_key = gaussian(e, e, fan_in_scale(e), rng);
    p.seq_value = gaussian(e, e, fan_in_scale(e), rng);
  }
  if (cfg.projection_dim && !cfg.derm_inputs.empty()) {
    p.proj_w = gaussian(*cfg.projection_dim, cfg.derm_concat_dim(),
                        fan_in_scale(cfg.derm_concat_dim()), rng);
    p.proj_b = Matrix(*cfg.projection_dim, 1);
  }
  const std::size_t d = cfg.cross_dim();
  for (std::size_t l = 0; l < cfg.cross_layers; ++l) {
    p.cross_w.push_back(gaussian(d, d, 0.1 * fan_in_scale(d), rng));
    p.cross_b.push_back(Matrix(d, 1));
  }
  const std::size_t z = cfg.moe_input_dim();
  p.gate_w = gaussian(cfg.num_experts, z, 0.1 * fan_in_scale(z), rng);
  p.gate_b = Matrix(cfg.num_experts, 1);
  for (std::size_t k = 0; k < cfg.num_experts; ++k) {
    p.expert_w1.push_back(gaussian(cfg.expert_hidden, z, std::sqrt(2.0) * fan_in_scale(z), rng));
    p.expert_b1.push_back(Matrix(cfg.expert_hidden, 1));
    p.expert_w2.push_back(
        gaussian(cfg.expert_dim, cfg.expert_hidden, fan_in_scale(cfg.expert_hidden), rng));
    p.expert_b2.push_back(Matrix(cfg.expert_dim, 1));
  }
  p.head_w = gaussian(1, cfg.expert_dim, fan_in_scale(cfg.expert_dim), rng);
  p.head_b = Matrix(1, 1);
  return model;
}

inline DownstreamParams zeros_like(const DownstreamParams& params) {
  DownstreamParams out = params;
  out.visit([](const std::string&, Matrix& m) { m.fill(0.0); });
  return out;
}

/// Affine map of the concatenated embeddings to projection_dim.
inline Vector project_embeddings(std::span<const double> concatenated, const Matrix& w,
                                 const Matrix& b) {
  if (w.cols() != concatenated.size() || b.rows() != w.rows() || b.cols() != 1) {
    fail(ErrorCode::kShapeMismatch, "projection expects input dim " + std::to_string(w.cols()) +
                                        ", got " + std::to_string(concatenated.size()));
  }
  return affine(w, b, concatenated);
}

// Multiplications per example in the cross network.
struct CrossFlops {
  std::uint64_t matmul = 0;    // W_l x_l: layers * d^2
  std::uint64_t hadamard = 0;  // x0 * (.): layers * d
  std::uint64_t total() const { return matmul + hadamard; }
};

inline CrossFlops cross_layer_flops(const DownstreamConfig& cfg) {
  const std::uint64_t d = cfg.cross_dim();
  return {cfg.cross_layers * d * d, cfg.cross_layers * d};
}

struct DownstreamTrace {
  // sequence encoder
  std::vector<std::uint64_t> seq_ids;
  std::vector<Vector> seq_keys, seq_values;
  Vector seq_attention;
  // embeddings
  Vector derm_concat;
  // cross network
  Vector x0;
  std::vector<Vector> xs, ys;
  // mixture of experts
  Vector z, gate;
  std::vector<Vector> pre, hidden, expert_out;
  Vector mixture;
  double logit = 0.0;
};

inline double downstream_forward(const DownstreamModel& model, const DownstreamSample& s,
                                 DownstreamTrace* trace = nullptr) {
  const auto& cfg = model.config;
  const auto& p = model.params;
  DownstreamTrace local;
  DownstreamTrace& t = trace ? *trace : local;
  if (s.base.dim() != cfg.base_dim) {
    fail(ErrorCode::kShapeMismatch, "base features have dim " + std::to_string(s.base.dim()) +
                                        ", expected " + std::to_string(cfg.base_dim));
  }
  if (s.derm.size() != cfg.derm_inputs.size() || s.presence.size() != cfg.derm_inputs.size()) {
    fail(ErrorCode::kShapeMismatch, "sample carries " + std::to_string(s.derm.size()) +
                                        " embeddings, config expects " +
                                        std::to_string(cfg.derm_inputs.size()));
  }
  std::vector<double> x0;
  x0.reserve(cfg.cross_dim());
  x0.insert(x0.end(), s.base.begin(), s.base.end());

  if (cfg.sequence_encoder) {
    const std::size_t e = cfg.seq_dim;
    t.seq_ids = s.sequence.empty() ? std::vector<std::uint64_t>{0} : s.sequence;
    t.seq_keys.clear();
    t.seq_values.clear();
    std::vector<double> scores;
    const double scale = 1.0 / std::sqrt(static_cast<double>(e));
    for (std::uint64_t id : t.seq_ids) {
      if (id >= cfg.seq_cardinality) {
        fail(ErrorCode::kUnknownCategoricalId, "sequence id " + std::to_string(id) +
                                                   " >= cardinality " +
                                                   std::to_string(cfg.seq_cardinality));
      }
      Vector k(e), v(e);
      gemv_add(p.seq_key, p.seq_table.row(id), k.values());
      gemv_add(p.seq_value, p.seq_table.row(id), v.values());
      scores.push_back(scale * dot(p.seq_query.values(), k.values()));
      t.seq_keys.push_back(std::move(k));
      t.seq_values.push_back(std::move(v));
    }
    t.seq_attention = softmax(scores);
    std::vector<double> pooled(e, 0.0);
    for (std::size_t j = 0; j < t.seq_ids.size(); ++j) {
      axpy(t.seq_attention[j], t.seq_values[j].values(), pooled);
    }
    x0.insert(x0.end(), pooled.begin(), pooled.end());
  }

  if (!cfg.derm_inputs.empty()) {
    std::vector<double> c;
    c.reserve(cfg.derm_concat_dim());
    for (const auto& v : s.derm) {
      if (v.dim() != cfg.derm_dim) {
        fail(ErrorCode::kShapeMismatch, "embedding has dim " + std::to_string(v.dim()) +
                                            ", expected " + std::to_string(cfg.derm_dim));
      }
      c.insert(c.end(), v.begin(), v.end());
    }
    t.derm_concat = Vector(std::move(c));
    if (cfg.projection_dim) {
      const Vector proj = project_embeddings(t.derm_concat.values(), p.proj_w, p.proj_b);
      x0.insert(x0.end(), proj.begin(), proj.end());
    } else {
      x0.insert(x0.end(), t.derm_concat.begin(), t.derm_concat.end());
    }
  }
  t.x0 = Vector(std::move(x0));

  t.xs.assign(1, t.x0);
  t.ys.clear();
  for (std::size_t l = 0; l < cfg.cross_layers; ++l) {
    Vector y = affine(p.cross_w[l], p.cross_b[l], t.xs.back().values());
    Vector next = t.xs.back();
    for (std::size_t i = 0; i < next.dim(); ++i) next[i] += t.x0[i] * y[i];
    t.ys.push_back(std::move(y));
    t.xs.push_back(std::move(next));
  }

  t.z = concat({t.xs.back().values(), std::span<const double>(s.presence)});
  t.gate = softmax(affine(p.gate_w, p.gate_b, t.z.values()));
  t.pre.assign(cfg.num_experts, {});
  t.hidden.assign(cfg.num_experts, {});
  t.expert_out.assign(cfg.num_experts, {});
  t.mixture = Vector(cfg.expert_dim);
  for (std::size_t k = 0; k < cfg.num_experts; ++k) {
    t.pre[k] = affine(p.expert_w1[k], p.expert_b1[k], t.z.values());
    t.hidden[k] = t.pre[k];
    for (double& h : t.hidden[k]) h = std::max(h, 0.0);
    t.expert_out[k] = affine(p.expert_w2[k], p.expert_b2[k], t.hidden[k].values());
    axpy(t.gate[k], t.expert_out[k].values(), t.mixture.values());
  }
  t.logit = p.head_b(0, 0) + dot(p.head_w.values(), t.mixture.values());
  return t.logit;
}

/// Accumulates dlogit-scaled parameter gradients into `g`.
inline void downstream_backward(const DownstreamModel& model, const DownstreamTrace& t,
                                double dlogit, DownstreamParams& g) {
  const auto& cfg = model.config;
  const auto& p = model.params;
  axpy(dlogit, t.mixture.values(), g.head_w.values());
  g.head_b(0, 0) += dlogit;
  Vector dm(cfg.expert_dim);
  axpy(dlogit, p.head_w.values(), dm.values());

  Vector dz(t.z.dim());
  std::vector<double> dgate(cfg.num_experts);
  for (std::size_t k = 0; k < cfg.num_experts; ++k) {
    dgate[k] = dot(t.expert_out[k], dm);
    Vector dout(cfg.expert_dim);
    axpy(t.gate[k], dm.values(), dout.values());
    add_outer(g.expert_w2[k], dout.values(), t.hidden[k].values());
    axpy(1.0, dout.values(), g.expert_b2[k].values());
    Vector dpre(cfg.expert_hidden);
    gemv_transposed_add(p.expert_w2[k], dout.values(), dpre.values());
    for (std::size_t i = 0; i < dpre.dim(); ++i) {
      if (t.pre[k][i] <= 0.0) dpre[i] = 0.0;
    }
    add_outer(g.expert_w1[k], dpre.values(), t.z.values());
    axpy(1.0, dpre.values(), g.expert_b1[k].values());
    gemv_transposed_add(p.expert_w1[k], dpre.values(), dz.values());
  }
  const Vector dgl = softmax_backward(t.gate, dgate);
  add_outer(g.gate_w, dgl.values(), t.z.values());
  axpy(1.0, dgl.values(), g.gate_b.values());
  gemv_transposed_add(p.gate_w, dgl.values(), dz.values());

  const std::size_t d = cfg.cross_dim();
  Vector dx(std::span<const double>(dz.values()).first(d));
  Vector dx0(d);
  for (std::size_t l = cfg.cross_layers; l-- > 0;) {
    Vector dy(d);
    for (std::size_t i = 0; i < d; ++i) {
      dy[i] = dx[i] * t.x0[i];
      dx0[i] += dx[i] * t.ys[l][i];
    }
    add_outer(g.cross_w[l], dy.values(), t.xs[l].values());
    axpy(1.0, dy.values(), g.cross_b[l].values());
    gemv_transposed_add(p.cross_w[l], dy.values(), dx.values());
  }
  axpy(1.0, dx.values(), dx0.values());

  std::size_t offset = cfg.base_dim;
  if (cfg.sequence_encoder) {
    const std::size_t e = cfg.seq_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(e));
    const auto dpooled = std::span<const double>(dx0.values()).subspan(offset, e);
    std::vector<double> dattn(t.seq_ids.size());
    for (std::size_t j = 0; j < t.seq_ids.size(); ++j) {
      dattn[j] = dot(t.seq_values[j].values(), dpooled);
    }
    const Vector dscores = softmax_backward(t.seq_attention, dattn);
    for (std::size_t j = 0; j < t.seq_ids.size(); ++j) {
      const auto emb = p.seq_table.row(t.seq_ids[j]);
      Vector dv(e), dk(e), demb(e);
      axpy(t.seq_attention[j], dpooled, dv.values());
      axpy(scale * dscores[j], t.seq_keys[j].values(), g.seq_query.values());
      axpy(scale * dscores[j], p.seq_query.values(), dk.values());
      add_outer(g.seq_value, dv.values(), emb);
      add_outer(g.seq_key, dk.values(), emb);
      gemv_transposed_add(p.seq_value, dv.values(), demb.values());
      gemv_transposed_add(p.seq_key, dk.values(), demb.values());
      axpy(1.0, demb.values(), g.seq_table.row(t.seq_ids[j]));
    }
    offset += e;
  }
  if (!cfg.derm_inputs.empty() && cfg.projection_dim) {
    const auto dproj = std::span<const double>(dx0.values()).subspan(offset, *cfg.projection_dim);
    add_outer(g.proj_w, dproj, t.derm_concat.values());
    axpy(1.0, dproj, g.proj_b.values());
  }
}

/// Mean BCE over the batch; accumulates gradients when `grads` is set.
inline double downstream_batch_loss(const DownstreamModel& model,
                                    std::span<const DownstreamSample* const> batch,
                                    DownstreamParams* grads = nullptr) {
  require(!batch.empty(), ErrorCode::kEmptyBatch, "empty downstream batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  DownstreamTrace trace;
  for (const DownstreamSample* s : batch) {
    const double logit = downstream_forward(model, *s, &trace);
    const BceResult r = bce_loss(logit, s->label);
    total += r.loss;
    if (grads) downstream_backward(model, trace, r.grad * inv, *grads);
  }
  return total * inv;
}

// Adam with bias correction.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Matrix*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const Matrix* m : params_) {
      m1_.emplace_back(m->rows(), m->cols());
      m2_.emplace_back(m->rows(), m->cols());
    }
  }

  void step(const std::vector<Matrix*>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto w = params_[i]->values();
      const auto gv = grads[i]->values();
      auto a = m1_[i].values();
      auto b = m2_[i].values();
      for (std::size_t j = 0; j < w.size(); ++j) {
        a[j] = beta1_ * a[j] + (1.0 - beta1_) * gv[j];
        b[j] = beta2_ * b[j] + (1.0 - beta2_) * gv[j] * gv[j];
        w[j] -= lr_ * (a[j] / c1) / (std::sqrt(b[j] / c2) + eps_);
      }
    }
  }

 private:
  std::vector<Matrix*> params_;
  std::vector<Matrix> m1_, m2_;
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
};

inline DownstreamModel train_downstream(const DownstreamConfig& cfg,
                                        std::span<const DownstreamSample> train) {
  require(!train.empty(), ErrorCode::kEmptyBatch, "no downstream training samples");
  Rng rng(cfg.seed);
  DownstreamModel model = make_downstream_model(cfg, rng);
  DownstreamParams grads = zeros_like(model.params);
  AdamOptimizer opt(model.params.parameters(), cfg.learning_rate);
  const auto grad_tensors = grads.parameters();
  std::vector<const DownstreamSample*> order;
  for (const auto& s : train) order.push_back(&s);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      grads.visit([](const std::string&, Matrix& m) { m.fill(0.0); });
      const double loss =
          downstream_batch_loss(model, std::span(order).subspan(start, n), &grads);
      if (!std::isfinite(loss)) fail(ErrorCode::kDivergedLoss, "downstream loss diverged");
      opt.step(grad_tensors);
    }
  }
  return model;
}

struct EvalReport {
  double roc_auc = 0.0;
  double pr_auc = 0.0;
  std::size_t samples = 0;
  std::size_t positives = 0;
};

inline EvalReport evaluate_downstream(const DownstreamModel& model,
                                      std::span<const DownstreamSample> test) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& s : test) {
    scores.push_back(downstream_forward(model, s));
    labels.push_back(s.label);
  }
  EvalReport r;
  r.roc_auc = roc_auc(scores, labels);
  r.pr_auc = pr_auc(scores, labels);
  r.samples = test.size();
  r.positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  return r;
}

}  // namespace derm
