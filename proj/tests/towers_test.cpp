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

#include "derm/towers.hpp"

#include <cmath>

#include "gtest/gtest.h"
#include "test_util.hpp"

namespace derm {
namespace {

using testing::random_context;
using testing::random_entity_bundle;
using testing::small_entity_tower;
using testing::small_upstream_spec;

// Straight-line scalar re-evaluation of the tower equations, written without
// the library kernels.
std::vector<double> oracle_tower(const Tower& tower, const FeatureBundle& f,
                                 const std::vector<double>& extra) {
  const auto& cfg = tower.config;
  std::vector<double> x = extra;
  std::size_t table = 0;
  for (const auto& slot : cfg.input_spec) {
    const FeatureValue* v = f.find(slot.name);
    if (slot.kind == SlotKind::kDense) {
      for (std::size_t i = 0; i < slot.dim; ++i) {
        x.push_back(v ? std::get<DenseFeature>(*v).values[i] : 0.0);
      }
      continue;
    }
    std::vector<std::uint64_t> ids;
    if (v && slot.kind == SlotKind::kCategorical) ids = {std::get<CategoricalFeature>(*v).id};
    if (v && slot.kind == SlotKind::kSequence) ids = std::get<SequenceFeature>(*v).ids;
    if (ids.empty()) ids = {0};
    for (std::size_t i = 0; i < slot.dim; ++i) {
      double s = 0;
      for (auto id : ids) s += tower.params.tables[table](id, i);
      x.push_back(s / ids.size());
    }
    ++table;
  }
  const std::size_t D = cfg.output_dim(), k = cfg.token_dim, T = cfg.num_tokens;
  auto lin = [](const Matrix& w, const Matrix* b, const std::vector<double>& in) {
    std::vector<double> out(w.rows());
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double s = b ? (*b)(r, 0) : 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c) s += w(r, c) * in[c];
      out[r] = s;
    }
    return out;
  };
  std::vector<double> h = lin(tower.params.input_weight, &tower.params.input_bias, x);
  for (const auto& layer : tower.params.layers) {
    std::vector<double> next = h;
    for (const auto& block : layer) {
      const auto& t = block.tensors;
      std::vector<double> y(D, 0.0);
      if (block.kind == BlockKind::kMasknetLike) {
        auto g = lin(t[0], &t[1], h);
        auto p = lin(t[2], &t[3], h);
        for (std::size_t i = 0; i < D; ++i) y[i] = p[i] / (1.0 + std::exp(-g[i]));
      } else if (block.kind == BlockKind::kMlp) {
        auto a = lin(t[0], &t[1], h);
        for (double& e : a) e = std::max(0.0, e);
        y = lin(t[2], &t[3], a);
      } else {
        std::vector<std::vector<double>> q(T), kk(T), vv(T);
        for (std::size_t s = 0; s < T; ++s) {
          std::vector<double> tok(h.begin() + s * k, h.begin() + (s + 1) * k);
          q[s] = lin(t[0], nullptr, tok);
          kk[s] = lin(t[1], nullptr, tok);
          vv[s] = lin(t[2], nullptr, tok);
        }
        for (std::size_t a = 0; a < T; ++a) {
          std::vector<double> sc(T);
          double mx = -1e300;
          for (std::size_t s = 0; s < T; ++s) {
            double d = 0;
            for (std::size_t i = 0; i < k; ++i) d += q[a][i] * kk[s][i];
            sc[s] = d / std::sqrt(double(k));
            mx = std::max(mx, sc[s]);
          }
          double z = 0;
          for (double& e : sc) z += (e = std::exp(e - mx));
          for (std::size_t s = 0; s < T; ++s) {
            for (std::size_t i = 0; i < k; ++i) y[a * k + i] += sc[s] / z * vv[s][i];
          }
        }
      }
      for (std::size_t i = 0; i < D; ++i) next[i] += y[i];
    }
    h = next;
  }
  if (cfg.normalize_output) {
    double n = 0;
    for (double e : h) n += e * e;
    n = std::sqrt(n);
    for (double& e : h) e /= n;
  }
  return h;
}

TEST(EmbedEntity, AllZeroParamsRejected) {
  Rng rng(1);
  Tower tower = make_tower(small_entity_tower("user"), rng);
  tower.params.visit([](const std::string&, Matrix& m) { m.fill(0.0); });
  FeatureBundle empty;
  try {
    embed_entity(tower, empty);
    FAIL() << "expected ZeroNorm";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kZeroNorm);
  }
}

TEST(EmbedEntity, DeterministicAndUnitNorm) {
  Rng rng(2);
  const Tower tower = make_tower(small_entity_tower("user"), rng);
  for (int trial = 0; trial < 50; ++trial) {
    const FeatureBundle b = random_entity_bundle(rng, "user");
    const Vector e1 = embed_entity(tower, b);
    const Vector e2 = embed_entity(tower, b);
    EXPECT_EQ(e1, e2);
    EXPECT_EQ(e1.dim(), 12u);
    EXPECT_NEAR(l2_norm(e1), 1.0, 1e-9);
    EXPECT_NEAR(cosine_similarity(e1, e2), 1.0, 1e-12);
  }
}

TEST(EmbedEntity, CategoricalIdChangesEmbedding) {
  Rng rng(3);
  const Tower tower = make_tower(small_entity_tower("user"), rng);
  FeatureBundle a = random_entity_bundle(rng, "user");
  FeatureBundle b = a;
  a.set_categorical("user_cat", 1);
  b.set_categorical("user_cat", 2);
  EXPECT_LT(cosine_similarity(embed_entity(tower, a), embed_entity(tower, b)), 1.0 - 1e-9);
}

TEST(EmbedEntity, MatchesOracle) {
  Rng rng(4);
  const Tower tower = make_tower(small_entity_tower("pin"), rng);
  for (int trial = 0; trial < 10; ++trial) {
    const FeatureBundle b = random_entity_bundle(rng, "pin");
    const Vector got = embed_entity(tower, b);
    const auto want = oracle_tower(tower, b, {});
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(EmbedEntity, MissingSlotsUseDefaults) {
  Rng rng(5);
  const Tower tower = make_tower(small_entity_tower("user"), rng);
  FeatureBundle full;
  full.set_dense("user_dense", {0.0, 0.0, 0.0});
  full.set_categorical("user_cat", 0);
  full.set_sequence("user_seq", {});
  FeatureBundle missing;
  EXPECT_EQ(embed_entity(tower, full), embed_entity(tower, missing));
}

TEST(EmbedEntity, InputErrors) {
  Rng rng(6);
  const Tower tower = make_tower(small_entity_tower("user"), rng);
  FeatureBundle b = random_entity_bundle(rng, "user");
  b.set_categorical("user_cat", 5);
  try {
    embed_entity(tower, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownCategoricalId);
  }
  b = random_entity_bundle(rng, "user");
  b.set_sequence("user_seq", {1, 9});
  EXPECT_THROW(embed_entity(tower, b), Error);
  b = random_entity_bundle(rng, "user");
  b.set_dense("user_dense", {1.0});
  try {
    embed_entity(tower, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
  b = random_entity_bundle(rng, "user");
  b.set_dense("user_cat", {1.0});
  EXPECT_THROW(embed_entity(tower, b), Error);
}

TEST(Interaction, DeterministicAndMatchesOracle) {
  const UpstreamModel model = make_upstream_model(small_upstream_spec(7, {"click", "conversion"}));
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const FeatureBundle ub = random_entity_bundle(rng, "user");
    const FeatureBundle pb = random_entity_bundle(rng, "pin");
    const FeatureBundle ctx = random_context(rng);
    const Vector u = embed_entity(model.user_tower, ub);
    const Vector p = embed_entity(model.pin_tower, pb);
    const TaskLogits a = interaction_forward(model, u, p, ctx);
    const TaskLogits b = interaction_forward(model, u, p, ctx);
    EXPECT_EQ(a.logits, b.logits);
    ASSERT_EQ(a.logits.size(), 2u);

    std::vector<double> extra(u.begin(), u.end());
    extra.insert(extra.end(), p.begin(), p.end());
    for (std::size_t i = 0; i < u.dim(); ++i) extra.push_back(u[i] * p[i]);
    const auto hidden = oracle_tower(model.interaction_tower, ctx, extra);
    for (std::size_t t = 0; t < 2; ++t) {
      double want = model.heads[t].bias(0, 0);
      for (std::size_t i = 0; i < hidden.size(); ++i) want += model.heads[t].weight(0, i) * hidden[i];
      EXPECT_NEAR(a.logits[t], want, 1e-12);
    }
  }
}

TEST(Interaction, ContextNeverReachesEntityTowers) {
  const UpstreamModel model = make_upstream_model(small_upstream_spec(9));
  Rng rng(10);
  const FeatureBundle ub = random_entity_bundle(rng, "user");
  const FeatureBundle pb = random_entity_bundle(rng, "pin");
  FeatureBundle ctx = random_context(rng);
  const Vector u1 = embed_entity(model.user_tower, ub);
  const Vector p1 = embed_entity(model.pin_tower, pb);
  const double l1 = interaction_forward(model, u1, p1, ctx).at("click");
  ctx.set_dense("hour", {3.0, -2.0});
  // Entity towers only see entity features; recomputing is bit-identical.
  const Vector u2 = embed_entity(model.user_tower, ub);
  const Vector p2 = embed_entity(model.pin_tower, pb);
  EXPECT_EQ(u1, u2);
  EXPECT_EQ(p1, p2);
  EXPECT_NE(l1, interaction_forward(model, u2, p2, ctx).at("click"));
}

TEST(TowerBackward, ZeroUpstreamGivesZeroGrads) {
  Rng rng(11);
  const Tower tower = make_tower(small_entity_tower("user"), rng);
  TowerTrace trace;
  embed_entity(tower, random_entity_bundle(rng, "user"), &trace);
  const TowerGradients g = tower_backward(tower, trace, Vector(tower.config.output_dim()));
  g.param_grads.visit([](const std::string& name, const Matrix& m) {
    for (double x : m.values()) EXPECT_EQ(x, 0.0) << name;
  });
  for (double x : g.input_grads) EXPECT_EQ(x, 0.0);
}

TEST(TowerBackward, SingleMlpLayerClosedForm) {
  TowerConfig cfg;
  cfg.input_spec = {{"x", SlotKind::kDense, 0, 2}};
  cfg.num_layers = 1;
  cfg.blocks = {{BlockKind::kMlp, BlockKind::kMlp}};
  cfg.token_dim = 2;
  cfg.num_tokens = 1;
  cfg.normalize_output = false;
  Rng rng(12);
  Tower tower = make_tower(cfg, rng);
  // Identity input map; second block zeroed so h1 = h0 + mlp(h0).
  tower.params.input_weight = Matrix(2, 2, {1, 0, 0, 1});
  tower.params.layers[0][1].tensors[0].fill(0.0);
  tower.params.layers[0][1].tensors[2].fill(0.0);
  auto& t = tower.params.layers[0][0].tensors;
  t[0] = Matrix(2, 2, {1, 2, -1, 1});
  t[1] = Matrix(2, 1, {0.5, -5.0});
  t[2] = Matrix(2, 2, {3, 0, 1, 1});
  t[3] = Matrix(2, 1, {0, 0});
  FeatureBundle f;
  f.set_dense("x", {1.0, 1.0});
  TowerTrace trace;
  tower_forward(tower, f, {}, &trace);
  // pre = (3.5, -5) -> act = (3.5, 0); out = h + W2 act = (1 + 10.5, 1 + 3.5)
  EXPECT_NEAR(trace.output[0], 11.5, 1e-12);
  EXPECT_NEAR(trace.output[1], 4.5, 1e-12);
  const TowerGradients g = tower_backward(tower, trace, Vector{1.0, 0.0});
  const auto& gb = g.param_grads.layers[0][0].tensors;
  // dW2 = dy act^T, d act = W2^T dy = (3, 0) masked by relu -> (3, 0)
  EXPECT_NEAR(gb[2](0, 0), 3.5, 1e-12);
  EXPECT_NEAR(gb[2](1, 0), 0.0, 1e-12);
  EXPECT_NEAR(gb[0](0, 0), 3.0, 1e-12);
  EXPECT_NEAR(gb[0](0, 1), 3.0, 1e-12);
  EXPECT_NEAR(gb[0](1, 0), 0.0, 1e-12);
  EXPECT_NEAR(gb[1](0, 0), 3.0, 1e-12);
  // dx = dh0 = dy + W1^T d act = (1 + 3, 0 + 6)
  EXPECT_NEAR(g.input_grads[0], 4.0, 1e-12);
  EXPECT_NEAR(g.input_grads[1], 6.0, 1e-12);
}

struct ParamsView {
  TowerParams* p;
  template <typename F>
  void visit(F&& fn) { p->visit(fn); }
};

TEST(TowerBackward, FullTowerMatchesFiniteDifferences) {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    Rng rng(seed);
    Tower tower = make_tower(small_entity_tower("user"), rng);
    const FeatureBundle f = random_entity_bundle(rng, "user");
    const Vector w(testing::random_values(rng, tower.config.output_dim()));
    auto loss = [&]() { return dot(embed_entity(tower, f), w); };
    TowerTrace trace;
    embed_entity(tower, f, &trace);
    TowerGradients g = tower_backward(tower, trace, w);
    ParamsView model{&tower.params}, grads{&g.param_grads};
    for (const auto& c : testing::check_all_tensors(model, grads, loss)) {
      EXPECT_LT(c.max_rel_error, 1e-4) << c.name << " seed " << seed;
    }
  }
}

}  // namespace
}  // namespace derm
