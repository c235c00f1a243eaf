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

// End-to-end pipeline settings and the in-process run for one world seed:
// generate, train both upstream models, produce daily embeddings (back
// inference over the batch window, daily inference after it), aggregate,
// publish one generation per day, and train/evaluate downstream arms.
//
// Timeline for a world of D days and a window of W days:
//   snapshot W        trained on days 1..W (batch window)
//   snapshot t > W    snapshot t-1 plus one pass over day t
//   daily set t <= W  back inference with snapshot W
//   daily set t > W   inference with snapshot t
//   generation t      aggregated state after folding daily sets 1..t
//   downstream sample on day t reads generation t-1

#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "derm/downstream.hpp"
#include "derm/experiment.hpp"
#include "derm/lifecycle.hpp"
#include "derm/store.hpp"
#include "derm/synth.hpp"
#include "derm/towers.hpp"
#include "derm/trainer.hpp"

namespace derm {

struct UpstreamSettings {
  std::size_t token_dim = 4;
  std::size_t num_tokens = 4;
  std::vector<LayerBlocks> blocks{{BlockKind::kMasknetLike, BlockKind::kMlp},
                                  {BlockKind::kAttentionLike, BlockKind::kMlp}};
  std::vector<LayerBlocks> interaction_blocks{{BlockKind::kMasknetLike, BlockKind::kMlp}};
  std::size_t categorical_dim = 4;
  double temperature = 0.1;
  TrainConfig train;

  friend bool operator==(const UpstreamSettings&, const UpstreamSettings&) = default;
};

struct DownstreamSettings {
  int train_first = 15;
  int train_last = 23;
  int test_first = 24;
  int test_last = 28;
  std::optional<std::size_t> projection_dim;
  std::size_t num_experts = 4;
  std::size_t cross_layers = 2;
  bool sequence_encoder = true;
  std::size_t seq_dim = 8;
  std::size_t expert_hidden = 16;
  std::size_t expert_dim = 8;
  double learning_rate = 0.003;
  std::size_t batch_size = 64;
  std::size_t epochs = 3;

  friend bool operator==(const DownstreamSettings&, const DownstreamSettings&) = default;
};

// An arm of the embedding-count grid: the set of served inputs it consumes.
using InputArm = std::vector<std::string>;

inline std::string arm_name(const InputArm& inputs) {
  if (inputs.empty()) return kBaselineArm;
  std::string out;
  for (const auto& i : inputs) out += (out.empty() ? "" : "+") + i;
  return out;
}

struct ExperimentGrid {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<AggregationHeuristic> aggregation_arms{
      AggregationHeuristic::acc(), AggregationHeuristic::ma(0.2), AggregationHeuristic::ma(0.5),
      AggregationHeuristic::ma(0.8), AggregationHeuristic::ap()};
  std::string aggregation_task = "cvr";
  std::string aggregation_input = "cvr-user";
  std::vector<InputArm> ctr_arms{{"ctr-user"},
                                 {"ctr-pin"},
                                 {"cvr-user"},
                                 {"cvr-pin"},
                                 {"ctr-user", "ctr-pin"},
                                 {"ctr-user", "cvr-user"},
                                 {"cvr-user", "cvr-pin"},
                                 {"ctr-user", "ctr-pin", "cvr-user", "cvr-pin"}};
  std::vector<InputArm> cvr_arms{{"ctr-user"},
                                 {"ctr-pin"},
                                 {"cvr-user"},
                                 {"cvr-pin"},
                                 {"cvr-user", "cvr-pin"},
                                 {"ctr-user", "ctr-pin", "cvr-user"},
                                 {"ctr-user", "ctr-pin", "cvr-user", "cvr-pin"}};

  friend bool operator==(const ExperimentGrid&, const ExperimentGrid&) = default;
};

struct PipelineConfig {
  WorldConfig world;
  int window_days = 14;
  UpstreamSettings ctr;
  UpstreamSettings cvr;
  AggregationHeuristic aggregation = AggregationHeuristic::ma(0.8);
  int retention_days = 90;
  DownstreamSettings downstream;
  ExperimentGrid experiment;
  std::string work_dir = "derm_work";

  const UpstreamSettings& upstream(const std::string& model) const {
    if (model == "ctr") return ctr;
    if (model == "cvr") return cvr;
    fail(ErrorCode::kInvalidConfig, "unknown upstream model '" + model + "'");
  }

  // Last day an upstream snapshot is needed for: the day before the last
  // downstream test day.
  int last_snapshot_day() const { return downstream.test_last - 1; }

  void validate() const {
    world.validate();
    aggregation.validate();
    for (const auto& h : experiment.aggregation_arms) h.validate();
    require(window_days >= 1 && window_days < world.days, ErrorCode::kInvalidConfig,
            "window_days must lie in [1, days)");
    require(retention_days >= 1, ErrorCode::kInvalidConfig, "retention_days must be >= 1");
    const auto& d = downstream;
    require(d.train_first > window_days && d.train_first <= d.train_last &&
                d.train_last < d.test_first && d.test_first <= d.test_last &&
                d.test_last <= world.days,
            ErrorCode::kInvalidConfig,
            "downstream days must satisfy window < train_first <= train_last < test_first <= "
            "test_last <= days");
    for (const auto* s : {&ctr, &cvr}) s->train.validate();
    require(!experiment.seeds.empty(), ErrorCode::kInvalidConfig, "experiment needs seeds");
    require(experiment.aggregation_task == "ctr" || experiment.aggregation_task == "cvr",
            ErrorCode::kInvalidConfig, "aggregation_task must be ctr or cvr");
    require(is_derm_input(experiment.aggregation_input), ErrorCode::kInvalidConfig,
            "unknown aggregation_input '" + experiment.aggregation_input + "'");
    for (const auto* arms : {&experiment.ctr_arms, &experiment.cvr_arms}) {
      for (const auto& arm : *arms) {
        for (const auto& i : arm) {
          require(is_derm_input(i), ErrorCode::kInvalidConfig, "unknown arm input '" + i + "'");
        }
      }
    }
  }

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

inline std::string source_for_model(const std::string& model) { return model + "-upstream"; }

inline Dataset dataset_for_model(const std::string& model) {
  return model == "ctr" ? Dataset::kEngagement : Dataset::kConversion;
}

inline UpstreamModelSpec make_upstream_spec(const PipelineConfig& cfg, const std::string& model,
                                            std::uint64_t seed) {
  const UpstreamSettings& s = cfg.upstream(model);
  const std::size_t cats = cfg.world.num_categories + 1;
  const std::size_t latent = cfg.world.latent_dim;
  UpstreamModelSpec spec;
  spec.name = model;
  auto entity = [&](std::vector<FeatureSlot> slots) {
    TowerConfig t;
    t.input_spec = std::move(slots);
    t.num_layers = s.blocks.size();
    t.blocks = s.blocks;
    t.token_dim = s.token_dim;
    t.num_tokens = s.num_tokens;
    return t;
  };
  spec.user = entity({{slots::kUserObs, SlotKind::kDense, 0, latent},
                      {slots::kUserSegment, SlotKind::kCategorical, cats, s.categorical_dim},
                      {slots::kUserInterests, SlotKind::kSequence, cats, s.categorical_dim}});
  spec.pin = entity({{slots::kPinObs, SlotKind::kDense, 0, latent},
                     {slots::kPinCategory, SlotKind::kCategorical, cats, s.categorical_dim}});
  spec.interaction.input_spec = {
      {slots::kSurface, SlotKind::kCategorical, cfg.world.num_surfaces() + 1, 3},
      {slots::kHour, SlotKind::kDense, 0, 2}};
  spec.interaction.num_layers = s.interaction_blocks.size();
  spec.interaction.blocks = s.interaction_blocks;
  spec.interaction.token_dim = s.token_dim;
  spec.interaction.num_tokens = s.num_tokens;
  spec.tasks = {model == "ctr" ? "click" : "conversion"};
  spec.initial_temperature = s.temperature;
  spec.init_seed = mix_seed(seed, model == "ctr" ? 11 : 12);
  return spec;
}

inline TrainConfig make_train_config(const PipelineConfig& cfg, const std::string& model,
                                     std::uint64_t seed) {
  TrainConfig t = cfg.upstream(model).train;
  t.seed = mix_seed(seed, model == "ctr" ? 21 : 22);
  return t;
}

inline std::span<const DayPartition> day_range(const std::vector<DayPartition>& days, int first,
                                               int last) {
  require(first >= 1 && last <= static_cast<int>(days.size()) && first <= last + 1,
          ErrorCode::kInvalidConfig,
          "day range [" + std::to_string(first) + ", " + std::to_string(last) + "] out of bounds");
  return std::span<const DayPartition>(days).subspan(first - 1, last - first + 1);
}

/// Snapshots keyed by watermark day, window .. last_snapshot_day.
struct UpstreamRun {
  std::map<int, ModelSnapshot> snapshots;
};

inline UpstreamRun run_upstream(const PipelineConfig& cfg, const World& world,
                                const std::string& model, std::uint64_t seed) {
  const auto& days = world.dataset(dataset_for_model(model));
  const TrainConfig train = make_train_config(cfg, model, seed);
  UpstreamRun run;
  ModelSnapshot snap =
      train_batch_window(make_upstream_spec(cfg, model, seed),
                         day_range(days, 1, cfg.window_days), train)
          .snapshot;
  run.snapshots.emplace(cfg.window_days, snap);
  for (int d = cfg.window_days + 1; d <= cfg.last_snapshot_day(); ++d) {
    snap = train_incremental(snap, days[d - 1], train).snapshot;
    run.snapshots.emplace(d, snap);
  }
  return run;
}

/// Deduplicated daily sets for days 1 .. last_snapshot_day.
inline std::vector<DailyEmbeddingSet> produce_daily_sets(const PipelineConfig& cfg,
                                                         const World& world,
                                                         const std::string& model,
                                                         const UpstreamRun& run) {
  const auto& days = world.dataset(dataset_for_model(model));
  const std::string source = source_for_model(model);
  std::vector<DailyEmbeddingSet> out =
      back_infer(run.snapshots.at(cfg.window_days), day_range(days, 1, cfg.window_days), source);
  for (int d = cfg.window_days + 1; d <= cfg.last_snapshot_day(); ++d) {
    out.push_back(dedup_streams(infer_daily(run.snapshots.at(d), days[d - 1], source)));
  }
  return out;
}

struct WindowCoverage {
  double back_window = 0.0;  // every window day re-embedded with the window snapshot
  double single_day = 0.0;   // only the window's last day embedded
};

/// Coverage of the entities active anywhere in the batch window, with and
/// without back inference, using the snapshot trained on that window.
inline WindowCoverage window_coverage(const PipelineConfig& cfg, const World& world,
                                      const std::string& model, const ModelSnapshot& snapshot) {
  const auto window = day_range(world.dataset(dataset_for_model(model)), 1, cfg.window_days);
  const auto universe = entity_universe(window);
  const std::string source = source_for_model(model);
  AggregatedState back;
  for (const auto& set : back_infer(snapshot, window, source)) {
    back = aggregate_day(std::move(back), set, cfg.aggregation);
  }
  AggregatedState single;
  single.day = cfg.window_days - 1;
  single = aggregate_day(std::move(single),
                         dedup_streams(infer_daily(snapshot, window.back(), source)),
                         cfg.aggregation);
  return {coverage_report(back, universe).overall, coverage_report(single, universe).overall};
}

/// Folds daily sets in order and publishes (in memory) generations for the
/// days downstream samples read: train_first-1 .. test_last-1.
inline std::map<int, std::shared_ptr<const StoreGeneration>> aggregate_generations(
    const PipelineConfig& cfg, const std::vector<DailyEmbeddingSet>& daily,
    const AggregationHeuristic& h, const std::string& source) {
  std::map<int, std::shared_ptr<const StoreGeneration>> out;
  AggregatedState state;
  state.heuristic = h;
  for (const auto& set : daily) {
    state = apply_retention(aggregate_day(std::move(state), set, h), set.day, cfg.retention_days);
    if (set.day >= cfg.downstream.train_first - 1) {
      out.emplace(set.day,
                  std::make_shared<const StoreGeneration>(make_generation(state, set.day, source)));
    }
  }
  return out;
}

// Generations for one served input, keyed by generation day.
using GenerationSeries = std::map<int, std::shared_ptr<const StoreGeneration>>;

inline std::pair<std::string, EntityKind> split_input(const std::string& input) {
  const auto dash = input.find('-');
  return {input.substr(0, dash), parse_entity_kind(input.substr(dash + 1))};
}

inline std::size_t base_feature_dim(const WorldConfig& w) {
  return 2 * w.latent_dim + w.num_surfaces();
}

inline Vector base_features(const WorldConfig& w, const TrainingSample& s) {
  std::vector<double> x;
  for (const auto* bundle_name : {slots::kUserObs, slots::kPinObs}) {
    const FeatureBundle& b = bundle_name == slots::kUserObs ? s.user : s.pin;
    const auto* v = b.find(bundle_name);
    if (v) {
      const auto& d = std::get<DenseFeature>(*v).values;
      x.insert(x.end(), d.begin(), d.end());
    } else {
      x.insert(x.end(), w.latent_dim, 0.0);
    }
  }
  const auto* surface = s.context.find(slots::kSurface);
  const std::uint64_t sid = surface ? std::get<CategoricalFeature>(*surface).id : 0;
  for (std::size_t k = 1; k <= w.num_surfaces(); ++k) x.push_back(sid == k ? 1.0 : 0.0);
  return Vector(std::move(x));
}

struct DownstreamData {
  std::vector<DownstreamSample> train;
  std::vector<DownstreamSample> test;
};

/// Builds samples for the task's dataset. Each input reads the generation of
/// the day before the sample; absent keys become zero vectors with presence
/// 0. Columns are standardized with training-split statistics.
inline DownstreamData prepare_downstream_data(
    const PipelineConfig& cfg, const World& world, const std::string& task,
    const std::vector<std::string>& inputs,
    const std::map<std::string, const GenerationSeries*>& series) {
  const auto& days = world.dataset(dataset_for_model(task));
  const std::string label = task == "ctr" ? "click" : "conversion";
  const auto& ds = cfg.downstream;
  DownstreamData out;
  for (int d = ds.train_first; d <= ds.test_last; ++d) {
    if (d > ds.train_last && d < ds.test_first) continue;
    auto& split = d <= ds.train_last ? out.train : out.test;
    for (const auto& s : days[d - 1].samples) {
      DownstreamSample x;
      x.base = base_features(world.config, s);
      if (const auto* seq = s.user.find(slots::kUserInterests)) {
        x.sequence = std::get<SequenceFeature>(*seq).ids;
      }
      for (const auto& input : inputs) {
        const auto [model, kind] = split_input(input);
        const GenerationSeries& gens = *series.at(input);
        auto it = gens.find(d - 1);
        if (it == gens.end()) {
          fail(ErrorCode::kMissingPrerequisite,
               "no " + model + " generation for day " + std::to_string(d - 1));
        }
        const StoreKey key{kind, kind == EntityKind::kUser ? s.user_id : s.pin_id,
                           source_code(source_for_model(model))};
        auto v = it->second->lookup(key);
        x.presence.push_back(v ? 1.0 : 0.0);
        x.derm.push_back(v ? std::move(*v) : Vector(it->second->dim()));
      }
      x.label = label_for_task(s.labels, label);
      split.push_back(std::move(x));
    }
  }
  require(!out.train.empty() && !out.test.empty(), ErrorCode::kEmptyBatch,
          "downstream split is empty");

  // Standardize base and embedding columns on the training split; absent
  // embeddings stay at zero.
  auto standardize = [&](auto get, std::size_t dim, bool skip_absent, std::size_t slot) {
    std::vector<double> mean(dim, 0.0), sq(dim, 0.0);
    double n = 0.0;
    for (auto& x : out.train) {
      if (skip_absent && x.presence[slot] == 0.0) continue;
      const Vector& v = get(x);
      for (std::size_t i = 0; i < dim; ++i) {
        mean[i] += v[i];
        sq[i] += v[i] * v[i];
      }
      n += 1.0;
    }
    if (n == 0.0) return;
    std::vector<double> inv(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      mean[i] /= n;
      const double var = sq[i] / n - mean[i] * mean[i];
      inv[i] = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
    }
    for (auto* split : {&out.train, &out.test}) {
      for (auto& x : *split) {
        if (skip_absent && x.presence[slot] == 0.0) continue;
        Vector& v = get(x);
        for (std::size_t i = 0; i < dim; ++i) v[i] = (v[i] - mean[i]) * inv[i];
      }
    }
  };
  const std::size_t obs_dim = 2 * world.config.latent_dim;  // one-hot surface left as is
  standardize([](DownstreamSample& x) -> Vector& { return x.base; }, obs_dim, false, 0);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t dim = out.train.front().derm[i].dim();
    standardize([i](DownstreamSample& x) -> Vector& { return x.derm[i]; }, dim, true, i);
  }
  return out;
}

inline DownstreamConfig make_downstream_config(const PipelineConfig& cfg, const World& world,
                                               const std::string& task,
                                               const std::vector<std::string>& inputs,
                                               std::size_t derm_dim, std::uint64_t seed) {
  const auto& ds = cfg.downstream;
  DownstreamConfig d;
  d.task = task;
  d.derm_inputs = inputs;
  d.derm_dim = derm_dim;
  d.projection_dim = ds.projection_dim;
  if (d.projection_dim && !inputs.empty()) {
    d.projection_dim = std::min(*d.projection_dim, d.derm_concat_dim());
  }
  d.num_experts = ds.num_experts;
  d.cross_layers = ds.cross_layers;
  d.sequence_encoder = ds.sequence_encoder;
  d.base_dim = base_feature_dim(world.config);
  d.seq_cardinality = world.config.num_categories + 1;
  d.seq_dim = ds.seq_dim;
  d.expert_hidden = ds.expert_hidden;
  d.expert_dim = ds.expert_dim;
  d.learning_rate = ds.learning_rate;
  d.batch_size = ds.batch_size;
  d.epochs = ds.epochs;
  // Shared across arms of one seed so arms differ only in their inputs.
  d.seed = mix_seed(seed, 31);
  return d;
}

/// Everything derived from one world seed, computed lazily and cached.
class SeedRun {
 public:
  SeedRun(PipelineConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
    cfg_.world.seed = seed;
    cfg_.validate();
  }

  const PipelineConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }

  const World& world() {
    if (!world_) world_ = std::make_unique<World>(generate_world(cfg_.world));
    return *world_;
  }

  const UpstreamRun& upstream(const std::string& model) {
    auto it = runs_.find(model);
    if (it == runs_.end()) it = runs_.emplace(model, run_upstream(cfg_, world(), model, seed_)).first;
    return it->second;
  }

  const std::vector<DailyEmbeddingSet>& daily(const std::string& model) {
    auto it = daily_.find(model);
    if (it == daily_.end()) {
      it = daily_.emplace(model, produce_daily_sets(cfg_, world(), model, upstream(model))).first;
    }
    return it->second;
  }

  const GenerationSeries& generations(const std::string& model, const AggregationHeuristic& h) {
    const std::string key = model + "/" + to_string(h);
    auto it = gens_.find(key);
    if (it == gens_.end()) {
      it = gens_.emplace(key, aggregate_generations(cfg_, daily(model), h,
                                                    source_for_model(model)))
               .first;
    }
    return it->second;
  }

  std::size_t embedding_dim(const std::string& model) {
    return upstream(model).snapshots.begin()->second.model.user_tower.config.output_dim();
  }

  /// Trains and evaluates one downstream arm. `heuristics` overrides the
  /// pipeline's aggregation per input.
  EvalReport run_arm(const std::string& task, const std::vector<std::string>& inputs,
                     const std::map<std::string, AggregationHeuristic>& heuristics = {}) {
    std::map<std::string, const GenerationSeries*> series;
    std::size_t dim = 16;
    for (const auto& input : inputs) {
      const auto model = split_input(input).first;
      auto h = heuristics.count(input) ? heuristics.at(input) : cfg_.aggregation;
      series[input] = &generations(model, h);
      dim = embedding_dim(model);
    }
    const DownstreamData data = prepare_downstream_data(cfg_, world(), task, inputs, series);
    const DownstreamConfig dcfg = make_downstream_config(cfg_, world(), task, inputs, dim, seed_);
    const DownstreamModel model = train_downstream(dcfg, data.train);
    return evaluate_downstream(model, data.test);
  }

  /// ROC-AUC of the true-latent scorer on the downstream test days.
  double oracle_test_auc(const std::string& task) {
    std::vector<int> labels;
    const auto scores = oracle_scores(world(), task == "ctr" ? "click" : "conversion",
                                      cfg_.downstream.test_first, cfg_.downstream.test_last,
                                      &labels);
    return roc_auc(scores, labels);
  }

 private:
  PipelineConfig cfg_;
  std::uint64_t seed_;
  std::unique_ptr<World> world_;
  std::map<std::string, UpstreamRun> runs_;
  std::map<std::string, std::vector<DailyEmbeddingSet>> daily_;
  std::map<std::string, GenerationSeries> gens_;
};

/// Aggregation-heuristic grid: baseline plus one arm per heuristic applied to
/// the configured input on the configured task.
inline ExperimentTable run_aggregation_experiment(const PipelineConfig& cfg,
                                                  std::map<std::uint64_t, SeedRun>& runs) {
  const auto& g = cfg.experiment;
  std::vector<std::string> arms{kBaselineArm};
  for (const auto& h : g.aggregation_arms) arms.push_back(to_string(h));
  return run_sensitivity_experiment(arms, g.seeds, [&](const std::string& arm, std::uint64_t seed) {
    auto it = runs.find(seed);
    if (it == runs.end()) it = runs.emplace(seed, SeedRun(cfg, seed)).first;
    if (arm == kBaselineArm) return it->second.run_arm(g.aggregation_task, {});
    return it->second.run_arm(g.aggregation_task, {g.aggregation_input},
                              {{g.aggregation_input, parse_heuristic(arm)}});
  });
}

/// Embedding-count grid for one downstream task.
inline ExperimentTable run_embedding_count_experiment(const PipelineConfig& cfg,
                                                      const std::string& task,
                                                      std::map<std::uint64_t, SeedRun>& runs) {
  const auto& g = cfg.experiment;
  const auto& grid = task == "ctr" ? g.ctr_arms : g.cvr_arms;
  std::vector<std::string> arms{kBaselineArm};
  std::map<std::string, InputArm> by_name;
  for (const auto& a : grid) {
    arms.push_back(arm_name(a));
    by_name[arm_name(a)] = a;
  }
  return run_sensitivity_experiment(arms, g.seeds, [&](const std::string& arm, std::uint64_t seed) {
    auto it = runs.find(seed);
    if (it == runs.end()) it = runs.emplace(seed, SeedRun(cfg, seed)).first;
    return it->second.run_arm(task, arm == kBaselineArm ? InputArm{} : by_name.at(arm));
  });
}

}  // namespace derm
