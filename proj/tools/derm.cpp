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

// derm: command-line driver for the embedding pipeline.
//
// Work directory layout (all paths relative to --work-dir):
//   data/<ctr|cvr>/<day>.day        synthetic day partitions
//   snapshots/<ctr|cvr>/<day>.snap  upstream model snapshots
//   daily/<ctr|cvr>/<day>.gen       deduplicated daily embeddings
//   aggregated/<ctr|cvr>/<day>.gen  aggregated embeddings after each day
//   store/<source>/<day>[.N].gen    published generations (see --store-dir)

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <thread>

#include "derm/config.hpp"
#include "derm/pipeline.hpp"
#include "derm/serving.hpp"

namespace fs = std::filesystem;
using namespace derm;

namespace {

struct Common {
  std::string config_path;
  std::string work_dir;  // overrides [paths] work_dir

  PipelineConfig load() const {
    PipelineConfig cfg = load_config(config_path);
    if (!work_dir.empty()) cfg.work_dir = work_dir;
    return cfg;
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "Pipeline config file")->required();
  cmd->add_option("-w,--work-dir", c.work_dir, "Override the config's work directory");
}

void check_model(const std::string& model) {
  require(model == "ctr" || model == "cvr", ErrorCode::kInvalidConfig,
          "model must be ctr or cvr, got '" + model + "'");
}

fs::path daily_path(const PipelineConfig& cfg, const std::string& model, int day) {
  return fs::path(cfg.work_dir) / "daily" / model / (std::to_string(day) + ".gen");
}

fs::path aggregated_path(const PipelineConfig& cfg, const std::string& model, int day) {
  return fs::path(cfg.work_dir) / "aggregated" / model / (std::to_string(day) + ".gen");
}

fs::path default_store_dir(const PipelineConfig& cfg) { return fs::path(cfg.work_dir) / "store"; }

// Day partitions of one dataset, days 1..last, read from the work directory.
std::vector<DayPartition> load_days(const PipelineConfig& cfg, Dataset ds, int last) {
  std::vector<DayPartition> out;
  for (int d = 1; d <= last; ++d) out.push_back(load_day(cfg.work_dir, ds, d));
  return out;
}

// Daily dumps are stored as generations; this reads one back as records.
DailyEmbeddingSet load_daily(const PipelineConfig& cfg, const std::string& model, int day) {
  const StoreGeneration g = load_generation(daily_path(cfg, model, day));
  DailyEmbeddingSet set{day, {}};
  for (const auto& k : g.keys()) {
    set.records.push_back({{k.kind, k.id}, day, 0, *g.lookup(k), source_tag(k.source)});
  }
  return set;
}

void write_generation(const fs::path& path, const StoreGeneration& g) {
  write_file_atomic(path, g.serialize());
  std::cout << "wrote " << path.string() << "\n";
}

// --- subcommands -----------------------------------------------------------

void cmd_generate(const Common& c) {
  const PipelineConfig cfg = c.load();
  const World w = generate_world(cfg.world);
  write_world(cfg.work_dir, w);
  for (Dataset ds : {Dataset::kEngagement, Dataset::kConversion}) {
    std::size_t samples = 0;
    for (const auto& p : w.dataset(ds)) samples += p.samples.size();
    std::cout << to_string(ds) << ": " << w.config.days << " days, " << samples << " samples\n";
  }
}

void cmd_train_upstream(const Common& c, const std::string& model) {
  check_model(model);
  const PipelineConfig cfg = c.load();
  const auto days = load_days(cfg, dataset_for_model(model), cfg.last_snapshot_day());
  const TrainConfig train = make_train_config(cfg, model, cfg.world.seed);
  TrainResult r = train_batch_window(make_upstream_spec(cfg, model, cfg.world.seed),
                                     day_range(days, 1, cfg.window_days), train);
  auto report = [&](const TrainResult& res) {
    const auto path = snapshot_path(cfg.work_dir, model, res.snapshot.watermark_day);
    save_snapshot(path, res.snapshot);
    const double last = res.step_losses.empty() ? 0.0 : res.step_losses.back();
    std::printf("day %d: %zu steps, last loss %.6f -> %s\n", res.snapshot.watermark_day,
                res.step_losses.size(), last, path.string().c_str());
  };
  report(r);
  for (int d = cfg.window_days + 1; d <= cfg.last_snapshot_day(); ++d) {
    r = train_incremental(r.snapshot, days[d - 1], train);
    report(r);
  }
}

void cmd_infer(const Common& c, const std::string& model, std::optional<int> day,
               bool back_window, bool all) {
  check_model(model);
  const PipelineConfig cfg = c.load();
  require(day.has_value() + back_window + all == 1, ErrorCode::kInvalidConfig,
          "choose exactly one of --day, --back-window, --all");
  const std::string source = source_for_model(model);
  const Dataset ds = dataset_for_model(model);
  auto infer_one = [&](int d) {
    require(d >= 1 && d <= cfg.last_snapshot_day(), ErrorCode::kInvalidConfig,
            "day " + std::to_string(d) + " outside [1, " +
                std::to_string(cfg.last_snapshot_day()) + "]");
    // Days inside the batch window are embedded by the window's snapshot.
    const int snap_day = std::max(d, cfg.window_days);
    const ModelSnapshot snap = load_snapshot(snapshot_path(cfg.work_dir, model, snap_day));
    const DailyEmbeddingSet set =
        dedup_streams(infer_daily(snap, load_day(cfg.work_dir, ds, d), source));
    write_generation(daily_path(cfg, model, d), make_generation(set, source));
  };
  if (day) {
    infer_one(*day);
    return;
  }
  const int last = all ? cfg.last_snapshot_day() : cfg.window_days;
  for (int d = 1; d <= last; ++d) infer_one(d);
}

void cmd_aggregate(const Common& c, const std::string& model, std::optional<int> day, bool all) {
  check_model(model);
  const PipelineConfig cfg = c.load();
  require(day.has_value() != all, ErrorCode::kInvalidConfig, "choose one of --day, --all");
  const int last = all ? cfg.last_snapshot_day() : *day;
  require(last >= 1, ErrorCode::kInvalidConfig, "day must be >= 1");
  const std::string source = source_for_model(model);
  const auto days = load_days(cfg, dataset_for_model(model), last);
  AggregatedState state, previous;
  for (int d = 1; d <= last; ++d) {
    previous = state;
    state = apply_retention(aggregate_day(std::move(state), load_daily(cfg, model, d),
                                          cfg.aggregation),
                            d, cfg.retention_days);
    if (!all && d != last) continue;
    write_generation(aggregated_path(cfg, model, d), make_generation(state, d, source));
    const auto cov = coverage_report(state, entity_universe(day_range(days, 1, d)));
    std::printf("day %d: %zu entities, coverage user %.4f pin %.4f overall %.4f", d,
                state.entries.size(), cov.user.value_or(0.0), cov.pin.value_or(0.0),
                cov.overall);
    if (d > 1 && !previous.entries.empty()) {
      try {
        std::printf(", stability %.6f", stability_report(previous, state).mean);
      } catch (const Error&) {
        std::printf(", stability n/a");
      }
    }
    std::printf("\n");
  }
}

void cmd_publish(const Common& c, const std::string& model, std::optional<int> day, bool all,
                 std::string store_dir) {
  check_model(model);
  const PipelineConfig cfg = c.load();
  require(day.has_value() != all, ErrorCode::kInvalidConfig, "choose one of --day, --all");
  if (store_dir.empty()) store_dir = default_store_dir(cfg).string();
  const std::string source = source_for_model(model);
  const int first = all ? 1 : *day;
  const int last = all ? cfg.last_snapshot_day() : *day;
  for (int d = first; d <= last; ++d) {
    const auto in = aggregated_path(cfg, model, d);
    if (all && !fs::exists(in)) continue;
    const StoreGeneration gen = load_generation(in);
    // Re-publishing identical content is a no-op so reruns are idempotent.
    if (const auto latest = latest_generation(store_dir, source, d)) {
      if (read_file(*latest) == gen.serialize()) {
        std::cout << "unchanged " << latest->string() << "\n";
        continue;
      }
    }
    std::cout << "published " << publish_generation(gen, source, store_dir).string() << "\n";
  }
}

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

void cmd_serve(const std::string& store_dir, const std::string& bind, std::optional<int> day,
               double seconds) {
  std::vector<StoreGeneration> gens;
  for (const std::string source : {"ctr-upstream", "cvr-upstream"}) {
    std::optional<int> pick = day;
    if (!pick) {
      for (int d = 0; fs::exists(fs::path(store_dir) / source) && d < 100000; ++d) {
        if (latest_generation(store_dir, source, d)) pick = d;
      }
    }
    if (!pick) continue;
    const auto path = latest_generation(store_dir, source, *pick);
    if (!path) {
      fail(ErrorCode::kMissingPrerequisite,
           "missing " + generation_path(store_dir, source, *pick).string());
    }
    gens.push_back(load_generation(*path));
    std::cout << "loaded " << path->string() << " (" << gens.back().size() << " keys)\n";
  }
  if (gens.empty()) {
    fail(ErrorCode::kMissingPrerequisite, "no generations under " + store_dir);
  }
  auto merged = std::make_shared<const StoreGeneration>(merge_generations(gens));
  EmbeddingServer server(merged, bind);
  std::cout << "serving " << merged->size() << " keys on port " << server.port() << std::endl;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  const auto start = std::chrono::steady_clock::now();
  while (!g_stop) {
    if (seconds > 0 && std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                               .count() >= seconds) {
      break;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  server.stop();
}

int cmd_query(const std::string& address, const std::string& kind, std::uint64_t id,
              const std::string& source) {
  const auto [host, port] = detail::split_address(address);
  EmbeddingClient client(host, port);
  const auto r = client.query({parse_entity_kind(kind), id, source_code(source)});
  switch (r.status) {
    case LookupStatus::kOk: {
      std::cout << "OK";
      for (float f : r.values) std::printf(" %.9g", f);
      std::cout << "\n";
      return 0;
    }
    case LookupStatus::kMissing:
      std::cout << "MISSING\n";
      return 4;
    case LookupStatus::kBadRequest:
      std::cout << "BAD_REQUEST\n";
      return 5;
  }
  return 5;
}

void cmd_train_downstream(const Common& c, const std::string& task, const std::string& inputs) {
  check_model(task);
  const PipelineConfig cfg = c.load();
  InputArm arm;
  if (!inputs.empty() && inputs != kBaselineArm) {
    arm = config_detail::split(inputs, '+');
    for (const auto& i : arm) {
      require(is_derm_input(i), ErrorCode::kInvalidConfig, "unknown embedding input '" + i + "'");
    }
  }
  World world;
  world.config = cfg.world;
  world.engagement = load_days(cfg, Dataset::kEngagement, cfg.downstream.test_last);
  world.conversion = load_days(cfg, Dataset::kConversion, cfg.downstream.test_last);
  std::map<std::string, GenerationSeries> by_model;
  std::map<std::string, const GenerationSeries*> series;
  std::size_t dim = 16;
  for (const auto& input : arm) {
    const std::string model = split_input(input).first;
    auto& gens = by_model[model];
    if (gens.empty()) {
      for (int d = cfg.downstream.train_first - 1; d < cfg.downstream.test_last; ++d) {
        gens[d] = std::make_shared<const StoreGeneration>(
            load_generation(aggregated_path(cfg, model, d)));
      }
    }
    dim = gens.begin()->second->dim();
    series[input] = &gens;
  }
  const DownstreamData data = prepare_downstream_data(cfg, world, task, arm, series);
  const DownstreamConfig dcfg =
      make_downstream_config(cfg, world, task, arm, dim, cfg.world.seed);
  const DownstreamModel model = train_downstream(dcfg, data.train);
  const EvalReport r = evaluate_downstream(model, data.test);
  std::printf("task %s arm %s: roc_auc %.6f pr_auc %.6f (%zu samples, %zu positives)\n",
              task.c_str(), arm_name(arm).c_str(), r.roc_auc, r.pr_auc, r.samples, r.positives);
}

void cmd_experiment(const Common& c, const std::string& grid, const std::string& out_dir) {
  const PipelineConfig cfg = c.load();
  require(grid == "aggregation" || grid == "ctr" || grid == "cvr" || grid == "all",
          ErrorCode::kInvalidConfig, "grid must be aggregation, ctr, cvr or all");
  fs::create_directories(out_dir);
  std::map<std::uint64_t, SeedRun> runs;
  auto emit = [&](const std::string& name, const ExperimentTable& table,
                  const std::string& title) {
    const std::string csv = to_csv(table);
    const std::string summary = to_summary(table, title);
    const auto csv_path = fs::path(out_dir) / (name + ".csv");
    const auto txt_path = fs::path(out_dir) / (name + "_summary.txt");
    write_file_atomic(csv_path, std::span(reinterpret_cast<const std::uint8_t*>(csv.data()),
                                          csv.size()));
    write_file_atomic(txt_path, std::span(reinterpret_cast<const std::uint8_t*>(summary.data()),
                                          summary.size()));
    std::cout << summary << "wrote " << csv_path.string() << "\n\n";
  };
  if (grid == "aggregation" || grid == "all") {
    emit("aggregation", run_aggregation_experiment(cfg, runs),
         "aggregation heuristics, task " + cfg.experiment.aggregation_task + ", input " +
             cfg.experiment.aggregation_input);
  }
  for (const std::string task : {"ctr", "cvr"}) {
    if (grid == task || grid == "all") {
      emit(task + "_inputs", run_embedding_count_experiment(cfg, task, runs),
           "embedding inputs, task " + task);
    }
  }
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfigParseError: return 2;
    case ErrorCode::kMissingPrerequisite: return 3;
    default: return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"derm: decoupled entity embeddings, from synthetic data to serving"};
  app.require_subcommand(1);
  Common common;

  auto* generate = app.add_subcommand("generate", "Write the synthetic world's day partitions");
  add_common(generate, common);

  std::string model;
  auto* train_up = app.add_subcommand(
      "train-upstream", "Batch-train on the window, then train incrementally day by day");
  add_common(train_up, common);
  train_up->add_option("-m,--model", model, "Upstream model: ctr or cvr")->required();

  std::optional<int> day;
  bool back_window = false, all = false;
  auto* infer = app.add_subcommand("infer", "Embed entities for a day or the batch window");
  add_common(infer, common);
  infer->add_option("-m,--model", model, "Upstream model: ctr or cvr")->required();
  infer->add_option("-d,--day", day, "Single day to embed");
  infer->add_flag("--back-window", back_window, "Re-embed every window day with its snapshot");
  infer->add_flag("--all", all, "Back window plus every later day");

  auto* aggregate = app.add_subcommand(
      "aggregate", "Fold daily embeddings into aggregated state; report stability and coverage");
  add_common(aggregate, common);
  aggregate->add_option("-m,--model", model, "Upstream model: ctr or cvr")->required();
  aggregate->add_option("-d,--day", day, "Last day to fold in");
  aggregate->add_flag("--all", all, "Write every day's aggregated state");

  std::string store_dir;
  auto* publish_cmd = app.add_subcommand("publish", "Publish aggregated state to the store");
  add_common(publish_cmd, common);
  publish_cmd->add_option("-m,--model", model, "Upstream model: ctr or cvr")->required();
  publish_cmd->add_option("-d,--day", day, "Day to publish");
  publish_cmd->add_flag("--all", all, "Publish every aggregated day");
  publish_cmd->add_option("--store-dir", store_dir, "Generation root (default <work>/store)");

  std::string bind = "127.0.0.1:7070";
  double seconds = 0.0;
  auto* serve = app.add_subcommand("serve", "Serve the latest generations over TCP");
  serve->add_option("--store-dir", store_dir, "Generation root")->required();
  serve->add_option("--bind", bind, "host:port to listen on (port 0 picks one)");
  serve->add_option("-d,--day", day, "Generation day (default: latest)");
  serve->add_option("--for", seconds, "Stop after this many seconds (default: until signal)");

  std::string address = "127.0.0.1:7070", kind = "user", source = "ctr-upstream";
  std::uint64_t id = 0;
  auto* query = app.add_subcommand("query", "Look up one key on a running server");
  query->add_option("--addr", address, "Server host:port");
  query->add_option("--kind", kind, "user or pin");
  query->add_option("--id", id, "Entity id")->required();
  query->add_option("--source", source, "ctr-upstream or cvr-upstream");

  std::string task, inputs;
  auto* train_down = app.add_subcommand(
      "train-downstream", "Train and evaluate one downstream arm from the work directory");
  add_common(train_down, common);
  train_down->add_option("-t,--task", task, "Downstream task: ctr or cvr")->required();
  train_down->add_option("-i,--inputs", inputs,
                         "Embedding inputs joined by '+', e.g. ctr-user+cvr-pin (empty: baseline)");

  std::string grid = "all", out_dir = "results";
  auto* experiment = app.add_subcommand("experiment", "Run sensitivity grids over seeds");
  add_common(experiment, common);
  experiment->add_option("-g,--grid", grid, "aggregation, ctr, cvr or all");
  experiment->add_option("-o,--out", out_dir, "Output directory for CSV and summaries");

  CLI11_PARSE(app, argc, argv);

  try {
    if (generate->parsed()) cmd_generate(common);
    if (train_up->parsed()) cmd_train_upstream(common, model);
    if (infer->parsed()) cmd_infer(common, model, day, back_window, all);
    if (aggregate->parsed()) cmd_aggregate(common, model, day, all);
    if (publish_cmd->parsed()) cmd_publish(common, model, day, all, store_dir);
    if (serve->parsed()) cmd_serve(store_dir, bind, day, seconds);
    if (query->parsed()) return cmd_query(address, kind, id, source);
    if (train_down->parsed()) cmd_train_downstream(common, task, inputs);
    if (experiment->parsed()) cmd_experiment(common, grid, out_dir);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: Internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
