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

// Sensitivity-experiment bookkeeping: per-arm, per-seed reports, percent
// lift against the baseline arm, and CSV / text summaries.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "derm/downstream.hpp"
#include "derm/error.hpp"

namespace derm {

inline constexpr const char* kBaselineArm = "baseline";

struct ArmSeedResult {
  std::string arm;
  std::uint64_t seed = 0;
  EvalReport report;
  double roc_lift = 0.0;  // percent vs the same seed's baseline
  double pr_lift = 0.0;
};

struct ArmSummary {
  std::string arm;
  double mean_roc = 0.0, std_roc = 0.0;
  double mean_pr = 0.0, std_pr = 0.0;
  double mean_roc_lift = 0.0, std_roc_lift = 0.0;
  double mean_pr_lift = 0.0, std_pr_lift = 0.0;
};

struct ExperimentTable {
  std::vector<std::string> arms;  // in grid order, baseline first
  std::vector<ArmSeedResult> rows;
  std::vector<ArmSummary> summary;

  const ArmSummary& arm(const std::string& name) const {
    for (const auto& s : summary) {
      if (s.arm == name) return s;
    }
    fail(ErrorCode::kInvalidConfig, "no arm named '" + name + "'");
  }
};

inline double percent_lift(double value, double baseline) {
  return 100.0 * (value - baseline) / baseline;
}

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var = xs.size() > 1 ? var / static_cast<double>(xs.size() - 1) : 0.0;
  return {mean, std::sqrt(var)};
}

}  // namespace detail

/// Runs every (arm, seed) through `run` and tabulates lifts. `arms` must
/// contain the baseline arm.
inline ExperimentTable run_sensitivity_experiment(
    const std::vector<std::string>& arms, const std::vector<std::uint64_t>& seeds,
    const std::function<EvalReport(const std::string& arm, std::uint64_t seed)>& run) {
  if (std::find(arms.begin(), arms.end(), kBaselineArm) == arms.end()) {
    fail(ErrorCode::kMissingBaseline, "experiment grid has no baseline arm");
  }
  require(!seeds.empty(), ErrorCode::kInvalidConfig, "experiment needs at least one seed");
  ExperimentTable table;
  table.arms.push_back(kBaselineArm);
  for (const auto& a : arms) {
    if (a != kBaselineArm) table.arms.push_back(a);
  }
  for (std::uint64_t seed : seeds) {
    const EvalReport base = run(kBaselineArm, seed);
    for (const auto& a : table.arms) {
      const EvalReport r = a == kBaselineArm ? base : run(a, seed);
      table.rows.push_back({a, seed, r, percent_lift(r.roc_auc, base.roc_auc),
                            percent_lift(r.pr_auc, base.pr_auc)});
    }
  }
  for (const auto& a : table.arms) {
    std::vector<double> roc, pr, roc_lift, pr_lift;
    for (const auto& row : table.rows) {
      if (row.arm != a) continue;
      roc.push_back(row.report.roc_auc);
      pr.push_back(row.report.pr_auc);
      roc_lift.push_back(row.roc_lift);
      pr_lift.push_back(row.pr_lift);
    }
    ArmSummary s{a};
    std::tie(s.mean_roc, s.std_roc) = detail::mean_std(roc);
    std::tie(s.mean_pr, s.std_pr) = detail::mean_std(pr);
    std::tie(s.mean_roc_lift, s.std_roc_lift) = detail::mean_std(roc_lift);
    std::tie(s.mean_pr_lift, s.std_pr_lift) = detail::mean_std(pr_lift);
    table.summary.push_back(s);
  }
  return table;
}

inline std::string format_double(double x, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, x);
  return buf;
}

/// CSV with header arm,seed,roc_auc,pr_auc,lift (lift is the ROC-AUC lift in
/// percent).
inline std::string to_csv(const ExperimentTable& table) {
  std::ostringstream out;
  out << "arm,seed,roc_auc,pr_auc,lift\n";
  for (const auto& r : table.rows) {
    out << r.arm << ',' << r.seed << ',' << format_double(r.report.roc_auc) << ','
        << format_double(r.report.pr_auc) << ',' << format_double(r.roc_lift, 4) << '\n';
  }
  return out.str();
}

inline std::string to_summary(const ExperimentTable& table, const std::string& title) {
  std::ostringstream out;
  out << title << '\n';
  char line[256];
  std::snprintf(line, sizeof(line), "%-36s %20s %20s %18s %18s\n", "arm", "roc_auc", "pr_auc",
                "roc_lift_%", "pr_lift_%");
  out << line;
  for (const auto& s : table.summary) {
    std::snprintf(line, sizeof(line),
                  "%-36s %9.5f +- %7.5f %9.5f +- %7.5f %8.3f +- %6.3f %8.3f +- %6.3f\n",
                  s.arm.c_str(), s.mean_roc, s.std_roc, s.mean_pr, s.std_pr, s.mean_roc_lift,
                  s.std_roc_lift, s.mean_pr_lift, s.std_pr_lift);
    out << line;
  }
  return out.str();
}

}  // namespace derm
