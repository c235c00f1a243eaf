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

// Pipeline config files: "[section]" headers and "key = value" lines.
// Blank lines and lines starting with '#' or ';' are ignored. Every key is
// optional; absent keys keep their defaults. Errors carry line and column.

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "derm/error.hpp"
#include "derm/pipeline.hpp"

namespace derm {

namespace config_detail {

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  if (out.size() == 1 && out[0].empty()) out.clear();
  return out;
}

inline std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

inline double to_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size() || !std::isfinite(v)) {
    fail(ErrorCode::kInvalidConfig, "expected a number, got '" + s + "'");
  }
  return v;
}

inline std::int64_t to_int(const std::string& s) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size()) {
    fail(ErrorCode::kInvalidConfig, "expected an integer, got '" + s + "'");
  }
  return v;
}

inline std::uint64_t to_uint(const std::string& s) {
  if (!s.empty() && s[0] == '-') {
    fail(ErrorCode::kInvalidConfig, "expected a non-negative integer, got '" + s + "'");
  }
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size()) {
    fail(ErrorCode::kInvalidConfig, "expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

inline bool to_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  fail(ErrorCode::kInvalidConfig, "expected true or false, got '" + s + "'");
}

inline std::string from_double(double v) { return shortest_repr(v); }

inline std::string from_bool(bool b) { return b ? "true" : "false"; }

inline std::string blocks_to_string(const std::vector<LayerBlocks>& blocks) {
  std::vector<std::string> parts;
  for (const auto& b : blocks) {
    parts.push_back(std::string(to_string(b[0])) + "+" + std::string(to_string(b[1])));
  }
  return join(parts, ", ");
}

inline std::vector<LayerBlocks> blocks_from_string(const std::string& s) {
  std::vector<LayerBlocks> out;
  for (const auto& layer : split(s, ',')) {
    const auto pair = split(layer, '+');
    if (pair.size() != 2) {
      fail(ErrorCode::kInvalidConfig, "layer '" + layer + "' must be two blocks joined by '+'");
    }
    out.push_back({parse_block_kind(pair[0]), parse_block_kind(pair[1])});
  }
  require(!out.empty(), ErrorCode::kInvalidConfig, "at least one layer is required");
  return out;
}

inline std::string weights_to_string(const std::map<std::string, double>& w) {
  std::vector<std::string> parts;
  for (const auto& [k, v] : w) parts.push_back(k + ":" + from_double(v));
  return join(parts, ", ");
}

inline std::map<std::string, double> weights_from_string(const std::string& s) {
  std::map<std::string, double> out;
  for (const auto& item : split(s, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      fail(ErrorCode::kInvalidConfig, "loss weight '" + item + "' must be term:weight");
    }
    const double w = to_double(trim(item.substr(colon + 1)));
    require(w >= 0.0, ErrorCode::kInvalidConfig, "loss weights must be >= 0");
    out[trim(item.substr(0, colon))] = w;
  }
  return out;
}

inline std::string arms_to_string(const std::vector<InputArm>& arms) {
  std::vector<std::string> parts;
  for (const auto& a : arms) parts.push_back(join(a, "+"));
  return join(parts, " | ");
}

inline std::vector<InputArm> arms_from_string(const std::string& s) {
  std::vector<InputArm> out;
  for (const auto& arm : split(s, '|')) {
    InputArm inputs = split(arm, '+');
    for (const auto& i : inputs) {
      require(is_derm_input(i), ErrorCode::kInvalidConfig, "unknown embedding input '" + i + "'");
    }
    require(!inputs.empty(), ErrorCode::kInvalidConfig, "empty arm in list");
    out.push_back(std::move(inputs));
  }
  return out;
}

struct Binding {
  std::string section;
  std::string key;
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

template <typename T>
Binding uint_field(std::string section, std::string key, T PipelineConfig::*group,
                   std::size_t T::*field) {
  return {section, key,
          [=](PipelineConfig& c, const std::string& v) { (c.*group).*field = to_uint(v); },
          [=](const PipelineConfig& c) { return std::to_string((c.*group).*field); }};
}

template <typename T>
Binding int_field(std::string section, std::string key, T PipelineConfig::*group,
                  int T::*field) {
  return {section, key,
          [=](PipelineConfig& c, const std::string& v) {
            (c.*group).*field = static_cast<int>(to_int(v));
          },
          [=](const PipelineConfig& c) { return std::to_string((c.*group).*field); }};
}

template <typename T>
Binding double_field(std::string section, std::string key, T PipelineConfig::*group,
                     double T::*field) {
  return {section, key,
          [=](PipelineConfig& c, const std::string& v) { (c.*group).*field = to_double(v); },
          [=](const PipelineConfig& c) { return from_double((c.*group).*field); }};
}

inline std::vector<Binding> upstream_bindings(const std::string& section,
                                              UpstreamSettings PipelineConfig::*m) {
  auto up = [m](PipelineConfig& c) -> UpstreamSettings& { return c.*m; };
  auto cup = [m](const PipelineConfig& c) -> const UpstreamSettings& { return c.*m; };
  return {
      uint_field(section, "token_dim", m, &UpstreamSettings::token_dim),
      uint_field(section, "num_tokens", m, &UpstreamSettings::num_tokens),
      {section, "blocks",
       [=](PipelineConfig& c, const std::string& v) { up(c).blocks = blocks_from_string(v); },
       [=](const PipelineConfig& c) { return blocks_to_string(cup(c).blocks); }},
      {section, "interaction_blocks",
       [=](PipelineConfig& c, const std::string& v) {
         up(c).interaction_blocks = blocks_from_string(v);
       },
       [=](const PipelineConfig& c) { return blocks_to_string(cup(c).interaction_blocks); }},
      uint_field(section, "categorical_dim", m, &UpstreamSettings::categorical_dim),
      double_field(section, "temperature", m, &UpstreamSettings::temperature),
      {section, "learning_rate",
       [=](PipelineConfig& c, const std::string& v) { up(c).train.learning_rate = to_double(v); },
       [=](const PipelineConfig& c) { return from_double(cup(c).train.learning_rate); }},
      {section, "batch_size",
       [=](PipelineConfig& c, const std::string& v) { up(c).train.batch_size = to_uint(v); },
       [=](const PipelineConfig& c) { return std::to_string(cup(c).train.batch_size); }},
      {section, "epochs",
       [=](PipelineConfig& c, const std::string& v) { up(c).train.epochs = to_uint(v); },
       [=](const PipelineConfig& c) { return std::to_string(cup(c).train.epochs); }},
      {section, "momentum",
       [=](PipelineConfig& c, const std::string& v) { up(c).train.momentum = to_double(v); },
       [=](const PipelineConfig& c) { return from_double(cup(c).train.momentum); }},
      {section, "negatives_per_pair",
       [=](PipelineConfig& c, const std::string& v) {
         up(c).train.negatives_per_pair = to_uint(v);
       },
       [=](const PipelineConfig& c) { return std::to_string(cup(c).train.negatives_per_pair); }},
      {section, "loss_weights",
       [=](PipelineConfig& c, const std::string& v) {
         up(c).train.loss_weights = weights_from_string(v);
       },
       [=](const PipelineConfig& c) { return weights_to_string(cup(c).train.loss_weights); }},
  };
}

inline const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = [] {
    using P = PipelineConfig;
    using W = WorldConfig;
    using D = DownstreamSettings;
    const std::string w = "world";
    std::vector<Binding> t = {
        uint_field(w, "num_users", &P::world, &W::num_users),
        uint_field(w, "num_pins", &P::world, &W::num_pins),
        uint_field(w, "latent_dim", &P::world, &W::latent_dim),
        int_field(w, "days", &P::world, &W::days),
        double_field(w, "activity_rate", &P::world, &W::activity_rate),
        uint_field(w, "impressions_per_active", &P::world, &W::impressions_per_active),
        double_field(w, "click_rate", &P::world, &W::click_rate),
        double_field(w, "conversion_rate", &P::world, &W::conversion_rate),
        double_field(w, "signal_scale", &P::world, &W::signal_scale),
        double_field(w, "label_noise", &P::world, &W::label_noise),
        double_field(w, "obs_noise", &P::world, &W::obs_noise),
        double_field(w, "surface_effect", &P::world, &W::surface_effect),
        double_field(w, "pin_popularity_exponent", &P::world, &W::pin_popularity_exponent),
        uint_field(w, "num_categories", &P::world, &W::num_categories),
        uint_field(w, "interests_per_day", &P::world, &W::interests_per_day),
        {w, "labeling",
         [](P& c, const std::string& v) { c.world.labeling = parse_labeling(v); },
         [](const P& c) { return std::string(to_string(c.world.labeling)); }},
        {w, "seed", [](P& c, const std::string& v) { c.world.seed = to_uint(v); },
         [](const P& c) { return std::to_string(c.world.seed); }},
        {"upstream", "window_days",
         [](P& c, const std::string& v) { c.window_days = static_cast<int>(to_int(v)); },
         [](const P& c) { return std::to_string(c.window_days); }},
    };
    for (auto& b : upstream_bindings("upstream.ctr", &P::ctr)) t.push_back(std::move(b));
    for (auto& b : upstream_bindings("upstream.cvr", &P::cvr)) t.push_back(std::move(b));
    const std::string l = "lifecycle";
    t.push_back({l, "aggregation",
                 [](P& c, const std::string& v) { c.aggregation = parse_heuristic(v); },
                 [](const P& c) { return to_string(c.aggregation); }});
    t.push_back({l, "retention_days",
                 [](P& c, const std::string& v) { c.retention_days = static_cast<int>(to_int(v)); },
                 [](const P& c) { return std::to_string(c.retention_days); }});
    const std::string d = "downstream";
    t.push_back(int_field(d, "train_first", &P::downstream, &D::train_first));
    t.push_back(int_field(d, "train_last", &P::downstream, &D::train_last));
    t.push_back(int_field(d, "test_first", &P::downstream, &D::test_first));
    t.push_back(int_field(d, "test_last", &P::downstream, &D::test_last));
    t.push_back({d, "projection_dim",
                 [](P& c, const std::string& v) {
                   if (v == "none") {
                     c.downstream.projection_dim.reset();
                   } else {
                     c.downstream.projection_dim = to_uint(v);
                   }
                 },
                 [](const P& c) {
                   return c.downstream.projection_dim
                              ? std::to_string(*c.downstream.projection_dim)
                              : std::string("none");
                 }});
    t.push_back(uint_field(d, "num_experts", &P::downstream, &D::num_experts));
    t.push_back(uint_field(d, "cross_layers", &P::downstream, &D::cross_layers));
    t.push_back({d, "sequence_encoder",
                 [](P& c, const std::string& v) { c.downstream.sequence_encoder = to_bool(v); },
                 [](const P& c) { return from_bool(c.downstream.sequence_encoder); }});
    t.push_back(uint_field(d, "seq_dim", &P::downstream, &D::seq_dim));
    t.push_back(uint_field(d, "expert_hidden", &P::downstream, &D::expert_hidden));
    t.push_back(uint_field(d, "expert_dim", &P::downstream, &D::expert_dim));
    t.push_back(double_field(d, "learning_rate", &P::downstream, &D::learning_rate));
    t.push_back(uint_field(d, "batch_size", &P::downstream, &D::batch_size));
    t.push_back(uint_field(d, "epochs", &P::downstream, &D::epochs));
    const std::string e = "experiment";
    t.push_back({e, "seeds",
                 [](P& c, const std::string& v) {
                   c.experiment.seeds.clear();
                   for (const auto& s : split(v, ',')) c.experiment.seeds.push_back(to_uint(s));
                 },
                 [](const P& c) {
                   std::vector<std::string> parts;
                   for (auto s : c.experiment.seeds) parts.push_back(std::to_string(s));
                   return join(parts, ", ");
                 }});
    t.push_back({e, "aggregation_arms",
                 [](P& c, const std::string& v) {
                   c.experiment.aggregation_arms.clear();
                   for (const auto& s : split(v, ',')) {
                     c.experiment.aggregation_arms.push_back(parse_heuristic(s));
                   }
                 },
                 [](const P& c) {
                   std::vector<std::string> parts;
                   for (const auto& h : c.experiment.aggregation_arms) parts.push_back(to_string(h));
                   return join(parts, ", ");
                 }});
    t.push_back({e, "aggregation_task",
                 [](P& c, const std::string& v) { c.experiment.aggregation_task = v; },
                 [](const P& c) { return c.experiment.aggregation_task; }});
    t.push_back({e, "aggregation_input",
                 [](P& c, const std::string& v) { c.experiment.aggregation_input = v; },
                 [](const P& c) { return c.experiment.aggregation_input; }});
    t.push_back({e, "ctr_arms",
                 [](P& c, const std::string& v) { c.experiment.ctr_arms = arms_from_string(v); },
                 [](const P& c) { return arms_to_string(c.experiment.ctr_arms); }});
    t.push_back({e, "cvr_arms",
                 [](P& c, const std::string& v) { c.experiment.cvr_arms = arms_from_string(v); },
                 [](const P& c) { return arms_to_string(c.experiment.cvr_arms); }});
    t.push_back({"paths", "work_dir", [](P& c, const std::string& v) { c.work_dir = v; },
                 [](const P& c) { return c.work_dir; }});
    return t;
  }();
  return table;
}

[[noreturn]] inline void parse_error(const std::string& origin, std::size_t line,
                                     std::size_t column, const std::string& message) {
  fail(ErrorCode::kConfigParseError, origin + ":" + std::to_string(line) + ":" +
                                         std::to_string(column) + ": " + message);
}

}  // namespace config_detail

/// Parses config text. `origin` names the source in error messages.
/// Semantic validation runs after parsing; its failures are reported as
/// ConfigParseError too, at the line of the last offending key when known.
inline PipelineConfig parse_config(const std::string& text, const std::string& origin = "config") {
  using namespace config_detail;
  PipelineConfig cfg;
  std::set<std::string> sections;
  for (const auto& b : bindings()) sections.insert(b.section);
  std::set<std::pair<std::string, std::string>> seen;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    std::size_t first = 0;
    while (first < raw.size() && std::isspace(static_cast<unsigned char>(raw[first]))) ++first;
    if (first == raw.size() || raw[first] == '#' || raw[first] == ';') continue;
    const std::size_t col = first + 1;
    if (raw[first] == '[') {
      const auto close = raw.find(']', first);
      if (close == std::string::npos) parse_error(origin, line_no, col, "unterminated section header");
      if (!trim(raw.substr(close + 1)).empty()) {
        parse_error(origin, line_no, close + 2, "unexpected text after section header");
      }
      section = trim(raw.substr(first + 1, close - first - 1));
      if (!sections.count(section)) {
        parse_error(origin, line_no, first + 2, "unknown section '" + section + "'");
      }
      continue;
    }
    const auto eq = raw.find('=', first);
    if (eq == std::string::npos) parse_error(origin, line_no, col, "expected 'key = value'");
    const std::string key = trim(raw.substr(first, eq - first));
    if (key.empty()) parse_error(origin, line_no, col, "missing key before '='");
    if (section.empty()) parse_error(origin, line_no, col, "key '" + key + "' outside any section");
    const Binding* binding = nullptr;
    for (const auto& b : bindings()) {
      if (b.section == section && b.key == key) binding = &b;
    }
    if (!binding) {
      parse_error(origin, line_no, col, "unknown key '" + key + "' in [" + section + "]");
    }
    if (!seen.insert({section, key}).second) {
      parse_error(origin, line_no, col, "duplicate key '" + key + "' in [" + section + "]");
    }
    std::size_t value_col = eq + 1;
    while (value_col < raw.size() && std::isspace(static_cast<unsigned char>(raw[value_col]))) {
      ++value_col;
    }
    try {
      binding->set(cfg, trim(raw.substr(eq + 1)));
    } catch (const Error& e) {
      parse_error(origin, line_no, value_col + 1, e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const Error& e) {
    parse_error(origin, line_no, 1, std::string("invalid configuration: ") + e.what());
  }
  return cfg;
}

/// Canonical text with every key; parse_config(emit_config(c)) == c.
inline std::string emit_config(const PipelineConfig& cfg) {
  using namespace config_detail;
  std::ostringstream out;
  std::string section;
  for (const auto& b : bindings()) {
    if (b.section != section) {
      if (!section.empty()) out << '\n';
      section = b.section;
      out << '[' << section << "]\n";
    }
    const std::string value = b.get(cfg);
    out << b.key << (value.empty() ? " =" : " = ") << value << '\n';
  }
  return out.str();
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kMissingPrerequisite, "missing config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

}  // namespace derm
