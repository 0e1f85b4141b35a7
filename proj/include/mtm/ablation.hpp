// Copyright 2026 The mtmkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Encoder x input length x token rate matrix: each entry pretrains its own
// model and probes all five tasks, producing one comparison-table row.

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mtm/config.hpp"
#include "mtm/manifest.hpp"
#include "mtm/metrics.hpp"
#include "mtm/pretrain.hpp"
#include "mtm/probing.hpp"

namespace mtm {

inline std::string ablation_name(const RunConfig& c) {
  const std::string secs = detail::format_double(c.encoder.max_input_seconds);
  return to_string(c.encoder.kind) + "-" + secs + "s-" + std::to_string(c.encoder.token_rate) + "hz";
}

// Cartesian product in (kind, seconds, rate) order.
inline std::vector<RunConfig> ablation_matrix(const RunConfig& base) {
  if (base.ablate.kinds.empty() || base.ablate.input_seconds.empty() || base.ablate.token_rates.empty()) {
    throw ConfigError("ablate: every axis needs at least one value");
  }
  std::vector<RunConfig> out;
  for (const auto& kind : base.ablate.kinds) {
    for (double secs : base.ablate.input_seconds) {
      for (int rate : base.ablate.token_rates) {
        RunConfig c = base;
        c.encoder.kind = parse_encoder_kind(kind);
        c.encoder.max_input_seconds = secs;
        c.encoder.token_rate = rate;
        c.name = ablation_name(c);
        c.validate();
        out.push_back(std::move(c));
      }
    }
  }
  return out;
}

inline nlohmann::json row_to_json(const TableRow& r) { return {{"name", r.name}, {"values", r.values}}; }

inline TableRow row_from_json(const nlohmann::json& j) {
  TableRow r;
  r.name = j.at("name").get<std::string>();
  for (const auto& [k, v] : j.at("values").items()) r.values[k] = v.is_null() ? std::nan("") : v.get<double>();
  return r;
}

inline std::filesystem::path row_file(const std::filesystem::path& run_dir) { return run_dir / "row.json"; }

// Pretrains one matrix entry under out_dir/<name>, probes every task and
// writes row.json plus per-task reports.
inline TableRow run_ablation_entry(const RunConfig& c, const std::filesystem::path& out_dir,
                                   const std::function<void(const std::string&)>& log = {}) {
  Stopwatch watch;
  const auto dir = out_dir / c.name;
  PretrainOptions po;
  po.corpus = c.paths.corpus;
  po.out_dir = dir;
  if (log) log(c.name + ": pretraining");
  auto res = pretrain(c, po);
  const Backbone backbone = backbone_from(res.checkpoint);
  const auto popt = probe_options_from(c);
  TableRow row;
  row.name = c.name;
  for (const auto& task_name : task_names()) {
    if (log) log(c.name + ": probing " + task_name);
    const auto task = task_spec(task_name);
    const auto train = load_task_dataset(c.paths.train, task);
    const auto test = load_task_dataset(c.paths.test, task);
    Probe probe = train_probe(backbone, train, task, popt);
    const auto report = evaluate_probe(probe, backbone, test);
    for (const auto& [k, v] : report.metrics) row.values[k] = v;
    const auto report_path = dir / ("report." + task_name + ".json");
    write_json_file(report_path, report.to_json());
    write_manifest(report_path, {"ablate", &c, watch.seconds(), {{"task", task_name}}});
  }
  write_json_file(row_file(dir), row_to_json(row));
  write_manifest(row_file(dir), {"ablate", &c, watch.seconds(), {}});
  return row;
}

}  // namespace mtm
