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

// Evaluation metrics for beat, chord, structure, key and tagging tasks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtm/annotations.hpp"
#include "mtm/labels.hpp"

namespace mtm {

// All tolerances and weights in one place.
struct MetricConfig {
  double beat_tolerance = 0.07;   // seconds, |est - ref| <= tol
  double boundary_window = 0.5;   // seconds, inclusive
  double hit_epsilon = 1e-9;      // absorbs floating-point noise at the window edge
  double key_fifth = 0.5;
  double key_relative = 0.3;
  double key_parallel = 0.2;

  nlohmann::json to_json() const {
    return {{"beat_tolerance", beat_tolerance}, {"boundary_window", boundary_window},
            {"hit_epsilon", hit_epsilon},       {"key_fifth", key_fifth},
            {"key_relative", key_relative},     {"key_parallel", key_parallel}};
  }
};

// ---------------------------------------------------------------------------
// Maximum bipartite matching (Hopcroft-Karp)

// adj[u] lists right vertices adjacent to left vertex u. Returns the size of
// a maximum matching.
inline std::size_t max_bipartite_matching(const std::vector<std::vector<std::size_t>>& adj, std::size_t right) {
  const std::size_t left = adj.size();
  constexpr std::size_t kNil = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> match_l(left, kNil), match_r(right, kNil), dist(left);
  auto bfs = [&]() {
    std::queue<std::size_t> q;
    bool found = false;
    for (std::size_t u = 0; u < left; ++u) {
      if (match_l[u] == kNil) {
        dist[u] = 0;
        q.push(u);
      } else {
        dist[u] = kNil;
      }
    }
    while (!q.empty()) {
      const std::size_t u = q.front();
      q.pop();
      for (std::size_t v : adj[u]) {
        const std::size_t w = match_r[v];
        if (w == kNil) {
          found = true;
        } else if (dist[w] == kNil) {
          dist[w] = dist[u] + 1;
          q.push(w);
        }
      }
    }
    return found;
  };
  std::function<bool(std::size_t)> dfs = [&](std::size_t u) {
    for (std::size_t v : adj[u]) {
      const std::size_t w = match_r[v];
      if (w == kNil || (dist[w] == dist[u] + 1 && dfs(w))) {
        match_l[u] = v;
        match_r[v] = u;
        return true;
      }
    }
    dist[u] = kNil;
    return false;
  };
  std::size_t size = 0;
  while (bfs()) {
    for (std::size_t u = 0; u < left; ++u) {
      if (match_l[u] == kNil && dfs(u)) ++size;
    }
  }
  return size;
}

struct MatchScore {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f_measure = 0.0;
};

inline void require_ascending(const std::vector<double>& times, const char* what) {
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (times[i] < times[i - 1]) throw std::invalid_argument(std::string(what) + " times must be ascending");
  }
}

// One-to-one matching of events within +-window (inclusive); F-measure of
// the matched counts. Both lists empty scores 1.
inline MatchScore match_events(const std::vector<double>& est, const std::vector<double>& ref, double window,
                               double epsilon = 1e-9) {
  require_ascending(est, "estimated");
  require_ascending(ref, "reference");
  MatchScore s;
  if (est.empty() && ref.empty()) {
    s.precision = s.recall = s.f_measure = 1.0;
    return s;
  }
  std::vector<std::vector<std::size_t>> adj(est.size());
  std::size_t lo = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    while (lo < ref.size() && ref[lo] < est[i] - window - epsilon) ++lo;
    for (std::size_t j = lo; j < ref.size() && ref[j] <= est[i] + window + epsilon; ++j) {
      if (std::abs(est[i] - ref[j]) <= window + epsilon) adj[i].push_back(j);
    }
  }
  s.tp = max_bipartite_matching(adj, ref.size());
  s.fp = est.size() - s.tp;
  s.fn = ref.size() - s.tp;
  s.precision = est.empty() ? 0.0 : static_cast<double>(s.tp) / static_cast<double>(est.size());
  s.recall = ref.empty() ? 0.0 : static_cast<double>(s.tp) / static_cast<double>(ref.size());
  s.f_measure = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

inline MatchScore beat_f1(const std::vector<double>& est, const std::vector<double>& ref, double tol = 0.07) {
  return match_events(est, ref, tol);
}

inline MatchScore boundary_hr(const std::vector<double>& est, const std::vector<double>& ref, double window = 0.5) {
  return match_events(est, ref, window);
}

// ---------------------------------------------------------------------------
// Chord / structure / key

// Duration of reference time covered by an estimate with the same label,
// divided by the total reference duration. Labels are compared as 25-class
// major/minor symbols, so "Db:maj" equals "C#:maj".
inline double chord_weighted_acc(const IntervalAnnotation& est, const IntervalAnnotation& ref) {
  validate_intervals(est);
  validate_intervals(ref);
  const double total = total_duration(ref);
  if (ref.empty() || !(total > 0)) throw std::invalid_argument("chord_weighted_acc: empty reference");
  std::vector<int> est_cls, ref_cls;
  for (const auto& iv : est) est_cls.push_back(parse_majmin(iv.label).class_index());
  for (const auto& iv : ref) ref_cls.push_back(parse_majmin(iv.label).class_index());
  double hit = 0.0;
  std::size_t i = 0, j = 0;
  while (i < est.size() && j < ref.size()) {
    const double lo = std::max(est[i].start, ref[j].start);
    const double hi = std::min(est[i].end, ref[j].end);
    if (hi > lo && est_cls[i] == ref_cls[j]) hit += hi - lo;
    if (est[i].end < ref[j].end) {
      ++i;
    } else {
      ++j;
    }
  }
  return hit / total;
}

inline double key_weighted_score(const MajMinLabel& est, const MajMinLabel& ref, const MetricConfig& cfg = {}) {
  if (est.none || ref.none) return est.none && ref.none ? 1.0 : 0.0;
  if (est.root == ref.root && est.mode == ref.mode) return 1.0;
  if (est.mode == ref.mode && est.root == (ref.root + 7) % 12) return cfg.key_fifth;
  if (ref.mode == Mode::kMajor && est.mode == Mode::kMinor && est.root == (ref.root + 9) % 12) return cfg.key_relative;
  if (ref.mode == Mode::kMinor && est.mode == Mode::kMajor && est.root == (ref.root + 3) % 12) return cfg.key_relative;
  if (est.root == ref.root) return cfg.key_parallel;
  return 0.0;
}

inline double key_weighted_score(const std::string& est, const std::string& ref, const MetricConfig& cfg = {}) {
  return key_weighted_score(parse_majmin(est), parse_majmin(ref), cfg);
}

template <class Label>
double frame_accuracy(const std::vector<Label>& est, const std::vector<Label>& ref) {
  if (est.size() != ref.size()) throw std::invalid_argument("frame_accuracy: length mismatch");
  if (ref.empty()) throw std::invalid_argument("frame_accuracy: empty sequences");
  std::size_t same = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) same += est[i] == ref[i];
  return static_cast<double>(same) / static_cast<double>(ref.size());
}

// ---------------------------------------------------------------------------
// Tagging

// Average precision of one tag. Scores are ranked descending with ties
// broken by ascending clip index (stable sort). NaN when no positives.
inline double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (labels[order[r]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return hits ? sum / static_cast<double>(hits) : std::numeric_limits<double>::quiet_NaN();
}

// ROC-AUC = P(pos > neg) + 1/2 P(pos == neg), computed with exact integer
// counting over groups of equal scores. NaN when a class is missing.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::uint64_t pos = 0, neg = 0, neg_below = 0, twice_wins = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t gp = 0, gn = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? gp : gn) += 1;
      ++j;
    }
    twice_wins += 2 * gp * neg_below + gp * gn;
    neg_below += gn;
    pos += gp;
    neg += gn;
    i = j;
  }
  if (pos == 0 || neg == 0) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

struct TaggingScores {
  double map = 0.0;
  double roc_auc = 0.0;
  std::size_t ap_tags = 0;
  std::size_t auc_tags = 0;
  std::vector<std::string> warnings;
};

// scores and labels are clips x tags.
inline TaggingScores tagging_scores(const std::vector<std::vector<double>>& scores,
                                    const std::vector<std::vector<int>>& labels,
                                    const std::vector<std::string>& tag_names = {}) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw std::invalid_argument("tagging_scores: score and label matrices must be non-empty with equal rows");
  }
  const std::size_t tags = scores[0].size();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].size() != tags || labels[i].size() != tags) {
      throw std::invalid_argument("tagging_scores: ragged matrices");
    }
  }
  TaggingScores out;
  double ap_sum = 0.0, auc_sum = 0.0;
  for (std::size_t t = 0; t < tags; ++t) {
    std::vector<double> s(scores.size());
    std::vector<int> l(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
      s[i] = scores[i][t];
      l[i] = labels[i][t] ? 1 : 0;
    }
    const std::string name = t < tag_names.size() ? tag_names[t] : "tag " + std::to_string(t);
    const double ap = average_precision(s, l);
    if (std::isnan(ap)) {
      out.warnings.push_back(name + ": no positive clips, skipped");
      continue;
    }
    ap_sum += ap;
    ++out.ap_tags;
    const double auc = roc_auc(s, l);
    if (std::isnan(auc)) {
      out.warnings.push_back(name + ": no negative clips, skipped for ROC-AUC");
      continue;
    }
    auc_sum += auc;
    ++out.auc_tags;
  }
  out.map = out.ap_tags ? ap_sum / static_cast<double>(out.ap_tags) : 0.0;
  out.roc_auc = out.auc_tags ? auc_sum / static_cast<double>(out.auc_tags) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Reports and tables

struct EvalReport {
  std::string task;
  std::vector<std::pair<std::string, double>> metrics;
  std::map<std::string, std::int64_t> counts;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::string> warnings;

  double metric(const std::string& name) const {
    for (const auto& [k, v] : metrics) {
      if (k == name) return v;
    }
    throw std::out_of_range("report has no metric " + name);
  }

  nlohmann::json to_json() const {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [k, v] : metrics) m[k] = v;
    nlohmann::json j = {{"task", task}, {"metrics", m}, {"counts", counts}, {"config", config}};
    if (!warnings.empty()) j["warnings"] = warnings;
    return j;
  }
};

// Column layout of the comparison table.
inline const std::vector<std::pair<std::string, std::string>>& table_columns() {
  static const std::vector<std::pair<std::string, std::string>> cols = {
      {"beat_f1", "Beat F1"}, {"downbeat_f1", "Downbeat F1"}, {"chord_acc", "Chord Acc"},
      {"structure_acc", "Struct Acc"}, {"hr5f", "HR.5F"},    {"key_acc", "Key Acc"},
      {"map", "mAP"},         {"roc_auc", "ROC"}};
  return cols;
}

struct TableRow {
  std::string name;
  std::map<std::string, double> values;  // keyed by column id
};

inline std::string format_cell(const std::map<std::string, double>& values, const std::string& key) {
  auto it = values.find(key);
  if (it == values.end() || std::isnan(it->second)) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << it->second;
  return os.str();
}

inline std::string render_table(const std::vector<TableRow>& rows) {
  std::size_t name_w = 6;
  for (const auto& r : rows) name_w = std::max(name_w, r.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(name_w)) << "Model";
  for (const auto& [id, title] : table_columns()) os << "  " << std::right << std::setw(11) << title;
  os << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(name_w)) << r.name;
    for (const auto& [id, title] : table_columns()) os << "  " << std::right << std::setw(11) << format_cell(r.values, id);
    os << "\n";
  }
  return os.str();
}

inline std::string render_csv(const std::vector<TableRow>& rows) {
  std::ostringstream os;
  os << "model";
  for (const auto& [id, title] : table_columns()) os << "," << id;
  os << "\n";
  for (const auto& r : rows) {
    os << r.name;
    for (const auto& [id, title] : table_columns()) {
      const auto cell = format_cell(r.values, id);
      os << "," << (cell == "-" ? "" : cell);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace mtm
