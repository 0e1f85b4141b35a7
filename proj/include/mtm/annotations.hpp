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

// Generic annotation files (UTF-8 JSON):
//   beats      {"beats": [s, ...], "downbeats": [s, ...]}
//   intervals  [[start, end, "label"], ...]   (chords, structure, key)
//   tags       {"tags": ["tag", ...]}  plus optional {"scores": {"tag": p}}

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtm/common.hpp"
#include "mtm/labels.hpp"

namespace mtm {

inline constexpr double kTimeEpsilon = 1e-9;

struct BeatAnnotation {
  std::vector<double> beats;
  std::vector<double> downbeats;

  void validate() const {
    auto ascending = [](const std::vector<double>& v) {
      for (std::size_t i = 1; i < v.size(); ++i) {
        if (!(v[i] > v[i - 1])) return false;
      }
      return true;
    };
    if (!ascending(beats)) throw ConfigError("beat times must be strictly ascending");
    if (!ascending(downbeats)) throw ConfigError("downbeat times must be strictly ascending");
    for (double d : downbeats) {
      auto it = std::lower_bound(beats.begin(), beats.end(), d - kTimeEpsilon);
      if (it == beats.end() || std::abs(*it - d) > kTimeEpsilon) {
        throw ConfigError("downbeat at " + std::to_string(d) + " s is not a beat");
      }
    }
  }
  bool operator==(const BeatAnnotation&) const = default;
};

struct LabeledInterval {
  double start = 0.0;
  double end = 0.0;
  std::string label;
  bool operator==(const LabeledInterval&) const = default;
};

using IntervalAnnotation = std::vector<LabeledInterval>;

inline void validate_intervals(const IntervalAnnotation& intervals) {
  for (std::size_t i = 0; i < intervals.size(); ++i) {
    if (!(intervals[i].end > intervals[i].start)) {
      throw ConfigError("interval end must exceed start");
    }
    if (i > 0 && intervals[i].start < intervals[i - 1].end - kTimeEpsilon) {
      throw ConfigError("intervals must be ascending and non-overlapping");
    }
  }
}

// Chord intervals additionally restrict labels to the 25-class vocabulary.
inline void validate_chords(const IntervalAnnotation& chords) {
  validate_intervals(chords);
  for (const auto& iv : chords) parse_majmin(iv.label);
}

inline double total_duration(const IntervalAnnotation& intervals) {
  double total = 0.0;
  for (const auto& iv : intervals) total += iv.end - iv.start;
  return total;
}

struct TagAnnotation {
  std::vector<std::string> tags;
  std::map<std::string, double> scores;  // predictions only
  bool operator==(const TagAnnotation&) const = default;
};

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotation file: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write file: " + path.string());
  out << j.dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

inline nlohmann::json to_json(const BeatAnnotation& a) {
  return {{"beats", a.beats}, {"downbeats", a.downbeats}};
}

inline BeatAnnotation beats_from_json(const nlohmann::json& j) {
  BeatAnnotation a;
  try {
    a.beats = j.at("beats").get<std::vector<double>>();
    if (j.contains("downbeats")) a.downbeats = j.at("downbeats").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed beat annotation: ") + e.what());
  }
  return a;
}

inline nlohmann::json to_json(const IntervalAnnotation& intervals) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& iv : intervals) j.push_back({iv.start, iv.end, iv.label});
  return j;
}

inline IntervalAnnotation intervals_from_json(const nlohmann::json& j) {
  IntervalAnnotation out;
  try {
    for (const auto& row : j) {
      if (!row.is_array() || row.size() != 3) throw IoError("interval rows must be [start, end, label]");
      out.push_back({row[0].get<double>(), row[1].get<double>(), row[2].get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed interval annotation: ") + e.what());
  }
  return out;
}

inline nlohmann::json to_json(const TagAnnotation& t) {
  nlohmann::json j = {{"tags", t.tags}};
  if (!t.scores.empty()) j["scores"] = t.scores;
  return j;
}

inline TagAnnotation tags_from_json(const nlohmann::json& j) {
  TagAnnotation t;
  try {
    t.tags = j.at("tags").get<std::vector<std::string>>();
    if (j.contains("scores")) t.scores = j.at("scores").get<std::map<std::string, double>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed tag annotation: ") + e.what());
  }
  return t;
}

inline void save_beats(const std::filesystem::path& p, const BeatAnnotation& a) {
  write_json_file(p, to_json(a));
}
inline BeatAnnotation load_beats(const std::filesystem::path& p) {
  auto a = beats_from_json(read_json_file(p));
  a.validate();
  return a;
}
inline void save_intervals(const std::filesystem::path& p, const IntervalAnnotation& a) {
  write_json_file(p, to_json(a));
}
inline IntervalAnnotation load_intervals(const std::filesystem::path& p) {
  auto a = intervals_from_json(read_json_file(p));
  validate_intervals(a);
  return a;
}
inline void save_tags(const std::filesystem::path& p, const TagAnnotation& a) {
  write_json_file(p, to_json(a));
}
inline TagAnnotation load_tags(const std::filesystem::path& p) {
  return tags_from_json(read_json_file(p));
}

// Structure boundaries: starts of every interval after the first.
inline std::vector<double> interval_boundaries(const IntervalAnnotation& intervals) {
  std::vector<double> out;
  for (std::size_t i = 1; i < intervals.size(); ++i) out.push_back(intervals[i].start);
  return out;
}

// Label covering time t, or nullopt when t falls in a gap.
inline const std::string* label_at(const IntervalAnnotation& intervals, double t) {
  for (const auto& iv : intervals) {
    if (t >= iv.start && t < iv.end) return &iv.label;
  }
  return nullptr;
}

// Longest-duration label (used for clip-level key references).
inline std::string dominant_label(const IntervalAnnotation& intervals) {
  std::map<std::string, double> dur;
  for (const auto& iv : intervals) dur[iv.label] += iv.end - iv.start;
  std::string best;
  double best_d = -1.0;
  for (const auto& [label, d] : dur) {
    if (d > best_d) {
      best = label;
      best_d = d;
    }
  }
  return best;
}

}  // namespace mtm
