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

// The 25-class major/minor vocabulary shared by chord and key labels:
// class 0..11 = C:maj..B:maj, 12..23 = C:min..B:min, 24 = none.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>

#include "mtm/common.hpp"

namespace mtm {

inline constexpr int kNumPitchClasses = 12;
inline constexpr int kNumMajMinClasses = 25;
inline constexpr int kNoneClass = 24;

enum class Mode { kMajor, kMinor };

struct MajMinLabel {
  int root = 0;  // pitch class, C = 0
  Mode mode = Mode::kMajor;
  bool none = false;

  int class_index() const {
    if (none) return kNoneClass;
    return root + (mode == Mode::kMinor ? kNumPitchClasses : 0);
  }
  bool operator==(const MajMinLabel&) const = default;
};

inline constexpr std::array<std::string_view, 12> kSharpNames = {
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"};

inline std::optional<int> parse_pitch_class(std::string_view name) {
  if (name.empty()) return std::nullopt;
  static constexpr int kNatural[7] = {9, 11, 0, 2, 4, 5, 7};  // A..G
  char letter = name[0];
  if (letter >= 'a' && letter <= 'g') letter = static_cast<char>(letter - 'a' + 'A');
  if (letter < 'A' || letter > 'G') return std::nullopt;
  int pc = kNatural[letter - 'A'];
  for (std::size_t i = 1; i < name.size(); ++i) {
    if (name[i] == '#') {
      ++pc;
    } else if (name[i] == 'b') {
      --pc;
    } else {
      return std::nullopt;
    }
  }
  return ((pc % 12) + 12) % 12;
}

// Accepts "C:maj", "A:min", "Db:maj", bare roots ("G" = major), "none", "N".
inline std::optional<MajMinLabel> try_parse_majmin(std::string_view text) {
  if (text == "none" || text == "N" || text == "X") return MajMinLabel{0, Mode::kMajor, true};
  std::string_view root = text;
  std::string_view quality = "maj";
  if (auto colon = text.find(':'); colon != std::string_view::npos) {
    root = text.substr(0, colon);
    quality = text.substr(colon + 1);
  } else if (auto space = text.find(' '); space != std::string_view::npos) {
    root = text.substr(0, space);
    quality = text.substr(space + 1);
  }
  auto pc = parse_pitch_class(root);
  if (!pc) return std::nullopt;
  if (quality == "maj" || quality == "major") return MajMinLabel{*pc, Mode::kMajor, false};
  if (quality == "min" || quality == "minor") return MajMinLabel{*pc, Mode::kMinor, false};
  return std::nullopt;
}

inline MajMinLabel parse_majmin(std::string_view text) {
  auto label = try_parse_majmin(text);
  if (!label) throw ConfigError("label outside the major/minor vocabulary: '" + std::string(text) + "'");
  return *label;
}

inline MajMinLabel majmin_from_class(int index) {
  if (index == kNoneClass) return MajMinLabel{0, Mode::kMajor, true};
  if (index < 0 || index > kNoneClass) throw ConfigError("major/minor class out of range");
  return MajMinLabel{index % 12, index >= 12 ? Mode::kMinor : Mode::kMajor, false};
}

inline std::string to_string(const MajMinLabel& label) {
  if (label.none) return "none";
  return std::string(kSharpNames[static_cast<std::size_t>(label.root)]) +
         (label.mode == Mode::kMajor ? ":maj" : ":min");
}

// Equal temperament, A4 = 440 Hz.
inline double midi_to_hz(double midi) { return 440.0 * std::pow(2.0, (midi - 69.0) / 12.0); }

// Structure functional classes.
inline constexpr std::array<std::string_view, 7> kSectionLabels = {
    "intro", "verse", "chorus", "bridge", "inst", "outro", "silence"};

inline std::optional<int> section_index(std::string_view label) {
  for (std::size_t i = 0; i < kSectionLabels.size(); ++i) {
    if (kSectionLabels[i] == label) return static_cast<int>(i);
  }
  return std::nullopt;
}

}  // namespace mtm
