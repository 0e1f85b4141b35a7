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

// Labeled synthetic corpora. A "song" carries annotations for all five
// downstream tasks (beats, chords, structure, key, tags) so the full
// pipeline can be exercised without licensed datasets.

#include <algorithm>
#include <array>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mtm/annotations.hpp"
#include "mtm/audio.hpp"
#include "mtm/labels.hpp"

namespace mtm {

struct SongAnnotations {
  BeatAnnotation beats;
  IntervalAnnotation chords;
  IntervalAnnotation structure;
  IntervalAnnotation key;
  TagAnnotation tags;
};

struct SyntheticSong {
  AudioBuffer audio;
  SongAnnotations labels;
};

struct SongOptions {
  double duration = 10.0;
  int sample_rate = kModelSampleRate;
  double noise_std = kSynthNoiseStd;
};

inline constexpr std::array<std::string_view, 6> kSongTags = {
    "major", "minor", "fast", "slow", "bridge", "instrumental"};

namespace detail {

struct SectionStyle {
  std::array<int, 4> degrees;  // scale degrees (0-based) of the per-bar chords
  double chord_gain;
  bool bass_octave;   // adds the root an octave below
  bool high_octave;   // adds the root an octave above
  double click_gain;
};

inline SectionStyle section_style(int section) {
  switch (section) {
    case 0: return {{0, 0, 3, 4}, 0.06, false, false, 0.5};  // intro
    case 1: return {{0, 5, 3, 4}, 0.10, false, false, 1.0};  // verse
    case 2: return {{3, 4, 0, 0}, 0.14, true, false, 1.2};   // chorus
    case 3: return {{5, 3, 0, 4}, 0.10, false, true, 0.8};   // bridge
    case 4: return {{0, 3, 0, 3}, 0.08, false, true, 1.0};   // inst
    case 5: return {{0, 4, 0, 0}, 0.05, false, false, 0.4};  // outro
    default: return {{0, 0, 0, 0}, 0.0, false, false, 0.0};  // silence
  }
}

// Diatonic triad on a scale degree, as a major/minor label (diminished
// triads are mapped to the minor chord on the same root).
inline MajMinLabel diatonic_chord(const MajMinLabel& key, int degree) {
  static constexpr int kMajorSteps[7] = {0, 2, 4, 5, 7, 9, 11};
  static constexpr int kMinorSteps[7] = {0, 2, 3, 5, 7, 8, 10};
  static constexpr bool kMajorQuality[7] = {true, false, false, true, true, false, false};
  static constexpr bool kMinorQuality[7] = {false, false, true, false, false, true, true};
  const bool major_key = key.mode == Mode::kMajor;
  const int step = major_key ? kMajorSteps[degree] : kMinorSteps[degree];
  const bool major_chord = major_key ? kMajorQuality[degree] : kMinorQuality[degree];
  return {(key.root + step) % 12, major_chord ? Mode::kMajor : Mode::kMinor, false};
}

}  // namespace detail

inline SyntheticSong synth_song(const SongOptions& opts, std::uint64_t seed) {
  if (!(opts.duration > 0.0)) throw ConfigError("song duration must be positive");
  std::mt19937_64 rng(seed);
  const int sr = opts.sample_rate;
  MajMinLabel key{static_cast<int>(rng() % 12), rng() % 2 ? Mode::kMinor : Mode::kMajor, false};
  const double bpm = 80.0 + static_cast<double>(rng() % 81);  // 80..160
  const int beats_per_bar = 4;
  const double bar = beats_per_bar * 60.0 / bpm;

  SyntheticSong song;
  song.audio.sample_rate = sr;
  song.audio.samples.assign(static_cast<std::size_t>(std::llround(opts.duration * sr)), 0.0f);

  // Section plan: intro, then cycles of verse/chorus with an optional
  // bridge or instrumental, closing with an outro when time allows.
  std::vector<int> plan = {0};
  const bool use_bridge = rng() % 2 == 0;
  while (static_cast<double>(plan.size()) * 2.0 * bar < opts.duration + 4.0 * bar) {
    plan.push_back(1);
    plan.push_back(2);
    plan.push_back(use_bridge ? 3 : 4);
  }
  plan.push_back(5);

  double t = 0.0;
  std::size_t p = 0;
  bool has_bridge = false, has_inst = false;
  while (t < opts.duration - 1e-9 && p < plan.size()) {
    const int section = plan[p++];
    const int bars = 2;
    const double end = std::min(opts.duration, t + bars * bar);
    song.labels.structure.push_back({t, end, std::string(kSectionLabels[section])});
    has_bridge |= section == 3;
    has_inst |= section == 4;
    const auto style = detail::section_style(section);
    for (int b = 0; b < bars; ++b) {
      const double bs = t + b * bar;
      if (bs >= end - 1e-9) break;
      const double be = std::min(end, bs + bar);
      const MajMinLabel chord = detail::diatonic_chord(key, style.degrees[static_cast<std::size_t>(b * 2 % 4 + (rng() % 2))]);
      std::vector<double> freqs = chord_frequencies(chord);
      std::vector<double> gains(freqs.size(), style.chord_gain);
      if (style.bass_octave) {
        freqs.push_back(freqs[0] / 2.0);
        gains.push_back(style.chord_gain);
      }
      if (style.high_octave) {
        freqs.push_back(freqs[0] * 2.0);
        gains.push_back(style.chord_gain * 0.7);
      }
      const auto s0 = static_cast<std::size_t>(std::llround(bs * sr));
      const auto s1 = std::min(song.audio.samples.size(), static_cast<std::size_t>(std::llround(be * sr)));
      render_tones(song.audio.samples, s0, s1, sr, freqs, gains, 0.01);
      if (!song.labels.chords.empty() && song.labels.chords.back().label == to_string(chord) &&
          std::abs(song.labels.chords.back().end - bs) < 1e-9) {
        song.labels.chords.back().end = be;
      } else {
        song.labels.chords.push_back({bs, be, to_string(chord)});
      }
    }
    t = end;
  }
  // Beats run through the whole song; click loudness follows the section.
  song.labels.beats = click_track_annotation(bpm, beats_per_bar, opts.duration);
  std::size_t d = 0;
  for (double bt : song.labels.beats.beats) {
    const bool down = d < song.labels.beats.downbeats.size() && song.labels.beats.downbeats[d] == bt;
    if (down) ++d;
    const std::string* sec = label_at(song.labels.structure, bt);
    const double section_gain = sec ? detail::section_style(*section_index(*sec)).click_gain : 1.0;
    add_click(song.audio.samples, sr, bt, kClickGain * section_gain * (down ? kDownbeatGain : 1.0), rng);
  }
  if (opts.noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, opts.noise_std);
    for (auto& s : song.audio.samples) s += static_cast<float>(noise(rng));
  }
  song.labels.key.push_back({0.0, opts.duration, to_string(key)});
  auto& tags = song.labels.tags.tags;
  tags.push_back(key.mode == Mode::kMajor ? "major" : "minor");
  tags.push_back(bpm >= 120.0 ? "fast" : "slow");
  if (has_bridge) tags.push_back("bridge");
  if (has_inst) tags.push_back("instrumental");
  return song;
}

// Random triad progression for chord-probe corpora.
inline std::vector<std::string> random_progression(std::size_t count, std::mt19937_64& rng,
                                                   double none_probability = 0.08) {
  std::vector<std::string> out;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < count; ++i) {
    if (u(rng) < none_probability) {
      out.emplace_back("none");
    } else {
      out.push_back(to_string(majmin_from_class(static_cast<int>(rng() % 24))));
    }
  }
  return out;
}

// File layout of a generated clip: <stem>.wav plus <stem>.<task>.json.
inline std::filesystem::path annotation_path(const std::filesystem::path& wav,
                                             std::string_view task) {
  auto p = wav;
  p.replace_extension();
  return p.string() + "." + std::string(task) + ".json";
}

inline void save_song(const std::filesystem::path& wav, const SyntheticSong& song) {
  save_wav(wav, song.audio);
  save_beats(annotation_path(wav, "beat"), song.labels.beats);
  save_intervals(annotation_path(wav, "chord"), song.labels.chords);
  save_intervals(annotation_path(wav, "structure"), song.labels.structure);
  save_intervals(annotation_path(wav, "key"), song.labels.key);
  save_tags(annotation_path(wav, "tagging"), song.labels.tags);
}

// Sorted list of *.wav files in a directory.
inline std::vector<std::filesystem::path> list_wavs(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".wav") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace mtm
