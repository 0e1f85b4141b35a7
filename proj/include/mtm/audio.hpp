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

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mtm/annotations.hpp"
#include "mtm/common.hpp"
#include "mtm/labels.hpp"

namespace mtm {

inline constexpr int kModelSampleRate = 24000;

// Background noise of the synthetic generators, about -66 dBFS. Louder
// floors fill the empty mel bands, per-band normalization then amplifies
// them, and random-projection tokens end up tracking the noise.
inline constexpr double kSynthNoiseStd = 0.0005;

struct AudioBuffer {
  std::vector<float> samples;
  int sample_rate = kModelSampleRate;

  double duration_seconds() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }

  void validate() const {
    if (sample_rate <= 0) throw ConfigError("sample rate must be positive");
    for (float s : samples) {
      if (!std::isfinite(s)) throw NumericError("audio contains non-finite samples");
    }
  }
};

// ---------------------------------------------------------------------------
// WAV I/O

namespace detail {

inline std::string wav_encoding_name(std::uint16_t format, std::uint16_t bits) {
  std::string name;
  switch (format) {
    case 1: name = "PCM"; break;
    case 3: name = "IEEE float"; break;
    case 6: name = "A-law"; break;
    case 7: name = "mu-law"; break;
    default: name = "format tag " + std::to_string(format); break;
  }
  return name + " " + std::to_string(bits) + "-bit";
}

}  // namespace detail

// Reads PCM16 or float32 WAV, mono or stereo. Stereo is averaged per sample.
inline AudioBuffer load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open WAV file: " + path.string());
  if (io::read_le<std::uint32_t>(in) != io::fourcc("RIFF")) {
    throw IoError("not a RIFF file: " + path.string());
  }
  io::read_le<std::uint32_t>(in);
  if (io::read_le<std::uint32_t>(in) != io::fourcc("WAVE")) {
    throw IoError("not a WAVE file: " + path.string());
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  while (true) {
    std::uint32_t id = 0, size = 0;
    try {
      id = io::read_le<std::uint32_t>(in);
      size = io::read_le<std::uint32_t>(in);
    } catch (const IoError&) {
      throw IoError("WAV file has no data chunk: " + path.string());
    }
    if (id == io::fourcc("fmt ")) {
      format = io::read_le<std::uint16_t>(in);
      channels = io::read_le<std::uint16_t>(in);
      rate = io::read_le<std::uint32_t>(in);
      io::read_le<std::uint32_t>(in);  // byte rate
      io::read_le<std::uint16_t>(in);  // block align
      bits = io::read_le<std::uint16_t>(in);
      std::uint32_t consumed = 16;
      if (format == 0xFFFE && size >= 40) {
        io::read_le<std::uint16_t>(in);  // cb size
        io::read_le<std::uint16_t>(in);  // valid bits
        io::read_le<std::uint32_t>(in);  // channel mask
        format = io::read_le<std::uint16_t>(in);  // first two bytes of the subformat GUID
        consumed = 26;
      }
      in.seekg(size - consumed + (size & 1u), std::ios::cur);
      have_fmt = true;
    } else if (id == io::fourcc("data")) {
      if (!have_fmt) throw IoError("WAV data chunk precedes fmt chunk: " + path.string());
      const bool pcm16 = format == 1 && bits == 16;
      const bool f32 = format == 3 && bits == 32;
      if (!pcm16 && !f32) {
        throw IoError("unsupported WAV encoding: " + detail::wav_encoding_name(format, bits) +
                      " (expected PCM 16-bit or IEEE float 32-bit)");
      }
      if (channels != 1 && channels != 2) {
        throw IoError("unsupported channel count " + std::to_string(channels));
      }
      if (rate == 0) throw IoError("WAV sample rate is zero");
      const std::size_t bytes_per_sample = bits / 8;
      const std::size_t frames = size / (bytes_per_sample * channels);
      std::vector<char> raw(frames * bytes_per_sample * channels);
      if (!in.read(raw.data(), static_cast<std::streamsize>(raw.size()))) {
        throw IoError("truncated WAV data: " + path.string());
      }
      AudioBuffer buf;
      buf.sample_rate = static_cast<int>(rate);
      buf.samples.resize(frames);
      auto sample_at = [&](std::size_t idx) -> double {
        const char* p = raw.data() + idx * bytes_per_sample;
        if (pcm16) {
          std::uint16_t u = static_cast<std::uint16_t>(static_cast<unsigned char>(p[0]) |
                                                       (static_cast<unsigned char>(p[1]) << 8));
          return static_cast<double>(static_cast<std::int16_t>(u)) / 32768.0;
        }
        std::uint32_t u = static_cast<std::uint32_t>(static_cast<unsigned char>(p[0])) |
                          static_cast<std::uint32_t>(static_cast<unsigned char>(p[1])) << 8 |
                          static_cast<std::uint32_t>(static_cast<unsigned char>(p[2])) << 16 |
                          static_cast<std::uint32_t>(static_cast<unsigned char>(p[3])) << 24;
        return static_cast<double>(std::bit_cast<float>(u));
      };
      for (std::size_t f = 0; f < frames; ++f) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) acc += sample_at(f * channels + c);
        buf.samples[f] = static_cast<float>(acc / channels);
      }
      buf.validate();
      return buf;
    } else {
      in.seekg(size + (size & 1u), std::ios::cur);
      if (!in) throw IoError("WAV file has no data chunk: " + path.string());
    }
  }
}

enum class WavEncoding { kPcm16, kFloat32 };

inline void save_wav(const std::filesystem::path& path, const AudioBuffer& buf,
                     WavEncoding enc = WavEncoding::kFloat32, int channels = 1) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write WAV file: " + path.string());
  const std::uint16_t bits = enc == WavEncoding::kPcm16 ? 16 : 32;
  const std::uint16_t block = static_cast<std::uint16_t>(bits / 8 * channels);
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(buf.samples.size() * block);
  io::write_le(out, io::fourcc("RIFF"));
  io::write_le<std::uint32_t>(out, 36 + data_bytes);
  io::write_le(out, io::fourcc("WAVE"));
  io::write_le(out, io::fourcc("fmt "));
  io::write_le<std::uint32_t>(out, 16);
  io::write_le<std::uint16_t>(out, enc == WavEncoding::kPcm16 ? 1 : 3);
  io::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(channels));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(buf.sample_rate));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(buf.sample_rate) * block);
  io::write_le<std::uint16_t>(out, block);
  io::write_le<std::uint16_t>(out, bits);
  io::write_le(out, io::fourcc("data"));
  io::write_le<std::uint32_t>(out, data_bytes);
  for (float s : buf.samples) {
    for (int c = 0; c < channels; ++c) {
      if (enc == WavEncoding::kPcm16) {
        double v = std::round(static_cast<double>(s) * 32768.0);
        v = std::clamp(v, -32768.0, 32767.0);
        io::write_le<std::int16_t>(out, static_cast<std::int16_t>(v));
      } else {
        io::write_le<float>(out, s);
      }
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Resampling

// Linear interpolation. Output length = round(len * target / source).
inline AudioBuffer resample(const AudioBuffer& buf, int target_sr) {
  if (target_sr <= 0) throw ConfigError("target sample rate must be positive");
  if (target_sr == buf.sample_rate) return buf;
  const auto len = static_cast<std::int64_t>(buf.samples.size());
  const std::int64_t src = buf.sample_rate;
  const std::int64_t out_len = (len * target_sr + src / 2) / src;
  AudioBuffer out;
  out.sample_rate = target_sr;
  out.samples.resize(static_cast<std::size_t>(out_len));
  for (std::int64_t i = 0; i < out_len; ++i) {
    // Position in source samples, computed exactly as a rational.
    const std::int64_t num = i * src;
    const std::int64_t left = num / target_sr;
    const double frac = static_cast<double>(num % target_sr) / static_cast<double>(target_sr);
    const double a = buf.samples[static_cast<std::size_t>(std::min(left, len - 1))];
    const double b = buf.samples[static_cast<std::size_t>(std::min(left + 1, len - 1))];
    out.samples[static_cast<std::size_t>(i)] =
        frac == 0.0 ? static_cast<float>(a) : static_cast<float>(a + (b - a) * frac);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

inline constexpr double kClickSeconds = 0.010;
inline constexpr double kClickDecaySeconds = 0.002;
inline constexpr double kClickGain = 0.25;
inline constexpr double kDownbeatGain = 2.0;

// Beat times k * 60 / bpm strictly below `duration`.
inline BeatAnnotation click_track_annotation(double bpm, int beats_per_bar, double duration) {
  if (!(bpm > 0.0) || !(duration > 0.0)) throw ConfigError("bpm and duration must be positive");
  if (beats_per_bar < 1) throw ConfigError("beats_per_bar must be >= 1");
  BeatAnnotation ann;
  const double period = 60.0 / bpm;
  for (long k = 0;; ++k) {
    const double t = static_cast<double>(k) * period;
    if (t >= duration) break;
    ann.beats.push_back(t);
    if (k % beats_per_bar == 0) ann.downbeats.push_back(t);
  }
  return ann;
}

// Adds one exponentially decaying white-noise burst at `time`.
inline void add_click(std::vector<float>& samples, int sr, double time, double gain,
                      std::mt19937_64& rng) {
  std::uniform_real_distribution<double> noise(-1.0, 1.0);
  const auto start = static_cast<std::size_t>(std::llround(time * sr));
  const auto len = static_cast<std::size_t>(std::llround(kClickSeconds * sr));
  for (std::size_t i = 0; i < len && start + i < samples.size(); ++i) {
    const double t = static_cast<double>(i) / sr;
    samples[start + i] += static_cast<float>(gain * std::exp(-t / kClickDecaySeconds) * noise(rng));
  }
}

inline std::pair<AudioBuffer, BeatAnnotation> synth_click_track(double bpm, int beats_per_bar,
                                                                double duration, int sr,
                                                                std::uint64_t seed) {
  if (sr <= 0) throw ConfigError("sample rate must be positive");
  BeatAnnotation ann = click_track_annotation(bpm, beats_per_bar, duration);
  AudioBuffer buf;
  buf.sample_rate = sr;
  buf.samples.assign(static_cast<std::size_t>(std::llround(duration * sr)), 0.0f);
  std::mt19937_64 rng(seed);
  std::size_t d = 0;
  for (double t : ann.beats) {
    const bool down = d < ann.downbeats.size() && ann.downbeats[d] == t;
    if (down) ++d;
    add_click(buf.samples, sr, t, kClickGain * (down ? kDownbeatGain : 1.0), rng);
  }
  return {std::move(buf), std::move(ann)};
}

// Root in octave 4 (C4 = MIDI 60); third and fifth stacked above.
inline std::vector<double> chord_frequencies(const MajMinLabel& label) {
  if (label.none) return {};
  const double root = 60.0 + label.root;
  const double third = root + (label.mode == Mode::kMajor ? 4.0 : 3.0);
  return {midi_to_hz(root), midi_to_hz(third), midi_to_hz(root + 7.0)};
}

struct ChordRenderOptions {
  double tone_gain = 0.15;
  double noise_std = kSynthNoiseStd;
  double fade_seconds = 0.01;
};

inline void render_tones(std::vector<float>& out, std::size_t begin, std::size_t end, int sr,
                         const std::vector<double>& freqs, const std::vector<double>& gains,
                         double fade_seconds) {
  const std::size_t len = end - begin;
  const auto fade = static_cast<std::size_t>(fade_seconds * sr);
  for (std::size_t i = 0; i < len; ++i) {
    double env = 1.0;
    if (fade > 0) {
      if (i < fade) env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) / fade);
      if (len - 1 - i < fade) {
        env = std::min(env, 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(len - 1 - i) / fade));
      }
    }
    const double t = static_cast<double>(i) / sr;
    double acc = 0.0;
    for (std::size_t k = 0; k < freqs.size(); ++k) {
      acc += gains[k] * std::sin(2.0 * std::numbers::pi * freqs[k] * t);
    }
    out[begin + i] += static_cast<float>(env * acc);
  }
}

inline std::pair<AudioBuffer, IntervalAnnotation> synth_chord_sequence(
    const std::vector<std::string>& progression, double seconds_per_chord, int sr,
    std::uint64_t seed, const ChordRenderOptions& opts = {}) {
  if (!(seconds_per_chord > 0.0)) throw ConfigError("seconds_per_chord must be positive");
  if (sr <= 0) throw ConfigError("sample rate must be positive");
  std::vector<MajMinLabel> labels;
  for (const auto& name : progression) labels.push_back(parse_majmin(name));
  AudioBuffer buf;
  buf.sample_rate = sr;
  const auto per = static_cast<std::size_t>(std::llround(seconds_per_chord * sr));
  buf.samples.assign(per * labels.size(), 0.0f);
  IntervalAnnotation ann;
  for (std::size_t c = 0; c < labels.size(); ++c) {
    const auto freqs = chord_frequencies(labels[c]);
    render_tones(buf.samples, c * per, (c + 1) * per, sr, freqs,
                 std::vector<double>(freqs.size(), opts.tone_gain), opts.fade_seconds);
    ann.push_back({static_cast<double>(c) * seconds_per_chord,
                   static_cast<double>(c + 1) * seconds_per_chord, to_string(labels[c])});
  }
  if (opts.noise_std > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, opts.noise_std);
    for (auto& s : buf.samples) s += static_cast<float>(noise(rng));
  }
  return {std::move(buf), std::move(ann)};
}

}  // namespace mtm
