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

// Log-mel front end: STFT -> HTK mel filterbank -> natural log, plus the
// corpus-level mean/variance normalizer.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <vector>

#include "mtm/audio.hpp"
#include "mtm/common.hpp"

namespace mtm {

struct FrontendConfig {
  int sample_rate = kModelSampleRate;
  int token_rate = 25;
  int n_fft = 2048;
  int mel_bands = 128;
  double fmin = 0.0;
  double fmax = 12000.0;

  // Mel hop equals one token period, so frame rate == token rate.
  int hop() const { return sample_rate / token_rate; }

  void validate() const {
    if (sample_rate <= 0 || token_rate <= 0) throw ConfigError("rates must be positive");
    if (sample_rate % token_rate != 0) throw ConfigError("token rate must divide the sample rate");
    if (n_fft <= 0 || (n_fft & (n_fft - 1)) != 0) throw ConfigError("n_fft must be a power of two");
    if (hop() > n_fft) throw ConfigError("hop must not exceed n_fft");
    if (mel_bands < 1) throw ConfigError("mel_bands must be >= 1");
    if (!(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0)) {
      throw ConfigError("need 0 <= fmin < fmax <= sample_rate/2");
    }
  }
};

struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<std::complex<double>> data;  // frames x bins, row-major

  std::span<const std::complex<double>> frame(std::size_t t) const {
    return {data.data() + t * bins, bins};
  }
};

struct MelFrameSequence {
  std::size_t num_frames = 0;
  std::size_t dim = 0;
  int frame_rate = 0;
  std::vector<double> data;  // num_frames x dim, row-major

  std::span<const double> row(std::size_t t) const { return {data.data() + t * dim, dim}; }
  std::span<double> row(std::size_t t) { return {data.data() + t * dim, dim}; }
  double& at(std::size_t t, std::size_t k) { return data[t * dim + k]; }
  double at(std::size_t t, std::size_t k) const { return data[t * dim + k]; }
};

// ---------------------------------------------------------------------------
// STFT

namespace detail {

// One FFTW r2c plan per size. Planning is not thread-safe in FFTW, so plan
// creation goes through a process-wide mutex; execution uses new-array
// execute on caller-owned buffers.
class RealFft {
 public:
  explicit RealFft(int n) : n_(n) {
    in_ = fftw_alloc_real(static_cast<std::size_t>(n));
    out_ = fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1));
    std::lock_guard<std::mutex> lock(planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(n, in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    std::lock_guard<std::mutex> lock(planner_mutex());
    fftw_destroy_plan(plan_);
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }
  void execute(std::span<std::complex<double>> out) {
    fftw_execute(plan_);
    for (int b = 0; b <= n_ / 2; ++b) out[static_cast<std::size_t>(b)] = {out_[b][0], out_[b][1]};
  }

  static std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
  }

 private:
  int n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

inline RealFft& fft_for_size(int n) {
  thread_local std::map<int, std::unique_ptr<RealFft>> cache;
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<RealFft>(n);
  return *slot;
}

}  // namespace detail

// Periodic Hann window.
inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

// Frames start at k*hop and are zero-padded past the end of the signal.
// Frame count is floor(len / hop).
inline Spectrogram stft(const AudioBuffer& buf, int n_fft, int hop) {
  if (n_fft <= 0 || (n_fft & (n_fft - 1)) != 0) throw ConfigError("n_fft must be a power of two");
  if (hop <= 0 || hop > n_fft) throw ConfigError("hop must be in (0, n_fft]");
  Spectrogram spec;
  spec.frames = buf.samples.size() / static_cast<std::size_t>(hop);
  spec.bins = static_cast<std::size_t>(n_fft / 2 + 1);
  spec.data.resize(spec.frames * spec.bins);
  const auto window = hann_window(n_fft);
  auto& fft = detail::fft_for_size(n_fft);
  double* in = fft.input();
  for (std::size_t t = 0; t < spec.frames; ++t) {
    const std::size_t start = t * static_cast<std::size_t>(hop);
    for (int i = 0; i < n_fft; ++i) {
      const std::size_t idx = start + static_cast<std::size_t>(i);
      in[i] = idx < buf.samples.size() ? window[static_cast<std::size_t>(i)] * buf.samples[idx] : 0.0;
    }
    fft.execute({spec.data.data() + t * spec.bins, spec.bins});
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Mel filterbank

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

inline constexpr double kLogFloor = 1e-7;

class MelFilterbank {
 public:
  MelFilterbank(int sample_rate, int n_fft, int bands, double fmin, double fmax)
      : bands_(bands), bins_(n_fft / 2 + 1) {
    if (bands < 1) throw ConfigError("mel band count must be >= 1");
    if (!(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0)) {
      throw ConfigError("need 0 <= fmin < fmax <= sample_rate/2");
    }
    const double mlo = hz_to_mel(fmin), mhi = hz_to_mel(fmax);
    edges_.resize(static_cast<std::size_t>(bands + 2));
    for (int i = 0; i < bands + 2; ++i) {
      edges_[static_cast<std::size_t>(i)] = mel_to_hz(mlo + (mhi - mlo) * i / (bands + 1));
    }
    weights_.assign(static_cast<std::size_t>(bands) * static_cast<std::size_t>(bins_), 0.0);
    for (int k = 0; k < bands; ++k) {
      for (int b = 0; b < bins_; ++b) {
        weights_[static_cast<std::size_t>(k * bins_ + b)] =
            weight_at(k, static_cast<double>(b) * sample_rate / n_fft);
      }
    }
  }

  // Triangle k evaluated at an arbitrary frequency (peak 1 at its center).
  double weight_at(int k, double hz) const {
    const double lo = edges_[static_cast<std::size_t>(k)];
    const double mid = edges_[static_cast<std::size_t>(k + 1)];
    const double hi = edges_[static_cast<std::size_t>(k + 2)];
    if (hz <= lo || hz >= hi) return 0.0;
    return hz <= mid ? (hz - lo) / (mid - lo) : (hi - hz) / (hi - mid);
  }

  double center_hz(int k) const { return edges_[static_cast<std::size_t>(k + 1)]; }
  int bands() const { return bands_; }

  void apply(std::span<const double> power, std::span<double> out) const {
    for (int k = 0; k < bands_; ++k) {
      const double* w = weights_.data() + static_cast<std::size_t>(k * bins_);
      double acc = 0.0;
      for (int b = 0; b < bins_; ++b) acc += w[b] * power[static_cast<std::size_t>(b)];
      out[static_cast<std::size_t>(k)] = acc;
    }
  }

 private:
  int bands_;
  int bins_;
  std::vector<double> edges_;
  std::vector<double> weights_;
};

// Entries are ln(max(mel_energy, 1e-7)) of the magnitude-squared spectrum.
inline MelFrameSequence log_mel(const Spectrogram& spec, int sample_rate, int bands, double fmin,
                                double fmax, int frame_rate = 0) {
  const int n_fft = static_cast<int>((spec.bins - 1) * 2);
  MelFilterbank bank(sample_rate, n_fft, bands, fmin, fmax);
  MelFrameSequence out;
  out.num_frames = spec.frames;
  out.dim = static_cast<std::size_t>(bands);
  out.frame_rate = frame_rate;
  out.data.resize(out.num_frames * out.dim);
  std::vector<double> power(spec.bins);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    auto frame = spec.frame(t);
    for (std::size_t b = 0; b < spec.bins; ++b) power[b] = std::norm(frame[b]);
    auto row = out.row(t);
    bank.apply(power, row);
    for (double& v : row) v = std::log(std::max(v, kLogFloor));
  }
  return out;
}

inline MelFrameSequence compute_log_mel(const AudioBuffer& audio, const FrontendConfig& cfg) {
  cfg.validate();
  if (audio.sample_rate != cfg.sample_rate) return compute_log_mel(resample(audio, cfg.sample_rate), cfg);
  return log_mel(stft(audio, cfg.n_fft, cfg.hop()), cfg.sample_rate, cfg.mel_bands, cfg.fmin,
                 cfg.fmax, cfg.token_rate);
}

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kMinStd = 1e-5;

// Streaming per-band mean/variance (Welford), mergeable across shards
// (Chan et al. pairwise update). Merge in a fixed order for determinism.
struct BandStatistics {
  std::uint64_t count = 0;
  std::vector<double> mean;
  std::vector<double> m2;

  void add(std::span<const double> frame) {
    if (mean.empty()) {
      mean.assign(frame.size(), 0.0);
      m2.assign(frame.size(), 0.0);
    }
    if (frame.size() != mean.size()) throw ConfigError("frame dimension mismatch in statistics");
    ++count;
    const double n = static_cast<double>(count);
    for (std::size_t k = 0; k < frame.size(); ++k) {
      const double delta = frame[k] - mean[k];
      mean[k] += delta / n;
      m2[k] += delta * (frame[k] - mean[k]);
    }
  }

  void add(const MelFrameSequence& seq) {
    for (std::size_t t = 0; t < seq.num_frames; ++t) add(seq.row(t));
  }

  void merge(const BandStatistics& other) {
    if (other.count == 0) return;
    if (count == 0) {
      *this = other;
      return;
    }
    if (other.mean.size() != mean.size()) throw ConfigError("frame dimension mismatch in merge");
    const double na = static_cast<double>(count), nb = static_cast<double>(other.count);
    const double n = na + nb;
    for (std::size_t k = 0; k < mean.size(); ++k) {
      const double delta = other.mean[k] - mean[k];
      mean[k] += delta * nb / n;
      m2[k] += other.m2[k] + delta * delta * na * nb / n;
    }
    count += other.count;
  }
};

struct Normalizer {
  std::vector<double> mean;
  std::vector<double> std;

  static Normalizer from_statistics(const BandStatistics& stats) {
    if (stats.count == 0) throw ConfigError("cannot fit a normalizer on an empty corpus");
    Normalizer n;
    n.mean = stats.mean;
    n.std.resize(stats.mean.size());
    for (std::size_t k = 0; k < n.std.size(); ++k) {
      n.std[k] = std::max(std::sqrt(stats.m2[k] / static_cast<double>(stats.count)), kMinStd);
    }
    return n;
  }

  MelFrameSequence apply(const MelFrameSequence& in) const {
    if (in.dim != mean.size()) throw ConfigError("normalizer dimension mismatch");
    MelFrameSequence out = in;
    for (std::size_t t = 0; t < out.num_frames; ++t) {
      auto row = out.row(t);
      for (std::size_t k = 0; k < out.dim; ++k) row[k] = (row[k] - mean[k]) / std[k];
    }
    return out;
  }
};

template <class Range>
Normalizer fit_normalizer(const Range& corpus) {
  BandStatistics stats;
  for (const MelFrameSequence& seq : corpus) stats.add(seq);
  return Normalizer::from_statistics(stats);
}

inline MelFrameSequence apply_normalizer(const Normalizer& n, const MelFrameSequence& mf) {
  return n.apply(mf);
}

// ---------------------------------------------------------------------------
// Mel binary format: 16-byte header (magic "MELF", T, d, frame_rate as LE
// uint32) followed by T*d little-endian float32 values.

inline constexpr std::uint32_t kMelMagic = io::fourcc("MELF");

inline void save_mel(const std::filesystem::path& path, const MelFrameSequence& mf) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write mel file: " + path.string());
  io::write_le(out, kMelMagic);
  io::write_le(out, static_cast<std::uint32_t>(mf.num_frames));
  io::write_le(out, static_cast<std::uint32_t>(mf.dim));
  io::write_le(out, static_cast<std::uint32_t>(mf.frame_rate));
  for (double v : mf.data) io::write_le(out, static_cast<float>(v));
  if (!out) throw IoError("write failed: " + path.string());
}

inline MelFrameSequence load_mel(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open mel file: " + path.string());
  if (io::read_le<std::uint32_t>(in) != kMelMagic) throw IoError("bad mel file magic: " + path.string());
  MelFrameSequence mf;
  mf.num_frames = io::read_le<std::uint32_t>(in);
  mf.dim = io::read_le<std::uint32_t>(in);
  mf.frame_rate = static_cast<int>(io::read_le<std::uint32_t>(in));
  mf.data.resize(mf.num_frames * mf.dim);
  for (double& v : mf.data) v = io::read_le<float>(in);
  return mf;
}

}  // namespace mtm
