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

// Random-projection quantizer. A frozen Xavier-uniform projection R (h x d)
// maps a normalized mel frame x into h dimensions; the token is the index of
// the closest entry of a frozen standard-normal codebook C (n x h).
//
// Two lookup modes:
//   kNearestNormalized  argmin_i || c_i/|c_i| - Rx/|Rx| ||   (default)
//   kNormDifference     argmin_i | |c_i| - |Rx| |
// Ties resolve to the smallest index. A zero vector normalizes to zero.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtm/ad/blas.hpp"
#include "mtm/common.hpp"
#include "mtm/dsp.hpp"

namespace mtm {

enum class LookupMode : std::uint32_t { kNearestNormalized = 0, kNormDifference = 1 };

inline std::string to_string(LookupMode mode) {
  return mode == LookupMode::kNearestNormalized ? "nearest-normalized" : "norm-difference";
}

inline LookupMode parse_lookup_mode(std::string_view s) {
  if (s == "nearest-normalized") return LookupMode::kNearestNormalized;
  if (s == "norm-difference") return LookupMode::kNormDifference;
  throw ConfigError("unknown quantizer mode '" + std::string(s) + "'");
}

struct TokenSequence {
  std::vector<std::uint32_t> tokens;
  int frame_rate = 0;
};

class Quantizer {
 public:
  // Frozen after construction. projection is h x d, codebook n x h, both
  // row-major.
  Quantizer(int d, int h, int n, std::vector<float> projection, std::vector<float> codebook,
            LookupMode mode, std::uint64_t seed)
      : d_(d), h_(h), n_(n), projection_(std::move(projection)), codebook_(std::move(codebook)),
        mode_(mode), seed_(seed) {
    if (d < 1 || h < 1 || n < 1) throw ConfigError("quantizer dimensions must be >= 1");
    if (projection_.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(d)) {
      throw ConfigError("projection must be h x d");
    }
    if (codebook_.size() != static_cast<std::size_t>(n) * static_cast<std::size_t>(h)) {
      throw ConfigError("codebook must be n x h");
    }
    precompute();
  }

  static Quantizer build(std::uint64_t seed, int d, int h = 16, int n = 8192,
                         LookupMode mode = LookupMode::kNearestNormalized) {
    if (d < 1 || h < 1 || n < 1) throw ConfigError("quantizer dimensions must be >= 1");
    std::mt19937_64 rng(seed);
    const double bound = std::sqrt(6.0 / (d + h));
    std::uniform_real_distribution<double> uni(-bound, bound);
    std::vector<float> proj(static_cast<std::size_t>(h) * static_cast<std::size_t>(d));
    for (float& v : proj) {
      float f = static_cast<float>(uni(rng));
      if (std::abs(static_cast<double>(f)) > bound) f = std::nextafter(f, 0.0f);
      v = f;
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<float> code(static_cast<std::size_t>(n) * static_cast<std::size_t>(h));
    for (float& v : code) v = static_cast<float>(normal(rng));
    return Quantizer(d, h, n, std::move(proj), std::move(code), mode, seed);
  }

  int input_dim() const { return d_; }
  int latent_dim() const { return h_; }
  int codebook_size() const { return n_; }
  LookupMode mode() const { return mode_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<float>& projection() const { return projection_; }
  const std::vector<float>& codebook() const { return codebook_; }

  // Rx for one frame.
  std::vector<double> project(std::span<const double> frame) const {
    if (frame.size() != static_cast<std::size_t>(d_)) throw ConfigError("frame dimension mismatch");
    std::vector<double> y(static_cast<std::size_t>(h_), 0.0);
    for (int i = 0; i < h_; ++i) {
      double acc = 0.0;
      for (int j = 0; j < d_; ++j) acc += static_cast<double>(projection_[static_cast<std::size_t>(i * d_ + j)]) * frame[static_cast<std::size_t>(j)];
      y[static_cast<std::size_t>(i)] = acc;
    }
    return y;
  }

  TokenSequence tokenize(const MelFrameSequence& frames) const {
    if (frames.dim != static_cast<std::size_t>(d_)) {
      throw ConfigError("frame dimension " + std::to_string(frames.dim) +
                        " does not match quantizer input dimension " + std::to_string(d_));
    }
    TokenSequence out;
    out.frame_rate = frames.frame_rate;
    out.tokens.resize(frames.num_frames);
    constexpr std::size_t kChunk = 512;
    const auto h = static_cast<std::size_t>(h_);
    const auto n = static_cast<std::size_t>(n_);
    std::vector<double> y(kChunk * h);
    std::vector<double> scores;
    for (std::size_t begin = 0; begin < frames.num_frames; begin += kChunk) {
      const std::size_t rows = std::min(kChunk, frames.num_frames - begin);
      // Y = X R^T
      ad::gemm<double>(false, true, static_cast<int>(rows), h_, d_, 1.0,
                       frames.data.data() + begin * frames.dim, d_, projection_d_.data(), d_, 0.0,
                       y.data(), h_);
      if (mode_ == LookupMode::kNormDifference) {
        for (std::size_t r = 0; r < rows; ++r) {
          double norm = 0.0;
          for (std::size_t k = 0; k < h; ++k) norm += y[r * h + k] * y[r * h + k];
          out.tokens[begin + r] = nearest_norm(std::sqrt(norm));
        }
        continue;
      }
      for (std::size_t r = 0; r < rows; ++r) normalize(std::span<double>(y.data() + r * h, h));
      // |c - y|^2 = |c|^2 + |y|^2 - 2 c.y ; |y|^2 is constant per row.
      scores.resize(rows * n);
      ad::gemm<double>(false, true, static_cast<int>(rows), n_, h_, 1.0, y.data(), h_,
                       unit_codebook_.data(), h_, 0.0, scores.data(), n_);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* s = scores.data() + r * n;
        std::uint32_t best = 0;
        double best_v = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
          const double v = unit_sq_norm_[i] - 2.0 * s[i];
          if (v < best_v) {
            best_v = v;
            best = static_cast<std::uint32_t>(i);
          }
        }
        out.tokens[begin + r] = best;
      }
    }
    return out;
  }

 private:
  static void normalize(std::span<double> v) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) {
      std::fill(v.begin(), v.end(), 0.0);
      return;
    }
    for (double& x : v) x /= norm;
  }

  std::uint32_t nearest_norm(double norm) const {
    std::uint32_t best = 0;
    double best_v = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < code_norm_.size(); ++i) {
      const double v = std::abs(code_norm_[i] - norm);
      if (v < best_v) {
        best_v = v;
        best = static_cast<std::uint32_t>(i);
      }
    }
    return best;
  }

  void precompute() {
    const auto h = static_cast<std::size_t>(h_);
    projection_d_.assign(projection_.begin(), projection_.end());
    unit_codebook_.assign(codebook_.begin(), codebook_.end());
    code_norm_.resize(static_cast<std::size_t>(n_));
    unit_sq_norm_.resize(static_cast<std::size_t>(n_));
    for (std::size_t i = 0; i < static_cast<std::size_t>(n_); ++i) {
      std::span<double> row(unit_codebook_.data() + i * h, h);
      double sq = 0.0;
      for (double x : row) sq += x * x;
      code_norm_[i] = std::sqrt(sq);
      normalize(row);
      double usq = 0.0;
      for (double x : row) usq += x * x;
      unit_sq_norm_[i] = usq;
    }
  }

  int d_, h_, n_;
  std::vector<float> projection_;
  std::vector<float> codebook_;
  LookupMode mode_;
  std::uint64_t seed_;
  std::vector<double> projection_d_;
  std::vector<double> unit_codebook_;
  std::vector<double> code_norm_;
  std::vector<double> unit_sq_norm_;
};

struct Utilization {
  double used_fraction = 0.0;
  double entropy_bits = 0.0;
};

inline Utilization utilization(std::span<const std::uint32_t> tokens, int n) {
  if (tokens.empty() || n <= 0) return {};
  std::unordered_map<std::uint32_t, std::uint64_t> hist;
  for (auto t : tokens) ++hist[t];
  // Sum in token order so the result does not depend on hash iteration.
  std::vector<std::pair<std::uint32_t, std::uint64_t>> sorted(hist.begin(), hist.end());
  std::sort(sorted.begin(), sorted.end());
  double entropy = 0.0;
  const double total = static_cast<double>(tokens.size());
  for (const auto& [tok, count] : sorted) {
    const double p = static_cast<double>(count) / total;
    entropy -= p * std::log2(p);
  }
  return {static_cast<double>(hist.size()) / n, entropy == 0.0 ? 0.0 : entropy};
}

// Token dump: header (magic "TOKS", T, n, frame_rate as u32; seed as u64;
// mode as u32; reserved u32 = 0) then T little-endian uint32 tokens.
inline constexpr std::uint32_t kTokenMagic = io::fourcc("TOKS");

inline void save_tokens(const std::filesystem::path& path, const TokenSequence& ts, int n,
                        std::uint64_t seed, LookupMode mode) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write token file: " + path.string());
  io::write_le(out, kTokenMagic);
  io::write_le(out, static_cast<std::uint32_t>(ts.tokens.size()));
  io::write_le(out, static_cast<std::uint32_t>(n));
  io::write_le(out, static_cast<std::uint32_t>(ts.frame_rate));
  io::write_le(out, seed);
  io::write_le(out, static_cast<std::uint32_t>(mode));
  io::write_le<std::uint32_t>(out, 0);
  for (auto t : ts.tokens) io::write_le(out, t);
  if (!out) throw IoError("write failed: " + path.string());
}

struct TokenFile {
  TokenSequence sequence;
  int codebook_size = 0;
  std::uint64_t seed = 0;
  LookupMode mode = LookupMode::kNearestNormalized;
};

inline TokenFile load_tokens(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open token file: " + path.string());
  if (io::read_le<std::uint32_t>(in) != kTokenMagic) throw IoError("bad token file magic");
  TokenFile f;
  const auto count = io::read_le<std::uint32_t>(in);
  f.codebook_size = static_cast<int>(io::read_le<std::uint32_t>(in));
  f.sequence.frame_rate = static_cast<int>(io::read_le<std::uint32_t>(in));
  f.seed = io::read_le<std::uint64_t>(in);
  f.mode = static_cast<LookupMode>(io::read_le<std::uint32_t>(in));
  io::read_le<std::uint32_t>(in);
  f.sequence.tokens.resize(count);
  for (auto& t : f.sequence.tokens) t = io::read_le<std::uint32_t>(in);
  return f;
}

}  // namespace mtm
