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

// Sequence encoders over mel frames: a pre-norm transformer ("bert") and a
// Conformer. Both map [T, input_dim] frames to per-layer [T, d_model] states.
// The token rate is fixed upstream by the mel hop; there is no subsampling.
//
// Parameter names:
//   input.weight [input_dim, d], input.bias [d]
//   bert:      layer.N.attn_norm.{gain,bias}  layer.N.attn.{wq,wk,wv,wo,bq,bk,bv,bo}
//              layer.N.ffn_norm.{gain,bias}   layer.N.ffn.{w1,b1,w2,b2}
//              final_norm.{gain,bias}
//   conformer: layer.N.ffn1.*, layer.N.ffn2.* (norm.{gain,bias}, w1, b1, w2, b2)
//              layer.N.attn.norm.{gain,bias}, layer.N.attn.{wq,...,bo}, layer.N.attn.rel_bias [2R+1, heads]
//              layer.N.conv.norm.{gain,bias}, layer.N.conv.{pw1_w,pw1_b,dw_w,dw_b,pw2_w,pw2_b}
//              layer.N.final_norm.{gain,bias}

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtm/ad/ops.hpp"
#include "mtm/ad/tape.hpp"
#include "mtm/ad/tensor.hpp"
#include "mtm/common.hpp"

namespace mtm {

enum class EncoderKind { kBert, kConformer };

inline std::string to_string(EncoderKind k) { return k == EncoderKind::kBert ? "bert" : "conformer"; }

inline EncoderKind parse_encoder_kind(const std::string& s) {
  if (s == "bert") return EncoderKind::kBert;
  if (s == "conformer") return EncoderKind::kConformer;
  throw ConfigError("unknown encoder kind '" + s + "' (expected bert or conformer)");
}

struct EncoderConfig {
  EncoderKind kind = EncoderKind::kConformer;
  int input_dim = 128;
  int d_model = 128;
  int layers = 4;
  int heads = 4;
  int ffn_mult = 4;
  int conv_kernel = 31;
  int token_rate = 25;
  double max_input_seconds = 5.0;
  int rel_pos_clip = 64;  // relative offsets beyond +-R share one bias

  std::size_t max_frames() const {
    return static_cast<std::size_t>(std::llround(token_rate * max_input_seconds));
  }
  int head_dim() const { return d_model / heads; }

  void validate() const {
    if (input_dim < 1) throw ConfigError("encoder.input_dim must be >= 1");
    if (d_model < 1 || layers < 1 || heads < 1 || ffn_mult < 1) {
      throw ConfigError("encoder sizes (d_model, layers, heads, ffn_mult) must be >= 1");
    }
    if (d_model % heads != 0) {
      throw ConfigError("encoder.d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
                        std::to_string(heads) + ")");
    }
    if (conv_kernel < 1 || conv_kernel % 2 == 0) throw ConfigError("encoder.conv_kernel must be a positive odd integer");
    if (token_rate != 25 && token_rate != 50 && token_rate != 75) {
      throw ConfigError("encoder.token_rate must be 25, 50 or 75 Hz");
    }
    if (!(max_input_seconds > 0)) throw ConfigError("encoder.max_input_seconds must be > 0");
    if (rel_pos_clip < 1) throw ConfigError("encoder.rel_pos_clip must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)},          {"input_dim", input_dim}, {"d_model", d_model},
            {"layers", layers},                 {"heads", heads},         {"ffn_mult", ffn_mult},
            {"conv_kernel", conv_kernel},       {"token_rate", token_rate},
            {"max_input_seconds", max_input_seconds}, {"rel_pos_clip", rel_pos_clip}};
  }

  static EncoderConfig from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.kind = parse_encoder_kind(j.at("kind").get<std::string>());
    c.input_dim = j.at("input_dim").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn_mult = j.at("ffn_mult").get<int>();
    c.conv_kernel = j.at("conv_kernel").get<int>();
    c.token_rate = j.at("token_rate").get<int>();
    c.max_input_seconds = j.at("max_input_seconds").get<double>();
    c.rel_pos_clip = j.at("rel_pos_clip").get<int>();
    c.validate();
    return c;
  }
};

// Closed-form parameter count, used for reporting without allocating.
inline std::size_t parameter_count(const EncoderConfig& c) {
  const std::size_t d = c.d_model, f = d * c.ffn_mult, in = c.input_dim;
  const std::size_t ln = 2 * d;
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t ffn = d * f + f + f * d + d;
  std::size_t per_layer = 0;
  std::size_t tail = 0;
  if (c.kind == EncoderKind::kBert) {
    per_layer = 2 * ln + attn + ffn;
    tail = ln;
  } else {
    const std::size_t rel = static_cast<std::size_t>(2 * c.rel_pos_clip + 1) * c.heads;
    const std::size_t conv = ln + (d * 2 * d + 2 * d) + (c.conv_kernel * d + d) + (d * d + d);
    per_layer = 2 * (ln + ffn) + (ln + attn + rel) + conv + ln;
  }
  return in * d + d + c.layers * per_layer + tail;
}

namespace detail {

template <class T>
ad::Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-bound, bound);
  ad::Tensor<T> t({fan_in, fan_out});
  for (auto& v : t.data) v = static_cast<T>(u(rng));
  return t;
}

template <class T>
void add_linear(ad::ParameterSet<T>& ps, const std::string& w, const std::string& b, std::size_t in,
                std::size_t out, std::mt19937_64& rng) {
  ps.add(w, xavier_uniform<T>(in, out, rng));
  ps.add(b, ad::Tensor<T>({out}));
}

template <class T>
void add_norm(ad::ParameterSet<T>& ps, const std::string& prefix, std::size_t d) {
  ps.add(prefix + ".gain", ad::Tensor<T>({d}, T(1)));
  ps.add(prefix + ".bias", ad::Tensor<T>({d}));
}

template <class T>
void add_attention(ad::ParameterSet<T>& ps, const std::string& p, std::size_t d, std::mt19937_64& rng) {
  for (const char* x : {"q", "k", "v", "o"}) add_linear(ps, p + ".w" + x, p + ".b" + x, d, d, rng);
}

template <class T>
void add_ffn(ad::ParameterSet<T>& ps, const std::string& p, std::size_t d, std::size_t f, std::mt19937_64& rng) {
  add_linear(ps, p + ".w1", p + ".b1", d, f, rng);
  add_linear(ps, p + ".w2", p + ".b2", f, d, rng);
}

}  // namespace detail

// Xavier-uniform linear weights, zero biases, unit norm gains, zero relative
// position biases. Deterministic in seed.
template <class T = float>
ad::ParameterSet<T> init_weights(const EncoderConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(derive_seed(seed, 0x656e63));
  ad::ParameterSet<T> ps;
  const std::size_t d = c.d_model, f = d * c.ffn_mult;
  detail::add_linear(ps, "input.weight", "input.bias", c.input_dim, d, rng);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "layer." + std::to_string(l);
    if (c.kind == EncoderKind::kBert) {
      detail::add_norm(ps, p + ".attn_norm", d);
      detail::add_attention(ps, p + ".attn", d, rng);
      detail::add_norm(ps, p + ".ffn_norm", d);
      detail::add_ffn(ps, p + ".ffn", d, f, rng);
    } else {
      detail::add_norm(ps, p + ".ffn1.norm", d);
      detail::add_ffn(ps, p + ".ffn1", d, f, rng);
      detail::add_norm(ps, p + ".attn.norm", d);
      detail::add_attention(ps, p + ".attn", d, rng);
      ps.add(p + ".attn.rel_bias", ad::Tensor<T>({static_cast<std::size_t>(2 * c.rel_pos_clip + 1),
                                                  static_cast<std::size_t>(c.heads)}));
      detail::add_norm(ps, p + ".conv.norm", d);
      detail::add_linear(ps, p + ".conv.pw1_w", p + ".conv.pw1_b", d, 2 * d, rng);
      {
        const std::size_t k = c.conv_kernel;
        const double bound = std::sqrt(3.0 / static_cast<double>(k));
        std::uniform_real_distribution<double> u(-bound, bound);
        ad::Tensor<T> w({k, d});
        for (auto& v : w.data) v = static_cast<T>(u(rng));
        ps.add(p + ".conv.dw_w", std::move(w));
        ps.add(p + ".conv.dw_b", ad::Tensor<T>({d}));
      }
      detail::add_linear(ps, p + ".conv.pw2_w", p + ".conv.pw2_b", d, d, rng);
      detail::add_norm(ps, p + ".ffn2.norm", d);
      detail::add_ffn(ps, p + ".ffn2", d, f, rng);
      detail::add_norm(ps, p + ".final_norm", d);
    }
  }
  if (c.kind == EncoderKind::kBert) detail::add_norm(ps, "final_norm", d);
  return ps;
}

// Sinusoidal absolute position table [T, d].
template <class T>
ad::Tensor<T> sinusoidal_positions(std::size_t len, std::size_t d) {
  ad::Tensor<T> pe({len, d});
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double a = static_cast<double>(t) * freq;
      pe(t, i) = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  }
  return pe;
}

// Binds parameters to a tape lazily, once per name.
template <class T>
class Bound {
 public:
  Bound(ad::Tape<T>& tape, ad::ParameterSet<T>& ps, bool trainable) : tape_(tape), ps_(ps), trainable_(trainable) {}
  ad::Var<T> operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    auto v = tape_.parameter(ps_[name], trainable_);
    vars_.emplace(name, v);
    return v;
  }
  ad::Tape<T>& tape() { return tape_; }

 private:
  ad::Tape<T>& tape_;
  ad::ParameterSet<T>& ps_;
  bool trainable_;
  std::map<std::string, ad::Var<T>> vars_;
};

template <class T>
ad::Var<T> linear(Bound<T>& p, ad::Var<T> x, const std::string& w, const std::string& b) {
  return ad::add(ad::matmul(x, p(w)), p(b));
}

template <class T>
ad::Var<T> norm(Bound<T>& p, ad::Var<T> x, const std::string& prefix) {
  return ad::layer_norm(x, p(prefix + ".gain"), p(prefix + ".bias"));
}

// Multi-head self-attention. `bias_per_head` holds optional additive [T, T]
// score biases (relative positions); `key_mask` is an additive [T, T]
// constant that excludes padded keys.
template <class T>
ad::Var<T> self_attention(Bound<T>& p, ad::Var<T> x, const std::string& prefix, int heads,
                          const std::vector<ad::Var<T>>& bias_per_head, std::optional<ad::Var<T>> key_mask) {
  const std::size_t d = x.shape()[1];
  const std::size_t dh = d / static_cast<std::size_t>(heads);
  auto q = linear(p, x, prefix + ".wq", prefix + ".bq");
  auto k = linear(p, x, prefix + ".wk", prefix + ".bk");
  auto v = linear(p, x, prefix + ".wv", prefix + ".bv");
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<ad::Var<T>> outs;
  for (int h = 0; h < heads; ++h) {
    const std::size_t lo = h * dh, hi = lo + dh;
    auto qh = heads == 1 ? q : ad::slice(q, 1, lo, hi);
    auto kh = heads == 1 ? k : ad::slice(k, 1, lo, hi);
    auto vh = heads == 1 ? v : ad::slice(v, 1, lo, hi);
    auto scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
    if (!bias_per_head.empty()) scores = ad::add(scores, bias_per_head[h]);
    if (key_mask) scores = ad::add(scores, *key_mask);
    outs.push_back(ad::matmul(ad::softmax(scores, 1), vh));
  }
  auto merged = heads == 1 ? outs[0] : ad::concat(outs, 1);
  return linear(p, merged, prefix + ".wo", prefix + ".bo");
}

// Per-head [T, T] bias matrices gathered from the clipped relative table.
template <class T>
std::vector<ad::Var<T>> relative_bias(ad::Var<T> table, std::size_t len, int clip, int heads) {
  std::vector<std::int32_t> ids(len * len);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < len; ++j) {
      const long off = static_cast<long>(j) - static_cast<long>(i);
      ids[i * len + j] = static_cast<std::int32_t>(std::clamp<long>(off, -clip, clip) + clip);
    }
  }
  auto gathered = ad::transpose(ad::embedding_lookup(table, std::span<const std::int32_t>(ids)));  // [H, T*T]
  std::vector<ad::Var<T>> out;
  for (int h = 0; h < heads; ++h) {
    out.push_back(ad::reshape(ad::slice(gathered, 0, h, h + 1), {len, len}));
  }
  return out;
}

template <class T>
ad::Var<T> feed_forward(Bound<T>& p, ad::Var<T> x, const std::string& prefix, bool use_swish) {
  auto h = linear(p, x, prefix + ".w1", prefix + ".b1");
  h = use_swish ? ad::swish(h) : ad::gelu(h);
  return linear(p, h, prefix + ".w2", prefix + ".b2");
}

// LN -> pointwise (d -> 2d) -> GLU -> zero padded rows -> depthwise conv
// -> swish -> pointwise (d -> d).
template <class T>
ad::Var<T> conv_module(Bound<T>& p, ad::Var<T> x, const std::string& prefix, std::optional<ad::Var<T>> row_mask) {
  auto h = norm(p, x, prefix + ".norm");
  h = ad::glu(linear(p, h, prefix + ".pw1_w", prefix + ".pw1_b"));
  if (row_mask) h = ad::mul(h, *row_mask);
  h = ad::conv1d_depthwise(h, p(prefix + ".dw_w"), p(prefix + ".dw_b"));
  h = ad::swish(h);
  return linear(p, h, prefix + ".pw2_w", prefix + ".pw2_b");
}

struct EncodeOptions {
  // Number of leading frames that are real input; the rest is padding and
  // is excluded from attention and from the convolution context.
  std::optional<std::size_t> valid_length;
  bool trainable = true;
};

// Returns layers + 1 states: the input projection followed by each block's
// output. All states are [T, d_model].
template <class T>
std::vector<ad::Var<T>> encode(ad::Tape<T>& tape, const EncoderConfig& c, ad::ParameterSet<T>& params,
                               ad::Var<T> frames, const EncodeOptions& opt = {}) {
  const auto& shape = frames.shape();
  if (shape.size() != 2 || shape[1] != static_cast<std::size_t>(c.input_dim)) {
    throw ad::ShapeError("encode: expected frames [T, " + std::to_string(c.input_dim) + "], got " +
                         ad::shape_str(shape));
  }
  const std::size_t len = shape[0];
  if (len == 0) throw ad::ShapeError("encode: empty input");
  if (len > c.max_frames()) {
    throw ad::ShapeError("encode: input of " + std::to_string(len) + " frames exceeds the " +
                         std::to_string(c.max_frames()) + "-frame limit");
  }
  const std::size_t d = c.d_model;
  Bound<T> p(tape, params, opt.trainable);

  std::optional<ad::Var<T>> key_mask, row_mask;
  if (opt.valid_length && *opt.valid_length < len) {
    const std::size_t valid = *opt.valid_length;
    if (valid == 0) throw ad::ShapeError("encode: valid_length must be >= 1");
    ad::Tensor<T> km({len, len});
    ad::Tensor<T> rm({len, d});
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = valid; j < len; ++j) km(i, j) = static_cast<T>(-1e9);
      if (i < valid) std::fill_n(rm.data.begin() + static_cast<std::ptrdiff_t>(i * d), d, T(1));
    }
    key_mask = tape.constant(std::move(km));
    row_mask = tape.constant(std::move(rm));
  }

  std::vector<ad::Var<T>> states;
  auto x = linear(p, frames, "input.weight", "input.bias");
  if (c.kind == EncoderKind::kBert) x = ad::add(x, tape.constant(sinusoidal_positions<T>(len, d)));
  states.push_back(x);

  const T half = T(0.5);
  for (int l = 0; l < c.layers; ++l) {
    const std::string pre = "layer." + std::to_string(l);
    if (c.kind == EncoderKind::kBert) {
      x = ad::add(x, self_attention(p, norm(p, x, pre + ".attn_norm"), pre + ".attn", c.heads, {}, key_mask));
      x = ad::add(x, feed_forward(p, norm(p, x, pre + ".ffn_norm"), pre + ".ffn", false));
      if (l + 1 == c.layers) x = norm(p, x, "final_norm");
    } else {
      x = ad::add(x, ad::scale(feed_forward(p, norm(p, x, pre + ".ffn1.norm"), pre + ".ffn1", true), half));
      auto bias = relative_bias(p(pre + ".attn.rel_bias"), len, c.rel_pos_clip, c.heads);
      x = ad::add(x, self_attention(p, norm(p, x, pre + ".attn.norm"), pre + ".attn", c.heads, bias, key_mask));
      x = ad::add(x, conv_module(p, x, pre + ".conv", row_mask));
      x = ad::add(x, ad::scale(feed_forward(p, norm(p, x, pre + ".ffn2.norm"), pre + ".ffn2", true), half));
      x = norm(p, x, pre + ".final_norm");
    }
    states.push_back(x);
  }
  return states;
}

// Frozen forward pass outside any training graph.
template <class T>
std::vector<ad::Tensor<T>> encode_frozen(const EncoderConfig& c, const ad::ParameterSet<T>& params,
                                         const ad::Tensor<T>& frames, std::optional<std::size_t> valid_length = {}) {
  ad::Tape<T> tape;
  auto& ps = const_cast<ad::ParameterSet<T>&>(params);  // bound read-only: trainable = false
  auto states = encode(tape, c, ps, tape.constant(frames), EncodeOptions{valid_length, false});
  std::vector<ad::Tensor<T>> out;
  for (auto& s : states) out.push_back(s.value());
  return out;
}

}  // namespace mtm
