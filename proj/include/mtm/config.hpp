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

// Run configuration: a flat INI-style file.
//
//   # comment            ; comment
//   [section]
//   key = value
//
// Unknown sections or keys are errors. Paths may be overridden by
// environment variables MTM_PATH_<KEY> (for example MTM_PATH_CORPUS).
// The fingerprint hashes the canonical text of every field except the run
// name, [paths] and [ablate], so it ignores comments, whitespace, key order
// and file locations.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "mtm/common.hpp"
#include "mtm/dsp.hpp"
#include "mtm/encoder.hpp"
#include "mtm/quantizer.hpp"

namespace mtm {

struct QuantizerConfig {
  int n = 8192;
  int h = 16;
  LookupMode mode = LookupMode::kNearestNormalized;
  std::uint64_t seed = 7;
};

struct MaskingConfig {
  double span_ms = 400.0;
  double p = 0.6;
  double noise_std = 0.1;
};

struct OptimizerConfig {
  double lr = 1e-4;
  std::int64_t warmup = 30000;
  std::int64_t steps = 100000;
  int batch = 8;
  std::int64_t checkpoint_every = 1000;
  double dropout = 0.0;
};

struct ProbeConfig {
  double lr = 1e-3;
  int epochs = 100;
  int patience = 10;
  int hidden = 512;
  std::string layer = "last";  // "last", "weighted" or a layer index
  bool fine_tune = false;
  double fine_tune_lr = 1e-5;
  double val_fraction = 0.2;
  std::uint64_t seed = 1;
};

struct PathsConfig {
  std::string corpus;
  std::string out;
  std::string train;
  std::string test;
};

struct AblateConfig {
  std::vector<std::string> kinds = {"bert", "conformer"};
  std::vector<double> input_seconds = {5.0, 30.0};
  std::vector<int> token_rates = {25, 50, 75};
};

struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 1;
  FrontendConfig frontend;
  EncoderConfig encoder;
  QuantizerConfig quantizer;
  MaskingConfig masking;
  OptimizerConfig optimizer;
  ProbeConfig probe;
  PathsConfig paths;
  AblateConfig ablate;

  // The encoder owns the token rate and input width; the front end follows.
  FrontendConfig frontend_for_model() const {
    FrontendConfig f = frontend;
    f.token_rate = encoder.token_rate;
    f.mel_bands = encoder.input_dim;
    return f;
  }

  void validate() const;
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

template <class Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Field {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Int>
std::string int_str(Int v) {
  return std::to_string(v);
}

// Declaration order here is the canonical serialization order.
inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    auto num = [&f](std::string s, std::string k, auto member) {
      f.push_back({s, k,
                   [member, k](RunConfig& c, const std::string& v) {
                     auto& ref = member(c);
                     using V = std::remove_reference_t<decltype(ref)>;
                     if constexpr (std::is_floating_point_v<V>) {
                       ref = parse_double(k, v);
                     } else {
                       ref = parse_int<V>(k, v);
                     }
                   },
                   [member](const RunConfig& c) {
                     auto& ref = member(const_cast<RunConfig&>(c));
                     using V = std::remove_reference_t<decltype(ref)>;
                     if constexpr (std::is_floating_point_v<V>) {
                       return format_double(ref);
                     } else {
                       return int_str(ref);
                     }
                   }});
    };
    auto str = [&f](std::string s, std::string k, auto member) {
      f.push_back({s, k, [member](RunConfig& c, const std::string& v) { member(c) = v; },
                   [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }});
    };
    str("run", "name", [](RunConfig& c) -> std::string& { return c.name; });
    num("run", "seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });

    num("frontend", "sample_rate", [](RunConfig& c) -> int& { return c.frontend.sample_rate; });
    num("frontend", "n_fft", [](RunConfig& c) -> int& { return c.frontend.n_fft; });
    num("frontend", "fmin", [](RunConfig& c) -> double& { return c.frontend.fmin; });
    num("frontend", "fmax", [](RunConfig& c) -> double& { return c.frontend.fmax; });

    f.push_back({"encoder", "kind",
                 [](RunConfig& c, const std::string& v) { c.encoder.kind = parse_encoder_kind(v); },
                 [](const RunConfig& c) { return to_string(c.encoder.kind); }});
    num("encoder", "input_dim", [](RunConfig& c) -> int& { return c.encoder.input_dim; });
    num("encoder", "d_model", [](RunConfig& c) -> int& { return c.encoder.d_model; });
    num("encoder", "layers", [](RunConfig& c) -> int& { return c.encoder.layers; });
    num("encoder", "heads", [](RunConfig& c) -> int& { return c.encoder.heads; });
    num("encoder", "ffn_mult", [](RunConfig& c) -> int& { return c.encoder.ffn_mult; });
    num("encoder", "conv_kernel", [](RunConfig& c) -> int& { return c.encoder.conv_kernel; });
    num("encoder", "token_rate", [](RunConfig& c) -> int& { return c.encoder.token_rate; });
    num("encoder", "input_seconds", [](RunConfig& c) -> double& { return c.encoder.max_input_seconds; });
    num("encoder", "rel_pos_clip", [](RunConfig& c) -> int& { return c.encoder.rel_pos_clip; });

    num("quantizer", "n", [](RunConfig& c) -> int& { return c.quantizer.n; });
    num("quantizer", "h", [](RunConfig& c) -> int& { return c.quantizer.h; });
    f.push_back({"quantizer", "mode",
                 [](RunConfig& c, const std::string& v) { c.quantizer.mode = parse_lookup_mode(v); },
                 [](const RunConfig& c) { return to_string(c.quantizer.mode); }});
    num("quantizer", "seed", [](RunConfig& c) -> std::uint64_t& { return c.quantizer.seed; });

    num("masking", "span_ms", [](RunConfig& c) -> double& { return c.masking.span_ms; });
    num("masking", "p", [](RunConfig& c) -> double& { return c.masking.p; });
    num("masking", "noise_std", [](RunConfig& c) -> double& { return c.masking.noise_std; });

    num("optimizer", "lr", [](RunConfig& c) -> double& { return c.optimizer.lr; });
    num("optimizer", "warmup", [](RunConfig& c) -> std::int64_t& { return c.optimizer.warmup; });
    num("optimizer", "steps", [](RunConfig& c) -> std::int64_t& { return c.optimizer.steps; });
    num("optimizer", "batch", [](RunConfig& c) -> int& { return c.optimizer.batch; });
    num("optimizer", "checkpoint_every", [](RunConfig& c) -> std::int64_t& { return c.optimizer.checkpoint_every; });
    num("optimizer", "dropout", [](RunConfig& c) -> double& { return c.optimizer.dropout; });

    num("probe", "lr", [](RunConfig& c) -> double& { return c.probe.lr; });
    num("probe", "epochs", [](RunConfig& c) -> int& { return c.probe.epochs; });
    num("probe", "patience", [](RunConfig& c) -> int& { return c.probe.patience; });
    num("probe", "hidden", [](RunConfig& c) -> int& { return c.probe.hidden; });
    str("probe", "layer", [](RunConfig& c) -> std::string& { return c.probe.layer; });
    f.push_back({"probe", "fine_tune",
                 [](RunConfig& c, const std::string& v) { c.probe.fine_tune = parse_bool("fine_tune", v); },
                 [](const RunConfig& c) { return std::string(c.probe.fine_tune ? "true" : "false"); }});
    num("probe", "fine_tune_lr", [](RunConfig& c) -> double& { return c.probe.fine_tune_lr; });
    num("probe", "val_fraction", [](RunConfig& c) -> double& { return c.probe.val_fraction; });
    num("probe", "seed", [](RunConfig& c) -> std::uint64_t& { return c.probe.seed; });

    str("paths", "corpus", [](RunConfig& c) -> std::string& { return c.paths.corpus; });
    str("paths", "out", [](RunConfig& c) -> std::string& { return c.paths.out; });
    str("paths", "train", [](RunConfig& c) -> std::string& { return c.paths.train; });
    str("paths", "test", [](RunConfig& c) -> std::string& { return c.paths.test; });

    f.push_back({"ablate", "kinds", [](RunConfig& c, const std::string& v) { c.ablate.kinds = split_list(v); },
                 [](const RunConfig& c) {
                   std::string s;
                   for (const auto& k : c.ablate.kinds) s += (s.empty() ? "" : ", ") + k;
                   return s;
                 }});
    f.push_back({"ablate", "input_seconds",
                 [](RunConfig& c, const std::string& v) {
                   c.ablate.input_seconds.clear();
                   for (const auto& x : split_list(v)) c.ablate.input_seconds.push_back(parse_double("input_seconds", x));
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (double x : c.ablate.input_seconds) s += (s.empty() ? "" : ", ") + format_double(x);
                   return s;
                 }});
    f.push_back({"ablate", "token_rates",
                 [](RunConfig& c, const std::string& v) {
                   c.ablate.token_rates.clear();
                   for (const auto& x : split_list(v)) c.ablate.token_rates.push_back(parse_int<int>("token_rates", x));
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (int x : c.ablate.token_rates) s += (s.empty() ? "" : ", ") + std::to_string(x);
                   return s;
                 }});
    return f;
  }();
  return table;
}

// Fields that do not change any computed result.
inline bool fingerprint_excluded(const Field& f) {
  return f.section == "paths" || f.section == "ablate" || (f.section == "run" && f.key == "name");
}

// Sections that determine a pretraining run (and thus a checkpoint).
inline bool pretrain_field(const Field& f) {
  return !fingerprint_excluded(f) && f.section != "probe";
}

}  // namespace detail

inline void RunConfig::validate() const {
  frontend_for_model().validate();
  encoder.validate();
  if (quantizer.n < 1 || quantizer.h < 1) throw ConfigError("quantizer.n and quantizer.h must be >= 1");
  if (!(masking.span_ms > 0)) throw ConfigError("masking.span_ms must be > 0");
  if (masking.p < 0 || masking.p > 1) throw ConfigError("masking.p must be in [0, 1]");
  if (masking.noise_std < 0) throw ConfigError("masking.noise_std must be >= 0");
  if (!(optimizer.lr > 0)) throw ConfigError("optimizer.lr must be > 0");
  if (optimizer.warmup < 0) throw ConfigError("optimizer.warmup must be >= 0");
  if (optimizer.steps < 0) throw ConfigError("optimizer.steps must be >= 0");
  if (optimizer.batch < 1) throw ConfigError("optimizer.batch must be >= 1");
  if (optimizer.checkpoint_every < 0) throw ConfigError("optimizer.checkpoint_every must be >= 0");
  if (optimizer.dropout < 0 || optimizer.dropout >= 1) throw ConfigError("optimizer.dropout must be in [0, 1)");
  if (!(probe.lr > 0) || !(probe.fine_tune_lr > 0)) throw ConfigError("probe learning rates must be > 0");
  if (probe.epochs < 1) throw ConfigError("probe.epochs must be >= 1");
  if (probe.patience < 1) throw ConfigError("probe.patience must be >= 1");
  if (probe.hidden < 1) throw ConfigError("probe.hidden must be >= 1");
  if (probe.val_fraction < 0 || probe.val_fraction >= 1) throw ConfigError("probe.val_fraction must be in [0, 1)");
  if (probe.layer != "last" && probe.layer != "weighted") {
    int idx = -1;
    auto res = std::from_chars(probe.layer.data(), probe.layer.data() + probe.layer.size(), idx);
    if (res.ec != std::errc() || res.ptr != probe.layer.data() + probe.layer.size() || idx < 0 ||
        idx > encoder.layers) {
      throw ConfigError("probe.layer must be 'last', 'weighted' or a layer index in [0, " +
                        std::to_string(encoder.layers) + "]");
    }
  }
  for (const auto& k : ablate.kinds) parse_encoder_kind(k);
  for (int r : ablate.token_rates) {
    if (r != 25 && r != 50 && r != 75) throw ConfigError("ablate.token_rates entries must be 25, 50 or 75");
  }
  for (double s : ablate.input_seconds) {
    if (!(s > 0)) throw ConfigError("ablate.input_seconds entries must be > 0");
  }
}

// Parses configuration text over the defaults. Does not validate.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // A comment starts at '#' or ';' at the line start or after whitespace.
    for (std::size_t i = 0; i < line.size(); ++i) {
      if ((line[i] == '#' || line[i] == ';') && (i == 0 || std::isspace(static_cast<unsigned char>(line[i - 1])))) {
        line.erase(i);
        break;
      }
    }
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      bool known = false;
      for (const auto& f : detail::fields()) known |= f.section == section;
      if (!known) throw ConfigError("line " + std::to_string(lineno) + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside of a section");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    const detail::Field* field = nullptr;
    for (const auto& f : detail::fields()) {
      if (f.section == section && f.key == key) field = &f;
    }
    if (!field) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "' in [" + section + "]");
    field->set(base, value);
  }
  return base;
}

inline void apply_env_overrides(RunConfig& c) {
  struct Item {
    const char* var;
    std::string* dst;
  };
  for (const Item& it : {Item{"MTM_PATH_CORPUS", &c.paths.corpus}, Item{"MTM_PATH_OUT", &c.paths.out},
                         Item{"MTM_PATH_TRAIN", &c.paths.train}, Item{"MTM_PATH_TEST", &c.paths.test}}) {
    if (const char* v = std::getenv(it.var)) *it.dst = v;
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c = parse_config(ss.str());
  apply_env_overrides(c);
  c.validate();
  return c;
}

// Canonical text: every selected field in declaration order.
inline std::string serialize_config(const RunConfig& c,
                                    const std::function<bool(const detail::Field&)>& keep = {}) {
  std::string out, section;
  for (const auto& f : detail::fields()) {
    if (keep && !keep(f)) continue;
    if (f.section != section) {
      if (!out.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(c) + "\n";
  }
  return out;
}

// Hash of every field that can change a result. Comments, whitespace, key
// order, run name and paths do not contribute.
inline std::uint64_t config_fingerprint(const RunConfig& c) {
  return fnv1a64(serialize_config(c, [](const detail::Field& f) { return !detail::fingerprint_excluded(f); }));
}

// Hash of the fields a checkpoint depends on; probe settings are excluded so
// one checkpoint serves many probing runs.
inline std::uint64_t pretrain_fingerprint(const RunConfig& c) {
  return fnv1a64(serialize_config(c, detail::pretrain_field));
}

inline std::string fingerprint_hex(std::uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
  return buf;
}

}  // namespace mtm
