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

// Downstream probing on encoder features: feature extraction from a frozen
// backbone, alignment to each task's frame grid, label rasterization, a
// one-hidden-layer probe, decoding back to annotation form, and scoring.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtm/ad/container.hpp"
#include "mtm/ad/ops.hpp"
#include "mtm/ad/optim.hpp"
#include "mtm/annotations.hpp"
#include "mtm/audio.hpp"
#include "mtm/config.hpp"
#include "mtm/corpus.hpp"
#include "mtm/dsp.hpp"
#include "mtm/encoder.hpp"
#include "mtm/labels.hpp"
#include "mtm/metrics.hpp"
#include "mtm/pretrain.hpp"

namespace mtm {

// ---------------------------------------------------------------------------
// Tasks

struct TaskSpec {
  std::string name;
  bool sequence_level = false;
  int classes = 0;
  double frame_ms = 0.0;       // token-level tasks only
  bool boundary_head = false;  // structure
  bool multi_label = false;    // tagging
};

inline const std::vector<std::string>& task_names() {
  static const std::vector<std::string> names = {"beat", "chord", "structure", "key", "tagging"};
  return names;
}

inline TaskSpec task_spec(const std::string& name) {
  if (name == "beat") return {"beat", false, 3, 50.0, false, false};
  if (name == "chord") return {"chord", false, kNumMajMinClasses, 125.0, false, false};
  if (name == "structure") return {"structure", false, static_cast<int>(kSectionLabels.size()), 200.0, true, false};
  if (name == "key") return {"key", false, kNumMajMinClasses, 2000.0, false, false};
  if (name == "tagging") return {"tagging", true, static_cast<int>(kSongTags.size()), 0.0, false, true};
  throw ConfigError("unknown task '" + name + "' (expected beat, chord, structure, key or tagging)");
}

// Peak-picking distances, in milliseconds.
inline constexpr double kBeatMinDistanceMs = 120.0;
inline constexpr double kDownbeatMinDistanceMs = 500.0;
inline constexpr double kBoundaryMinDistanceMs = 1000.0;
inline constexpr double kPeakThreshold = 0.5;

inline std::size_t distance_frames(double ms, double frame_ms) {
  return static_cast<std::size_t>(std::ceil(ms / frame_ms - 1e-9));
}

// ---------------------------------------------------------------------------
// Backbone and features

struct Backbone {
  EncoderConfig encoder;
  FrontendConfig frontend;
  Normalizer normalizer;
  ad::ParameterSet<float> params;  // encoder weights only
};

inline Backbone backbone_from(const Checkpoint& ck) {
  Backbone b;
  b.encoder = ck.config.encoder;
  b.frontend = ck.config.frontend_for_model();
  b.normalizer = ck.normalizer;
  for (const auto& p : ck.params) {
    if (p.name.rfind("head.", 0) != 0) b.params.add(p.name, p.value);
  }
  return b;
}

// Same front end and architecture, freshly initialized weights.
inline Backbone random_backbone(const Checkpoint& ck, std::uint64_t seed) {
  Backbone b = backbone_from(ck);
  b.params = init_weights<float>(b.encoder, seed);
  return b;
}

inline ad::Tensor<float> normalized_frames(const Backbone& b, const AudioBuffer& audio) {
  return to_tensor(b.normalizer.apply(compute_log_mel(audio, b.frontend)));
}

// All layer states (input projection plus every block) for a clip. Inputs
// longer than the encoder limit are encoded in consecutive chunks.
inline std::vector<ad::Tensor<float>> encode_layers(const Backbone& b, const ad::Tensor<float>& frames) {
  const std::size_t total = frames.rows(), d = frames.cols(), dm = static_cast<std::size_t>(b.encoder.d_model);
  const std::size_t chunk = b.encoder.max_frames();
  std::vector<ad::Tensor<float>> out(static_cast<std::size_t>(b.encoder.layers + 1), ad::Tensor<float>({total, dm}));
  if (total == 0) return out;
  for (std::size_t start = 0; start < total; start += chunk) {
    const std::size_t len = std::min(chunk, total - start);
    ad::Tensor<float> piece({len, d});
    std::copy_n(frames.data.begin() + static_cast<std::ptrdiff_t>(start * d), len * d, piece.data.begin());
    auto states = encode_frozen(b.encoder, b.params, piece);
    for (std::size_t l = 0; l < states.size(); ++l) {
      std::copy(states[l].data.begin(), states[l].data.end(),
                out[l].data.begin() + static_cast<std::ptrdiff_t>(start * dm));
    }
  }
  return out;
}

// Which encoder layer a probe reads.
struct LayerChoice {
  enum class Mode { kLast, kIndex, kWeighted } mode = Mode::kLast;
  int index = 0;

  static LayerChoice parse(const std::string& s) {
    if (s == "last") return {};
    if (s == "weighted") return {Mode::kWeighted, 0};
    try {
      std::size_t used = 0;
      const int idx = std::stoi(s, &used);
      if (used == s.size() && idx >= 0) return {Mode::kIndex, idx};
    } catch (const std::exception&) {
    }
    throw ConfigError("layer must be 'last', 'weighted' or a non-negative index, got '" + s + "'");
  }
  std::string str() const {
    if (mode == Mode::kLast) return "last";
    if (mode == Mode::kWeighted) return "weighted";
    return std::to_string(index);
  }
};

inline ad::Tensor<float> extract_features(const Backbone& b, const AudioBuffer& audio, const LayerChoice& layer = {}) {
  if (layer.mode == LayerChoice::Mode::kWeighted) {
    throw ConfigError("extract_features returns one layer; weighted mixing happens inside the probe");
  }
  auto layers = encode_layers(b, normalized_frames(b, audio));
  if (layer.mode == LayerChoice::Mode::kLast) return layers.back();
  if (layer.index >= static_cast<int>(layers.size())) throw ConfigError("layer index out of range");
  return layers[static_cast<std::size_t>(layer.index)];
}

// ---------------------------------------------------------------------------
// Alignment

inline std::size_t task_frame_count(std::size_t tokens, int token_rate, double frame_ms) {
  if (token_rate <= 0 || !(frame_ms > 0)) throw ConfigError("align: rates must be positive");
  const double duration_ms = static_cast<double>(tokens) * 1000.0 / token_rate;
  return static_cast<std::size_t>(std::ceil(duration_ms / frame_ms - 1e-9));
}

// members[k] = token frames averaged into task frame k.
inline std::vector<std::vector<std::size_t>> task_frame_members(std::size_t tokens, int token_rate, double frame_ms) {
  const std::size_t n = task_frame_count(tokens, token_rate, frame_ms);
  std::vector<std::vector<std::size_t>> members(n);
  for (std::size_t t = 0; t < tokens; ++t) {
    const double center_ms = (static_cast<double>(t) + 0.5) * 1000.0 / token_rate;
    const auto k = std::min(n - 1, static_cast<std::size_t>(std::floor(center_ms / frame_ms)));
    members[k].push_back(t);
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (!members[k].empty()) continue;
    const double mid = (static_cast<double>(k) + 0.5) * frame_ms;
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < tokens; ++t) {
      const double dist = std::abs((static_cast<double>(t) + 0.5) * 1000.0 / token_rate - mid);
      if (dist < best_d) {
        best_d = dist;
        best = t;
      }
    }
    members[k].push_back(best);
  }
  return members;
}

// [T', T] averaging matrix; align_to_task(F) = A F.
inline ad::Tensor<float> align_matrix(std::size_t tokens, int token_rate, double frame_ms) {
  const auto members = task_frame_members(tokens, token_rate, frame_ms);
  ad::Tensor<float> a({members.size(), tokens});
  for (std::size_t k = 0; k < members.size(); ++k) {
    for (std::size_t t : members[k]) a(k, t) = 1.0f / static_cast<float>(members[k].size());
  }
  return a;
}

template <class T>
ad::Tensor<T> align_to_task(const ad::Tensor<T>& features, int token_rate, double frame_ms) {
  const std::size_t d = features.cols();
  const auto members = task_frame_members(features.rows(), token_rate, frame_ms);
  ad::Tensor<T> out({members.size(), d});
  for (std::size_t k = 0; k < members.size(); ++k) {
    for (std::size_t t : members[k]) {
      for (std::size_t j = 0; j < d; ++j) out(k, j) += features(t, j);
    }
    for (std::size_t j = 0; j < d; ++j) out(k, j) /= static_cast<T>(members[k].size());
  }
  return out;
}

template <class T>
ad::Tensor<T> pool_sequence(const ad::Tensor<T>& features) {
  if (features.rank() != 2 || features.rows() == 0) throw std::invalid_argument("pool_sequence: empty sequence");
  ad::Tensor<T> out({features.cols()});
  for (std::size_t t = 0; t < features.rows(); ++t) {
    for (std::size_t j = 0; j < features.cols(); ++j) out.data[j] += features(t, j);
  }
  for (auto& v : out.data) v /= static_cast<T>(features.rows());
  return out;
}

// ---------------------------------------------------------------------------
// Label rasterization

// Beat classes: 0 none, 1 beat, 2 downbeat. Frame k (time k * frame) is
// positive when a beat lies within one task frame of it.
inline std::vector<std::int32_t> rasterize_beats(const BeatAnnotation& a, std::size_t frames, double frame_ms) {
  const double dt = frame_ms / 1000.0;
  std::vector<std::int32_t> out(frames, 0);
  auto mark = [&](const std::vector<double>& times, std::int32_t cls) {
    for (double t : times) {
      const auto lo = static_cast<long>(std::ceil(t / dt - 1.0 - 1e-9));
      const auto hi = static_cast<long>(std::floor(t / dt + 1.0 + 1e-9));
      for (long k = std::max(0L, lo); k <= hi && k < static_cast<long>(frames); ++k) {
        if (std::abs(static_cast<double>(k) * dt - t) <= dt + 1e-9) {
          out[static_cast<std::size_t>(k)] = std::max(out[static_cast<std::size_t>(k)], cls);
        }
      }
    }
  };
  mark(a.beats, 1);
  mark(a.downbeats, 2);
  return out;
}

// Binary boundary targets with the same one-frame tolerance.
inline std::vector<float> rasterize_boundaries(const std::vector<double>& times, std::size_t frames, double frame_ms) {
  BeatAnnotation tmp;
  tmp.beats = times;
  const auto cls = rasterize_beats(tmp, frames, frame_ms);
  std::vector<float> out(frames);
  for (std::size_t i = 0; i < frames; ++i) out[i] = cls[i] > 0 ? 1.0f : 0.0f;
  return out;
}

// Class of the interval covering each frame center. Uncovered frames get
// `fallback`. `classify` maps a label string to its class or throws.
template <class Classify>
std::vector<std::int32_t> rasterize_intervals(const IntervalAnnotation& a, std::size_t frames, double frame_ms,
                                              Classify classify, std::int32_t fallback) {
  std::vector<std::int32_t> out(frames, fallback);
  for (std::size_t k = 0; k < frames; ++k) {
    const double center = (static_cast<double>(k) + 0.5) * frame_ms / 1000.0;
    if (const std::string* label = label_at(a, center)) out[k] = classify(*label);
  }
  return out;
}

inline std::int32_t chord_class(const std::string& label) { return parse_majmin(label).class_index(); }

inline std::int32_t section_class(const std::string& label) {
  auto idx = section_index(label);
  if (!idx) throw ConfigError("structure label '" + label + "' outside the functional class vocabulary");
  return *idx;
}

inline std::vector<float> multi_hot(const TagAnnotation& tags) {
  std::vector<float> out(kSongTags.size(), 0.0f);
  for (const auto& t : tags.tags) {
    auto it = std::find(kSongTags.begin(), kSongTags.end(), t);
    if (it == kSongTags.end()) throw ConfigError("tag '" + t + "' outside the tag vocabulary");
    out[static_cast<std::size_t>(it - kSongTags.begin())] = 1.0f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

struct TaskClip {
  std::string name;
  AudioBuffer audio;
  BeatAnnotation beats;
  IntervalAnnotation intervals;  // chord, structure or key
  TagAnnotation tags;
};

inline TaskClip load_task_clip(const std::filesystem::path& wav, const TaskSpec& task) {
  TaskClip c;
  c.name = wav.stem().string();
  c.audio = load_wav(wav);
  const auto ann = annotation_path(wav, task.name);
  if (task.name == "beat") {
    c.beats = load_beats(ann);
  } else if (task.name == "tagging") {
    c.tags = load_tags(ann);
  } else {
    c.intervals = load_intervals(ann);
    if (task.name != "structure") validate_chords(c.intervals);
  }
  return c;
}

inline std::vector<TaskClip> load_task_dataset(const std::filesystem::path& dir, const TaskSpec& task) {
  std::vector<TaskClip> out;
  for (const auto& w : list_wavs(dir)) out.push_back(load_task_clip(w, task));
  if (out.empty()) throw IoError("no .wav files in dataset " + dir.string());
  return out;
}

// Per-row training targets for one clip on the task grid.
struct ClipTargets {
  std::vector<std::int32_t> labels;
  std::vector<float> boundary;
  std::vector<float> tags;  // tagging only
};

inline ClipTargets make_targets(const TaskClip& clip, const TaskSpec& task, std::size_t frames) {
  ClipTargets t;
  if (task.name == "beat") {
    t.labels = rasterize_beats(clip.beats, frames, task.frame_ms);
  } else if (task.name == "chord" || task.name == "key") {
    t.labels = rasterize_intervals(clip.intervals, frames, task.frame_ms, chord_class, kNoneClass);
  } else if (task.name == "structure") {
    const auto silence = static_cast<std::int32_t>(*section_index("silence"));
    t.labels = rasterize_intervals(clip.intervals, frames, task.frame_ms, section_class, silence);
    t.boundary = rasterize_boundaries(interval_boundaries(clip.intervals), frames, task.frame_ms);
  } else {
    t.tags = multi_hot(clip.tags);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Probe

struct Probe {
  TaskSpec task;
  LayerChoice layer;
  int feature_dim = 0;
  int num_layers = 1;  // layers available to weighted mixing
  int hidden = 512;
  ad::ParameterSet<float> params;
  std::optional<Backbone> tuned_backbone;  // set by fine-tuning
};

inline Probe make_probe(const TaskSpec& task, const LayerChoice& layer, int feature_dim, int num_layers, int hidden,
                        std::uint64_t seed) {
  Probe p;
  p.task = task;
  p.layer = layer;
  p.feature_dim = feature_dim;
  p.num_layers = num_layers;
  p.hidden = hidden;
  std::mt19937_64 rng(derive_seed(seed, 0x70726f6265));
  const auto d = static_cast<std::size_t>(feature_dim), h = static_cast<std::size_t>(hidden);
  detail::add_linear(p.params, "probe.hidden.weight", "probe.hidden.bias", d, h, rng);
  detail::add_linear(p.params, "probe.out.weight", "probe.out.bias", h, static_cast<std::size_t>(task.classes), rng);
  if (task.boundary_head) detail::add_linear(p.params, "probe.boundary.weight", "probe.boundary.bias", h, 1, rng);
  if (layer.mode == LayerChoice::Mode::kWeighted) {
    p.params.add("probe.layer_logits", ad::Tensor<float>({static_cast<std::size_t>(num_layers)}));
  }
  return p;
}

struct ProbeOutputs {
  ad::Var<float> logits;
  std::optional<ad::Var<float>> boundary;  // [N, 1]
};

// layers: one Var (fixed layer) or num_layers Vars (weighted), each [N, D].
inline ProbeOutputs probe_forward(ad::Tape<float>& tape, Probe& probe, const std::vector<ad::Var<float>>& layers) {
  ad::Var<float> x;
  if (probe.layer.mode == LayerChoice::Mode::kWeighted) {
    if (layers.size() != static_cast<std::size_t>(probe.num_layers)) {
      throw ad::ShapeError("probe: weighted mixing expects one input per layer");
    }
    auto w = ad::softmax(tape.parameter(probe.params["probe.layer_logits"]), 0);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto term = ad::mul_scalar(layers[l], ad::slice(w, 0, l, l + 1));
      x = l == 0 ? term : ad::add(x, term);
    }
  } else {
    if (layers.size() != 1) throw ad::ShapeError("probe: expected a single layer input");
    x = layers[0];
  }
  auto p = [&](const char* n) { return tape.parameter(probe.params[n]); };
  auto h = ad::relu(ad::add(ad::matmul(x, p("probe.hidden.weight")), p("probe.hidden.bias")));
  ProbeOutputs out;
  out.logits = ad::add(ad::matmul(h, p("probe.out.weight")), p("probe.out.bias"));
  if (probe.task.boundary_head) out.boundary = ad::add(ad::matmul(h, p("probe.boundary.weight")), p("probe.boundary.bias"));
  return out;
}

// Rows of probe inputs with their targets. layers holds one matrix per
// probe input (see probe_forward).
struct ProbeData {
  std::vector<ad::Tensor<float>> layers;  // each [N, D]
  std::vector<std::int32_t> labels;       // single-label tasks
  std::vector<float> boundary;            // structure
  std::vector<float> tags;                // tagging, N x classes row-major

  std::size_t rows() const { return layers.empty() ? 0 : layers[0].rows(); }
};

inline ad::Var<float> probe_loss(ad::Tape<float>& tape, Probe& probe, const ProbeData& data,
                                 const std::vector<std::size_t>& rows, std::vector<ad::Var<float>> inputs = {}) {
  if (inputs.empty()) {
    for (const auto& layer : data.layers) {
      ad::Tensor<float> batch({rows.size(), layer.cols()});
      for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(layer.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * layer.cols()), layer.cols(),
                    batch.data.begin() + static_cast<std::ptrdiff_t>(i * layer.cols()));
      }
      inputs.push_back(tape.constant(std::move(batch)));
    }
  }
  auto out = probe_forward(tape, probe, inputs);
  if (probe.task.multi_label) {
    const std::size_t c = static_cast<std::size_t>(probe.task.classes);
    ad::Tensor<float> target({rows.size(), c});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(data.tags.begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c,
                  target.data.begin() + static_cast<std::ptrdiff_t>(i * c));
    }
    return ad::bce_with_logits(out.logits, target);
  }
  std::vector<std::int32_t> y(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) y[i] = data.labels[rows[i]];
  std::vector<std::uint8_t> all(rows.size(), 1);
  auto loss = ad::cross_entropy(out.logits, std::span<const std::int32_t>(y), std::span<const std::uint8_t>(all));
  if (out.boundary) {
    ad::Tensor<float> b({rows.size(), 1});
    for (std::size_t i = 0; i < rows.size(); ++i) b.data[i] = data.boundary[rows[i]];
    loss = ad::add(loss, ad::bce_with_logits(*out.boundary, b));
  }
  return loss;
}

struct ProbeOptions {
  double lr = 1e-3;
  int epochs = 100;
  int patience = 10;
  std::size_t batch_rows = 256;
  std::uint64_t seed = 1;
};

struct ProbeTrainReport {
  int epochs_run = 0;
  int best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  double final_train_loss = 0.0;
};

inline double full_loss(Probe& probe, const ProbeData& data) {
  std::vector<std::size_t> rows(data.rows());
  std::iota(rows.begin(), rows.end(), 0);
  ad::Tape<float> tape;
  return probe_loss(tape, probe, data, rows).value().data[0];
}

// Minibatch Adam on precomputed features. With validation data the best
// epoch (lowest validation loss) is kept and training stops after
// `patience` epochs without improvement.
inline ProbeTrainReport fit_probe(Probe& probe, const ProbeData& train, const ProbeData* val, const ProbeOptions& opt) {
  if (train.rows() == 0) throw ConfigError("probe training set is empty");
  ProbeTrainReport rep;
  ad::AdamState<float> adam;
  std::mt19937_64 rng(derive_seed(opt.seed, 0x666974));
  std::vector<std::size_t> order(train.rows());
  std::iota(order.begin(), order.end(), 0);
  ad::ParameterSet<float> best = probe.params;
  int since_best = 0;
  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_rows) {
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + opt.batch_rows)));
      probe.params.zero_grad();
      ad::Tape<float> tape;
      auto loss = probe_loss(tape, probe, train, rows);
      loss_sum += loss.value().data[0];
      ++batches;
      tape.backward(loss);
      ad::adam_step(probe.params, adam, opt.lr);
    }
    rep.epochs_run = epoch;
    rep.final_train_loss = loss_sum / static_cast<double>(batches);
    if (val && val->rows() > 0) {
      const double vl = full_loss(probe, *val);
      if (vl < rep.best_val_loss) {
        rep.best_val_loss = vl;
        rep.best_epoch = epoch;
        best = probe.params;
        since_best = 0;
      } else if (++since_best >= opt.patience) {
        break;
      }
    }
  }
  if (val && val->rows() > 0) probe.params = best;
  return rep;
}

// Probe inputs for one clip: the selected layer(s), aligned to the task grid
// (token-level) or pooled (sequence-level).
inline std::vector<ad::Tensor<float>> clip_inputs(const std::vector<ad::Tensor<float>>& layers, const TaskSpec& task,
                                                  const LayerChoice& choice, int token_rate) {
  std::vector<const ad::Tensor<float>*> picked;
  if (choice.mode == LayerChoice::Mode::kWeighted) {
    for (const auto& l : layers) picked.push_back(&l);
  } else if (choice.mode == LayerChoice::Mode::kLast) {
    picked.push_back(&layers.back());
  } else {
    if (choice.index >= static_cast<int>(layers.size())) throw ConfigError("probe layer index out of range");
    picked.push_back(&layers[static_cast<std::size_t>(choice.index)]);
  }
  std::vector<ad::Tensor<float>> out;
  for (const auto* l : picked) {
    if (task.sequence_level) {
      auto pooled = pool_sequence(*l);
      pooled.shape = {1, pooled.size()};
      out.push_back(std::move(pooled));
    } else {
      out.push_back(align_to_task(*l, token_rate, task.frame_ms));
    }
  }
  return out;
}

inline void append_rows(ProbeData& data, const std::vector<ad::Tensor<float>>& inputs, const ClipTargets& t) {
  if (data.layers.empty()) {
    for (const auto& x : inputs) data.layers.emplace_back(ad::Shape{0, x.cols()});
  }
  for (std::size_t l = 0; l < inputs.size(); ++l) {
    auto& dst = data.layers[l];
    dst.data.insert(dst.data.end(), inputs[l].data.begin(), inputs[l].data.end());
    dst.shape[0] += inputs[l].rows();
  }
  data.labels.insert(data.labels.end(), t.labels.begin(), t.labels.end());
  data.boundary.insert(data.boundary.end(), t.boundary.begin(), t.boundary.end());
  data.tags.insert(data.tags.end(), t.tags.begin(), t.tags.end());
}

inline ProbeData build_probe_data(const Backbone& b, const std::vector<TaskClip>& clips, const TaskSpec& task,
                                  const LayerChoice& choice) {
  ProbeData data;
  for (const auto& clip : clips) {
    const auto layers = encode_layers(b, normalized_frames(b, clip.audio));
    if (layers.back().rows() == 0) continue;
    const auto inputs = clip_inputs(layers, task, choice, b.encoder.token_rate);
    append_rows(data, inputs, make_targets(clip, task, inputs[0].rows()));
  }
  return data;
}

// Deterministic clip split: the last val_fraction of a seeded permutation
// becomes validation.
inline std::pair<std::vector<TaskClip>, std::vector<TaskClip>> split_clips(const std::vector<TaskClip>& clips,
                                                                          double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(clips.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x73706c6974));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = clips.size() > 1 ? static_cast<std::size_t>(std::floor(val_fraction * clips.size())) : 0;
  std::vector<TaskClip> train, val;
  for (std::size_t i = 0; i < order.size(); ++i) (i < order.size() - n_val ? train : val).push_back(clips[order[i]]);
  return {std::move(train), std::move(val)};
}

struct TrainProbeOptions {
  ProbeOptions fit;
  LayerChoice layer;
  int hidden = 512;
  double val_fraction = 0.2;
  bool fine_tune = false;
  double fine_tune_lr = 1e-5;
};

inline TrainProbeOptions probe_options_from(const RunConfig& c) {
  TrainProbeOptions o;
  o.fit.lr = c.probe.lr;
  o.fit.epochs = c.probe.epochs;
  o.fit.patience = c.probe.patience;
  o.fit.seed = c.probe.seed;
  o.layer = LayerChoice::parse(c.probe.layer);
  o.hidden = c.probe.hidden;
  o.val_fraction = c.probe.val_fraction;
  o.fine_tune = c.probe.fine_tune;
  o.fine_tune_lr = c.probe.fine_tune_lr;
  return o;
}

// Fine-tuning: backbone and probe are updated together, one clip per step.
// The backbone copy is stored in probe.tuned_backbone; the source is never
// modified.
inline ProbeTrainReport fine_tune_probe(Probe& probe, const Backbone& source, const std::vector<TaskClip>& clips,
                                        const TrainProbeOptions& opt) {
  Backbone b = source;
  struct Item {
    ad::Tensor<float> frames;
    ClipTargets targets;
    ad::Tensor<float> align;
  };
  std::vector<Item> items;
  for (const auto& clip : clips) {
    Item it;
    it.frames = normalized_frames(b, clip.audio);
    const std::size_t tokens = it.frames.rows();
    if (tokens == 0) continue;
    if (tokens > b.encoder.max_frames()) {
      throw ConfigError("fine-tuning needs clips no longer than the encoder input limit");
    }
    const std::size_t rows = probe.task.sequence_level ? 1 : task_frame_count(tokens, b.encoder.token_rate, probe.task.frame_ms);
    if (!probe.task.sequence_level) it.align = align_matrix(tokens, b.encoder.token_rate, probe.task.frame_ms);
    it.targets = make_targets(clip, probe.task, rows);
    items.push_back(std::move(it));
  }
  if (items.empty()) throw ConfigError("probe training set is empty");
  ProbeTrainReport rep;
  ad::AdamState<float> probe_adam, backbone_adam;
  std::mt19937_64 rng(derive_seed(opt.fit.seed, 0x66696e65));
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= opt.fit.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      const auto& it = items[idx];
      probe.params.zero_grad();
      b.params.zero_grad();
      ad::Tape<float> tape;
      auto states = encode(tape, b.encoder, b.params, tape.constant(it.frames));
      std::vector<ad::Var<float>> picked;
      if (probe.layer.mode == LayerChoice::Mode::kWeighted) {
        picked = states;
      } else if (probe.layer.mode == LayerChoice::Mode::kLast) {
        picked = {states.back()};
      } else {
        picked = {states.at(static_cast<std::size_t>(probe.layer.index))};
      }
      std::vector<ad::Var<float>> inputs;
      for (auto& s : picked) {
        if (probe.task.sequence_level) {
          inputs.push_back(ad::reshape(ad::mean(s, 0), {1, s.shape()[1]}));
        } else {
          inputs.push_back(ad::matmul(tape.constant(it.align), s));
        }
      }
      ProbeData single;
      single.labels = it.targets.labels;
      single.boundary = it.targets.boundary;
      single.tags = it.targets.tags;
      const std::size_t rows = inputs[0].shape()[0];
      std::vector<std::size_t> all(rows);
      std::iota(all.begin(), all.end(), 0);
      auto loss = probe_loss(tape, probe, single, all, inputs);
      loss_sum += loss.value().data[0];
      tape.backward(loss);
      ad::adam_step(probe.params, probe_adam, opt.fit.lr);
      ad::adam_step(b.params, backbone_adam, opt.fine_tune_lr);
    }
    rep.epochs_run = epoch;
    rep.final_train_loss = loss_sum / static_cast<double>(items.size());
  }
  probe.tuned_backbone = std::move(b);
  return rep;
}

inline Probe train_probe(const Backbone& backbone, const std::vector<TaskClip>& dataset, const TaskSpec& task,
                         const TrainProbeOptions& opt, ProbeTrainReport* report = nullptr) {
  if (dataset.empty()) throw ConfigError("probe dataset is empty");
  const int layers = backbone.encoder.layers + 1;
  const int inputs = opt.layer.mode == LayerChoice::Mode::kWeighted ? layers : 1;
  Probe probe = make_probe(task, opt.layer, backbone.encoder.d_model, inputs, opt.hidden, opt.fit.seed);
  ProbeTrainReport rep;
  if (opt.fine_tune) {
    rep = fine_tune_probe(probe, backbone, dataset, opt);
  } else {
    auto [train, val] = split_clips(dataset, opt.val_fraction, opt.fit.seed);
    const auto train_data = build_probe_data(backbone, train, task, opt.layer);
    const auto val_data = build_probe_data(backbone, val, task, opt.layer);
    ProbeOptions fit = opt.fit;
    if (task.sequence_level) fit.batch_rows = 32;
    rep = fit_probe(probe, train_data, val_data.rows() ? &val_data : nullptr, fit);
  }
  if (report) *report = rep;
  return probe;
}

// ---------------------------------------------------------------------------
// Decoding

// Local maxima (>= left neighbour, > right neighbour) at or above threshold,
// accepted greedily from the highest, keeping at least min_distance frames
// between accepted peaks. Returned ascending.
inline std::vector<std::size_t> pick_peaks(const std::vector<double>& act, double threshold, std::size_t min_distance) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < act.size(); ++i) {
    if (act[i] < threshold) continue;
    if (i > 0 && act[i] < act[i - 1]) continue;
    if (i + 1 < act.size() && !(act[i] > act[i + 1])) continue;
    cand.push_back(i);
  }
  std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return act[a] > act[b]; });
  std::vector<std::size_t> kept;
  for (std::size_t c : cand) {
    bool ok = true;
    for (std::size_t k : kept) {
      if ((c > k ? c - k : k - c) < min_distance) {
        ok = false;
        break;
      }
    }
    if (ok) kept.push_back(c);
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

// Consecutive equal frame classes merged into intervals; the last interval
// ends at `duration`.
inline IntervalAnnotation merge_frames(const std::vector<std::int32_t>& cls, double frame_ms, double duration,
                                       const std::function<std::string(std::int32_t)>& name) {
  IntervalAnnotation out;
  const double dt = frame_ms / 1000.0;
  for (std::size_t k = 0; k < cls.size();) {
    std::size_t j = k;
    while (j < cls.size() && cls[j] == cls[k]) ++j;
    const double start = static_cast<double>(k) * dt;
    const double end = j == cls.size() ? std::max(duration, start + 1e-6) : static_cast<double>(j) * dt;
    if (start < duration || out.empty()) out.push_back({start, std::min(end, std::max(duration, start + 1e-6)), name(cls[k])});
    k = j;
  }
  return out;
}

struct Prediction {
  std::string task;
  BeatAnnotation beats;
  IntervalAnnotation intervals;
  std::vector<double> boundaries;  // structure
  TagAnnotation tags;
  std::vector<std::vector<double>> probabilities;  // per task frame (or one row for sequence level)
};

inline std::vector<std::vector<double>> softmax_rows(const ad::Tensor<float>& logits) {
  std::vector<std::vector<double>> out(logits.rows(), std::vector<double>(logits.cols()));
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < logits.cols(); ++c) mx = std::max(mx, static_cast<double>(logits(r, c)));
    double s = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) s += out[r][c] = std::exp(logits(r, c) - mx);
    for (auto& v : out[r]) v /= s;
  }
  return out;
}

inline std::int32_t argmax_row(const std::vector<double>& p) {
  return static_cast<std::int32_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

inline Prediction predict_and_decode(Probe& probe, const Backbone& frozen, const AudioBuffer& audio) {
  const Backbone& b = probe.tuned_backbone ? *probe.tuned_backbone : frozen;
  const auto& task = probe.task;
  Prediction pred;
  pred.task = task.name;
  const double duration = audio.duration_seconds();
  const auto layers = encode_layers(b, normalized_frames(b, audio));
  if (layers.back().rows() == 0) {
    if (task.name == "chord" || task.name == "key") pred.intervals.push_back({0.0, std::max(duration, 1e-6), "none"});
    return pred;
  }
  const auto inputs = clip_inputs(layers, task, probe.layer, b.encoder.token_rate);
  ad::Tape<float> tape;
  std::vector<ad::Var<float>> vars;
  for (const auto& x : inputs) vars.push_back(tape.constant(x));
  auto out = probe_forward(tape, probe, vars);
  const auto& logits = out.logits.value();

  if (task.multi_label) {
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(logits(0, c))));
      const std::string tag(kSongTags[c]);
      pred.tags.scores[tag] = s;
      if (s >= kPeakThreshold) pred.tags.tags.push_back(tag);
    }
    pred.probabilities.push_back({});
    for (std::size_t c = 0; c < logits.cols(); ++c) pred.probabilities.back().push_back(pred.tags.scores[std::string(kSongTags[c])]);
    return pred;
  }
  pred.probabilities = softmax_rows(logits);
  const double dt = task.frame_ms / 1000.0;
  if (task.name == "beat") {
    std::vector<double> beat_act, down_act;
    for (const auto& p : pred.probabilities) {
      beat_act.push_back(p[1] + p[2]);
      down_act.push_back(p[2]);
    }
    const auto beats = pick_peaks(beat_act, kPeakThreshold, distance_frames(kBeatMinDistanceMs, task.frame_ms));
    const auto downs = pick_peaks(down_act, kPeakThreshold, distance_frames(kDownbeatMinDistanceMs, task.frame_ms));
    for (std::size_t k : beats) pred.beats.beats.push_back(static_cast<double>(k) * dt);
    // A downbeat snaps to a decoded beat within one frame; otherwise dropped.
    for (std::size_t k : downs) {
      for (std::size_t bk : beats) {
        if ((bk > k ? bk - k : k - bk) <= 1) {
          const double t = static_cast<double>(bk) * dt;
          if (pred.beats.downbeats.empty() || pred.beats.downbeats.back() < t) pred.beats.downbeats.push_back(t);
          break;
        }
      }
    }
    return pred;
  }
  if (task.name == "key") {
    std::vector<double> mean(static_cast<std::size_t>(task.classes), 0.0);
    for (const auto& p : pred.probabilities) {
      for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += p[c] / static_cast<double>(pred.probabilities.size());
    }
    pred.intervals.push_back({0.0, std::max(duration, 1e-6), to_string(majmin_from_class(argmax_row(mean)))});
    return pred;
  }
  std::vector<std::int32_t> cls;
  for (const auto& p : pred.probabilities) cls.push_back(argmax_row(p));
  if (task.name == "chord") {
    pred.intervals = merge_frames(cls, task.frame_ms, duration, [](std::int32_t c) { return to_string(majmin_from_class(c)); });
  } else {
    pred.intervals = merge_frames(cls, task.frame_ms, duration,
                                  [](std::int32_t c) { return std::string(kSectionLabels[static_cast<std::size_t>(c)]); });
    std::vector<double> act;
    for (float z : out.boundary->value().data) act.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(z))));
    for (std::size_t k : pick_peaks(act, kPeakThreshold, distance_frames(kBoundaryMinDistanceMs, task.frame_ms))) {
      pred.boundaries.push_back(static_cast<double>(k) * dt);
    }
  }
  return pred;
}

// Decoded structure boundaries sit next to the interval file.
inline std::filesystem::path boundary_path(const std::filesystem::path& intervals) {
  return intervals.string() + ".boundaries.json";
}

// Writes a prediction in the annotation format of its task.
inline void save_prediction(const std::filesystem::path& path, const Prediction& p) {
  if (p.task == "beat") {
    save_beats(path, p.beats);
  } else if (p.task == "tagging") {
    save_tags(path, p.tags);
  } else {
    save_intervals(path, p.intervals);
    if (p.task == "structure") write_json_file(boundary_path(path), nlohmann::json{{"boundaries", p.boundaries}});
  }
}

// ---------------------------------------------------------------------------
// Scoring

// Per-clip metrics averaged over clips; tagging is scored over the whole set.
inline EvalReport score_predictions(const TaskSpec& task, const std::vector<Prediction>& preds,
                                    const std::vector<TaskClip>& refs, const MetricConfig& mc = {}) {
  if (preds.size() != refs.size() || refs.empty()) throw std::invalid_argument("prediction/reference count mismatch");
  EvalReport r;
  r.task = task.name;
  r.config = mc.to_json();
  r.counts["clips"] = static_cast<std::int64_t>(refs.size());
  const double n = static_cast<double>(refs.size());
  if (task.name == "beat") {
    double fb = 0, fd = 0;
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const auto sb = match_events(preds[i].beats.beats, refs[i].beats.beats, mc.beat_tolerance, mc.hit_epsilon);
      fb += sb.f_measure;
      fd += match_events(preds[i].beats.downbeats, refs[i].beats.downbeats, mc.beat_tolerance, mc.hit_epsilon).f_measure;
      tp += static_cast<std::int64_t>(sb.tp);
      fp += static_cast<std::int64_t>(sb.fp);
      fn += static_cast<std::int64_t>(sb.fn);
    }
    r.metrics = {{"beat_f1", fb / n}, {"downbeat_f1", fd / n}};
    r.counts["tp"] = tp;
    r.counts["fp"] = fp;
    r.counts["fn"] = fn;
  } else if (task.name == "chord") {
    double acc = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) acc += chord_weighted_acc(preds[i].intervals, refs[i].intervals);
    r.metrics = {{"chord_acc", acc / n}};
  } else if (task.name == "key") {
    double s = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      s += key_weighted_score(dominant_label(preds[i].intervals), dominant_label(refs[i].intervals), mc);
    }
    r.metrics = {{"key_acc", s / n}};
  } else if (task.name == "structure") {
    double acc = 0, hr = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const double dur = total_duration(refs[i].intervals) > 0 ? refs[i].intervals.back().end : 0.0;
      const auto frames = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(dur / (task.frame_ms / 1000.0) - 1e-9)));
      const auto silence = static_cast<std::int32_t>(*section_index("silence"));
      const auto ref_cls = rasterize_intervals(refs[i].intervals, frames, task.frame_ms, section_class, silence);
      const auto est_cls = rasterize_intervals(preds[i].intervals, frames, task.frame_ms, section_class, silence);
      acc += frame_accuracy(est_cls, ref_cls);
      hr += match_events(preds[i].boundaries, interval_boundaries(refs[i].intervals), mc.boundary_window, mc.hit_epsilon).f_measure;
    }
    r.metrics = {{"structure_acc", acc / n}, {"hr5f", hr / n}};
  } else {
    std::vector<std::vector<double>> scores;
    std::vector<std::vector<int>> labels;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      std::vector<double> s;
      for (auto tag : kSongTags) {
        auto it = preds[i].tags.scores.find(std::string(tag));
        s.push_back(it == preds[i].tags.scores.end() ? 0.0 : it->second);
      }
      scores.push_back(std::move(s));
      const auto hot = multi_hot(refs[i].tags);
      labels.emplace_back(hot.begin(), hot.end());
    }
    std::vector<std::string> names(kSongTags.begin(), kSongTags.end());
    const auto ts = tagging_scores(scores, labels, names);
    r.metrics = {{"map", ts.map}, {"roc_auc", ts.roc_auc}};
    r.counts["ap_tags"] = static_cast<std::int64_t>(ts.ap_tags);
    r.counts["auc_tags"] = static_cast<std::int64_t>(ts.auc_tags);
    r.warnings = ts.warnings;
  }
  return r;
}

inline EvalReport evaluate_probe(Probe& probe, const Backbone& b, const std::vector<TaskClip>& test,
                                 std::vector<Prediction>* out_preds = nullptr) {
  std::vector<Prediction> preds;
  for (const auto& clip : test) preds.push_back(predict_and_decode(probe, b, clip.audio));
  auto report = score_predictions(probe.task, preds, test);
  if (out_preds) *out_preds = std::move(preds);
  return report;
}

// ---------------------------------------------------------------------------
// Probe files

inline void save_probe(const std::filesystem::path& path, const Probe& p) {
  ad::TensorContainer c;
  nlohmann::json order = nlohmann::json::array();
  for (const auto& prm : p.params) {
    c.tensors.emplace(prm.name, prm.value);
    order.push_back(prm.name);
  }
  nlohmann::json meta = {{"format", "mtmkit-probe"}, {"task", p.task.name},       {"layer", p.layer.str()},
                         {"feature_dim", p.feature_dim}, {"num_layers", p.num_layers}, {"hidden", p.hidden},
                         {"parameters", order}};
  if (p.tuned_backbone) {
    nlohmann::json border = nlohmann::json::array();
    for (const auto& prm : p.tuned_backbone->params) {
      c.tensors.emplace("backbone." + prm.name, prm.value);
      border.push_back(prm.name);
    }
    meta["backbone_parameters"] = border;
  }
  c.metadata = meta;
  ad::save_container(path, c);
}

// `base` supplies the frozen front end when the probe carries tuned weights.
inline Probe load_probe(const std::filesystem::path& path, const Backbone& base) {
  auto c = ad::load_container(path);
  try {
    const auto& m = c.metadata;
    if (m.value("format", "") != "mtmkit-probe") throw IoError("not a probe file: " + path.string());
    Probe p;
    p.task = task_spec(m.at("task").get<std::string>());
    p.layer = LayerChoice::parse(m.at("layer").get<std::string>());
    p.feature_dim = m.at("feature_dim").get<int>();
    p.num_layers = m.at("num_layers").get<int>();
    p.hidden = m.at("hidden").get<int>();
    for (const auto& n : m.at("parameters")) p.params.add(n.get<std::string>(), c.at(n.get<std::string>()));
    if (m.contains("backbone_parameters")) {
      Backbone b = base;
      b.params = {};
      for (const auto& n : m.at("backbone_parameters")) {
        b.params.add(n.get<std::string>(), c.at("backbone." + n.get<std::string>()));
      }
      p.tuned_backbone = std::move(b);
    }
    if (p.feature_dim != base.encoder.d_model) throw ConfigError("probe feature size does not match the backbone");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt probe file " + path.string() + ": " + e.what());
  }
}

}  // namespace mtm
