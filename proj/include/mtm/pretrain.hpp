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

// Masked token modeling. Each clip is turned into normalized log-mel frames
// and tokenized once with the frozen quantizer; training examples are random
// crops whose masked spans are replaced by Gaussian noise, and the loss is the
// cross-entropy of a linear head against the tokens at masked frames only.
//
// Every random choice of step s, batch slot b is seeded by
// derive_seed(run seed, s, b, purpose), so a resumed run replays the exact
// trajectory of an uninterrupted one.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mtm/ad/container.hpp"
#include "mtm/ad/ops.hpp"
#include "mtm/ad/optim.hpp"
#include "mtm/audio.hpp"
#include "mtm/config.hpp"
#include "mtm/corpus.hpp"
#include "mtm/dsp.hpp"
#include "mtm/encoder.hpp"
#include "mtm/manifest.hpp"
#include "mtm/quantizer.hpp"

namespace mtm {

// ---------------------------------------------------------------------------
// Masking

struct MaskPlan {
  std::size_t length = 0;
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // masked [start, end)
  std::vector<std::uint8_t> masked;

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (auto m : masked) n += m;
    return n;
  }
  double masked_fraction() const { return length ? static_cast<double>(masked_count()) / length : 0.0; }
};

inline std::size_t span_frames(double span_ms, int token_rate) {
  return static_cast<std::size_t>(std::max<long long>(1, std::llround(span_ms / 1000.0 * token_rate)));
}

// Partitions [0, T) into consecutive spans of round(span_ms * rate) frames
// (the last one may be shorter) and masks each independently with
// probability p.
inline MaskPlan plan_masks(std::size_t frames, int token_rate, double span_ms = 400.0, double p = 0.6,
                           std::uint64_t seed = 0) {
  if (frames < 1) throw ConfigError("plan_masks: T must be >= 1");
  if (p < 0 || p > 1) throw ConfigError("plan_masks: p must be in [0, 1]");
  const std::size_t span = span_frames(span_ms, token_rate);
  MaskPlan plan;
  plan.length = frames;
  plan.masked.assign(frames, 0);
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(p);
  for (std::size_t start = 0; start < frames; start += span) {
    const std::size_t end = std::min(frames, start + span);
    if (coin(rng)) {
      plan.spans.emplace_back(start, end);
      std::fill(plan.masked.begin() + static_cast<std::ptrdiff_t>(start),
                plan.masked.begin() + static_cast<std::ptrdiff_t>(end), 1);
    }
  }
  return plan;
}

// Masked rows become i.i.d. N(0, noise_std^2); other rows are copied.
template <class T>
ad::Tensor<T> apply_mask(const ad::Tensor<T>& frames, const MaskPlan& plan, std::uint64_t noise_seed,
                         double noise_std = 0.1) {
  if (frames.rank() != 2 || frames.rows() != plan.length) {
    throw ad::ShapeError("apply_mask: plan length does not match frame count");
  }
  ad::Tensor<T> out = frames;
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t d = frames.cols();
  for (std::size_t t = 0; t < plan.length; ++t) {
    if (!plan.masked[t]) continue;
    for (std::size_t k = 0; k < d; ++k) out(t, k) = static_cast<T>(noise_std * noise(rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus preparation

struct PreparedClip {
  std::string name;
  ad::Tensor<float> frames;  // normalized, [T, d]
  std::vector<std::int32_t> tokens;
};

// Instrumentation: receives ("tokenize", clip) and ("mask", clip) events in
// the order the pipeline performs them.
struct PretrainHooks {
  std::function<void(std::string_view, std::size_t)> on_event;
  void emit(std::string_view what, std::size_t clip) const {
    if (on_event) on_event(what, clip);
  }
};

inline std::vector<MelFrameSequence> load_mels(const FrontendConfig& fe, const std::vector<std::filesystem::path>& wavs) {
  std::vector<MelFrameSequence> out;
  out.reserve(wavs.size());
  for (const auto& w : wavs) out.push_back(compute_log_mel(load_wav(w), fe));
  return out;
}

inline Quantizer build_quantizer(const RunConfig& c) {
  return Quantizer::build(c.quantizer.seed, c.encoder.input_dim, c.quantizer.h, c.quantizer.n, c.quantizer.mode);
}

inline ad::Tensor<float> to_tensor(const MelFrameSequence& m) {
  ad::Tensor<float> t({m.num_frames, m.dim});
  for (std::size_t i = 0; i < m.data.size(); ++i) t.data[i] = static_cast<float>(m.data[i]);
  return t;
}

// Normalizes and tokenizes every clip. Tokens come from the clean frames.
inline std::vector<PreparedClip> prepare_clips(const std::vector<MelFrameSequence>& mels,
                                               const std::vector<std::string>& names, const Normalizer& norm,
                                               const Quantizer& q, const PretrainHooks& hooks = {}) {
  std::vector<PreparedClip> out;
  out.reserve(mels.size());
  for (std::size_t i = 0; i < mels.size(); ++i) {
    const auto normalized = norm.apply(mels[i]);
    PreparedClip clip;
    clip.name = i < names.size() ? names[i] : std::to_string(i);
    const auto ts = q.tokenize(normalized);
    hooks.emit("tokenize", i);
    clip.tokens.assign(ts.tokens.begin(), ts.tokens.end());
    clip.frames = to_tensor(normalized);
    out.push_back(std::move(clip));
  }
  return out;
}

struct Example {
  std::size_t clip = 0;
  std::size_t offset = 0;
  ad::Tensor<float> clean;
  ad::Tensor<float> input;  // masked
  std::vector<std::int32_t> targets;
  MaskPlan plan;
};

// Seed purposes for derive_seed(seed, step, slot, purpose).
enum SeedPurpose : std::uint64_t { kSeedClip = 1, kSeedOffset = 2, kSeedPlan = 3, kSeedNoise = 4, kSeedDropout = 5 };

inline Example make_example(const RunConfig& c, const std::vector<PreparedClip>& clips, std::uint64_t seed,
                            std::int64_t step, int slot, const PretrainHooks& hooks = {}) {
  if (clips.empty()) throw ConfigError("empty pretraining corpus");
  Example ex;
  const auto s = static_cast<std::uint64_t>(step);
  const auto b = static_cast<std::uint64_t>(slot);
  ex.clip = derive_seed(seed, s, b, kSeedClip) % clips.size();
  const auto& clip = clips[ex.clip];
  const std::size_t total = clip.frames.rows();
  if (total == 0) throw ConfigError("clip '" + clip.name + "' is shorter than one frame");
  const std::size_t len = std::min(total, c.encoder.max_frames());
  ex.offset = derive_seed(seed, s, b, kSeedOffset) % (total - len + 1);
  const std::size_t d = clip.frames.cols();
  ex.clean = ad::Tensor<float>({len, d});
  std::copy_n(clip.frames.data.begin() + static_cast<std::ptrdiff_t>(ex.offset * d), len * d, ex.clean.data.begin());
  ex.targets.assign(clip.tokens.begin() + static_cast<std::ptrdiff_t>(ex.offset),
                    clip.tokens.begin() + static_cast<std::ptrdiff_t>(ex.offset + len));
  ex.plan = plan_masks(len, c.encoder.token_rate, c.masking.span_ms, c.masking.p, derive_seed(seed, s, b, kSeedPlan));
  ex.input = apply_mask(ex.clean, ex.plan, derive_seed(seed, s, b, kSeedNoise), c.masking.noise_std);
  hooks.emit("mask", ex.clip);
  return ex;
}

// ---------------------------------------------------------------------------
// Model and loss

template <class T>
void add_prediction_head(ad::ParameterSet<T>& ps, int d_model, int n) {
  ps.add("head.weight", ad::Tensor<T>({static_cast<std::size_t>(d_model), static_cast<std::size_t>(n)}));
  ps.add("head.bias", ad::Tensor<T>({static_cast<std::size_t>(n)}));
}

template <class T = float>
ad::ParameterSet<T> init_model(const RunConfig& c) {
  auto ps = init_weights<T>(c.encoder, c.seed);
  add_prediction_head(ps, c.encoder.d_model, c.quantizer.n);
  return ps;
}

template <class T>
struct MaskedLoss {
  ad::Var<T> loss;  // invalid when nothing was masked
  std::size_t masked = 0;
  std::size_t frames = 0;
  std::size_t correct = 0;
};

// Per-position mean cross-entropy over all masked frames of the batch.
template <class T>
MaskedLoss<T> masked_loss(ad::Tape<T>& tape, const EncoderConfig& enc, ad::ParameterSet<T>& params,
                          const std::vector<Example>& batch, bool trainable = true, double dropout = 0.0,
                          std::uint64_t dropout_seed = 0) {
  MaskedLoss<T> out;
  for (const auto& ex : batch) {
    out.masked += ex.plan.masked_count();
    out.frames += ex.plan.length;
  }
  if (out.masked == 0) return out;
  std::vector<ad::Var<T>> parts;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = batch[b];
    const std::size_t count = ex.plan.masked_count();
    if (count == 0) continue;
    ad::Var<T> input;
    if constexpr (std::is_same_v<T, float>) {
      input = tape.constant(ex.input);
    } else {
      input = tape.constant(ex.input.template cast<T>());
    }
    auto states = encode(tape, enc, params, input, EncodeOptions{std::nullopt, trainable});
    std::vector<std::int32_t> rows, targets;
    for (std::size_t t = 0; t < ex.plan.length; ++t) {
      if (ex.plan.masked[t]) {
        rows.push_back(static_cast<std::int32_t>(t));
        targets.push_back(ex.targets[t]);
      }
    }
    auto h = ad::embedding_lookup(states.back(), std::span<const std::int32_t>(rows));
    if (dropout > 0) h = ad::dropout(h, dropout, derive_seed(dropout_seed, b));
    auto logits = ad::add(ad::matmul(h, tape.parameter(params["head.weight"], trainable)),
                          tape.parameter(params["head.bias"], trainable));
    const auto& lv = logits.value();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto row = lv.row(r);
      const auto best = std::max_element(row.begin(), row.end()) - row.begin();
      out.correct += best == targets[r];
    }
    std::vector<std::uint8_t> all(rows.size(), 1);
    auto ce = ad::cross_entropy(logits, std::span<const std::int32_t>(targets), std::span<const std::uint8_t>(all));
    parts.push_back(ad::scale(ce, static_cast<T>(static_cast<double>(count) / static_cast<double>(out.masked))));
  }
  out.loss = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out.loss = ad::add(out.loss, parts[i]);
  return out;
}

// Sets the head bias to the smoothed log unigram frequency of the corpus
// tokens. With a zero bias the encoder first learns the prior as a constant
// offset in its residual stream, and at desk scale the deeper layers then
// stop tracking the input.
template <class T>
void init_head_bias_to_prior(ad::ParameterSet<T>& ps, const std::vector<PreparedClip>& clips, int n,
                             double pseudo_count = 0.01) {
  std::vector<double> counts(static_cast<std::size_t>(n), pseudo_count);
  double total = pseudo_count * n;
  for (const auto& c : clips) {
    for (auto t : c.tokens) {
      counts[static_cast<std::size_t>(t)] += 1.0;
      total += 1.0;
    }
  }
  auto& bias = ps["head.bias"].value;
  for (std::size_t i = 0; i < counts.size(); ++i) bias.data[i] = static_cast<T>(std::log(counts[i] / total));
}

// ---------------------------------------------------------------------------
// Checkpoint

struct Checkpoint {
  RunConfig config;
  std::uint64_t fingerprint = 0;
  std::int64_t step = 0;
  ad::ParameterSet<float> params;  // encoder + prediction head
  std::optional<Quantizer> quantizer;
  Normalizer normalizer;
  ad::AdamState<float> adam;
};

inline constexpr const char* kCheckpointFormat = "mtmkit-checkpoint";

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (!ck.quantizer) throw ConfigError("checkpoint has no quantizer");
  ad::TensorContainer c;
  nlohmann::json order = nlohmann::json::array();
  for (const auto& p : ck.params) {
    c.tensors.emplace(p.name, p.value);
    order.push_back(p.name);
    if (auto it = ck.adam.m.find(p.name); it != ck.adam.m.end()) c.tensors.emplace("adam.m." + p.name, it->second);
    if (auto it = ck.adam.v.find(p.name); it != ck.adam.v.end()) c.tensors.emplace("adam.v." + p.name, it->second);
  }
  const auto& q = *ck.quantizer;
  const auto h = static_cast<std::size_t>(q.latent_dim()), d = static_cast<std::size_t>(q.input_dim()),
             n = static_cast<std::size_t>(q.codebook_size());
  c.tensors.emplace("quantizer.projection", ad::Tensor<float>({h, d}, q.projection()));
  c.tensors.emplace("quantizer.codebook", ad::Tensor<float>({n, h}, q.codebook()));
  c.metadata = {
      {"format", kCheckpointFormat},
      {"config", serialize_config(ck.config, detail::pretrain_field)},
      {"fingerprint", fingerprint_hex(ck.fingerprint)},
      {"step", ck.step},
      {"adam_step", ck.adam.step},
      {"parameters", order},
      {"encoder", ck.config.encoder.to_json()},
      {"quantizer", {{"seed", q.seed()}, {"mode", to_string(q.mode())}, {"n", q.codebook_size()},
                     {"h", q.latent_dim()}, {"d", q.input_dim()}}},
      {"normalizer", {{"mean", ck.normalizer.mean}, {"std", ck.normalizer.std}}},
  };
  ad::save_container(path, c);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto c = ad::load_container(path);
  try {
    const auto& m = c.metadata;
    if (m.value("format", "") != kCheckpointFormat) throw IoError("not a checkpoint: " + path.string());
    Checkpoint ck;
    ck.config = parse_config(m.at("config").get<std::string>());
    ck.config.validate();
    ck.fingerprint = pretrain_fingerprint(ck.config);
    if (fingerprint_hex(ck.fingerprint) != m.at("fingerprint").get<std::string>()) {
      throw IoError("checkpoint fingerprint does not match its embedded config: " + path.string());
    }
    ck.step = m.at("step").get<std::int64_t>();
    ck.adam.step = m.at("adam_step").get<std::int64_t>();
    for (const auto& name : m.at("parameters")) {
      const auto key = name.get<std::string>();
      ck.params.add(key, c.at(key));
      if (c.tensors.count("adam.m." + key)) ck.adam.m[key] = c.at("adam.m." + key);
      if (c.tensors.count("adam.v." + key)) ck.adam.v[key] = c.at("adam.v." + key);
    }
    const auto& qm = m.at("quantizer");
    ck.quantizer.emplace(qm.at("d").get<int>(), qm.at("h").get<int>(), qm.at("n").get<int>(),
                         c.at("quantizer.projection").data, c.at("quantizer.codebook").data,
                         parse_lookup_mode(qm.at("mode").get<std::string>()), qm.at("seed").get<std::uint64_t>());
    ck.normalizer.mean = m.at("normalizer").at("mean").get<std::vector<double>>();
    ck.normalizer.std = m.at("normalizer").at("std").get<std::vector<double>>();
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint metadata in " + path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IoError("checkpoint " + path.string() + " holds an invalid config: " + e.what());
  } catch (const std::out_of_range& e) {
    throw IoError("checkpoint " + path.string() + " is missing a tensor: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training

struct StepLog {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double masked_frac = 0.0;
  double top1 = 0.0;
  double utilization = 0.0;
  bool skipped = false;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"step", step}, {"loss", loss}, {"lr", lr}, {"masked_frac", masked_frac},
                        {"top1", top1}, {"utilization", utilization}};
    if (skipped) j["skipped"] = true;
    return j;
  }
  static StepLog from_json(const nlohmann::json& j) {
    StepLog s;
    s.step = j.at("step").get<std::int64_t>();
    s.loss = j.at("loss").get<double>();
    s.lr = j.at("lr").get<double>();
    s.masked_frac = j.at("masked_frac").get<double>();
    s.top1 = j.at("top1").get<double>();
    s.utilization = j.at("utilization").get<double>();
    s.skipped = j.value("skipped", false);
    return s;
  }
};

// Builds the batch of `step`, runs forward/backward and one Adam update.
// A batch without masked frames is reported as skipped and leaves the
// weights untouched.
inline StepLog train_step(Checkpoint& ck, const std::vector<PreparedClip>& clips, std::int64_t step,
                          double utilization = 0.0, const PretrainHooks& hooks = {}) {
  const auto& c = ck.config;
  std::vector<Example> batch;
  for (int b = 0; b < c.optimizer.batch; ++b) batch.push_back(make_example(c, clips, c.seed, step, b, hooks));
  StepLog log;
  log.step = step;
  log.lr = ad::warmup_lr(c.optimizer.lr, step, c.optimizer.warmup);
  log.utilization = utilization;
  ck.params.zero_grad();
  ad::Tape<float> tape;
  auto ml = masked_loss(tape, c.encoder, ck.params, batch, true, c.optimizer.dropout,
                        derive_seed(c.seed, static_cast<std::uint64_t>(step), 0, kSeedDropout));
  log.masked_frac = ml.frames ? static_cast<double>(ml.masked) / static_cast<double>(ml.frames) : 0.0;
  ck.step = step;
  if (ml.masked == 0) {
    log.skipped = true;
    return log;
  }
  log.loss = ml.loss.value().data[0];
  log.top1 = static_cast<double>(ml.correct) / static_cast<double>(ml.masked);
  if (!std::isfinite(log.loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
  tape.backward(ml.loss);
  ad::adam_step(ck.params, ck.adam, log.lr);
  return log;
}

struct MaskedEval {
  double loss = 0.0;
  double top1 = 0.0;
  std::size_t masked = 0;
};

// Held-out masked prediction: `batches` seeded batches drawn from `clips`.
inline MaskedEval evaluate_masked(Checkpoint& ck, const std::vector<PreparedClip>& clips, std::uint64_t seed,
                                  int batches) {
  MaskedEval out;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (int i = 0; i < batches; ++i) {
    std::vector<Example> batch;
    for (int b = 0; b < ck.config.optimizer.batch; ++b) batch.push_back(make_example(ck.config, clips, seed, i, b));
    ad::Tape<float> tape;
    auto ml = masked_loss(tape, ck.config.encoder, ck.params, batch, false);
    if (ml.masked == 0) continue;
    loss_sum += static_cast<double>(ml.loss.value().data[0]) * static_cast<double>(ml.masked);
    correct += ml.correct;
    out.masked += ml.masked;
  }
  if (out.masked) {
    out.loss = loss_sum / static_cast<double>(out.masked);
    out.top1 = static_cast<double>(correct) / static_cast<double>(out.masked);
  }
  return out;
}

struct PretrainOptions {
  std::filesystem::path corpus;
  std::filesystem::path out_dir;
  bool resume = false;
  std::optional<std::int64_t> stop_after;  // stop (and checkpoint) after this step
  PretrainHooks hooks;
  std::function<void(const StepLog&)> on_step;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<StepLog> log;
  std::filesystem::path checkpoint_path;
};

inline std::filesystem::path checkpoint_file(const std::filesystem::path& out_dir) {
  return out_dir / "checkpoint.mtmc";
}
inline std::filesystem::path log_file(const std::filesystem::path& out_dir) { return out_dir / "train_log.jsonl"; }

inline std::vector<StepLog> read_train_log(const std::filesystem::path& path) {
  std::vector<StepLog> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(StepLog::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("corrupt training log " + path.string() + ": " + e.what());
    }
  }
  return out;
}

inline void write_train_log(const std::filesystem::path& path, const std::vector<StepLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write training log: " + path.string());
  for (const auto& s : log) out << s.to_json().dump() << "\n";
}

inline std::vector<std::string> stem_names(const std::vector<std::filesystem::path>& wavs) {
  std::vector<std::string> names;
  for (const auto& w : wavs) names.push_back(w.stem().string());
  return names;
}

// Full loop: load corpus -> mel -> fit normalizer -> tokenize -> train,
// checkpointing every optimizer.checkpoint_every steps and at the end.
inline PretrainResult pretrain(const RunConfig& cfg, const PretrainOptions& opt) {
  cfg.validate();
  Stopwatch watch;
  const auto wavs = list_wavs(opt.corpus);
  if (wavs.empty()) throw IoError("no .wav files in corpus " + opt.corpus.string());
  std::filesystem::create_directories(opt.out_dir);
  const auto ck_path = checkpoint_file(opt.out_dir);
  const auto fe = cfg.frontend_for_model();
  const auto mels = load_mels(fe, wavs);

  PretrainResult res;
  Checkpoint& ck = res.checkpoint;
  if (opt.resume && std::filesystem::exists(ck_path)) {
    ck = load_checkpoint(ck_path);
    if (ck.fingerprint != pretrain_fingerprint(cfg)) {
      throw ConfigError("cannot resume: checkpoint fingerprint " + fingerprint_hex(ck.fingerprint) +
                        " does not match config fingerprint " + fingerprint_hex(pretrain_fingerprint(cfg)));
    }
    ck.config = cfg;
    for (auto& s : read_train_log(log_file(opt.out_dir))) {
      if (s.step <= ck.step) res.log.push_back(s);
    }
  } else {
    ck.config = cfg;
    ck.fingerprint = pretrain_fingerprint(cfg);
    ck.normalizer = fit_normalizer(mels);
    ck.quantizer.emplace(build_quantizer(cfg));
    ck.params = init_model<float>(cfg);
  }
  const auto clips = prepare_clips(mels, stem_names(wavs), ck.normalizer, *ck.quantizer, opt.hooks);
  if (ck.step == 0) init_head_bias_to_prior(ck.params, clips, cfg.quantizer.n);
  std::vector<std::uint32_t> all_tokens;
  for (const auto& c : clips) all_tokens.insert(all_tokens.end(), c.tokens.begin(), c.tokens.end());
  const double used = utilization(all_tokens, cfg.quantizer.n).used_fraction;

  auto save = [&]() {
    save_checkpoint(ck_path, ck);
    write_train_log(log_file(opt.out_dir), res.log);
    ManifestInfo info{"pretrain", &cfg, watch.seconds(), {{"step", ck.step}, {"corpus_clips", wavs.size()}}};
    write_manifest(ck_path, info);
    write_manifest(log_file(opt.out_dir), info);
  };

  const std::int64_t last = opt.stop_after ? std::min(*opt.stop_after, cfg.optimizer.steps) : cfg.optimizer.steps;
  for (std::int64_t step = ck.step + 1; step <= last; ++step) {
    auto entry = train_step(ck, clips, step, used, opt.hooks);
    res.log.push_back(entry);
    if (opt.on_step) opt.on_step(entry);
    if (cfg.optimizer.checkpoint_every > 0 && step % cfg.optimizer.checkpoint_every == 0 && step != last) save();
  }
  save();
  res.checkpoint_path = ck_path;
  return res;
}

// Mel -> normalize -> tokenize for a list of files with a checkpoint's
// frozen front end.
inline std::vector<PreparedClip> prepare_with_checkpoint(const Checkpoint& ck,
                                                         const std::vector<std::filesystem::path>& wavs) {
  return prepare_clips(load_mels(ck.config.frontend_for_model(), wavs), stem_names(wavs), ck.normalizer,
                       *ck.quantizer);
}

}  // namespace mtm
