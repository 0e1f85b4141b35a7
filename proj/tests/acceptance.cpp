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

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Pass criterion numbers as arguments to run a subset
// (criterion 7 pretrains on its own when 6 is not selected).
//
// Environment:
//   MTM_ACCEPT_WORK  keep artifacts in this directory instead of a temp dir

#include <sys/wait.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "mtm/ablation.hpp"
#include "mtm/ad/grad_check.hpp"
#include "mtm/corpus.hpp"
#include "mtm/metrics.hpp"
#include "mtm/pretrain.hpp"
#include "mtm/probing.hpp"
#include "mtm/quantizer.hpp"
#include "oracles.hpp"

#ifndef MTM_CLI_PATH
#error "MTM_CLI_PATH must point at the mtm binary"
#endif
#ifndef MTM_SOURCE_DIR
#error "MTM_SOURCE_DIR must point at the source tree"
#endif

namespace fs = std::filesystem;
using namespace mtm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

fs::path g_work;

fs::path source_config(const std::string& name) { return fs::path(MTM_SOURCE_DIR) / "configs" / name; }

int run_cli(const std::string& args, std::string* out = nullptr) {
  const std::string cmd = std::string(MTM_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return -1;
  std::string text;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) text.append(buf.data(), n);
  const int raw = ::pclose(pipe);
  if (out) *out = text;
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::string quoted(const fs::path& p) { return "'" + p.string() + "'"; }

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

ad::Tensor<double> randn(ad::Shape s, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  ad::Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = g(rng);
  return t;
}

// ---------------------------------------------------------------------------
// 1. Autodiff correctness

constexpr double kGradTol = 1e-4;

ad::Var<double> project(ad::Var<double> y) { return ad::sum(ad::mul(y, y.tape->constant(randn(y.shape(), 99)))); }

Outcome criterion_autodiff() {
  using ad::Tape;
  using ad::Var;
  using Fn = std::function<Var<double>(Tape<double>&, Var<double>)>;
  std::vector<std::pair<std::string, std::pair<ad::Tensor<double>, Fn>>> cases;
  const auto a = randn({3, 4}, 1), b = randn({4, 5}, 2), c = randn({3, 4}, 3), row = randn({4}, 4);
  const auto x = randn({7, 3}, 5), w = randn({5, 3}, 6), bias = randn({3}, 7), g = randn({4}, 8);
  const std::vector<std::int32_t> ids = {2, 0, 2, 1}, tg = {0, 3, 1};
  const std::vector<std::uint8_t> mk = {1, 0, 1};
  ad::Tensor<double> bce_y({3, 4});
  for (std::size_t i = 0; i < bce_y.size(); ++i) bce_y.data[i] = double(i % 3 == 0);
  const ad::Tensor<double> s({1}, {0.7});
  auto add = [&](const std::string& name, const ad::Tensor<double>& at, Fn f) { cases.push_back({name, {at, f}}); };
  add("matmul", a, [&](Tape<double>& t, Var<double> v) { return project(ad::matmul(v, t.constant(b))); });
  add("transpose", a, [](Tape<double>&, Var<double> v) { return project(ad::transpose(v)); });
  add("reshape", a, [](Tape<double>&, Var<double> v) { return project(ad::reshape(v, {2, 6})); });
  add("slice", a, [](Tape<double>&, Var<double> v) { return project(ad::slice(v, 1, 1, 3)); });
  add("concat", a, [&](Tape<double>& t, Var<double> v) { return project(ad::concat<double>({v, t.constant(c)}, 0)); });
  add("add", row, [&](Tape<double>& t, Var<double> v) { return project(ad::add(t.constant(a), v)); });
  add("sub", row, [&](Tape<double>& t, Var<double> v) { return project(ad::sub(t.constant(a), v)); });
  add("mul", a, [&](Tape<double>& t, Var<double> v) { return project(ad::mul(v, t.constant(c))); });
  add("scale", a, [](Tape<double>&, Var<double> v) { return project(ad::scale(v, 2.5)); });
  add("mul_scalar", s, [&](Tape<double>& t, Var<double> v) { return project(ad::mul_scalar(t.constant(a), v)); });
  add("sigmoid", a, [](Tape<double>&, Var<double> v) { return project(ad::sigmoid(v)); });
  add("tanh", a, [](Tape<double>&, Var<double> v) { return project(ad::tanh(v)); });
  add("relu", a, [](Tape<double>&, Var<double> v) { return project(ad::relu(v)); });
  add("gelu", a, [](Tape<double>&, Var<double> v) { return project(ad::gelu(v)); });
  add("swish", a, [](Tape<double>&, Var<double> v) { return project(ad::swish(v)); });
  add("glu", a, [](Tape<double>&, Var<double> v) { return project(ad::glu(v)); });
  add("softmax", a, [](Tape<double>&, Var<double> v) { return project(ad::softmax(v, 1)); });
  add("layer_norm", a, [&](Tape<double>& t, Var<double> v) {
    return project(ad::layer_norm(v, t.constant(g), t.constant(row)));
  });
  add("layer_norm.gain", g, [&](Tape<double>& t, Var<double> v) {
    return project(ad::layer_norm(t.constant(a), v, t.constant(row)));
  });
  add("mean", a, [](Tape<double>&, Var<double> v) { return project(ad::mean(v, 0)); });
  add("sum", a, [](Tape<double>&, Var<double> v) { return ad::sum(ad::mul(v, v)); });
  add("conv1d_depthwise", x, [&](Tape<double>& t, Var<double> v) {
    return project(ad::conv1d_depthwise(v, t.constant(w), t.constant(bias)));
  });
  add("conv1d_depthwise.weight", w, [&](Tape<double>& t, Var<double> v) {
    return project(ad::conv1d_depthwise(t.constant(x), v, t.constant(bias)));
  });
  add("embedding_lookup", a, [&](Tape<double>&, Var<double> v) {
    return project(ad::embedding_lookup(v, std::span<const std::int32_t>(ids)));
  });
  add("dropout", a, [](Tape<double>&, Var<double> v) { return project(ad::dropout(v, 0.3, 77)); });
  add("cross_entropy", a, [&](Tape<double>&, Var<double> v) {
    return ad::cross_entropy(v, std::span<const std::int32_t>(tg), std::span<const std::uint8_t>(mk));
  });
  add("bce_with_logits", a, [&](Tape<double>&, Var<double> v) { return ad::bce_with_logits(v, bce_y); });

  Stopwatch watch;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, item] : cases) {
    const double e = ad::grad_check(item.second, item.first);
    if (e > worst) {
      worst = e;
      worst_name = name;
    }
  }

  // Full desk encoder loss in double: desk widths, a short input, masked
  // cross entropy over the full codebook. The head is random because a zero
  // head passes no gradient to the encoder.
  double enc_worst = 0.0, bk_norm = 0.0;
  std::string enc_worst_name;
  std::size_t checked = 0;
  for (auto kind : {EncoderKind::kConformer, EncoderKind::kBert}) {
    const RunConfig desk = load_config(source_config("desk.cfg"));
    EncoderConfig ec = desk.encoder;
    ec.kind = kind;
    auto ps = init_weights<double>(ec, 21);
    std::mt19937_64 rng(22);
    std::normal_distribution<double> jitter(0.0, 0.1);
    for (auto& p : ps) {
      if (p.name.find("norm") != std::string::npos || p.name.find("rel_bias") != std::string::npos ||
          p.name.back() == 'b') {
        for (auto& v : p.value.data) v += jitter(rng);
      }
    }
    const std::size_t len = 12;
    const auto frames = randn({len, std::size_t(ec.input_dim)}, 23);
    const auto head = randn({std::size_t(ec.d_model), std::size_t(desk.quantizer.n)}, 24, 0.1);
    std::vector<std::int32_t> targets(len);
    std::vector<std::uint8_t> mask(len);
    for (std::size_t i = 0; i < len; ++i) {
      targets[i] = std::int32_t(rng() % std::uint64_t(desk.quantizer.n));
      mask[i] = std::uint8_t(i % 3 != 1);
    }
    auto loss = [&](ad::Tape<double>& t) {
      auto states = encode(t, ec, ps, t.constant(frames));
      return ad::cross_entropy(ad::matmul(states.back(), t.constant(head)), std::span<const std::int32_t>(targets),
                               std::span<const std::uint8_t>(mask));
    };
    for (const auto& r : ad::grad_check_parameters(loss, ps, 3, 25)) {
      checked += r.checked;
      if (r.name.ends_with("attn.bk")) continue;
      if (r.max_rel_error > enc_worst) {
        enc_worst = r.max_rel_error;
        enc_worst_name = to_string(kind) + ":" + r.name;
      }
    }
    // Softmax is invariant to the key bias, so its exact gradient is zero and
    // a relative error is undefined. Check the magnitude instead.
    for (const auto& p : ps) {
      if (p.name.ends_with("attn.bk")) {
        for (double v : p.grad.data) bk_norm = std::max(bk_norm, std::abs(v));
      }
    }
  }
  const double secs = watch.seconds();
  Outcome o;
  o.pass = worst < kGradTol && enc_worst < kGradTol && bk_norm < 1e-10 && secs < 300.0;
  o.detail = std::to_string(cases.size()) + " primitives max rel " + fmt(worst) + " (" + worst_name +
             "); desk encoder loss max rel " + fmt(enc_worst) + " (" + enc_worst_name + ") over " +
             std::to_string(checked) + " coordinates; key-bias |grad| " + fmt(bk_norm, 2) + "; " + fmt(secs, 3) +
             " s (< 300)";
  return o;
}

// ---------------------------------------------------------------------------
// 2. Quantizer fidelity

MelFrameSequence frames_of(const std::vector<double>& flat, std::size_t dim) {
  MelFrameSequence m;
  m.dim = dim;
  m.num_frames = flat.size() / dim;
  m.frame_rate = 25;
  m.data = flat;
  return m;
}

Outcome criterion_quantizer() {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  std::size_t frames = 0, mismatches = 0;
  for (auto mode : {LookupMode::kNearestNormalized, LookupMode::kNormDifference}) {
    for (int trial = 0; trial < 50; ++trial) {
      const int d = 2 + int(rng() % 7), h = 1 + int(rng() % 8), n = 4 + int(rng() % 61);
      const auto q = Quantizer::build(rng(), d, h, n, mode);
      std::vector<double> flat(20 * std::size_t(d));
      for (auto& v : flat) v = g(rng);
      const auto toks = q.tokenize(frames_of(flat, std::size_t(d))).tokens;
      for (std::size_t i = 0; i < 20; ++i) {
        const std::vector<double> x(flat.begin() + long(i) * d, flat.begin() + long(i + 1) * d);
        mismatches += toks[i] != oracle::quantize(q.projection(), q.codebook(), d, h, n, x,
                                                  mode == LookupMode::kNearestNormalized);
        ++frames;
      }
    }
  }
  std::size_t scale_breaks = 0;
  const auto q = Quantizer::build(5, 8, 4, 64);
  std::vector<double> flat(1000 * 8);
  for (auto& v : flat) v = g(rng);
  const auto base = q.tokenize(frames_of(flat, 8)).tokens;
  for (double alpha : {0.1, 1.0, 10.0}) {
    auto scaled = flat;
    for (auto& v : scaled) v *= alpha;
    const auto t = q.tokenize(frames_of(scaled, 8)).tokens;
    for (std::size_t i = 0; i < t.size(); ++i) scale_breaks += t[i] != base[i];
  }
  Outcome o;
  o.pass = frames == 2000 && mismatches == 0 && scale_breaks == 0;
  o.detail = std::to_string(frames) + " frames over both modes, " + std::to_string(mismatches) +
             " oracle mismatches; scale invariance alpha in {0.1, 1, 10}: " + std::to_string(scale_breaks) +
             " changed tokens";
  return o;
}

// ---------------------------------------------------------------------------
// 3. Utilization with and without centered inputs

Outcome criterion_utilization() {
  constexpr std::size_t kFrames = 100000, kDim = 128;
  bool pass = true;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::normal_distribution<double> g;
    std::vector<double> flat(kFrames * kDim);
    for (auto& v : flat) v = g(rng);
    const auto q = Quantizer::build(seed, kDim, 16, 8192);
    const auto u = utilization(q.tokenize(frames_of(flat, kDim)).tokens, 8192).used_fraction;
    for (auto& v : flat) v += 10.0;
    const auto us = utilization(q.tokenize(frames_of(flat, kDim)).tokens, 8192).used_fraction;
    pass &= u >= 0.8 && us < u;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + " " + fmt(u) +
              " vs shifted " + fmt(us);
  }
  return {pass, detail + " (need >= 0.8 and strictly lower when shifted)"};
}

// ---------------------------------------------------------------------------
// Shared synthetic corpus for 4, 6 and 7

void synth_songs(const fs::path& dir, int count, double seconds, std::uint64_t base_seed) {
  if (fs::exists(dir) && static_cast<int>(list_wavs(dir).size()) == count) return;
  fs::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "song%04d", i);
    save_song(dir / (std::string(stem) + ".wav"),
              synth_song({seconds, kModelSampleRate, kSynthNoiseStd}, derive_seed(base_seed, std::uint64_t(i))));
  }
}

RunConfig desk_config() {
  RunConfig c = load_config(source_config("desk.cfg"));
  c.paths = {};
  return c;
}

fs::path pretrain_corpus() {
  const auto dir = g_work / "corpus";
  synth_songs(dir, 200, 10.0, 0xc0a);
  return dir;
}

// ---------------------------------------------------------------------------
// 4. Initial loss with a zero head

Outcome criterion_initial_loss() {
  const RunConfig c = desk_config();
  auto wavs = list_wavs(pretrain_corpus());
  wavs.resize(8);
  const auto mels = load_mels(c.frontend_for_model(), wavs);
  const auto clips = prepare_clips(mels, stem_names(wavs), fit_normalizer(mels), build_quantizer(c));
  auto ps = init_model<float>(c);
  double worst = 0.0, first = 0.0;
  for (std::int64_t step = 1; step <= 5; ++step) {
    std::vector<Example> batch;
    for (int b = 0; b < c.optimizer.batch; ++b) batch.push_back(make_example(c, clips, c.seed, step, b));
    ad::Tape<float> tape;
    const auto ml = masked_loss(tape, c.encoder, ps, batch, false);
    if (ml.masked == 0) continue;
    const double loss = ml.loss.value().data[0];
    if (first == 0.0) first = loss;
    worst = std::max(worst, std::abs(loss - std::log(8192.0)));
  }
  return {worst <= 1e-5, "loss " + fmt(first, 10) + " vs ln 8192 = " + fmt(std::log(8192.0), 10) +
                             ", max |diff| over 5 batches " + fmt(worst, 3) + " (<= 1e-5)"};
}

// ---------------------------------------------------------------------------
// 5. Masking statistics

Outcome criterion_masking() {
  const std::size_t span = span_frames(400.0, 25);
  double total = 0.0;
  std::size_t bad_spans = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto plan = plan_masks(750, 25, 400.0, 0.6, seed);
    total += plan.masked_fraction();
    for (const auto& [b, e] : plan.spans) {
      const bool tail = e == plan.length;
      if (e - b != span && !(tail && e - b < span)) ++bad_spans;
    }
  }
  const double mean = total / 1000.0;
  return {std::abs(mean - 0.6) <= 0.02 && span == 10 && bad_spans == 0,
          "mean masked fraction " + fmt(mean) + " (0.6 +- 0.02); span " + std::to_string(span) + " frames, " +
              std::to_string(bad_spans) + " spans of another length"};
}

// ---------------------------------------------------------------------------
// 6. Desk pretraining signal

struct DeskRun {
  Checkpoint checkpoint;
  std::vector<StepLog> log;
  double seconds = 0.0;
};

std::optional<DeskRun> g_desk;

const DeskRun& desk_run() {
  if (g_desk) return *g_desk;
  Stopwatch watch;
  const RunConfig c = desk_config();
  PretrainOptions po;
  po.corpus = pretrain_corpus();
  po.out_dir = g_work / "desk";
  po.on_step = [](const StepLog& s) {
    if (s.step % 100 == 0) std::cerr << "  [desk] step " << s.step << " loss " << s.loss << "\n";
  };
  auto res = pretrain(c, po);
  g_desk = DeskRun{std::move(res.checkpoint), std::move(res.log), watch.seconds()};
  return *g_desk;
}

Outcome criterion_pretraining() {
  const auto& run = desk_run();
  const auto& log = run.log;
  if (log.size() < 200) return {false, "training log too short"};
  // Initial: first logged step (zero head). Final: mean of the last 100 steps.
  const double initial = log.front().loss;
  double final_loss = 0.0;
  for (std::size_t i = log.size() - 100; i < log.size(); ++i) final_loss += log[i].loss;
  final_loss /= 100.0;

  const auto held = g_work / "heldout";
  synth_songs(held, 20, 10.0, 0x4e1d);
  Checkpoint ck = run.checkpoint;
  const auto clips = prepare_with_checkpoint(ck, list_wavs(held));
  const auto ev = evaluate_masked(ck, clips, 0x7e57, 100);
  const double chance = 1.0 / 8192.0;
  Outcome o;
  o.pass = final_loss <= 0.7 * initial && ev.top1 >= 5.0 * chance;
  o.detail = std::to_string(log.size()) + " steps in " + fmt(run.seconds, 4) + " s; loss " + fmt(initial) + " -> " +
             fmt(final_loss) + " (ratio " + fmt(final_loss / initial) + ", need <= 0.7); held-out top-1 " +
             fmt(ev.top1) + " over " + std::to_string(ev.masked) + " masked frames = " + fmt(ev.top1 / chance, 4) +
             "x chance (need >= 5x)";
  return o;
}

// ---------------------------------------------------------------------------
// 7. Probing separation

void synth_triads(const fs::path& dir, int count, std::uint64_t base_seed) {
  if (fs::exists(dir) && static_cast<int>(list_wavs(dir).size()) == count) return;
  fs::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    const auto seed = derive_seed(base_seed, std::uint64_t(i));
    std::mt19937_64 rng(seed);
    auto [audio, ann] = synth_chord_sequence(random_progression(5, rng), 1.0, kModelSampleRate, seed);
    char stem[32];
    std::snprintf(stem, sizeof stem, "triad%04d", i);
    const auto wav = dir / (std::string(stem) + ".wav");
    save_wav(wav, audio);
    save_intervals(annotation_path(wav, "chord"), ann);
  }
}

Outcome criterion_probing() {
  const auto& run = desk_run();
  synth_triads(g_work / "triads-train", 60, 0x7a1);
  synth_triads(g_work / "triads-test", 30, 0x7e5);
  const auto task = task_spec("chord");
  const auto train = load_task_dataset(g_work / "triads-train", task);
  const auto test = load_task_dataset(g_work / "triads-test", task);
  const Backbone pretrained = backbone_from(run.checkpoint);
  double sum_pre = 0.0, sum_rand = 0.0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto opt = probe_options_from(run.checkpoint.config);
    opt.fit.seed = seed;
    const Backbone random = random_backbone(run.checkpoint, 100 + seed);
    Probe pre_probe = train_probe(pretrained, train, task, opt);
    Probe rnd_probe = train_probe(random, train, task, opt);
    const double pre = evaluate_probe(pre_probe, pretrained, test).metric("chord_acc");
    const double rnd = evaluate_probe(rnd_probe, random, test).metric("chord_acc");
    sum_pre += pre;
    sum_rand += rnd;
    detail += "seed " + std::to_string(seed) + ": " + fmt(pre) + " vs " + fmt(rnd) + "; ";
  }
  const double gap = (sum_pre - sum_rand) / 3.0;
  return {gap >= 0.10, detail + "mean gap " + fmt(gap) + " (need >= 0.10)"};
}

// ---------------------------------------------------------------------------
// 8. Metric oracles

Outcome criterion_metrics() {
  std::mt19937_64 rng(8);
  auto events = [&](double span) {
    std::vector<double> t(rng() % 9);
    for (auto& v : t) v = double(rng() % std::uint64_t(span * 100)) / 100.0;
    std::sort(t.begin(), t.end());
    return t;
  };
  std::size_t match_bad = 0, auc_bad = 0, chord_bad = 0;
  double chord_worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto est = events(3.0), ref = events(3.0);
    const auto b = beat_f1(est, ref);
    const auto bo = oracle::match_f_measure(est, ref, 0.07);
    const auto h = boundary_hr(est, ref);
    const auto ho = oracle::match_f_measure(est, ref, 0.5);
    match_bad += b.tp != bo.tp || b.f_measure != bo.f || h.tp != ho.tp || h.f_measure != ho.f;

    const std::size_t n = 2 + rng() % 49;
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t k = 0; k < n; ++k) {
      s[k] = double(rng() % 10) / 10.0;
      l[k] = int(rng() % 2);
    }
    l[0] = 1;
    l[1] = 0;
    auc_bad += roc_auc(s, l) != oracle::pairwise_auc(s, l);
  }
  for (int i = 0; i < 100; ++i) {
    const double duration = 5.0 + double(rng() % 20000) / 1000.0;
    const auto ref = oracle::random_chords(rng, duration, true);
    const auto est = oracle::random_chords(rng, duration, true);
    const double diff = std::abs(chord_weighted_acc(est, ref) - oracle::chord_accuracy_1ms(est, ref));
    chord_worst = std::max(chord_worst, diff);
    chord_bad += diff > 1e-6;
  }
  const std::vector<double> sc = {0.9, 0.8, 0.7, 0.6};
  const std::vector<int> lb = {1, 0, 1, 0};
  const std::vector<std::uint32_t> toks = {0, 0, 1};
  const double f1 = beat_f1({1.05, 2.5}, {1.0, 2.0, 3.0}).f_measure;
  const double hr = boundary_hr({10.3, 25.0}, {10.0, 20.0}).f_measure;
  const double auc = roc_auc(sc, lb), ap = average_precision(sc, lb);
  const double ent = utilization(toks, 4).entropy_bits;
  const bool hand = std::abs(f1 - 0.4) < 1e-12 && hr == 0.5 && auc == 0.75 && std::abs(ap - 0.8333) < 5e-5 &&
                    std::abs(ent - 0.9183) < 5e-5;
  Outcome o;
  o.pass = match_bad == 0 && auc_bad == 0 && chord_bad == 0 && hand;
  o.detail = "matching mismatches " + std::to_string(match_bad) + "/1000, AUC mismatches " + std::to_string(auc_bad) +
             "/1000, chord max |diff| " + fmt(chord_worst, 3) + " over 100; hand cases F1 " + fmt(f1) + " HR.5F " +
             fmt(hr) + " AUC " + fmt(auc) + " AP " + fmt(ap) + " entropy " + fmt(ent) + " bits";
  return o;
}

// ---------------------------------------------------------------------------
// 9. Determinism through the CLI

Outcome criterion_determinism() {
  const auto root = g_work / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  std::string log;
  if (run_cli("synth --out " + quoted(root / "corpus") + " --count 4 --seconds 6 --seed 9", &log) != 0) {
    return {false, "synth failed: " + log};
  }
  const auto cfg = source_config("tiny.cfg");
  for (const char* run : {"a", "b"}) {
    if (run_cli("pretrain --config " + quoted(cfg) + " --corpus " + quoted(root / "corpus") + " --out " +
                    quoted(root / run) + " --log-every 0",
                &log) != 0) {
      return {false, std::string("pretrain ") + run + " failed: " + log};
    }
    if (run_cli("tokenize --config " + quoted(cfg) + " --in " + quoted(root / "corpus") + " --out " +
                    quoted(root / (std::string("tok-") + run)),
                &log) != 0) {
      return {false, std::string("tokenize ") + run + " failed: " + log};
    }
  }
  const bool ck_same = file_bytes(checkpoint_file(root / "a")) == file_bytes(checkpoint_file(root / "b")) &&
                       !file_bytes(checkpoint_file(root / "a")).empty();
  std::size_t tok_files = 0, tok_diff = 0;
  for (const auto& e : fs::directory_iterator(root / "tok-a")) {
    if (e.path().extension() != ".tok") continue;
    ++tok_files;
    tok_diff += file_bytes(e.path()) != file_bytes(root / "tok-b" / e.path().filename());
  }
  return {ck_same && tok_files == 4 && tok_diff == 0,
          std::string("checkpoints ") + (ck_same ? "identical" : "differ") + "; token files " +
              std::to_string(tok_files - tok_diff) + "/" + std::to_string(tok_files) + " identical"};
}

// ---------------------------------------------------------------------------
// 10. Ablation harness

Outcome criterion_ablation() {
  const auto root = g_work / "ablate";
  fs::remove_all(root);
  fs::create_directories(root);
  std::string log;
  if (run_cli("synth --out " + quoted(root / "corpus") + " --count 4 --seconds 32 --seed 10", &log) != 0) {
    return {false, "synth failed: " + log};
  }
  const std::string env = "MTM_PATH_CORPUS=" + quoted(root / "corpus") + " MTM_PATH_TRAIN=" + quoted(root / "corpus") +
                          " MTM_PATH_TEST=" + quoted(root / "corpus") + " ";
  const std::string cmd = "ablate --config " + quoted(source_config("ablate-tiny.cfg")) + " --out " +
                          quoted(root / "runs") + " --csv " + quoted(root / "table.csv");
  const int rc = ::system(("cd " + quoted(root) + " && " + env + MTM_CLI_PATH + " " + cmd + " > ablate.log 2>&1").c_str());
  if (rc != 0) return {false, "ablate exited with status " + std::to_string(rc) + "; see " + (root / "ablate.log").string()};
  std::ifstream in(root / "table.csv");
  std::string header, line;
  std::getline(in, header);
  std::size_t rows = 0, incomplete = 0;
  std::set<std::string> names;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++rows;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    names.insert(cell);
    std::size_t filled = 0;
    while (std::getline(ss, cell, ',')) filled += !cell.empty();
    incomplete += filled != table_columns().size();
  }
  return {rows == 12 && names.size() == 12 && incomplete == 0,
          std::to_string(rows) + " rows (" + std::to_string(names.size()) + " distinct configs), " +
              std::to_string(incomplete) + " with missing metrics; columns: " + header};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  bool keep = false;
  if (const char* w = std::getenv("MTM_ACCEPT_WORK")) {
    g_work = w;
    keep = true;
  } else {
    g_work = fs::temp_directory_path() / ("mtm-accept-" + std::to_string(::getpid()));
  }
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"autodiff gradient checks", criterion_autodiff},
      {"quantizer fidelity", criterion_quantizer},
      {"codebook utilization", criterion_utilization},
      {"initial masked loss", criterion_initial_loss},
      {"masking statistics", criterion_masking},
      {"desk pretraining signal", criterion_pretraining},
      {"probing separation", criterion_probing},
      {"metric oracles", criterion_metrics},
      {"determinism", criterion_determinism},
      {"ablation harness", criterion_ablation},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    Stopwatch watch;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << std::setw(2) << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first
              << ": " << o.detail << " [" << fmt(watch.seconds(), 3) << " s]" << std::endl;
  }
  if (!keep) fs::remove_all(g_work);
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
