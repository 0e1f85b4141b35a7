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

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mtm/corpus.hpp"
#include "mtm/pretrain.hpp"
#include "test_util.hpp"

namespace mtm {
namespace {

constexpr const char* kTinyConfig = R"(
[run]
seed = 3
[encoder]
kind = conformer
d_model = 16
layers = 1
heads = 2
ffn_mult = 2
conv_kernel = 5
token_rate = 25
input_seconds = 2
[quantizer]
n = 64
h = 8
[optimizer]
lr = 1e-3
warmup = 4
steps = 8
batch = 2
checkpoint_every = 3
)";

RunConfig tiny_config() {
  auto c = parse_config(kTinyConfig);
  c.validate();
  return c;
}

// Small synthetic corpus shared by the tests in this file.
class PretrainCorpus : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing::TempDir("mtm-pretrain");
    for (int i = 0; i < 3; ++i) {
      SongOptions o;
      o.duration = 4.0 + i;
      save_song(dir_->path() / ("clip" + std::to_string(i) + ".wav"), synth_song(o, 100 + i));
    }
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::filesystem::path corpus() { return dir_->path(); }

  PretrainResult run(const RunConfig& c, const std::filesystem::path& out, std::optional<std::int64_t> stop = {},
                     bool resume = false, PretrainHooks hooks = {}) {
    PretrainOptions o;
    o.corpus = corpus();
    o.out_dir = out;
    o.stop_after = stop;
    o.resume = resume;
    o.hooks = std::move(hooks);
    return pretrain(c, o);
  }

  static testing::TempDir* dir_;
};
testing::TempDir* PretrainCorpus::dir_ = nullptr;

TEST(MaskPlan, ProbabilityExtremes) {
  EXPECT_EQ(plan_masks(100, 25, 400, 0.0, 1).masked_count(), 0u);
  EXPECT_EQ(plan_masks(100, 25, 400, 1.0, 1).masked_count(), 100u);
  EXPECT_THROW(plan_masks(100, 25, 400, 1.5, 1), ConfigError);
  EXPECT_THROW(plan_masks(0, 25, 400, 0.5, 1), ConfigError);
}

TEST(MaskPlan, SpanLengthFollowsTokenRate) {
  EXPECT_EQ(span_frames(400, 25), 10u);
  EXPECT_EQ(span_frames(400, 50), 20u);
  EXPECT_EQ(span_frames(400, 75), 30u);
  for (int rate : {25, 50, 75}) {
    const auto plan = plan_masks(95, rate, 400, 1.0, 7);
    const std::size_t span = span_frames(400, rate);
    ASSERT_FALSE(plan.spans.empty());
    for (std::size_t i = 0; i < plan.spans.size(); ++i) {
      const auto [b, e] = plan.spans[i];
      EXPECT_EQ(b, i * span);
      EXPECT_EQ(e, std::min<std::size_t>(95, b + span));
    }
  }
}

TEST(MaskPlan, SpansAgreeWithFrameFlags) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto plan = plan_masks(123, 25, 400, 0.6, seed);
    std::vector<std::uint8_t> flags(123, 0);
    for (auto [b, e] : plan.spans) {
      EXPECT_EQ(b % 10, 0u);
      for (std::size_t t = b; t < e; ++t) flags[t] = 1;
    }
    EXPECT_EQ(flags, plan.masked);
  }
}

TEST(MaskPlan, MeanFractionIsP) {
  double total = 0;
  const int plans = 500;
  for (int s = 0; s < plans; ++s) total += plan_masks(125, 25, 400, 0.6, std::uint64_t(s)).masked_fraction();
  // 12.5 spans per plan, so the per-plan sd is about 0.14; 500 plans give
  // a standard error near 0.006.
  EXPECT_NEAR(total / plans, 0.6, 0.03);
}

TEST(MaskPlan, DeterministicInSeed) {
  EXPECT_EQ(plan_masks(200, 50, 400, 0.5, 9).masked, plan_masks(200, 50, 400, 0.5, 9).masked);
}

TEST(ApplyMask, NoiseOnlyOnMaskedRows) {
  ad::Tensor<float> x({40, 64});
  for (std::size_t i = 0; i < x.size(); ++i) x.data[i] = 5.0f + float(i % 7);
  // First seed whose plan is neither empty nor full.
  MaskPlan plan;
  for (std::uint64_t seed = 0; plan.masked_count() == 0 || plan.masked_count() == 40; ++seed) {
    plan = plan_masks(40, 25, 400, 0.6, seed);
  }
  ASSERT_GT(plan.masked_count(), 0u);
  ASSERT_LT(plan.masked_count(), 40u);
  const auto y = apply_mask(x, plan, 11, 0.1);
  double s = 0, s2 = 0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < 40; ++t) {
    for (std::size_t k = 0; k < 64; ++k) {
      if (!plan.masked[t]) {
        ASSERT_EQ(y(t, k), x(t, k));
      } else {
        s += y(t, k);
        s2 += double(y(t, k)) * y(t, k);
        ++n;
      }
    }
  }
  const double mean = s / double(n), sd = std::sqrt(s2 / double(n) - mean * mean);
  EXPECT_LT(std::abs(mean), 4 * 0.1 / std::sqrt(double(n)));
  EXPECT_NEAR(sd, 0.1, 0.01);
  EXPECT_THROW(apply_mask(x, plan_masks(39, 25, 400, 0.5, 1), 1), ad::ShapeError);
}

Example synthetic_example(const RunConfig& c, std::size_t len, double p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g;
  Example ex;
  ex.clean = ad::Tensor<float>({len, std::size_t(c.encoder.input_dim)});
  for (auto& v : ex.clean.data) v = g(rng);
  for (std::size_t t = 0; t < len; ++t) ex.targets.push_back(std::int32_t(rng() % std::uint64_t(c.quantizer.n)));
  ex.plan = plan_masks(len, c.encoder.token_rate, c.masking.span_ms, p, seed);
  ex.input = apply_mask(ex.clean, ex.plan, seed + 1, c.masking.noise_std);
  return ex;
}

TEST(MaskedLoss, InitialLossIsLogN) {
  for (int n : {64, 8192}) {
    auto c = tiny_config();
    c.quantizer.n = n;
    auto ps = init_model<float>(c);
    ad::Tape<float> tape;
    const auto ml = masked_loss(tape, c.encoder, ps, {synthetic_example(c, 40, 0.6, 1), synthetic_example(c, 50, 0.6, 2)});
    ASSERT_GT(ml.masked, 0u);
    EXPECT_NEAR(ml.loss.value().data[0], std::log(double(n)), 1e-5);
  }
}

TEST(MaskedLoss, UnmaskedTargetsDoNotMatter) {
  const auto c = tiny_config();
  auto ps = init_model<float>(c);
  // Give the head weights so the loss depends on the targets.
  std::mt19937_64 rng(4);
  std::normal_distribution<float> g(0.0f, 0.5f);
  for (auto& v : ps["head.weight"].value.data) v = g(rng);
  auto ex = synthetic_example(c, 50, 0.5, 5);
  ASSERT_GT(ex.plan.masked_count(), 0u);
  ASSERT_LT(ex.plan.masked_count(), 50u);
  auto loss_of = [&](const Example& e) {
    ad::Tape<float> tape;
    return masked_loss(tape, c.encoder, ps, {e}).loss.value().data[0];
  };
  const float base = loss_of(ex);
  auto changed = ex;
  std::size_t masked_row = 0;
  for (std::size_t t = 0; t < 50; ++t) {
    if (!ex.plan.masked[t]) changed.targets[t] = (changed.targets[t] + 1) % c.quantizer.n;
    else masked_row = t;
  }
  EXPECT_EQ(loss_of(changed), base);
  changed.targets[masked_row] = (changed.targets[masked_row] + 1) % c.quantizer.n;
  EXPECT_NE(loss_of(changed), base);
}

TEST(MaskedLoss, BatchIsPerPositionMean) {
  const auto c = tiny_config();
  auto ps = init_model<float>(c);
  std::mt19937_64 rng(6);
  std::normal_distribution<float> g(0.0f, 0.5f);
  for (auto& v : ps["head.weight"].value.data) v = g(rng);
  const auto a = synthetic_example(c, 50, 0.3, 7), b = synthetic_example(c, 30, 0.8, 8);
  auto one = [&](const std::vector<Example>& batch) {
    ad::Tape<float> tape;
    auto ml = masked_loss(tape, c.encoder, ps, batch);
    return std::pair<double, double>(ml.loss.value().data[0], double(ml.masked));
  };
  const auto [la, ca] = one({a});
  const auto [lb, cb] = one({b});
  const auto [lab, cab] = one({a, b});
  ASSERT_NE(ca, cb);
  EXPECT_EQ(cab, ca + cb);
  EXPECT_NEAR(lab, (la * ca + lb * cb) / (ca + cb), 1e-5);
}

TEST(MaskedLoss, NothingMaskedGivesInvalidLoss) {
  const auto c = tiny_config();
  auto ps = init_model<float>(c);
  ad::Tape<float> tape;
  const auto ml = masked_loss(tape, c.encoder, ps, {synthetic_example(c, 30, 0.0, 1)});
  EXPECT_EQ(ml.masked, 0u);
  EXPECT_FALSE(ml.loss.valid());
}

TEST_F(PretrainCorpus, TokenizesBeforeMasking) {
  const auto c = tiny_config();
  testing::TempDir out;
  std::vector<std::string> events;
  PretrainHooks hooks;
  hooks.on_event = [&](std::string_view what, std::size_t) { events.emplace_back(what); };
  run(c, out.path(), {}, false, hooks);
  ASSERT_EQ(events.size(), 3u + std::size_t(c.optimizer.steps * c.optimizer.batch));
  for (std::size_t i = 0; i < events.size(); ++i) EXPECT_EQ(events[i], i < 3 ? "tokenize" : "mask") << i;
}

TEST_F(PretrainCorpus, TargetsComeFromCleanFrames) {
  const auto c = tiny_config();
  const auto mels = load_mels(c.frontend_for_model(), list_wavs(corpus()));
  const auto norm = fit_normalizer(mels);
  const auto q = build_quantizer(c);
  const auto clips = prepare_clips(mels, {}, norm, q);
  for (int step = 1; step <= 5; ++step) {
    const auto ex = make_example(c, clips, c.seed, step, 0);
    const auto direct = q.tokenize(norm.apply(mels[ex.clip])).tokens;
    for (std::size_t t = 0; t < ex.targets.size(); ++t) EXPECT_EQ(std::uint32_t(ex.targets[t]), direct[ex.offset + t]);
    EXPECT_LE(ex.clean.rows(), c.encoder.max_frames());
  }
}

TEST_F(PretrainCorpus, WarmupScheduleInLog) {
  const auto c = tiny_config();
  testing::TempDir out;
  const auto res = run(c, out.path());
  ASSERT_EQ(res.log.size(), 8u);
  for (const auto& s : res.log) EXPECT_DOUBLE_EQ(s.lr, 1e-3 * std::min(1.0, double(s.step) / 4.0));
}

TEST_F(PretrainCorpus, HeadBiasStartsAtTokenPrior) {
  const auto c = tiny_config();
  testing::TempDir out;
  const auto res = run(c, out.path(), 0);
  ASSERT_EQ(res.checkpoint.step, 0);
  const auto mels = load_mels(c.frontend_for_model(), list_wavs(corpus()));
  const auto clips = prepare_clips(mels, {}, fit_normalizer(mels), build_quantizer(c));
  std::vector<double> counts(64, 0.0);
  double total = 0.0;
  for (const auto& clip : clips) {
    for (auto t : clip.tokens) {
      counts[std::size_t(t)] += 1.0;
      total += 1.0;
    }
  }
  const auto& bias = res.checkpoint.params["head.bias"].value;
  double mass = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    EXPECT_NEAR(bias.data[i], std::log((counts[i] + 0.01) / (total + 0.64)), 1e-5) << i;
    mass += std::exp(double(bias.data[i]));
  }
  EXPECT_NEAR(mass, 1.0, 1e-5);
  for (auto w : res.checkpoint.params["head.weight"].value.data) EXPECT_EQ(w, 0.0f);
}

TEST_F(PretrainCorpus, ResumeMatchesUninterruptedRun) {
  const auto c = tiny_config();
  testing::TempDir a, b;
  const auto full = run(c, a.path());
  const auto first = run(c, b.path(), 5);
  EXPECT_EQ(first.checkpoint.step, 5);
  const auto rest = run(c, b.path(), {}, true);
  EXPECT_EQ(rest.checkpoint.step, 8);
  EXPECT_EQ(testing::read_bytes(checkpoint_file(a.path())), testing::read_bytes(checkpoint_file(b.path())));
  ASSERT_EQ(rest.log.size(), full.log.size());
  for (std::size_t i = 0; i < full.log.size(); ++i) EXPECT_EQ(rest.log[i].to_json(), full.log[i].to_json());
}

TEST_F(PretrainCorpus, RunsAreByteIdentical) {
  const auto c = tiny_config();
  testing::TempDir a, b;
  run(c, a.path());
  run(c, b.path());
  EXPECT_EQ(testing::read_bytes(checkpoint_file(a.path())), testing::read_bytes(checkpoint_file(b.path())));
  EXPECT_EQ(testing::read_bytes(log_file(a.path())), testing::read_bytes(log_file(b.path())));
}

TEST_F(PretrainCorpus, ResumeRejectsDifferentPretrainConfig) {
  auto c = tiny_config();
  testing::TempDir out;
  run(c, out.path(), 3);
  auto probe_only = c;
  probe_only.probe.epochs = 7;
  probe_only.paths.out = "elsewhere";
  EXPECT_NO_THROW(run(probe_only, out.path(), 4, true));
  auto changed = c;
  changed.optimizer.lr = 2e-3;
  EXPECT_THROW(run(changed, out.path(), {}, true), ConfigError);
}

TEST_F(PretrainCorpus, CheckpointRoundTrip) {
  const auto c = tiny_config();
  testing::TempDir out;
  const auto res = run(c, out.path(), 4);
  const auto ck = load_checkpoint(res.checkpoint_path);
  EXPECT_EQ(ck.step, 4);
  EXPECT_EQ(ck.fingerprint, pretrain_fingerprint(c));
  EXPECT_EQ(ck.adam.step, res.checkpoint.adam.step);
  ASSERT_EQ(ck.params.size(), res.checkpoint.params.size());
  for (const auto& p : res.checkpoint.params) {
    EXPECT_EQ(ck.params[p.name].value, p.value) << p.name;
    EXPECT_EQ(ck.adam.m.at(p.name), res.checkpoint.adam.m.at(p.name)) << p.name;
  }
  EXPECT_EQ(ck.quantizer->codebook(), res.checkpoint.quantizer->codebook());
  EXPECT_EQ(ck.quantizer->projection(), res.checkpoint.quantizer->projection());
  EXPECT_EQ(ck.normalizer.mean, res.checkpoint.normalizer.mean);
  EXPECT_EQ(ck.normalizer.std, res.checkpoint.normalizer.std);
  EXPECT_TRUE(std::filesystem::exists(manifest_path(res.checkpoint_path)));
}

TEST_F(PretrainCorpus, TamperedCheckpointIsRejected) {
  const auto c = tiny_config();
  testing::TempDir out;
  const auto res = run(c, out.path(), 2);
  auto container = ad::load_container(res.checkpoint_path);
  container.metadata["fingerprint"] = "0000000000000000";
  ad::save_container(out / "bad.mtmc", container);
  EXPECT_THROW(load_checkpoint(out / "bad.mtmc"), IoError);
}

TEST_F(PretrainCorpus, StepWithoutMaskIsSkipped) {
  auto c = tiny_config();
  c.masking.p = 0.0;
  testing::TempDir out;
  const auto res = run(c, out.path(), 1);
  auto ck = res.checkpoint;
  const auto before = ck.params;
  const auto clips = prepare_with_checkpoint(ck, list_wavs(corpus()));
  const auto log = train_step(ck, clips, 2);
  EXPECT_TRUE(log.skipped);
  EXPECT_EQ(ck.step, 2);
  for (const auto& p : before) EXPECT_EQ(ck.params[p.name].value, p.value);
  EXPECT_TRUE(res.log[0].skipped);
}

TEST_F(PretrainCorpus, LossDecreasesWhenOverfitting) {
  // The head bias starts at the token prior, so the early loss is already
  // the unigram cross-entropy. Going clearly below it needs the input.
  auto c = tiny_config();
  c.encoder.d_model = 32;
  c.optimizer.steps = 600;
  c.optimizer.warmup = 5;
  c.optimizer.lr = 1e-3;
  c.optimizer.checkpoint_every = 0;
  testing::TempDir out;
  const auto res = run(c, out.path());
  double head = 0, tail = 0;
  for (int i = 0; i < 20; ++i) {
    head += res.log[std::size_t(i)].loss;
    tail += res.log[res.log.size() - 1 - std::size_t(i)].loss;
  }
  EXPECT_LT(tail, 0.9 * head);
}

TEST_F(PretrainCorpus, EmptyCorpusIsIoError) {
  testing::TempDir empty, out;
  PretrainOptions o;
  o.corpus = empty.path();
  o.out_dir = out.path();
  EXPECT_THROW(pretrain(tiny_config(), o), IoError);
}

}  // namespace
}  // namespace mtm
