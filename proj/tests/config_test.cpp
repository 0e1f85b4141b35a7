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

#include <cstdlib>
#include <set>

#include "mtm/ablation.hpp"
#include "mtm/config.hpp"
#include "test_util.hpp"

#ifndef MTM_SOURCE_DIR
#define MTM_SOURCE_DIR "."
#endif

namespace mtm {
namespace {

const std::filesystem::path kConfigs = std::filesystem::path(MTM_SOURCE_DIR) / "configs";

TEST(Config, DefaultsAreValid) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.quantizer.n, 8192);
  EXPECT_EQ(c.quantizer.h, 16);
  EXPECT_EQ(c.masking.span_ms, 400.0);
  EXPECT_EQ(c.masking.p, 0.6);
  EXPECT_EQ(c.optimizer.lr, 1e-4);
  EXPECT_EQ(c.optimizer.warmup, 30000);
  EXPECT_EQ(c.probe.hidden, 512);
}

TEST(Config, SerializeParseIsFixedPoint) {
  for (const char* name : {"desk.cfg", "tiny.cfg", "ablate-tiny.cfg"}) {
    const auto c = load_config(kConfigs / name);
    const auto text = serialize_config(c);
    const auto again = parse_config(text);
    EXPECT_EQ(serialize_config(again), text) << name;
    EXPECT_EQ(config_fingerprint(again), config_fingerprint(c)) << name;
  }
}

TEST(Config, FingerprintIgnoresPresentation) {
  const auto a = parse_config("[encoder]\nd_model = 64\nlayers = 2\n[masking]\np = 0.5\n");
  const auto b = parse_config(
      "# a comment\n[masking]\n   p=0.5   ; trailing note\n\n[encoder]\nlayers = 2\n\td_model = 64\n"
      "[run]\nname = other\n[paths]\nout = /tmp/somewhere\n[ablate]\ntoken_rates = 50\n");
  EXPECT_EQ(config_fingerprint(a), config_fingerprint(b));
  EXPECT_EQ(pretrain_fingerprint(a), pretrain_fingerprint(b));
}

TEST(Config, FingerprintTracksEveryMeaningfulField) {
  // Changing any included field through its own setter must move the hash.
  const RunConfig base;
  const auto fp = config_fingerprint(base);
  std::set<std::uint64_t> seen = {fp};
  const std::vector<std::pair<std::string, std::string>> edits = {
      {"run", "seed = 2"},          {"frontend", "fmin = 10"},     {"frontend", "n_fft = 1024"},
      {"encoder", "kind = bert"},   {"encoder", "layers = 3"},     {"encoder", "token_rate = 50"},
      {"encoder", "input_seconds = 30"},                            {"quantizer", "n = 4096"},
      {"quantizer", "mode = norm-difference"},                      {"quantizer", "seed = 8"},
      {"masking", "span_ms = 200"}, {"masking", "noise_std = 0"}, {"optimizer", "lr = 0.001"},
      {"optimizer", "batch = 4"},   {"probe", "hidden = 256"},     {"probe", "fine_tune = true"}};
  for (const auto& [section, line] : edits) {
    const auto c = parse_config("[" + section + "]\n" + line + "\n");
    const auto h = config_fingerprint(c);
    EXPECT_NE(h, fp) << section << ": " << line;
    EXPECT_TRUE(seen.insert(h).second) << section << ": " << line;
  }
}

TEST(Config, ProbeFieldsDoNotTouchPretrainFingerprint) {
  const RunConfig base;
  const auto c = parse_config("[probe]\nepochs = 3\nlayer = weighted\n");
  EXPECT_EQ(pretrain_fingerprint(c), pretrain_fingerprint(base));
  EXPECT_NE(config_fingerprint(c), config_fingerprint(base));
  EXPECT_NE(pretrain_fingerprint(parse_config("[masking]\np = 0.5\n")), pretrain_fingerprint(base));
  EXPECT_EQ(fingerprint_hex(0x1234).size(), 16u);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("[encoder]\nwidth = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("[model]\n"), ConfigError);
  EXPECT_THROW(parse_config("d_model = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("[encoder]\nd_model\n"), ConfigError);
  EXPECT_THROW(parse_config("[encoder]\nd_model = many\n"), ConfigError);
  EXPECT_THROW(parse_config("[encoder\n"), ConfigError);
  EXPECT_THROW(parse_config("[probe]\nfine_tune = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("[masking]\np = 1.5\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("[encoder]\ntoken_rate = 30\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("[probe]\nlayer = 9\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("[ablate]\nkinds = bert, lstm\n").validate(), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/dir/x.cfg"), IoError);
}

TEST(Config, EnvironmentOverridesPathsOnly) {
  testing::TempDir dir;
  testing::write_text(dir / "c.cfg", "[paths]\ncorpus = a\nout = b\n");
  ::setenv("MTM_PATH_OUT", "/elsewhere", 1);
  const auto c = load_config(dir / "c.cfg");
  ::unsetenv("MTM_PATH_OUT");
  EXPECT_EQ(c.paths.corpus, "a");
  EXPECT_EQ(c.paths.out, "/elsewhere");
  EXPECT_EQ(load_config(dir / "c.cfg").paths.out, "b");
}

TEST(Ablation, FullMatrixHasTwelveDistinctEntries) {
  const auto base = load_config(kConfigs / "ablate-tiny.cfg");
  const auto m = ablation_matrix(base);
  ASSERT_EQ(m.size(), 12u);
  std::set<std::string> names;
  std::set<std::uint64_t> fps;
  for (const auto& c : m) {
    names.insert(c.name);
    fps.insert(pretrain_fingerprint(c));
  }
  EXPECT_EQ(names.size(), 12u);
  EXPECT_EQ(fps.size(), 12u);
  EXPECT_EQ(m.front().name, "bert-5s-25hz");
  EXPECT_EQ(m.back().name, "conformer-30s-75hz");
}

TEST(Ablation, TwoAxesGiveFourRuns) {
  auto base = parse_config("[ablate]\nkinds = bert, conformer\ninput_seconds = 5, 30\ntoken_rates = 25\n");
  EXPECT_EQ(ablation_matrix(base).size(), 4u);
  base.ablate.kinds.clear();
  EXPECT_THROW(ablation_matrix(base), ConfigError);
}

TEST(Ablation, RowJsonRoundTrip) {
  TableRow r{"bert-5s-25hz", {{"beat_f1", 0.5}, {"map", std::nan("")}}};
  const auto back = row_from_json(nlohmann::json::parse(row_to_json(r).dump()));
  EXPECT_EQ(back.name, r.name);
  EXPECT_EQ(back.values.at("beat_f1"), 0.5);
  EXPECT_TRUE(std::isnan(back.values.at("map")));
}

}  // namespace
}  // namespace mtm
