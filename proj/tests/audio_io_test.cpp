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

#include <algorithm>
#include <cmath>
#include <random>

#include "mtm/annotations.hpp"
#include "mtm/audio.hpp"
#include "mtm/corpus.hpp"
#include "mtm/dsp.hpp"
#include "mtm/labels.hpp"
#include "test_util.hpp"

namespace mtm {
namespace {

using testing::TempDir;

// Hand-assembled RIFF/WAVE file with an arbitrary format tag.
void write_raw_wav(const std::filesystem::path& p, std::uint16_t format, std::uint16_t channels,
                   std::uint16_t bits, int sr, const std::string& payload) {
  std::ofstream out(p, std::ios::binary);
  const std::uint16_t block = static_cast<std::uint16_t>(bits / 8 * channels);
  io::write_le(out, io::fourcc("RIFF"));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(36 + payload.size()));
  io::write_le(out, io::fourcc("WAVE"));
  io::write_le(out, io::fourcc("fmt "));
  io::write_le<std::uint32_t>(out, 16);
  io::write_le<std::uint16_t>(out, format);
  io::write_le<std::uint16_t>(out, channels);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(sr));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(sr) * block);
  io::write_le<std::uint16_t>(out, block);
  io::write_le<std::uint16_t>(out, bits);
  io::write_le(out, io::fourcc("data"));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(payload.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

std::string pcm16(std::initializer_list<std::int16_t> values) {
  std::string s;
  for (auto v : values) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
  }
  return s;
}

TEST(LoadWav, Pcm16MonoLengthAndRate) {
  TempDir dir;
  AudioBuffer buf;
  buf.samples.assign(24000, 0.25f);
  save_wav(dir / "a.wav", buf, WavEncoding::kPcm16);
  const auto back = load_wav(dir / "a.wav");
  EXPECT_EQ(back.samples.size(), 24000u);
  EXPECT_EQ(back.sample_rate, 24000);
  EXPECT_FLOAT_EQ(back.samples[100], 0.25f);
}

TEST(LoadWav, Pcm16ScalingIsFullScale) {
  TempDir dir;
  write_raw_wav(dir / "s.wav", 1, 1, 16, 24000, pcm16({16384, -32768, 0}));
  const auto b = load_wav(dir / "s.wav");
  ASSERT_EQ(b.samples.size(), 3u);
  EXPECT_EQ(b.samples[0], 0.5f);
  EXPECT_EQ(b.samples[1], -1.0f);
  EXPECT_EQ(b.samples[2], 0.0f);
}

TEST(LoadWav, StereoIsDownmixedByMean) {
  TempDir dir;
  write_raw_wav(dir / "st.wav", 1, 2, 16, 24000, pcm16({16384, -16384, 8192, 8192}));
  const auto b = load_wav(dir / "st.wav");
  ASSERT_EQ(b.samples.size(), 2u);
  EXPECT_EQ(b.samples[0], 0.0f);
  EXPECT_EQ(b.samples[1], 0.25f);
}

TEST(LoadWav, Float32RoundTripIsExact) {
  TempDir dir;
  AudioBuffer buf;
  buf.sample_rate = 16000;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  for (int i = 0; i < 1000; ++i) buf.samples.push_back(u(rng));
  save_wav(dir / "f.wav", buf);
  const auto back = load_wav(dir / "f.wav");
  EXPECT_EQ(back.sample_rate, 16000);
  EXPECT_EQ(back.samples, buf.samples);
}

TEST(LoadWav, UnsupportedEncodingIsNamed) {
  TempDir dir;
  write_raw_wav(dir / "p24.wav", 1, 1, 24, 24000, std::string(6, '\0'));
  try {
    load_wav(dir / "p24.wav");
    FAIL() << "expected an error";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("24"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_wav(dir / "missing.wav"), IoError);
}

TEST(Resample, LengthArithmetic) {
  AudioBuffer b;
  b.sample_rate = 44100;
  b.samples.assign(44100, 0.1f);
  const auto r = resample(b, 24000);
  EXPECT_EQ(r.samples.size(), 24000u);
  EXPECT_EQ(r.sample_rate, 24000);
}

TEST(Resample, SameRateIsIdentity) {
  AudioBuffer b;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n;
  for (int i = 0; i < 500; ++i) b.samples.push_back(n(rng));
  const auto r = resample(b, b.sample_rate);
  EXPECT_EQ(r.samples, b.samples);
}

TEST(Resample, ConstantStaysConstant) {
  for (int src : {8000, 22050, 44100, 48000}) {
    AudioBuffer b;
    b.sample_rate = src;
    b.samples.assign(static_cast<std::size_t>(src / 10), 0.7f);
    for (float s : resample(b, 24000).samples) ASSERT_FLOAT_EQ(s, 0.7f);
  }
}

TEST(Resample, IntegerRatioLengthRoundTrip) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    AudioBuffer b;
    b.samples.assign(100 + rng() % 5000, 0.0f);
    for (int r : {2, 3, 4}) {
      const auto up = resample(b, b.sample_rate * r);
      EXPECT_EQ(resample(up, b.sample_rate).samples.size(), b.samples.size());
    }
  }
}

TEST(ClickTrack, BeatAndDownbeatTimes) {
  auto [audio, ann] = synth_click_track(120.0, 4, 10.0, 24000, 3);
  ASSERT_EQ(ann.beats.size(), 20u);
  for (std::size_t k = 0; k < 20; ++k) EXPECT_DOUBLE_EQ(ann.beats[k], 0.5 * static_cast<double>(k));
  EXPECT_EQ(ann.downbeats, (std::vector<double>{0.0, 2.0, 4.0, 6.0, 8.0}));
  EXPECT_EQ(audio.samples.size(), 240000u);
  EXPECT_NO_THROW(ann.validate());
}

TEST(ClickTrack, DownbeatsAreLouder) {
  auto [audio, ann] = synth_click_track(100.0, 4, 6.0, 24000, 9);
  auto peak = [&](double t) {
    const auto s = static_cast<std::size_t>(t * 24000);
    float m = 0;
    for (std::size_t i = s; i < s + 240; ++i) m = std::max(m, std::abs(audio.samples[i]));
    return m;
  };
  EXPECT_GT(peak(ann.downbeats[1]), 1.3f * peak(ann.beats[1]));
}

TEST(ClickTrack, AnnotationFileRoundTripIsExact) {
  TempDir dir;
  auto [audio, ann] = synth_click_track(97.0, 3, 7.3, 24000, 5);
  save_beats(dir / "b.json", ann);
  EXPECT_EQ(load_beats(dir / "b.json"), ann);
}

TEST(ClickTrack, Deterministic) {
  auto a = synth_click_track(131.0, 4, 3.0, 24000, 11);
  auto b = synth_click_track(131.0, 4, 3.0, 24000, 11);
  EXPECT_EQ(a.first.samples, b.first.samples);
  auto c = synth_click_track(131.0, 4, 3.0, 24000, 12);
  EXPECT_NE(a.first.samples, c.first.samples);
}

TEST(ChordSequence, TriadFrequencies) {
  const auto f = chord_frequencies(parse_majmin("C:maj"));
  ASSERT_EQ(f.size(), 3u);
  EXPECT_NEAR(f[0], 261.63, 0.01);
  EXPECT_NEAR(f[1], 329.63, 0.01);
  EXPECT_NEAR(f[2], 392.00, 0.01);
  const auto am = chord_frequencies(parse_majmin("A:min"));
  EXPECT_NEAR(am[0], 440.0, 1e-9);
  EXPECT_NEAR(am[1], 523.25, 0.01);
}

TEST(ChordSequence, RenderedSpectrumPeaksAtTriad) {
  auto [audio, ann] = synth_chord_sequence({"C:maj"}, 2.0, 24000, 1);
  const int n_fft = 8192;
  const auto spec = stft(audio, n_fft, 4096);
  std::vector<double> mag(spec.bins);
  for (std::size_t b = 0; b < spec.bins; ++b) mag[b] = std::abs(spec.frame(2)[b]);
  // Three strongest local maxima sit at the three triad frequencies.
  std::vector<double> peaks;
  for (std::size_t b = 1; b + 1 < mag.size(); ++b) {
    if (mag[b] > mag[b - 1] && mag[b] >= mag[b + 1]) peaks.push_back(static_cast<double>(b));
  }
  std::sort(peaks.begin(), peaks.end(), [&](double a, double b) { return mag[std::size_t(a)] > mag[std::size_t(b)]; });
  peaks.resize(3);
  std::sort(peaks.begin(), peaks.end());
  const double bin_hz = 24000.0 / n_fft;
  const auto f = chord_frequencies(parse_majmin("C:maj"));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(peaks[std::size_t(i)] * bin_hz, f[std::size_t(i)], bin_hz);
}

TEST(ChordSequence, IntervalsAreExact) {
  auto [audio, ann] = synth_chord_sequence({"C:maj", "A:min"}, 2.0, 24000, 1);
  ASSERT_EQ(ann.size(), 2u);
  EXPECT_EQ(ann[0], (LabeledInterval{0.0, 2.0, "C:maj"}));
  EXPECT_EQ(ann[1], (LabeledInterval{2.0, 4.0, "A:min"}));
  EXPECT_EQ(audio.samples.size(), 96000u);
}

TEST(ChordSequence, NoneIsNoiseOnly) {
  auto [audio, ann] = synth_chord_sequence({"none"}, 2.0, 24000, 8);
  // Frame-averaged magnitude spectrum.
  const auto spec = stft(audio, 2048, 1024);
  std::vector<double> mag(spec.bins, 0.0);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    for (std::size_t b = 0; b < spec.bins; ++b) mag[b] += std::abs(spec.frame(t)[b]) / static_cast<double>(spec.frames);
  }
  std::vector<double> sorted = mag;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2), sorted.end());
  const double median = sorted[sorted.size() / 2];
  EXPECT_LE(*std::max_element(mag.begin(), mag.end()), 3.0 * median);
  auto [tone, tone_ann] = synth_chord_sequence({"C:maj"}, 2.0, 24000, 8);
  const auto ts = stft(tone, 2048, 1024);
  double tmax = 0.0;
  for (auto c : ts.frame(5)) tmax = std::max(tmax, std::abs(c));
  EXPECT_GT(tmax, 3.0 * median);
}

TEST(ChordSequence, UnknownLabelThrows) {
  EXPECT_THROW(synth_chord_sequence({"H:maj"}, 1.0, 24000, 1), ConfigError);
  EXPECT_THROW(synth_chord_sequence({"C:dim"}, 1.0, 24000, 1), ConfigError);
}

TEST(Labels, ParseAndFormat) {
  EXPECT_EQ(parse_majmin("C:maj").class_index(), 0);
  EXPECT_EQ(parse_majmin("A:min").class_index(), 21);
  EXPECT_EQ(parse_majmin("Bb:maj").class_index(), 10);
  EXPECT_EQ(parse_majmin("none").class_index(), kNoneClass);
  for (int c = 0; c < kNumMajMinClasses; ++c) EXPECT_EQ(parse_majmin(to_string(majmin_from_class(c))).class_index(), c);
}

TEST(Annotations, ValidationRejectsBadInput) {
  BeatAnnotation b{{1.0, 0.5}, {}};
  EXPECT_THROW(b.validate(), ConfigError);
  BeatAnnotation d{{0.0, 0.5}, {0.25}};
  EXPECT_THROW(d.validate(), ConfigError);
  IntervalAnnotation overlap = {{0.0, 2.0, "C:maj"}, {1.0, 3.0, "A:min"}};
  EXPECT_THROW(validate_intervals(overlap), ConfigError);
}

TEST(Annotations, IntervalAndTagRoundTrip) {
  TempDir dir;
  IntervalAnnotation iv = {{0.0, 1.5, "C:maj"}, {1.5, 3.25, "none"}};
  save_intervals(dir / "c.json", iv);
  EXPECT_EQ(load_intervals(dir / "c.json"), iv);
  TagAnnotation t;
  t.tags = {"major", "fast"};
  save_tags(dir / "t.json", t);
  EXPECT_EQ(load_tags(dir / "t.json").tags, t.tags);
}

TEST(SyntheticSong, LabelsSatisfyInvariants) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto song = synth_song({12.0, 24000, 0.005}, seed);
    EXPECT_NO_THROW(song.labels.beats.validate());
    EXPECT_NO_THROW(validate_chords(song.labels.chords));
    EXPECT_NO_THROW(validate_intervals(song.labels.structure));
    EXPECT_NEAR(total_duration(song.labels.structure), 12.0, 1e-9);
    for (const auto& iv : song.labels.structure) EXPECT_TRUE(section_index(iv.label).has_value());
    EXPECT_EQ(song.audio.samples.size(), 288000u);
  }
}

TEST(SyntheticSong, Deterministic) {
  EXPECT_EQ(synth_song({}, 5).audio.samples, synth_song({}, 5).audio.samples);
}

}  // namespace
}  // namespace mtm
