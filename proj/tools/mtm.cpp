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

// mtm: command-line front end.
//
// Exit codes: 0 ok, 1 unexpected, 2 configuration or usage, 3 I/O, 4 numeric.

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mtm/ablation.hpp"
#include "mtm/audio.hpp"
#include "mtm/config.hpp"
#include "mtm/corpus.hpp"
#include "mtm/dsp.hpp"
#include "mtm/manifest.hpp"
#include "mtm/metrics.hpp"
#include "mtm/pretrain.hpp"
#include "mtm/probing.hpp"
#include "mtm/quantizer.hpp"

extern char** environ;

namespace fs = std::filesystem;

namespace {

using mtm::ConfigError;
using mtm::IoError;

mtm::RunConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    mtm::RunConfig c;
    mtm::apply_env_overrides(c);
    c.validate();
    return c;
  }
  return mtm::load_config(path);
}

std::string pick(const std::string& flag, const std::string& from_config, const char* what) {
  const std::string v = flag.empty() ? from_config : flag;
  if (v.empty()) throw ConfigError(std::string("missing ") + what + " (pass a flag or set it in [paths])");
  return v;
}

void print_metrics(const mtm::EvalReport& r) {
  for (const auto& [k, v] : r.metrics) {
    std::cout << std::left << std::setw(14) << k << std::fixed << std::setprecision(4) << v << "\n";
  }
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
}

// --------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out;
  std::string kind = "songs";
  int count = 10;
  double seconds = 10.0;
  double chord_seconds = 1.0;
  std::uint64_t seed = 1;
};

int run_synth(const SynthArgs& a) {
  mtm::Stopwatch watch;
  if (a.count < 1) throw ConfigError("--count must be >= 1");
  fs::create_directories(a.out);
  for (int i = 0; i < a.count; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "clip%04d", i);
    const fs::path wav = fs::path(a.out) / (std::string(stem) + ".wav");
    const auto seed = mtm::derive_seed(a.seed, 0x73796e, static_cast<std::uint64_t>(i));
    if (a.kind == "songs") {
      mtm::save_song(wav, mtm::synth_song({a.seconds, mtm::kModelSampleRate, mtm::kSynthNoiseStd}, seed));
    } else if (a.kind == "triads") {
      std::mt19937_64 rng(seed);
      const auto count = static_cast<std::size_t>(std::max(1.0, std::round(a.seconds / a.chord_seconds)));
      auto [audio, ann] = mtm::synth_chord_sequence(mtm::random_progression(count, rng), a.chord_seconds,
                                                    mtm::kModelSampleRate, seed);
      mtm::save_wav(wav, audio);
      mtm::save_intervals(mtm::annotation_path(wav, "chord"), ann);
    } else if (a.kind == "clicks") {
      std::mt19937_64 rng(seed);
      const double bpm = 80.0 + static_cast<double>(rng() % 81);
      auto [audio, ann] = mtm::synth_click_track(bpm, 4, a.seconds, mtm::kModelSampleRate, seed);
      mtm::save_wav(wav, audio);
      mtm::save_beats(mtm::annotation_path(wav, "beat"), ann);
    } else {
      throw ConfigError("--kind must be songs, triads or clicks");
    }
    mtm::write_manifest(wav, {"synth", nullptr, watch.seconds(),
                              {{"kind", a.kind}, {"seed", a.seed}, {"index", i}, {"seconds", a.seconds}}});
  }
  std::cout << "wrote " << a.count << " clips to " << a.out << "\n";
  return 0;
}

// --------------------------------------------------------------------------
// featurize / tokenize

int run_featurize(const std::string& cfg_path, const std::string& in, const std::string& out, bool normalize) {
  mtm::Stopwatch watch;
  const auto cfg = config_or_default(cfg_path);
  const auto wavs = mtm::list_wavs(in);
  const auto mels = mtm::load_mels(cfg.frontend_for_model(), wavs);
  std::optional<mtm::Normalizer> norm;
  if (normalize) norm = mtm::fit_normalizer(mels);
  fs::create_directories(out);
  for (std::size_t i = 0; i < wavs.size(); ++i) {
    const auto path = fs::path(out) / (wavs[i].stem().string() + ".mel");
    mtm::save_mel(path, norm ? norm->apply(mels[i]) : mels[i]);
    mtm::write_manifest(path, {"featurize", &cfg, watch.seconds(), {{"source", wavs[i].filename().string()},
                                                                     {"normalized", normalize}}});
  }
  std::cout << "featurized " << wavs.size() << " clips\n";
  return 0;
}

int run_tokenize(const std::string& cfg_path, const std::string& in, const std::string& out,
                 const std::string& checkpoint) {
  mtm::Stopwatch watch;
  auto cfg = config_or_default(cfg_path);
  const auto wavs = mtm::list_wavs(in);
  mtm::Normalizer norm;
  std::optional<mtm::Quantizer> q;
  if (!checkpoint.empty()) {
    auto ck = mtm::load_checkpoint(checkpoint);
    cfg = ck.config;
    norm = ck.normalizer;
    q = *ck.quantizer;
  }
  const auto mels = mtm::load_mels(cfg.frontend_for_model(), wavs);
  if (!q) {
    norm = mtm::fit_normalizer(mels);
    q.emplace(mtm::build_quantizer(cfg));
  }
  fs::create_directories(out);
  std::vector<std::uint32_t> all;
  for (std::size_t i = 0; i < wavs.size(); ++i) {
    const auto ts = q->tokenize(norm.apply(mels[i]));
    all.insert(all.end(), ts.tokens.begin(), ts.tokens.end());
    const auto path = fs::path(out) / (wavs[i].stem().string() + ".tok");
    mtm::save_tokens(path, ts, q->codebook_size(), q->seed(), q->mode());
    mtm::write_manifest(path, {"tokenize", &cfg, watch.seconds(), {{"source", wavs[i].filename().string()}}});
  }
  const auto u = mtm::utilization(all, q->codebook_size());
  std::cout << "tokenized " << wavs.size() << " clips, " << all.size() << " tokens, utilization "
            << std::fixed << std::setprecision(4) << u.used_fraction << ", entropy " << u.entropy_bits << " bits\n";
  return 0;
}

// --------------------------------------------------------------------------
// pretrain

int run_pretrain(const std::string& cfg_path, const std::string& corpus, const std::string& out, bool resume,
                 std::optional<std::int64_t> stop_after, int log_every) {
  const auto cfg = mtm::load_config(cfg_path);
  mtm::PretrainOptions opt;
  opt.corpus = pick(corpus, cfg.paths.corpus, "corpus directory");
  opt.out_dir = pick(out, cfg.paths.out, "output directory");
  opt.resume = resume;
  opt.stop_after = stop_after;
  opt.on_step = [&](const mtm::StepLog& s) {
    if (log_every > 0 && (s.step == 1 || s.step % log_every == 0)) {
      std::cerr << "step " << s.step << " loss " << std::fixed << std::setprecision(4) << s.loss << " lr "
                << std::scientific << std::setprecision(2) << s.lr << std::defaultfloat << " top1 "
                << std::fixed << std::setprecision(4) << s.top1 << "\n";
    }
  };
  const auto res = mtm::pretrain(cfg, opt);
  std::cout << "checkpoint " << res.checkpoint_path.string() << " step " << res.checkpoint.step
            << " fingerprint " << mtm::fingerprint_hex(res.checkpoint.fingerprint) << "\n";
  return 0;
}

// --------------------------------------------------------------------------
// probe / evaluate

struct ProbeArgs {
  std::string task;
  std::string config;
  std::string checkpoint;
  std::string train;
  std::string test;
  std::string out;
  std::optional<std::uint64_t> random_init;
};

int run_probe(const ProbeArgs& a) {
  mtm::Stopwatch watch;
  auto cfg = mtm::load_config(a.config);
  const auto task = mtm::task_spec(a.task);
  const auto ckpt_path = pick(a.checkpoint, cfg.paths.out.empty() ? "" : mtm::checkpoint_file(cfg.paths.out).string(),
                              "checkpoint");
  const auto ck = mtm::load_checkpoint(ckpt_path);
  const auto backbone = a.random_init ? mtm::random_backbone(ck, *a.random_init) : mtm::backbone_from(ck);
  const auto train = mtm::load_task_dataset(pick(a.train, cfg.paths.train, "training set"), task);
  const auto test = mtm::load_task_dataset(pick(a.test, cfg.paths.test, "test set"), task);
  const fs::path out = pick(a.out, cfg.paths.out.empty() ? "" : (fs::path(cfg.paths.out) / ("probe-" + a.task)).string(),
                            "output directory");
  fs::create_directories(out / "predictions");

  mtm::ProbeTrainReport tr;
  auto probe = mtm::train_probe(backbone, train, task, mtm::probe_options_from(cfg), &tr);
  std::vector<mtm::Prediction> preds;
  const auto report = mtm::evaluate_probe(probe, backbone, test, &preds);

  nlohmann::json extra = {{"task", a.task}, {"checkpoint", ckpt_path}, {"epochs_run", tr.epochs_run},
                          {"best_epoch", tr.best_epoch}, {"train_loss", tr.final_train_loss}};
  if (a.random_init) extra["random_init_seed"] = *a.random_init;
  const mtm::ManifestInfo info{"probe", &cfg, watch.seconds(), extra};
  const auto probe_path = out / "probe.mtmp";
  mtm::save_probe(probe_path, probe);
  mtm::write_manifest(probe_path, info);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto p = out / "predictions" / (test[i].name + "." + a.task + ".json");
    mtm::save_prediction(p, preds[i]);
    mtm::write_manifest(p, info);
  }
  const auto report_path = out / "report.json";
  mtm::write_json_file(report_path, report.to_json());
  mtm::write_manifest(report_path, info);
  print_metrics(report);
  return 0;
}

mtm::Prediction prediction_from_file(const std::string& task, const fs::path& p) {
  mtm::Prediction pred;
  pred.task = task;
  if (task == "beat") {
    pred.beats = mtm::load_beats(p);
  } else if (task == "tagging") {
    pred.tags = mtm::load_tags(p);
  } else {
    pred.intervals = mtm::load_intervals(p);
    if (task == "structure") {
      const auto bp = mtm::boundary_path(p);
      pred.boundaries = fs::exists(bp) ? mtm::read_json_file(bp).at("boundaries").get<std::vector<double>>()
                                       : mtm::interval_boundaries(pred.intervals);
    }
  }
  return pred;
}

mtm::TaskClip reference_from_file(const std::string& task, const fs::path& p) {
  mtm::TaskClip c;
  c.name = p.filename().string();
  if (task == "beat") {
    c.beats = mtm::load_beats(p);
  } else if (task == "tagging") {
    c.tags = mtm::load_tags(p);
  } else {
    c.intervals = mtm::load_intervals(p);
  }
  return c;
}

// Annotation files for `task` in a directory, keyed by file name.
std::map<std::string, fs::path> annotation_files(const fs::path& dir, const std::string& task) {
  const std::string suffix = "." + task + ".json";
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      out[name] = e.path();
    }
  }
  return out;
}

int run_evaluate(const std::string& task_name, const fs::path& pred, const fs::path& ref, const std::string& json_out,
                 const mtm::MetricConfig& mc) {
  const auto task = mtm::task_spec(task_name);
  std::vector<mtm::Prediction> preds;
  std::vector<mtm::TaskClip> refs;
  if (fs::is_directory(ref)) {
    if (!fs::is_directory(pred)) throw ConfigError("--pred must be a directory when --ref is");
    const auto pf = annotation_files(pred, task_name);
    for (const auto& [name, rp] : annotation_files(ref, task_name)) {
      auto it = pf.find(name);
      if (it == pf.end()) throw IoError("missing prediction for " + name);
      preds.push_back(prediction_from_file(task_name, it->second));
      refs.push_back(reference_from_file(task_name, rp));
    }
    if (refs.empty()) throw IoError("no " + task_name + " annotations in " + ref.string());
  } else {
    if (!fs::exists(ref)) throw IoError("no such file: " + ref.string());
    if (!fs::exists(pred)) throw IoError("no such file: " + pred.string());
    preds.push_back(prediction_from_file(task_name, pred));
    refs.push_back(reference_from_file(task_name, ref));
  }
  const auto report = mtm::score_predictions(task, preds, refs, mc);
  if (!json_out.empty()) {
    mtm::write_json_file(json_out, report.to_json());
    mtm::write_manifest(json_out, {"evaluate", nullptr, 0.0, {{"task", task_name}}});
  }
  print_metrics(report);
  return 0;
}

// --------------------------------------------------------------------------
// ablate

int spawn_self(const std::vector<std::string>& args) {
  std::vector<char*> argv;
  for (const auto& s : args) argv.push_back(const_cast<char*>(s.c_str()));
  argv.push_back(nullptr);
  pid_t pid = 0;
  const std::string self = fs::read_symlink("/proc/self/exe").string();
  if (posix_spawn(&pid, self.c_str(), nullptr, nullptr, argv.data(), environ) != 0) {
    throw IoError("cannot start worker process");
  }
  return pid;
}

int run_ablate(const std::string& cfg_path, const std::string& out_flag, int jobs, std::optional<int> only,
               const std::string& csv_flag) {
  const auto base = mtm::load_config(cfg_path);
  const auto matrix = mtm::ablation_matrix(base);
  const fs::path out = pick(out_flag, base.paths.out, "output directory");
  pick("", base.paths.corpus, "corpus directory");
  pick("", base.paths.train, "probe training set");
  pick("", base.paths.test, "probe test set");
  auto log = [](const std::string& m) { std::cerr << m << "\n"; };

  if (only) {
    if (*only < 0 || *only >= static_cast<int>(matrix.size())) throw ConfigError("--only index out of range");
    mtm::run_ablation_entry(matrix[static_cast<std::size_t>(*only)], out, log);
    return 0;
  }
  std::vector<mtm::TableRow> rows;
  if (jobs <= 1) {
    for (const auto& c : matrix) rows.push_back(mtm::run_ablation_entry(c, out, log));
  } else {
    // One process per entry, at most `jobs` at a time.
    std::size_t next = 0, running = 0;
    bool failed = false;
    int worst = 0;
    while (next < matrix.size() || running > 0) {
      while (running < static_cast<std::size_t>(jobs) && next < matrix.size()) {
        spawn_self({"mtm", "ablate", "--config", cfg_path, "--out", out.string(), "--only", std::to_string(next)});
        ++next;
        ++running;
      }
      int status = 0;
      if (wait(&status) < 0) break;
      --running;
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        failed = true;
        worst = std::max(worst, WIFEXITED(status) ? WEXITSTATUS(status) : 1);
      }
    }
    if (failed) {
      std::cerr << "error: an ablation worker failed\n";
      return worst;
    }
    for (const auto& c : matrix) rows.push_back(mtm::row_from_json(mtm::read_json_file(mtm::row_file(out / c.name))));
  }
  const auto table = mtm::render_table(rows);
  std::cout << table;
  const auto table_path = out / "ablation.txt";
  const fs::path csv_path = csv_flag.empty() ? out / "ablation.csv" : fs::path(csv_flag);
  {
    std::ofstream t(table_path);
    t << table;
    std::ofstream c(csv_path);
    c << mtm::render_csv(rows);
    if (!t || !c) throw IoError("cannot write ablation tables under " + out.string());
  }
  const mtm::ManifestInfo info{"ablate", &base, 0.0, {{"runs", matrix.size()}, {"jobs", jobs}}};
  mtm::write_manifest(table_path, info);
  mtm::write_manifest(csv_path, info);
  return 0;
}

// --------------------------------------------------------------------------
// inspect

int run_inspect(const fs::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open " + path.string());
  char magic[4] = {};
  probe.read(magic, 4);
  const std::string m(magic, 4);
  if (m == "TOKS") {
    const auto tf = mtm::load_tokens(path);
    const auto u = mtm::utilization(tf.sequence.tokens, tf.codebook_size);
    std::cout << "tokens        " << tf.sequence.tokens.size() << "\nframe_rate    " << tf.sequence.frame_rate
              << "\ncodebook      " << tf.codebook_size << "\nmode          " << mtm::to_string(tf.mode)
              << "\nseed          " << tf.seed << "\nutilization   " << u.used_fraction << "\nentropy_bits  "
              << u.entropy_bits << "\n";
    return 0;
  }
  if (m == "MELF") {
    const auto mel = mtm::load_mel(path);
    std::cout << "frames        " << mel.num_frames << "\nbands         " << mel.dim << "\nframe_rate    "
              << mel.frame_rate << "\n";
    return 0;
  }
  const auto ck = mtm::load_checkpoint(path);
  std::cout << "step          " << ck.step << "\nfingerprint   " << mtm::fingerprint_hex(ck.fingerprint)
            << "\nencoder       " << ck.config.encoder.to_json().dump() << "\nparameters    "
            << ck.params.parameter_count() << " (" << ck.params.size() << " tensors)\n";
  const auto& q = *ck.quantizer;
  double norm_sum = 0.0;
  const auto& cb = q.codebook();
  for (int i = 0; i < q.codebook_size(); ++i) {
    double s = 0.0;
    for (int j = 0; j < q.latent_dim(); ++j) {
      const double v = cb[static_cast<std::size_t>(i * q.latent_dim() + j)];
      s += v * v;
    }
    norm_sum += std::sqrt(s);
  }
  std::cout << "quantizer     n=" << q.codebook_size() << " h=" << q.latent_dim() << " d=" << q.input_dim()
            << " mode=" << mtm::to_string(q.mode()) << " seed=" << q.seed()
            << "\ncodebook_norm " << norm_sum / q.codebook_size() << " (mean L2)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mtmkit: masked-token music representation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(mtm::kVersion));

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a labeled synthetic corpus");
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--kind", synth.kind, "songs, triads or clicks")->capture_default_str();
  s->add_option("--count", synth.count, "number of clips")->capture_default_str();
  s->add_option("--seconds", synth.seconds, "clip duration")->capture_default_str();
  s->add_option("--chord-seconds", synth.chord_seconds, "chord length for triads")->capture_default_str();
  s->add_option("--seed", synth.seed, "base seed")->capture_default_str();

  std::string cfg_path, in_dir, out_dir, checkpoint;
  bool normalize = false;
  auto* f = app.add_subcommand("featurize", "compute log-mel features");
  f->add_option("--config", cfg_path, "config file");
  f->add_option("--in", in_dir, "directory of .wav files")->required();
  f->add_option("--out", out_dir, "output directory")->required();
  f->add_flag("--normalize", normalize, "apply per-band normalization fitted on the inputs");

  auto* t = app.add_subcommand("tokenize", "tokenize audio with the random-projection quantizer");
  t->add_option("--config", cfg_path, "config file");
  t->add_option("--in", in_dir, "directory of .wav files")->required();
  t->add_option("--out", out_dir, "output directory")->required();
  t->add_option("--checkpoint", checkpoint, "reuse a checkpoint's normalizer and quantizer");

  std::string corpus;
  bool resume = false;
  std::optional<std::int64_t> stop_after;
  int log_every = 50;
  auto* p = app.add_subcommand("pretrain", "masked-token pretraining");
  p->add_option("--config", cfg_path, "config file")->required();
  p->add_option("--corpus", corpus, "corpus directory (overrides [paths] corpus)");
  p->add_option("--out", out_dir, "output directory (overrides [paths] out)");
  p->add_flag("--resume", resume, "continue from the checkpoint in the output directory");
  p->add_option("--stop-after", stop_after, "stop and checkpoint after this step");
  p->add_option("--log-every", log_every, "progress interval in steps (0 = quiet)")->capture_default_str();

  ProbeArgs pa;
  std::uint64_t random_seed = 0;
  auto* pr = app.add_subcommand("probe", "train and evaluate a probe for one task");
  pr->add_option("task", pa.task, "beat, chord, structure, key or tagging")->required();
  pr->add_option("--config", pa.config, "config file")->required();
  pr->add_option("--checkpoint", pa.checkpoint, "pretrained checkpoint");
  pr->add_option("--train", pa.train, "training clips");
  pr->add_option("--test", pa.test, "test clips");
  pr->add_option("--out", pa.out, "output directory");
  auto* ri = pr->add_option("--random-init", random_seed, "probe a freshly initialized backbone with this seed");

  std::string task, pred, ref, json_out;
  mtm::MetricConfig mc;
  auto* e = app.add_subcommand("evaluate", "score predictions against references");
  e->add_option("task", task, "beat, chord, structure, key or tagging")->required();
  e->add_option("--pred", pred, "prediction file or directory")->required();
  e->add_option("--ref", ref, "reference file or directory")->required();
  e->add_option("--json", json_out, "write the report as JSON");
  e->add_option("--beat-tolerance", mc.beat_tolerance, "seconds")->capture_default_str();
  e->add_option("--boundary-window", mc.boundary_window, "seconds")->capture_default_str();

  int jobs = 1;
  std::optional<int> only;
  std::string csv;
  auto* a = app.add_subcommand("ablate", "run the encoder x input x rate matrix");
  a->add_option("--config", cfg_path, "config file")->required();
  a->add_option("--out", out_dir, "output directory (overrides [paths] out)");
  a->add_option("--jobs", jobs, "worker processes")->capture_default_str();
  a->add_option("--csv", csv, "CSV table path");
  a->add_option("--only", only, "run a single matrix entry")->group("");

  std::string inspect_path;
  auto* i = app.add_subcommand("inspect", "summarize a checkpoint, token file or mel file");
  i->add_option("file", inspect_path, "artifact")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*s) return run_synth(synth);
    if (*f) return run_featurize(cfg_path, in_dir, out_dir, normalize);
    if (*t) return run_tokenize(cfg_path, in_dir, out_dir, checkpoint);
    if (*p) return run_pretrain(cfg_path, corpus, out_dir, resume, stop_after, log_every);
    if (*pr) {
      if (*ri) pa.random_init = random_seed;
      return run_probe(pa);
    }
    if (*e) return run_evaluate(task, pred, ref, json_out, mc);
    if (*a) return run_ablate(cfg_path, out_dir, jobs, only, csv);
    if (*i) return run_inspect(inspect_path);
  } catch (const mtm::ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return 2;
  } catch (const mtm::IoError& err) {
    std::cerr << "io error: " << err.what() << "\n";
    return 3;
  } catch (const mtm::NumericError& err) {
    std::cerr << "numeric error: " << err.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& err) {
    std::cerr << "invalid input: " << err.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& err) {
    std::cerr << "io error: " << err.what() << "\n";
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
