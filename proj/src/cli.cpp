#include "m2s/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "m2s/checkpoint.hpp"
#include "m2s/config.hpp"
#include "m2s/errors.hpp"
#include "m2s/evaluation.hpp"
#include "m2s/model.hpp"
#include "m2s/tensor.hpp"
#include "m2s/training.hpp"
#include "m2s/visualization.hpp"

namespace fs = std::filesystem;

namespace m2s::cli {

std::span<const std::string> FixtureSettings::keys() {
  static const std::vector<std::string> k{"seed",        "train_utterances", "dev_utterances", "eval_utterances",
                                          "class_ratio", "speakers",         "seconds",        "sample_rate"};
  return k;
}

void FixtureSettings::set(const std::string& key, const std::string& value) {
  if (key == "seed") {
    seed = parse_seed_setting(key, value);
  } else if (key == "train_utterances") {
    train_utterances = parse_int_setting(key, value);
  } else if (key == "dev_utterances") {
    dev_utterances = parse_int_setting(key, value);
  } else if (key == "eval_utterances") {
    eval_utterances = parse_int_setting(key, value);
  } else if (key == "class_ratio") {
    class_ratio = parse_double_setting(key, value);
  } else if (key == "speakers") {
    speakers = parse_int_setting(key, value);
  } else if (key == "seconds") {
    seconds = parse_double_setting(key, value);
  } else if (key == "sample_rate") {
    sample_rate = parse_double_setting(key, value);
  } else {
    reject_key(key, keys());
  }
}

void FixtureSettings::validate() const {
  if (train_utterances < 2 || dev_utterances < 2 || eval_utterances < 2) {
    throw ValidationError("each fixture split needs at least 2 utterances");
  }
  if (!(class_ratio > 0.0 && class_ratio < 1.0)) throw ValidationError("class_ratio must lie in (0, 1)");
  if (speakers < 1) throw ValidationError("speakers must be >= 1");
  if (!(seconds > 0.0)) throw ValidationError("seconds must be > 0");
  if (!(sample_rate > 0.0)) throw ValidationError("sample_rate must be > 0");
}

std::span<const std::string> ConvertSettings::keys() {
  static const std::vector<std::string> k{"seed"};
  return k;
}

void ConvertSettings::set(const std::string& key, const std::string& value) {
  if (key == "seed") {
    seed = parse_seed_setting(key, value);
  } else {
    reject_key(key, keys());
  }
}

void ConvertSettings::validate() const {}

std::span<const std::string> EvalSettings::keys() {
  static const std::vector<std::string> k{"seed", "ablation"};
  return k;
}

void EvalSettings::set(const std::string& key, const std::string& value) {
  if (key == "seed") {
    seed = parse_seed_setting(key, value);
  } else if (key == "ablation") {
    ablation = parse_bool_setting(key, value);
  } else {
    reject_key(key, keys());
  }
}

void EvalSettings::validate() const {}

std::span<const std::string> VisualizeSettings::keys() {
  static const std::vector<std::string> k{"seed", "window_ms", "hop_ms"};
  return k;
}

void VisualizeSettings::set(const std::string& key, const std::string& value) {
  if (key == "seed") {
    seed = parse_seed_setting(key, value);
  } else if (key == "window_ms") {
    window_ms = parse_double_setting(key, value);
  } else if (key == "hop_ms") {
    hop_ms = parse_double_setting(key, value);
  } else {
    reject_key(key, keys());
  }
}

void VisualizeSettings::validate() const {
  if (!(window_ms > 0.0) || !(hop_ms > 0.0)) throw ValidationError("window_ms and hop_ms must be > 0");
}

namespace {

struct Common {
  std::string config;
  std::string seed;
  std::string out;
  std::vector<std::string> sets;

  void attach(CLI::App* sc, const std::string& out_help) {
    sc->add_option("--config", config, "settings file with key = value lines");
    sc->add_option("--set", sets, "override a setting (key=value), repeatable");
    sc->add_option("--seed", seed, "base seed (overrides the seed setting)");
    sc->add_option("--out", out, out_help)->required();
  }

  template <class Config>
  Config resolve(std::vector<std::string> extra = {}) const {
    std::vector<std::string> overrides = sets;
    overrides.insert(overrides.end(), extra.begin(), extra.end());
    if (!seed.empty()) overrides.push_back("seed=" + seed);
    return resolve_config<Config>(config, overrides);
  }
};

// Writes through `write(tmp)` and renames over `path`.
template <class Fn>
void write_atomic(const fs::path& path, Fn&& write) {
  fs::path tmp = path;
  tmp += ".tmp";
  try {
    write(tmp);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
  fs::rename(tmp, path);
}

// Builds a directory next to `dir` and swaps it in once complete.
template <class Fn>
void replace_dir(const fs::path& dir, Fn&& fill) {
  fs::path tmp = dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  try {
    fill(tmp);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

std::shared_ptr<Binauralizer> load_converter(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  std::shared_ptr<Binauralizer> conv;
  if (ck.kind == "binauralizer") {
    conv = std::make_shared<Binauralizer>(binauralizer_from_checkpoint(ck));
  } else if (ck.kind == "detector") {
    conv = std::make_shared<Binauralizer>(binauralizer_from_checkpoint(ck, "converter."));
  } else {
    throw ValidationError(path.string() + ": expected a binauralizer or detector checkpoint, found '" + ck.kind + "'");
  }
  conv->set_frozen(true);
  return conv;
}

std::vector<Waveform> load_protocol_audio(const TrialProtocol& protocol, const fs::path& dir, double sr,
                                          std::ostream& err) {
  std::vector<Waveform> audio;
  std::size_t failures = 0;
  for (const auto& e : protocol.entries) {
    try {
      audio.push_back(load_waveform(dir / (e.utterance_id + ".wav"), sr));
    } catch (const std::exception& ex) {
      err << "error: " << e.utterance_id << ": " << ex.what() << "\n";
      ++failures;
    }
  }
  if (failures > 0) {
    throw IoError(std::to_string(failures) + " of " + std::to_string(protocol.entries.size()) +
                  " utterances could not be loaded from " + dir.string() + " (expected <audio>/<utt_id>.wav)");
  }
  return audio;
}

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

// ---- fixtures ---------------------------------------------------------------

int cmd_fixtures(const Common& c, std::ostream& out) {
  const auto s = c.resolve<FixtureSettings>();
  const fs::path root = c.out;
  fs::create_directories(root);

  const auto pairs = synth_binaural_corpus(derive_seed(s.seed, 0xF1C, 0), static_cast<int>(s.speakers), s.seconds,
                                           s.sample_rate);
  replace_dir(root / "binaural", [&](const fs::path& d) { write_binaural_corpus(d, pairs); });

  struct Split {
    const char* name;
    Subset subset;
    std::int64_t n;
    const char* prefix;
  };
  const Split splits[] = {{"train", Subset::Train, s.train_utterances, "FXT"},
                          {"dev", Subset::Dev, s.dev_utterances, "FXD"},
                          {"eval", Subset::Eval, s.eval_utterances, "FXE"}};
  for (std::size_t i = 0; i < 3; ++i) {
    const Split& sp = splits[i];
    FixtureOptions fo;
    fo.subset = sp.subset;
    fo.id_prefix = sp.prefix;
    const FixtureCorpus corpus =
        synth_fixture_dataset(derive_seed(s.seed, 0xF1C, i + 1), static_cast<int>(sp.n), s.sample_rate, s.class_ratio, fo);
    replace_dir(root / sp.name, [&](const fs::path& d) {
      fs::create_directories(d / "audio");
      for (std::size_t u = 0; u < corpus.waveforms.size(); ++u) {
        write_wav(d / "audio" / (corpus.protocol.entries[u].utterance_id + ".wav"), corpus.waveforms[u]);
      }
      write_protocol(d / "protocol.txt", corpus.protocol);
    });
    if (sp.subset == Subset::Train) {
      replace_dir(root / "conditioning", [&](const fs::path& d) {
        for (std::size_t t = 0; t < corpus.conditioning_pool.size(); ++t) {
          char name[32];
          std::snprintf(name, sizeof name, "track_%03zu.txt", t);
          save_conditioning(d / name, corpus.conditioning_pool[t]);
        }
      });
    }
    out << sp.name << ": " << corpus.protocol.count(Label::Bonafide) << " bonafide, "
        << corpus.protocol.count(Label::Spoof) << " spoof -> " << (root / sp.name).string() << "\n";
  }
  out << "binaural: " << pairs.size() << " paired recordings -> " << (root / "binaural").string() << "\n";
  return kOk;
}

// ---- pretrain-m2s -----------------------------------------------------------

int cmd_pretrain(const Common& c, const std::string& corpus_dir, std::ostream& out) {
  const auto cfg = c.resolve<PretrainConfig>();
  const auto corpus = load_binaural_corpus(corpus_dir, cfg.sample_rate);
  const fs::path root = c.out;
  fs::create_directories(root);
  const fs::path log = root / "pretrain_loss.log";
  fs::path log_tmp = log;
  log_tmp += ".tmp";
  fs::remove(log_tmp);
  const auto t0 = std::chrono::steady_clock::now();
  PretrainResult r = pretrain_converter(cfg, corpus, log_tmp);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const nlohmann::json meta{{"epochs", cfg.epochs}, {"seed", cfg.seed}, {"final_loss", r.epoch_loss.back()},
                            {"phase_loss", cfg.phase_loss}};
  save_binauralizer(root / "converter.ckpt", r.model, meta);
  fs::rename(log_tmp, log);
  out << "pretrained " << cfg.epochs << " epochs on " << corpus.size() << " recordings in " << fmt(secs, 3)
      << " s; final loss " << fmt(r.epoch_loss.back(), 10) << "\n";
  out << "checkpoint: " << (root / "converter.ckpt").string() << "\nloss log: " << log.string() << "\n";
  return kOk;
}

// ---- convert ----------------------------------------------------------------

int cmd_convert(const Common& c, const std::string& input, const std::string& checkpoint,
                const std::string& conditioning, std::ostream& out, std::ostream& err) {
  const auto s = c.resolve<ConvertSettings>();
  const auto conv = load_converter(checkpoint);
  const double sr = conv->config().sample_rate;
  const auto pool = load_conditioning_pool(conditioning, sr);
  if (!fs::is_directory(input)) throw IoError("input " + input + " is not a directory of mono .wav files");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(input)) {
    if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .wav files in " + input);

  const fs::path root = c.out;
  fs::create_directories(root);
  std::ostringstream manifest;
  manifest << "# file input_samples output_samples status\n";
  std::size_t failures = 0;
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    try {
      const Waveform mono = load_waveform(f, sr);
      if (mono.channels != 1) throw ValidationError("expected mono audio, found " + std::to_string(mono.channels) + " channels");
      const Waveform stereo = binauralize_utterance(mono, pool, *conv, derive_seed(s.seed, 0xC0E, name_hash(name)));
      write_atomic(root / name, [&](const fs::path& tmp) { write_wav(tmp, stereo); });
      manifest << name << '\t' << mono.length() << '\t' << stereo.length() << "\tok\n";
    } catch (const std::exception& e) {
      ++failures;
      err << "error: " << name << ": " << e.what() << "\n";
      manifest << name << "\t-\t-\terror: " << e.what() << "\n";
    }
  }
  write_file_atomic(root / "manifest.tsv", manifest.str());
  out << "converted " << files.size() - failures << " of " << files.size() << " files -> " << root.string() << "\n";
  return failures == 0 ? kOk : kFailed;
}

// ---- train ------------------------------------------------------------------

struct TrainInputs {
  std::string protocol, audio, conditioning, converter, dev_protocol, dev_audio;
  bool resume = false;
};

int cmd_train(const Common& c, const TrainInputs& in, std::ostream& out, std::ostream& err) {
  const auto cfg = c.resolve<TrainConfig>({"checkpoint_dir=" + c.out});
  if (in.dev_protocol.empty() != in.dev_audio.empty()) {
    throw ValidationError("--dev-protocol and --dev-audio must be given together");
  }
  const auto conv = load_converter(in.converter);
  const double sr = conv->config().sample_rate;
  const auto pool = load_conditioning_pool(in.conditioning, sr);
  const TrialProtocol protocol = parse_protocol(in.protocol, Subset::Train);
  const auto audio = load_protocol_audio(protocol, in.audio, sr, err);

  M2SAdd model(cfg.detector_config(), conv, cfg.seed);
  const ConvertedSet train_set = convert_set(model, protocol, audio, pool, cfg.seed);
  ConvertedSet dev_set;
  if (!in.dev_protocol.empty()) {
    const TrialProtocol dp = parse_protocol(in.dev_protocol, Subset::Dev);
    const auto dev_audio = load_protocol_audio(dp, in.dev_audio, sr, err);
    dev_set = convert_set(model, dp, dev_audio, pool, derive_seed(cfg.seed, 0xDE5, 0));
  }
  out << "training " << model.parameter_count() << " parameters on " << train_set.labels.size() << " utterances";
  if (!in.dev_protocol.empty()) out << " (dev " << dev_set.labels.size() << ")";
  out << "\n";

  TrainOptions opt;
  opt.resume = in.resume;
  opt.on_epoch = [&](const EpochMetrics& m) {
    out << "epoch " << m.epoch << " loss " << fmt(m.train_loss);
    if (!std::isnan(m.dev_eer)) out << " dev_eer " << fmt(100.0 * m.dev_eer, 4) << "%";
    out << " (" << fmt(m.wallclock, 3) << " s)\n";
    out.flush();
  };
  const TrainResult r = train(cfg, model, train_set, in.dev_protocol.empty() ? nullptr : &dev_set, opt);
  out << "best epoch " << r.best_epoch << ": " << r.best_checkpoint.string() << "\n";
  out << "metrics: " << r.metrics_log.string() << "\n";
  return kOk;
}

// ---- eval -------------------------------------------------------------------

struct EvalInputs {
  std::string checkpoint, protocol, audio, conditioning;
  bool ablation = false;
};

int cmd_eval(const Common& c, const EvalInputs& in, std::ostream& out, std::ostream& err) {
  std::vector<std::string> extra;
  if (in.ablation) extra.push_back("ablation=true");
  const auto s = c.resolve<EvalSettings>(extra);
  M2SAdd model = load_detector(in.checkpoint);
  const double sr = model.converter().config().sample_rate;
  const auto pool = load_conditioning_pool(in.conditioning, sr);
  const TrialProtocol protocol = parse_protocol(in.protocol, Subset::Eval);

  const TrialScorer scorer = [&](const Waveform& w, const TrialEntry&, std::uint64_t seed) {
    NoGradGuard guard;
    return logit_scores(model.forward(w, pool, seed, s.ablation))[0];
  };
  const ScoringResult res = score_trials(protocol, in.audio, sr, scorer, s.seed);

  std::vector<std::string> attacks;
  for (const auto& e : protocol.entries) {
    if (e.label == Label::Spoof && std::find(attacks.begin(), attacks.end(), e.attack_id) == attacks.end()) {
      attacks.push_back(e.attack_id);
    }
  }
  const fs::path root = c.out;
  fs::create_directories(root);
  std::ostringstream scores;
  write_score_file(scores, res.scores);
  write_file_atomic(root / "scores.txt", scores.str());

  std::ostringstream errors;
  for (const auto& e : res.errors) {
    err << "error: " << e.utterance_id << ": " << e.message << "\n";
    errors << e.utterance_id << '\t' << e.message << "\n";
  }
  if (!res.errors.empty()) {
    write_file_atomic(root / "errors.txt", errors.str());
  } else {
    fs::remove(root / "errors.txt");
  }

  bool have_both = false;
  for (const auto& r : res.scores.rows) have_both |= r.label == Label::Spoof;
  bool have_bona = false;
  for (const auto& r : res.scores.rows) have_bona |= r.label == Label::Bonafide;
  have_both = have_both && have_bona;
  if (have_both) {
    const AttackReport report = per_attack_report(res.scores, attacks);
    const std::string table = format_report(report);
    write_file_atomic(root / "report.txt", table);
    write_file_atomic(root / "report.csv", format_report_csv(report));
    out << table;
  } else {
    err << "error: scored trials lack bonafide or spoof rows; no EER report written\n";
  }
  out << "scores: " << (root / "scores.txt").string() << " (" << res.scores.rows.size() << " of "
      << protocol.entries.size() << " trials)\n";
  return res.ok() && have_both ? kOk : kFailed;
}

// ---- visualize --------------------------------------------------------------

struct VisualizeInputs {
  std::string bonafide, fake, bonafide_stereo, fake_stereo, checkpoint, conditioning;
};

int cmd_visualize(const Common& c, const VisualizeInputs& in, std::ostream& out) {
  const auto s = c.resolve<VisualizeSettings>();
  const Waveform bona = read_wav(in.bonafide);
  const Waveform fake = read_wav(in.fake);
  Waveform bona_st, fake_st;
  if (!in.bonafide_stereo.empty() && !in.fake_stereo.empty()) {
    bona_st = read_wav(in.bonafide_stereo);
    fake_st = read_wav(in.fake_stereo);
  } else if (!in.checkpoint.empty() && !in.conditioning.empty()) {
    const auto conv = load_converter(in.checkpoint);
    const auto pool = load_conditioning_pool(in.conditioning, conv->config().sample_rate);
    bona_st = binauralize_utterance(bona, pool, *conv, derive_seed(s.seed, 0xC0E, 0));
    fake_st = binauralize_utterance(fake, pool, *conv, derive_seed(s.seed, 0xC0E, 1));
  } else {
    throw ValidationError("give --bonafide-stereo and --fake-stereo, or --checkpoint and --conditioning to convert");
  }
  const GridLayout grid = render_comparison(bona, bona_st, fake, fake_st, s.window_ms / 1000.0, s.hop_ms / 1000.0);
  const fs::path root = c.out;
  fs::create_directories(root);
  write_png(root / "spectrograms.png", grid.image);
  out << "image: " << (root / "spectrograms.png").string() << " (" << grid.image.width << "x" << grid.image.height
      << ")\n";
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mono-to-stereo audio deepfake detection.\nSettings resolve as --config file, then M2S_<KEY> "
               "environment variables, then --set key=value, then --seed.",
               "m2s-add"};
  app.require_subcommand(1);

  Common fx_c, pre_c, conv_c, train_c, eval_c, vis_c;
  std::string corpus, conv_in, conv_ckpt, conv_cond;
  TrainInputs ti;
  EvalInputs ei;
  VisualizeInputs vi;

  auto* fx = app.add_subcommand("fixtures", "write the synthetic fixture corpus (train/dev/eval, conditioning, binaural)");
  fx_c.attach(fx, "output directory");

  auto* pre = app.add_subcommand("pretrain-m2s", "pretrain the mono-to-stereo converter on a paired corpus");
  pre_c.attach(pre, "output directory for converter.ckpt and pretrain_loss.log");
  pre->add_option("--corpus", corpus, "paired corpus: <dir>/<subject>/{mono.wav,binaural.wav,tx_positions.txt}")
      ->required();

  auto* conv = app.add_subcommand("convert", "convert a directory of mono .wav files to stereo");
  conv_c.attach(conv, "output directory for stereo files and manifest.tsv");
  conv->add_option("--input", conv_in, "directory of mono .wav files")->required();
  conv->add_option("--checkpoint", conv_ckpt, "converter or detector checkpoint")->required();
  conv->add_option("--conditioning", conv_cond, "directory of conditioning tracks")->required();

  auto* tr = app.add_subcommand("train", "train the detector behind a frozen converter");
  train_c.attach(tr, "checkpoint directory (last.ckpt, best.ckpt, metrics.log)");
  tr->add_option("--protocol", ti.protocol, "training protocol")->required();
  tr->add_option("--audio", ti.audio, "directory holding <utt_id>.wav")->required();
  tr->add_option("--conditioning", ti.conditioning, "directory of conditioning tracks")->required();
  tr->add_option("--converter", ti.converter, "pretrained converter checkpoint")->required();
  tr->add_option("--dev-protocol", ti.dev_protocol, "development protocol for model selection");
  tr->add_option("--dev-audio", ti.dev_audio, "development audio directory");
  tr->add_flag("--resume", ti.resume, "continue from <out>/last.ckpt");

  auto* ev = app.add_subcommand("eval", "score a protocol and write scores.txt, report.txt and report.csv");
  eval_c.attach(ev, "output directory");
  ev->add_option("--checkpoint", ei.checkpoint, "detector checkpoint")->required();
  ev->add_option("--protocol", ei.protocol, "evaluation protocol")->required();
  ev->add_option("--audio", ei.audio, "directory holding <utt_id>.wav")->required();
  ev->add_option("--conditioning", ei.conditioning, "directory of conditioning tracks")->required();
  ev->add_flag("--ablation", ei.ablation, "score without the dual branch");

  auto* vis = app.add_subcommand("visualize", "spectrogram grid of bonafide and fake audio, mono against left/right");
  vis_c.attach(vis, "output directory for spectrograms.png");
  vis->add_option("--bonafide", vi.bonafide, "bonafide mono .wav")->required();
  vis->add_option("--fake", vi.fake, "fake mono .wav")->required();
  vis->add_option("--bonafide-stereo", vi.bonafide_stereo, "converted bonafide .wav");
  vis->add_option("--fake-stereo", vi.fake_stereo, "converted fake .wav");
  vis->add_option("--checkpoint", vi.checkpoint, "converter checkpoint, used when stereo files are not given");
  vis->add_option("--conditioning", vi.conditioning, "conditioning tracks, used with --checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*fx) return cmd_fixtures(fx_c, out);
    if (*pre) return cmd_pretrain(pre_c, corpus, out);
    if (*conv) return cmd_convert(conv_c, conv_in, conv_ckpt, conv_cond, out, err);
    if (*tr) return cmd_train(train_c, ti, out, err);
    if (*ev) return cmd_eval(eval_c, ei, out, err);
    if (*vis) return cmd_visualize(vis_c, vi, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"m2s-add"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace m2s::cli
