#include "m2s/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "m2s/config.hpp"
#include "m2s/errors.hpp"

namespace m2s {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

nlohmann::json history_json(const std::vector<EpochMetrics>& h) {
  auto arr = nlohmann::json::array();
  for (const auto& m : h) {
    arr.push_back({m.epoch, m.train_loss, std::isfinite(m.dev_eer) ? nlohmann::json(m.dev_eer) : nlohmann::json(),
                   m.wallclock});
  }
  return arr;
}

std::vector<EpochMetrics> history_from_json(const nlohmann::json& j) {
  std::vector<EpochMetrics> h;
  for (const auto& r : j) {
    h.push_back({r.at(0).get<std::int64_t>(), r.at(1).get<double>(),
                 r.at(2).is_null() ? std::numeric_limits<double>::quiet_NaN() : r.at(2).get<double>(),
                 r.at(3).get<double>()});
  }
  return h;
}

// Lower is better; dev EER when available, else train loss.
double selection_metric(const EpochMetrics& m) { return std::isfinite(m.dev_eer) ? m.dev_eer : m.train_loss; }

}  // namespace

std::span<const std::string> TrainConfig::keys() {
  static const std::vector<std::string> k{"epochs",    "batch_size", "learning_rate",  "weight_decay", "seed",
                                          "class_weights", "optimizer", "checkpoint_dir", "detector"};
  return k;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "epochs") {
    epochs = parse_int_setting(key, value);
  } else if (key == "batch_size") {
    batch_size = parse_int_setting(key, value);
  } else if (key == "learning_rate") {
    learning_rate = parse_double_setting(key, value);
  } else if (key == "weight_decay") {
    weight_decay = parse_double_setting(key, value);
  } else if (key == "seed") {
    seed = parse_seed_setting(key, value);
  } else if (key == "class_weights") {
    if (value == "auto") {
      class_weights.reset();
      return;
    }
    const auto comma = value.find(',');
    if (comma == std::string::npos) throw ValidationError("class_weights: expected 'auto' or 'bonafide,spoof'");
    class_weights = std::array<double, 2>{parse_double_setting(key, value.substr(0, comma)),
                                          parse_double_setting(key, value.substr(comma + 1))};
  } else if (key == "optimizer") {
    optimizer = value;
  } else if (key == "checkpoint_dir") {
    checkpoint_dir = value;
  } else if (key == "detector") {
    detector = value;
  } else {
    reject_key(key, keys());
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
  if (!(weight_decay > 0.0)) throw ValidationError("weight_decay must be > 0");
  if (class_weights && !((*class_weights)[0] > 0.0 && (*class_weights)[1] > 0.0)) {
    throw ValidationError("class weights must be > 0");
  }
  if (optimizer != "adam") throw ValidationError("optimizer must be adam");
  if (detector != "full" && detector != "fixture") throw ValidationError("detector must be full or fixture");
}

DetectorConfig TrainConfig::detector_config() const {
  return detector == "fixture" ? DetectorConfig::fixture() : DetectorConfig::full();
}

nlohmann::json to_json(const TrainConfig& cfg) {
  nlohmann::json j{{"epochs", cfg.epochs},
                   {"batch_size", cfg.batch_size},
                   {"learning_rate", cfg.learning_rate},
                   {"weight_decay", cfg.weight_decay},
                   {"seed", cfg.seed},
                   {"optimizer", cfg.optimizer},
                   {"checkpoint_dir", cfg.checkpoint_dir.string()},
                   {"detector", cfg.detector}};
  j["class_weights"] = cfg.class_weights ? nlohmann::json(*cfg.class_weights) : nlohmann::json("auto");
  return j;
}

std::array<double, 2> inverse_frequency_weights(std::int64_t n_bonafide, std::int64_t n_spoof) {
  if (n_bonafide < 1 || n_spoof < 1) throw ValidationError("both classes need at least one training utterance");
  const double ib = 1.0 / static_cast<double>(n_bonafide), is = 1.0 / static_cast<double>(n_spoof);
  return {2.0 * ib / (ib + is), 2.0 * is / (ib + is)};
}

Tensor weighted_ce_loss(const Tensor& logits, std::span<const int> labels, std::array<double, 2> weights) {
  return ops::weighted_cross_entropy(logits, labels, weights);
}

ConvertedSet convert_set(const M2SAdd& model, const TrialProtocol& protocol, std::span<const Waveform> audio,
                         std::span<const ConditioningTrack> pool, std::uint64_t seed) {
  if (audio.size() != protocol.entries.size()) throw ValidationError("audio and protocol sizes differ");
  ConvertedSet out;
  for (std::size_t i = 0; i < audio.size(); ++i) {
    const auto& e = protocol.entries[i];
    out.utterance_ids.push_back(e.utterance_id);
    out.attack_ids.push_back(e.attack_id);
    out.labels.push_back(static_cast<int>(e.label));
    out.segments.push_back(model.convert_segments(audio[i], pool, derive_seed(seed, 0xC0E, i)));
  }
  return out;
}

ScoreFile score_converted(M2SAdd& model, const ConvertedSet& set) {
  NoGradGuard guard;
  ScoreFile sf;
  for (std::size_t i = 0; i < set.segments.size(); ++i) {
    const auto s = logit_scores(model.forward_stereo(set.segments[i], false));
    // Mean of segment logits; the score is linear in the logits.
    const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    sf.rows.push_back({set.utterance_ids[i], set.attack_ids[i], static_cast<Label>(set.labels[i]), mean});
  }
  return sf;
}

namespace {

double dev_eer(M2SAdd& model, const ConvertedSet* dev) {
  if (!dev || dev->segments.empty()) return std::numeric_limits<double>::quiet_NaN();
  const ScoreFile sf = score_converted(model, *dev);
  std::vector<double> bona, spoof;
  for (const auto& r : sf.rows) (r.label == Label::Bonafide ? bona : spoof).push_back(r.score);
  if (bona.empty() || spoof.empty()) return std::numeric_limits<double>::quiet_NaN();
  return compute_eer(bona, spoof).eer;
}

Checkpoint training_checkpoint(M2SAdd& model, const Adam& adam, const TrainConfig& cfg,
                               const std::vector<EpochMetrics>& history, std::int64_t best_epoch,
                               std::array<double, 2> weights) {
  nlohmann::json meta{{"seed", cfg.seed},
                      {"train_config", to_json(cfg)},
                      {"epoch", history.empty() ? 0 : history.back().epoch},
                      {"history", history_json(history)},
                      {"best_epoch", best_epoch},
                      {"class_weights", weights},
                      {"optimizer_steps", adam.steps()},
                      {"converter_hash", std::to_string(model.converter().hash())}};
  Checkpoint ck = detector_checkpoint(model, meta);
  for (const auto& m : adam.moments()) {
    const Shape s{static_cast<std::int64_t>(m.m.size())};
    ck.entries.push_back({"optim.m." + m.name, true, s, m.m});
    ck.entries.push_back({"optim.v." + m.name, true, s, m.v});
  }
  return ck;
}

void restore_optimizer(const Checkpoint& ck, Adam& adam) {
  std::vector<Adam::Moments> moments;
  for (const auto& e : ck.entries) {
    if (e.name.rfind("optim.m.", 0) != 0) continue;
    const std::string name = e.name.substr(8);
    const auto* v = ck.find("optim.v." + name);
    if (!v) throw ValidationError("checkpoint lacks second moments for " + name);
    moments.push_back({name, e.values, v->values});
  }
  adam.restore(ck.meta.at("optimizer_steps").get<std::int64_t>(), std::move(moments));
}

}  // namespace

TrainResult train(const TrainConfig& cfg, M2SAdd& model, const ConvertedSet& train_set, const ConvertedSet* dev_set,
                  const TrainOptions& opt) {
  cfg.validate();
  const std::size_t n = train_set.segments.size();
  if (n == 0) throw ValidationError("empty training set");
  if (!model.converter().frozen()) throw ValidationError("the converter must be frozen before detector training");

  std::int64_t n_bona = 0;
  for (int l : train_set.labels) n_bona += l == 0 ? 1 : 0;
  TrainResult result;
  result.class_weights = cfg.class_weights ? *cfg.class_weights
                                           : inverse_frequency_weights(n_bona, static_cast<std::int64_t>(n) - n_bona);

  namespace fs = std::filesystem;
  fs::create_directories(cfg.checkpoint_dir);
  result.last_checkpoint = cfg.checkpoint_dir / "last.ckpt";
  result.best_checkpoint = cfg.checkpoint_dir / "best.ckpt";
  result.metrics_log = cfg.checkpoint_dir / "metrics.log";

  const std::uint64_t converter_hash = model.converter().hash();
  const nn::StateDict sd = model.state_dict();
  Adam adam({cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
  std::int64_t start = 1;
  double best_metric = std::numeric_limits<double>::infinity();
  double wall_offset = 0.0;

  if (opt.resume && fs::exists(result.last_checkpoint)) {
    const Checkpoint ck = load_checkpoint(result.last_checkpoint);
    if (ck.meta.at("seed").get<std::uint64_t>() != cfg.seed) {
      throw ValidationError("cannot resume: checkpoint seed differs from the configured seed");
    }
    if (ck.meta.at("converter_hash").get<std::string>() != std::to_string(converter_hash)) {
      throw ValidationError("cannot resume: checkpoint was trained with a different converter");
    }
    ck.restore(sd);
    restore_optimizer(ck, adam);
    result.history = history_from_json(ck.meta.at("history"));
    result.best_epoch = ck.meta.at("best_epoch").get<std::int64_t>();
    for (const auto& m : result.history) {
      if (m.epoch == result.best_epoch) best_metric = selection_metric(m);
    }
    start = ck.meta.at("epoch").get<std::int64_t>() + 1;
    if (!result.history.empty()) wall_offset = result.history.back().wallclock;
  } else {
    std::ofstream log(result.metrics_log, std::ios::trunc);
    if (!log) throw IoError("cannot write " + result.metrics_log.string());
    log << "# epoch train_loss dev_eer wallclock\n";
  }

  const auto t0 = Clock::now();
  const std::int64_t T = train_set.segments.front().size(2);
  std::int64_t ran = 0;
  for (std::int64_t epoch = start; epoch <= cfg.epochs; ++epoch) {
    if (opt.stop_after > 0 && ran >= opt.stop_after) break;
    Rng rng(derive_seed(cfg.seed, 0x7A1, static_cast<std::uint64_t>(epoch)));
    auto order = iota_indices(n);
    rng.shuffle(order.begin(), order.end());
    std::vector<std::int64_t> pick(n);
    for (std::size_t i : order) pick[i] = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(train_set.segments[i].size(0))));

    double loss_sum = 0.0;
    std::int64_t batches = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t b1 = std::min(n, b0 + static_cast<std::size_t>(cfg.batch_size));
      std::vector<double> x;
      std::vector<int> labels;
      for (std::size_t k = b0; k < b1; ++k) {
        const std::size_t i = order[k];
        const auto v = train_set.segments[i].values();
        const auto off = static_cast<std::size_t>(pick[i] * 2 * T);
        x.insert(x.end(), v.begin() + static_cast<std::ptrdiff_t>(off), v.begin() + static_cast<std::ptrdiff_t>(off + 2 * T));
        labels.push_back(train_set.labels[i]);
      }
      sd.zero_grad();
      const Tensor logits = model.forward_stereo(Tensor({static_cast<std::int64_t>(b1 - b0), 2, T}, std::move(x)), true);
      Tensor loss;
      double value = std::numeric_limits<double>::quiet_NaN();
      try {
        loss = weighted_ce_loss(logits, labels, result.class_weights);
        value = loss.item();
      } catch (const ValidationError&) {
      }
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite training loss at epoch " << epoch << ", batch " << batches + 1 << "; last good checkpoint: "
            << (fs::exists(result.last_checkpoint) ? result.last_checkpoint.string() : std::string("none"));
        throw TrainingAborted(msg.str());
      }
      loss.backward();
      adam.step(sd);
      loss_sum += value;
      ++batches;
    }

    if (model.converter().hash() != converter_hash) throw TrainingAborted("converter parameters changed during training");

    EpochMetrics m{epoch, loss_sum / static_cast<double>(batches), dev_eer(model, dev_set),
                   wall_offset + seconds_since(t0)};
    result.history.push_back(m);
    const bool improved = selection_metric(m) < best_metric;
    if (improved) {
      best_metric = selection_metric(m);
      result.best_epoch = epoch;
    }
    const Checkpoint ck = training_checkpoint(model, adam, cfg, result.history, result.best_epoch, result.class_weights);
    save_checkpoint(result.last_checkpoint, ck);
    if (improved) {
      save_checkpoint(result.best_checkpoint, ck);
      std::ostringstream card;
      card << "M2S-ADD detector, best epoch " << epoch << "\n"
           << "selection: " << (std::isfinite(m.dev_eer) ? "dev EER " + fmt("%.6f", m.dev_eer) : "train loss " + fmt("%.6f", m.train_loss))
           << "\nseed: " << cfg.seed << "\ntrain config: " << to_json(cfg).dump() << "\n"
           << "detector parameters: " << model.parameter_count() << "\n";
      write_model_card(result.best_checkpoint, card.str());
    }
    {
      std::ofstream log(result.metrics_log, std::ios::app);
      log << m.epoch << ' ' << fmt("%.10g", m.train_loss) << ' ' << fmt("%.6f", m.dev_eer) << ' '
          << fmt("%.3f", m.wallclock) << '\n';
    }
    if (opt.on_epoch) opt.on_epoch(m);
    ++ran;
  }
  return result;
}

std::span<const std::string> PretrainConfig::keys() {
  static const std::vector<std::string> k{"epochs",        "batch_size",   "learning_rate", "seed",
                                          "chunk_length",  "phase_loss",   "phase_weight",  "warp_channels",
                                          "tcn_channels",  "tcn_blocks",   "ear_offset_m",  "segment_length",
                                          "sample_rate"};
  return k;
}

void PretrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "epochs") epochs = parse_int_setting(key, value);
  else if (key == "batch_size") batch_size = parse_int_setting(key, value);
  else if (key == "learning_rate") learning_rate = parse_double_setting(key, value);
  else if (key == "seed") seed = parse_seed_setting(key, value);
  else if (key == "chunk_length") chunk_length = parse_int_setting(key, value);
  else if (key == "phase_loss") phase_loss = parse_bool_setting(key, value);
  else if (key == "phase_weight") phase_weight = parse_double_setting(key, value);
  else if (key == "warp_channels") warp_channels = parse_int_setting(key, value);
  else if (key == "tcn_channels") tcn_channels = parse_int_setting(key, value);
  else if (key == "tcn_blocks") tcn_blocks = parse_int_setting(key, value);
  else if (key == "ear_offset_m") ear_offset_m = parse_double_setting(key, value);
  else if (key == "segment_length") segment_length = parse_int_setting(key, value);
  else if (key == "sample_rate") sample_rate = parse_double_setting(key, value);
  else reject_key(key, keys());
}

void PretrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
  if (chunk_length < 16) throw ValidationError("chunk_length must be >= 16");
  if (warp_channels < 1 || tcn_channels < 1 || tcn_blocks < 1) throw ValidationError("layer sizes must be >= 1");
  if (!(ear_offset_m >= 0.0)) throw ValidationError("ear_offset_m must be >= 0");
  if (segment_length < 1) throw ValidationError("segment_length must be >= 1");
  if (!(sample_rate > 0.0)) throw ValidationError("sample_rate must be > 0");
}

BinauralizerConfig PretrainConfig::converter_config() const {
  BinauralizerConfig c;
  c.sample_rate = sample_rate;
  c.ear_offset_m = ear_offset_m;
  c.warp_channels = static_cast<int>(warp_channels);
  c.tcn_channels = static_cast<int>(tcn_channels);
  c.tcn_blocks = static_cast<int>(tcn_blocks);
  c.segment_length = segment_length;
  return c;
}

PretrainResult pretrain_converter(const PretrainConfig& cfg, std::span<const BinauralPair> corpus,
                                  const std::filesystem::path& loss_log) {
  cfg.validate();
  for (const auto& p : corpus) {
    if (p.mono.sample_rate != cfg.sample_rate || p.binaural.sample_rate != cfg.sample_rate) {
      throw ValidationError(p.name + ": corpus audio is not at " + fmt("%.0f", cfg.sample_rate) + " Hz");
    }
  }
  const auto chunks = make_pretrain_chunks(corpus, cfg.chunk_length);
  PretrainResult result{Binauralizer(cfg.converter_config(), cfg.seed), {}};
  Adam adam({cfg.learning_rate, 0.9, 0.999, 1e-8, 0.0});
  PretrainOptions popt;
  popt.phase_loss = cfg.phase_loss;
  popt.phase_weight = cfg.phase_weight;

  std::ofstream log;
  if (!loss_log.empty()) {
    log.open(loss_log, std::ios::trunc);
    if (!log) throw IoError("cannot write " + loss_log.string());
    log << "# epoch loss wallclock\n";
  }
  const auto t0 = Clock::now();
  for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 0x9E7, static_cast<std::uint64_t>(epoch)));
    auto order = iota_indices(chunks.size());
    rng.shuffle(order.begin(), order.end());
    double sum = 0.0;
    std::int64_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> which(order.data() + b0, b1 - b0);
      sum += pretrain_step(result.model, stack_batch(chunks, which), adam, popt);
      ++batches;
    }
    result.epoch_loss.push_back(sum / static_cast<double>(batches));
    if (log) log << epoch << ' ' << fmt("%.10g", result.epoch_loss.back()) << ' ' << fmt("%.3f", seconds_since(t0)) << '\n';
  }
  result.model.set_pretrained(true);
  result.model.set_frozen(true);
  return result;
}

}  // namespace m2s
