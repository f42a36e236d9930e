#include "m2s/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "m2s/errors.hpp"
#include "m2s/random.hpp"

namespace m2s {

namespace fs = std::filesystem;

const char* label_name(Label l) { return l == Label::Bonafide ? "bonafide" : "spoof"; }

Label parse_label(const std::string& key) {
  if (key == "bonafide") return Label::Bonafide;
  if (key == "spoof") return Label::Spoof;
  throw ValidationError("unknown label key '" + key + "' (expected bonafide or spoof)");
}

const char* subset_name(Subset s) {
  switch (s) {
    case Subset::Train: return "train";
    case Subset::Dev: return "dev";
    default: return "eval";
  }
}

Subset parse_subset(const std::string& s) {
  if (s == "train") return Subset::Train;
  if (s == "dev") return Subset::Dev;
  if (s == "eval") return Subset::Eval;
  throw ValidationError("unknown subset '" + s + "'");
}

std::int64_t TrialProtocol::count(Label l) const {
  return std::count_if(entries.begin(), entries.end(), [l](const TrialEntry& e) { return e.label == l; });
}

TrialProtocol parse_protocol(std::istream& in, Subset subset) {
  TrialProtocol p;
  p.subset = subset;
  std::unordered_set<std::string> ids;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<std::string> f;
    for (std::string tok; ls >> tok;) f.push_back(tok);
    if (f.empty()) continue;
    if (f.size() != 5) {
      throw ParseError("expected 5 fields (SPEAKER UTT_ID - ATTACK_ID KEY), found " + std::to_string(f.size()), lineno);
    }
    TrialEntry e;
    e.speaker_id = f[0];
    e.utterance_id = f[1];
    e.attack_id = f[3];
    try {
      e.label = parse_label(f[4]);
    } catch (const ValidationError& err) {
      throw ValidationError("line " + std::to_string(lineno) + ": " + err.what());
    }
    if (!ids.insert(e.utterance_id).second) {
      throw ValidationError("line " + std::to_string(lineno) + ": duplicate utterance id " + e.utterance_id);
    }
    p.entries.push_back(std::move(e));
  }
  return p;
}

TrialProtocol parse_protocol(const fs::path& path, Subset subset) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open protocol " + path.string());
  return parse_protocol(in, subset);
}

void write_protocol(const fs::path& path, const TrialProtocol& protocol) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& e : protocol.entries) {
    os << e.speaker_id << ' ' << e.utterance_id << " - " << e.attack_id << ' ' << label_name(e.label) << '\n';
  }
}

Waveform load_waveform(const fs::path& path, double expected_sr) {
  Waveform w = read_wav(path);
  if (w.length() < 1) throw ValidationError(path.string() + ": zero-length audio");
  if (w.sample_rate != expected_sr) {
    Waveform out;
    out.channels = w.channels;
    out.sample_rate = expected_sr;
    for (int c = 0; c < w.channels; ++c) {
      auto r = resample(w.channel(c), w.sample_rate, expected_sr);
      out.samples.insert(out.samples.end(), r.begin(), r.end());
    }
    out.resampled = true;
    w = std::move(out);
  }
  w.validate();
  return w;
}

SegmentBatch segment_utterance(const Waveform& w, std::int64_t seg_len, std::string utterance_id) {
  if (w.channels != 1) throw ValidationError("segment_utterance expects mono audio");
  if (seg_len < 1) throw ValidationError("segment length must be positive");
  const std::int64_t n = w.length();
  if (n < 1) throw ValidationError("segment_utterance: empty waveform");
  const std::int64_t count = (n + seg_len - 1) / seg_len;
  SegmentBatch batch;
  batch.source_utterance_id = std::move(utterance_id);
  batch.original_length = n;
  batch.segments.reserve(static_cast<std::size_t>(count));
  const auto x = w.channel(0);
  for (std::int64_t s = 0; s < count; ++s) {
    std::vector<double> seg(static_cast<std::size_t>(seg_len));
    for (std::int64_t i = 0; i < seg_len; ++i) seg[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>((s * seg_len + i) % n)];
    batch.segments.push_back(std::move(seg));
  }
  return batch;
}

Waveform merge_segments(std::span<const Waveform> converted, std::int64_t original_length) {
  if (converted.empty()) throw ValidationError("merge_segments: no segments");
  const int channels = converted.front().channels;
  const std::int64_t seg_len = converted.front().length();
  std::int64_t total = 0;
  for (const auto& s : converted) {
    if (s.channels != channels) throw ValidationError("merge_segments: channel-count mismatch between segments");
    if (s.length() != seg_len) throw ValidationError("merge_segments: segments differ in length");
    total += s.length();
  }
  if (original_length < 1 || original_length > total) {
    throw ValidationError("merge_segments: original length " + std::to_string(original_length) +
                          " outside (0, " + std::to_string(total) + "]");
  }
  Waveform out;
  out.channels = channels;
  out.sample_rate = converted.front().sample_rate;
  out.samples.resize(static_cast<std::size_t>(channels * original_length));
  for (int c = 0; c < channels; ++c) {
    std::int64_t pos = 0;
    for (const auto& s : converted) {
      const auto src = s.channel(c);
      const std::int64_t take = std::min<std::int64_t>(seg_len, original_length - pos);
      if (take <= 0) break;
      std::copy_n(src.begin(), take, out.samples.begin() + c * original_length + pos);
      pos += take;
    }
  }
  return out;
}

std::span<const double> ConditioningTrack::feature(int f) const {
  return std::span<const double>(frames).subspan(static_cast<std::size_t>(f * length()),
                                                  static_cast<std::size_t>(length()));
}

ConditioningTrack ConditioningTrack::slice(std::int64_t offset, std::int64_t len) const {
  const std::int64_t n = length();
  if (n < 1) throw ValidationError("slice of empty conditioning track");
  ConditioningTrack out;
  out.n_features = n_features;
  out.sample_rate = sample_rate;
  out.resampled = resampled;
  out.tiled = tiled || offset + len > n;
  out.frames.resize(static_cast<std::size_t>(n_features * len));
  for (int f = 0; f < n_features; ++f) {
    for (std::int64_t t = 0; t < len; ++t) {
      out.frames[static_cast<std::size_t>(f * len + t)] = frames[static_cast<std::size_t>(f * n + (offset + t) % n)];
    }
  }
  return out;
}

void ConditioningTrack::validate() const {
  if (n_features < 1) throw ValidationError("conditioning track without features");
  if (frames.size() % static_cast<std::size_t>(n_features) != 0) throw ValidationError("ragged conditioning track");
  for (double v : frames) {
    if (!std::isfinite(v)) throw ValidationError("non-finite conditioning value");
  }
}

ConditioningTrack sample_conditioning(std::span<const ConditioningTrack> pool, std::int64_t length,
                                      std::uint64_t seed) {
  if (pool.empty()) throw ValidationError("sample_conditioning: empty pool");
  if (length < 1) throw ValidationError("sample_conditioning: length must be positive");
  Rng rng(mix_seed(seed));
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].length() >= length) candidates.push_back(i);
  }
  if (candidates.empty()) {
    std::size_t longest = 0;
    for (std::size_t i = 1; i < pool.size(); ++i) {
      if (pool[i].length() > pool[longest].length()) longest = i;
    }
    ConditioningTrack t = pool[longest].slice(0, length);
    t.tiled = true;
    return t;
  }
  const auto& track = pool[candidates[rng.below(candidates.size())]];
  const auto offset = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(track.length() - length + 1)));
  return track.slice(offset, length);
}

ConditioningTrack resample_conditioning(const ConditioningTrack& track, double target_rate) {
  if (track.sample_rate == target_rate) return track;
  const std::int64_t n = track.length();
  const auto m = std::max<std::int64_t>(1, std::llround(static_cast<double>(n) * target_rate / track.sample_rate));
  ConditioningTrack out;
  out.n_features = track.n_features;
  out.sample_rate = target_rate;
  out.resampled = true;
  out.tiled = track.tiled;
  out.frames.resize(static_cast<std::size_t>(out.n_features * m));
  for (std::int64_t j = 0; j < m; ++j) {
    const double t = static_cast<double>(j) * track.sample_rate / target_rate;
    const auto i0 = std::min<std::int64_t>(static_cast<std::int64_t>(t), n - 1);
    const auto i1 = std::min<std::int64_t>(i0 + 1, n - 1);
    const double a = std::clamp(t - static_cast<double>(i0), 0.0, 1.0);
    for (int f = 0; f < out.n_features; ++f) {
      out.frames[static_cast<std::size_t>(f * m + j)] = (1 - a) * track.at(f, i0) + a * track.at(f, i1);
    }
  }
  return out;
}

ConditioningTrack load_conditioning(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open conditioning track " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw ParseError(path.string() + ": missing header", 1);
  std::istringstream hs(header);
  double sr = 0;
  long long nf = 0, ns = 0;
  if (!(hs >> sr >> nf >> ns) || sr <= 0 || nf < 1 || ns < 1) {
    throw ParseError(path.string() + ": header must be 'sample_rate n_features n_samples'", 1);
  }
  ConditioningTrack t;
  t.n_features = static_cast<int>(nf);
  t.sample_rate = sr;
  t.frames.resize(static_cast<std::size_t>(nf * ns));
  if (path.extension() == ".bin") {
    in.read(reinterpret_cast<char*>(t.frames.data()), static_cast<std::streamsize>(t.frames.size() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(t.frames.size() * sizeof(double))) {
      throw ParseError(path.string() + ": truncated binary payload", 2);
    }
  } else {
    for (long long f = 0; f < nf; ++f) {
      std::string line;
      if (!std::getline(in, line)) throw ParseError(path.string() + ": missing feature row", f + 2);
      std::istringstream ls(line);
      for (long long s = 0; s < ns; ++s) {
        if (!(ls >> t.frames[static_cast<std::size_t>(f * ns + s)])) {
          throw ParseError(path.string() + ": expected " + std::to_string(ns) + " values", f + 2);
        }
      }
    }
  }
  t.validate();
  return t;
}

void save_conditioning(const fs::path& path, const ConditioningTrack& track) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << track.sample_rate << ' ' << track.n_features << ' ' << track.length() << '\n';
  if (path.extension() == ".bin") {
    os.write(reinterpret_cast<const char*>(track.frames.data()),
             static_cast<std::streamsize>(track.frames.size() * sizeof(double)));
    return;
  }
  os.precision(17);
  for (int f = 0; f < track.n_features; ++f) {
    const auto row = track.feature(f);
    for (std::size_t s = 0; s < row.size(); ++s) os << (s ? " " : "") << row[s];
    os << '\n';
  }
}

ConditioningTrack import_tx_positions(const fs::path& path, double frame_rate, double target_rate) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pose file " + path.string());
  std::vector<std::array<double, kConditioningFeatures>> rows;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::array<double, kConditioningFeatures> r{};
    int k = 0;
    for (double v; k < kConditioningFeatures && ls >> v; ++k) r[static_cast<std::size_t>(k)] = v;
    if (k == 0) continue;
    if (k != kConditioningFeatures) throw ParseError(path.string() + ": expected 7 pose columns", lineno);
    rows.push_back(r);
  }
  if (rows.empty()) throw ParseError(path.string() + ": no pose frames", 0);
  ConditioningTrack t;
  t.sample_rate = frame_rate;
  const auto n = static_cast<std::int64_t>(rows.size());
  t.frames.resize(static_cast<std::size_t>(kConditioningFeatures * n));
  for (std::int64_t i = 0; i < n; ++i)
    for (int f = 0; f < kConditioningFeatures; ++f) t.frames[static_cast<std::size_t>(f * n + i)] = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(f)];
  t.validate();
  return resample_conditioning(t, target_rate);
}

void export_tx_positions(const fs::path& path, const ConditioningTrack& track, double frame_rate) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(10);
  const double step = track.sample_rate / frame_rate;
  const auto frames = static_cast<std::int64_t>(std::ceil(static_cast<double>(track.length()) / step));
  for (std::int64_t i = 0; i < frames; ++i) {
    const auto t = std::min<std::int64_t>(std::llround(static_cast<double>(i) * step), track.length() - 1);
    for (int f = 0; f < track.n_features; ++f) os << (f ? " " : "") << track.at(f, t);
    os << '\n';
  }
}

std::vector<ConditioningTrack> load_conditioning_pool(const fs::path& dir, double target_rate) {
  if (!fs::is_directory(dir)) throw IoError("conditioning pool " + dir.string() + " is not a directory");
  std::vector<fs::path> tracks, poses;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && fs::exists(e.path() / "tx_positions.txt")) poses.push_back(e.path() / "tx_positions.txt");
    if (e.is_regular_file() && (e.path().extension() == ".txt" || e.path().extension() == ".bin")) tracks.push_back(e.path());
  }
  std::sort(tracks.begin(), tracks.end());
  std::sort(poses.begin(), poses.end());
  std::vector<ConditioningTrack> pool;
  for (const auto& p : tracks) pool.push_back(resample_conditioning(load_conditioning(p), target_rate));
  for (const auto& p : poses) pool.push_back(import_tx_positions(p, kPoseFrameRate, target_rate));
  if (pool.empty()) {
    throw IoError(dir.string() + ": no conditioning tracks (*.txt, *.bin or <subject>/tx_positions.txt)");
  }
  return pool;
}

std::vector<BinauralPair> load_binaural_corpus(const fs::path& dir, double target_rate) {
  if (!fs::is_directory(dir)) {
    throw IoError("binaural corpus " + dir.string() +
                  " not found; expected <dir>/<subject>/{mono.wav,binaural.wav,tx_positions.txt}");
  }
  std::vector<fs::path> subjects;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) subjects.push_back(e.path());
  }
  std::sort(subjects.begin(), subjects.end());
  std::vector<BinauralPair> out;
  for (const auto& s : subjects) {
    for (const char* f : {"mono.wav", "binaural.wav", "tx_positions.txt"}) {
      if (!fs::exists(s / f)) {
        throw IoError(s.string() + ": missing " + f +
                      " (expected <dir>/<subject>/{mono.wav,binaural.wav,tx_positions.txt})");
      }
    }
    BinauralPair p;
    p.name = s.filename().string();
    p.mono = load_waveform(s / "mono.wav", target_rate);
    p.binaural = load_waveform(s / "binaural.wav", target_rate);
    if (p.mono.channels != 1 || p.binaural.channels != 2) {
      throw ValidationError(s.string() + ": mono.wav must be mono and binaural.wav stereo");
    }
    p.conditioning = import_tx_positions(s / "tx_positions.txt", kPoseFrameRate, target_rate);
    const std::int64_t n = std::min({p.mono.length(), p.binaural.length(), p.conditioning.length()});
    p.mono.samples.resize(static_cast<std::size_t>(n));
    p.binaural = Waveform::stereo(p.binaural.channel(0).first(static_cast<std::size_t>(n)),
                                  p.binaural.channel(1).first(static_cast<std::size_t>(n)), target_rate);
    p.conditioning = p.conditioning.slice(0, n);
    p.conditioning.resampled = true;
    out.push_back(std::move(p));
  }
  if (out.empty()) throw IoError(dir.string() + ": no subject directories");
  return out;
}

void write_binaural_corpus(const fs::path& dir, std::span<const BinauralPair> pairs) {
  fs::create_directories(dir);
  for (const auto& p : pairs) {
    const fs::path s = dir / p.name;
    fs::create_directories(s);
    write_wav(s / "mono.wav", p.mono);
    write_wav(s / "binaural.wav", p.binaural);
    export_tx_positions(s / "tx_positions.txt", p.conditioning, kPoseFrameRate);
  }
}

ConditioningTrack circular_walk(std::int64_t length, double sample_rate, double radius,
                                double revolutions_per_second, double start_angle) {
  ConditioningTrack t;
  t.sample_rate = sample_rate;
  t.frames.assign(static_cast<std::size_t>(kConditioningFeatures * length), 0.0);
  auto set = [&](int f, std::int64_t i, double v) { t.frames[static_cast<std::size_t>(f * length + i)] = v; };
  for (std::int64_t i = 0; i < length; ++i) {
    const double a = start_angle + 2.0 * std::numbers::pi * revolutions_per_second * static_cast<double>(i) / sample_rate;
    set(0, i, radius * std::cos(a));
    set(1, i, radius * std::sin(a));
    set(2, i, 0.0);
    // Source faces the listener: yaw = a + pi about z.
    const double yaw = a + std::numbers::pi;
    set(3, i, std::cos(yaw / 2));
    set(4, i, 0.0);
    set(5, i, 0.0);
    set(6, i, std::sin(yaw / 2));
  }
  return t;
}

namespace {

constexpr double kFixtureNotches[2][2] = {{700.0, 1100.0}, {1900.0, 2500.0}};
constexpr double kSpeedOfSound = 343.0;

struct ToneSpec {
  double f0;
  std::vector<double> phases;
  double am_rate;
  double am_phase;
};

std::vector<double> render_tone(const ToneSpec& spec, std::int64_t n, double sr, bool spoof, Rng& rng) {
  std::vector<double> x(static_cast<std::size_t>(n), 0.0);
  const double top = std::min(4000.0, 0.45 * sr);
  const int harmonics = static_cast<int>(top / spec.f0);
  std::vector<double> phase_walk(static_cast<std::size_t>(harmonics), 0.0);
  for (std::int64_t t = 0; t < n; ++t) {
    const double time = static_cast<double>(t) / sr;
    double s = 0.0;
    for (int k = 1; k <= harmonics; ++k) {
      const double f = spec.f0 * k;
      double ph = spec.phases[static_cast<std::size_t>(k - 1)];
      if (spoof) {
        bool notched = false;
        for (const auto& band : kFixtureNotches) notched |= f >= band[0] && f <= band[1];
        if (notched) continue;
        if (k > 1) {
          phase_walk[static_cast<std::size_t>(k - 1)] += 0.01 * rng.normal();
          ph += phase_walk[static_cast<std::size_t>(k - 1)];
        }
      }
      s += std::sin(2.0 * std::numbers::pi * f * time + ph) / k;
    }
    const double env = 0.6 + 0.4 * std::sin(2.0 * std::numbers::pi * spec.am_rate * time + spec.am_phase);
    x[static_cast<std::size_t>(t)] = env * s;
  }
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::fabs(v));
  for (double& v : x) v *= 0.5 / std::max(peak, 1e-9);
  for (double& v : x) v += 1e-3 * rng.normal();
  if (spoof) {
    // High-band noise floor: white noise through a 2nd-order resonator near 0.8 * Nyquist.
    const double fc = 0.4 * sr, r = 0.9;
    const double a1 = -2.0 * r * std::cos(2.0 * std::numbers::pi * fc / sr), a2 = r * r;
    double y1 = 0, y2 = 0;
    for (double& v : x) {
      const double y = 0.02 * rng.normal() - a1 * y1 - a2 * y2;
      y2 = y1;
      y1 = y;
      v += 0.25 * y;
    }
  }
  return x;
}

}  // namespace

FixtureCorpus synth_fixture_dataset(std::uint64_t seed, int n_utts, double sample_rate, double class_ratio,
                                    const FixtureOptions& options) {
  if (n_utts < 2) throw ValidationError("synth_fixture_dataset: need at least 2 utterances");
  if (!(class_ratio > 0.0 && class_ratio < 1.0)) throw ValidationError("class_ratio must lie in (0, 1)");
  if (options.min_length < 1 || options.max_length < options.min_length) {
    throw ValidationError("synth_fixture_dataset: invalid length range");
  }
  Rng rng(derive_seed(seed, 0xF1));
  const int n_bona = std::clamp(static_cast<int>(std::lround(class_ratio * n_utts)), 1, n_utts - 1);
  const int n_spoof = n_utts - n_bona;

  FixtureCorpus c;
  c.protocol.subset = options.subset;
  const char subset_tag = subset_name(options.subset)[0] - 'a' + 'A';

  std::vector<ToneSpec> tones;
  auto make_tone = [&] {
    ToneSpec t;
    t.f0 = rng.uniform(100.0, 250.0);
    for (int k = 0; k < 64; ++k) t.phases.push_back(rng.uniform(0.0, 2.0 * std::numbers::pi));
    t.am_rate = rng.uniform(3.0, 6.0);
    t.am_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    return t;
  };
  for (int i = 0; i < n_bona; ++i) tones.push_back(make_tone());

  // Interleave classes so any prefix of the corpus holds both.
  std::vector<int> order;
  for (int i = 0, b = 0, s = 0; i < n_utts; ++i) {
    const bool take_bona = s >= n_spoof || (b < n_bona && b * n_spoof <= s * n_bona);
    order.push_back(take_bona ? b++ : -1 - s++);
  }

  for (int i = 0; i < n_utts; ++i) {
    const bool spoof = order[static_cast<std::size_t>(i)] < 0;
    const int k = spoof ? -1 - order[static_cast<std::size_t>(i)] : order[static_cast<std::size_t>(i)];
    const int tone_index = spoof ? (k < n_bona ? k : -1) : k;
    const ToneSpec tone = tone_index >= 0 ? tones[static_cast<std::size_t>(tone_index)] : make_tone();
    const auto len = options.min_length +
                     static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(options.max_length - options.min_length + 1)));
    Rng sig_rng(derive_seed(seed, 0xF2, static_cast<std::uint64_t>(i)));
    c.waveforms.push_back(Waveform::mono(render_tone(tone, len, sample_rate, spoof, sig_rng), sample_rate));
    c.fundamental_hz.push_back(tone.f0);

    TrialEntry e;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%02d", options.id_prefix.c_str(), i % 8);
    e.speaker_id = buf;
    std::snprintf(buf, sizeof buf, "%s_%c_%07d", options.id_prefix.c_str(), subset_tag, i);
    e.utterance_id = buf;
    e.label = spoof ? Label::Spoof : Label::Bonafide;
    e.attack_id = spoof ? (k % 2 == 0 ? "A01" : "A02") : "-";
    c.protocol.entries.push_back(std::move(e));
    c.paired_with.push_back(-1);
  }
  // Resolve spoof -> bonafide pairing by tone index.
  for (int i = 0; i < n_utts; ++i) {
    if (order[static_cast<std::size_t>(i)] >= 0) continue;
    const int k = -1 - order[static_cast<std::size_t>(i)];
    if (k >= n_bona) continue;
    for (int j = 0; j < n_utts; ++j) {
      if (order[static_cast<std::size_t>(j)] == k) c.paired_with[static_cast<std::size_t>(i)] = j;
    }
  }

  const std::int64_t track_len = 2 * options.max_length;
  for (int t = 0; t < options.n_conditioning_tracks; ++t) {
    c.conditioning_pool.push_back(
        circular_walk(track_len, sample_rate, 1.5, rng.uniform(0.05, 0.3), rng.uniform(0.0, 2.0 * std::numbers::pi)));
  }
  return c;
}

std::vector<BinauralPair> synth_binaural_corpus(std::uint64_t seed, int n_speakers, double seconds,
                                                double sample_rate, double ear_offset_m) {
  if (n_speakers < 1 || !(seconds > 0.0)) throw ValidationError("synth_binaural_corpus: invalid size");
  std::vector<BinauralPair> out;
  const auto n = static_cast<std::int64_t>(std::llround(seconds * sample_rate));
  for (int s = 0; s < n_speakers; ++s) {
    Rng rng(derive_seed(seed, 0xB1, static_cast<std::uint64_t>(s)));
    ToneSpec tone;
    tone.f0 = s < n_speakers / 2 ? rng.uniform(90, 140) : rng.uniform(170, 240);  // four low, four high voices
    for (int k = 0; k < 64; ++k) tone.phases.push_back(rng.uniform(0.0, 2.0 * std::numbers::pi));
    tone.am_rate = rng.uniform(3.0, 6.0);
    tone.am_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::vector<double> mono = render_tone(tone, n, sample_rate, false, rng);

    ConditioningTrack pose = circular_walk(n, sample_rate, 1.5, rng.uniform(0.1, 0.3), rng.uniform(0.0, 6.28));
    std::vector<double> ears[2];
    for (int e = 0; e < 2; ++e) {
      const double ear_y = e == 0 ? ear_offset_m : -ear_offset_m;
      ears[e].resize(static_cast<std::size_t>(n));
      double lp = 0.0;
      for (std::int64_t t = 0; t < n; ++t) {
        const double dx = pose.at(0, t), dy = pose.at(1, t) - ear_y, dz = pose.at(2, t);
        const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
        const double pos = std::max(0.0, static_cast<double>(t) - sample_rate * dist / kSpeedOfSound);
        const auto i = static_cast<std::int64_t>(pos);
        const double a = pos - static_cast<double>(i);
        const double v = (1 - a) * mono[static_cast<std::size_t>(i)] +
                         a * mono[static_cast<std::size_t>(std::min<std::int64_t>(i + 1, n - 1))];
        // Far ear (source on the other side) is low-passed.
        const double facing = std::clamp((e == 0 ? 1.0 : -1.0) * pose.at(1, t) / 1.5, -1.0, 1.0);
        const double alpha = 0.55 + 0.4 * facing;
        lp = alpha * v + (1 - alpha) * lp;
        ears[e][static_cast<std::size_t>(t)] = lp / std::max(dist, 0.1);
      }
    }
    BinauralPair p;
    char name[32];
    std::snprintf(name, sizeof name, "subject%d", s + 1);
    p.name = name;
    p.mono = Waveform::mono(std::move(mono), sample_rate);
    p.binaural = Waveform::stereo(ears[0], ears[1], sample_rate);
    p.conditioning = std::move(pose);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace m2s
