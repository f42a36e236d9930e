#pragma once

// Trial protocols, audio ingestion, utterance segmentation, conditioning
// tracks and deterministic synthetic corpora.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "m2s/audio.hpp"

namespace m2s {

inline constexpr std::int64_t kSegmentLength = 64600;

enum class Label { Bonafide = 0, Spoof = 1 };
enum class Subset { Train, Dev, Eval };

const char* label_name(Label l);
Label parse_label(const std::string& key);  // throws ValidationError
const char* subset_name(Subset s);
Subset parse_subset(const std::string& s);

struct TrialEntry {
  std::string speaker_id;
  std::string utterance_id;
  std::string attack_id;  // "-" for bonafide
  Label label = Label::Bonafide;
};

struct TrialProtocol {
  Subset subset = Subset::Train;
  std::vector<TrialEntry> entries;

  std::int64_t count(Label l) const;
};

// Whitespace-separated `SPEAKER UTT_ID - ATTACK_ID KEY` lines; blank lines skipped.
TrialProtocol parse_protocol(const std::filesystem::path& path, Subset subset);
TrialProtocol parse_protocol(std::istream& in, Subset subset);
void write_protocol(const std::filesystem::path& path, const TrialProtocol& protocol);

// Reads linear PCM and converts to `expected_sr` when the container differs
// (the result then has `resampled` set). Zero-length audio is rejected.
Waveform load_waveform(const std::filesystem::path& path, double expected_sr);

struct SegmentBatch {
  std::vector<std::vector<double>> segments;
  std::string source_utterance_id;
  std::int64_t original_length = 0;
};

// Splits a mono waveform into fixed windows; the tail is filled by cyclic
// repetition of the utterance from its first sample.
SegmentBatch segment_utterance(const Waveform& w, std::int64_t seg_len = kSegmentLength,
                               std::string utterance_id = {});

// Concatenates converted segments and truncates to `original_length`.
Waveform merge_segments(std::span<const Waveform> converted, std::int64_t original_length);

// Per-sample source pose: x, y, z in metres, then an orientation quaternion
// (qw, qx, qy, qz). The listener sits at the origin facing +x.
inline constexpr int kConditioningFeatures = 7;

struct ConditioningTrack {
  int n_features = kConditioningFeatures;
  double sample_rate = 16000.0;
  std::vector<double> frames;  // [n_features x length]
  bool tiled = false;          // set when sampling had to repeat a short track
  bool resampled = false;

  std::int64_t length() const {
    return n_features > 0 ? static_cast<std::int64_t>(frames.size()) / n_features : 0;
  }
  double at(int feature, std::int64_t t) const {
    return frames[static_cast<std::size_t>(feature * length() + t)];
  }
  std::span<const double> feature(int f) const;
  ConditioningTrack slice(std::int64_t offset, std::int64_t length) const;
  void validate() const;
};

// Uniform over tracks at least `length` long, then uniform over start offsets.
// When no track is long enough the longest is tiled cyclically and flagged.
ConditioningTrack sample_conditioning(std::span<const ConditioningTrack> pool, std::int64_t length,
                                      std::uint64_t seed);

// Linear interpolation onto a new sample rate.
ConditioningTrack resample_conditioning(const ConditioningTrack& track, double target_rate);

// Header line `sample_rate n_features n_samples`, then one row per feature
// (text) or raw little-endian float64 rows (".bin" files).
ConditioningTrack load_conditioning(const std::filesystem::path& path);
void save_conditioning(const std::filesystem::path& path, const ConditioningTrack& track);

// Frame-per-row pose file with 7 columns captured at `frame_rate`, upsampled
// to `target_rate`.
ConditioningTrack import_tx_positions(const std::filesystem::path& path, double frame_rate, double target_rate);
void export_tx_positions(const std::filesystem::path& path, const ConditioningTrack& track, double frame_rate);

// Loads every track file (*.txt, *.bin) of a directory, or every
// tx_positions.txt of a paired binaural corpus, resampled to `target_rate`.
std::vector<ConditioningTrack> load_conditioning_pool(const std::filesystem::path& dir, double target_rate);

// <mono, binaural> recording with its pose track, all at one sample rate.
struct BinauralPair {
  std::string name;
  Waveform mono;
  Waveform binaural;
  ConditioningTrack conditioning;
};

inline constexpr double kPoseFrameRate = 120.0;

// Directory of subject folders, each holding mono.wav, binaural.wav and
// tx_positions.txt. Everything is brought to `target_rate`.
std::vector<BinauralPair> load_binaural_corpus(const std::filesystem::path& dir, double target_rate);
void write_binaural_corpus(const std::filesystem::path& dir, std::span<const BinauralPair> pairs);

// A source circling the listener at `radius` metres in the horizontal plane.
ConditioningTrack circular_walk(std::int64_t length, double sample_rate, double radius,
                                double revolutions_per_second, double start_angle);

struct FixtureOptions {
  std::int64_t min_length = 6000;
  std::int64_t max_length = 12000;
  int n_conditioning_tracks = 8;
  Subset subset = Subset::Train;
  std::string id_prefix = "FX";
};

struct FixtureCorpus {
  TrialProtocol protocol;
  std::vector<Waveform> waveforms;  // aligned with protocol.entries
  std::vector<ConditioningTrack> conditioning_pool;
  std::vector<double> fundamental_hz;  // per utterance
  std::vector<int> paired_with;        // spoof -> bonafide index sharing f0, or -1
};

// Bonafide utterances are amplitude-modulated harmonic tones; spoofs reuse a
// bonafide tone and add spectral notches, phase jitter and a high-band noise
// floor. Deterministic in `seed`.
FixtureCorpus synth_fixture_dataset(std::uint64_t seed, int n_utts, double sample_rate, double class_ratio,
                                    const FixtureOptions& options = {});

// Paired corpus for converter pretraining: per speaker a circular walk at
// 1.5 m and a binaural rendering with propagation delay, distance gain and a
// head-shadow low-pass on the far ear.
std::vector<BinauralPair> synth_binaural_corpus(std::uint64_t seed, int n_speakers, double seconds,
                                                double sample_rate, double ear_offset_m = 0.0875);

}  // namespace m2s
