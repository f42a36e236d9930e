#pragma once

// Trial scoring, equal error rate and per-attack breakdowns.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "m2s/audio.hpp"
#include "m2s/dataio.hpp"

namespace m2s {

struct ScoreRow {
  std::string utterance_id;
  std::string attack_id;
  Label label = Label::Bonafide;
  double score = 0.0;  // higher means more bonafide
};

struct ScoreFile {
  std::vector<ScoreRow> rows;
};

// Rows `utt_id attack label score`; scores are written with round-trip precision.
void write_score_file(const std::filesystem::path& path, const ScoreFile& sf);
void write_score_file(std::ostream& os, const ScoreFile& sf);
ScoreFile read_score_file(const std::filesystem::path& path);

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

// Sweeps -inf, the midpoints of adjacent sorted unique pooled scores and +inf.
// FRR(t) = fraction of bonafide below t, FAR(t) = fraction of spoof at or
// above t. The EER is read at the first threshold where FRR >= FAR, linearly
// interpolated against the preceding operating point.
EerResult compute_eer(std::span<const double> bonafide, std::span<const double> spoof);

struct AttackRow {
  std::string attack_id;  // "pooled" for the summary row
  std::int64_t n_bonafide = 0;
  std::int64_t n_spoof = 0;
  double eer = 0.0;
};

struct AttackReport {
  std::vector<AttackRow> attacks;  // sorted by attack id
  AttackRow pooled;
  std::vector<std::string> notes;  // e.g. expected attacks without trials
};

// Each attack is scored as all bonafide rows against that attack's spoofs.
// Attacks listed in `expected_attacks` that have no spoof rows are omitted and
// noted.
AttackReport per_attack_report(const ScoreFile& sf, std::span<const std::string> expected_attacks = {});

// Aligned text table with EER in percent (two decimals).
std::string format_report(const AttackReport& report);
// `attack,n_bonafide,n_spoof,eer_percent` rows, pooled last.
std::string format_report_csv(const AttackReport& report);

struct TrialError {
  std::string utterance_id;
  std::string message;
};

struct ScoringResult {
  ScoreFile scores;
  std::vector<TrialError> errors;
  bool ok() const { return errors.empty(); }
};

// Scores one trial; receives the loaded waveform and a per-trial seed.
using TrialScorer = std::function<double(const Waveform&, const TrialEntry&, std::uint64_t)>;

// Loads `<audio_dir>/<utt_id>.wav` for every entry and scores it. Missing or
// unreadable audio, and scorer failures, become row-level errors; the
// remaining trials are still scored.
ScoringResult score_trials(const TrialProtocol& protocol, const std::filesystem::path& audio_dir,
                           double sample_rate, const TrialScorer& scorer, std::uint64_t seed);

// Same, with in-memory audio aligned to `protocol.entries`.
ScoringResult score_trials(const TrialProtocol& protocol, std::span<const Waveform> audio,
                           const TrialScorer& scorer, std::uint64_t seed);

}  // namespace m2s
