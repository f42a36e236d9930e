#include "m2s/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "m2s/errors.hpp"
#include "m2s/random.hpp"

namespace m2s {

void write_score_file(std::ostream& os, const ScoreFile& sf) {
  char buf[64];
  for (const auto& r : sf.rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.score);
    os << r.utterance_id << ' ' << r.attack_id << ' ' << label_name(r.label) << ' ' << buf << '\n';
  }
}

void write_score_file(const std::filesystem::path& path, const ScoreFile& sf) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  write_score_file(os, sf);
}

ScoreFile read_score_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open score file " + path.string());
  ScoreFile sf;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    ScoreRow r;
    std::string label, score;
    if (!(ls >> r.utterance_id)) continue;
    if (!(ls >> r.attack_id >> label >> score)) throw ParseError("expected `utt attack label score`", lineno);
    r.label = parse_label(label);
    try {
      std::size_t used = 0;
      r.score = std::stod(score, &used);
      if (used != score.size()) throw std::invalid_argument(score);
    } catch (const std::exception&) {
      throw ParseError("bad score '" + score + "'", lineno);
    }
    if (!std::isfinite(r.score)) throw ValidationError("line " + std::to_string(lineno) + ": non-finite score");
    sf.rows.push_back(std::move(r));
  }
  return sf;
}

EerResult compute_eer(std::span<const double> bonafide, std::span<const double> spoof) {
  if (bonafide.empty() || spoof.empty()) throw ValidationError("compute_eer: both score lists must be non-empty");
  std::vector<double> b(bonafide.begin(), bonafide.end()), s(spoof.begin(), spoof.end());
  for (double v : b)
    if (std::isnan(v)) throw ValidationError("compute_eer: NaN score");
  for (double v : s)
    if (std::isnan(v)) throw ValidationError("compute_eer: NaN score");
  std::sort(b.begin(), b.end());
  std::sort(s.begin(), s.end());

  std::vector<double> pooled(b);
  pooled.insert(pooled.end(), s.begin(), s.end());
  std::sort(pooled.begin(), pooled.end());
  pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());

  std::vector<double> thresholds;
  thresholds.reserve(pooled.size() + 1);
  thresholds.push_back(-std::numeric_limits<double>::infinity());
  for (std::size_t i = 1; i < pooled.size(); ++i) thresholds.push_back(0.5 * (pooled[i - 1] + pooled[i]));
  thresholds.push_back(std::numeric_limits<double>::infinity());

  const auto nb = static_cast<double>(b.size()), ns = static_cast<double>(s.size());
  auto frr = [&](double t) {
    return static_cast<double>(std::lower_bound(b.begin(), b.end(), t) - b.begin()) / nb;
  };
  auto far = [&](double t) {
    return static_cast<double>(s.end() - std::lower_bound(s.begin(), s.end(), t)) / ns;
  };

  double prev_frr = frr(thresholds[0]), prev_far = far(thresholds[0]);
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    const double fr = frr(thresholds[i]), fa = far(thresholds[i]);
    if (fr - fa >= 0.0) {
      if (i == 0) return {fr, thresholds[i]};
      const double d0 = prev_frr - prev_far, d1 = fr - fa;
      const double t = d0 / (d0 - d1);
      return {prev_frr + t * (fr - prev_frr), thresholds[i]};
    }
    prev_frr = fr;
    prev_far = fa;
  }
  // At +inf FRR is 1 and FAR is 0, so the loop always returns.
  return {1.0, thresholds.back()};
}

AttackReport per_attack_report(const ScoreFile& sf, std::span<const std::string> expected_attacks) {
  std::vector<double> bona, all_spoof;
  std::map<std::string, std::vector<double>> by_attack;
  for (const auto& r : sf.rows) {
    if (r.label == Label::Bonafide) {
      bona.push_back(r.score);
    } else {
      all_spoof.push_back(r.score);
      by_attack[r.attack_id].push_back(r.score);
    }
  }
  if (bona.empty()) throw ValidationError("per_attack_report: score file has no bonafide rows");
  if (all_spoof.empty()) throw ValidationError("per_attack_report: score file has no spoof rows");

  AttackReport rep;
  for (const auto& [attack, scores] : by_attack) {
    rep.attacks.push_back({attack, static_cast<std::int64_t>(bona.size()), static_cast<std::int64_t>(scores.size()),
                           compute_eer(bona, scores).eer});
  }
  for (const auto& a : expected_attacks) {
    if (!by_attack.contains(a)) rep.notes.push_back("attack " + a + " has no trials; omitted");
  }
  rep.pooled = {"pooled", static_cast<std::int64_t>(bona.size()), static_cast<std::int64_t>(all_spoof.size()),
                compute_eer(bona, all_spoof).eer};
  return rep;
}

std::string format_report(const AttackReport& report) {
  std::size_t width = 6;
  for (const auto& r : report.attacks) width = std::max(width, r.attack_id.size());
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s %10s %10s %8s\n", static_cast<int>(width), "attack", "bonafide", "spoof", "EER(%)");
  os << buf;
  auto row = [&](const AttackRow& r) {
    std::snprintf(buf, sizeof buf, "%-*s %10lld %10lld %8.2f\n", static_cast<int>(width), r.attack_id.c_str(),
                  static_cast<long long>(r.n_bonafide), static_cast<long long>(r.n_spoof), r.eer * 100.0);
    os << buf;
  };
  for (const auto& r : report.attacks) row(r);
  row(report.pooled);
  for (const auto& n : report.notes) os << "# " << n << '\n';
  return os.str();
}

std::string format_report_csv(const AttackReport& report) {
  std::ostringstream os;
  os << "attack,n_bonafide,n_spoof,eer_percent\n";
  char buf[160];
  auto row = [&](const AttackRow& r) {
    std::snprintf(buf, sizeof buf, "%s,%lld,%lld,%.4f\n", r.attack_id.c_str(), static_cast<long long>(r.n_bonafide),
                  static_cast<long long>(r.n_spoof), r.eer * 100.0);
    os << buf;
  };
  for (const auto& r : report.attacks) row(r);
  row(report.pooled);
  return os.str();
}

namespace {

ScoringResult score_impl(const TrialProtocol& protocol, const std::function<Waveform(std::size_t)>& load,
                         const TrialScorer& scorer, std::uint64_t seed) {
  ScoringResult res;
  for (std::size_t i = 0; i < protocol.entries.size(); ++i) {
    const auto& e = protocol.entries[i];
    try {
      const Waveform w = load(i);
      const double score = scorer(w, e, derive_seed(seed, 0x5C0, i));
      if (!std::isfinite(score)) throw ValidationError("non-finite score");
      res.scores.rows.push_back({e.utterance_id, e.attack_id, e.label, score});
    } catch (const std::exception& err) {
      res.errors.push_back({e.utterance_id, err.what()});
    }
  }
  return res;
}

}  // namespace

ScoringResult score_trials(const TrialProtocol& protocol, const std::filesystem::path& audio_dir,
                           double sample_rate, const TrialScorer& scorer, std::uint64_t seed) {
  return score_impl(
      protocol,
      [&](std::size_t i) {
        const auto path = audio_dir / (protocol.entries[i].utterance_id + ".wav");
        if (!std::filesystem::exists(path)) throw IoError("missing audio " + path.string());
        return load_waveform(path, sample_rate);
      },
      scorer, seed);
}

ScoringResult score_trials(const TrialProtocol& protocol, std::span<const Waveform> audio,
                           const TrialScorer& scorer, std::uint64_t seed) {
  if (audio.size() != protocol.entries.size()) throw ValidationError("score_trials: audio/protocol size mismatch");
  return score_impl(protocol, [&](std::size_t i) { return audio[i]; }, scorer, seed);
}

}  // namespace m2s
