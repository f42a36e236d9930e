// Acceptance suite: one PASS/FAIL line per criterion. Run all, or pass the
// criterion numbers to run a subset. Exit status is nonzero if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "eer_oracle.hpp"
#include "gradcheck.hpp"
#include "m2s/cli.hpp"
#include "m2s/evaluation.hpp"
#include "m2s/model.hpp"
#include "m2s/training.hpp"
#include "tempdir.hpp"

using namespace m2s;
using namespace m2s::testing;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kAttentionTol = 1e-6;
constexpr double kGradRelTol = 1e-3;
constexpr double kIdentityTol = 1e-6;
constexpr double kTrainEerMax = 0.05;
constexpr double kShapeBudgetS = 60.0;
constexpr double kGradBudgetS = 300.0;
constexpr double kPipelineBudgetS = 600.0;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

std::string shape_text(const Shape& s) {
  std::string t = "(";
  for (std::size_t i = 0; i < s.size(); ++i) t += (i ? "," : "") + std::to_string(s[i]);
  return t + ")";
}

std::shared_ptr<Binauralizer> small_converter(std::int64_t seg, std::uint64_t seed = 5) {
  BinauralizerConfig c;
  c.warp_channels = 8;
  c.tcn_channels = 8;
  c.tcn_blocks = 1;
  c.segment_length = seg;
  auto conv = std::make_shared<Binauralizer>(c, seed);
  conv->set_frozen(true);
  return conv;
}

// ---- 1 ----------------------------------------------------------------------

Verdict shape_contract() {
  const auto t0 = std::chrono::steady_clock::now();
  const DetectorConfig cfg = DetectorConfig::full();
  M2SAdd model(cfg, std::make_shared<Binauralizer>(BinauralizerConfig{}, 1), 1234);
  Rng rng(1);
  const Tensor stereo = random_tensor(rng, {1, 2, 64600});
  ShapeTrace trace;
  Tensor logits;
  {
    NoGradGuard guard;
    logits = model.forward_stereo(stereo, false, &trace);
  }
  const std::vector<std::pair<std::string, Shape>> expected{
      {"left.sinc_conv", {70, 64472}},  {"left.sinc_out", {1, 23, 21490}}, {"left.block2", {32, 23, 2387}},
      {"left.block6", {64, 23, 29}},    {"right.sinc_conv", {70, 64472}}, {"right.sinc_out", {1, 23, 21490}},
      {"right.block2", {32, 23, 2387}}, {"right.block6", {64, 23, 29}},   {"left.gat", {32, 23}},
      {"left.pool", {32, 14}},          {"left.proj", {32, 12}},          {"right.gat", {32, 29}},
      {"right.pool", {32, 23}},         {"right.proj", {32, 12}},         {"fusion.input", {32, 12}},
      {"fusion.gat", {16, 12}},         {"fusion.pool", {16, 7}},         {"fusion.proj", {1, 7}},
      {"classifier", {2}}};
  std::string bad;
  for (const auto& [name, shape] : expected) {
    try {
      const Shape& got = trace.at(name);
      if (got != shape) bad += " " + name + "=" + shape_text(got) + "!=" + shape_text(shape);
    } catch (const std::out_of_range&) {
      bad += " " + name + " missing";
    }
  }
  if (logits.shape() != Shape{1, 2}) bad += " logits=" + shape_text(logits.shape());
  const double secs = seconds_since(t0);
  if (secs > kShapeBudgetS) bad += " runtime " + fmt(secs) + " s over budget";
  if (!bad.empty()) return {false, "mismatch:" + bad};
  return {true, std::to_string(expected.size()) + " shapes exact, " + fmt(secs, 3) + " s"};
}

// ---- 2 ----------------------------------------------------------------------

Verdict attention_normalisation() {
  Rng rng(2);
  double worst = 0.0;
  bool negative = false;
  for (int g = 0; g < 100; ++g) {
    const auto n = static_cast<std::int64_t>(1 + rng.below(32));
    const auto d = static_cast<std::int64_t>(1 + rng.below(16));
    const double scale = rng.uniform(0.1, 5.0);
    GatLayer gat(d, 4, rng);
    for (double& w : gat.attention_weight().mutable_values()) w = rng.uniform(-scale, scale);
    const Tensor h = random_tensor(rng, {2, n, d}, -scale, scale);
    const Tensor a = gat.attention(h);
    const auto v = a.values();
    for (std::int64_t b = 0; b < 2; ++b) {
      for (std::int64_t target = 0; target < n; ++target) {
        double s = 0.0;
        for (std::int64_t src = 0; src < n; ++src) {
          const double x = v[static_cast<std::size_t>((b * n + target) * n + src)];
          negative |= x < 0.0;
          s += x;
        }
        worst = std::max(worst, std::fabs(s - 1.0));
      }
    }
  }
  return {worst <= kAttentionTol && !negative, "100 graphs, N in [1,32], max |sum - 1| = " + fmt(worst, 3)};
}

// ---- 3 ----------------------------------------------------------------------

Verdict gradient_checks() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(3);
  std::vector<GradProbe> probes;
  auto add = [&](std::vector<GradProbe> p) { probes.insert(probes.end(), p.begin(), p.end()); };

  {
    SincNetLayer layer(SincConfig{});
    const Tensor x = random_tensor(rng, {1, 1, 1000});
    auto loss = [&] { return probe_loss(layer.forward(x, false)); };
    add(check_gradients("sinc low cutoff", layer.filterbank().raw_low(), loss, random_indices(rng, 70, 5), 1e-5));
    add(check_gradients("sinc band", layer.filterbank().raw_band(), loss, random_indices(rng, 70, 5), 1e-5));
  }
  {
    GatLayer gat(6, 5, rng);
    const Tensor h = random_tensor(rng, {2, 7, 6}, -1.5, 1.5);
    auto loss = [&] { return probe_loss(gat.forward(h, false)); };
    add(check_gradients("gat W", gat.attention_weight(), loss,
                        random_indices(rng, static_cast<std::size_t>(gat.attention_weight().numel()), 5)));
  }
  {
    const std::int64_t T = 40;
    const Tensor x = random_tensor(rng, {1, T});
    std::vector<double> w;
    for (int e = 0; e < 2; ++e) {
      for (std::int64_t t = 0; t < T; ++t) {
        w.push_back(static_cast<double>(t) - 2.3 - 0.4 * e + 0.3 * std::sin(0.2 * static_cast<double>(t)));
      }
    }
    Tensor warp = Tensor::parameter({1, 2, T}, w);
    auto loss = [&] { return probe_loss(apply_warp(x, warp)); };
    // Away from the clamp at the start.
    std::vector<std::size_t> idx;
    for (std::size_t i : random_indices(rng, static_cast<std::size_t>(T - 6), 5)) {
      idx.push_back(i + 6 + (rng.below(2) ? static_cast<std::size_t>(T) : 0));
    }
    add(check_gradients("warp", warp, loss, idx));
  }
  {
    DetectorConfig cfg = DetectorConfig::fixture();
    cfg.segment_length = 1200;
    cfg.frontend.block_channels = {4, 8};
    M2SAdd model(cfg, small_converter(cfg.segment_length), 1234);
    const Tensor stereo = random_tensor(rng, {2, 2, cfg.segment_length});
    auto loss = [&] { return probe_loss(model.forward_stereo(stereo, false)); };
    nn::StateDict sd = model.state_dict();
    const auto params = sd.parameters();
    for (int k = 0; k < 5; ++k) {
      const auto& [name, p] = params[static_cast<std::size_t>(rng.below(params.size()))];
      add(check_gradients("model " + name, *p, loss,
                          random_indices(rng, static_cast<std::size_t>(p->numel()), 1)));
    }
  }

  double worst = 0.0;
  std::string worst_site;
  for (const auto& p : probes) {
    if (p.rel_error > worst) {
      worst = p.rel_error;
      worst_site = p.site;
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = worst <= kGradRelTol && secs <= kGradBudgetS;
  return {ok, std::to_string(probes.size()) + " probes, worst rel error " + fmt(worst, 3) + " (" + worst_site +
                  "), " + fmt(secs, 3) + " s"};
}

// ---- 4 ----------------------------------------------------------------------

Verdict warp_physics() {
  Rng rng(4);
  std::int64_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = 1 + rng.below(300);
    std::vector<double> raw(n);
    for (std::size_t t = 0; t < n; ++t) raw[t] = static_cast<double>(t) + rng.uniform(-40.0, 20.0);
    const auto p = enforce_warp(raw);
    for (std::size_t t = 0; t < n; ++t) {
      if (p[t] > static_cast<double>(t)) ++violations;
      if (t > 0 && p[t] < p[t - 1]) ++violations;
    }
  }

  BinauralizerConfig cfg;
  cfg.warp_channels = 8;
  cfg.tcn_channels = 8;
  cfg.ear_offset_m = 0.0;
  Binauralizer model(cfg, 7);
  model.set_frozen(true);
  const std::int64_t len = 70000;
  ConditioningTrack still;
  still.frames.assign(static_cast<std::size_t>(7 * len), 0.0);
  for (std::int64_t t = 0; t < len; ++t) still.frames[static_cast<std::size_t>(3 * len + t)] = 1.0;
  std::vector<double> x(static_cast<std::size_t>(len));
  for (double& v : x) v = rng.uniform(-0.8, 0.8);
  const Waveform y = binauralize_utterance(Waveform::mono(x, 16000.0), std::span<const ConditioningTrack>(&still, 1),
                                           model, 11);
  double worst = 0.0;
  for (int ch = 0; ch < 2; ++ch) {
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::fabs(y.channel(ch)[i] - x[i]));
  }
  const bool ok = violations == 0 && y.length() == len && worst <= kIdentityTol;
  return {ok, "1000 warpfields, " + std::to_string(violations) + " violations; identity max abs error " +
                  fmt(worst, 3)};
}

// ---- 5 ----------------------------------------------------------------------

Verdict eer_oracle() {
  Rng rng(5);
  int mismatches = 0;
  for (int inst = 0; inst < 500; ++inst) {
    const auto nb = 1 + rng.below(100), ns = 1 + rng.below(100);
    const bool coarse = rng.below(3) == 0;  // many ties
    const double shift = rng.uniform(-1.0, 2.0);
    std::vector<double> bona(nb), spoof(ns);
    for (double& v : bona) v = coarse ? std::round(4.0 * rng.normal() + shift) : rng.normal() + shift;
    for (double& v : spoof) v = coarse ? std::round(4.0 * rng.normal()) : rng.normal();
    if (compute_eer(bona, spoof).eer != brute_force_eer(bona, spoof)) ++mismatches;
  }
  const std::vector<double> hi{0.9, 0.8}, lo{0.1, 0.2}, one_lo{0.1}, one_hi{0.9};
  const double sep = compute_eer(hi, lo).eer;
  const double inv = compute_eer(one_lo, one_hi).eer;
  const bool ok = mismatches == 0 && sep == 0.0 && inv == 1.0;
  return {ok, "500 instances, " + std::to_string(mismatches) + " mismatches; separated " + fmt(sep) + ", inverted " +
                  fmt(inv)};
}

// ---- 6 and 8 ----------------------------------------------------------------

struct PipelineRun {
  bool ok = false;
  std::string error;
  double seconds = 0.0;
  double first_loss = 0.0, last_loss = 0.0;
  std::int64_t epochs = 0;
  double train_eer = 1.0;
  std::string train_scores, eval_scores, stereo_manifest;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// fixtures -> pretrain-m2s -> convert -> train -> eval, through the command suite.
PipelineRun fixture_pipeline(const fs::path& root) {
  PipelineRun r;
  const auto t0 = std::chrono::steady_clock::now();
  const std::string configs = M2S_SOURCE_DIR "/configs/";
  const std::string data = (root / "data").string(), conv = (root / "conv").string(), run = (root / "run").string();
  const std::string pool = data + "/conditioning";
  const std::vector<std::vector<std::string>> steps{
      {"fixtures", "--out", data, "--seed", "1234"},
      {"pretrain-m2s", "--corpus", data + "/binaural", "--out", conv, "--config", configs + "fixture_pretrain.cfg",
       "--seed", "1234"},
      {"convert", "--input", data + "/eval/audio", "--checkpoint", conv + "/converter.ckpt", "--conditioning", pool,
       "--out", (root / "stereo").string(), "--seed", "1234"},
      {"train", "--protocol", data + "/train/protocol.txt", "--audio", data + "/train/audio", "--conditioning", pool,
       "--converter", conv + "/converter.ckpt", "--dev-protocol", data + "/dev/protocol.txt", "--dev-audio",
       data + "/dev/audio", "--config", configs + "fixture_train.cfg", "--out", run, "--seed", "1234"},
      {"eval", "--checkpoint", run + "/last.ckpt", "--protocol", data + "/train/protocol.txt", "--audio",
       data + "/train/audio", "--conditioning", pool, "--out", (root / "eval_train").string(), "--seed", "1234"},
      {"eval", "--checkpoint", run + "/best.ckpt", "--protocol", data + "/eval/protocol.txt", "--audio",
       data + "/eval/audio", "--conditioning", pool, "--out", (root / "eval").string(), "--seed", "1234"},
  };
  for (const auto& args : steps) {
    std::ostringstream out, err;
    if (cli::run(args, out, err) != cli::kOk) {
      r.error = args[0] + " failed: " + err.str();
      return r;
    }
  }
  r.seconds = seconds_since(t0);

  std::ifstream log(root / "run" / "metrics.log");
  for (std::string line; std::getline(log, line);) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::int64_t epoch;
    double loss;
    is >> epoch >> loss;
    if (r.epochs == 0) r.first_loss = loss;
    r.last_loss = loss;
    r.epochs = epoch;
  }
  const ScoreFile sf = read_score_file(root / "eval_train" / "scores.txt");
  std::vector<double> bona, spoof;
  for (const auto& row : sf.rows) (row.label == Label::Bonafide ? bona : spoof).push_back(row.score);
  r.train_eer = compute_eer(bona, spoof).eer;
  r.train_scores = slurp(root / "eval_train" / "scores.txt");
  r.eval_scores = slurp(root / "eval" / "scores.txt");
  r.stereo_manifest = slurp(root / "stereo" / "manifest.tsv");
  for (const auto& e : fs::directory_iterator(root / "stereo")) r.stereo_manifest += slurp(e.path());
  r.ok = true;
  return r;
}

struct PipelineCache {
  TempDir dir{"m2s_accept"};
  std::optional<PipelineRun> first;
  const PipelineRun& get() {
    if (!first) first = fixture_pipeline(dir / "a");
    return *first;
  }
};

Verdict smoke_training(PipelineCache& cache) {
  const PipelineRun& r = cache.get();
  if (!r.ok) return {false, r.error};
  const bool ok = r.epochs >= 30 && r.epochs <= 100 && r.train_eer <= kTrainEerMax && r.last_loss < r.first_loss &&
                  r.seconds <= kPipelineBudgetS;
  return {ok, std::to_string(r.epochs) + " epochs, train EER " + fmt(r.train_eer) + ", loss " + fmt(r.first_loss) +
                  " -> " + fmt(r.last_loss) + ", pipeline " + fmt(r.seconds, 3) + " s"};
}

Verdict determinism(PipelineCache& cache) {
  const PipelineRun& a = cache.get();
  if (!a.ok) return {false, a.error};
  const PipelineRun b = fixture_pipeline(cache.dir / "b");
  if (!b.ok) return {false, b.error};
  const bool same = a.train_scores == b.train_scores && a.eval_scores == b.eval_scores &&
                    a.stereo_manifest == b.stereo_manifest;
  return {same && !a.eval_scores.empty(), same ? "two seed-1234 pipelines: score files and stereo outputs bit-identical"
                                               : "score files differ between runs"};
}

// ---- 7 ----------------------------------------------------------------------

Verdict ablation_path() {
  const DetectorConfig cfg = DetectorConfig::fixture();
  M2SAdd model(cfg, small_converter(cfg.segment_length), 1234);
  FixtureOptions fo;
  fo.subset = Subset::Eval;
  const FixtureCorpus corpus = synth_fixture_dataset(1234, 6, 16000.0, 0.5, fo);
  int differing = 0;
  std::size_t n = 0;
  NoGradGuard guard;
  for (std::size_t i = 0; i < corpus.waveforms.size(); ++i, ++n) {
    const double full = logit_scores(model.forward(corpus.waveforms[i], corpus.conditioning_pool, 9, false))[0];
    const double abl = logit_scores(model.forward(corpus.waveforms[i], corpus.conditioning_pool, 9, true))[0];
    if (!std::isfinite(full) || !std::isfinite(abl)) return {false, "non-finite score"};
    differing += full != abl;
  }
  return {differing == static_cast<int>(n),
          std::to_string(differing) + " of " + std::to_string(n) + " utterance scores differ from the full model"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  PipelineCache cache;
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"shape contract (64600-sample input)", shape_contract},
      {"attention normalisation", attention_normalisation},
      {"finite-difference gradients", gradient_checks},
      {"warp monotonicity, causality and identity", warp_physics},
      {"EER equals the brute-force sweep", eer_oracle},
      {"smoke training on the fixture corpus", [&] { return smoke_training(cache); }},
      {"ablation path differs from the full model", ablation_path},
      {"determinism of the fixture pipeline", [&] { return determinism(cache); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << id << "  " << criteria[i].first << ": " << v.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
