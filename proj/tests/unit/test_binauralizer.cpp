#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "m2s/binauralizer.hpp"
#include "m2s/errors.hpp"

using namespace m2s;
using m2s::testing::check_gradients;
using m2s::testing::probe_loss;
using m2s::testing::random_indices;
using m2s::testing::random_tensor;

namespace {

BinauralizerConfig small_config() {
  BinauralizerConfig cfg;
  cfg.warp_channels = 8;
  cfg.tcn_channels = 8;
  return cfg;
}

// Static pose track: every frame has the source at (x, y, z) facing the listener.
Tensor static_pose(std::int64_t T, double x, double y, double z) {
  std::vector<double> v(static_cast<std::size_t>(7 * T), 0.0);
  for (std::int64_t t = 0; t < T; ++t) {
    v[static_cast<std::size_t>(t)] = x;
    v[static_cast<std::size_t>(T + t)] = y;
    v[static_cast<std::size_t>(2 * T + t)] = z;
    v[static_cast<std::size_t>(3 * T + t)] = 1.0;
  }
  return Tensor({1, 7, T}, std::move(v));
}

void randomise(Tensor& t, Rng& rng, double scale) {
  for (double& v : t.mutable_values()) v = rng.uniform(-scale, scale);
}

}  // namespace

TEST_CASE("geometric warpfield") {
  const Tensor at_ear = geometric_warpfield(static_pose(50, 0, 0, 0), 16000, 0.0);
  for (int e = 0; e < 2; ++e)
    for (int t = 0; t < 50; ++t) CHECK(at_ear.values()[static_cast<std::size_t>(e * 50 + t)] == t);

  const Tensor far = geometric_warpfield(static_pose(1000, 3.43, 0, 0), 48000, 0.0);
  for (int e = 0; e < 2; ++e)
    for (int t = 0; t < 1000; ++t) {
      const double expect = std::max(0.0, t - 48000.0 * 3.43 / 343.0);
      CHECK(far.values()[static_cast<std::size_t>(e * 1000 + t)] == doctest::Approx(expect).epsilon(1e-12));
    }
  CHECK(far.values()[700] == doctest::Approx(220.0));

  // Source to the left: the left ear hears it first.
  const Tensor side = geometric_warpfield(static_pose(2000, 0, 2.0, 0), 16000, 0.0875);
  CHECK(side.values()[1999] > side.values()[2000 + 1999]);

  // Receding source: delay t - rho never decreases.
  const std::int64_t T = 4000;
  Tensor walk = static_pose(T, 1.0, 0.3, 0.1);
  for (std::int64_t t = 0; t < T; ++t) walk.mutable_values()[static_cast<std::size_t>(t)] = 1.0 + 0.002 * static_cast<double>(t);
  const Tensor rho = geometric_warpfield(walk, 16000, 0.0875);
  for (int e = 0; e < 2; ++e) {
    for (std::int64_t t = 200; t < T; ++t) {
      const double d0 = static_cast<double>(t - 1) - rho.values()[static_cast<std::size_t>(e * T + t - 1)];
      const double d1 = static_cast<double>(t) - rho.values()[static_cast<std::size_t>(e * T + t)];
      CHECK(d1 >= d0);
    }
  }
  Tensor bad = static_pose(10, 1, 0, 0);
  bad.mutable_values()[3] = std::nan("");
  CHECK_THROWS_AS(geometric_warpfield(bad, 16000, 0.0), ValidationError);
}

TEST_CASE("warpnet starts at zero and has a bounded receptive field") {
  Rng rng(1);
  WarpNet net(small_config(), rng);
  const Tensor c = random_tensor(rng, {1, 7, 64}, -2, 2);
  const Tensor z = net.forward(c);
  CHECK(z.shape() == Shape{1, 2, 64});
  for (double v : z.values()) CHECK(v == 0.0);

  randomise(net.layers().back().weight(), rng, 0.5);
  const Tensor base = net.forward(c);
  for (double v : base.values()) CHECK(std::isfinite(v));
  const int radius = net.receptive_radius();
  CHECK(radius == 6);
  Tensor c2(c.shape(), c.vec());
  c2.mutable_values()[static_cast<std::size_t>(2 * 64 + 30)] += 1.0;  // feature 2, frame 30
  const Tensor moved = net.forward(c2);
  for (int e = 0; e < 2; ++e)
    for (int t = 0; t < 64; ++t) {
      const bool changed = base.values()[static_cast<std::size_t>(e * 64 + t)] != moved.values()[static_cast<std::size_t>(e * 64 + t)];
      if (std::abs(t - 30) > radius) CHECK_FALSE(changed);
    }
  CHECK(base.values()[30] != moved.values()[30]);
}

TEST_CASE("warp enforcement and application") {
  const std::vector<double> raw{0, 1.5, 0.5, 2.5, 1.0};
  const auto p = enforce_warp(raw);
  CHECK(p == std::vector<double>{0, 1, 1, 2.5, 2.5});
  const Tensor x({1, 5}, std::vector<double>{10, 20, 30, 40, 50});
  std::vector<double> w2(raw);
  w2.insert(w2.end(), raw.begin(), raw.end());
  const Tensor y = apply_warp(x, Tensor({1, 2, 5}, w2));
  const std::vector<double> expect{10, 20, 20, 35, 35};
  for (int e = 0; e < 2; ++e)
    for (int t = 0; t < 5; ++t) CHECK(y.values()[static_cast<std::size_t>(e * 5 + t)] == expect[static_cast<std::size_t>(t)]);

  Rng rng(2);
  const Tensor sig = random_tensor(rng, {1, 40});
  std::vector<double> ident, shift;
  for (int e = 0; e < 2; ++e)
    for (int t = 0; t < 40; ++t) ident.push_back(t), shift.push_back(t - 3);
  const Tensor yi = apply_warp(sig, Tensor({1, 2, 40}, ident));
  const Tensor ys = apply_warp(sig, Tensor({1, 2, 40}, shift));
  for (int e = 0; e < 2; ++e)
    for (int t = 0; t < 40; ++t) {
      CHECK(yi.values()[static_cast<std::size_t>(e * 40 + t)] == sig.values()[static_cast<std::size_t>(t)]);
      CHECK(ys.values()[static_cast<std::size_t>(e * 40 + t)] == sig.values()[static_cast<std::size_t>(std::max(0, t - 3))]);
    }

  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = 1 + rng.below(200);
    std::vector<double> r(n);
    for (std::size_t t = 0; t < n; ++t) r[t] = static_cast<double>(t) + rng.uniform(-30, 10);
    const auto q = enforce_warp(r);
    for (std::size_t t = 0; t < n; ++t) {
      CHECK(q[t] <= static_cast<double>(t));
      if (t > 0) CHECK(q[t] >= q[t - 1]);
    }
  }
}

TEST_CASE("apply_warp gradients") {
  Rng rng(3);
  const std::int64_t T = 30;
  Tensor x = random_tensor(rng, {1, T}, -1, 1, true);
  std::vector<double> w;
  for (int e = 0; e < 2; ++e)
    for (std::int64_t t = 0; t < T; ++t) w.push_back(static_cast<double>(t) - 2.3 - 0.4 * e + 0.3 * std::sin(0.2 * static_cast<double>(t)));
  Tensor warp = Tensor::parameter({1, 2, T}, w);
  auto loss = [&] { return probe_loss(apply_warp(x, warp)); };
  // Skip the leading samples where the warp is clamped at zero.
  std::vector<std::size_t> idx;
  for (std::size_t i : random_indices(rng, static_cast<std::size_t>(T - 5), 8)) idx.push_back(i + 5);
  for (std::size_t i : random_indices(rng, static_cast<std::size_t>(T - 5), 8)) idx.push_back(static_cast<std::size_t>(T) + i + 5);
  for (const auto& probe : check_gradients("warp", warp, loss, idx)) {
    INFO("index " << probe.index << " analytic " << probe.analytic << " numeric " << probe.numeric);
    CHECK(probe.rel_error <= 1e-4);
  }
  for (const auto& probe : check_gradients("signal", x, loss, random_indices(rng, static_cast<std::size_t>(T), 8))) {
    CHECK(probe.rel_error <= 1e-4);
  }
}

TEST_CASE("temporal convnet") {
  Rng rng(4);
  auto cfg = small_config();
  TemporalConvNet net(cfg, rng);
  CHECK(net.receptive_field() == 1 + 3 * (1 + 2 + 4 + 8));
  randomise(net.output_layer().weight(), rng, 0.5);

  for (std::int64_t T : {1, 9600, 64600}) {
    CHECK(net.forward(Tensor({1, 2, T}), Tensor({1, 7, T})).shape() == Shape{1, 2, T});
  }
  CHECK_THROWS_AS(net.forward(Tensor({1, 2, 10}), Tensor({1, 7, 11})), ValidationError);

  nn::StateDict sd;
  net.register_state(sd, "tcn");
  for (auto& [name, t] : sd.parameters()) {
    if (name.ends_with(".bias")) for (double& v : t->mutable_values()) v = 0.0;
  }
  const Tensor zero = net.forward(Tensor({1, 2, 100}), Tensor({1, 7, 100}));
  for (double v : zero.values()) CHECK(v == 0.0);

  // Impulse response: causal and exactly receptive_field() samples long.
  const std::int64_t T = 200, t0 = 60;
  const Tensor c = random_tensor(rng, {1, 7, T});
  Tensor imp({1, 2, T});
  imp.mutable_values()[static_cast<std::size_t>(t0)] = 1.0;
  const Tensor y = net.forward(imp, c);
  const Tensor y0 = net.forward(Tensor({1, 2, T}), c);
  std::int64_t first = -1, last = -1;
  for (std::int64_t t = 0; t < T; ++t) {
    bool differs = false;
    for (int e = 0; e < 2; ++e) differs |= y.values()[static_cast<std::size_t>(e * T + t)] != y0.values()[static_cast<std::size_t>(e * T + t)];
    if (differs) {
      if (first < 0) first = t;
      last = t;
    }
  }
  CHECK(first == t0);
  CHECK(last - first + 1 == net.receptive_field());
}

TEST_CASE("identity-configured converter reproduces its input") {
  auto cfg = small_config();
  cfg.ear_offset_m = 0.0;
  Binauralizer model(cfg, 7);
  ConditioningTrack still;
  still.frames.assign(static_cast<std::size_t>(7 * 80000), 0.0);
  for (std::int64_t t = 0; t < 80000; ++t) still.frames[static_cast<std::size_t>(3 * 80000 + t)] = 1.0;
  std::vector<double> x(70000);
  Rng rng(5);
  for (double& v : x) v = rng.uniform(-0.8, 0.8);
  const Waveform w = Waveform::mono(x, 16000);
  const Waveform y = binauralize_utterance(w, std::span<const ConditioningTrack>(&still, 1), model, 11);
  REQUIRE(y.channels == 2);
  REQUIRE(y.length() == 70000);
  double worst = 0;
  for (int ch = 0; ch < 2; ++ch)
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::fabs(y.channel(ch)[i] - x[i]));
  CHECK(worst <= 1e-6);
}

TEST_CASE("conversion is deterministic per seed") {
  auto cfg = small_config();
  cfg.segment_length = 4000;
  Binauralizer model(cfg, 3);
  Rng rng(6);
  randomise(model.convnet().output_layer().weight(), rng, 0.3);
  randomise(model.warpnet().layers().back().weight(), rng, 0.3);
  std::vector<ConditioningTrack> pool;
  for (int k = 0; k < 4; ++k) pool.push_back(circular_walk(9000, 16000, 1.5, 0.2, k));
  std::vector<double> x(9000);
  for (double& v : x) v = rng.uniform(-0.5, 0.5);
  const Waveform w = Waveform::mono(x, 16000);
  const Waveform a = binauralize_utterance(w, pool, model, 42), b = binauralize_utterance(w, pool, model, 42);
  CHECK(a.samples == b.samples);
  CHECK(a.length() == 9000);
  CHECK(binauralize_utterance(w, pool, model, 43).samples != a.samples);
  CHECK(a.channel(0)[5000] != a.channel(1)[5000]);
}

TEST_CASE("pretraining") {
  auto cfg = small_config();
  Binauralizer model(cfg, 9);
  const auto corpus = synth_binaural_corpus(1, 2, 0.25, 16000);
  const auto chunks = make_pretrain_chunks(corpus, 1000);
  REQUIRE(chunks.size() == 8u);
  const std::vector<std::size_t> pick{0, 2, 5, 7};
  const PretrainBatch batch = stack_batch(chunks, pick);
  CHECK(batch.mono.shape() == Shape{4, 1000});

  PretrainBatch self = batch;
  {
    NoGradGuard ng;
    self.target = model.forward(batch.mono, batch.conditioning);
  }
  CHECK(pretrain_loss(model, self, {}).item() == 0.0);

  // Finite differences on sampled parameters from each submodule. The warp
  // correction is made non-zero first: at exactly zero the leading samples sit
  // on the clamp-at-zero kink, where only one-sided derivatives exist.
  nn::StateDict sd = model.state_dict();
  Rng rng(10);
  randomise(model.warpnet().layers().back().weight(), rng, 0.05);
  for (auto& [name, t] : sd.parameters()) {
    if (!(name == "warpnet.conv1.weight" || name == "warpnet.conv3.weight" || name == "convnet.layer5.conv.weight" ||
          name == "convnet.layer12.gamma.weight" || name == "convnet.out.weight")) {
      continue;
    }
    PretrainBatch small = stack_batch(chunks, std::vector<std::size_t>{1});
    auto loss = [&] { return pretrain_loss(model, small, {}); };
    for (const auto& probe : check_gradients(name, *t, loss, random_indices(rng, static_cast<std::size_t>(t->numel()), 5))) {
      INFO(name << "[" << probe.index << "] analytic " << probe.analytic << " numeric " << probe.numeric);
      CHECK(probe.rel_error <= 1e-4);
    }
  }

  Adam opt(Adam::Options{.learning_rate = 3e-3});
  const double first = pretrain_step(model, batch, opt, {});
  double last = first;
  for (int s = 1; s < 50; ++s) last = pretrain_step(model, batch, opt, {});
  CHECK(last < first);
  model.set_pretrained(true);

  PretrainOptions with_phase;
  with_phase.phase_loss = true;
  CHECK(std::isfinite(pretrain_step(model, batch, opt, with_phase)));

  PretrainBatch broken = batch;
  std::vector<double> t(broken.target.vec());
  t[0] = std::nan("");
  broken.target = Tensor(broken.target.shape(), t);
  const auto before = model.hash();
  CHECK_THROWS_AS(pretrain_step(model, broken, opt, {}), TrainingAborted);
  CHECK(model.hash() == before);
}

TEST_CASE("a frozen converter never changes") {
  Binauralizer model(small_config(), 12);
  model.set_frozen(true);
  const auto h = model.hash();
  Rng rng(13);
  Tensor x = random_tensor(rng, {1, 300}, -1, 1, true);
  const Tensor y = model.forward(x, static_pose(300, 1, 1, 0));
  CHECK_FALSE(y.requires_grad());
  Adam opt(Adam::Options{});
  CHECK_THROWS_AS(pretrain_step(model, PretrainBatch{x, static_pose(300, 1, 1, 0), Tensor({1, 2, 300})}, opt, {}),
                  ValidationError);
  CHECK(model.hash() == h);
}
