#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "m2s/errors.hpp"
#include "m2s/model.hpp"
#include "model_support.hpp"
#include "tempdir.hpp"

using namespace m2s;
using namespace m2s::testing;

namespace {

Tensor random_stereo(Rng& rng, std::int64_t B, std::int64_t T, double amp = 0.5) {
  return random_tensor(rng, {B, 2, T}, -amp, amp);
}

Tensor swap_channels(const Tensor& s) {
  const std::int64_t B = s.size(0), T = s.size(2);
  std::vector<double> v(s.values().begin(), s.values().end());
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t t = 0; t < T; ++t) {
      std::swap(v[static_cast<std::size_t>((b * 2) * T + t)], v[static_cast<std::size_t>((b * 2 + 1) * T + t)]);
    }
  }
  return Tensor(s.shape(), std::move(v));
}

bool all_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < static_cast<std::size_t>(a.numel()); ++i) {
    if (a.values()[i] != b.values()[i]) return false;
  }
  return true;
}

// "left.frontend.block1.conv1.weight" -> "left.frontend", "classifier.bias" -> "classifier"
std::string submodule_of(const std::string& name) {
  const auto first = name.find('.');
  const auto second = name.find('.', first + 1);
  return name.substr(0, second == std::string::npos ? first : second);
}

}  // namespace

TEST_CASE("detector config node counts") {
  const auto t1 = DetectorConfig::full();
  CHECK(t1.spectral_nodes() == 23);
  CHECK(t1.temporal_nodes() == 29);
  CHECK(t1.embedding_nodes() == 7);
  const auto fx = DetectorConfig::fixture();
  CHECK(fx.spectral_nodes() == 23);
  CHECK(fx.temporal_nodes() == 15);
  const auto back = detector_config_from_json(to_json(fx));
  CHECK(back.segment_length == fx.segment_length);
  CHECK(back.frontend.block_channels == fx.frontend.block_channels);
}

TEST_CASE("fixture detector shapes") {
  const auto cfg = DetectorConfig::fixture();
  M2SAdd model(cfg, small_converter(cfg.segment_length), 1234);
  Rng rng(1);
  ShapeTrace trace;
  const Tensor logits = model.forward_stereo(random_stereo(rng, 2, cfg.segment_length), false, &trace);
  CHECK(logits.shape() == Shape{2, 2});
  CHECK(trace.at("left.graph") == Shape{16, 23});
  CHECK(trace.at("left.gat") == Shape{32, 23});
  CHECK(trace.at("left.pool") == Shape{32, 14});
  CHECK(trace.at("left.proj") == Shape{32, 12});
  CHECK(trace.at("right.graph") == Shape{16, 15});
  CHECK(trace.at("right.pool") == Shape{32, 12});
  CHECK(trace.at("right.proj") == Shape{32, 12});
  CHECK(trace.at("fusion.gat") == Shape{16, 12});
  CHECK(trace.at("fusion.pool") == Shape{16, 7});
  CHECK(trace.at("fusion.proj") == Shape{1, 7});
  CHECK(trace.at("classifier") == Shape{2});
  CHECK_THROWS_AS(model.forward_stereo(random_stereo(rng, 1, cfg.segment_length - 1), false), ShapeError);
  CHECK_THROWS_AS(model.forward_stereo(random_tensor(rng, {1, 3, cfg.segment_length}), false), ShapeError);
}

TEST_CASE("dual branch is not symmetric in its channels") {
  const auto cfg = tiny_detector_config();
  M2SAdd model(cfg, small_converter(cfg.segment_length), 11);
  Rng rng(2);
  const Tensor s = random_stereo(rng, 1, cfg.segment_length);
  auto [l1, r1] = model.dual_branch(s, false);
  auto [l2, r2] = model.dual_branch(swap_channels(s), false);
  CHECK(l1.shape() == Shape{1, 12, 32});
  CHECK(r1.shape() == Shape{1, 12, 32});
  CHECK_FALSE((all_equal(l1, l2) && all_equal(r1, r2)));
  CHECK_FALSE(all_equal(l1, r2));
}

TEST_CASE("zero stereo input gives a deterministic finite output") {
  const auto cfg = tiny_detector_config();
  M2SAdd model(cfg, small_converter(cfg.segment_length), 11);
  const Tensor z({1, 2, cfg.segment_length}, 0.0);
  const Tensor a = model.forward_stereo(z, false);
  const Tensor b = model.forward_stereo(z, false);
  CHECK(all_equal(a, b));
  for (double v : a.values()) CHECK(std::isfinite(v));
}

TEST_CASE("fuse is an element-wise product") {
  Rng rng(3);
  const Tensor a = random_tensor(rng, {2, 12, 32});
  const Tensor b = random_tensor(rng, {2, 12, 32});
  CHECK(all_equal(fuse(Tensor({2, 12, 32}, 1.0), b), b));
  const Tensor za = fuse(a, Tensor({2, 12, 32}, 0.0));
  const Tensor zb = fuse(Tensor({2, 12, 32}, 0.0), b);
  for (double v : za.values()) CHECK(v == 0.0);
  for (double v : zb.values()) CHECK(v == 0.0);
  CHECK(all_equal(fuse(a, b), fuse(b, a)));
  CHECK_THROWS_AS(fuse(a, random_tensor(rng, {2, 12, 31})), ShapeError);
}

TEST_CASE("fusion encoder and classifier") {
  const auto cfg = tiny_detector_config();
  M2SAdd model(cfg, small_converter(cfg.segment_length), 12);
  Rng rng(4);
  ShapeTrace trace;
  const Tensor e = model.fusion_encoder(random_tensor(rng, {3, 12, 32}, -10.0, 10.0), false, &trace);
  CHECK(e.shape() == Shape{3, 7});
  for (double v : e.values()) CHECK(std::isfinite(v));
  CHECK(trace.at("fusion.input") == Shape{32, 12});
  CHECK(trace.at("fusion.gat") == Shape{16, 12});
  CHECK(trace.at("fusion.pool") == Shape{16, 7});
  CHECK(trace.at("fusion.proj") == Shape{1, 7});

  std::vector<double> row(32);
  for (double& v : row) v = rng.uniform(-1.0, 1.0);
  std::vector<double> constant;
  for (int n = 0; n < 12; ++n) constant.insert(constant.end(), row.begin(), row.end());
  const Tensor ec = model.fusion_encoder(Tensor({1, 12, 32}, constant), false);
  for (int k = 1; k < 7; ++k) CHECK(ec.values()[static_cast<std::size_t>(k)] == doctest::Approx(ec.values()[0]).epsilon(1e-12));
  CHECK_THROWS_AS(model.fusion_encoder(random_tensor(rng, {1, 11, 32}), false), ShapeError);

  const Tensor logits = model.classify(e);
  CHECK(logits.shape() == Shape{3, 2});
  // A common shift leaves the score untouched.
  const auto s = logit_scores(logits);
  const auto shifted = logit_scores(ops::add_scalar(logits, 3.5));
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(shifted[i] == doctest::Approx(s[i]).epsilon(1e-12));

  for (double& v : model.classifier().weight().mutable_values()) v = 0.0;
  for (double& v : model.classifier().bias().mutable_values()) v = 0.0;
  const Tensor zero = model.classify(e);
  for (double v : zero.values()) CHECK(v == 0.0);
}

TEST_CASE("ablation path") {
  const auto cfg = tiny_detector_config();
  M2SAdd model(cfg, small_converter(cfg.segment_length), 13);
  Rng rng(5);
  const Tensor s = random_stereo(rng, 1, cfg.segment_length);
  const Tensor full = model.forward_stereo(s, false);
  const Tensor abl = model.forward_stereo_ablation(s, false);
  CHECK(abl.shape() == Shape{1, 2});
  CHECK_FALSE(all_equal(full, abl));

  // With identical channels the averaged channel is that channel.
  std::vector<double> x(static_cast<std::size_t>(cfg.segment_length));
  for (double& v : x) v = rng.uniform(-0.5, 0.5);
  std::vector<double> both = x;
  both.insert(both.end(), x.begin(), x.end());
  const Tensor same({1, 2, cfg.segment_length}, both);
  const Tensor g = model.left().forward(Tensor({1, cfg.segment_length}, x), false, nullptr, "left");
  const Tensor expect = model.classify(model.fusion_encoder(fuse(g, g), false));
  CHECK(all_equal(model.forward_stereo_ablation(same, false), expect));
}

TEST_CASE("parameter sets are independent and seeded") {
  const auto cfg = tiny_detector_config();
  M2SAdd a(cfg, small_converter(cfg.segment_length), 21);
  M2SAdd b(cfg, small_converter(cfg.segment_length), 21);
  M2SAdd c(cfg, small_converter(cfg.segment_length), 22);
  CHECK(a.state_dict().hash() == b.state_dict().hash());
  CHECK(a.state_dict().hash() != c.state_dict().hash());
  // Left and right frontends share a shape but not values.
  const auto& lw = a.left().frontend().blocks()[0].conv1().weight();
  const auto& rw = a.right().frontend().blocks()[0].conv1().weight();
  CHECK_FALSE(all_equal(lw, rw));
  std::set<std::string> names;
  const nn::StateDict sd = a.state_dict();
  for (const auto& [n, t] : sd.parameters()) names.insert(n);
  CHECK(names.count("classifier.weight") == 1);
  CHECK(a.classifier().out_features() == 2);
}

TEST_CASE("full-model gradients match finite differences per submodule") {
  const auto cfg = tiny_detector_config();
  M2SAdd model(cfg, small_converter(cfg.segment_length), 31);
  Rng rng(6);
  const Tensor s = random_stereo(rng, 2, cfg.segment_length);
  auto loss = [&] { return probe_loss(model.forward_stereo(s, false)); };

  std::map<std::string, std::vector<Tensor*>> groups;
  const nn::StateDict sd = model.state_dict();
  for (const auto& [n, t] : sd.parameters()) groups[submodule_of(n)].push_back(t);
  CHECK(groups.size() == 12);
  for (auto& [site, params] : groups) {
    for (int k = 0; k < 5; ++k) {
      Tensor& p = *params[static_cast<std::size_t>(rng.below(params.size()))];
      const auto probes = check_gradients(site, p, loss, random_indices(rng, static_cast<std::size_t>(p.numel()), 1));
      for (const auto& pr : probes) {
        INFO(site << "[" << pr.index << "] analytic " << pr.analytic << " numeric " << pr.numeric);
        CHECK(pr.rel_error <= 1e-3);
      }
    }
  }
}

TEST_CASE("utterance forward averages segment logits and leaves the converter alone") {
  const auto cfg = tiny_detector_config();
  auto converter = small_converter(cfg.segment_length);
  M2SAdd model(cfg, converter, 41);
  CHECK(converter->frozen());
  const auto pool = small_pool(5000);
  Rng rng(7);
  std::vector<double> x(2500);
  for (double& v : x) v = rng.uniform(-0.5, 0.5);
  const Waveform mono = Waveform::mono(x, 16000.0);

  const std::uint64_t before = converter->hash();
  const Tensor logits = model.forward(mono, pool, 99);
  CHECK(logits.shape() == Shape{1, 2});
  CHECK(all_equal(logits, model.forward(mono, pool, 99)));

  const Tensor segs = model.convert_segments(mono, pool, 99);
  REQUIRE(segs.size(0) == 3);
  const Tensor per = model.forward_stereo(segs, false);
  for (int c = 0; c < 2; ++c) {
    const double manual = (per.values()[static_cast<std::size_t>(c)] + per.values()[static_cast<std::size_t>(2 + c)] +
                           per.values()[static_cast<std::size_t>(4 + c)]) / 3.0;
    CHECK(logits.values()[static_cast<std::size_t>(c)] == doctest::Approx(manual).epsilon(1e-12));
  }

  const nn::StateDict sd = model.state_dict();
  sd.zero_grad();
  converter->state_dict().zero_grad();
  Tensor l = ops::sum(model.forward(mono, pool, 99));
  l.backward();
  bool detector_grad = false;
  for (const auto& [n, t] : sd.parameters()) {
    if (t->has_grad()) {
      for (double g : t->grad()) detector_grad = detector_grad || g != 0.0;
    }
  }
  CHECK(detector_grad);
  const nn::StateDict csd = converter->state_dict();
  for (const auto& [n, t] : csd.parameters()) CHECK_FALSE(t->has_grad());
  CHECK(converter->hash() == before);

  converter->set_frozen(false);
  CHECK_THROWS_AS(model.forward(mono, pool, 99), ValidationError);
}

TEST_CASE("70000-sample utterance on the full-size layout averages two segments") {
  const auto cfg = DetectorConfig::full();
  M2SAdd model(cfg, small_converter(cfg.segment_length), 1234);
  const auto pool = small_pool(80000);
  Rng rng(8);
  std::vector<double> x(70000);
  for (double& v : x) v = 0.3 * rng.normal();
  const Waveform mono = Waveform::mono(x, 16000.0);
  NoGradGuard guard;
  const Tensor logits = model.forward(mono, pool, 5);
  const Tensor segs = model.convert_segments(mono, pool, 5);
  REQUIRE(segs.size(0) == 2);
  const Tensor per = model.forward_stereo(segs, false);
  for (int c = 0; c < 2; ++c) {
    const double manual = 0.5 * (per.values()[static_cast<std::size_t>(c)] + per.values()[static_cast<std::size_t>(2 + c)]);
    CHECK(logits.values()[static_cast<std::size_t>(c)] == doctest::Approx(manual).epsilon(1e-12));
  }
}

TEST_CASE("detector checkpoints embed the converter") {
  TempDir dir;
  const auto cfg = tiny_detector_config();
  auto converter = small_converter(cfg.segment_length);
  M2SAdd model(cfg, converter, 51);
  save_detector(dir / "det.ckpt", model, {{"seed", 51}});
  CHECK(std::filesystem::exists(dir / "det.ckpt.card.txt"));
  M2SAdd back = load_detector(dir / "det.ckpt");
  CHECK(back.state_dict().hash() == model.state_dict().hash());
  CHECK(back.converter().hash() == converter->hash());
  CHECK(back.converter().frozen());
  Rng rng(9);
  const Tensor s = random_stereo(rng, 1, cfg.segment_length);
  CHECK(all_equal(back.forward_stereo(s, false), model.forward_stereo(s, false)));
  CHECK(load_checkpoint(dir / "det.ckpt").meta.at("seed").get<int>() == 51);
  CHECK_THROWS_AS(load_binauralizer(dir / "det.ckpt"), ValidationError);
}
