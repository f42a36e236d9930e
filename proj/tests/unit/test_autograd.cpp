#include <cmath>
#include <numbers>

#include "doctest.h"
#include "gradcheck.hpp"
#include "m2s/adam.hpp"
#include "m2s/errors.hpp"
#include "m2s/nn.hpp"
#include "m2s/ops.hpp"

using namespace m2s;
using m2s::testing::check_gradients;
using m2s::testing::probe_loss;
using m2s::testing::random_indices;
using m2s::testing::random_tensor;

namespace {

void expect_grads_match(const std::vector<m2s::testing::GradProbe>& probes, double tol = 1e-6) {
  for (const auto& p : probes) {
    INFO(p.site << "[" << p.index << "] analytic=" << p.analytic << " numeric=" << p.numeric);
    CHECK(p.rel_error <= tol);
  }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(1);
  Tensor a = random_tensor(rng, {3, 4}, -2, 2, true);
  Tensor b = random_tensor(rng, {3, 4}, -2, 2, true);
  auto idx = random_indices(rng, 12, 6);
  expect_grads_match(check_gradients("add", a, [&] { return probe_loss(ops::add(a, b)); }, idx));
  expect_grads_match(check_gradients("sub", b, [&] { return probe_loss(ops::sub(a, b)); }, idx));
  expect_grads_match(check_gradients("mul", a, [&] { return probe_loss(ops::mul(a, b)); }, idx));
  expect_grads_match(check_gradients("selu", a, [&] { return probe_loss(ops::selu(a)); }, idx));
  expect_grads_match(check_gradients("tanh", a, [&] { return probe_loss(ops::tanh(a)); }, idx));
  expect_grads_match(check_gradients("sigmoid", a, [&] { return probe_loss(ops::sigmoid(a)); }, idx));
  expect_grads_match(check_gradients("abs", a, [&] { return probe_loss(ops::abs(a)); }, idx));
  expect_grads_match(check_gradients("softmax", a, [&] { return probe_loss(ops::softmax_last(a)); }, idx));
  expect_grads_match(check_gradients("transpose", a, [&] { return probe_loss(ops::transpose_last2(a)); }, idx));
}

TEST_CASE("softmax rows are normalised") {
  Rng rng(2);
  Tensor a = random_tensor(rng, {5, 7}, -30, 30);
  Tensor s = ops::softmax_last(a);
  for (int r = 0; r < 5; ++r) {
    double t = 0;
    for (int j = 0; j < 7; ++j) t += s.vec()[r * 7 + j];
    CHECK(t == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("batched matmuls and linear") {
  Rng rng(3);
  Tensor a = random_tensor(rng, {2, 3, 4}, -1, 1, true);
  Tensor b = random_tensor(rng, {2, 4, 5}, -1, 1, true);
  Tensor c = random_tensor(rng, {2, 5, 4}, -1, 1, true);
  auto idx = random_indices(rng, 24, 6);
  expect_grads_match(check_gradients("bmm.a", a, [&] { return probe_loss(ops::bmm(a, b)); }, idx));
  expect_grads_match(check_gradients("bmm.b", b, [&] { return probe_loss(ops::bmm(a, b)); }, idx));
  expect_grads_match(check_gradients("bmm_nt.b", c, [&] { return probe_loss(ops::bmm_nt(a, c)); }, idx));

  Tensor w = random_tensor(rng, {6, 4}, -1, 1, true);
  Tensor bias = random_tensor(rng, {6}, -1, 1, true);
  expect_grads_match(check_gradients("linear.w", w, [&] { return probe_loss(ops::linear(a, w, bias)); }, idx));
  expect_grads_match(check_gradients("linear.x", a, [&] { return probe_loss(ops::linear(a, w, bias)); }, idx));
  expect_grads_match(check_gradients("linear.b", bias, [&] { return probe_loss(ops::linear(a, w, bias)); }, {0, 3, 5}));

  CHECK_THROWS_AS(ops::bmm(a, a), ShapeError);
}

TEST_CASE("conv1d matches a direct loop and its gradients") {
  Rng rng(4);
  Tensor x = random_tensor(rng, {2, 3, 20}, -1, 1, true);
  Tensor w = random_tensor(rng, {4, 3, 3}, -1, 1, true);
  Tensor b = random_tensor(rng, {4}, -1, 1, true);
  ops::Conv1dOptions opt{2, 4, 1};
  Tensor y = ops::conv1d(x, w, b, opt);
  const std::int64_t To = 20 + 4 + 1 - 2 * 2;
  REQUIRE(y.shape() == Shape{2, 4, To});
  for (int bb = 0; bb < 2; ++bb)
    for (int co = 0; co < 4; ++co)
      for (int t = 0; t < To; ++t) {
        double s = b.vec()[co];
        for (int ci = 0; ci < 3; ++ci)
          for (int k = 0; k < 3; ++k) {
            const int src = t + k * 2 - 4;
            if (src >= 0 && src < 20) s += w.vec()[(co * 3 + ci) * 3 + k] * x.vec()[(bb * 3 + ci) * 20 + src];
          }
        CHECK(y.vec()[(bb * 4 + co) * To + t] == doctest::Approx(s).epsilon(1e-12));
      }
  auto idx = random_indices(rng, 36, 6);
  expect_grads_match(check_gradients("conv1d.w", w, [&] { return probe_loss(ops::conv1d(x, w, b, opt)); }, idx));
  expect_grads_match(check_gradients("conv1d.x", x, [&] { return probe_loss(ops::conv1d(x, w, b, opt)); }, idx));
  expect_grads_match(check_gradients("conv1d.b", b, [&] { return probe_loss(ops::conv1d(x, w, b, opt)); }, {0, 1, 2, 3}));
}

TEST_CASE("conv2d matches a direct loop and its gradients") {
  Rng rng(5);
  Tensor x = random_tensor(rng, {2, 2, 5, 9}, -1, 1, true);
  Tensor w = random_tensor(rng, {3, 2, 2, 3}, -1, 1, true);
  Tensor b = random_tensor(rng, {3}, -1, 1, true);
  ops::Conv2dOptions opt{1, 1, 1, 1};
  Tensor y = ops::conv2d(x, w, b, opt);
  REQUIRE(y.shape() == Shape{2, 3, 6, 9});
  for (int bb = 0; bb < 2; ++bb)
    for (int co = 0; co < 3; ++co)
      for (int h = 0; h < 6; ++h)
        for (int ww = 0; ww < 9; ++ww) {
          double s = b.vec()[co];
          for (int ci = 0; ci < 2; ++ci)
            for (int kh = 0; kh < 2; ++kh)
              for (int kw = 0; kw < 3; ++kw) {
                const int hh = h + kh - 1, wx = ww + kw - 1;
                if (hh >= 0 && hh < 5 && wx >= 0 && wx < 9)
                  s += w.vec()[((co * 2 + ci) * 2 + kh) * 3 + kw] * x.vec()[((bb * 2 + ci) * 5 + hh) * 9 + wx];
              }
          CHECK(y.vec()[((bb * 3 + co) * 6 + h) * 9 + ww] == doctest::Approx(s).epsilon(1e-12));
        }
  auto idx = random_indices(rng, 36, 6);
  expect_grads_match(check_gradients("conv2d.w", w, [&] { return probe_loss(ops::conv2d(x, w, b, opt)); }, idx));
  expect_grads_match(check_gradients("conv2d.x", x, [&] { return probe_loss(ops::conv2d(x, w, b, opt)); }, random_indices(rng, 180, 6)));
}

TEST_CASE("max_pool2d floors and routes gradients to the argmax") {
  Tensor x = Tensor::parameter({1, 1, 3, 7}, {1, 2, 3, 4, 5, 6, 7,  //
                                              9, 0, 0, 0, 0, 0, 8,  //
                                              0, 0, 0, 0, 0, 0, 99});
  Tensor y = ops::max_pool2d(x, 3, 3);
  REQUIRE(y.shape() == Shape{1, 1, 1, 2});
  CHECK(y.vec()[0] == 9);
  CHECK(y.vec()[1] == 6);
  ops::sum(y).backward();
  CHECK(x.grad()[7] == 1.0);
  CHECK(x.grad()[5] == 1.0);
  CHECK(x.grad()[20] == 0.0);
}

TEST_CASE("batch_norm in training and evaluation mode") {
  Rng rng(6);
  nn::BatchNorm bn(3);
  Tensor x = random_tensor(rng, {4, 3, 5}, -2, 3, true);
  Tensor y = bn.forward(x, 1, true);
  for (int c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 5; ++i) m += y.vec()[(b * 3 + c) * 5 + i];
    m /= 20;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 5; ++i) v += std::pow(y.vec()[(b * 3 + c) * 5 + i] - m, 2);
    CHECK(m == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(v / 20 == doctest::Approx(1.0).epsilon(1e-4));
  }
  CHECK(bn.state().running_mean[0] != 0.0);

  auto idx = random_indices(rng, 60, 6);
  nn::BatchNorm bn2(3);
  bn2.state().gamma.mutable_values()[1] = 1.7;
  auto loss_train = [&] {
    auto st = bn2.state();  // statistics updates must not leak between probes
    return probe_loss(ops::batch_norm(x, 1, st, true));
  };
  expect_grads_match(check_gradients("bn.train.x", x, loss_train, idx), 1e-5);
  expect_grads_match(check_gradients("bn.train.gamma", bn2.state().gamma, loss_train, {0, 1, 2}), 1e-5);
  auto loss_eval = [&] { return probe_loss(bn2.forward(x, 1, false)); };
  expect_grads_match(check_gradients("bn.eval.x", x, loss_eval, idx));

  // Features-last layout used by graph layers.
  nn::BatchNorm bn3(5);
  Tensor g = random_tensor(rng, {2, 4, 5}, -1, 1, true);
  expect_grads_match(check_gradients("bn.last", g, [&] {
    auto st = bn3.state();
    return probe_loss(ops::batch_norm(g, 2, st, true));
  }, random_indices(rng, 40, 6)), 1e-5);
}

TEST_CASE("graph formation, gathers and row scaling") {
  Rng rng(7);
  Tensor fm = random_tensor(rng, {2, 3, 4, 5}, -1, 1, true);
  Tensor spec = ops::graph_from_feature_map(fm, ops::GraphAxis::Spectral);
  Tensor temp = ops::graph_from_feature_map(fm, ops::GraphAxis::Temporal);
  CHECK(spec.shape() == Shape{2, 4, 3});
  CHECK(temp.shape() == Shape{2, 5, 3});
  auto idx = random_indices(rng, 120, 6);
  expect_grads_match(check_gradients("graph.spec", fm, [&] { return probe_loss(ops::graph_from_feature_map(fm, ops::GraphAxis::Spectral)); }, idx));
  expect_grads_match(check_gradients("graph.temp", fm, [&] { return probe_loss(ops::graph_from_feature_map(fm, ops::GraphAxis::Temporal)); }, idx));

  Tensor h = random_tensor(rng, {2, 4, 3}, -1, 1, true);
  Tensor s = random_tensor(rng, {2, 4}, -1, 1, true);
  std::vector<std::vector<std::int64_t>> gi{{0, 2}, {3, 1}};
  auto loss = [&] { return probe_loss(ops::gather_rows(ops::scale_rows(h, s), gi)); };
  expect_grads_match(check_gradients("gather.h", h, loss, random_indices(rng, 24, 6)));
  expect_grads_match(check_gradients("scale_rows.s", s, loss, {0, 2, 5, 7}));
  Tensor wv = random_tensor(rng, {3}, -1, 1, true);
  expect_grads_match(check_gradients("scale_last.w", wv, [&] { return probe_loss(ops::scale_last(h, wv)); }, {0, 1, 2}));
}

TEST_CASE("weighted cross entropy values") {
  Tensor zero({1, 2}, 0.0);
  std::array<int, 1> bona{0}, spoof{1};
  CHECK(ops::weighted_cross_entropy(zero, bona, {1, 1}).item() == doctest::Approx(std::log(2.0)));
  CHECK(ops::weighted_cross_entropy(zero, spoof, {1, 1}).item() == doctest::Approx(std::log(2.0)));
  CHECK(ops::weighted_cross_entropy(zero, bona, {2, 1}).item() == doctest::Approx(2 * std::log(2.0)));
  Tensor confident({1, 2}, {20.0, -20.0});
  CHECK(ops::weighted_cross_entropy(confident, bona, {1, 1}).item() <= 1e-8);
  CHECK(ops::weighted_cross_entropy(confident, bona, {1, 1}).item() >= 0.0);

  Tensor bad({1, 2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(ops::weighted_cross_entropy(bad, bona, {1, 1}), ValidationError);

  Rng rng(8);
  Tensor logits = random_tensor(rng, {4, 2}, -3, 3, true);
  std::array<int, 4> labels{0, 1, 1, 0};
  expect_grads_match(check_gradients("wce", logits, [&] { return ops::weighted_cross_entropy(logits, labels, {1.8, 0.2}); },
                                     {0, 1, 2, 3, 4, 5, 6, 7}));
}

TEST_CASE("mse and phase loss gradients") {
  Rng rng(9);
  Tensor p = random_tensor(rng, {1, 2, 80}, -1, 1, true);
  Tensor t = random_tensor(rng, {1, 2, 80});
  CHECK(ops::mse(t, t).item() == 0.0);
  auto idx = random_indices(rng, 160, 6);
  expect_grads_match(check_gradients("mse", p, [&] { return ops::mse(p, t); }, idx));
  expect_grads_match(check_gradients("phase", p, [&] { return ops::stft_phase_loss(p, t, 16, 8); }, idx), 1e-5);
  CHECK(ops::stft_phase_loss(t, t, 16, 8).item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("graph release and no-grad mode") {
  Tensor a = Tensor::parameter({2}, {1.0, 2.0});
  {
    NoGradGuard g;
    Tensor y = ops::mul(a, a);
    CHECK_FALSE(y.requires_grad());
  }
  Tensor y = ops::sum(ops::mul(a, a));
  CHECK(y.requires_grad());
  y.backward();
  CHECK(a.grad()[0] == 2.0);
  CHECK(a.grad()[1] == 4.0);
  CHECK(y.node()->parents.empty());
}

TEST_CASE("adam reduces a quadratic") {
  Tensor a = Tensor::parameter({3}, {3.0, -2.0, 1.0});
  nn::StateDict sd;
  sd.add_parameter("a", &a);
  Adam opt({.learning_rate = 0.1});
  double first = 0, last = 0;
  for (int i = 0; i < 200; ++i) {
    sd.zero_grad();
    Tensor l = ops::sum(ops::mul(a, a));
    if (i == 0) first = l.item();
    last = l.item();
    l.backward();
    opt.step(sd);
  }
  CHECK(last < 1e-2 * first);
}
