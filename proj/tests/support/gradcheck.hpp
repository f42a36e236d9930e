#pragma once

// Central finite-difference checks of analytic gradients. Independent of the
// op implementations: the numeric side only ever evaluates forward passes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "m2s/random.hpp"
#include "m2s/ops.hpp"
#include "m2s/tensor.hpp"

namespace m2s::testing {

struct GradProbe {
  std::string site;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

inline double relative_error(double a, double b, double floor = 1e-8) {
  const double scale = std::max({std::fabs(a), std::fabs(b), floor});
  return std::fabs(a - b) / scale;
}

// `loss` builds the scalar loss from the current parameter values. The
// analytic gradient is read after one backward pass, then each probed entry is
// perturbed by +-h (relative to its magnitude) with grad mode off.
inline std::vector<GradProbe> check_gradients(const std::string& site, Tensor& param,
                                              const std::function<Tensor()>& loss,
                                              const std::vector<std::size_t>& indices,
                                              double h = 1e-6) {
  param.zero_grad();
  {
    Tensor l = loss();
    l.backward();
  }
  std::vector<double> analytic(param.numel(), 0.0);
  if (param.has_grad()) std::copy(param.grad().begin(), param.grad().end(), analytic.begin());

  std::vector<GradProbe> out;
  NoGradGuard guard;
  for (std::size_t idx : indices) {
    auto values = param.mutable_values();
    const double x0 = values[idx];
    const double step = h * std::max(1.0, std::fabs(x0));
    values[idx] = x0 + step;
    const double lp = loss().item();
    values[idx] = x0 - step;
    const double lm = loss().item();
    values[idx] = x0;
    const double numeric = (lp - lm) / (2.0 * step);
    out.push_back({site, idx, analytic[idx], numeric, relative_error(analytic[idx], numeric)});
  }
  return out;
}

inline std::vector<std::size_t> random_indices(Rng& rng, std::size_t n, std::size_t count) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < count; ++i) idx.push_back(static_cast<std::size_t>(rng.below(n)));
  return idx;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool param = false) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return param ? Tensor::parameter(std::move(shape), std::move(v)) : Tensor(std::move(shape), std::move(v));
}

}  // namespace m2s::testing

namespace m2s::testing {

// Weighted sum with fixed random coefficients: turns any tensor into a scalar
// loss with a non-trivial upstream gradient.
inline Tensor probe_loss(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<double> w(static_cast<std::size_t>(y.numel()));
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  Tensor wt(y.shape(), std::move(w));
  return ops::sum(ops::mul(y, wt));
}

}  // namespace m2s::testing
