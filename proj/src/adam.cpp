#include "m2s/adam.hpp"

#include <cmath>

#include "m2s/errors.hpp"

namespace m2s {

void Adam::step(const nn::StateDict& sd) {
  const auto& params = sd.parameters();
  if (moments_.empty()) {
    moments_.reserve(params.size());
    for (const auto& [name, t] : params) {
      moments_.push_back({name, std::vector<double>(t->vec().size(), 0.0), std::vector<double>(t->vec().size(), 0.0)});
    }
  }
  if (moments_.size() != params.size()) throw ValidationError("Adam: parameter set changed between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = *params[p].second;
    if (!t.has_grad()) continue;
    auto& mo = moments_[p];
    if (mo.name != params[p].first || mo.m.size() != t.vec().size()) {
      throw ValidationError("Adam: optimiser state does not match parameter " + params[p].first);
    }
    auto values = t.mutable_values();
    auto g = t.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double gi = g[i] + opt_.weight_decay * values[i];
      mo.m[i] = opt_.beta1 * mo.m[i] + (1.0 - opt_.beta1) * gi;
      mo.v[i] = opt_.beta2 * mo.v[i] + (1.0 - opt_.beta2) * gi * gi;
      const double mhat = mo.m[i] / bc1;
      const double vhat = mo.v[i] / bc2;
      values[i] -= opt_.learning_rate * mhat / (std::sqrt(vhat) + opt_.eps);
    }
  }
}

}  // namespace m2s
