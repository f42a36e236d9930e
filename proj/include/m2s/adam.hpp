#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m2s/nn.hpp"

namespace m2s {

// Adam with L2-style weight decay folded into the gradient.
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  explicit Adam(Options opt) : opt_(opt) {}

  // Applies one update to every parameter of `sd` that holds a gradient.
  void step(const nn::StateDict& sd);

  const Options& options() const { return opt_; }
  std::int64_t steps() const { return t_; }

  // Moment estimates keyed by parameter name, for checkpointing.
  struct Moments {
    std::string name;
    std::vector<double> m;
    std::vector<double> v;
  };
  const std::vector<Moments>& moments() const { return moments_; }
  void restore(std::int64_t steps, std::vector<Moments> moments) {
    t_ = steps;
    moments_ = std::move(moments);
  }

 private:
  Options opt_;
  std::int64_t t_ = 0;
  std::vector<Moments> moments_;
};

}  // namespace m2s
