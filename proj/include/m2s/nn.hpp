#pragma once

// Parameterised layers and the state registry used for checkpoints,
// optimisers and hashing.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "m2s/ops.hpp"
#include "m2s/random.hpp"
#include "m2s/tensor.hpp"

namespace m2s::nn {

// Flat, ordered view of a module tree's learnable tensors and buffers.
class StateDict {
 public:
  void add_parameter(std::string name, Tensor* t) { params_.emplace_back(std::move(name), t); }
  void add_buffer(std::string name, std::vector<double>* b) { buffers_.emplace_back(std::move(name), b); }

  const std::vector<std::pair<std::string, Tensor*>>& parameters() const { return params_; }
  const std::vector<std::pair<std::string, std::vector<double>*>>& buffers() const { return buffers_; }

  std::int64_t parameter_count() const;
  void zero_grad() const;
  // FNV-1a over names, shapes and raw values of every parameter and buffer.
  std::uint64_t hash() const;

 private:
  std::vector<std::pair<std::string, Tensor*>> params_;
  std::vector<std::pair<std::string, std::vector<double>*>> buffers_;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
std::vector<double> uniform_init(Rng& rng, std::int64_t n, std::int64_t fan_in);

class Linear {
 public:
  Linear() = default;
  Linear(std::int64_t in_features, std::int64_t out_features, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const { return ops::linear(x, weight_, bias_); }
  void register_state(StateDict& sd, const std::string& prefix);
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  std::int64_t in_features() const { return weight_.size(1); }
  std::int64_t out_features() const { return weight_.size(0); }

 private:
  Tensor weight_;
  Tensor bias_;
};

class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(std::int64_t in_ch, std::int64_t out_ch, int kernel, Rng& rng, ops::Conv1dOptions opt = {},
         bool bias = true);
  Tensor forward(const Tensor& x) const { return ops::conv1d(x, weight_, bias_, opt_); }
  void register_state(StateDict& sd, const std::string& prefix);
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const ops::Conv1dOptions& options() const { return opt_; }

 private:
  Tensor weight_;
  Tensor bias_;
  ops::Conv1dOptions opt_;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::int64_t in_ch, std::int64_t out_ch, int kernel_h, int kernel_w, Rng& rng,
         ops::Conv2dOptions opt = {}, bool bias = true);
  Tensor forward(const Tensor& x) const { return ops::conv2d(x, weight_, bias_, opt_); }
  void register_state(StateDict& sd, const std::string& prefix);
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
  ops::Conv2dOptions opt_;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::int64_t channels);
  // `channel_axis` indexes the normalised feature axis of x.
  Tensor forward(const Tensor& x, int channel_axis, bool training) {
    return ops::batch_norm(x, channel_axis, state_, training);
  }
  void register_state(StateDict& sd, const std::string& prefix);
  ops::BatchNormState& state() { return state_; }

 private:
  ops::BatchNormState state_;
};

}  // namespace m2s::nn
