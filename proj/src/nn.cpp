#include "m2s/nn.hpp"

#include <atomic>
#include <cmath>
#include <cstring>

namespace m2s {

namespace {
std::atomic<std::uint64_t> g_seed{1234};
}

void set_global_seed(std::uint64_t seed) { g_seed.store(seed); }
std::uint64_t global_seed() { return g_seed.load(); }

}  // namespace m2s

namespace m2s::nn {

namespace {

struct Fnv1a {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 0x100000001b3ULL;
    }
  }
};

}  // namespace

std::int64_t StateDict::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t->numel();
  return n;
}

void StateDict::zero_grad() const {
  for (const auto& [name, t] : params_) t->zero_grad();
}

std::uint64_t StateDict::hash() const {
  Fnv1a f;
  for (const auto& [name, t] : params_) {
    f.bytes(name.data(), name.size());
    f.bytes(t->shape().data(), t->shape().size() * sizeof(std::int64_t));
    f.bytes(t->values().data(), t->values().size() * sizeof(double));
  }
  for (const auto& [name, b] : buffers_) {
    f.bytes(name.data(), name.size());
    f.bytes(b->data(), b->size() * sizeof(double));
  }
  return f.h;
}

std::vector<double> uniform_init(Rng& rng, std::int64_t n, std::int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::int64_t>(1, fan_in)));
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

Linear::Linear(std::int64_t in_features, std::int64_t out_features, Rng& rng, bool bias)
    : weight_(Tensor::parameter({out_features, in_features},
                                uniform_init(rng, in_features * out_features, in_features))) {
  if (bias) bias_ = Tensor::parameter({out_features}, uniform_init(rng, out_features, in_features));
}

void Linear::register_state(StateDict& sd, const std::string& prefix) {
  sd.add_parameter(prefix + ".weight", &weight_);
  if (bias_.defined()) sd.add_parameter(prefix + ".bias", &bias_);
}

Conv1d::Conv1d(std::int64_t in_ch, std::int64_t out_ch, int kernel, Rng& rng, ops::Conv1dOptions opt,
               bool bias)
    : weight_(Tensor::parameter({out_ch, in_ch, kernel}, uniform_init(rng, out_ch * in_ch * kernel, in_ch * kernel))),
      opt_(opt) {
  if (bias) bias_ = Tensor::parameter({out_ch}, uniform_init(rng, out_ch, in_ch * kernel));
}

void Conv1d::register_state(StateDict& sd, const std::string& prefix) {
  sd.add_parameter(prefix + ".weight", &weight_);
  if (bias_.defined()) sd.add_parameter(prefix + ".bias", &bias_);
}

Conv2d::Conv2d(std::int64_t in_ch, std::int64_t out_ch, int kernel_h, int kernel_w, Rng& rng,
               ops::Conv2dOptions opt, bool bias)
    : weight_(Tensor::parameter({out_ch, in_ch, kernel_h, kernel_w},
                                uniform_init(rng, out_ch * in_ch * kernel_h * kernel_w, in_ch * kernel_h * kernel_w))),
      opt_(opt) {
  if (bias) bias_ = Tensor::parameter({out_ch}, uniform_init(rng, out_ch, in_ch * kernel_h * kernel_w));
}

void Conv2d::register_state(StateDict& sd, const std::string& prefix) {
  sd.add_parameter(prefix + ".weight", &weight_);
  if (bias_.defined()) sd.add_parameter(prefix + ".bias", &bias_);
}

BatchNorm::BatchNorm(std::int64_t channels) {
  state_.gamma = Tensor::parameter({channels}, std::vector<double>(static_cast<std::size_t>(channels), 1.0));
  state_.beta = Tensor::parameter({channels}, std::vector<double>(static_cast<std::size_t>(channels), 0.0));
  state_.running_mean.assign(static_cast<std::size_t>(channels), 0.0);
  state_.running_var.assign(static_cast<std::size_t>(channels), 1.0);
}

void BatchNorm::register_state(StateDict& sd, const std::string& prefix) {
  sd.add_parameter(prefix + ".gamma", &state_.gamma);
  sd.add_parameter(prefix + ".beta", &state_.beta);
  sd.add_buffer(prefix + ".running_mean", &state_.running_mean);
  sd.add_buffer(prefix + ".running_var", &state_.running_var);
}

}  // namespace m2s::nn
