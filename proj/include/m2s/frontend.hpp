#pragma once

// Raw-waveform encoder: learnable sinc band-pass filterbank, 2-D residual
// stack and graph formation.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "m2s/nn.hpp"
#include "m2s/tensor.hpp"

namespace m2s {

// Ordered record of named intermediate shapes (batch axis dropped).
struct ShapeTrace {
  std::vector<std::pair<std::string, Shape>> entries;

  void record(const std::string& name, const Tensor& t);
  const Shape& at(const std::string& name) const;  // throws std::out_of_range
};

struct SincConfig {
  int n_filters = 70;
  int kernel_size = 129;
  double sample_rate = 16000.0;
  double min_low_hz = 50.0;
  double min_band_hz = 50.0;
};

// Band-pass kernels built from two learnable cutoffs per filter:
//   f_low  = min(min_low + |a|, nyquist - 2 * min_band)
//   f_high = min(f_low + min_band + |b|, nyquist - min_band / 2)
// Each kernel is a Hamming-windowed difference of sinc low-pass responses,
// normalised to unit centre tap.
class SincFilterbank {
 public:
  SincFilterbank() = default;
  explicit SincFilterbank(const SincConfig& cfg);  // mel-spaced cutoffs

  // [n_filters, 1, kernel_size], differentiable w.r.t. a and b.
  Tensor kernels() const;
  std::vector<double> low_hz() const;
  std::vector<double> high_hz() const;

  Tensor& raw_low() { return low_; }
  Tensor& raw_band() { return band_; }
  const SincConfig& config() const { return cfg_; }
  void register_state(nn::StateDict& sd, const std::string& prefix);

 private:
  SincConfig cfg_;
  Tensor low_;   // a
  Tensor band_;  // b
};

// x[B, 1, T] -> conv -> [B, 1, F, T'] -> 3x3 max pool -> BN -> SeLU.
class SincNetLayer {
 public:
  SincNetLayer() = default;
  explicit SincNetLayer(const SincConfig& cfg);

  Tensor forward(const Tensor& x, bool training, ShapeTrace* trace = nullptr);
  SincFilterbank& filterbank() { return fb_; }
  void register_state(nn::StateDict& sd, const std::string& prefix);

 private:
  SincFilterbank fb_;
  nn::BatchNorm bn_;
};

// conv(2,3) -> BN -> SeLU -> conv(2,3), plus a skip path (1x1 projection when
// the channel count changes), then max pool (1, 3). Frequency size is kept.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(std::int64_t in_ch, std::int64_t out_ch, Rng& rng);

  Tensor forward(const Tensor& x, bool training);
  nn::Conv2d& conv1() { return conv1_; }
  nn::Conv2d& conv2() { return conv2_; }
  bool has_projection() const { return has_projection_; }
  void register_state(nn::StateDict& sd, const std::string& prefix);

 private:
  nn::Conv2d conv1_;
  nn::BatchNorm bn_;
  nn::Conv2d conv2_;
  nn::Conv2d skip_;
  bool has_projection_ = false;
};

struct FrontendConfig {
  SincConfig sinc;
  std::vector<std::int64_t> block_channels{32, 32, 64, 64, 64, 64};
};

// Mono segments [B, T] -> feature map [B, C, F, W].
class Frontend {
 public:
  Frontend() = default;
  Frontend(const FrontendConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& segments, bool training, ShapeTrace* trace = nullptr,
                 const std::string& prefix = "");
  SincNetLayer& sincnet() { return sinc_; }
  std::vector<ResidualBlock>& blocks() { return blocks_; }
  void register_state(nn::StateDict& sd, const std::string& prefix);

 private:
  SincNetLayer sinc_;
  std::vector<ResidualBlock> blocks_;
};

// Nodes [B, N, C] from |fm| averaged over time (spectral graph, N = F) or
// over frequency (temporal graph, N = W).
Tensor to_graph_spectral(const Tensor& fm);
Tensor to_graph_temporal(const Tensor& fm);

}  // namespace m2s
