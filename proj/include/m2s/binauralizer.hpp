#pragma once

// Mono-to-stereo converter: geometric time warping from source-ear distance,
// a learned warp correction, monotone/causal warp application and a
// conditional dilated temporal ConvNet.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m2s/adam.hpp"
#include "m2s/dataio.hpp"
#include "m2s/nn.hpp"
#include "m2s/tensor.hpp"

namespace m2s {

inline constexpr double kSpeedOfSound = 343.0;

// Per-ear read positions rho[B, 2, T] (channel 0 = left ear at +y):
// rho = t - sr * |source - ear| / c, clamped to [0, t]. The listener sits at
// the origin facing +x with ears at (0, +-ear_offset, 0).
Tensor geometric_warpfield(const Tensor& conditioning, double sample_rate, double ear_offset_m,
                           double speed_of_sound = kSpeedOfSound);

// p_t = min(t, max(p_{t-1}, raw_t)) with p_{-1} = 0, per row of raw[..., T].
std::vector<double> enforce_warp(std::span<const double> raw);

// x[B, T] read at the enforced positions of warp[B, 2, T] with linear
// interpolation -> [B, 2, T]. Differentiable w.r.t. x and warp.
Tensor apply_warp(const Tensor& x, const Tensor& warp);

struct BinauralizerConfig {
  double sample_rate = 16000.0;
  double speed_of_sound = kSpeedOfSound;
  double ear_offset_m = 0.0875;
  int conditioning_features = kConditioningFeatures;
  int warp_channels = 64;
  int warp_layers = 3;
  int warp_kernel = 5;
  int tcn_channels = 64;
  int tcn_blocks = 3;
  std::vector<int> dilations{1, 2, 4, 8};
  std::int64_t segment_length = kSegmentLength;
};

// Conditioning [B, F, T] -> warp correction [B, 2, T]; the last layer starts at zero.
class WarpNet {
 public:
  WarpNet() = default;
  WarpNet(const BinauralizerConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& conditioning) const;
  int receptive_radius() const;
  void register_state(nn::StateDict& sd, const std::string& prefix);
  std::vector<nn::Conv1d>& layers() { return layers_; }

 private:
  std::vector<nn::Conv1d> layers_;
};

// Stacked causal dilated convolutions (kernel 2) over the warped pair, each
// modulated by the conditioning through z * (1 + gamma(c)) + beta(c), with a
// residual 1x1 mix. The output layer starts at zero, making the network an
// identity map on x_lr at initialisation.
class TemporalConvNet {
 public:
  TemporalConvNet() = default;
  TemporalConvNet(const BinauralizerConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& x_lr, const Tensor& conditioning) const;
  std::int64_t receptive_field() const;
  void register_state(nn::StateDict& sd, const std::string& prefix);
  nn::Conv1d& output_layer() { return out_; }

 private:
  struct Layer {
    nn::Conv1d conv;
    nn::Conv1d gamma;
    nn::Conv1d beta;
    nn::Conv1d mix;
  };
  nn::Conv1d in_;
  std::vector<Layer> layers_;
  nn::Conv1d out_;
};

class Binauralizer {
 public:
  Binauralizer() = default;
  Binauralizer(const BinauralizerConfig& cfg, std::uint64_t seed);

  // mono[B, T], conditioning[B, F, T] -> stereo[B, 2, T]. Runs without a
  // gradient tape when frozen.
  Tensor forward(const Tensor& mono, const Tensor& conditioning) const;

  const BinauralizerConfig& config() const { return cfg_; }
  bool frozen() const { return frozen_; }
  void set_frozen(bool f) { frozen_ = f; }
  bool pretrained() const { return pretrained_; }
  void set_pretrained(bool p) { pretrained_ = p; }

  WarpNet& warpnet() { return warp_; }
  TemporalConvNet& convnet() { return tcn_; }
  nn::StateDict state_dict();
  std::uint64_t hash();

 private:
  BinauralizerConfig cfg_;
  WarpNet warp_;
  TemporalConvNet tcn_;
  bool frozen_ = false;
  bool pretrained_ = false;
};

// Conditioning track -> [1, F, T] tensor.
Tensor conditioning_tensor(const ConditioningTrack& c);

// Segments the utterance, converts every segment with a conditioning window
// drawn from the pool (seeded per segment) and merges back to the input
// length. The pool must be at the converter's sample rate.
Waveform binauralize_utterance(const Waveform& mono, std::span<const ConditioningTrack> pool,
                               const Binauralizer& model, std::uint64_t seed);

struct PretrainBatch {
  Tensor mono;          // [B, T]
  Tensor conditioning;  // [B, F, T]
  Tensor target;        // [B, 2, T]
};

struct PretrainOptions {
  bool phase_loss = false;
  double phase_weight = 0.1;
  int phase_fft = 256;
  int phase_hop = 128;
};

Tensor pretrain_loss(const Binauralizer& model, const PretrainBatch& batch, const PretrainOptions& opt);

// One Adam update on the batch; returns the loss before the update. Throws
// TrainingAborted on a non-finite loss without touching the parameters.
double pretrain_step(Binauralizer& model, const PretrainBatch& batch, Adam& optimizer, const PretrainOptions& opt);

// Cuts every pair into non-overlapping windows of `chunk` samples.
std::vector<PretrainBatch> make_pretrain_chunks(std::span<const BinauralPair> corpus, std::int64_t chunk);

// Stacks chunk items into one batch.
PretrainBatch stack_batch(std::span<const PretrainBatch> items, std::span<const std::size_t> which);

}  // namespace m2s
