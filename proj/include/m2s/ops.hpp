#pragma once

// Differentiable tensor operations. Every op validates shapes and throws
// ShapeError with the offending shapes on mismatch.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "m2s/tensor.hpp"

namespace m2s::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor abs(const Tensor& a);
Tensor selu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
// [..., N, M] -> [..., M, N]
Tensor transpose_last2(const Tensor& a);
// [B, C, ...] -> [B, 1, ...]
Tensor select_channel(const Tensor& a, std::int64_t channel);

// [B, N, K] x [B, K, M] -> [B, N, M]
Tensor bmm(const Tensor& a, const Tensor& b);
// [B, N, K] x [B, M, K]^T -> [B, N, M]
Tensor bmm_nt(const Tensor& a, const Tensor& b);
Tensor softmax_last(const Tensor& a);

// x[..., in] W[out, in] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct Conv1dOptions {
  int dilation = 1;
  int pad_left = 0;
  int pad_right = 0;
};
// x[B, Cin, T], weight[Cout, Cin, K], bias[Cout] (optional); stride 1, zero padding.
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv1dOptions opt = {});

struct Conv2dOptions {
  int pad_top = 0;
  int pad_bottom = 0;
  int pad_left = 0;
  int pad_right = 0;
};
// x[B, Cin, H, W], weight[Cout, Cin, KH, KW], bias[Cout] (optional); stride 1.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opt = {});

// Non-overlapping max pooling over the last two axes of [B, C, H, W]; floor sizes.
Tensor max_pool2d(const Tensor& x, int kernel_h, int kernel_w);

struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};
// Normalises per index of `channel_axis` over every other axis. Training mode
// uses batch statistics (biased) and updates the running estimates (unbiased).
Tensor batch_norm(const Tensor& x, int channel_axis, BatchNormState& state, bool training);

enum class GraphAxis { Spectral, Temporal };
// fm[B, C, H, W] -> nodes[B, N, C]: mean of |fm| over W (spectral, N = H) or
// over H (temporal, N = W).
Tensor graph_from_feature_map(const Tensor& fm, GraphAxis axis);

// x[B, N, d], index[b] lists k rows of batch b -> [B, k, d]
Tensor gather_rows(const Tensor& x, const std::vector<std::vector<std::int64_t>>& index);
// x[B, N, d] * s[B, N] broadcast over d
Tensor scale_rows(const Tensor& x, const Tensor& s);
// x[..., d] * w[d]
Tensor scale_last(const Tensor& x, const Tensor& w);

Tensor mse(const Tensor& prediction, const Tensor& target);

// Mean over the batch of -w[y] * log softmax(logits)[y] for logits[B, 2].
Tensor weighted_cross_entropy(const Tensor& logits, std::span<const int> labels,
                              std::array<double, 2> class_weights);

// Mean of 1 - cos(phase difference) over Hann-windowed DFT bins of x[B, C, T]
// frames, restricted to bins where both spectra carry energy.
Tensor stft_phase_loss(const Tensor& prediction, const Tensor& target, int n_fft, int hop);

}  // namespace m2s::ops
