#pragma once

// Graph attention over fully connected graphs with self-loops, top-k graph
// pooling and axis projections. Graphs are stored as node matrices [B, N, d].

#include <cstdint>
#include <string>
#include <vector>

#include "m2s/nn.hpp"
#include "m2s/tensor.hpp"

namespace m2s {

// Attention logits e(n, u) = sum_k W_k h_n,k h_u,k, normalised over the
// source nodes u of every target n. The aggregate m_n = sum_u alpha(u, n) h_u
// is combined as o_n = U(SeLU(BN(m_n + h_n))) with U: d -> d'.
class GatLayer {
 public:
  GatLayer() = default;
  GatLayer(std::int64_t in_dim, std::int64_t out_dim, Rng& rng);

  // [B, N(target), N(source)]; every row sums to one.
  Tensor attention(const Tensor& h) const;
  Tensor forward(const Tensor& h, bool training);

  Tensor& attention_weight() { return w_; }
  nn::Linear& output() { return out_; }
  void register_state(nn::StateDict& sd, const std::string& prefix);

 private:
  Tensor w_;
  nn::BatchNorm bn_;
  nn::Linear out_;
};

// round-half-up(ratio * n), at least 1 and at most n.
std::int64_t pooled_count(std::int64_t n, double ratio);

// Scores s = sigmoid(p . h_n + c); keeps the top pooled_count(N, ratio) nodes
// in their original order (ties favour the lower index) and gates each kept
// node by its score.
class GraphPool {
 public:
  GraphPool() = default;
  GraphPool(std::int64_t dim, double ratio, Rng& rng);

  Tensor forward(const Tensor& h) const;
  // Kept node indices of the last call, per batch item.
  const std::vector<std::vector<std::int64_t>>& last_indices() const { return last_; }
  double ratio() const { return ratio_; }
  nn::Linear& scorer() { return proj_; }
  void register_state(nn::StateDict& sd, const std::string& prefix);

 private:
  nn::Linear proj_;
  double ratio_ = 1.0;
  mutable std::vector<std::vector<std::int64_t>> last_;
};

enum class ProjectionAxis { Nodes, Features };

// Affine map along one axis of [B, N, d]: Nodes maps N -> out, Features maps d -> out.
class GraphProjection {
 public:
  GraphProjection() = default;
  GraphProjection(ProjectionAxis axis, std::int64_t in, std::int64_t out, Rng& rng);

  Tensor forward(const Tensor& h) const;
  ProjectionAxis axis() const { return axis_; }
  void register_state(nn::StateDict& sd, const std::string& prefix);

 private:
  ProjectionAxis axis_ = ProjectionAxis::Nodes;
  nn::Linear lin_;
};

}  // namespace m2s
