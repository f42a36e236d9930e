#include "m2s/graph_attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "m2s/errors.hpp"

namespace m2s {

namespace {

void require_graph(const Tensor& h, const char* what) {
  if (h.ndim() != 3 || h.size(1) < 1) throw ShapeError(std::string(what) + ": expected nodes [B, N, d], got " + shape_str(h.shape()));
}

}  // namespace

GatLayer::GatLayer(std::int64_t in_dim, std::int64_t out_dim, Rng& rng)
    : w_(Tensor::parameter({in_dim}, nn::uniform_init(rng, in_dim, in_dim))), bn_(in_dim), out_(in_dim, out_dim, rng) {}

Tensor GatLayer::attention(const Tensor& h) const {
  require_graph(h, "gat");
  if (h.size(2) != w_.size(0)) {
    throw ShapeError("gat: node dim " + std::to_string(h.size(2)) + " vs attention weight " + std::to_string(w_.size(0)));
  }
  return ops::softmax_last(ops::bmm_nt(ops::scale_last(h, w_), h));
}

Tensor GatLayer::forward(const Tensor& h, bool training) {
  const Tensor m = ops::bmm(attention(h), h);
  return out_.forward(ops::selu(bn_.forward(ops::add(m, h), 2, training)));
}

void GatLayer::register_state(nn::StateDict& sd, const std::string& prefix) {
  sd.add_parameter(prefix + ".attention", &w_);
  bn_.register_state(sd, prefix + ".bn");
  out_.register_state(sd, prefix + ".out");
}

std::int64_t pooled_count(std::int64_t n, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ValidationError("pool ratio must lie in (0, 1]");
  // The epsilon absorbs binary representation error in products like 0.6 * 5.
  const auto k = static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(n) + 0.5 + 1e-9));
  return std::clamp<std::int64_t>(k, 1, std::max<std::int64_t>(n, 1));
}

GraphPool::GraphPool(std::int64_t dim, double ratio, Rng& rng) : proj_(dim, 1, rng), ratio_(ratio) {
  pooled_count(1, ratio);
}

Tensor GraphPool::forward(const Tensor& h) const {
  require_graph(h, "graph_pool");
  const std::int64_t B = h.size(0), N = h.size(1);
  const std::int64_t k = pooled_count(N, ratio_);
  const Tensor scores = ops::sigmoid(proj_.forward(h));  // [B, N, 1]
  const auto sv = scores.values();
  last_.assign(static_cast<std::size_t>(B), {});
  for (std::int64_t b = 0; b < B; ++b) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(N));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t i, std::int64_t j) {
      return sv[static_cast<std::size_t>(b * N + i)] > sv[static_cast<std::size_t>(b * N + j)];
    });
    order.resize(static_cast<std::size_t>(k));
    std::sort(order.begin(), order.end());
    last_[static_cast<std::size_t>(b)] = std::move(order);
  }
  const Tensor kept = ops::gather_rows(h, last_);
  const Tensor gate = ops::reshape(ops::gather_rows(scores, last_), {B, k});
  return ops::scale_rows(kept, gate);
}

void GraphPool::register_state(nn::StateDict& sd, const std::string& prefix) { proj_.register_state(sd, prefix + ".score"); }

GraphProjection::GraphProjection(ProjectionAxis axis, std::int64_t in, std::int64_t out, Rng& rng)
    : axis_(axis), lin_(in, out, rng) {}

Tensor GraphProjection::forward(const Tensor& h) const {
  require_graph(h, "projection");
  if (axis_ == ProjectionAxis::Features) return lin_.forward(h);
  if (h.size(1) != lin_.in_features()) {
    throw ShapeError("node projection expects " + std::to_string(lin_.in_features()) + " nodes, got " +
                     std::to_string(h.size(1)));
  }
  return ops::transpose_last2(lin_.forward(ops::transpose_last2(h)));
}

void GraphProjection::register_state(nn::StateDict& sd, const std::string& prefix) { lin_.register_state(sd, prefix); }

}  // namespace m2s
