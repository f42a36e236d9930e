#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations in ops.hpp build
// the graph when grad mode is on and at least one input requires a gradient;
// Tensor::backward() walks it in reverse topological order and then releases
// the interior of the graph. Leaves created with Tensor::parameter() keep
// their accumulated gradients until zero_grad().

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace m2s {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct Node {
  std::vector<double> value;
  std::vector<double> grad;
  Shape shape;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const std::vector<double>&)> backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  // Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::int64_t size(int axis) const;  // negative axes count from the back
  std::int64_t numel() const;
  int ndim() const { return static_cast<int>(shape().size()); }

  std::span<const double> values() const;
  std::span<double> mutable_values();
  const std::vector<double>& vec() const;
  double item() const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;  // empty when no gradient was accumulated
  std::span<double> mutable_grad() const;  // allocates zeros on first use
  void zero_grad();

  // Seeds d(self)/d(self) = 1; self must hold a single element.
  void backward();

  // Same values, no history, never requires grad.
  Tensor detach() const;

  // Builds an op result. `backward` is attached only when grad mode is on and
  // some input requires a gradient.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::initializer_list<const Tensor*> inputs,
                            std::function<void(const std::vector<double>&)> backward);

  detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

// Disables graph construction on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace m2s
