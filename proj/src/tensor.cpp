#include "m2s/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "m2s/errors.hpp"

namespace m2s {

namespace {
thread_local bool g_grad_enabled = true;
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : node_(std::make_shared<detail::Node>()) {
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
  }
  node_->value.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : node_(std::make_shared<detail::Node>()) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " given " +
                     std::to_string(values.size()) + " values");
  }
  node_->value = std::move(values);
  node_->shape = std::move(shape);
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::int64_t Tensor::size(int axis) const {
  const int n = ndim();
  const int a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n) throw ShapeError("axis out of range for " + shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(a)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(node_->value.size()); }

std::span<const double> Tensor::values() const { return node_->value; }
std::span<double> Tensor::mutable_values() { return node_->value; }
const std::vector<double>& Tensor::vec() const { return node_->value; }

double Tensor::item() const {
  if (node_->value.size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->value); }

Tensor Tensor::make_result(Shape shape, std::vector<double> values,
                           std::initializer_list<const Tensor*> inputs,
                           std::function<void(const std::vector<double>&)> backward) {
  Tensor out(std::move(shape), std::move(values));
  if (!g_grad_enabled) return out;
  for (const Tensor* in : inputs) {
    if (in && in->requires_grad()) out.node_->parents.push_back(in->node_);
  }
  if (out.node_->parents.empty()) return out;
  out.node_->requires_grad = true;
  out.node_->is_leaf = false;
  out.node_->backward = std::move(backward);
  return out;
}

void Tensor::backward() {
  if (numel() != 1) throw ShapeError("backward() needs a single-element tensor, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(n->grad);
  }
  // Release interior nodes; leaves keep their gradients.
  for (detail::Node* n : order) {
    if (!n->is_leaf) {
      n->backward = nullptr;
      n->parents.clear();
      if (n != node_.get()) n->grad.clear();
    }
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace m2s
