#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mtnas/errors.hpp"

namespace mtnas {

using Array = Eigen::ArrayXd;
using Shape = std::vector<int>;

int shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace autograd {
// Thread-local switch; evaluation paths disable graph recording entirely.
bool enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
}  // namespace autograd

struct Node {
  Shape shape;
  Array value;
  Array grad;  // zero-sized until touched by backward
  bool requires_grad = false;
  bool backward_ran = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates d(loss)/d(parent) into each parent's grad, given this
  // node's grad. Empty for leaves.
  std::function<void(Node&)> backprop;

  Array& grad_ref() {
    if (grad.size() != value.size()) grad = Array::Zero(value.size());
    return grad;
  }
};

// Immutable-after-creation dense tensor participating in a define-by-run
// reverse-mode graph. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor constant(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, Array data, bool requires_grad = false);
  static Tensor from(Shape shape, const std::vector<double>& data,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int size() const { return static_cast<int>(node_->value.size()); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  const Array& value() const { return node_->value; }
  Array& value_mut() { return node_->value; }  // leaf updates (optimizer)
  bool requires_grad() const { return node_->requires_grad; }
  double item() const;

  // Gradient accumulated by backward(); zeros if never reached.
  Array grad() const;
  void zero_grad();

  std::shared_ptr<Node> node() const { return node_; }

  // Builds a result node wired into the graph. `parents` that do not
  // require grad still appear so saved intermediates stay alive.
  static Tensor make(Shape shape, Array value,
                     std::vector<Tensor> parents,
                     std::function<void(Node&)> backprop,
                     const char* op_name);

 private:
  std::shared_ptr<Node> node_;
};

// Reverse-mode sweep from a scalar loss. Every parameter reachable from
// the loss accumulates d(loss)/d(param) into its grad.
void backward(const Tensor& loss);

void check_finite(const Array& a, const char* op_name);

}  // namespace mtnas
