#include "mtnas/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace mtnas {

int shape_size(const Shape& shape) {
  int n = 1;
  for (int e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

namespace autograd {
namespace {
thread_local bool g_enabled = true;
}
bool enabled() { return g_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_enabled) { g_enabled = false; }
NoGradGuard::~NoGradGuard() { g_enabled = prev_; }
}  // namespace autograd

namespace {
std::atomic<std::uint64_t> g_seq{1};
}

void check_finite(const Array& a, const char* op_name) {
  if (!a.allFinite()) {
    throw NumericsError(std::string("non-finite value produced by ") + op_name);
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  int n = shape_size(shape);
  return from(std::move(shape), Array::Zero(n), requires_grad);
}

Tensor Tensor::constant(Shape shape, double v, bool requires_grad) {
  int n = shape_size(shape);
  return from(std::move(shape), Array::Constant(n, v), requires_grad);
}

Tensor Tensor::from(Shape shape, Array data, bool requires_grad) {
  int n = shape_size(shape);
  if (n != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  check_finite(data, "tensor construction");
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->value = std::move(data);
  t.node_->requires_grad = requires_grad;
  t.node_->seq = g_seq.fetch_add(1);
  return t;
}

Tensor Tensor::from(Shape shape, const std::vector<double>& data,
                    bool requires_grad) {
  Array a = Eigen::Map<const Array>(data.data(), static_cast<Eigen::Index>(data.size()));
  return from(std::move(shape), std::move(a), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from(Shape{1}, Array::Constant(1, v), requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->value[0];
}

Array Tensor::grad() const {
  if (node_->grad.size() == node_->value.size()) return node_->grad;
  return Array::Zero(node_->value.size());
}

void Tensor::zero_grad() { node_->grad.resize(0); }

Tensor Tensor::make(Shape shape, Array value, std::vector<Tensor> parents,
                    std::function<void(Node&)> backprop, const char* op_name) {
  check_finite(value, op_name);
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->value = std::move(value);
  t.node_->seq = g_seq.fetch_add(1);
  bool needs = false;
  if (autograd::enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    t.node_->requires_grad = true;
    t.node_->parents.reserve(parents.size());
    for (auto& p : parents) t.node_->parents.push_back(p.node());
    t.node_->backprop = std::move(backprop);
  }
  return t;
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward requires a scalar loss");
  auto root = loss.node();
  if (root->backward_ran) {
    throw StateError("backward called twice on the same loss without reset");
  }
  root->backward_ran = true;
  if (!root->requires_grad) return;  // loss independent of all parameters

  // Topological order by creation sequence: parents always precede children.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });

  root->grad_ref() += 1.0;
  for (Node* n : order) {
    if (n->backprop) n->backprop(*n);
  }
}

}  // namespace mtnas
