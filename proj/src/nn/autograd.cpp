#include "stackdiff/nn/autograd.hpp"

#include <unordered_set>

#include "stackdiff/error.hpp"

namespace stackdiff::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

double* Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad.data();
}

Var Var::constant(Shape shape, Buffer values) {
  if (numel(shape) != values.size()) throw ShapeError("tensor values do not match shape " + shape_string(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return Var(n);
}

Var Var::zeros(Shape shape) {
  const auto n = numel(shape);
  return constant(std::move(shape), Buffer(n, 0.0));
}

Var Var::parameter(Shape shape, Buffer values) {
  Var v = constant(std::move(shape), std::move(values));
  v.node_->requires_grad = true;
  return v;
}

double Var::item() const {
  if (node_->value.size() != 1) throw ShapeError("item() on a tensor of shape " + shape_string(node_->shape));
  return node_->value[0];
}

void Var::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

void Var::backward() const {
  if (node_->value.size() != 1) throw ShapeError("backward() requires a scalar output");
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var make_result(Shape shape, Buffer value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (auto& in : inputs) n->parents.push_back(in.ptr());
      n->backward = std::move(backward);
    }
  }
  return Var(n);
}

}  // namespace stackdiff::nn
