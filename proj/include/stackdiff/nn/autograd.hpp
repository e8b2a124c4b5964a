#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
// Tensors are flat row-major buffers; image tensors use NHWC layout.

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <string>
#include <vector>

namespace stackdiff::nn {

using Shape = std::vector<int>;

// Cache-line aligned, so vectorized kernels see the same alignment on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node {
  Buffer value;
  Buffer grad;  // allocated lazily during backward
  Shape shape;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // reads this->grad, accumulates into parents

  double* grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, Buffer values);
  static Var zeros(Shape shape);
  static Var parameter(Shape shape, Buffer values);

  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i < 0 ? i + static_cast<int>(node_->shape.size()) : i)); }
  std::size_t size() const { return node_->value.size(); }
  const Buffer& value() const { return node_->value; }
  Buffer& mutable_value() { return node_->value; }
  const Buffer& grad() const { return node_->grad; }
  Buffer& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  double item() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  // Seeds d(this)/d(this) = 1 for a scalar and propagates to every ancestor.
  void backward() const;
  void zero_grad();

 private:
  std::shared_ptr<Node> node_;
};

// While alive on the current thread, ops record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Builds an op result. `backward` is attached only when grad mode is on and
// some input requires a gradient.
Var make_result(Shape shape, Buffer value, std::vector<Var> inputs, std::function<void(Node&)> backward);

}  // namespace stackdiff::nn
