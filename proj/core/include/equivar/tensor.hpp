#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace equivar {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// A node of the dynamic autodiff graph. Values never change after the op that
// produced them returns, except for leaf parameters touched by an optimizer.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // lazily sized; empty means "no contribution yet"
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share the underlying node, so a
/// parameter copied into a layer and into an optimizer is the same storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> values);
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor scalar(T v) { return Tensor(Shape{}, {v}); }
  static Tensor full(Shape shape, T v);
  static Tensor parameter(Shape shape, std::vector<T> values);
  static Tensor randn(Shape shape, std::mt19937_64& rng, T stddev = T(1));
  static Tensor uniform(Shape shape, std::mt19937_64& rng, T lo, T hi);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  // Only for leaf tensors (initialisation, optimizer updates).
  std::span<T> mutable_values();
  T item() const;
  T operator[](std::size_t flat) const { return node_->value[flat]; }
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool is_leaf() const noexcept { return !node_->backward; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() const { node_->grad.clear(); }

  /// Deep copy as a new leaf with the same requires_grad flag.
  Tensor clone() const;
  template <typename U>
  Tensor<U> cast() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds the result of a differentiable op. `backward` is attached only when
/// at least one input requires gradients; it reads the result's grad buffer and
/// accumulates into the inputs' buffers.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                      std::function<void(detail::Node<T>&)> backward);

/// Adds `contribution` into the gradient buffer of `t` if it takes gradients.
template <typename T>
void accumulate_grad(const Tensor<T>& t, std::span<const T> contribution);

/// While alive, newly created results record no graph (inference only).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled() noexcept;

/// Reverse-mode sweep from a scalar root. Every node is visited once, after
/// all of its consumers; gradients of intermediate nodes are released.
template <typename T>
void backward(const Tensor<T>& root);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace equivar
