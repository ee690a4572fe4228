#include "equivar/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "equivar/errors.hpp"

namespace equivar {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0) throw DimensionError("zero extent on axis " + std::to_string(i) + " of " + shape_str(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape) : node_(std::make_shared<detail::Node<T>>()) {
  check_extents(shape);
  node_->value.assign(numel(shape), T(0));
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::Node<T>>()) {
  check_extents(shape);
  if (values.size() != numel(shape)) {
    throw DimensionError("buffer of " + std::to_string(values.size()) + " elements does not fill shape " +
                         shape_str(shape));
  }
  node_->value = std::move(values);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T v) {
  Tensor t(std::move(shape));
  std::fill(t.node_->value.begin(), t.node_->value.end(), v);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, std::mt19937_64& rng, T stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (auto& v : t.node_->value) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::uniform(Shape shape, std::mt19937_64& rng, T lo, T hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (auto& v : t.node_->value) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
std::size_t Tensor<T>::extent(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return node_->shape[axis];
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  if (!is_leaf()) throw Error("mutable access to a non-leaf tensor");
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank does not match " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw DimensionError("index out of range on axis " + std::to_string(axis));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor t(node_->shape, node_->value);
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

template <typename T>
template <typename U>
Tensor<U> Tensor<T>::cast() const {
  std::vector<U> out(node_->value.begin(), node_->value.end());
  return Tensor<U>(node_->shape, std::move(out));
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                      std::function<void(detail::Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(value));
  const bool needs = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
  if (needs) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.parents.reserve(inputs.size());
    for (auto& in : inputs) node.parents.push_back(in.node());
    node.backward = std::move(backward);
  }
  return out;
}

template <typename T>
void accumulate_grad(const Tensor<T>& t, std::span<const T> contribution) {
  if (!t.requires_grad()) return;
  T* g = t.node()->grad_buffer();
  for (std::size_t i = 0; i < contribution.size(); ++i) g[i] += contribution[i];
}

template <typename T>
void backward(const Tensor<T>& root) {
  if (root.size() != 1) throw DimensionError("backward() needs a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (!node->backward) continue;
    if (!node->grad.empty()) node->backward(*node);
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<double> Tensor<float>::cast<double>() const;
template Tensor<float> Tensor<double>::cast<float>() const;
template Tensor<float> Tensor<float>::cast<float>() const;
template Tensor<double> Tensor<double>::cast<double>() const;

template Tensor<float> make_result(Shape, std::vector<float>, std::vector<Tensor<float>>,
                                   std::function<void(detail::Node<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, std::vector<Tensor<double>>,
                                    std::function<void(detail::Node<double>&)>);
template void accumulate_grad(const Tensor<float>&, std::span<const float>);
template void accumulate_grad(const Tensor<double>&, std::span<const double>);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace equivar
