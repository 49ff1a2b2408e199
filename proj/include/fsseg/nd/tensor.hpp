#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fsseg/error.hpp"

namespace fsseg::nd {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

enum class Dtype { F32, F64 };

template <typename T>
constexpr Dtype dtype_of = std::is_same_v<T, float> ? Dtype::F32 : Dtype::F64;

template <typename T>
void check_finite(std::span<const T> vals, const char* what) {
  for (const T& v : vals) {
    if (!std::isfinite(v)) throw NonFinite(std::string("in ") + what);
  }
}

// One autodiff graph node. Leaves (parameters, inputs) have no backward_fn;
// interior nodes keep their parents alive and know how to push their gradient
// one step back.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : node(std::move(n)) {}

  static Tensor zeros(Shape shape) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(numel(shape), T(0));
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T v) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(numel(shape), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return full({}, v); }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeMismatch("from_data: " + shape_str(shape) + " vs " +
                          std::to_string(data.size()) + " values");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node); }
  const Shape& shape() const { return node->shape; }
  int rank() const { return static_cast<int>(node->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(node->value.size()); }
  int64_t dim(int i) const { return node->shape[static_cast<size_t>(i)]; }

  std::span<const T> values() const { return node->value; }
  // Mutable access; only meaningful for leaves (parameters, data buffers).
  std::span<T> raw() { return node->value; }

  T item() const {
    if (size() != 1) throw ShapeMismatch("item() on tensor of size " + std::to_string(size()));
    return node->value[0];
  }

  Dtype dtype() const { return dtype_of<T>; }

  bool requires_grad() const { return node && node->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node->requires_grad = b;
    return *this;
  }

  std::span<const T> grad() const {
    if (node->grad.size() != node->value.size())
      throw Error("NoGrad", std::string("no gradient recorded for node ") + node->op);
    return node->grad;
  }
  std::span<T> grad_raw() {
    node->ensure_grad();
    return node->grad;
  }
  void zero_grad() {
    if (node) node->grad.assign(node->value.size(), T(0));
  }

  // Value copy detached from any graph.
  Tensor detached_copy() const {
    auto n = std::make_shared<Node<T>>();
    n->shape = node->shape;
    n->value = node->value;
    return Tensor(std::move(n));
  }

  std::shared_ptr<Node<T>> node;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every node
// reachable from `loss` that requires grad; each node's incoming gradient is
// finiteness-checked once before its backward function runs.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw ShapeMismatch("backward: loss must be scalar");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.push_back({loss.node.get(), 0});
  visited.insert(loss.node.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node->ensure_grad();
  loss.node->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->backward_fn) continue;
    n->ensure_grad();
    check_finite<T>(n->grad, n->op);
    n->backward_fn(*n);
  }
}

}  // namespace fsseg::nd
