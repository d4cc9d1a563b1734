#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "msm/common.hpp"

namespace msm {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + ")";
}

/// Thread-local autograd switch. Inference paths wrap themselves in a
/// NoGradGuard so no graph is recorded.
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class TensorT;

namespace detail {

/// One node of the reverse-mode tape. `backward` reads this node's grad and
/// accumulates into the parents' grads; nodes without a backward are leaves.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> v;
  std::vector<T> g;  // allocated lazily by ensure_grad()
  bool requires_grad = false;
  std::vector<TensorT<T>> parents;
  std::function<void(Node<T>&)> backward;

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  void ensure_grad() {
    if (g.empty()) g.assign(v.size(), T(0));
  }
};

}  // namespace detail

/// Dense row-major tensor with optional reverse-mode graph attachment.
/// Value semantics on the handle; the storage node is shared.
template <typename T>
class TensorT {
 public:
  using Node = detail::Node<T>;

  TensorT() = default;

  static TensorT zeros(Shape shape) {
    TensorT t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->v.assign(static_cast<size_t>(shape_numel(t.n_->shape)), T(0));
    return t;
  }

  static TensorT full(Shape shape, T value) {
    TensorT t = zeros(std::move(shape));
    std::fill(t.n_->v.begin(), t.n_->v.end(), value);
    return t;
  }

  static TensorT from(Shape shape, std::vector<T> values) {
    require(shape_numel(shape) == static_cast<int64_t>(values.size()),
            "tensor init: shape " + shape_str(shape) + " does not match value count " +
                std::to_string(values.size()));
    TensorT t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->v = std::move(values);
    return t;
  }

  static TensorT scalar(T value) { return from({1}, {value}); }

  static TensorT randn(Rng& rng, Shape shape, T stddev = T(1)) {
    TensorT t = zeros(std::move(shape));
    for (auto& x : t.n_->v) x = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  static TensorT uniform(Rng& rng, Shape shape, T lo, T hi) {
    TensorT t = zeros(std::move(shape));
    for (auto& x : t.n_->v) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  // The handle has shared-pointer semantics: a const handle still exposes
  // mutable storage, as the backward closures capture handles by value.
  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return n_->numel(); }

  T* data() const { return n_->v.data(); }
  std::vector<T>& values() const { return n_->v; }

  T& at(int i) const { return n_->v[static_cast<size_t>(i)]; }
  T& at(int i, int j) const { return n_->v[static_cast<size_t>(i) * dim(1) + j]; }
  T& at(int i, int j, int k) const {
    return n_->v[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  TensorT& set_requires_grad(bool on = true) {
    n_->requires_grad = on;
    return *this;
  }

  /// Copy of the values with no graph attachment.
  TensorT detach() const {
    TensorT t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = n_->shape;
    t.n_->v = n_->v;
    return t;
  }

  bool has_grad() const { return n_ && !n_->g.empty(); }
  std::vector<T>& grad() const {
    n_->ensure_grad();
    return n_->g;
  }
  void zero_grad() const {
    if (!n_->g.empty()) std::fill(n_->g.begin(), n_->g.end(), T(0));
  }

  Node* node() const { return n_.get(); }

  /// Reverse pass from a scalar output. Topological order is computed
  /// iteratively so deep graphs cannot overflow the stack.
  void backward() {
    require(defined() && numel() == 1, "backward() requires a scalar output");
    n_->ensure_grad();
    n_->g[0] = T(1);

    std::vector<std::pair<Node*, size_t>> stack;
    std::vector<Node*> order;
    // visited flags stored in a sorted vector keyed by pointer
    std::vector<Node*> vset;
    auto is_visited = [&vset](Node* p) {
      auto it = std::lower_bound(vset.begin(), vset.end(), p);
      return it != vset.end() && *it == p;
    };
    auto add_visited = [&vset](Node* p) {
      auto it = std::lower_bound(vset.begin(), vset.end(), p);
      vset.insert(it, p);
    };

    stack.emplace_back(n_.get(), 0);
    add_visited(n_.get());
    while (!stack.empty()) {
      auto& [node, next_child] = stack.back();
      if (next_child < node->parents.size()) {
        Node* child = node->parents[next_child].node();
        ++next_child;
        if (child && !is_visited(child) && child->requires_grad) {
          add_visited(child);
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    // order is post-order (children first); run backwards from the output.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward && !node->g.empty()) node->backward(*node);
    }
  }

 private:
  std::shared_ptr<Node> n_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

/// Attach graph metadata to `out` when autograd is on and any parent needs it.
template <typename T, typename Fn>
void attach_backward(TensorT<T>& out, std::vector<TensorT<T>> parents, Fn&& fn) {
  if (!grad_enabled()) return;
  bool needed = false;
  for (const auto& p : parents) needed |= p.requires_grad();
  if (!needed) return;
  out.set_requires_grad(true);
  out.node()->parents = std::move(parents);
  out.node()->backward = std::forward<Fn>(fn);
}

}  // namespace msm
