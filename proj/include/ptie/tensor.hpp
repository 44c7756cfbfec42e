#pragma once

// Minimal dense-tensor engine with reverse-mode differentiation. Tensors are
// row-major, value-like (storage shared via shared_ptr), and build a dynamic
// tape when grad mode is on. Dense products are delegated to Eigen.

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <unordered_set>
#include <vector>

#include "ptie/common.hpp"

namespace ptie {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
};

template <class S>
class Tensor;

template <class S>
struct GradNode {
  std::vector<Tensor<S>> parents;
  std::function<void(const Tensor<S>&)> backprop;
};

template <class S>
class Tensor {
 public:
  Shape shape;
  std::shared_ptr<std::vector<S>> data;
  std::shared_ptr<std::vector<S>> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::shared_ptr<GradNode<S>> node;

  Tensor() = default;

  static Tensor zeros(Shape shp, bool requires_grad = false) {
    Tensor t;
    t.shape = std::move(shp);
    t.data = std::make_shared<std::vector<S>>(shape_numel(t.shape), S(0));
    if (requires_grad) {
      t.requires_grad = true;
      t.grad = std::make_shared<std::vector<S>>(t.data->size(), S(0));
    }
    return t;
  }

  static Tensor from(Shape shp, std::vector<S> values, bool requires_grad = false) {
    if (shape_numel(shp) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor: shape " + shape_str(shp) + " does not hold " +
                       std::to_string(values.size()) + " values");
    Tensor t = zeros(std::move(shp), requires_grad);
    std::copy(values.begin(), values.end(), t.data->begin());
    return t;
  }

  int ndim() const { return static_cast<int>(shape.size()); }
  int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
  int64_t dim(int i) const { return shape[i < 0 ? static_cast<int>(shape.size()) + i : i]; }

  S* ptr() { return data->data(); }
  const S* ptr() const { return data->data(); }
  S* gptr() { return grad->data(); }
  const S* gptr() const { return grad->data(); }

  S item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not scalar");
    return (*data)[0];
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), S(0));
  }

  Tensor detach() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
  }

  Tensor reshaped(Shape new_shape) const;
};

namespace detail {

template <class S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using CMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C (+)= op(A) * op(B); (ar, ac) and (br, bc) are the stored layouts.
template <class S>
void gemm(const S* a, int64_t ar, int64_t ac, bool ta, const S* b, int64_t br, int64_t bc,
          bool tb, S* c, bool accumulate) {
  CMatMap<S> ma(a, ar, ac);
  CMatMap<S> mb(b, br, bc);
  MatMap<S> mc(c, ta ? ac : ar, tb ? br : bc);
  if (!ta && !tb) {
    if (accumulate) mc.noalias() += ma * mb;
    else mc.noalias() = ma * mb;
  } else if (!ta && tb) {
    if (accumulate) mc.noalias() += ma * mb.transpose();
    else mc.noalias() = ma * mb.transpose();
  } else if (ta && !tb) {
    if (accumulate) mc.noalias() += ma.transpose() * mb;
    else mc.noalias() = ma.transpose() * mb;
  } else {
    if (accumulate) mc.noalias() += ma.transpose() * mb.transpose();
    else mc.noalias() = ma.transpose() * mb.transpose();
  }
}

template <class S>
bool any_grad(const std::vector<Tensor<S>>& ts) {
  if (!grad_enabled()) return false;
  for (const auto& t : ts)
    if (t.requires_grad) return true;
  return false;
}

template <class S>
Tensor<S> make_result(Shape shape, const std::vector<Tensor<S>>& parents,
                      std::function<void(const Tensor<S>&)> backprop) {
  const bool rg = any_grad(parents);
  Tensor<S> out = Tensor<S>::zeros(std::move(shape), rg);
  if (rg) {
    out.node = std::make_shared<GradNode<S>>();
    out.node->parents = parents;
    out.node->backprop = std::move(backprop);
  }
  return out;
}

}  // namespace detail

template <class S>
Tensor<S> Tensor<S>::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != numel())
    throw ShapeError("reshape: " + shape_str(shape) + " -> " + shape_str(new_shape));
  Tensor<S> out;
  out.shape = std::move(new_shape);
  out.data = data;
  if (requires_grad && grad_enabled()) {
    out.requires_grad = true;
    out.grad = std::make_shared<std::vector<S>>(data->size(), S(0));
    out.node = std::make_shared<GradNode<S>>();
    out.node->parents = {*this};
    out.node->backprop = [](const Tensor<S>& o) {
      const Tensor<S>& p = o.node->parents[0];
      if (!p.requires_grad) return;
      const S* g = o.gptr();
      S* pg = p.grad->data();
      const int64_t n = o.numel();
      for (int64_t i = 0; i < n; ++i) pg[i] += g[i];
    };
  }
  return out;
}

// Reverse sweep from a scalar loss: post-order DFS over the tape (parents
// before consumers), then run backprops in reverse.
template <class S>
void backward(Tensor<S>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
  if (!loss.requires_grad || !loss.node) return;
  (*loss.grad)[0] = S(1);

  struct Frame {
    Tensor<S> t;
    size_t next = 0;
  };
  std::vector<Tensor<S>> order;
  std::vector<Frame> stack;
  std::unordered_set<GradNode<S>*> seen;
  stack.push_back({loss, 0});
  seen.insert(loss.node.get());
  while (!stack.empty()) {
    GradNode<S>* n = stack.back().t.node.get();
    if (stack.back().next < n->parents.size()) {
      Tensor<S>& p = n->parents[stack.back().next++];
      if (p.node && !seen.count(p.node.get())) {
        seen.insert(p.node.get());
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(stack.back().t);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    it->node->backprop(*it);
  }
}

}  // namespace ptie
