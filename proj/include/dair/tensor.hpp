#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is an immutable value handle. Operations whose inputs require a
// gradient are recorded on the innermost live Tape of the same element type;
// with no live tape nothing is recorded and results are plain constants.
// Tape::backward walks the recording once, in reverse creation order, and
// returns the gradients of every leaf that reached the loss.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace dair {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

template <class T>
class Tensor;
template <class T>
class Tape;

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
inline thread_local Tape<T>* active_tape = nullptr;

}  // namespace detail

template <class T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor element type must be floating point");

 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<detail::Node<T>>()) {
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " given " +
                       std::to_string(values.size()) + " elements");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }

  /// Leaf that receives a gradient from Tape::backward.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::span<const T> data() const { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  bool requires_grad() const { return node_->requires_grad; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  std::vector<T> to_vector() const { return node_->value; }

  /// Same values, no history, no gradient.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  /// Same values as a fresh gradient-receiving leaf.
  Tensor as_parameter() const { return parameter(shape(), node_->value); }

  const detail::Node<T>* id() const { return node_.get(); }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Gradients produced by one backward pass, keyed by leaf identity.
template <class T>
class Gradients {
 public:
  /// Gradient of `leaf`; zero-filled when the leaf did not reach the loss.
  Tensor<T> operator[](const Tensor<T>& leaf) const {
    auto it = grads_.find(leaf.id());
    if (it == grads_.end()) return Tensor<T>::zeros(leaf.shape());
    return it->second;
  }

  bool contains(const Tensor<T>& leaf) const { return grads_.count(leaf.id()) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape<T>;
  std::unordered_map<const detail::Node<T>*, Tensor<T>> grads_;
};

/// Records differentiable operations for one forward/backward pass.
///
/// Constructing a Tape makes it the active recorder for the current thread
/// until it is destroyed. A tape may be run backward once.
template <class T>
class Tape {
 public:
  Tape() : previous_(detail::active_tape<T>) { detail::active_tape<T> = this; }
  ~Tape() { detail::active_tape<T> = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void record(std::shared_ptr<detail::Node<T>> node) { nodes_.push_back(std::move(node)); }

  Gradients<T> backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (consumed_) throw TapeError("tape already consumed by a previous backward pass");
    consumed_ = true;

    Gradients<T> out;
    if (!loss.requires_grad()) return out;

    auto root = loss.node();
    root->grad.assign(1, T(1));
    std::unordered_set<detail::Node<T>*> leaves;
    if (root->is_leaf()) leaves.insert(root.get());

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node<T>& node = **it;
      for (const auto& p : node.parents) {
        if (p->requires_grad && p->is_leaf()) leaves.insert(p.get());
      }
      if (node.grad.empty()) continue;
      node.backward(node);
      std::vector<T>().swap(node.grad);
    }
    for (detail::Node<T>* leaf : leaves) {
      if (leaf->grad.empty()) continue;
      Tensor<T> g(leaf->shape, std::move(leaf->grad));
      leaf->grad.clear();
      out.grads_.emplace(leaf, std::move(g));
    }
    return out;
  }

 private:
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
  bool consumed_ = false;
  Tape* previous_;
};

namespace detail {

template <class T>
using BackwardFn = std::function<void(Node<T>&)>;

/// Builds an op result; records it when a live tape exists and some parent
/// needs a gradient.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
                      BackwardFn<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  Tape<T>* tape = active_tape<T>;
  bool needs = tape != nullptr &&
               std::any_of(parents.begin(), parents.end(),
                           [](const Tensor<T>& p) { return p.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Tensor<T>(std::move(node));
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// Right-aligned broadcasting: shapes are padded with leading 1s, then every
// axis must agree or be 1 on one side.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;
};

inline Broadcast make_broadcast(const Shape& a, const Shape& b) {
  Broadcast plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank - a.size(), 1), pb(rank - b.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  pb.insert(pb.end(), b.begin(), b.end());
  plan.out.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) {
      throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    }
    plan.out[d] = std::max(pa[d], pb[d]);
  }
  auto strides = [&](const Shape& padded) {
    std::vector<std::size_t> s(rank, 0);
    std::size_t acc = 1;
    for (std::size_t d = rank; d-- > 0;) {
      s[d] = padded[d] == 1 ? 0 : acc;
      acc *= padded[d];
    }
    return s;
  };
  plan.stride_a = strides(pa);
  plan.stride_b = strides(pb);
  return plan;
}

template <class F>
void broadcast_for_each(const Broadcast& plan, F&& f) {
  std::size_t total = shape_numel(plan.out);
  if (plan.same) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  std::size_t rank = plan.out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::size_t inner = plan.out[rank - 1];
  std::size_t sa = plan.stride_a[rank - 1], sb = plan.stride_b[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(base + j, oa + j * sa, ob + j * sb);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      oa += plan.stride_a[d];
      ob += plan.stride_b[d];
      if (idx[d] < plan.out[d]) break;
      oa -= plan.stride_a[d] * plan.out[d];
      ob -= plan.stride_b[d] * plan.out[d];
      idx[d] = 0;
    }
  }
}

template <class T, class Fwd, class Da, class Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da, Db db) {
  Broadcast plan = make_broadcast(a.shape(), b.shape());
  std::vector<T> out(shape_numel(plan.out));
  auto av = a.data();
  auto bv = b.data();
  broadcast_for_each(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = fwd(av[ia], bv[ib]); });
  return make_result<T>(plan.out, std::move(out), {a, b}, [plan, da, db](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    const auto& x = pa.value;
    const auto& y = pb.value;
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      broadcast_for_each(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { ga[ia] += g[o] * da(x[ia], y[ib]); });
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      broadcast_for_each(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { gb[ib] += g[o] * db(x[ia], y[ib]); });
    }
  });
}

// `deriv(x, y)` is dy/dx given input x and output y.
template <class T, class Fwd, class Deriv>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, [deriv](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
  });
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
T stable_softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary_op(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary_op(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return detail::stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return detail::stable_softplus(v); }, [](T v, T) { return detail::stable_sigmoid(v); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> cos(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return std::cos(v); }, [](T v, T) { return -std::sin(v); });
}

template <class T>
Tensor<T> sin(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return std::sin(v); }, [](T v, T) { return std::cos(v); });
}

/// Gradient passes where lo <= x <= hi.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary_op(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// Operator sugar. Scalars on either side are any arithmetic type.
template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

template <class T, class S, class = std::enable_if_t<std::is_arithmetic_v<S>>>
Tensor<T> operator+(const Tensor<T>& a, S s) { return add_scalar(a, T(s)); }
template <class T, class S, class = std::enable_if_t<std::is_arithmetic_v<S>>>
Tensor<T> operator+(S s, const Tensor<T>& a) { return add_scalar(a, T(s)); }
template <class T, class S, class = std::enable_if_t<std::is_arithmetic_v<S>>>
Tensor<T> operator-(const Tensor<T>& a, S s) { return add_scalar(a, T(-s)); }
template <class T, class S, class = std::enable_if_t<std::is_arithmetic_v<S>>>
Tensor<T> operator-(S s, const Tensor<T>& a) { return add_scalar(neg(a), T(s)); }
template <class T, class S, class = std::enable_if_t<std::is_arithmetic_v<S>>>
Tensor<T> operator*(const Tensor<T>& a, S s) { return scale(a, T(s)); }
template <class T, class S, class = std::enable_if_t<std::is_arithmetic_v<S>>>
Tensor<T> operator*(S s, const Tensor<T>& a) { return scale(a, T(s)); }
template <class T, class S, class = std::enable_if_t<std::is_arithmetic_v<S>>>
Tensor<T> operator/(const Tensor<T>& a, S s) { return scale(a, T(1) / T(s)); }
template <class T, class S, class = std::enable_if_t<std::is_arithmetic_v<S>>>
Tensor<T> operator/(S s, const Tensor<T>& a) {
  T c = T(s);
  return detail::unary_op(a, [c](T v) { return c / v; }, [c](T v, T) { return -c / (v * v); });
}

// ---------------------------------------------------------------- structure

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return detail::make_result<T>(std::move(shape), x.to_vector(), {x}, [](detail::Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Concatenates along `axis`; all other axes must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, long axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  std::size_t ax = detail::normalize_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat rank mismatch: " + shape_str(first) + " vs " + shape_str(s));
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != ax && s[d] != first[d]) {
        throw ShapeError("concat shape mismatch: " + shape_str(first) + " vs " + shape_str(s));
      }
    }
    out_shape[ax] += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= first[d];
  for (std::size_t d = ax + 1; d < first.size(); ++d) inner *= first[d];
  std::size_t out_row = out_shape[ax] * inner;
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    std::size_t row = p.dim(ax) * inner;
    auto v = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.begin() + o * row, row, out.begin() + o * out_row + off);
    }
    off += row;
  }
  return detail::make_result<T>(out_shape, std::move(out), parts,
                                [offsets, outer, out_row](detail::Node<T>& self) {
                                  for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                    auto& p = *self.parents[k];
                                    if (!p.requires_grad) continue;
                                    auto& g = p.grad_buffer();
                                    std::size_t row = g.size() / outer;
                                    for (std::size_t o = 0; o < outer; ++o) {
                                      const T* src = self.grad.data() + o * out_row + offsets[k];
                                      T* dst = g.data() + o * row;
                                      for (std::size_t j = 0; j < row; ++j) dst[j] += src[j];
                                    }
                                  }
                                });
}

/// Elements [start, start + length) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, long axis, std::size_t start, std::size_t length) {
  std::size_t ax = detail::normalize_axis(axis, x.rank());
  if (start + length > x.dim(ax) || length == 0) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(ax) + " of " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= x.dim(d);
  for (std::size_t d = ax + 1; d < x.rank(); ++d) inner *= x.dim(d);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::size_t in_row = x.dim(ax) * inner, out_row = length * inner, off = start * inner;
  std::vector<T> out(outer * out_row);
  auto v = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(v.begin() + o * in_row + off, out_row, out.begin() + o * out_row);
  }
  return detail::make_result<T>(out_shape, std::move(out), {x}, [=](detail::Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < out_row; ++j) g[o * in_row + off + j] += self.grad[o * out_row + j];
    }
  });
}

/// Materializes `x` at the broadcast shape `shape`.
template <class T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  detail::Broadcast plan = detail::make_broadcast(x.shape(), shape);
  if (plan.out != shape) {
    throw ShapeError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return add(x, Tensor<T>::zeros(shape));
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return detail::make_result<T>(Shape{}, {acc}, {x}, [](detail::Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& gi : g) gi += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

/// Sum over one axis, which is removed from the shape.
template <class T>
Tensor<T> sum(const Tensor<T>& x, long axis) {
  std::size_t ax = detail::normalize_axis(axis, x.rank());
  std::size_t outer = 1, inner = 1, n = x.dim(ax);
  for (std::size_t d = 0; d < ax; ++d) outer *= x.dim(d);
  for (std::size_t d = ax + 1; d < x.rank(); ++d) inner *= x.dim(d);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  std::vector<T> out(outer * inner, T(0));
  auto v = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += v[(o * n + k) * inner + i];
  return detail::make_result<T>(out_shape, std::move(out), {x}, [=](detail::Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) g[(o * n + k) * inner + i] += self.grad[o * inner + i];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, long axis) {
  std::size_t ax = detail::normalize_axis(axis, x.rank());
  return scale(sum(x, axis), T(1) / T(x.dim(ax)));
}

namespace detail {

template <class T>
std::size_t last_axis(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("last-axis op on a scalar");
  return x.dim(x.rank() - 1);
}

}  // namespace detail

/// log(sum(exp(x))) over the last axis, which is removed.
template <class T>
Tensor<T> logsumexp(const Tensor<T>& x) {
  std::size_t n = detail::last_axis(x), rows = x.numel() / n;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<T> out(rows);
  auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = v.data() + r * n;
    T m = *std::max_element(row, row + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - m);
    out[r] = m + std::log(s);
  }
  return detail::make_result<T>(out_shape, std::move(out), {x}, [n, rows](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j)
        g[r * n + j] += self.grad[r] * std::exp(p.value[r * n + j] - self.value[r]);
  });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  std::size_t n = detail::last_axis(x), rows = x.numel() / n;
  std::vector<T> out(x.numel());
  auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = v.data() + r * n;
    T m = *std::max_element(row, row + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - m);
    T lse = m + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = row[j] - lse;
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [n, rows](detail::Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      T gs = 0;
      for (std::size_t j = 0; j < n; ++j) gs += self.grad[r * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[r * n + j] += self.grad[r * n + j] - std::exp(self.value[r * n + j]) * gs;
    }
  });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  std::size_t n = detail::last_axis(x), rows = x.numel() / n;
  std::vector<T> out(x.numel());
  auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = v.data() + r * n;
    T m = *std::max_element(row, row + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += (out[r * n + j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= s;
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [n, rows](detail::Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[r * n + j] * self.value[r * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[r * n + j] += self.value[r * n + j] * (self.grad[r * n + j] - dot);
    }
  });
}

// ---------------------------------------------------------------- linear algebra

/// [m, k] x [k, n] -> [m, n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<T> out(static_cast<std::size_t>(m * n));
  Map(out.data(), m, n).noalias() = CMap(a.data().data(), m, k) * CMap(b.data().data(), k, n);
  return detail::make_result<T>(Shape{a.dim(0), b.dim(1)}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    CMap g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      Map(pa.grad_buffer().data(), m, k).noalias() += g * CMap(pb.value.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      Map(pb.grad_buffer().data(), k, n).noalias() += CMap(pa.value.data(), m, k).transpose() * g;
    }
  });
}

/// Per-sample depthwise 2-D cross-correlation with zero padding, stride 1.
/// input [B, C, H, W], kernels [B, C, KH, KW] with odd KH, KW -> [B, C, H, W].
template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& kernels) {
  if (input.rank() != 4 || kernels.rank() != 4 || input.dim(0) != kernels.dim(0) ||
      input.dim(1) != kernels.dim(1) || kernels.dim(2) % 2 == 0 || kernels.dim(3) % 2 == 0) {
    throw ShapeError("depthwise_conv2d shape mismatch: " + shape_str(input.shape()) + " with kernels " +
                     shape_str(kernels.shape()));
  }
  const std::size_t planes = input.dim(0) * input.dim(1);
  const long h = static_cast<long>(input.dim(2)), w = static_cast<long>(input.dim(3));
  const long kh = static_cast<long>(kernels.dim(2)), kw = static_cast<long>(kernels.dim(3));
  const long ch = kh / 2, cw = kw / 2;
  // visit(plane, out index, in index, kernel index)
  auto for_each_tap = [=](auto&& visit) {
    for (std::size_t p = 0; p < planes; ++p)
      for (long i = 0; i < h; ++i)
        for (long j = 0; j < w; ++j)
          for (long u = 0; u < kh; ++u) {
            long y = i + u - ch;
            if (y < 0 || y >= h) continue;
            for (long v = 0; v < kw; ++v) {
              long x = j + v - cw;
              if (x < 0 || x >= w) continue;
              visit(p * h * w + i * w + j, p * h * w + y * w + x, p * kh * kw + u * kw + v);
            }
          }
  };
  std::vector<T> out(input.numel(), T(0));
  auto in = input.data();
  auto ker = kernels.data();
  for_each_tap([&](std::size_t o, std::size_t s, std::size_t k) { out[o] += in[s] * ker[k]; });
  return detail::make_result<T>(input.shape(), std::move(out), {input, kernels}, [for_each_tap](detail::Node<T>& self) {
    auto& pi = *self.parents[0];
    auto& pk = *self.parents[1];
    if (pi.requires_grad) {
      auto& gi = pi.grad_buffer();
      for_each_tap([&](std::size_t o, std::size_t s, std::size_t k) { gi[s] += self.grad[o] * pk.value[k]; });
    }
    if (pk.requires_grad) {
      auto& gk = pk.grad_buffer();
      for_each_tap([&](std::size_t o, std::size_t s, std::size_t k) { gk[k] += self.grad[o] * pi.value[s]; });
    }
  });
}

/// True when every element is finite.
template <class T>
bool all_finite(const Tensor<T>& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace dair
