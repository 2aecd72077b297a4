#ifndef MIBCI_TENSOR_HPP
#define MIBCI_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mibci/common.hpp"

// Dense n-d tensors with reverse-mode automatic differentiation.
// Graphs are built dynamically: every op returns a fresh tensor whose node
// remembers its parents and how to push gradients back to them. Graphs are
// single-owner and single-threaded during construction and backward;
// read-only tensors may be shared across threads.

namespace mibci {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (const int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized lazily during backward / for leaves
  bool requires_grad = false;
  bool backward_ran = false;  // set on the node backward() was invoked on
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backprop;  // pushes this->grad to parents
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<T>>();
    const int64_t count = shape_numel(shape);
    if (count < 0) throw DimensionError("tensor: negative extent in shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(count), T(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), fill);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not match payload of " +
                           std::to_string(data.size()) + " values");
    }
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(size_t i) const { return node_->shape.at(i); }
  size_t rank() const { return node_->shape.size(); }
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }

  const std::vector<T>& value() const { return node_->value; }
  // In-place access for leaf parameters (optimizer updates, init).
  std::vector<T>& mutable_value() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (node_->grad.empty()) throw ContractError("tensor: gradient not computed");
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
  void drop_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) throw ContractError("tensor: item() on non-scalar of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool all_finite() const {
    for (const T v : node_->value) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}
  template <typename U>
  friend Tensor<U> wrap_node(std::shared_ptr<TensorNode<U>> n);

  std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
Tensor<T> wrap_node(std::shared_ptr<TensorNode<T>> n) {
  return Tensor<T>(std::move(n));
}

namespace detail {

template <typename T>
void ensure_grad(TensorNode<T>& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
}

template <typename T>
std::shared_ptr<TensorNode<T>> new_node(Shape shape) {
  auto n = std::make_shared<TensorNode<T>>();
  const int64_t count = shape_numel(shape);
  n->shape = std::move(shape);
  n->value.assign(static_cast<size_t>(count), T(0));
  return n;
}

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> ts) {
  for (const auto* t : ts) {
    if (t->requires_grad()) return true;
  }
  return false;
}

}  // namespace detail

// ----------------------------- backward -----------------------------

// Reverse accumulation from a scalar loss. Calling backward twice on the same
// loss node is a contract error; gradients of shared subgraphs would silently
// double-accumulate otherwise.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  auto root = loss.node();
  if (root->backward_ran) {
    throw ContractError("backward: already ran on this loss; rebuild the graph before calling again");
  }
  root->backward_ran = true;
  if (!root->requires_grad) return;  // nothing reachable wants gradients

  // post-order DFS: parents precede children in `order`
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, size_t>> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  detail::ensure_grad(*root);
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

// ----------------------------- elementwise -----------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto n = detail::new_node<T>(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] + bv[i];
  if (detail::any_requires_grad<T>({&a, &b})) {
    n->requires_grad = true;
    n->parents = {a.node(), b.node()};
    n->backprop = [](TensorNode<T>& self) {
      for (size_t p = 0; p < 2; ++p) {
        auto& par = *self.parents[p];
        if (!par.requires_grad) continue;
        detail::ensure_grad(par);
        for (size_t i = 0; i < self.grad.size(); ++i) par.grad[i] += self.grad[i];
      }
    };
  }
  return wrap_node(std::move(n));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto n = detail::new_node<T>(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] - bv[i];
  if (detail::any_requires_grad<T>({&a, &b})) {
    n->requires_grad = true;
    n->parents = {a.node(), b.node()};
    n->backprop = [](TensorNode<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) {
        detail::ensure_grad(pa);
        for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        detail::ensure_grad(pb);
        for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
      }
    };
  }
  return wrap_node(std::move(n));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto n = detail::new_node<T>(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] * bv[i];
  if (detail::any_requires_grad<T>({&a, &b})) {
    n->requires_grad = true;
    n->parents = {a.node(), b.node()};
    n->backprop = [](TensorNode<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) {
        detail::ensure_grad(pa);
        for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
      }
      if (pb.requires_grad) {
        detail::ensure_grad(pb);
        for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
      }
    };
  }
  return wrap_node(std::move(n));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto n = detail::new_node<T>(a.shape());
  const auto& av = a.value();
  for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] * s;
  if (a.requires_grad()) {
    n->requires_grad = true;
    n->parents = {a.node()};
    n->backprop = [s](TensorNode<T>& self) {
      auto& pa = *self.parents[0];
      detail::ensure_grad(pa);
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * s;
    };
  }
  return wrap_node(std::move(n));
}

// ----------------------------- matmul / bias -----------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul: expected 2-d operands");
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n_out = b.dim(1);
  if (k != k2) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  auto n = detail::new_node<T>({m, n_out});
  const T* av = a.value().data();
  const T* bv = b.value().data();
  T* out = n->value.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const T x = av[i * k + p];
      if (x == T(0)) continue;
      const T* brow = bv + p * n_out;
      T* orow = out + i * n_out;
      for (int64_t j = 0; j < n_out; ++j) orow[j] += x * brow[j];
    }
  }
  if (detail::any_requires_grad<T>({&a, &b})) {
    n->requires_grad = true;
    n->parents = {a.node(), b.node()};
    n->backprop = [m, k, n_out](TensorNode<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const T* g = self.grad.data();
      if (pa.requires_grad) {
        detail::ensure_grad(pa);
        // dA = G * B^T
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t p = 0; p < k; ++p) {
            T acc = 0;
            const T* grow = g + i * n_out;
            const T* brow = pb.value.data() + p * n_out;
            for (int64_t j = 0; j < n_out; ++j) acc += grow[j] * brow[j];
            pa.grad[i * k + p] += acc;
          }
        }
      }
      if (pb.requires_grad) {
        detail::ensure_grad(pb);
        // dB = A^T * G
        for (int64_t i = 0; i < m; ++i) {
          const T* arow = pa.value.data() + i * k;
          const T* grow = g + i * n_out;
          for (int64_t p = 0; p < k; ++p) {
            const T x = arow[p];
            if (x == T(0)) continue;
            T* brow = pb.grad.data() + p * n_out;
            for (int64_t j = 0; j < n_out; ++j) brow[j] += x * grow[j];
          }
        }
      }
    };
  }
  return wrap_node(std::move(n));
}

// x[M,N] + row vector b[N]
template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0)) {
    throw DimensionError("add_row_bias: need [M,N] + [N], got " + shape_str(x.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const int64_t m = x.dim(0), w = x.dim(1);
  auto n = detail::new_node<T>(x.shape());
  const T* xv = x.value().data();
  const T* bv = b.value().data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < w; ++j) n->value[i * w + j] = xv[i * w + j] + bv[j];
  }
  if (detail::any_requires_grad<T>({&x, &b})) {
    n->requires_grad = true;
    n->parents = {x.node(), b.node()};
    n->backprop = [m, w](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      auto& pb = *self.parents[1];
      if (px.requires_grad) {
        detail::ensure_grad(px);
        for (size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        detail::ensure_grad(pb);
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t j = 0; j < w; ++j) pb.grad[j] += self.grad[i * w + j];
        }
      }
    };
  }
  return wrap_node(std::move(n));
}

// x[N,C,H,W] + per-channel bias b[C]
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 4 || b.rank() != 1 || x.dim(1) != b.dim(0)) {
    throw DimensionError("add_channel_bias: need [N,C,H,W] + [C], got " + shape_str(x.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const int64_t nn = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  auto n = detail::new_node<T>(x.shape());
  const T* xv = x.value().data();
  const T* bv = b.value().data();
  for (int64_t i = 0; i < nn; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const T bias = bv[ch];
      const int64_t base = (i * c + ch) * plane;
      for (int64_t p = 0; p < plane; ++p) n->value[base + p] = xv[base + p] + bias;
    }
  }
  if (detail::any_requires_grad<T>({&x, &b})) {
    n->requires_grad = true;
    n->parents = {x.node(), b.node()};
    n->backprop = [nn, c, plane](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      auto& pb = *self.parents[1];
      if (px.requires_grad) {
        detail::ensure_grad(px);
        for (size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        detail::ensure_grad(pb);
        for (int64_t i = 0; i < nn; ++i) {
          for (int64_t ch = 0; ch < c; ++ch) {
            const int64_t base = (i * c + ch) * plane;
            T acc = 0;
            for (int64_t p = 0; p < plane; ++p) acc += self.grad[base + p];
            pb.grad[ch] += acc;
          }
        }
      }
    };
  }
  return wrap_node(std::move(n));
}

// ----------------------------- convolution -----------------------------

namespace detail {

struct ConvGeom {
  int64_t n, ci, h, w, co, kh, kw, ho, wo;
  int sh, sw, ph, pw;
};

// accumulate a shifted, strided row: dst[ow] (+)= s * src[ow*sw] over [lo, hi]
template <typename T>
inline void axpy_row(T* dst, const T* src, T s, int64_t lo, int64_t hi, int sw) {
  if (sw == 1) {
    for (int64_t ow = lo; ow <= hi; ++ow) dst[ow] += s * src[ow];
  } else {
    for (int64_t ow = lo; ow <= hi; ++ow) dst[ow] += s * src[ow * sw];
  }
}

template <typename T>
inline T dot_row(const T* a, const T* b, int64_t lo, int64_t hi, int sw) {
  T acc = 0;
  if (sw == 1) {
    for (int64_t ow = lo; ow <= hi; ++ow) acc += a[ow] * b[ow];
  } else {
    for (int64_t ow = lo; ow <= hi; ++ow) acc += a[ow * sw] * b[ow];
  }
  return acc;
}

// valid output-column range for kernel column c: 0 <= ow*sw - pw + c < w
inline std::pair<int64_t, int64_t> ow_range(int64_t c, const ConvGeom& g) {
  int64_t lo = 0;
  if (g.pw > c) lo = (g.pw - c + g.sw - 1) / g.sw;
  int64_t hi = g.w - 1 + g.pw - c;
  if (hi < 0) return {1, 0};
  hi /= g.sw;
  if (hi > g.wo - 1) hi = g.wo - 1;
  return {lo, hi};
}

}  // namespace detail

// Cross-correlation (no kernel flip). Explicit symmetric padding; output
// extents are floor((in + 2*pad - kernel)/stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::pair<int, int> stride = {1, 1},
                 std::pair<int, int> padding = {0, 0}) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw DimensionError("conv2d: expected 4-d input and kernel, got " + shape_str(input.shape()) + " and " +
                         shape_str(kernel.shape()));
  }
  if (input.dim(1) != kernel.dim(1)) {
    throw DimensionError("conv2d: input channels " + std::to_string(input.dim(1)) +
                         " != kernel channels " + std::to_string(kernel.dim(1)));
  }
  detail::ConvGeom g;
  g.n = input.dim(0);
  g.ci = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.co = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.sh = stride.first;
  g.sw = stride.second;
  g.ph = padding.first;
  g.pw = padding.second;
  if (g.sh < 1 || g.sw < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (g.ph < 0 || g.pw < 0) throw DimensionError("conv2d: padding must be >= 0");
  if (g.kh > g.h + 2 * g.ph || g.kw > g.w + 2 * g.pw) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " exceeds padded input " +
                         shape_str(input.shape()));
  }
  g.ho = (g.h + 2 * g.ph - g.kh) / g.sh + 1;
  g.wo = (g.w + 2 * g.pw - g.kw) / g.sw + 1;

  auto node = detail::new_node<T>({g.n, g.co, g.ho, g.wo});
  const T* x = input.value().data();
  const T* k = kernel.value().data();
  T* y = node->value.data();
  for (int64_t n = 0; n < g.n; ++n) {
    for (int64_t co = 0; co < g.co; ++co) {
      T* yplane = y + (n * g.co + co) * g.ho * g.wo;
      for (int64_t ci = 0; ci < g.ci; ++ci) {
        const T* xplane = x + (n * g.ci + ci) * g.h * g.w;
        const T* kplane = k + (co * g.ci + ci) * g.kh * g.kw;
        for (int64_t r = 0; r < g.kh; ++r) {
          for (int64_t c = 0; c < g.kw; ++c) {
            const T wv = kplane[r * g.kw + c];
            if (wv == T(0)) continue;
            const auto [lo, hi] = detail::ow_range(c, g);
            if (lo > hi) continue;
            for (int64_t oh = 0; oh < g.ho; ++oh) {
              const int64_t ih = oh * g.sh - g.ph + r;
              if (ih < 0 || ih >= g.h) continue;
              detail::axpy_row(yplane + oh * g.wo, xplane + ih * g.w - g.pw + c, wv, lo, hi, g.sw);
            }
          }
        }
      }
    }
  }

  if (detail::any_requires_grad<T>({&input, &kernel})) {
    node->requires_grad = true;
    node->parents = {input.node(), kernel.node()};
    node->backprop = [g](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      auto& pk = *self.parents[1];
      const T* gy = self.grad.data();
      if (px.requires_grad) {
        detail::ensure_grad(px);
        for (int64_t n = 0; n < g.n; ++n) {
          for (int64_t co = 0; co < g.co; ++co) {
            const T* gplane = gy + (n * g.co + co) * g.ho * g.wo;
            for (int64_t ci = 0; ci < g.ci; ++ci) {
              T* gxplane = px.grad.data() + (n * g.ci + ci) * g.h * g.w;
              const T* kplane = pk.value.data() + (co * g.ci + ci) * g.kh * g.kw;
              for (int64_t r = 0; r < g.kh; ++r) {
                for (int64_t c = 0; c < g.kw; ++c) {
                  const T wv = kplane[r * g.kw + c];
                  if (wv == T(0)) continue;
                  const auto [lo, hi] = detail::ow_range(c, g);
                  if (lo > hi) continue;
                  for (int64_t oh = 0; oh < g.ho; ++oh) {
                    const int64_t ih = oh * g.sh - g.ph + r;
                    if (ih < 0 || ih >= g.h) continue;
                    // gx[ih, iw] += wv * gy[oh, ow]
                    T* gxrow = gxplane + ih * g.w - g.pw + c;
                    const T* gyrow = gplane + oh * g.wo;
                    if (g.sw == 1) {
                      for (int64_t ow = lo; ow <= hi; ++ow) gxrow[ow] += wv * gyrow[ow];
                    } else {
                      for (int64_t ow = lo; ow <= hi; ++ow) gxrow[ow * g.sw] += wv * gyrow[ow];
                    }
                  }
                }
              }
            }
          }
        }
      }
      if (pk.requires_grad) {
        detail::ensure_grad(pk);
        for (int64_t co = 0; co < g.co; ++co) {
          for (int64_t ci = 0; ci < g.ci; ++ci) {
            T* gkplane = pk.grad.data() + (co * g.ci + ci) * g.kh * g.kw;
            for (int64_t r = 0; r < g.kh; ++r) {
              for (int64_t c = 0; c < g.kw; ++c) {
                const auto [lo, hi] = detail::ow_range(c, g);
                if (lo > hi) continue;
                T acc = 0;
                for (int64_t n = 0; n < g.n; ++n) {
                  const T* xplane = px.value.data() + (n * g.ci + ci) * g.h * g.w;
                  const T* gplane = self.grad.data() + (n * g.co + co) * g.ho * g.wo;
                  for (int64_t oh = 0; oh < g.ho; ++oh) {
                    const int64_t ih = oh * g.sh - g.ph + r;
                    if (ih < 0 || ih >= g.h) continue;
                    acc += detail::dot_row(xplane + ih * g.w - g.pw + c, gplane + oh * g.wo, lo, hi, g.sw);
                  }
                }
                gkplane[r * g.kw + c] += acc;
              }
            }
          }
        }
      }
    };
  }
  return wrap_node(std::move(node));
}

// Depthwise convolution, stride 1, no padding (pad explicitly beforehand).
// kernel is [C*D, 1, kh, kw]; output channel c*D + d convolves input channel c
// with kernel slice c*D + d.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& kernel, int depth_multiplier) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw DimensionError("depthwise_conv2d: expected 4-d input and kernel");
  }
  const int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t kc = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (depth_multiplier < 1) throw DimensionError("depthwise_conv2d: depth_multiplier must be >= 1");
  if (kernel.dim(1) != 1) throw DimensionError("depthwise_conv2d: kernel must have single input channel");
  if (kc % c != 0 || kc != c * depth_multiplier) {
    throw DimensionError("depthwise_conv2d: kernel count " + std::to_string(kc) +
                         " does not equal channels*depth " + std::to_string(c * depth_multiplier));
  }
  if (kh > h || kw > w) {
    throw DimensionError("depthwise_conv2d: kernel " + shape_str(kernel.shape()) + " exceeds input " +
                         shape_str(input.shape()));
  }
  const int64_t ho = h - kh + 1, wo = w - kw + 1;
  auto node = detail::new_node<T>({n, kc, ho, wo});
  const T* x = input.value().data();
  const T* k = kernel.value().data();
  T* y = node->value.data();
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t oc = 0; oc < kc; ++oc) {
      const int64_t ic = oc / depth_multiplier;
      const T* xplane = x + (b * c + ic) * h * w;
      const T* kplane = k + oc * kh * kw;
      T* yplane = y + (b * kc + oc) * ho * wo;
      for (int64_t r = 0; r < kh; ++r) {
        for (int64_t cc = 0; cc < kw; ++cc) {
          const T wv = kplane[r * kw + cc];
          if (wv == T(0)) continue;
          for (int64_t oh = 0; oh < ho; ++oh) {
            const T* xrow = xplane + (oh + r) * w + cc;
            T* yrow = yplane + oh * wo;
            for (int64_t ow = 0; ow < wo; ++ow) yrow[ow] += wv * xrow[ow];
          }
        }
      }
    }
  }
  if (detail::any_requires_grad<T>({&input, &kernel})) {
    node->requires_grad = true;
    node->parents = {input.node(), kernel.node()};
    const int dm = depth_multiplier;
    node->backprop = [n, c, h, w, kc, kh, kw, ho, wo, dm](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      auto& pk = *self.parents[1];
      if (px.requires_grad) {
        detail::ensure_grad(px);
        for (int64_t b = 0; b < n; ++b) {
          for (int64_t oc = 0; oc < kc; ++oc) {
            const int64_t ic = oc / dm;
            T* gxplane = px.grad.data() + (b * c + ic) * h * w;
            const T* kplane = pk.value.data() + oc * kh * kw;
            const T* gyplane = self.grad.data() + (b * kc + oc) * ho * wo;
            for (int64_t r = 0; r < kh; ++r) {
              for (int64_t cc = 0; cc < kw; ++cc) {
                const T wv = kplane[r * kw + cc];
                if (wv == T(0)) continue;
                for (int64_t oh = 0; oh < ho; ++oh) {
                  T* gxrow = gxplane + (oh + r) * w + cc;
                  const T* gyrow = gyplane + oh * wo;
                  for (int64_t ow = 0; ow < wo; ++ow) gxrow[ow] += wv * gyrow[ow];
                }
              }
            }
          }
        }
      }
      if (pk.requires_grad) {
        detail::ensure_grad(pk);
        for (int64_t oc = 0; oc < kc; ++oc) {
          const int64_t ic = oc / dm;
          T* gkplane = pk.grad.data() + oc * kh * kw;
          for (int64_t r = 0; r < kh; ++r) {
            for (int64_t cc = 0; cc < kw; ++cc) {
              T acc = 0;
              for (int64_t b = 0; b < n; ++b) {
                const T* xplane = px.value.data() + (b * c + ic) * h * w;
                const T* gyplane = self.grad.data() + (b * kc + oc) * ho * wo;
                for (int64_t oh = 0; oh < ho; ++oh) {
                  const T* xrow = xplane + (oh + r) * w + cc;
                  const T* gyrow = gyplane + oh * wo;
                  for (int64_t ow = 0; ow < wo; ++ow) acc += xrow[ow] * gyrow[ow];
                }
              }
              gkplane[r * kw + cc] += acc;
            }
          }
        }
      }
    };
  }
  return wrap_node(std::move(node));
}

// ----------------------------- pooling -----------------------------

enum class PoolKind { max, average };

// Valid pooling; max pool routes gradient to the first (lowest flat index)
// maximum of each window.
template <typename T>
Tensor<T> pool2d(const Tensor<T>& input, PoolKind kind, std::pair<int, int> window,
                 std::pair<int, int> stride) {
  if (input.rank() != 4) throw DimensionError("pool2d: expected 4-d input");
  const int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t wh = window.first, ww = window.second;
  const int64_t sh = stride.first, sw = stride.second;
  if (sh < 1 || sw < 1) throw DimensionError("pool2d: stride must be >= 1");
  if (wh < 1 || ww < 1) throw DimensionError("pool2d: window must be >= 1");
  if (wh > h || ww > w) {
    throw DimensionError("pool2d: window (" + std::to_string(wh) + "," + std::to_string(ww) +
                         ") larger than input " + shape_str(input.shape()));
  }
  const int64_t ho = (h - wh) / sh + 1, wo = (w - ww) / sw + 1;
  auto node = detail::new_node<T>({n, c, ho, wo});
  const T* x = input.value().data();
  T* y = node->value.data();
  std::vector<int64_t> argmax;
  if (kind == PoolKind::max) argmax.resize(static_cast<size_t>(n * c * ho * wo));
  const T inv_area = T(1) / static_cast<T>(wh * ww);
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* xplane = x + (b * c + ch) * h * w;
      const int64_t obase = (b * c + ch) * ho * wo;
      for (int64_t oh = 0; oh < ho; ++oh) {
        for (int64_t ow = 0; ow < wo; ++ow) {
          const int64_t h0 = oh * sh, w0 = ow * sw;
          if (kind == PoolKind::max) {
            T best = xplane[h0 * w + w0];
            int64_t best_idx = h0 * w + w0;
            for (int64_t r = 0; r < wh; ++r) {
              for (int64_t cc = 0; cc < ww; ++cc) {
                const int64_t idx = (h0 + r) * w + (w0 + cc);
                if (xplane[idx] > best) {
                  best = xplane[idx];
                  best_idx = idx;
                }
              }
            }
            y[obase + oh * wo + ow] = best;
            argmax[static_cast<size_t>(obase + oh * wo + ow)] = best_idx;
          } else {
            T acc = 0;
            for (int64_t r = 0; r < wh; ++r) {
              for (int64_t cc = 0; cc < ww; ++cc) acc += xplane[(h0 + r) * w + (w0 + cc)];
            }
            y[obase + oh * wo + ow] = acc * inv_area;
          }
        }
      }
    }
  }
  if (input.requires_grad()) {
    node->requires_grad = true;
    node->parents = {input.node()};
    if (kind == PoolKind::max) {
      node->backprop = [n, c, h, w, ho, wo, am = std::move(argmax)](TensorNode<T>& self) {
        auto& px = *self.parents[0];
        detail::ensure_grad(px);
        for (int64_t b = 0; b < n; ++b) {
          for (int64_t ch = 0; ch < c; ++ch) {
            T* gxplane = px.grad.data() + (b * c + ch) * h * w;
            const int64_t obase = (b * c + ch) * ho * wo;
            for (int64_t o = 0; o < ho * wo; ++o) {
              gxplane[am[static_cast<size_t>(obase + o)]] += self.grad[obase + o];
            }
          }
        }
      };
    } else {
      node->backprop = [n, c, h, w, ho, wo, wh, ww, sh, sw, inv_area](TensorNode<T>& self) {
        auto& px = *self.parents[0];
        detail::ensure_grad(px);
        for (int64_t b = 0; b < n; ++b) {
          for (int64_t ch = 0; ch < c; ++ch) {
            T* gxplane = px.grad.data() + (b * c + ch) * h * w;
            const int64_t obase = (b * c + ch) * ho * wo;
            for (int64_t oh = 0; oh < ho; ++oh) {
              for (int64_t ow = 0; ow < wo; ++ow) {
                const T g = self.grad[obase + oh * wo + ow] * inv_area;
                for (int64_t r = 0; r < wh; ++r) {
                  for (int64_t cc = 0; cc < ww; ++cc) {
                    gxplane[(oh * sh + r) * w + (ow * sw + cc)] += g;
                  }
                }
              }
            }
          }
        }
      };
    }
  }
  return wrap_node(std::move(node));
}

// ----------------------------- padding / upsampling -----------------------------

struct Pad2d {
  int top = 0, bottom = 0, left = 0, right = 0;
};

// Zero padding with independent per-side amounts (used to build "same"
// convolutions for even kernels).
template <typename T>
Tensor<T> pad2d(const Tensor<T>& input, const Pad2d& p) {
  if (input.rank() != 4) throw DimensionError("pad2d: expected 4-d input");
  if (p.top < 0 || p.bottom < 0 || p.left < 0 || p.right < 0) {
    throw DimensionError("pad2d: negative padding");
  }
  const int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t ho = h + p.top + p.bottom, wo = w + p.left + p.right;
  auto node = detail::new_node<T>({n, c, ho, wo});
  const T* x = input.value().data();
  for (int64_t pl = 0; pl < n * c; ++pl) {
    const T* xplane = x + pl * h * w;
    T* yplane = node->value.data() + pl * ho * wo;
    for (int64_t r = 0; r < h; ++r) {
      T* dst = yplane + (r + p.top) * wo + p.left;
      const T* src = xplane + r * w;
      std::copy(src, src + w, dst);
    }
  }
  if (input.requires_grad()) {
    node->requires_grad = true;
    node->parents = {input.node()};
    node->backprop = [n, c, h, w, ho, wo, p](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      detail::ensure_grad(px);
      for (int64_t pl = 0; pl < n * c; ++pl) {
        T* gx = px.grad.data() + pl * h * w;
        const T* gy = self.grad.data() + pl * ho * wo;
        for (int64_t r = 0; r < h; ++r) {
          const T* src = gy + (r + p.top) * wo + p.left;
          T* dst = gx + r * w;
          for (int64_t cc = 0; cc < w; ++cc) dst[cc] += src[cc];
        }
      }
    };
  }
  return wrap_node(std::move(node));
}

// Nearest-neighbour upsampling by integer factors (MIN2Net decoder stages).
template <typename T>
Tensor<T> upsample2d(const Tensor<T>& input, std::pair<int, int> factor) {
  if (input.rank() != 4) throw DimensionError("upsample2d: expected 4-d input");
  const int64_t fh = factor.first, fw = factor.second;
  if (fh < 1 || fw < 1) throw DimensionError("upsample2d: factors must be >= 1");
  const int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t ho = h * fh, wo = w * fw;
  auto node = detail::new_node<T>({n, c, ho, wo});
  const T* x = input.value().data();
  for (int64_t pl = 0; pl < n * c; ++pl) {
    const T* xplane = x + pl * h * w;
    T* yplane = node->value.data() + pl * ho * wo;
    for (int64_t r = 0; r < ho; ++r) {
      const T* src = xplane + (r / fh) * w;
      T* dst = yplane + r * wo;
      for (int64_t cc = 0; cc < wo; ++cc) dst[cc] = src[cc / fw];
    }
  }
  if (input.requires_grad()) {
    node->requires_grad = true;
    node->parents = {input.node()};
    node->backprop = [n, c, h, w, fh, fw, ho, wo](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      detail::ensure_grad(px);
      for (int64_t pl = 0; pl < n * c; ++pl) {
        T* gx = px.grad.data() + pl * h * w;
        const T* gy = self.grad.data() + pl * ho * wo;
        for (int64_t r = 0; r < ho; ++r) {
          T* dst = gx + (r / fh) * w;
          const T* src = gy + r * wo;
          for (int64_t cc = 0; cc < wo; ++cc) dst[cc / fw] += src[cc];
        }
      }
    };
  }
  return wrap_node(std::move(node));
}

// ----------------------------- batch norm -----------------------------

enum class BatchNormMode { train, infer };

// Per-channel batch normalization over [N,C,H,W] (channel axis 1). In train
// mode the batch statistics are used and running stats are updated as
// running = momentum*running + (1-momentum)*batch (biased batch variance).
// Running stats are plain buffers outside the autodiff graph.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::vector<T>& running_mean, std::vector<T>& running_var, BatchNormMode mode,
                     double momentum, double epsilon) {
  if (input.rank() != 4) throw DimensionError("batch_norm: expected 4-d input");
  const int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (n < 1) throw DimensionError("batch_norm: zero batch size");
  if (gamma.size() != c || beta.size() != c) {
    throw DimensionError("batch_norm: gamma/beta length must equal channel count " + std::to_string(c));
  }
  if (static_cast<int64_t>(running_mean.size()) != c || static_cast<int64_t>(running_var.size()) != c) {
    throw DimensionError("batch_norm: running stats length must equal channel count");
  }
  const int64_t plane = h * w;
  const int64_t m = n * plane;  // samples per channel
  auto node = detail::new_node<T>(input.shape());
  const T* x = input.value().data();
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();

  std::vector<T> mean(static_cast<size_t>(c)), var(static_cast<size_t>(c));
  if (mode == BatchNormMode::train) {
    for (int64_t ch = 0; ch < c; ++ch) {
      double acc = 0;
      for (int64_t b = 0; b < n; ++b) {
        const T* row = x + (b * c + ch) * plane;
        for (int64_t p = 0; p < plane; ++p) acc += static_cast<double>(row[p]);
      }
      const double mu = acc / static_cast<double>(m);
      double vacc = 0;
      for (int64_t b = 0; b < n; ++b) {
        const T* row = x + (b * c + ch) * plane;
        for (int64_t p = 0; p < plane; ++p) {
          const double d = static_cast<double>(row[p]) - mu;
          vacc += d * d;
        }
      }
      mean[static_cast<size_t>(ch)] = static_cast<T>(mu);
      var[static_cast<size_t>(ch)] = static_cast<T>(vacc / static_cast<double>(m));
    }
    for (int64_t ch = 0; ch < c; ++ch) {
      running_mean[static_cast<size_t>(ch)] = static_cast<T>(
          momentum * static_cast<double>(running_mean[static_cast<size_t>(ch)]) +
          (1.0 - momentum) * static_cast<double>(mean[static_cast<size_t>(ch)]));
      running_var[static_cast<size_t>(ch)] = static_cast<T>(
          momentum * static_cast<double>(running_var[static_cast<size_t>(ch)]) +
          (1.0 - momentum) * static_cast<double>(var[static_cast<size_t>(ch)]));
    }
  } else {
    for (int64_t ch = 0; ch < c; ++ch) {
      mean[static_cast<size_t>(ch)] = running_mean[static_cast<size_t>(ch)];
      var[static_cast<size_t>(ch)] = running_var[static_cast<size_t>(ch)];
    }
  }

  std::vector<T> xhat(input.value().size());
  std::vector<T> inv_std(static_cast<size_t>(c));
  for (int64_t ch = 0; ch < c; ++ch) {
    inv_std[static_cast<size_t>(ch)] =
        static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[static_cast<size_t>(ch)]) + epsilon));
  }
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const int64_t base = (b * c + ch) * plane;
      const T mu = mean[static_cast<size_t>(ch)];
      const T is = inv_std[static_cast<size_t>(ch)];
      const T ga = gv[ch];
      const T be = bv[ch];
      for (int64_t p = 0; p < plane; ++p) {
        const T xh = (x[base + p] - mu) * is;
        xhat[static_cast<size_t>(base + p)] = xh;
        node->value[static_cast<size_t>(base + p)] = ga * xh + be;
      }
    }
  }

  if (detail::any_requires_grad<T>({&input, &gamma, &beta})) {
    node->requires_grad = true;
    node->parents = {input.node(), gamma.node(), beta.node()};
    const bool train = mode == BatchNormMode::train;
    node->backprop = [n, c, plane, m, train, xh = std::move(xhat), istd = std::move(inv_std)](
                         TensorNode<T>& self) {
      auto& px = *self.parents[0];
      auto& pg = *self.parents[1];
      auto& pb = *self.parents[2];
      const T* g = self.grad.data();
      if (pg.requires_grad) detail::ensure_grad(pg);
      if (pb.requires_grad) detail::ensure_grad(pb);
      if (px.requires_grad) detail::ensure_grad(px);
      for (int64_t ch = 0; ch < c; ++ch) {
        double sum_g = 0, sum_gx = 0;
        for (int64_t b = 0; b < n; ++b) {
          const int64_t base = (b * c + ch) * plane;
          for (int64_t p = 0; p < plane; ++p) {
            sum_g += static_cast<double>(g[base + p]);
            sum_gx += static_cast<double>(g[base + p]) * static_cast<double>(xh[static_cast<size_t>(base + p)]);
          }
        }
        if (pg.requires_grad) pg.grad[ch] += static_cast<T>(sum_gx);
        if (pb.requires_grad) pb.grad[ch] += static_cast<T>(sum_g);
        if (px.requires_grad) {
          const double ga = static_cast<double>(pg.value[ch]);
          const double is = static_cast<double>(istd[static_cast<size_t>(ch)]);
          if (train) {
            // dX = gamma*istd/m * (m*g - sum_g - xhat*sum_gx)
            const double k = ga * is / static_cast<double>(m);
            for (int64_t b = 0; b < n; ++b) {
              const int64_t base = (b * c + ch) * plane;
              for (int64_t p = 0; p < plane; ++p) {
                const double gp = static_cast<double>(g[base + p]);
                const double xhp = static_cast<double>(xh[static_cast<size_t>(base + p)]);
                px.grad[base + p] += static_cast<T>(k * (static_cast<double>(m) * gp - sum_g - xhp * sum_gx));
              }
            }
          } else {
            const double k = ga * is;  // stats are constants
            for (int64_t b = 0; b < n; ++b) {
              const int64_t base = (b * c + ch) * plane;
              for (int64_t p = 0; p < plane; ++p) {
                px.grad[base + p] += static_cast<T>(k * static_cast<double>(g[base + p]));
              }
            }
          }
        }
      }
    };
  }
  return wrap_node(std::move(node));
}

// ----------------------------- activations -----------------------------

enum class Activation { elu, relu, linear };

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Activation kind) {
  auto node = detail::new_node<T>(input.shape());
  const auto& xv = input.value();
  switch (kind) {
    case Activation::elu:
      for (size_t i = 0; i < xv.size(); ++i) {
        node->value[i] = xv[i] >= T(0) ? xv[i] : static_cast<T>(std::expm1(static_cast<double>(xv[i])));
      }
      break;
    case Activation::relu:
      for (size_t i = 0; i < xv.size(); ++i) node->value[i] = xv[i] > T(0) ? xv[i] : T(0);
      break;
    case Activation::linear:
      node->value = xv;
      break;
  }
  if (input.requires_grad()) {
    node->requires_grad = true;
    node->parents = {input.node()};
    node->backprop = [kind](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      detail::ensure_grad(px);
      switch (kind) {
        case Activation::elu:
          for (size_t i = 0; i < self.grad.size(); ++i) {
            const T d = px.value[i] >= T(0) ? T(1) : self.value[i] + T(1);  // e^x = elu(x)+1 for x<0
            px.grad[i] += self.grad[i] * d;
          }
          break;
        case Activation::relu:
          for (size_t i = 0; i < self.grad.size(); ++i) {
            if (px.value[i] > T(0)) px.grad[i] += self.grad[i];
          }
          break;
        case Activation::linear:
          for (size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
          break;
      }
    };
  }
  return wrap_node(std::move(node));
}

// ----------------------------- softmax -----------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& input, int axis) {
  const int r = static_cast<int>(input.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("softmax: axis out of range");
  const auto& s = input.shape();
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= s[static_cast<size_t>(i)];
  const int64_t k = s[static_cast<size_t>(axis)];
  auto node = detail::new_node<T>(input.shape());
  const T* x = input.value().data();
  T* y = node->value.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * k * inner + in;
      T mx = x[base];
      for (int64_t j = 1; j < k; ++j) mx = std::max(mx, x[base + j * inner]);
      double denom = 0;
      for (int64_t j = 0; j < k; ++j) {
        const double e = std::exp(static_cast<double>(x[base + j * inner] - mx));
        y[base + j * inner] = static_cast<T>(e);
        denom += e;
      }
      const T inv = static_cast<T>(1.0 / denom);
      for (int64_t j = 0; j < k; ++j) y[base + j * inner] *= inv;
    }
  }
  if (input.requires_grad()) {
    node->requires_grad = true;
    node->parents = {input.node()};
    node->backprop = [outer, inner, k](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      detail::ensure_grad(px);
      const T* y = self.value.data();
      const T* g = self.grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * k * inner + in;
          double dot = 0;
          for (int64_t j = 0; j < k; ++j) {
            dot += static_cast<double>(g[base + j * inner]) * static_cast<double>(y[base + j * inner]);
          }
          for (int64_t j = 0; j < k; ++j) {
            const int64_t idx = base + j * inner;
            px.grad[idx] += static_cast<T>(static_cast<double>(y[idx]) *
                                           (static_cast<double>(g[idx]) - dot));
          }
        }
      }
    };
  }
  return wrap_node(std::move(node));
}

// ----------------------------- shape ops -----------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape new_shape) {
  if (shape_numel(new_shape) != input.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(input.shape()) + " as " + shape_str(new_shape));
  }
  auto node = detail::new_node<T>(std::move(new_shape));
  node->value = input.value();
  if (input.requires_grad()) {
    node->requires_grad = true;
    node->parents = {input.node()};
    node->backprop = [](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      detail::ensure_grad(px);
      for (size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
    };
  }
  return wrap_node(std::move(node));
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& input) {
  if (input.rank() < 1) throw DimensionError("flatten: scalar input");
  const int64_t n = input.dim(0);
  return reshape(input, {n, input.size() / n});
}

// ----------------------------- dropout -----------------------------

// Inverted dropout with an externally drawn 0/1 mask (differentiable part).
template <typename T>
Tensor<T> dropout_apply(const Tensor<T>& input, std::shared_ptr<const std::vector<T>> mask, double keep) {
  if (!mask || static_cast<int64_t>(mask->size()) != input.size()) {
    throw DimensionError("dropout_apply: mask size mismatch");
  }
  if (keep <= 0.0 || keep > 1.0) throw ConfigError("dropout_apply: keep probability out of (0,1]");
  auto node = detail::new_node<T>(input.shape());
  const T inv_keep = static_cast<T>(1.0 / keep);
  const auto& xv = input.value();
  for (size_t i = 0; i < xv.size(); ++i) node->value[i] = xv[i] * (*mask)[i] * inv_keep;
  if (input.requires_grad()) {
    node->requires_grad = true;
    node->parents = {input.node()};
    node->backprop = [mask, inv_keep](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      detail::ensure_grad(px);
      for (size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * (*mask)[i] * inv_keep;
    };
  }
  return wrap_node(std::move(node));
}

template <typename T>
Tensor<T> dropout_apply(const Tensor<T>& input, std::shared_ptr<std::vector<T>> mask, double keep) {
  return dropout_apply(input, std::shared_ptr<const std::vector<T>>(std::move(mask)), keep);
}

// Train-mode dropout: draws a fresh Bernoulli(1-rate) mask from rng.
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate out of [0,1)");
  if (rate == 0.0) return activation(input, Activation::linear);
  auto mask = std::make_shared<std::vector<T>>(input.value().size());
  for (auto& v : *mask) v = rng.uniform01() >= rate ? T(1) : T(0);
  return dropout_apply(input, mask, 1.0 - rate);
}

// ----------------------------- reductions / losses -----------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& input) {
  auto node = detail::new_node<T>({1});
  double acc = 0;
  for (const T v : input.value()) acc += static_cast<double>(v);
  node->value[0] = static_cast<T>(acc);
  if (input.requires_grad()) {
    node->requires_grad = true;
    node->parents = {input.node()};
    node->backprop = [](TensorNode<T>& self) {
      auto& px = *self.parents[0];
      detail::ensure_grad(px);
      const T g = self.grad[0];
      for (auto& gv : px.grad) gv += g;
    };
  }
  return wrap_node(std::move(node));
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& input) {
  if (input.size() == 0) throw DimensionError("mean_all: empty tensor");
  return scale(sum_all(input), static_cast<T>(1.0 / static_cast<double>(input.size())));
}

// mean squared error over all elements
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
  }
  auto node = detail::new_node<T>({1});
  const auto& pv = pred.value();
  const auto& tv = target.value();
  double acc = 0;
  for (size_t i = 0; i < pv.size(); ++i) {
    const double d = static_cast<double>(pv[i]) - static_cast<double>(tv[i]);
    acc += d * d;
  }
  node->value[0] = static_cast<T>(acc / static_cast<double>(pv.size()));
  if (detail::any_requires_grad<T>({&pred, &target})) {
    node->requires_grad = true;
    node->parents = {pred.node(), target.node()};
    node->backprop = [](TensorNode<T>& self) {
      auto& pp = *self.parents[0];
      auto& pt = *self.parents[1];
      const T g = self.grad[0];
      const T k = static_cast<T>(2.0 / static_cast<double>(pp.value.size()));
      if (pp.requires_grad) {
        detail::ensure_grad(pp);
        for (size_t i = 0; i < pp.value.size(); ++i) pp.grad[i] += g * k * (pp.value[i] - pt.value[i]);
      }
      if (pt.requires_grad) {
        detail::ensure_grad(pt);
        for (size_t i = 0; i < pt.value.size(); ++i) pt.grad[i] -= g * k * (pp.value[i] - pt.value[i]);
      }
    };
  }
  return wrap_node(std::move(node));
}

}  // namespace mibci

#endif  // MIBCI_TENSOR_HPP
