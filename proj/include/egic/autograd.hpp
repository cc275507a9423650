#pragma once

// Minimal reverse-mode automatic differentiation over NCHW tensors.
//
// A Var is a shared node holding a value, a lazily allocated gradient and the
// closure that propagates the gradient to its parents. Graphs are rebuilt on
// every forward pass and freed when the last Var referencing them goes away.

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "egic/tensor.hpp"

namespace egic::ag {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
  void zero_grad() { grad = Tensor<T>(); }
  const Shape& shape() const { return value.shape(); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

/// RAII guard disabling graph recording (inference and frozen-component passes).
class NoGrad {
 public:
  NoGrad() : prev_(grad_enabled_flag()) { grad_enabled_flag() = false; }
  ~NoGrad() { grad_enabled_flag() = prev_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool prev_;
};

template <class T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <class T>
Var<T> parameter(Tensor<T> value) {
  auto n = constant(std::move(value));
  n->requires_grad = true;
  return n;
}

namespace detail {

template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents,
                   std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (!grad_enabled_flag()) return n;
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

template <class T>
void accumulate(Node<T>& target, std::size_t i, T g) {
  target.ensure_grad()[i] += g;
}

}  // namespace detail

/// Runs reverse accumulation from a scalar root (seed gradient 1).
template <class T>
void backward(const Var<T>& root) {
  EGIC_REQUIRE(root->value.size() == 1, "backward() needs a scalar root");
  if (!root->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  EGIC_REQUIRE(a->shape() == b->shape(), "add shape mismatch " + a->shape().str() + " vs " + b->shape().str());
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return detail::make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    for (auto* p : {a.get(), b.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  EGIC_REQUIRE(a->shape() == b->shape(), "sub shape mismatch");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return detail::make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  EGIC_REQUIRE(a->shape() == b->shape(), "mul shape mismatch");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return detail::make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a->value;
  for (auto& v : out.vec()) v *= s;
  return detail::make_result<T>(std::move(out), {a}, [a, s](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

/// mask * a + (1 - mask) * b, with mask shaped Nx1xHxW and broadcast over channels.
template <class T>
Var<T> mix(const Var<T>& a, const Var<T>& b, const Tensor<T>& mask) {
  const Shape s = a->shape();
  EGIC_REQUIRE(s == b->shape(), "mix shape mismatch");
  EGIC_REQUIRE(mask.n() == s.n && mask.c() == 1 && mask.h() == s.h && mask.w() == s.w,
               "mix mask must be Nx1xHxW");
  Tensor<T> out(s);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
      const std::size_t mbase = static_cast<std::size_t>(n) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T m = mask[mbase + i];
        out[base + i] = m * a->value[base + i] + (T(1) - m) * b->value[base + i];
      }
    }
  return detail::make_result<T>(std::move(out), {a, b}, [a, b, mask, s, plane](Node<T>& self) {
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
        const std::size_t mbase = static_cast<std::size_t>(n) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T m = mask[mbase + i];
          if (a->requires_grad) a->ensure_grad()[base + i] += m * self.grad[base + i];
          if (b->requires_grad) b->ensure_grad()[base + i] += (T(1) - m) * self.grad[base + i];
        }
      }
  });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(0.2)) {
  Tensor<T> out = a->value;
  for (auto& v : out.vec()) v = v > T(0) ? v : slope * v;
  return detail::make_result<T>(std::move(out), {a}, [a, slope](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * (a->value[i] > T(0) ? T(1) : slope);
  });
}

template <class T>
Var<T> softplus(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.vec()) v = v > T(20) ? v : std::log1p(std::exp(v));
  return detail::make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / (T(1) + std::exp(-a->value[i]));
  });
}

/// Forward rounds half-to-even; backward passes the gradient through unchanged.
template <class T>
Var<T> round_ste(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.vec()) v = std::nearbyint(v);
  return detail::make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = T(0);
  for (auto v : a->value.vec()) s += v;
  return detail::make_result<T>(Tensor<T>::scalar(s), {a}, [a](Node<T>& self) {
    auto& g = a->ensure_grad();
    const T up = self.grad[0];
    for (auto& v : g.vec()) v += up;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a->value.size()));
}

/// Mean squared error over all elements.
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  EGIC_REQUIRE(a->shape() == b->shape(), "mse shape mismatch " + a->shape().str() + " vs " + b->shape().str());
  const std::size_t n = a->value.size();
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a->value[i] - b->value[i];
    s += d * d;
  }
  return detail::make_result<T>(Tensor<T>::scalar(s / static_cast<T>(n)), {a, b}, [a, b, n](Node<T>& self) {
    const T k = T(2) * self.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = a->value[i] - b->value[i];
      if (a->requires_grad) a->ensure_grad()[i] += k * d;
      if (b->requires_grad) b->ensure_grad()[i] -= k * d;
    }
  });
}

/// Weighted sum of scalar Vars, skipping terms with zero weight.
template <class T>
Var<T> weighted_sum(std::initializer_list<std::pair<T, Var<T>>> terms) {
  Var<T> acc;
  for (const auto& [w, v] : terms) {
    if (w == T(0) || !v) continue;
    auto term = w == T(1) ? v : scale(v, w);
    acc = acc ? add(acc, term) : term;
  }
  return acc ? acc : constant(Tensor<T>::scalar(T(0)));
}

// ---------------------------------------------------------------------------
// Spatial

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape sa = a->shape(), sb = b->shape();
  EGIC_REQUIRE(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w, "concat spatial mismatch");
  Shape so{sa.n, sa.c + sb.c, sa.h, sa.w};
  Tensor<T> out(so);
  const std::size_t pa = sa.c * sa.plane(), pb = sb.c * sb.plane();
  for (int n = 0; n < sa.n; ++n) {
    std::copy_n(a->value.data() + n * pa, pa, out.data() + n * (pa + pb));
    std::copy_n(b->value.data() + n * pb, pb, out.data() + n * (pa + pb) + pa);
  }
  return detail::make_result<T>(std::move(out), {a, b}, [a, b, pa, pb, sa](Node<T>& self) {
    for (int n = 0; n < sa.n; ++n) {
      const T* g = self.grad.data() + n * (pa + pb);
      if (a->requires_grad) {
        T* ga = a->ensure_grad().data() + n * pa;
        for (std::size_t i = 0; i < pa; ++i) ga[i] += g[i];
      }
      if (b->requires_grad) {
        T* gb = b->ensure_grad().data() + n * pb;
        for (std::size_t i = 0; i < pb; ++i) gb[i] += g[pa + i];
      }
    }
  });
}

template <class T>
Var<T> slice_channels(const Var<T>& a, int start, int count) {
  const Shape s = a->shape();
  EGIC_REQUIRE(start >= 0 && count >= 0 && start + count <= s.c, "slice_channels out of range");
  Shape so{s.n, count, s.h, s.w};
  Tensor<T> out(so);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    std::copy_n(a->value.data() + (static_cast<std::size_t>(n) * s.c + start) * plane, count * plane,
                out.data() + static_cast<std::size_t>(n) * count * plane);
  return detail::make_result<T>(std::move(out), {a}, [a, s, start, count, plane](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (int n = 0; n < s.n; ++n) {
      T* dst = g.data() + (static_cast<std::size_t>(n) * s.c + start) * plane;
      const T* src = self.grad.data() + static_cast<std::size_t>(n) * count * plane;
      for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
    }
  });
}

/// Nearest-neighbour resize to (out_h, out_w); source index = floor(dst * in / out).
template <class T>
Var<T> resize_nearest(const Var<T>& a, int out_h, int out_w) {
  const Shape s = a->shape();
  EGIC_REQUIRE(out_h > 0 && out_w > 0, "resize to empty size");
  Shape so{s.n, s.c, out_h, out_w};
  std::vector<int> ys(out_h), xs(out_w);
  for (int y = 0; y < out_h; ++y) ys[y] = static_cast<int>(static_cast<long>(y) * s.h / out_h);
  for (int x = 0; x < out_w; ++x) xs[x] = static_cast<int>(static_cast<long>(x) * s.w / out_w);
  Tensor<T> out(so);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) out(n, c, y, x) = a->value(n, c, ys[y], xs[x]);
  return detail::make_result<T>(std::move(out), {a}, [a, so, ys, xs](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (int n = 0; n < so.n; ++n)
      for (int c = 0; c < so.c; ++c)
        for (int y = 0; y < so.h; ++y)
          for (int x = 0; x < so.w; ++x) g(n, c, ys[y], xs[x]) += self.grad(n, c, y, x);
  });
}

template <class T>
Var<T> upsample2(const Var<T>& a) {
  return resize_nearest(a, a->shape().h * 2, a->shape().w * 2);
}

template <class T>
Var<T> avg_pool2(const Var<T>& a) {
  const Shape s = a->shape();
  EGIC_REQUIRE(s.h % 2 == 0 && s.w % 2 == 0, "avg_pool2 needs even spatial size");
  Shape so{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<T> out(so);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < so.h; ++y)
        for (int x = 0; x < so.w; ++x)
          out(n, c, y, x) = T(0.25) * (a->value(n, c, 2 * y, 2 * x) + a->value(n, c, 2 * y, 2 * x + 1) +
                                       a->value(n, c, 2 * y + 1, 2 * x) + a->value(n, c, 2 * y + 1, 2 * x + 1));
  return detail::make_result<T>(std::move(out), {a}, [a, so](Node<T>& self) {
    auto& g = a->ensure_grad();
    for (int n = 0; n < so.n; ++n)
      for (int c = 0; c < so.c; ++c)
        for (int y = 0; y < so.h; ++y)
          for (int x = 0; x < so.w; ++x) {
            const T v = T(0.25) * self.grad(n, c, y, x);
            g(n, c, 2 * y, 2 * x) += v;
            g(n, c, 2 * y, 2 * x + 1) += v;
            g(n, c, 2 * y + 1, 2 * x) += v;
            g(n, c, 2 * y + 1, 2 * x + 1) += v;
          }
  });
}

/// Per-pixel inner product across channels: NxCxHxW, NxCxHxW -> Nx1xHxW.
template <class T>
Var<T> channel_dot(const Var<T>& u, const Var<T>& v) {
  const Shape s = u->shape();
  EGIC_REQUIRE(s == v->shape(), "projection shape mismatch " + s.str() + " vs " + v->shape().str());
  Tensor<T> out(Shape{s.n, 1, s.h, s.w});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) out[n * plane + i] += u->value[base + i] * v->value[base + i];
    }
  return detail::make_result<T>(std::move(out), {u, v}, [u, v, s, plane](Node<T>& self) {
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T g = self.grad[n * plane + i];
          if (u->requires_grad) u->ensure_grad()[base + i] += g * v->value[base + i];
          if (v->requires_grad) v->ensure_grad()[base + i] += g * u->value[base + i];
        }
      }
  });
}

/// Adds an Nx1xHxW field to every channel of an NxCxHxW field.
template <class T>
Var<T> add_to_channels(const Var<T>& a, const Var<T>& field) {
  const Shape s = a->shape();
  EGIC_REQUIRE(field->shape() == (Shape{s.n, 1, s.h, s.w}), "broadcast field must be Nx1xHxW");
  Tensor<T> out = a->value;
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        out[(static_cast<std::size_t>(n) * s.c + c) * plane + i] += field->value[n * plane + i];
  return detail::make_result<T>(std::move(out), {a, field}, [a, field, s, plane](Node<T>& self) {
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
          const T g = self.grad[(static_cast<std::size_t>(n) * s.c + c) * plane + i];
          if (a->requires_grad) a->ensure_grad()[(static_cast<std::size_t>(n) * s.c + c) * plane + i] += g;
          if (field->requires_grad) field->ensure_grad()[n * plane + i] += g;
        }
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeom {
  int cin, h, w, k, stride, pad, ho, wo;
  int rows() const { return cin * k * k; }
  int cols() const { return ho * wo; }
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const int P = g.cols();
  for (int ci = 0; ci < g.cin; ++ci)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = cols + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * P;
        const T* plane = x + static_cast<std::size_t>(ci) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im(const T* cols, const ConvGeom& g, T* dx) {
  const int P = g.cols();
  for (int ci = 0; ci < g.cin; ++ci)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = cols + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * P;
        T* plane = dx + static_cast<std::size_t>(ci) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.w;
          const T* src = row + oy * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. weight: Cout x Cin x k x k, bias: 1 x Cout x 1 x 1 (optional).
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  using Mat = detail::RowMat<T>;
  const Shape sx = x->shape(), sw = weight->shape();
  EGIC_REQUIRE(sw.c == sx.c, "conv2d channel mismatch: input " + sx.str() + " weight " + sw.str());
  EGIC_REQUIRE(sw.h == sw.w, "conv2d kernel must be square");
  const detail::ConvGeom g{sx.c, sx.h, sx.w, sw.h, stride, pad,
                           (sx.h + 2 * pad - sw.h) / stride + 1, (sx.w + 2 * pad - sw.w) / stride + 1};
  EGIC_REQUIRE(g.ho > 0 && g.wo > 0, "conv2d output would be empty");
  const int cout = sw.n, K = g.rows(), P = g.cols();
  const bool direct = g.k == 1 && stride == 1 && pad == 0;
  Tensor<T> out(Shape{sx.n, cout, g.ho, g.wo});
  Eigen::Map<const Mat> W(weight->value.data(), cout, K);
  Buffer<T> cols(direct ? 0 : static_cast<std::size_t>(K) * P);
  for (int n = 0; n < sx.n; ++n) {
    const T* xn = x->value.data() + static_cast<std::size_t>(n) * sx.c * sx.plane();
    const T* cp = xn;
    if (!direct) {
      detail::im2col(xn, g, cols.data());
      cp = cols.data();
    }
    Eigen::Map<const Mat> C(cp, K, P);
    Eigen::Map<Mat> O(out.data() + static_cast<std::size_t>(n) * cout * P, cout, P);
    O.noalias() = W * C;
    if (bias)
      for (int co = 0; co < cout; ++co) O.row(co).array() += bias->value[co];
  }
  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(bias);
  return detail::make_result<T>(std::move(out), std::move(parents), [x, weight, bias, g, cout, K, P, direct](Node<T>& self) {
    using Mat = detail::RowMat<T>;
    const Shape sx = x->shape();
    Eigen::Map<const Mat> W(weight->value.data(), cout, K);
    Buffer<T> cols(direct ? 0 : static_cast<std::size_t>(K) * P);
    Buffer<T> dcols(static_cast<std::size_t>(K) * P);
    for (int n = 0; n < sx.n; ++n) {
      Eigen::Map<const Mat> dO(self.grad.data() + static_cast<std::size_t>(n) * cout * P, cout, P);
      const T* xn = x->value.data() + static_cast<std::size_t>(n) * sx.c * sx.plane();
      if (weight->requires_grad) {
        const T* cp = xn;
        if (!direct) {
          detail::im2col(xn, g, cols.data());
          cp = cols.data();
        }
        Eigen::Map<const Mat> C(cp, K, P);
        Eigen::Map<Mat> dW(weight->ensure_grad().data(), cout, K);
        dW.noalias() += dO * C.transpose();
      }
      if (bias && bias->requires_grad) {
        auto& gb = bias->ensure_grad();
        for (int co = 0; co < cout; ++co) gb[co] += dO.row(co).sum();
      }
      if (x->requires_grad) {
        T* dx = x->ensure_grad().data() + static_cast<std::size_t>(n) * sx.c * sx.plane();
        if (direct) {
          Eigen::Map<Mat> dX(dx, K, P);
          dX.noalias() += W.transpose() * dO;
        } else {
          Eigen::Map<Mat> dC(dcols.data(), K, P);
          dC.noalias() = W.transpose() * dO;
          detail::col2im(dcols.data(), g, dx);
        }
      }
    }
  });
}

/// Weight normalization: w[o] = g[o] * v[o] / ||v[o]|| per output channel.
/// v: Cout x Cin x k x k, g: Cout x 1 x 1 x 1.
template <class T>
Var<T> weight_norm(const Var<T>& v, const Var<T>& gain) {
  const Shape s = v->shape();
  EGIC_REQUIRE(gain->value.size() == static_cast<std::size_t>(s.n), "weight_norm gain size mismatch");
  const std::size_t per = s.size() / s.n;
  std::vector<T> norms(s.n);
  Tensor<T> out(s);
  for (int o = 0; o < s.n; ++o) {
    T acc = T(0);
    for (std::size_t i = 0; i < per; ++i) acc += v->value[o * per + i] * v->value[o * per + i];
    norms[o] = std::sqrt(acc) + T(1e-12);
    const T k = gain->value[o] / norms[o];
    for (std::size_t i = 0; i < per; ++i) out[o * per + i] = k * v->value[o * per + i];
  }
  return detail::make_result<T>(std::move(out), {v, gain}, [v, gain, s, per, norms](Node<T>& self) {
    for (int o = 0; o < s.n; ++o) {
      T dot = T(0);
      for (std::size_t i = 0; i < per; ++i) dot += self.grad[o * per + i] * v->value[o * per + i];
      const T nrm = norms[o];
      if (gain->requires_grad) gain->ensure_grad()[o] += dot / nrm;
      if (v->requires_grad) {
        auto& gv = v->ensure_grad();
        const T g = gain->value[o];
        for (std::size_t i = 0; i < per; ++i)
          gv[o * per + i] += g / nrm * (self.grad[o * per + i] - dot / (nrm * nrm) * v->value[o * per + i]);
      }
    }
  });
}

}  // namespace egic::ag
