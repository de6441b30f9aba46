#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "crossmark/rng.hpp"
#include "crossmark/tensor.hpp"

namespace crossmark {
namespace ad {

// Reverse-mode tape. Each op builds a Node holding its value, links to its
// parents and a closure that scatters the incoming gradient. Graphs are
// rebuilt every step; only parameter leaves persist across steps.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;

  bool has_grad() const { return !grad.data.empty(); }
  Tensor<T>& ensure_grad() {
    if (grad.data.empty()) grad = Tensor<T>::zeros(value.shape);
    return grad;
  }
  void zero_grad() {
    if (!grad.data.empty()) grad.fill(T(0));
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents,
                 std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(backward_fn);
  return n;
}

// Runs the tape backward from a scalar root.
template <typename T>
void backward(const Var<T>& root) {
  if (root->value.numel() != 1) throw ShapeError("backward expects a scalar root");
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.push_back({root.get(), 0});
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
  root->ensure_grad().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

namespace detail {

template <typename T>
void accumulate(Node<T>& dst, const Tensor<T>& g) {
  T* d = dst.ensure_grad().ptr();
  const T* s = g.ptr();
  const i64 n = g.numel();
  for (i64 i = 0; i < n; ++i) d[i] += s[i];
}

inline i64 rows_for_lastdim(const std::vector<i64>& shape) {
  i64 r = 1;
  for (size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
  return r;
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "add");
  Tensor<T> out = a->value;
  const T* bp = b->value.ptr();
  T* op = out.ptr();
  for (i64 i = 0; i < out.numel(); ++i) op[i] += bp[i];
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (self.parents[0]->requires_grad) detail::accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) detail::accumulate(*self.parents[1], self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "sub");
  Tensor<T> out = a->value;
  const T* bp = b->value.ptr();
  T* op = out.ptr();
  for (i64 i = 0; i < out.numel(); ++i) op[i] -= bp[i];
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (self.parents[0]->requires_grad) detail::accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      Node<T>& p = *self.parents[1];
      T* d = p.ensure_grad().ptr();
      const T* g = self.grad.ptr();
      for (i64 i = 0; i < self.grad.numel(); ++i) d[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "mul");
  Tensor<T> out = a->value;
  const T* bp = b->value.ptr();
  T* op = out.ptr();
  for (i64 i = 0; i < out.numel(); ++i) op[i] *= bp[i];
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const T* g = self.grad.ptr();
    const i64 n = self.grad.numel();
    if (self.parents[0]->requires_grad) {
      T* d = self.parents[0]->ensure_grad().ptr();
      const T* other = self.parents[1]->value.ptr();
      for (i64 i = 0; i < n; ++i) d[i] += g[i] * other[i];
    }
    if (self.parents[1]->requires_grad) {
      T* d = self.parents[1]->ensure_grad().ptr();
      const T* other = self.parents[0]->value.ptr();
      for (i64 i = 0; i < n; ++i) d[i] += g[i] * other[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = a->value;
  for (T& v : out.data) v *= c;
  return make_node<T>(std::move(out), {a}, [c](Node<T>& self) {
    T* d = self.parents[0]->ensure_grad().ptr();
    const T* g = self.grad.ptr();
    for (i64 i = 0; i < self.grad.numel(); ++i) d[i] += c * g[i];
  });
}

template <typename T>
Var<T> add_const(const Var<T>& a, T c) {
  Tensor<T> out = a->value;
  for (T& v : out.data) v += c;
  return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (T& v : out.data) v = v > T(0) ? v : T(0);
  return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
    T* d = self.parents[0]->ensure_grad().ptr();
    const T* g = self.grad.ptr();
    const T* x = self.parents[0]->value.ptr();
    for (i64 i = 0; i < self.grad.numel(); ++i)
      if (x[i] > T(0)) d[i] += g[i];
  });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  // Exact erf form; smooth everywhere, which keeps finite differences honest.
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  Tensor<T> out = a->value;
  for (T& v : out.data) {
    const double x = (double)v;
    v = (T)(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  }
  return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
    T* d = self.parents[0]->ensure_grad().ptr();
    const T* g = self.grad.ptr();
    const T* xs = self.parents[0]->value.ptr();
    for (i64 i = 0; i < self.grad.numel(); ++i) {
      const double x = (double)xs[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      d[i] += g[i] * (T)(cdf + x * pdf);
    }
  });
}

template <typename T>
Var<T> clamp01(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (T& v : out.data) v = v < T(0) ? T(0) : (v > T(1) ? T(1) : v);
  return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
    T* d = self.parents[0]->ensure_grad().ptr();
    const T* g = self.grad.ptr();
    const T* x = self.parents[0]->value.ptr();
    for (i64 i = 0; i < self.grad.numel(); ++i)
      if (x[i] > T(0) && x[i] < T(1)) d[i] += g[i];
  });
}

// ---- shape ops ----

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<i64> shape) {
  Tensor<T> out = a->value.reshaped(std::move(shape));
  return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
    T* d = self.parents[0]->ensure_grad().ptr();
    const T* g = self.grad.ptr();
    for (i64 i = 0; i < self.grad.numel(); ++i) d[i] += g[i];
  });
}

namespace detail {

template <typename T>
void permute_0213_copy(const Tensor<T>& in, Tensor<T>& out) {
  const i64 a = in.shape[0], b = in.shape[1], c = in.shape[2], d = in.shape[3];
  const T* src = in.ptr();
  T* dst = out.ptr();
  for (i64 i = 0; i < a; ++i)
    for (i64 j = 0; j < b; ++j)
      for (i64 k = 0; k < c; ++k) {
        const T* s = src + ((i * b + j) * c + k) * d;
        T* t = dst + ((i * c + k) * b + j) * d;
        for (i64 l = 0; l < d; ++l) t[l] = s[l];
      }
}

}  // namespace detail

// {A,B,C,D} -> {A,C,B,D}; used to split/merge attention heads.
template <typename T>
Var<T> permute_0213(const Var<T>& a) {
  if (a->value.ndim() != 4) throw ShapeError("permute_0213 expects a 4-d tensor");
  const auto& s = a->value.shape;
  Tensor<T> out({s[0], s[2], s[1], s[3]});
  detail::permute_0213_copy(a->value, out);
  return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
    Tensor<T> tmp(self.parents[0]->value.shape);
    detail::permute_0213_copy(self.grad, tmp);
    detail::accumulate(*self.parents[0], tmp);
  });
}

template <typename T>
Var<T> concat_lastdim(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a->value.shape;
  const auto& sb = b->value.shape;
  if (sa.size() != sb.size()) throw ShapeError("concat: rank mismatch");
  for (size_t i = 0; i + 1 < sa.size(); ++i)
    if (sa[i] != sb[i]) throw ShapeError("concat: leading dims differ");
  const i64 rows = detail::rows_for_lastdim(sa);
  const i64 da = sa.back(), db = sb.back();
  std::vector<i64> os = sa;
  os.back() = da + db;
  Tensor<T> out(os);
  for (i64 r = 0; r < rows; ++r) {
    std::copy_n(a->value.ptr() + r * da, da, out.ptr() + r * (da + db));
    std::copy_n(b->value.ptr() + r * db, db, out.ptr() + r * (da + db) + da);
  }
  return make_node<T>(std::move(out), {a, b}, [rows, da, db](Node<T>& self) {
    const T* g = self.grad.ptr();
    if (self.parents[0]->requires_grad) {
      T* d = self.parents[0]->ensure_grad().ptr();
      for (i64 r = 0; r < rows; ++r)
        for (i64 i = 0; i < da; ++i) d[r * da + i] += g[r * (da + db) + i];
    }
    if (self.parents[1]->requires_grad) {
      T* d = self.parents[1]->ensure_grad().ptr();
      for (i64 r = 0; r < rows; ++r)
        for (i64 i = 0; i < db; ++i) d[r * db + i] += g[r * (da + db) + da + i];
    }
  });
}

// Rotates dim 0 by `shift`: out[i] = x[(i + shift) mod B].
template <typename T>
Var<T> rotate_batch(const Var<T>& a, i64 shift) {
  const i64 batch = a->value.shape[0];
  const i64 stride = a->value.numel() / batch;
  Tensor<T> out(a->value.shape);
  for (i64 i = 0; i < batch; ++i) {
    const i64 j = (i + shift) % batch;
    std::copy_n(a->value.ptr() + j * stride, stride, out.ptr() + i * stride);
  }
  return make_node<T>(std::move(out), {a}, [batch, stride, shift](Node<T>& self) {
    T* d = self.parents[0]->ensure_grad().ptr();
    const T* g = self.grad.ptr();
    for (i64 i = 0; i < batch; ++i) {
      const i64 j = (i + shift) % batch;
      for (i64 k = 0; k < stride; ++k) d[j * stride + k] += g[i * stride + k];
    }
  });
}

namespace detail {

template <typename T>
void space_to_depth_copy(const Tensor<T>& in, Tensor<T>& out, i64 block, bool inverse) {
  // in: {B,H,W,C}; out: {B,H/b,W/b,C*b*b}. Block pixels flatten row-major
  // with channel fastest, matching the patch token layout.
  const Tensor<T>& img = inverse ? out : in;
  const i64 batch = img.shape[0], h = img.shape[1], w = img.shape[2], c = img.shape[3];
  const i64 gh = h / block, gw = w / block;
  const i64 tok = block * block * c;
  for (i64 b = 0; b < batch; ++b)
    for (i64 gy = 0; gy < gh; ++gy)
      for (i64 gx = 0; gx < gw; ++gx)
        for (i64 py = 0; py < block; ++py) {
          const i64 img_off = ((b * h + gy * block + py) * w + gx * block) * c;
          const i64 tok_off = ((b * gh + gy) * gw + gx) * tok + py * block * c;
          if (inverse)
            std::copy_n(in.ptr() + tok_off, block * c, out.ptr() + img_off);
          else
            std::copy_n(in.ptr() + img_off, block * c, out.ptr() + tok_off);
        }
}

}  // namespace detail

template <typename T>
Var<T> space_to_depth(const Var<T>& a, i64 block) {
  const auto& s = a->value.shape;
  if (s.size() != 4) throw ShapeError("space_to_depth expects {B,H,W,C}");
  if (s[1] % block != 0 || s[2] % block != 0)
    throw ShapeError("space_to_depth: spatial dims not divisible by block");
  Tensor<T> out({s[0], s[1] / block, s[2] / block, s[3] * block * block});
  detail::space_to_depth_copy(a->value, out, block, false);
  return make_node<T>(std::move(out), {a}, [block](Node<T>& self) {
    Tensor<T> tmp(self.parents[0]->value.shape);
    detail::space_to_depth_copy(self.grad, tmp, block, true);
    detail::accumulate(*self.parents[0], tmp);
  });
}

template <typename T>
Var<T> depth_to_space(const Var<T>& a, i64 block) {
  const auto& s = a->value.shape;
  if (s.size() != 4) throw ShapeError("depth_to_space expects {B,gh,gw,D}");
  if (s[3] % (block * block) != 0) throw ShapeError("depth_to_space: channel dim mismatch");
  Tensor<T> out({s[0], s[1] * block, s[2] * block, s[3] / (block * block)});
  detail::space_to_depth_copy(a->value, out, block, true);
  return make_node<T>(std::move(out), {a}, [block](Node<T>& self) {
    Tensor<T> tmp(self.parents[0]->value.shape);
    detail::space_to_depth_copy(self.grad, tmp, block, false);
    detail::accumulate(*self.parents[0], tmp);
  });
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& a, i64 factor) {
  const auto& s = a->value.shape;
  if (s.size() != 4) throw ShapeError("upsample_nearest expects {B,H,W,C}");
  const i64 batch = s[0], h = s[1], w = s[2], c = s[3];
  Tensor<T> out({batch, h * factor, w * factor, c});
  for (i64 b = 0; b < batch; ++b)
    for (i64 y = 0; y < h * factor; ++y)
      for (i64 x = 0; x < w * factor; ++x)
        std::copy_n(a->value.ptr() + ((b * h + y / factor) * w + x / factor) * c, c,
                    out.ptr() + ((b * h * factor + y) * w * factor + x) * c);
  return make_node<T>(std::move(out), {a}, [batch, h, w, c, factor](Node<T>& self) {
    T* d = self.parents[0]->ensure_grad().ptr();
    const T* g = self.grad.ptr();
    for (i64 b = 0; b < batch; ++b)
      for (i64 y = 0; y < h * factor; ++y)
        for (i64 x = 0; x < w * factor; ++x) {
          T* dst = d + ((b * h + y / factor) * w + x / factor) * c;
          const T* src = g + ((b * h * factor + y) * w * factor + x) * c;
          for (i64 k = 0; k < c; ++k) dst[k] += src[k];
        }
  });
}

// ---- linear algebra ----

// Affine map over the last dim: every row of x (flattened leading dims) is
// multiplied by w {Din,Dout}; bias optional.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias = nullptr) {
  const i64 din = x->value.shape.back();
  if (w->value.ndim() != 2 || w->value.shape[0] != din)
    throw ShapeError("linear: weight shape incompatible with input dim " + std::to_string(din));
  const i64 dout = w->value.shape[1];
  const i64 rows = detail::rows_for_lastdim(x->value.shape);
  std::vector<i64> os = x->value.shape;
  os.back() = dout;
  Tensor<T> out(os);
  out.mat(rows, dout).noalias() = x->value.mat(rows, din) * w->value.mat(din, dout);
  if (bias) {
    if (bias->value.numel() != dout) throw ShapeError("linear: bias size mismatch");
    out.mat(rows, dout).rowwise() +=
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->value.ptr(), dout);
  }
  std::vector<Var<T>> parents = {x, w};
  if (bias) parents.push_back(bias);
  return make_node<T>(std::move(out), std::move(parents),
                      [rows, din, dout](Node<T>& self) {
                        auto& xn = *self.parents[0];
                        auto& wn = *self.parents[1];
                        auto gmat = self.grad.mat(rows, dout);
                        if (xn.requires_grad)
                          xn.ensure_grad().mat(rows, din).noalias() +=
                              gmat * wn.value.mat(din, dout).transpose();
                        if (wn.requires_grad)
                          wn.ensure_grad().mat(din, dout).noalias() +=
                              xn.value.mat(rows, din).transpose() * gmat;
                        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                          // Fixed row-order sum. Eigen's vectorized reduction
                          // peels to an alignment boundary, so its rounding
                          // depends on the heap address; that would break
                          // bit-reproducibility across runs.
                          auto& bn = *self.parents[2];
                          T* gb = bn.ensure_grad().ptr();
                          const T* g = self.grad.ptr();
                          for (i64 r = 0; r < rows; ++r)
                            for (i64 j = 0; j < dout; ++j) gb[j] += g[r * dout + j];
                        }
                      });
}

// Adds a learned {N,D} table to every batch element of x {B,N,D}.
template <typename T>
Var<T> add_table(const Var<T>& x, const Var<T>& table) {
  const auto& s = x->value.shape;
  if (s.size() != 3 || table->value.ndim() != 2 || table->value.shape[0] != s[1] ||
      table->value.shape[1] != s[2])
    throw ShapeError("add_table: table shape must match token sequence " + x->value.shape_str());
  const i64 batch = s[0], block = s[1] * s[2];
  Tensor<T> out = x->value;
  for (i64 b = 0; b < batch; ++b) {
    T* o = out.ptr() + b * block;
    const T* t = table->value.ptr();
    for (i64 i = 0; i < block; ++i) o[i] += t[i];
  }
  return make_node<T>(std::move(out), {x, table}, [batch, block](Node<T>& self) {
    if (self.parents[0]->requires_grad) detail::accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      T* d = self.parents[1]->ensure_grad().ptr();
      const T* g = self.grad.ptr();
      for (i64 b = 0; b < batch; ++b)
        for (i64 i = 0; i < block; ++i) d[i] += g[b * block + i];
    }
  });
}

// Batched matmul: a {G,N,K} x b {G,K,M} -> {G,N,M}.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a->value.shape;
  const auto& sb = b->value.shape;
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
    throw ShapeError("bmm: incompatible shapes");
  const i64 g = sa[0], n = sa[1], k = sa[2], m = sb[2];
  Tensor<T> out({g, n, m});
  for (i64 i = 0; i < g; ++i) {
    ConstMatMap<T> am(a->value.ptr() + i * n * k, n, k);
    ConstMatMap<T> bm(b->value.ptr() + i * k * m, k, m);
    MatMap<T>(out.ptr() + i * n * m, n, m).noalias() = am * bm;
  }
  return make_node<T>(std::move(out), {a, b}, [g, n, k, m](Node<T>& self) {
    for (i64 i = 0; i < g; ++i) {
      ConstMatMap<T> gm(self.grad.ptr() + i * n * m, n, m);
      if (self.parents[0]->requires_grad) {
        ConstMatMap<T> bm(self.parents[1]->value.ptr() + i * k * m, k, m);
        MatMap<T>(self.parents[0]->ensure_grad().ptr() + i * n * k, n, k).noalias() +=
            gm * bm.transpose();
      }
      if (self.parents[1]->requires_grad) {
        ConstMatMap<T> am(self.parents[0]->value.ptr() + i * n * k, n, k);
        MatMap<T>(self.parents[1]->ensure_grad().ptr() + i * k * m, k, m).noalias() +=
            am.transpose() * gm;
      }
    }
  });
}

// Batched matmul with transposed second operand: a {G,N,K} x b {G,M,K}^T -> {G,N,M}.
template <typename T>
Var<T> bmm_nt(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a->value.shape;
  const auto& sb = b->value.shape;
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
    throw ShapeError("bmm_nt: incompatible shapes");
  const i64 g = sa[0], n = sa[1], k = sa[2], m = sb[1];
  Tensor<T> out({g, n, m});
  for (i64 i = 0; i < g; ++i) {
    ConstMatMap<T> am(a->value.ptr() + i * n * k, n, k);
    ConstMatMap<T> bm(b->value.ptr() + i * m * k, m, k);
    MatMap<T>(out.ptr() + i * n * m, n, m).noalias() = am * bm.transpose();
  }
  return make_node<T>(std::move(out), {a, b}, [g, n, k, m](Node<T>& self) {
    for (i64 i = 0; i < g; ++i) {
      ConstMatMap<T> gm(self.grad.ptr() + i * n * m, n, m);
      if (self.parents[0]->requires_grad) {
        ConstMatMap<T> bm(self.parents[1]->value.ptr() + i * m * k, m, k);
        MatMap<T>(self.parents[0]->ensure_grad().ptr() + i * n * k, n, k).noalias() += gm * bm;
      }
      if (self.parents[1]->requires_grad) {
        ConstMatMap<T> am(self.parents[0]->value.ptr() + i * n * k, n, k);
        MatMap<T>(self.parents[1]->ensure_grad().ptr() + i * m * k, m, k).noalias() +=
            gm.transpose() * am;
      }
    }
  });
}

// ---- normalization and activations over rows ----

template <typename T>
Var<T> softmax_lastdim(const Var<T>& a) {
  if (!a->value.all_finite()) throw NumericError("softmax: non-finite input");
  const i64 d = a->value.shape.back();
  const i64 rows = detail::rows_for_lastdim(a->value.shape);
  Tensor<T> out(a->value.shape);
  for (i64 r = 0; r < rows; ++r) {
    const T* x = a->value.ptr() + r * d;
    T* y = out.ptr() + r * d;
    T mx = x[0];
    for (i64 i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    T sum = T(0);
    for (i64 i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    const T inv = T(1) / sum;
    for (i64 i = 0; i < d; ++i) y[i] *= inv;
  }
  return make_node<T>(std::move(out), {a}, [rows, d](Node<T>& self) {
    T* dx = self.parents[0]->ensure_grad().ptr();
    for (i64 r = 0; r < rows; ++r) {
      const T* y = self.value.ptr() + r * d;
      const T* g = self.grad.ptr() + r * d;
      T dot = T(0);
      for (i64 i = 0; i < d; ++i) dot += y[i] * g[i];
      for (i64 i = 0; i < d; ++i) dx[r * d + i] += y[i] * (g[i] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  double eps = 1e-5) {
  const i64 d = x->value.shape.back();
  if (gamma->value.numel() != d || beta->value.numel() != d)
    throw ShapeError("layer_norm: gamma/beta size mismatch");
  const i64 rows = detail::rows_for_lastdim(x->value.shape);
  Tensor<T> out(x->value.shape);
  Tensor<T> xhat(x->value.shape);
  std::vector<T> rstd((size_t)rows);
  for (i64 r = 0; r < rows; ++r) {
    const T* xp = x->value.ptr() + r * d;
    double mean = 0;
    for (i64 i = 0; i < d; ++i) mean += (double)xp[i];
    mean /= (double)d;
    double var = 0;
    for (i64 i = 0; i < d; ++i) {
      const double c = (double)xp[i] - mean;
      var += c * c;
    }
    var /= (double)d;
    const T rs = (T)(1.0 / std::sqrt(var + eps));
    rstd[(size_t)r] = rs;
    T* xh = xhat.ptr() + r * d;
    T* o = out.ptr() + r * d;
    const T* gp = gamma->value.ptr();
    const T* bp = beta->value.ptr();
    for (i64 i = 0; i < d; ++i) {
      xh[i] = (T)(((double)xp[i] - mean) * (double)rs);
      o[i] = gp[i] * xh[i] + bp[i];
    }
  }
  return make_node<T>(
      std::move(out), {x, gamma, beta},
      [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        auto& xn = *self.parents[0];
        auto& gn = *self.parents[1];
        auto& bn = *self.parents[2];
        const T* gamma_v = gn.value.ptr();
        for (i64 r = 0; r < rows; ++r) {
          const T* g = self.grad.ptr() + r * d;
          const T* xh = xhat.ptr() + r * d;
          if (gn.requires_grad) {
            T* dg = gn.ensure_grad().ptr();
            for (i64 i = 0; i < d; ++i) dg[i] += g[i] * xh[i];
          }
          if (bn.requires_grad) {
            T* db = bn.ensure_grad().ptr();
            for (i64 i = 0; i < d; ++i) db[i] += g[i];
          }
          if (xn.requires_grad) {
            double sum_gy = 0, sum_gyx = 0;
            for (i64 i = 0; i < d; ++i) {
              const double gy = (double)g[i] * (double)gamma_v[i];
              sum_gy += gy;
              sum_gyx += gy * (double)xh[i];
            }
            const double inv_d = 1.0 / (double)d;
            T* dx = xn.ensure_grad().ptr() + r * d;
            for (i64 i = 0; i < d; ++i) {
              const double gy = (double)g[i] * (double)gamma_v[i];
              dx[i] += (T)((gy - sum_gy * inv_d - (double)xh[i] * sum_gyx * inv_d) *
                           (double)rstd[(size_t)r]);
            }
          }
        }
      });
}

// ---- convolution ----

namespace detail {

template <typename T>
void im2col(const T* img, i64 h, i64 w, i64 c, i64 kh, i64 kw, T* col) {
  // Same padding, stride 1. col: {h*w, kh*kw*c}, zero-filled borders.
  const i64 ph = kh / 2, pw = kw / 2;
  for (i64 y = 0; y < h; ++y)
    for (i64 x = 0; x < w; ++x) {
      T* row = col + (y * w + x) * kh * kw * c;
      for (i64 ky = 0; ky < kh; ++ky) {
        const i64 sy = y + ky - ph;
        for (i64 kx = 0; kx < kw; ++kx) {
          const i64 sx = x + kx - pw;
          T* dst = row + (ky * kw + kx) * c;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w)
            std::copy_n(img + (sy * w + sx) * c, c, dst);
          else
            std::fill_n(dst, c, T(0));
        }
      }
    }
}

template <typename T>
void col2im_accum(const T* col, i64 h, i64 w, i64 c, i64 kh, i64 kw, T* img) {
  const i64 ph = kh / 2, pw = kw / 2;
  for (i64 y = 0; y < h; ++y)
    for (i64 x = 0; x < w; ++x) {
      const T* row = col + (y * w + x) * kh * kw * c;
      for (i64 ky = 0; ky < kh; ++ky) {
        const i64 sy = y + ky - ph;
        if (sy < 0 || sy >= h) continue;
        for (i64 kx = 0; kx < kw; ++kx) {
          const i64 sx = x + kx - pw;
          if (sx < 0 || sx >= w) continue;
          const T* src = row + (ky * kw + kx) * c;
          T* dst = img + (sy * w + sx) * c;
          for (i64 i = 0; i < c; ++i) dst[i] += src[i];
        }
      }
    }
}

}  // namespace detail

// 2-d convolution, odd kernel, same padding, stride 1.
// x {B,H,W,Cin}, kernel {kh,kw,Cin,Cout}, bias {Cout} -> {B,H,W,Cout}.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias) {
  const auto& s = x->value.shape;
  const auto& ks = kernel->value.shape;
  if (s.size() != 4 || ks.size() != 4) throw ShapeError("conv2d: rank mismatch");
  const i64 batch = s[0], h = s[1], w = s[2], cin = s[3];
  const i64 kh = ks[0], kw = ks[1], cout = ks[3];
  if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("conv2d: kernel size must be odd");
  if (ks[2] != cin) throw ShapeError("conv2d: kernel input channels mismatch");
  if (bias && bias->value.numel() != cout) throw ShapeError("conv2d: bias size mismatch");
  const i64 patch = kh * kw * cin;
  Tensor<T> out({batch, h, w, cout});
  std::vector<T> col((size_t)(h * w * patch));
  for (i64 b = 0; b < batch; ++b) {
    detail::im2col(x->value.ptr() + b * h * w * cin, h, w, cin, kh, kw, col.data());
    ConstMatMap<T> cm(col.data(), h * w, patch);
    MatMap<T> om(out.ptr() + b * h * w * cout, h * w, cout);
    om.noalias() = cm * kernel->value.mat(patch, cout);
    if (bias)
      om.rowwise() +=
          Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->value.ptr(), cout);
  }
  std::vector<Var<T>> parents = {x, kernel};
  if (bias) parents.push_back(bias);
  return make_node<T>(
      std::move(out), std::move(parents), [batch, h, w, cin, kh, kw, cout, patch](Node<T>& self) {
        auto& xn = *self.parents[0];
        auto& kn = *self.parents[1];
        std::vector<T> col((size_t)(h * w * patch));
        for (i64 b = 0; b < batch; ++b) {
          ConstMatMap<T> gm(self.grad.ptr() + b * h * w * cout, h * w, cout);
          if (kn.requires_grad || xn.requires_grad)
            detail::im2col(xn.value.ptr() + b * h * w * cin, h, w, cin, kh, kw, col.data());
          if (kn.requires_grad) {
            ConstMatMap<T> cm(col.data(), h * w, patch);
            kn.ensure_grad().mat(patch, cout).noalias() += cm.transpose() * gm;
          }
          if (xn.requires_grad) {
            MatMap<T>(col.data(), h * w, patch).noalias() =
                gm * kn.value.mat(patch, cout).transpose();
            detail::col2im_accum(col.data(), h, w, cin, kh, kw,
                                 xn.ensure_grad().ptr() + b * h * w * cin);
          }
          if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            // Fixed row-order sum; see the bias case in linear's backward.
            T* gb = self.parents[2]->ensure_grad().ptr();
            const T* g = self.grad.ptr() + b * h * w * cout;
            for (i64 r = 0; r < h * w; ++r)
              for (i64 j = 0; j < cout; ++j) gb[j] += g[r * cout + j];
          }
        }
      });
}

// ---- stochastic ----

// Train mode zeroes each element with probability `rate` and rescales
// survivors by 1/(1-rate); eval mode is the identity.
template <typename T>
Var<T> dropout(const Var<T>& x, double rate, bool train, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0,1)");
  if (!train || rate == 0.0) {
    Tensor<T> out = x->value;
    return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
      detail::accumulate(*self.parents[0], self.grad);
    });
  }
  const T keep_scale = (T)(1.0 / (1.0 - rate));
  Tensor<T> mask(x->value.shape);
  for (T& m : mask.data) m = rng.bernoulli(rate) ? T(0) : keep_scale;
  Tensor<T> out = x->value;
  for (i64 i = 0; i < out.numel(); ++i) out.data[(size_t)i] *= mask.data[(size_t)i];
  return make_node<T>(std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
    T* d = self.parents[0]->ensure_grad().ptr();
    const T* g = self.grad.ptr();
    const T* m = mask.ptr();
    for (i64 i = 0; i < self.grad.numel(); ++i) d[i] += g[i] * m[i];
  });
}

// ---- reductions ----

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "mse");
  const i64 n = a->value.numel();
  double acc = 0;
  const T* ap = a->value.ptr();
  const T* bp = b->value.ptr();
  for (i64 i = 0; i < n; ++i) {
    const double d = (double)ap[i] - (double)bp[i];
    acc += d * d;
  }
  Tensor<T> out({1}, (T)(acc / (double)n));
  return make_node<T>(std::move(out), {a, b}, [n](Node<T>& self) {
    const T g = self.grad.data[0] * (T)(2.0 / (double)n);
    const T* ap = self.parents[0]->value.ptr();
    const T* bp = self.parents[1]->value.ptr();
    if (self.parents[0]->requires_grad) {
      T* d = self.parents[0]->ensure_grad().ptr();
      for (i64 i = 0; i < n; ++i) d[i] += g * (ap[i] - bp[i]);
    }
    if (self.parents[1]->requires_grad) {
      T* d = self.parents[1]->ensure_grad().ptr();
      for (i64 i = 0; i < n; ++i) d[i] -= g * (ap[i] - bp[i]);
    }
  });
}

// Per-sample MSE over all trailing dims: {B,...} x {B,...} -> {B}.
template <typename T>
Var<T> mse_per_sample(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "mse_per_sample");
  const i64 batch = a->value.shape[0];
  const i64 stride = a->value.numel() / batch;
  Tensor<T> out({batch});
  for (i64 s = 0; s < batch; ++s) {
    double acc = 0;
    const T* ap = a->value.ptr() + s * stride;
    const T* bp = b->value.ptr() + s * stride;
    for (i64 i = 0; i < stride; ++i) {
      const double d = (double)ap[i] - (double)bp[i];
      acc += d * d;
    }
    out.data[(size_t)s] = (T)(acc / (double)stride);
  }
  return make_node<T>(std::move(out), {a, b}, [batch, stride](Node<T>& self) {
    for (i64 s = 0; s < batch; ++s) {
      const T g = self.grad.data[(size_t)s] * (T)(2.0 / (double)stride);
      const T* ap = self.parents[0]->value.ptr() + s * stride;
      const T* bp = self.parents[1]->value.ptr() + s * stride;
      if (self.parents[0]->requires_grad) {
        T* d = self.parents[0]->ensure_grad().ptr() + s * stride;
        for (i64 i = 0; i < stride; ++i) d[i] += g * (ap[i] - bp[i]);
      }
      if (self.parents[1]->requires_grad) {
        T* d = self.parents[1]->ensure_grad().ptr() + s * stride;
        for (i64 i = 0; i < stride; ++i) d[i] -= g * (ap[i] - bp[i]);
      }
    }
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  const i64 n = a->value.numel();
  double acc = 0;
  for (const T& v : a->value.data) acc += (double)v;
  Tensor<T> out({1}, (T)(acc / (double)n));
  return make_node<T>(std::move(out), {a}, [n](Node<T>& self) {
    const T g = self.grad.data[0] / (T)n;
    T* d = self.parents[0]->ensure_grad().ptr();
    for (i64 i = 0; i < n; ++i) d[i] += g;
  });
}

}  // namespace ad
}  // namespace crossmark
