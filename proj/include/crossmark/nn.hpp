#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crossmark/autodiff.hpp"

namespace crossmark {

// ---- token sequences ----

struct TokenGrid {
  i64 rows = 0, cols = 0, patch = 0, channels = 0;
};

// N x D token sequence; carries its originating grid when produced by
// patchify so the rearrangement can be inverted.
template <typename T>
struct TokenSeq {
  Tensor<T> data;  // {N, D}
  std::optional<TokenGrid> grid;

  i64 tokens() const { return data.shape[0]; }
  i64 dim() const { return data.shape[1]; }
};

// Rearranges an H x W x C image into (H/p)*(W/p) tokens of length p*p*C.
// Tokens are ordered row-major over the patch grid; within a patch pixels
// flatten row-major with channel fastest. Lossless.
template <typename T>
TokenSeq<T> patchify(const Tensor<T>& img, i64 patch) {
  if (img.ndim() != 3) throw ShapeError("patchify expects an H x W x C image");
  const i64 h = img.shape[0], w = img.shape[1], c = img.shape[2];
  if (patch <= 0 || h % patch != 0 || w % patch != 0)
    throw ShapeError("patchify: image dims " + img.shape_str() + " not divisible by patch " +
                     std::to_string(patch));
  const i64 gh = h / patch, gw = w / patch;
  TokenSeq<T> out;
  out.data = Tensor<T>({gh * gw, patch * patch * c});
  out.grid = TokenGrid{gh, gw, patch, c};
  for (i64 gy = 0; gy < gh; ++gy)
    for (i64 gx = 0; gx < gw; ++gx)
      for (i64 py = 0; py < patch; ++py)
        std::copy_n(img.ptr() + ((gy * patch + py) * w + gx * patch) * c, patch * c,
                    out.data.ptr() + (gy * gw + gx) * patch * patch * c + py * patch * c);
  return out;
}

template <typename T>
Tensor<T> unpatchify(const TokenSeq<T>& toks) {
  if (!toks.grid) throw ShapeError("unpatchify: token sequence has no originating grid");
  const TokenGrid& g = *toks.grid;
  if (toks.tokens() != g.rows * g.cols || toks.dim() != g.patch * g.patch * g.channels)
    throw ShapeError("unpatchify: token shape does not match grid");
  const i64 h = g.rows * g.patch, w = g.cols * g.patch;
  Tensor<T> img({h, w, g.channels});
  for (i64 gy = 0; gy < g.rows; ++gy)
    for (i64 gx = 0; gx < g.cols; ++gx)
      for (i64 py = 0; py < g.patch; ++py)
        std::copy_n(toks.data.ptr() + (gy * g.cols + gx) * toks.dim() + py * g.patch * g.channels,
                    g.patch * g.channels,
                    img.ptr() + ((gy * g.patch + py) * w + gx * g.patch) * g.channels);
  return img;
}

// Batched graph versions: {B,H,W,C} <-> {B,N,D}. Same layout as patchify.
template <typename T>
ad::Var<T> patchify_var(const ad::Var<T>& img, i64 patch) {
  const auto& s = img->value.shape;
  if (s.size() != 4) throw ShapeError("patchify_var expects {B,H,W,C}");
  auto d = ad::space_to_depth(img, patch);
  const auto& ds = d->value.shape;
  return ad::reshape(d, {ds[0], ds[1] * ds[2], ds[3]});
}

template <typename T>
ad::Var<T> unpatchify_var(const ad::Var<T>& toks, i64 grid_rows, i64 grid_cols, i64 patch,
                          i64 channels) {
  const auto& s = toks->value.shape;
  if (s.size() != 3 || s[1] != grid_rows * grid_cols || s[2] != patch * patch * channels)
    throw ShapeError("unpatchify_var: token shape does not match grid");
  auto d = ad::reshape(toks, {s[0], grid_rows, grid_cols, s[2]});
  return ad::depth_to_space(d, patch);
}

// ---- parameters ----

// Named parameter arrays. Frozen entries are skipped by the optimizer and
// stay bit-identical across steps. std::map keeps iteration deterministic.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    ad::Var<T> var;
    bool trainable = true;
  };

  ad::Var<T> create(const std::string& name, Tensor<T> init, bool trainable = true) {
    if (entries_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    auto v = ad::leaf(std::move(init), true);
    entries_[name] = Entry{v, trainable};
    return v;
  }

  const ad::Var<T>& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.var;
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  // Freezing also clears requires_grad so backward skips the frozen
  // subgraph entirely; the optimizer skips it via the trainable flag.
  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& [name, e] : entries_)
      if (name.rfind(prefix, 0) == 0) {
        e.trainable = trainable;
        e.var->requires_grad = trainable;
      }
  }

  void remove_prefix(const std::string& prefix) {
    for (auto it = entries_.begin(); it != entries_.end();)
      it = (it->first.rfind(prefix, 0) == 0) ? entries_.erase(it) : std::next(it);
  }

  void zero_grads() {
    for (auto& [name, e] : entries_) e.var->zero_grad();
  }

  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  i64 total_params() const {
    i64 n = 0;
    for (const auto& [name, e] : entries_) n += e.var->value.numel();
    return n;
  }

 private:
  std::map<std::string, Entry> entries_;
};

// Fan-in scaled zero-mean init for weight matrices and kernels. gain
// multiplies the scale; residual output projections pass a depth-dependent
// gain so a deep stack starts near the identity (see TransformerBlock).
template <typename T>
Tensor<T> init_fan_in(std::vector<i64> shape, i64 fan_in, Rng& rng, double gain = 1.0) {
  return Tensor<T>::randn(std::move(shape), rng, gain / std::sqrt((double)fan_in));
}

// ---- layers ----

// Affine map applied independently to every token (channel-wise FC).
template <typename T>
struct ChannelFC {
  ad::Var<T> w, b;

  ChannelFC() = default;
  ChannelFC(ParameterStore<T>& ps, const std::string& prefix, i64 din, i64 dout, Rng& rng,
            double bias_init = 0.0, double gain = 1.0) {
    w = ps.create(prefix + ".w", init_fan_in<T>({din, dout}, din, rng, gain));
    b = ps.create(prefix + ".b", Tensor<T>::full({dout}, (T)bias_init));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::linear(x, w, b); }
};

template <typename T>
struct LayerNorm {
  ad::Var<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& ps, const std::string& prefix, i64 dim) {
    gamma = ps.create(prefix + ".gamma", Tensor<T>::full({dim}, T(1)));
    beta = ps.create(prefix + ".beta", Tensor<T>::zeros({dim}));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::layer_norm(x, gamma, beta); }
};

// Scaled dot-product attention over two token sequences: queries from q_src,
// keys/values from kv_src. Internal width attn_dim split across heads; the
// output projection maps back to out_dim.
template <typename T>
struct MultiHeadAttention {
  i64 heads = 0, attn_dim = 0, out_dim = 0;
  ad::Var<T> wq, bq, wk, bk, wv, bv, wo, bo;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore<T>& ps, const std::string& prefix, i64 q_dim, i64 kv_dim,
                     i64 attn_dim_, i64 heads_, i64 out_dim_, Rng& rng, double out_gain = 1.0)
      : heads(heads_), attn_dim(attn_dim_), out_dim(out_dim_) {
    if (attn_dim % heads != 0) throw ConfigError("attention width not divisible by head count");
    wq = ps.create(prefix + ".wq", init_fan_in<T>({q_dim, attn_dim}, q_dim, rng));
    bq = ps.create(prefix + ".bq", Tensor<T>::zeros({attn_dim}));
    wk = ps.create(prefix + ".wk", init_fan_in<T>({kv_dim, attn_dim}, kv_dim, rng));
    bk = ps.create(prefix + ".bk", Tensor<T>::zeros({attn_dim}));
    wv = ps.create(prefix + ".wv", init_fan_in<T>({kv_dim, attn_dim}, kv_dim, rng));
    bv = ps.create(prefix + ".bv", Tensor<T>::zeros({attn_dim}));
    wo = ps.create(prefix + ".wo", init_fan_in<T>({attn_dim, out_dim}, attn_dim, rng, out_gain));
    bo = ps.create(prefix + ".bo", Tensor<T>::zeros({out_dim}));
  }

  struct Result {
    ad::Var<T> out;      // {B, Nq, out_dim}
    ad::Var<T> weights;  // {B*heads, Nq, Nkv}; rows sum to 1
  };

  Result forward_with_weights(const ad::Var<T>& q_src, const ad::Var<T>& kv_src) const {
    if (!q_src->value.all_finite() || !kv_src->value.all_finite())
      throw NumericError("attention: non-finite input");
    const i64 batch = q_src->value.shape[0];
    const i64 nq = q_src->value.shape[1], nkv = kv_src->value.shape[1];
    const i64 dh = attn_dim / heads;
    auto split = [&](const ad::Var<T>& x, i64 n) {
      // {B,N,A} -> {B*H, N, dh}
      auto r = ad::reshape(x, {batch, n, heads, dh});
      return ad::reshape(ad::permute_0213(r), {batch * heads, n, dh});
    };
    auto q = split(ad::linear(q_src, wq, bq), nq);
    auto k = split(ad::linear(kv_src, wk, bk), nkv);
    auto v = split(ad::linear(kv_src, wv, bv), nkv);
    auto scores = ad::scale(ad::bmm_nt(q, k), (T)(1.0 / std::sqrt((double)dh)));
    auto attn = ad::softmax_lastdim(scores);
    auto ctx = ad::bmm(attn, v);  // {B*H, Nq, dh}
    auto merged = ad::reshape(
        ad::permute_0213(ad::reshape(ctx, {batch, heads, nq, dh})), {batch, nq, attn_dim});
    return Result{ad::linear(merged, wo, bo), attn};
  }

  ad::Var<T> operator()(const ad::Var<T>& q_src, const ad::Var<T>& kv_src) const {
    return forward_with_weights(q_src, kv_src).out;
  }
};

// Pre-norm transformer block: self-attention sublayer with residual, then a
// 2x-width GELU MLP sublayer with residual. Shape preserving.
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  ChannelFC<T> fc1, fc2;

  TransformerBlock() = default;
  // out_gain scales the init of the branch output projections (attention
  // out-proj and the second MLP matrix). A stack of N pre-norm blocks passes
  // 1/sqrt(2N) so the residual stream stays dominated by its input at init:
  // 2N unit-gain branch contributions would swamp the input signal, and the
  // final norm would then rescale it — and its gradients — into the noise.
  TransformerBlock(ParameterStore<T>& ps, const std::string& prefix, i64 dim, i64 heads,
                   Rng& rng, double out_gain = 1.0)
      : ln1(ps, prefix + ".ln1", dim),
        ln2(ps, prefix + ".ln2", dim),
        attn(ps, prefix + ".attn", dim, dim, dim, heads, dim, rng, out_gain),
        fc1(ps, prefix + ".fc1", dim, 2 * dim, rng),
        fc2(ps, prefix + ".fc2", 2 * dim, dim, rng, 0.0, out_gain) {}

  ad::Var<T> operator()(const ad::Var<T>& x) const {
    if (x->value.shape.back() != attn.out_dim)
      throw ShapeError("transformer_block: input dim " + std::to_string(x->value.shape.back()) +
                       " does not match block width " + std::to_string(attn.out_dim));
    auto nx = ln1(x);
    auto h = ad::add(x, attn(nx, nx));
    auto y = ad::add(h, fc2(ad::gelu(fc1(ln2(h)))));
    return y;
  }
};

template <typename T>
struct Conv2d {
  ad::Var<T> k, b;

  Conv2d() = default;
  Conv2d(ParameterStore<T>& ps, const std::string& prefix, i64 kernel, i64 cin, i64 cout,
         Rng& rng, double bias_init = 0.0) {
    if (kernel % 2 == 0) throw ConfigError("conv kernel size must be odd");
    k = ps.create(prefix + ".k", init_fan_in<T>({kernel, kernel, cin, cout}, kernel * kernel * cin, rng));
    b = ps.create(prefix + ".b", Tensor<T>::full({cout}, (T)bias_init));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::conv2d(x, k, b); }
};

// ---- optimizer ----

// ADAM with bias correction. Frozen parameters are skipped entirely.
template <typename T>
class Adam {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void step(ParameterStore<T>& ps, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, (double)t_);
    const double bc2 = 1.0 - std::pow(beta2, (double)t_);
    for (auto& [name, e] : ps.entries()) {
      if (!e.trainable) continue;
      auto& node = *e.var;
      if (!node.has_grad()) continue;
      auto& st = state_[name];
      if (st.m.data.empty()) {
        st.m = Tensor<T>::zeros(node.value.shape);
        st.v = Tensor<T>::zeros(node.value.shape);
      }
      T* p = node.value.ptr();
      const T* g = node.grad.ptr();
      T* m = st.m.ptr();
      T* v = st.v.ptr();
      const i64 n = node.value.numel();
      for (i64 i = 0; i < n; ++i) {
        const double gi = (double)g[i];
        const double mi = beta1 * (double)m[i] + (1.0 - beta1) * gi;
        const double vi = beta2 * (double)v[i] + (1.0 - beta2) * gi * gi;
        m[i] = (T)mi;
        v[i] = (T)vi;
        p[i] -= (T)(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
      }
    }
  }

  i64 steps_taken() const { return t_; }
  void reset() {
    t_ = 0;
    state_.clear();
  }

 private:
  struct State {
    Tensor<T> m, v;
  };
  i64 t_ = 0;
  std::map<std::string, State> state_;
};

}  // namespace crossmark
