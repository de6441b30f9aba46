#pragma once

#include <string>
#include <vector>

#include "crossmark/metrics.hpp"
#include "crossmark/nn.hpp"

namespace crossmark {

// Architecture hyperparameters. Defaults are the full-size configuration;
// tests shrink image_size/attn_dim for tractable gradient checks.
struct ModelConfig {
  i64 image_size = 128;
  i64 image_channels = 3;
  i64 wm_size = 8;
  i64 patch_cover = 16;
  i64 patch_wm = 1;
  i64 attn_dim = 512;  // shared internal width: cross-attention, codec tokens, extractor FC
  i64 heads = 2;
  i64 tf_blocks = 4;
  i64 wm_embed_dim = 16;
  double dropout_rate = 0.20;
  std::string embedder_type = "cross_attention";  // or "conv_baseline"

  i64 cover_grid() const { return image_size / patch_cover; }
  i64 cover_tokens() const { return cover_grid() * cover_grid(); }
  i64 cover_dim() const { return patch_cover * patch_cover * image_channels; }
  i64 wm_grid() const { return wm_size / patch_wm; }
  i64 wm_tokens() const { return wm_grid() * wm_grid(); }
  i64 wm_in_dim() const { return patch_wm * patch_wm; }
  i64 fused_dim() const { return cover_dim() + wm_embed_dim; }
  i64 extract_block() const { return image_size / wm_size; }

  void validate() const {
    auto positive = [](i64 v, const char* what) {
      if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
    };
    positive(image_size, "image_size");
    positive(image_channels, "image_channels");
    positive(wm_size, "wm_size");
    positive(patch_cover, "patch_cover");
    positive(patch_wm, "patch_wm");
    positive(attn_dim, "attn_dim");
    positive(heads, "heads");
    positive(tf_blocks, "tf_blocks");
    positive(wm_embed_dim, "wm_embed_dim");
    if (image_size % patch_cover != 0)
      throw ConfigError("image_size must be divisible by patch_cover");
    if (wm_size % patch_wm != 0) throw ConfigError("wm_size must be divisible by patch_wm");
    if (cover_grid() != wm_grid())
      throw ConfigError("cover and watermark token grids must match for per-token fusion");
    if (image_size % wm_size != 0)
      throw ConfigError("image_size must be divisible by wm_size (extractor entry)");
    if (attn_dim % heads != 0) throw ConfigError("attn_dim must be divisible by heads");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw ConfigError("dropout_rate must be in [0,1)");
    if (embedder_type != "cross_attention" && embedder_type != "conv_baseline")
      throw ConfigError("embedder_type must be cross_attention or conv_baseline");
  }
};

// ---- embedder ----

// Dual cross-attention embedder. Cover and watermark are patchified, given
// positional tables, exchanged through two cross-attention passes with
// residual connections, fused per token, projected back to patch pixels and
// clamped to [0,1].
template <typename T>
struct CrossAttentionEmbedder {
  ModelConfig cfg;
  ad::Var<T> pos_cover, pos_wm;
  ChannelFC<T> wm_proj, out_fc;
  MultiHeadAttention<T> ca_cover, ca_wm;

  CrossAttentionEmbedder() = default;
  CrossAttentionEmbedder(ParameterStore<T>& ps, const std::string& prefix,
                         const ModelConfig& cfg_, Rng& rng)
      : cfg(cfg_) {
    cfg.validate();
    pos_cover = ps.create(prefix + ".pos_cover",
                          Tensor<T>::randn({cfg.cover_tokens(), cfg.cover_dim()}, rng, 0.02));
    wm_proj = ChannelFC<T>(ps, prefix + ".wm_proj", cfg.wm_in_dim(), cfg.wm_embed_dim, rng);
    pos_wm = ps.create(prefix + ".pos_wm",
                       Tensor<T>::randn({cfg.wm_tokens(), cfg.wm_embed_dim}, rng, 0.02));
    ca_cover = MultiHeadAttention<T>(ps, prefix + ".ca_cover", cfg.cover_dim(),
                                     cfg.wm_embed_dim, cfg.attn_dim, cfg.heads, cfg.cover_dim(),
                                     rng);
    ca_wm = MultiHeadAttention<T>(ps, prefix + ".ca_wm", cfg.wm_embed_dim, cfg.cover_dim(),
                                  cfg.attn_dim, cfg.heads, cfg.wm_embed_dim, rng);
    // Bias 0.5 keeps initial outputs inside the open unit interval so the
    // clamp passes gradients from the first step.
    out_fc = ChannelFC<T>(ps, prefix + ".out_fc", cfg.fused_dim(), cfg.cover_dim(), rng, 0.5);
  }

  // cover {B,S,S,C}, wm {B,w,w,1} -> marked {B,S,S,C} in [0,1].
  ad::Var<T> embed(const ad::Var<T>& cover, const ad::Var<T>& wm) const {
    check_image(cover->value, cfg.image_size, cfg.image_channels, "embed cover");
    check_image(wm->value, cfg.wm_size, 1, "embed watermark");
    auto toks_c = ad::add_table(patchify_var(cover, cfg.patch_cover), pos_cover);
    auto toks_w = ad::add_table(wm_proj(patchify_var(wm, cfg.patch_wm)), pos_wm);
    auto branch_c = ad::add(toks_c, ca_cover(toks_c, toks_w));
    auto branch_w = ad::add(toks_w, ca_wm(toks_w, toks_c));
    auto fused = out_fc(ad::concat_lastdim(branch_c, branch_w));
    auto img = unpatchify_var(fused, cfg.cover_grid(), cfg.cover_grid(), cfg.patch_cover,
                              cfg.image_channels);
    return ad::clamp01(img);
  }

  static void check_image(const Tensor<T>& t, i64 side, i64 channels, const char* what) {
    if (t.ndim() != 4 || t.shape[1] != side || t.shape[2] != side || t.shape[3] != channels)
      throw ShapeError(std::string(what) + ": expected {B," + std::to_string(side) + "," +
                       std::to_string(side) + "," + std::to_string(channels) + "}, got " +
                       t.shape_str());
  }
};

// Convolutional comparator for the embedding-fidelity ablation: watermark is
// nearest-upsampled to image size, concatenated as a fourth channel, and
// pushed through three same-padded convs.
template <typename T>
struct ConvBaselineEmbedder {
  ModelConfig cfg;
  Conv2d<T> c1, c2, c3;

  ConvBaselineEmbedder() = default;
  ConvBaselineEmbedder(ParameterStore<T>& ps, const std::string& prefix,
                       const ModelConfig& cfg_, Rng& rng)
      : cfg(cfg_) {
    cfg.validate();
    c1 = Conv2d<T>(ps, prefix + ".c1", 3, cfg.image_channels + 1, 64, rng);
    c2 = Conv2d<T>(ps, prefix + ".c2", 3, 64, 64, rng);
    c3 = Conv2d<T>(ps, prefix + ".c3", 3, 64, cfg.image_channels, rng, 0.5);
  }

  ad::Var<T> embed(const ad::Var<T>& cover, const ad::Var<T>& wm) const {
    CrossAttentionEmbedder<T>::check_image(cover->value, cfg.image_size, cfg.image_channels,
                                           "embed cover");
    CrossAttentionEmbedder<T>::check_image(wm->value, cfg.wm_size, 1, "embed watermark");
    auto wm_up = ad::upsample_nearest(wm, cfg.image_size / cfg.wm_size);
    auto x = ad::concat_lastdim(cover, wm_up);
    auto h = ad::gelu(c1(x));
    h = ad::gelu(c2(h));
    return ad::clamp01(c3(h));
  }
};

// Per-channel-normalized absolute difference map between cover and marked;
// all-zero if the images are identical.
template <typename T>
Tensor<T> embedding_residual(const Tensor<T>& cover, const Tensor<T>& marked) {
  require_same_shape(cover, marked, "embedding_residual");
  if (cover.ndim() != 3) throw ShapeError("embedding_residual expects H x W x C images");
  Tensor<T> out(cover.shape);
  for (i64 i = 0; i < out.numel(); ++i)
    out.data[(size_t)i] =
        std::abs(cover.data[(size_t)i] - marked.data[(size_t)i]);
  const i64 c = out.shape[2];
  const i64 pixels = out.numel() / c;
  for (i64 ch = 0; ch < c; ++ch) {
    T mx = T(0);
    for (i64 p = 0; p < pixels; ++p) mx = std::max(mx, out.data[(size_t)(p * c + ch)]);
    if (mx > T(0))
      for (i64 p = 0; p < pixels; ++p) out.data[(size_t)(p * c + ch)] /= mx;
  }
  return out;
}

// ---- invariant codec ----

// Affine-free final normalization for the codec stacks: per-token
// standardization with no learnable scale or shift. The invariant domain is
// trained with a distance hinge, and any learnable output scale hands that
// objective a degenerate optimum — inflate the scale to satisfy the margin
// for free (no norm at all), or shrink it to kill every gradient (a norm
// with affine). Pinning the output geometry leaves direction as the only
// thing training can move, which is the part that carries information.
template <typename T>
struct FinalNorm {
  ad::Var<T> one, zero;

  FinalNorm() = default;
  explicit FinalNorm(i64 dim)
      : one(ad::leaf(Tensor<T>::full({dim}, T(1)))),
        zero(ad::leaf(Tensor<T>::zeros({dim}))) {}

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::layer_norm(x, one, zero); }
};

// Marked image -> 64 x attn_dim invariant-domain tokens.
template <typename T>
struct Encoder {
  ModelConfig cfg;
  ChannelFC<T> in_fc;
  ad::Var<T> pos;
  std::vector<TransformerBlock<T>> blocks;
  FinalNorm<T> ln_f;

  Encoder() = default;
  Encoder(ParameterStore<T>& ps, const std::string& prefix, const ModelConfig& cfg_, Rng& rng)
      : cfg(cfg_) {
    cfg.validate();
    in_fc = ChannelFC<T>(ps, prefix + ".in_fc", cfg.cover_dim(), cfg.attn_dim, rng);
    pos = ps.create(prefix + ".pos",
                    Tensor<T>::randn({cfg.cover_tokens(), cfg.attn_dim}, rng, 0.02));
    const double gain = 1.0 / std::sqrt(2.0 * (double)cfg.tf_blocks);
    for (i64 i = 0; i < cfg.tf_blocks; ++i)
      blocks.emplace_back(ps, prefix + ".block" + std::to_string(i), cfg.attn_dim, cfg.heads,
                          rng, gain);
    ln_f = FinalNorm<T>(cfg.attn_dim);
  }

  ad::Var<T> encode(const ad::Var<T>& marked) const {
    CrossAttentionEmbedder<T>::check_image(marked->value, cfg.image_size, cfg.image_channels,
                                           "encode");
    auto toks = ad::add_table(in_fc(patchify_var(marked, cfg.patch_cover)), pos);
    for (const auto& b : blocks) toks = b(toks);
    return ln_f(toks);  // {B, 64, attn_dim}, per-token unit scale
  }
};

// Invariant-domain tokens -> image-shaped projection (unclamped; internal).
template <typename T>
struct Decoder {
  ModelConfig cfg;
  std::vector<TransformerBlock<T>> blocks;
  FinalNorm<T> ln_f;
  ChannelFC<T> out_fc;

  Decoder() = default;
  Decoder(ParameterStore<T>& ps, const std::string& prefix, const ModelConfig& cfg_, Rng& rng)
      : cfg(cfg_) {
    cfg.validate();
    const double gain = 1.0 / std::sqrt(2.0 * (double)cfg.tf_blocks);
    for (i64 i = 0; i < cfg.tf_blocks; ++i)
      blocks.emplace_back(ps, prefix + ".block" + std::to_string(i), cfg.attn_dim, cfg.heads,
                          rng, gain);
    ln_f = FinalNorm<T>(cfg.attn_dim);
    out_fc = ChannelFC<T>(ps, prefix + ".out_fc", cfg.attn_dim, cfg.cover_dim(), rng);
  }

  ad::Var<T> decode(const ad::Var<T>& id) const {
    const auto& s = id->value.shape;
    if (s.size() != 3 || s[1] != cfg.cover_tokens() || s[2] != cfg.attn_dim)
      throw ShapeError("decode: expected {B," + std::to_string(cfg.cover_tokens()) + "," +
                       std::to_string(cfg.attn_dim) + "}, got " + id->value.shape_str());
    auto toks = id;
    for (const auto& b : blocks) toks = b(toks);
    // Same final norm as the encoder (see Encoder::encode): conditions the
    // output projection's input scale regardless of what the blocks add to
    // the residual stream.
    return unpatchify_var(out_fc(ln_f(toks)), cfg.cover_grid(), cfg.cover_grid(),
                          cfg.patch_cover, cfg.image_channels);
  }
};

// ---- extractor ----

// Image-shaped input -> 8x8 watermark logit grid. Entry: lossless
// space-to-depth to the 8x8 grid plus a learned 1x1 projection to 48
// channels; then expansion convs with dropout, a channel FC, and reduction
// convs down to one channel.
template <typename T>
struct Extractor {
  ModelConfig cfg;
  Conv2d<T> in_proj, e1, e2, e3, r1, r2, r3, r4, r5;
  ChannelFC<T> mid_fc;

  Extractor() = default;
  Extractor(ParameterStore<T>& ps, const std::string& prefix, const ModelConfig& cfg_, Rng& rng)
      : cfg(cfg_) {
    cfg.validate();
    const i64 entry = cfg.extract_block() * cfg.extract_block() * cfg.image_channels;
    in_proj = Conv2d<T>(ps, prefix + ".in_proj", 1, entry, 48, rng);
    e1 = Conv2d<T>(ps, prefix + ".e1", 3, 48, 64, rng);
    e2 = Conv2d<T>(ps, prefix + ".e2", 3, 64, 128, rng);
    e3 = Conv2d<T>(ps, prefix + ".e3", 3, 128, 256, rng);
    mid_fc = ChannelFC<T>(ps, prefix + ".mid_fc", 256, cfg.attn_dim, rng);
    r1 = Conv2d<T>(ps, prefix + ".r1", 3, cfg.attn_dim, 128, rng);
    r2 = Conv2d<T>(ps, prefix + ".r2", 3, 128, 64, rng);
    r3 = Conv2d<T>(ps, prefix + ".r3", 3, 64, 32, rng);
    r4 = Conv2d<T>(ps, prefix + ".r4", 3, 32, 8, rng);
    r5 = Conv2d<T>(ps, prefix + ".r5", 3, 8, 1, rng, 0.5);
  }

  // x {B,S,S,C} -> logits {B,8,8,1}; train mode applies dropout after each
  // expansion conv, eval mode is deterministic.
  ad::Var<T> logits(const ad::Var<T>& x, bool train, Rng& rng) const {
    CrossAttentionEmbedder<T>::check_image(x->value, cfg.image_size, cfg.image_channels,
                                           "extract");
    auto h = ad::gelu(in_proj(ad::space_to_depth(x, cfg.extract_block())));
    h = ad::dropout(ad::gelu(e1(h)), cfg.dropout_rate, train, rng);
    h = ad::dropout(ad::gelu(e2(h)), cfg.dropout_rate, train, rng);
    h = ad::dropout(ad::gelu(e3(h)), cfg.dropout_rate, train, rng);
    h = ad::gelu(mid_fc(h));
    h = ad::gelu(r1(h));
    h = ad::gelu(r2(h));
    h = ad::gelu(r3(h));
    h = ad::gelu(r4(h));
    return r5(h);
  }
};

// ---- graph-side losses ----

namespace ad_loss {

// Eq. 1 over a batch: per-sample hinge, then mean.
template <typename T>
ad::Var<T> triplet(const ad::Var<T>& id_a, const ad::Var<T>& id_p, const ad::Var<T>& id_n,
                   double margin) {
  auto d_ap = ad::mse_per_sample(id_a, id_p);
  auto d_an = ad::mse_per_sample(id_a, id_n);
  return ad::mean_all(ad::relu(ad::add_const(ad::sub(d_ap, d_an), (T)margin)));
}

// Eq. 4 over a batch: sum of the three member-wise MSEs.
template <typename T>
ad::Var<T> extractor_final(const ad::Var<T>& wa, const ad::Var<T>& wp, const ad::Var<T>& wn,
                           const ad::Var<T>& wa_e, const ad::Var<T>& wp_e,
                           const ad::Var<T>& wn_e) {
  return ad::add(ad::add(ad::mse(wa, wa_e), ad::mse(wp, wp_e)), ad::mse(wn, wn_e));
}

}  // namespace ad_loss

}  // namespace crossmark
