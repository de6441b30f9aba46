#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "crossmark/tensor.hpp"

namespace crossmark {

// ---- watermark ----

// 8x8 binary grid, row-major. Wire format: 16 hex digits, row-major,
// MSB-first (bit (r,c) sits at position 63 - (8r + c) of the 64-bit value).
struct WatermarkBits {
  static constexpr i64 kSide = 8;
  static constexpr i64 kBits = 64;

  std::array<std::uint8_t, kBits> bits{};

  std::uint8_t& at(i64 r, i64 c) { return bits[(size_t)(r * kSide + c)]; }
  std::uint8_t at(i64 r, i64 c) const { return bits[(size_t)(r * kSide + c)]; }

  static WatermarkBits from_hex(const std::string& s) {
    if (s.size() != 16) throw ConfigError("watermark hex must be exactly 16 digits, got '" + s + "'");
    std::uint64_t v = 0;
    for (char ch : s) {
      int d;
      if (ch >= '0' && ch <= '9') d = ch - '0';
      else if (ch >= 'a' && ch <= 'f') d = ch - 'a' + 10;
      else if (ch >= 'A' && ch <= 'F') d = ch - 'A' + 10;
      else throw ConfigError(std::string("invalid hex digit '") + ch + "' in watermark");
      v = (v << 4) | (std::uint64_t)d;
    }
    WatermarkBits w;
    for (i64 k = 0; k < kBits; ++k) w.bits[(size_t)k] = (std::uint8_t)((v >> (63 - k)) & 1u);
    return w;
  }

  std::string to_hex() const {
    std::uint64_t v = 0;
    for (i64 k = 0; k < kBits; ++k)
      if (bits[(size_t)k]) v |= (std::uint64_t)1 << (63 - k);
    static const char* digits = "0123456789ABCDEF";
    std::string s(16, '0');
    for (int i = 0; i < 16; ++i) s[(size_t)i] = digits[(v >> (60 - 4 * i)) & 0xF];
    return s;
  }

  // Exactly an 8x8 grid, optionally with a trailing singleton channel.
  template <typename T>
  static bool is_grid_shape(const Tensor<T>& t) {
    if (t.ndim() == 2) return t.shape[0] == kSide && t.shape[1] == kSide;
    if (t.ndim() == 3) return t.shape[0] == kSide && t.shape[1] == kSide && t.shape[2] == 1;
    return false;
  }

  // Strict conversion: every cell must be exactly 0 or 1.
  template <typename T>
  static WatermarkBits from_tensor(const Tensor<T>& t) {
    if (!is_grid_shape(t))
      throw ShapeError("watermark tensor must be 8x8 or 8x8x1, got " + t.shape_str());
    WatermarkBits w;
    for (i64 k = 0; k < kBits; ++k) {
      const T v = t.data[(size_t)k];
      if (v != T(0) && v != T(1)) throw ConfigError("watermark tensor cell is not binary");
      w.bits[(size_t)k] = (std::uint8_t)v;
    }
    return w;
  }

  // Per-cell threshold of a real-valued 8x8(x1) logit grid.
  template <typename T>
  static WatermarkBits threshold_logits(const Tensor<T>& t, double thr = 0.5) {
    if (!is_grid_shape(t))
      throw ShapeError("logit grid must be 8x8 or 8x8x1, got " + t.shape_str());
    WatermarkBits w;
    for (i64 k = 0; k < kBits; ++k)
      w.bits[(size_t)k] = (double)t.data[(size_t)k] >= thr ? 1 : 0;
    return w;
  }

  template <typename T = float>
  Tensor<T> to_tensor() const {
    Tensor<T> t({kSide, kSide, 1});
    for (i64 k = 0; k < kBits; ++k) t.data[(size_t)k] = (T)bits[(size_t)k];
    return t;
  }

  WatermarkBits complement() const {
    WatermarkBits w;
    for (i64 k = 0; k < kBits; ++k) {
      if (bits[(size_t)k] > 1) throw ConfigError("complement: non-binary watermark");
      w.bits[(size_t)k] = (std::uint8_t)(1 - bits[(size_t)k]);
    }
    return w;
  }

  bool operator==(const WatermarkBits& o) const { return bits == o.bits; }
};

// ---- metrics ----

template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mse");
  double acc = 0;
  for (i64 i = 0; i < a.numel(); ++i) {
    const double d = (double)a.data[(size_t)i] - (double)b.data[(size_t)i];
    acc += d * d;
  }
  return acc / (double)a.numel();
}

// MSE between the 8-bit quantizations round(255*x) of two unit-range images.
template <typename T>
double mse_8bit(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mse_8bit");
  double acc = 0;
  for (i64 i = 0; i < a.numel(); ++i) {
    const double d = std::round(255.0 * (double)a.data[(size_t)i]) -
                     std::round(255.0 * (double)b.data[(size_t)i]);
    acc += d * d;
  }
  return acc / (double)a.numel();
}

// 8-bit PSNR in dB; identical quantized images give +inf.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  const double m = mse_8bit(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / m);
}

// Bit recovery rate in percent: 100 * (# equal cells) / 64.
inline double brr(const WatermarkBits& w, const WatermarkBits& w2) {
  i64 eq = 0;
  for (i64 k = 0; k < WatermarkBits::kBits; ++k) {
    if (w.bits[(size_t)k] > 1 || w2.bits[(size_t)k] > 1)
      throw ConfigError("brr: non-binary watermark input");
    eq += w.bits[(size_t)k] == w2.bits[(size_t)k];
  }
  return 100.0 * (double)eq / (double)WatermarkBits::kBits;
}

// ---- losses (plain, non-graph; the training graph mirrors these) ----

// Eq. 2: embedding fidelity.
template <typename T>
double embedder_loss(const Tensor<T>& cover, const Tensor<T>& marked) {
  return mse(cover, marked);
}

// Eq. 3: stage-1 extraction loss over the 64 cells.
template <typename T>
double extractor_pretrain_loss(const Tensor<T>& wm, const Tensor<T>& extracted) {
  if (wm.numel() != WatermarkBits::kBits || extracted.numel() != WatermarkBits::kBits)
    throw ShapeError("extractor_pretrain_loss expects 8x8 grids");
  return mse(wm, extracted);
}

// Eq. 1: triplet hinge on invariant-domain distances.
template <typename T>
double triplet_loss(const Tensor<T>& id_a, const Tensor<T>& id_p, const Tensor<T>& id_n,
                    double margin) {
  if (margin < 0) throw ConfigError("triplet margin must be nonnegative");
  const double v = mse(id_a, id_p) - mse(id_a, id_n) + margin;
  return v > 0 ? v : 0;
}

// Eq. 4: sum of the three per-member watermark MSEs.
template <typename T>
double extractor_final_loss(const Tensor<T>& wa, const Tensor<T>& wp, const Tensor<T>& wn,
                            const Tensor<T>& wa_e, const Tensor<T>& wp_e,
                            const Tensor<T>& wn_e) {
  return extractor_pretrain_loss(wa, wa_e) + extractor_pretrain_loss(wp, wp_e) +
         extractor_pretrain_loss(wn, wn_e);
}

}  // namespace crossmark
