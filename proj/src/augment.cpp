#include "crossmark/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "crossmark/image_io.hpp"

namespace crossmark {

namespace {

struct NoiseInfo {
  Noise id;
  const char* name;
  NoiseRole role;
};

constexpr std::array<NoiseInfo, 13> kNoises = {{
    {Noise::kHflip, "hflip", NoiseRole::kTrain},
    {Noise::kGaussianBlur, "gaussian_blur", NoiseRole::kTrain},
    {Noise::kSolarize, "solarize", NoiseRole::kTrain},
    {Noise::kBrightness, "brightness", NoiseRole::kTrain},
    {Noise::kContrast, "contrast", NoiseRole::kTrain},
    {Noise::kHue, "hue", NoiseRole::kTrain},
    {Noise::kSaturation, "saturation", NoiseRole::kTrain},
    {Noise::kCrop, "crop", NoiseRole::kTest},
    {Noise::kCutout, "cutout", NoiseRole::kTest},
    {Noise::kJpeg, "jpeg", NoiseRole::kTest},
    {Noise::kHistEq, "hist_eq", NoiseRole::kTest},
    {Noise::kSaltPepper, "salt_pepper", NoiseRole::kTest},
    {Noise::kGaussianNoise, "gaussian_noise", NoiseRole::kTest},
}};

const NoiseInfo& info(Noise n) {
  for (const auto& e : kNoises)
    if (e.id == n) return e;
  throw ConfigError("unknown noise id");
}

float clamp01f(double v) { return (float)std::min(std::max(v, 0.0), 1.0); }

void require_image(const Tensor<float>& img, const char* what) {
  if (img.ndim() != 3) throw ShapeError(std::string(what) + " expects H x W x C");
}

}  // namespace

NoiseRole noise_role(Noise n) { return info(n).role; }
const char* noise_name(Noise n) { return info(n).name; }

Noise parse_noise(const std::string& name) {
  if (name == "blur") return Noise::kGaussianBlur;  // CLI shorthand
  for (const auto& e : kNoises)
    if (name == e.name) return e.id;
  throw ConfigError("unknown noise '" + name + "'");
}

const std::vector<Noise>& train_noises() {
  static const std::vector<Noise> v = [] {
    std::vector<Noise> out;
    for (const auto& e : kNoises)
      if (e.role == NoiseRole::kTrain) out.push_back(e.id);
    return out;
  }();
  return v;
}

const std::vector<Noise>& test_noises() {
  static const std::vector<Noise> v = [] {
    std::vector<Noise> out;
    for (const auto& e : kNoises)
      if (e.role == NoiseRole::kTest) out.push_back(e.id);
    return out;
  }();
  return v;
}

NoiseSpec parse_noise_spec(const std::string& s) {
  const auto colon = s.find(':');
  const std::string name = s.substr(0, colon);
  const Noise n = parse_noise(name);
  double level;
  if (colon == std::string::npos) {
    if (n == Noise::kHistEq || n == Noise::kHflip)
      level = 1.0;
    else
      throw ConfigError("noise '" + name + "' requires a level, use name:level");
  } else {
    try {
      size_t pos = 0;
      level = std::stod(s.substr(colon + 1), &pos);
      if (pos != s.size() - colon - 1) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw ConfigError("bad level in noise spec '" + s + "'");
    }
  }
  check_noise_level(n, level);
  return NoiseSpec{n, level};
}

void check_noise_level(Noise n, double level) {
  auto fail = [&](const char* domain) {
    throw ConfigError(std::string(noise_name(n)) + " level " + std::to_string(level) +
                      " outside domain " + domain);
  };
  switch (n) {
    case Noise::kHflip:
      if (level != 1.0) fail("{1}");
      break;
    case Noise::kGaussianBlur:
      if (level < 0.0 || level > 4.0) fail("[0,4]");
      break;
    case Noise::kSolarize:
      if (level < 0.0 || level > 1.0) fail("[0,1]");
      break;
    case Noise::kBrightness:
    case Noise::kContrast:
      if (level <= 0.0 || level > 4.0) fail("(0,4]");
      break;
    case Noise::kSaturation:
      if (level < 0.0 || level > 4.0) fail("[0,4]");
      break;
    case Noise::kHue:
      if (level < -0.5 || level > 0.5) fail("[-0.5,0.5]");
      break;
    case Noise::kCrop:
    case Noise::kCutout:
      if (level < 0.0 || level > 0.9) fail("[0,0.9]");
      break;
    case Noise::kJpeg:
      if (level < 1.0 || level > 100.0 || level != std::floor(level)) fail("integers [1,100]");
      break;
    case Noise::kHistEq:
      break;  // parameterless
    case Noise::kSaltPepper:
      if (level < 0.0 || level > 1.0) fail("[0,1]");
      break;
    case Noise::kGaussianNoise:
      if (level < 0.0 || level > 1.0) fail("[0,1]");
      break;
  }
}

Tensor<float> luminance(const Tensor<float>& img) {
  require_image(img, "luminance");
  const i64 h = img.shape[0], w = img.shape[1], c = img.shape[2];
  if (c == 1) return img;
  if (c != 3) throw ShapeError("luminance expects 1 or 3 channels");
  Tensor<float> out({h, w, 1});
  for (i64 p = 0; p < h * w; ++p) {
    const float* px = img.ptr() + p * 3;
    out.data[(size_t)p] = 0.299f * px[0] + 0.587f * px[1] + 0.114f * px[2];
  }
  return out;
}

namespace {

Tensor<float> apply_hflip(const Tensor<float>& img) {
  const i64 h = img.shape[0], w = img.shape[1], c = img.shape[2];
  Tensor<float> out(img.shape);
  for (i64 y = 0; y < h; ++y)
    for (i64 x = 0; x < w; ++x)
      std::copy_n(img.ptr() + (y * w + (w - 1 - x)) * c, c, out.ptr() + (y * w + x) * c);
  return out;
}

Tensor<float> apply_blur(const Tensor<float>& img, double sigma) {
  const i64 h = img.shape[0], w = img.shape[1], c = img.shape[2];
  const i64 radius = (i64)std::ceil(4.0 * sigma);
  std::vector<double> kernel((size_t)(2 * radius + 1));
  double sum = 0;
  for (i64 i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (double)(i * i) / (sigma * sigma));
    kernel[(size_t)(i + radius)] = v;
    sum += v;
  }
  for (double& v : kernel) v /= sum;
  auto clamp_idx = [](i64 v, i64 hi) { return std::min(std::max(v, (i64)0), hi); };
  // Horizontal pass then vertical, replicate-padded, double accumulators.
  Tensor<float> tmp(img.shape);
  for (i64 y = 0; y < h; ++y)
    for (i64 x = 0; x < w; ++x)
      for (i64 ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (i64 k = -radius; k <= radius; ++k)
          acc += kernel[(size_t)(k + radius)] *
                 (double)img.data[(size_t)((y * w + clamp_idx(x + k, w - 1)) * c + ch)];
        tmp.data[(size_t)((y * w + x) * c + ch)] = (float)acc;
      }
  Tensor<float> out(img.shape);
  for (i64 y = 0; y < h; ++y)
    for (i64 x = 0; x < w; ++x)
      for (i64 ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (i64 k = -radius; k <= radius; ++k)
          acc += kernel[(size_t)(k + radius)] *
                 (double)tmp.data[(size_t)((clamp_idx(y + k, h - 1) * w + x) * c + ch)];
        out.data[(size_t)((y * w + x) * c + ch)] = clamp01f(acc);
      }
  return out;
}

Tensor<float> apply_solarize(const Tensor<float>& img, double threshold) {
  Tensor<float> out = img;
  for (float& v : out.data)
    if ((double)v >= threshold) v = 1.0f - v;
  return out;
}

Tensor<float> apply_brightness(const Tensor<float>& img, double factor) {
  Tensor<float> out = img;
  for (float& v : out.data) v = clamp01f(factor * (double)v);
  return out;
}

Tensor<float> apply_contrast(const Tensor<float>& img, double factor) {
  const Tensor<float> lum = luminance(img);
  double mean = 0;
  for (float v : lum.data) mean += (double)v;
  mean /= (double)lum.numel();
  Tensor<float> out = img;
  for (float& v : out.data) v = clamp01f(mean + factor * ((double)v - mean));
  return out;
}

Tensor<float> apply_saturation(const Tensor<float>& img, double factor) {
  const i64 h = img.shape[0], w = img.shape[1], c = img.shape[2];
  if (c != 3) throw ShapeError("saturation expects 3 channels");
  const Tensor<float> lum = luminance(img);
  Tensor<float> out(img.shape);
  for (i64 p = 0; p < h * w; ++p) {
    const double g = (double)lum.data[(size_t)p];
    for (i64 ch = 0; ch < 3; ++ch)
      out.data[(size_t)(p * 3 + ch)] =
          clamp01f(g + factor * ((double)img.data[(size_t)(p * 3 + ch)] - g));
  }
  return out;
}

void rgb_to_hsv(double r, double g, double b, double& hh, double& ss, double& vv) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  vv = mx;
  ss = mx == 0 ? 0 : d / mx;
  if (d == 0) {
    hh = 0;
    return;
  }
  if (mx == r)
    hh = (g - b) / d;
  else if (mx == g)
    hh = 2.0 + (b - r) / d;
  else
    hh = 4.0 + (r - g) / d;
  hh /= 6.0;
  if (hh < 0) hh += 1.0;
}

void hsv_to_rgb(double hh, double ss, double vv, double& r, double& g, double& b) {
  if (ss == 0) {
    r = g = b = vv;
    return;
  }
  hh = hh - std::floor(hh);
  const double h6 = hh * 6.0;
  const int i = std::min(5, (int)h6);
  const double f = h6 - (double)i;
  const double p = vv * (1.0 - ss);
  const double q = vv * (1.0 - ss * f);
  const double t = vv * (1.0 - ss * (1.0 - f));
  switch (i) {
    case 0: r = vv; g = t; b = p; break;
    case 1: r = q; g = vv; b = p; break;
    case 2: r = p; g = vv; b = t; break;
    case 3: r = p; g = q; b = vv; break;
    case 4: r = t; g = p; b = vv; break;
    default: r = vv; g = p; b = q; break;
  }
}

Tensor<float> apply_hue(const Tensor<float>& img, double turns) {
  const i64 pixels = img.shape[0] * img.shape[1];
  if (img.shape[2] != 3) throw ShapeError("hue expects 3 channels");
  Tensor<float> out(img.shape);
  for (i64 p = 0; p < pixels; ++p) {
    const float* px = img.ptr() + p * 3;
    double hh, ss, vv;
    rgb_to_hsv(px[0], px[1], px[2], hh, ss, vv);
    double r, g, b;
    hsv_to_rgb(hh + turns, ss, vv, r, g, b);
    out.data[(size_t)(p * 3 + 0)] = clamp01f(r);
    out.data[(size_t)(p * 3 + 1)] = clamp01f(g);
    out.data[(size_t)(p * 3 + 2)] = clamp01f(b);
  }
  return out;
}

Tensor<float> apply_crop(const Tensor<float>& img, double level) {
  const i64 h = img.shape[0], w = img.shape[1], c = img.shape[2];
  const i64 kh = std::max<i64>(1, (i64)std::round((1.0 - level) * (double)h));
  const i64 kw = std::max<i64>(1, (i64)std::round((1.0 - level) * (double)w));
  const i64 y0 = (h - kh) / 2, x0 = (w - kw) / 2;
  Tensor<float> crop({kh, kw, c});
  for (i64 y = 0; y < kh; ++y)
    std::copy_n(img.ptr() + ((y0 + y) * w + x0) * c, kw * c, crop.ptr() + y * kw * c);
  return resize_bilinear(crop, h, w);
}

Tensor<float> apply_cutout(const Tensor<float>& img, double level, Rng& rng) {
  const i64 h = img.shape[0], w = img.shape[1], c = img.shape[2];
  i64 side = (i64)std::round(std::sqrt(level * (double)(h * w)));
  side = std::min(side, std::min(h, w));
  if (side <= 0) return img;
  const i64 y0 = rng.uniform_int(0, h - side);
  const i64 x0 = rng.uniform_int(0, w - side);
  Tensor<float> out = img;
  for (i64 y = y0; y < y0 + side; ++y)
    std::fill_n(out.ptr() + (y * w + x0) * c, side * c, 0.0f);
  return out;
}

Tensor<float> apply_hist_eq(const Tensor<float>& img) {
  // Classic CDF equalization on the 8-bit luminance; chroma scaled along.
  const i64 pixels = img.shape[0] * img.shape[1];
  const Tensor<float> lum = luminance(img);
  std::array<i64, 256> hist{};
  std::vector<int> levels((size_t)pixels);
  for (i64 p = 0; p < pixels; ++p) {
    int v = (int)std::round(255.0 * (double)lum.data[(size_t)p]);
    v = std::min(std::max(v, 0), 255);
    levels[(size_t)p] = v;
    ++hist[(size_t)v];
  }
  std::array<double, 256> map{};
  i64 cum = 0, cdf_min = 0;
  bool seen = false;
  for (int v = 0; v < 256; ++v) {
    cum += hist[(size_t)v];
    if (!seen && hist[(size_t)v] > 0) {
      cdf_min = cum;
      seen = true;
    }
    map[(size_t)v] = cum;
  }
  const double denom = (double)(pixels - cdf_min);
  for (int v = 0; v < 256; ++v)
    map[(size_t)v] =
        denom > 0 ? ((double)map[(size_t)v] - (double)cdf_min) / denom : (double)v / 255.0;
  const i64 c = img.shape[2];
  Tensor<float> out(img.shape);
  for (i64 p = 0; p < pixels; ++p) {
    const double y_old = (double)lum.data[(size_t)p];
    const double y_new = map[(size_t)levels[(size_t)p]];
    if (y_old <= 1e-6) {
      for (i64 ch = 0; ch < c; ++ch) out.data[(size_t)(p * c + ch)] = (float)y_new;
    } else {
      const double s = y_new / y_old;
      for (i64 ch = 0; ch < c; ++ch)
        out.data[(size_t)(p * c + ch)] = clamp01f(s * (double)img.data[(size_t)(p * c + ch)]);
    }
  }
  return out;
}

Tensor<float> apply_salt_pepper(const Tensor<float>& img, double level, Rng& rng) {
  const i64 pixels = img.shape[0] * img.shape[1];
  const i64 c = img.shape[2];
  Tensor<float> out = img;
  for (i64 p = 0; p < pixels; ++p) {
    const double u = rng.uniform();
    if (u < level / 2.0)
      std::fill_n(out.ptr() + p * c, c, 0.0f);
    else if (u < level)
      std::fill_n(out.ptr() + p * c, c, 1.0f);
  }
  return out;
}

Tensor<float> apply_gaussian_noise(const Tensor<float>& img, double sigma, Rng& rng) {
  Tensor<float> out = img;
  for (float& v : out.data) v = clamp01f((double)v + rng.normal(0.0, sigma));
  return out;
}

}  // namespace

Tensor<float> apply_noise(const Tensor<float>& img, const NoiseSpec& spec, Rng& rng) {
  require_image(img, "apply_noise");
  check_noise_level(spec.name, spec.level);
  const double lv = spec.level;
  switch (spec.name) {
    case Noise::kHflip:
      return apply_hflip(img);
    case Noise::kGaussianBlur:
      return lv == 0.0 ? img : apply_blur(img, lv);
    case Noise::kSolarize:
      return apply_solarize(img, lv);
    case Noise::kBrightness:
      return lv == 1.0 ? img : apply_brightness(img, lv);
    case Noise::kContrast:
      return lv == 1.0 ? img : apply_contrast(img, lv);
    case Noise::kHue:
      return lv == 0.0 ? img : apply_hue(img, lv);
    case Noise::kSaturation:
      return lv == 1.0 ? img : apply_saturation(img, lv);
    case Noise::kCrop:
      return lv == 0.0 ? img : apply_crop(img, lv);
    case Noise::kCutout:
      return lv == 0.0 ? img : apply_cutout(img, lv, rng);
    case Noise::kJpeg:
      return jpeg_roundtrip(img, (int)lv);
    case Noise::kHistEq:
      return apply_hist_eq(img);
    case Noise::kSaltPepper:
      return lv == 0.0 ? img : apply_salt_pepper(img, lv, rng);
    case Noise::kGaussianNoise:
      return lv == 0.0 ? img : apply_gaussian_noise(img, lv, rng);
  }
  throw ConfigError("unknown noise id");
}

CompoundAugmentConfig CompoundAugmentConfig::defaults() {
  CompoundAugmentConfig cfg;
  for (Noise n : train_noises()) cfg.include_prob[n] = 0.5;
  cfg.ranges[Noise::kHflip] = {1.0, 1.0};
  cfg.ranges[Noise::kGaussianBlur] = {0.1, 2.0};
  cfg.ranges[Noise::kSolarize] = {0.25, 0.75};
  cfg.ranges[Noise::kBrightness] = {0.5, 2.0};
  cfg.ranges[Noise::kContrast] = {0.5, 2.0};
  cfg.ranges[Noise::kHue] = {-0.25, 0.25};
  cfg.ranges[Noise::kSaturation] = {0.5, 2.0};
  return cfg;
}

void CompoundAugmentConfig::validate() const {
  for (const auto& [n, p] : include_prob) {
    if (noise_role(n) != NoiseRole::kTrain)
      throw ConfigError(std::string("test-role noise '") + noise_name(n) +
                        "' is not permitted in the training pipeline");
    if (p < 0.0 || p > 1.0) throw ConfigError("inclusion probability must be in [0,1]");
  }
  for (const auto& [n, r] : ranges) {
    if (noise_role(n) != NoiseRole::kTrain)
      throw ConfigError(std::string("test-role noise '") + noise_name(n) +
                        "' is not permitted in the training pipeline");
    if (r.lo > r.hi) throw ConfigError("level range lo > hi");
    check_noise_level(n, r.lo);
    check_noise_level(n, r.hi);
  }
}

Tensor<float> compound_augment(const Tensor<float>& img, const CompoundAugmentConfig& cfg,
                               Rng& rng) {
  cfg.validate();
  Tensor<float> out = img;
  for (Noise n : train_noises()) {
    const auto pit = cfg.include_prob.find(n);
    const double p = pit == cfg.include_prob.end() ? 0.0 : pit->second;
    if (p == 0.0 || !rng.bernoulli(p)) continue;
    const auto rit = cfg.ranges.find(n);
    if (rit == cfg.ranges.end())
      throw ConfigError(std::string("no level range configured for '") + noise_name(n) + "'");
    const double level = rit->second.lo == rit->second.hi
                             ? rit->second.lo
                             : rng.uniform(rit->second.lo, rit->second.hi);
    out = apply_noise(out, NoiseSpec{n, level}, rng);
  }
  return out;
}

std::vector<double> attack_sweep_levels(Noise n) {
  switch (n) {
    case Noise::kHflip: return {1.0};
    case Noise::kGaussianBlur: return {0.5, 1.0, 2.0};
    case Noise::kSolarize: return {0.75, 0.5, 0.25};
    case Noise::kBrightness: return {1.25, 1.5, 2.0};
    case Noise::kContrast: return {1.25, 1.5, 2.0};
    case Noise::kHue: return {0.1, 0.2, 0.25};
    case Noise::kSaturation: return {1.25, 1.5, 2.0};
    case Noise::kCrop: return {0.1, 0.25, 0.5};
    case Noise::kCutout: return {0.1, 0.2, 0.4};
    case Noise::kJpeg: return {90.0, 50.0, 10.0};
    case Noise::kHistEq: return {1.0};
    case Noise::kSaltPepper: return {0.01, 0.05, 0.1};
    case Noise::kGaussianNoise: return {0.02, 0.06, 0.1};
  }
  throw ConfigError("unknown noise id");
}

}  // namespace crossmark
