#pragma once

#include <map>
#include <string>
#include <vector>

#include "crossmark/rng.hpp"
#include "crossmark/tensor.hpp"

namespace crossmark {

// The thirteen noises, listed in Table-I order: first the seven training
// noises, then the six testing attacks. The split is structural — training
// pipelines reject test-role entries at validation time.
enum class Noise {
  kHflip,
  kGaussianBlur,
  kSolarize,
  kBrightness,
  kContrast,
  kHue,
  kSaturation,
  kCrop,
  kCutout,
  kJpeg,
  kHistEq,
  kSaltPepper,
  kGaussianNoise,
};

enum class NoiseRole { kTrain, kTest };

NoiseRole noise_role(Noise n);
const char* noise_name(Noise n);
Noise parse_noise(const std::string& name);  // ConfigError on unknown
const std::vector<Noise>& train_noises();    // Table-I order
const std::vector<Noise>& test_noises();     // Table-I order

struct NoiseSpec {
  Noise name;
  double level;
};

// Parses "name:level" ("hist_eq" and "hflip" may omit the level).
NoiseSpec parse_noise_spec(const std::string& s);

// Throws ConfigError when level is outside the noise's documented domain:
//   hflip {1}; gaussian_blur sigma [0,4]; solarize threshold [0,1];
//   brightness/contrast factor (0,4]; saturation factor [0,4];
//   hue turn fraction [-0.5,0.5]; crop/cutout fraction [0,0.9];
//   jpeg integer quality [1,100]; hist_eq (no knob, level ignored);
//   salt_pepper probability [0,1]; gaussian_noise sigma [0,1].
void check_noise_level(Noise n, double level);

// Applies one noise. Identity levels (factor 1, sigma 0, fraction 0)
// reproduce the input bit-exactly; jpeg is inherently lossy. Only cutout,
// salt_pepper and gaussian_noise consume rng. Output stays in [0,1].
Tensor<float> apply_noise(const Tensor<float>& img, const NoiseSpec& spec, Rng& rng);

struct LevelRange {
  double lo, hi;
};

// Stage-2 compound pipeline configuration: per-noise inclusion probability
// and level range, training noises only.
struct CompoundAugmentConfig {
  std::map<Noise, double> include_prob;
  std::map<Noise, LevelRange> ranges;

  static CompoundAugmentConfig defaults();
  void validate() const;  // test-role entry or bad prob/range -> ConfigError
};

// Iterates the seven training noises in Table-I order; each is included by
// an independent Bernoulli draw and applied at a level drawn uniformly from
// its range. Fully determined by (img, cfg, rng seed).
Tensor<float> compound_augment(const Tensor<float>& img, const CompoundAugmentConfig& cfg,
                               Rng& rng);

// Canonical escalating-severity level list per noise (for jpeg, severity
// rises as quality falls, so the list descends numerically). Parameterless
// attacks (hist_eq, hflip) get a single level.
std::vector<double> attack_sweep_levels(Noise n);

// BT.601 luminance, {H,W,C} -> {H,W,1}; 1-channel input passes through.
Tensor<float> luminance(const Tensor<float>& img);

}  // namespace crossmark
