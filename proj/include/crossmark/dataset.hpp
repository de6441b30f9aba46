#pragma once

#include <string>
#include <vector>

#include "crossmark/metrics.hpp"
#include "crossmark/rng.hpp"
#include "crossmark/tensor.hpp"

namespace crossmark {

struct DatasetSpec {
  std::string dir;
  i64 resize = 128;
  std::uint64_t shuffle_seed = 0;
  i64 train_count = 0;    // 0 = everything not held out
  i64 holdout_count = 0;  // taken after the training slice

  void validate() const {
    if (dir.empty()) throw ConfigError("dataset dir must be set");
    if (resize <= 0) throw ConfigError("dataset resize must be positive");
    if (train_count < 0 || holdout_count < 0)
      throw ConfigError("dataset split sizes must be nonnegative");
  }
};

struct IngestResult {
  std::vector<Tensor<float>> images;  // each resize x resize x 3, unit range
  std::vector<std::string> paths;     // aligned with images
  i64 skipped = 0;                    // undecodable files
};

// Loads every decodable image under spec.dir (non-recursive): sorted by
// filename, Fisher-Yates shuffled by shuffle_seed, bilinear-resized to the
// target and converted to unit range. Undecodable files are skipped with a
// count; an empty result is fatal.
IngestResult ingest_images(const DatasetSpec& spec);

struct Dataset {
  std::vector<Tensor<float>> train, holdout;
  i64 skipped = 0;
};

// ingest_images plus the train/holdout split (disjoint slices of the
// shuffled order). Fails if the directory cannot cover the requested sizes.
Dataset load_dataset(const DatasetSpec& spec);

// Image-derived watermark: bilinear resize to 8x8, 8-bit luminance,
// bit = 1 iff value >= 128. Deterministic.
WatermarkBits generate_watermark(const Tensor<float>& img);

// Uniformly random 64-bit watermark.
WatermarkBits random_watermark(Rng& rng);

}  // namespace crossmark
