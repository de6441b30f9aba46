#include "crossmark/dataset.hpp"

#include <algorithm>
#include <filesystem>

#include "crossmark/augment.hpp"
#include "crossmark/image_io.hpp"

namespace crossmark {

IngestResult ingest_images(const DatasetSpec& spec) {
  spec.validate();
  namespace fs = std::filesystem;
  if (!fs::is_directory(spec.dir)) throw IoError("dataset dir not found: " + spec.dir);
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(spec.dir))
    if (entry.is_regular_file()) paths.push_back(entry.path().string());
  std::sort(paths.begin(), paths.end());
  // Explicit Fisher-Yates so the order depends only on our own code + seed.
  Rng rng(spec.shuffle_seed);
  for (i64 i = (i64)paths.size() - 1; i > 0; --i)
    std::swap(paths[(size_t)i], paths[(size_t)rng.uniform_int(0, i)]);

  IngestResult out;
  for (const auto& p : paths) {
    Tensor<float> img;
    try {
      img = load_image(p);
    } catch (const IoError&) {
      ++out.skipped;
      continue;
    }
    out.images.push_back(resize_bilinear(img, spec.resize, spec.resize));
    out.paths.push_back(p);
  }
  if (out.images.empty())
    throw IoError("no decodable images in " + spec.dir + " (" + std::to_string(out.skipped) +
                  " skipped)");
  return out;
}

Dataset load_dataset(const DatasetSpec& spec) {
  IngestResult all = ingest_images(spec);
  const i64 n = (i64)all.images.size();
  const i64 train_n = spec.train_count > 0 ? spec.train_count : n - spec.holdout_count;
  if (train_n <= 0 || train_n + spec.holdout_count > n)
    throw ConfigError("dataset split (" + std::to_string(train_n) + " train + " +
                      std::to_string(spec.holdout_count) + " holdout) exceeds the " +
                      std::to_string(n) + " available images");
  Dataset d;
  d.skipped = all.skipped;
  d.train.assign(all.images.begin(), all.images.begin() + train_n);
  d.holdout.assign(all.images.begin() + train_n,
                   all.images.begin() + train_n + spec.holdout_count);
  return d;
}

WatermarkBits generate_watermark(const Tensor<float>& img) {
  const Tensor<float> small = resize_bilinear(img, WatermarkBits::kSide, WatermarkBits::kSide);
  const Tensor<float> lum = luminance(small);
  WatermarkBits w;
  for (i64 k = 0; k < WatermarkBits::kBits; ++k) {
    const double v = std::round(255.0 * (double)lum.data[(size_t)k]);
    w.bits[(size_t)k] = v >= 128.0 ? 1 : 0;
  }
  return w;
}

WatermarkBits random_watermark(Rng& rng) {
  WatermarkBits w;
  for (auto& b : w.bits) b = rng.bernoulli(0.5) ? 1 : 0;
  return w;
}

}  // namespace crossmark
