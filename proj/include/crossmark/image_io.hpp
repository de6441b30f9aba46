#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crossmark/tensor.hpp"

namespace crossmark {

// All images cross this boundary as H x W x 3 tensors in [0,1]; 8-bit
// conversion is round(255*x) with clamp on write and /255 on read.

// Decodes a PNG or JPEG file (sniffed by magic bytes) to {H,W,3}.
// Grayscale sources are replicated to three channels by the codec.
Tensor<float> load_image(const std::string& path);

void save_png(const std::string& path, const Tensor<float>& img);
void save_jpeg(const std::string& path, const Tensor<float>& img, int quality);

// In-memory encode/decode round-trip through the real JPEG codec; the
// evaluation-time jpeg attack. quality in [1,100].
Tensor<float> jpeg_roundtrip(const Tensor<float>& img, int quality);

// Bilinear resample with half-pixel-center sampling, any H x W x C input.
Tensor<float> resize_bilinear(const Tensor<float>& img, i64 out_h, i64 out_w);

std::vector<std::uint8_t> to_u8(const Tensor<float>& img);
Tensor<float> from_u8(const std::uint8_t* data, i64 h, i64 w, i64 c);

}  // namespace crossmark
