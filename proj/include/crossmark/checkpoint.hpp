#pragma once

#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "crossmark/models.hpp"
#include "crossmark/nn.hpp"
#include "crossmark/tensor.hpp"

namespace crossmark {

// Versioned binary container. Layout (little-endian host required):
//   magic "XMCK" | u32 format_version | u64 manifest_bytes | manifest JSON |
//   concatenated float32 row-major array data in manifest order.
// See docs/formats.md. Loading refuses any version mismatch.
struct ModelCheckpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::string stage;  // "stage1" | "stage2" | "stage3"
  ModelConfig config;
  std::string rng_state;
  nlohmann::json metrics;  // free-form snapshot (losses, BRR/PSNR, steps)
  std::map<std::string, Tensor<float>> arrays;
  std::map<std::string, bool> trainable;
};

void save_checkpoint(const std::string& path, const ModelCheckpoint& ckpt);
ModelCheckpoint load_checkpoint(const std::string& path);

// Copies every parameter out of the store into checkpoint arrays.
ModelCheckpoint snapshot_params(const ParameterStore<float>& ps);

// Overwrites every store parameter from the checkpoint (exact shape match
// required). Checkpoint arrays missing from the store are an error unless
// allow_unused is set (used when a stage deliberately discards a net).
void restore_params(const ModelCheckpoint& ckpt, ParameterStore<float>& ps,
                    bool allow_unused = false);

// Restores only store parameters whose names start with prefix (used when a
// later stage adopts part of an earlier checkpoint, e.g. the frozen
// embedder). Throws if the prefix matches nothing in the store.
void restore_params_prefix(const ModelCheckpoint& ckpt, ParameterStore<float>& ps,
                           const std::string& prefix);

}  // namespace crossmark
