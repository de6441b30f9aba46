#include "crossmark/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "crossmark/config.hpp"

namespace crossmark {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts are unsupported");

namespace {

constexpr char kMagic[4] = {'X', 'M', 'C', 'K'};

void write_exact(std::ofstream& f, const void* data, size_t size) {
  f.write(reinterpret_cast<const char*>(data), (std::streamsize)size);
  if (!f) throw IoError("checkpoint write failed");
}

void read_exact(std::ifstream& f, void* data, size_t size, const std::string& path) {
  f.read(reinterpret_cast<char*>(data), (std::streamsize)size);
  if ((size_t)f.gcount() != size) throw CheckpointError("truncated checkpoint: " + path);
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelCheckpoint& ckpt) {
  if (ckpt.stage != "stage1" && ckpt.stage != "stage2" && ckpt.stage != "stage3")
    throw CheckpointError("invalid stage tag '" + ckpt.stage + "'");
  nlohmann::json manifest;
  manifest["format_version"] = ModelCheckpoint::kFormatVersion;
  manifest["stage"] = ckpt.stage;
  manifest["model_config"] = ckpt.config;
  manifest["rng_state"] = ckpt.rng_state;
  manifest["metrics"] = ckpt.metrics;
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& [name, tensor] : ckpt.arrays) {
    const auto it = ckpt.trainable.find(name);
    arrays.push_back({{"name", name},
                      {"shape", tensor.shape},
                      {"trainable", it == ckpt.trainable.end() ? true : it->second}});
  }
  manifest["arrays"] = std::move(arrays);
  const std::string m = manifest.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  write_exact(f, kMagic, 4);
  const std::uint32_t version = ModelCheckpoint::kFormatVersion;
  write_exact(f, &version, 4);
  const std::uint64_t mlen = m.size();
  write_exact(f, &mlen, 8);
  write_exact(f, m.data(), m.size());
  for (const auto& [name, tensor] : ckpt.arrays)
    write_exact(f, tensor.ptr(), (size_t)tensor.numel() * sizeof(float));
  f.flush();
  if (!f) throw IoError("checkpoint flush failed for " + path);
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint not found: " + path);
  char magic[4];
  read_exact(f, magic, 4, path);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError("not a checkpoint file: " + path);
  std::uint32_t version = 0;
  read_exact(f, &version, 4, path);
  if (version != ModelCheckpoint::kFormatVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(version) +
                          " unsupported (expected " +
                          std::to_string(ModelCheckpoint::kFormatVersion) + "): " + path);
  std::uint64_t mlen = 0;
  read_exact(f, &mlen, 8, path);
  std::string mstr((size_t)mlen, '\0');
  read_exact(f, mstr.data(), (size_t)mlen, path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mstr);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint manifest in " + path + ": " + e.what());
  }

  ModelCheckpoint ckpt;
  try {
    ckpt.stage = manifest.at("stage").get<std::string>();
    ckpt.config = manifest.at("model_config").get<ModelConfig>();
    ckpt.rng_state = manifest.at("rng_state").get<std::string>();
    ckpt.metrics = manifest.at("metrics");
    for (const auto& entry : manifest.at("arrays")) {
      const std::string name = entry.at("name").get<std::string>();
      const std::vector<i64> shape = entry.at("shape").get<std::vector<i64>>();
      Tensor<float> t(shape);
      read_exact(f, t.ptr(), (size_t)t.numel() * sizeof(float), path);
      ckpt.trainable[name] = entry.at("trainable").get<bool>();
      ckpt.arrays.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint manifest in " + path + ": " + e.what());
  }
  return ckpt;
}

ModelCheckpoint snapshot_params(const ParameterStore<float>& ps) {
  ModelCheckpoint ckpt;
  for (const auto& [name, entry] : ps.entries()) {
    ckpt.arrays.emplace(name, entry.var->value);
    ckpt.trainable[name] = entry.trainable;
  }
  return ckpt;
}

void restore_params(const ModelCheckpoint& ckpt, ParameterStore<float>& ps, bool allow_unused) {
  for (auto& [name, entry] : ps.entries()) {
    const auto it = ckpt.arrays.find(name);
    if (it == ckpt.arrays.end())
      throw CheckpointError("checkpoint is missing parameter '" + name + "'");
    if (it->second.shape != entry.var->value.shape)
      throw CheckpointError("checkpoint shape mismatch for '" + name + "': " +
                            it->second.shape_str() + " vs " + entry.var->value.shape_str());
    entry.var->value = it->second;
  }
  if (!allow_unused)
    for (const auto& [name, tensor] : ckpt.arrays)
      if (!ps.has(name)) throw CheckpointError("checkpoint has unexpected parameter '" + name + "'");
}

void restore_params_prefix(const ModelCheckpoint& ckpt, ParameterStore<float>& ps,
                           const std::string& prefix) {
  i64 restored = 0;
  for (auto& [name, entry] : ps.entries()) {
    if (name.rfind(prefix, 0) != 0) continue;
    const auto it = ckpt.arrays.find(name);
    if (it == ckpt.arrays.end())
      throw CheckpointError("checkpoint is missing parameter '" + name + "'");
    if (it->second.shape != entry.var->value.shape)
      throw CheckpointError("checkpoint shape mismatch for '" + name + "': " +
                            it->second.shape_str() + " vs " + entry.var->value.shape_str());
    entry.var->value = it->second;
    ++restored;
  }
  if (restored == 0)
    throw CheckpointError("no parameters under prefix '" + prefix + "' to restore");
}

}  // namespace crossmark
