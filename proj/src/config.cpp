#include "crossmark/config.hpp"

#include <fstream>
#include <set>

namespace crossmark {

namespace {

// Wraps a JSON object for strict field-by-field consumption; finish() throws
// on any key the caller never asked for, so config typos fail loudly.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;  // keep the default already in `out`
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  nlohmann::json section(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return nlohmann::json::object();
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown key '" + where_ + "." + key + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"image_channels", c.image_channels},
                     {"wm_size", c.wm_size},
                     {"patch_cover", c.patch_cover},
                     {"patch_wm", c.patch_wm},
                     {"attn_dim", c.attn_dim},
                     {"heads", c.heads},
                     {"tf_blocks", c.tf_blocks},
                     {"wm_embed_dim", c.wm_embed_dim},
                     {"dropout_rate", c.dropout_rate},
                     {"embedder_type", c.embedder_type}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  StrictObject o(j, "model");
  o.get("image_size", c.image_size);
  o.get("image_channels", c.image_channels);
  o.get("wm_size", c.wm_size);
  o.get("patch_cover", c.patch_cover);
  o.get("patch_wm", c.patch_wm);
  o.get("attn_dim", c.attn_dim);
  o.get("heads", c.heads);
  o.get("tf_blocks", c.tf_blocks);
  o.get("wm_embed_dim", c.wm_embed_dim);
  o.get("dropout_rate", c.dropout_rate);
  o.get("embedder_type", c.embedder_type);
  o.finish();
  c.validate();
}

void to_json(nlohmann::json& j, const TrainingConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"lr_decay", c.lr_decay},
                     {"stage1_lr", c.stage1_lr},
                     {"stage2_lr", c.stage2_lr},
                     {"stage3_lr", c.stage3_lr},
                     {"epoch_steps", c.epoch_steps},
                     {"batch_size", c.batch_size},
                     {"stage1_steps", c.stage1_steps},
                     {"stage2_steps", c.stage2_steps},
                     {"stage3_steps", c.stage3_steps},
                     {"margin", c.margin},
                     {"lambda", c.lambda},
                     {"seed", c.seed},
                     {"wm_source", c.wm_source},
                     {"emb_weight", c.emb_weight},
                     {"log_every", c.log_every},
                     {"check_every", c.check_every},
                     {"stage1_target_brr", c.stage1_target_brr},
                     {"stage1_target_psnr", c.stage1_target_psnr},
                     {"stage2_target_loss", c.stage2_target_loss},
                     {"stage3_target_brr", c.stage3_target_brr},
                     {"ablate_steps", c.ablate_steps}};
}

void from_json(const nlohmann::json& j, TrainingConfig& c) {
  StrictObject o(j, "training");
  o.get("lr", c.lr);
  o.get("lr_decay", c.lr_decay);
  o.get("stage1_lr", c.stage1_lr);
  o.get("stage2_lr", c.stage2_lr);
  o.get("stage3_lr", c.stage3_lr);
  o.get("epoch_steps", c.epoch_steps);
  o.get("batch_size", c.batch_size);
  o.get("stage1_steps", c.stage1_steps);
  o.get("stage2_steps", c.stage2_steps);
  o.get("stage3_steps", c.stage3_steps);
  o.get("margin", c.margin);
  o.get("lambda", c.lambda);
  o.get("seed", c.seed);
  o.get("wm_source", c.wm_source);
  o.get("emb_weight", c.emb_weight);
  o.get("log_every", c.log_every);
  o.get("check_every", c.check_every);
  o.get("stage1_target_brr", c.stage1_target_brr);
  o.get("stage1_target_psnr", c.stage1_target_psnr);
  o.get("stage2_target_loss", c.stage2_target_loss);
  o.get("stage3_target_brr", c.stage3_target_brr);
  o.get("ablate_steps", c.ablate_steps);
  o.finish();
  c.validate();
}

void to_json(nlohmann::json& j, const CompoundAugmentConfig& c) {
  nlohmann::json probs = nlohmann::json::object();
  for (const auto& [n, p] : c.include_prob) probs[noise_name(n)] = p;
  nlohmann::json ranges = nlohmann::json::object();
  for (const auto& [n, r] : c.ranges) ranges[noise_name(n)] = {r.lo, r.hi};
  j = nlohmann::json{{"include_prob", probs}, {"ranges", ranges}};
}

void from_json(const nlohmann::json& j, CompoundAugmentConfig& c) {
  c = CompoundAugmentConfig::defaults();
  StrictObject o(j, "augment");
  const nlohmann::json probs = o.section("include_prob");
  if (!probs.is_object()) throw ConfigError("augment.include_prob must be an object");
  for (const auto& [key, value] : probs.items()) {
    if (!value.is_number()) throw ConfigError("augment.include_prob." + key + " must be a number");
    c.include_prob[parse_noise(key)] = value.get<double>();
  }
  const nlohmann::json ranges = o.section("ranges");
  if (!ranges.is_object()) throw ConfigError("augment.ranges must be an object");
  for (const auto& [key, value] : ranges.items()) {
    if (!value.is_array() || value.size() != 2)
      throw ConfigError("augment.ranges." + key + " must be [lo, hi]");
    c.ranges[parse_noise(key)] = LevelRange{value[0].get<double>(), value[1].get<double>()};
  }
  o.finish();
  c.validate();
}

void to_json(nlohmann::json& j, const DatasetSpec& c) {
  j = nlohmann::json{{"dir", c.dir},
                     {"resize", c.resize},
                     {"shuffle_seed", c.shuffle_seed},
                     {"train_count", c.train_count},
                     {"holdout_count", c.holdout_count}};
}

void from_json(const nlohmann::json& j, DatasetSpec& c) {
  StrictObject o(j, "dataset");
  o.get("dir", c.dir);
  o.get("resize", c.resize);
  o.get("shuffle_seed", c.shuffle_seed);
  o.get("train_count", c.train_count);
  o.get("holdout_count", c.holdout_count);
  o.finish();
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig cfg;
  StrictObject o(j, "config");
  const nlohmann::json model = o.section("model");
  if (!model.empty()) crossmark::from_json(model, cfg.model);
  const nlohmann::json training = o.section("training");
  if (!training.empty()) crossmark::from_json(training, cfg.training);
  const nlohmann::json augment = o.section("augment");
  if (!augment.empty()) crossmark::from_json(augment, cfg.augment);
  const nlohmann::json dataset = o.section("dataset");
  if (!dataset.empty()) crossmark::from_json(dataset, cfg.dataset);
  o.get("out_dir", cfg.out_dir);
  o.finish();
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json RunConfig::to_json() const {
  return nlohmann::json{{"model", model},
                        {"training", training},
                        {"augment", augment},
                        {"dataset", dataset},
                        {"out_dir", out_dir}};
}

}  // namespace crossmark
