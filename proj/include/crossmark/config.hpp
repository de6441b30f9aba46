#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "crossmark/augment.hpp"
#include "crossmark/dataset.hpp"
#include "crossmark/models.hpp"

namespace crossmark {

struct TrainingConfig {
  double lr = 1e-4;
  double lr_decay = 0.95;  // multiplicative, applied per epoch
  // Optional per-stage base-rate overrides; 0 = inherit lr. The three stages
  // optimize different objectives and the workable rates differ: the stage-2
  // triplet collapses the encoder at rates the extraction stages need.
  double stage1_lr = 0.0;
  double stage2_lr = 0.0;
  double stage3_lr = 0.0;
  i64 epoch_steps = 0;  // steps per epoch; 0 = ceil(train_size / batch)
  i64 batch_size = 32;
  i64 stage1_steps = 5000;
  i64 stage2_steps = 2000;
  i64 stage3_steps = 3000;
  double margin = 1.0;   // triplet margin m
  double lambda = 0.0;   // stage-3 triplet weight
  std::uint64_t seed = 0;
  std::string wm_source = "pool_rotate";  // pool_rotate | random_bits | self
  double emb_weight = 1.0;                // stage-1 weight on the Eq. 2 term
  i64 log_every = 100;
  i64 check_every = 250;  // early-stop evaluation cadence; 0 disables
  // Early-stop targets (0 disables each). Stage 1 stops when train BRR and
  // PSNR both clear their targets; stage 2 when the running loss drops below
  // target; stage 3 when compound-augmented train BRR clears the target.
  double stage1_target_brr = 0.0;
  double stage1_target_psnr = 0.0;
  double stage2_target_loss = 0.0;
  double stage3_target_brr = 0.0;
  i64 ablate_steps = 1500;  // per-arm stage-1 budget for the embedder ablation

  // Effective base rate for a stage (before the per-epoch decay schedule).
  double stage_lr(int stage) const {
    const double s = stage == 1 ? stage1_lr : stage == 2 ? stage2_lr : stage3_lr;
    return s > 0 ? s : lr;
  }

  void validate() const {
    if (lr <= 0) throw ConfigError("lr must be positive");
    if (stage1_lr < 0 || stage2_lr < 0 || stage3_lr < 0)
      throw ConfigError("per-stage lr overrides must be nonnegative");
    if (lr_decay <= 0 || lr_decay > 1) throw ConfigError("lr_decay must be in (0,1]");
    if (epoch_steps < 0) throw ConfigError("epoch_steps must be nonnegative");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (triplet rotation)");
    if (stage1_steps <= 0 || stage2_steps <= 0 || stage3_steps <= 0 || ablate_steps <= 0)
      throw ConfigError("stage step counts must be positive");
    if (margin < 0) throw ConfigError("margin must be nonnegative");
    if (lambda < 0) throw ConfigError("lambda must be nonnegative");
    if (emb_weight <= 0) throw ConfigError("emb_weight must be positive");
    if (log_every < 0 || check_every < 0) throw ConfigError("cadences must be nonnegative");
    if (wm_source != "pool_rotate" && wm_source != "random_bits" && wm_source != "self")
      throw ConfigError("wm_source must be pool_rotate, random_bits, or self");
  }
};

// Declarative run description: model + training + augmentation + dataset +
// output directory. Parsing is strict — unknown keys are rejected — and
// to_json materializes every default so saved configs are self-describing.
struct RunConfig {
  ModelConfig model;
  TrainingConfig training;
  CompoundAugmentConfig augment = CompoundAugmentConfig::defaults();
  DatasetSpec dataset;
  std::string out_dir = "runs/out";

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load_file(const std::string& path);
  nlohmann::json to_json() const;

  void validate() const {
    model.validate();
    training.validate();
    augment.validate();
    dataset.validate();
    if (out_dir.empty()) throw ConfigError("out_dir must be set");
  }
};

// JSON serializers (strict on read). Used by RunConfig and checkpoints.
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainingConfig& c);
void from_json(const nlohmann::json& j, TrainingConfig& c);
void to_json(nlohmann::json& j, const CompoundAugmentConfig& c);
void from_json(const nlohmann::json& j, CompoundAugmentConfig& c);
void to_json(nlohmann::json& j, const DatasetSpec& c);
void from_json(const nlohmann::json& j, DatasetSpec& c);

}  // namespace crossmark
