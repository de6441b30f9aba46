#pragma once

#include <optional>
#include <vector>

#include "crossmark/checkpoint.hpp"
#include "crossmark/config.hpp"
#include "crossmark/dataset.hpp"
#include "crossmark/report.hpp"

namespace crossmark {

// The float networks for one run, sharing a parameter store. Components are
// present per stage: {embedder, extractor} after stage 1, {embedder,
// encoder} after stage 2, all four after stage 3.
struct Nets {
  ModelConfig cfg;
  ParameterStore<float> ps;
  std::optional<CrossAttentionEmbedder<float>> cross_embedder;
  std::optional<ConvBaselineEmbedder<float>> conv_embedder;
  std::optional<Encoder<float>> encoder;
  std::optional<Decoder<float>> decoder;
  std::optional<Extractor<float>> extractor;

  bool has_embedder() const { return cross_embedder.has_value() || conv_embedder.has_value(); }
  ad::Var<float> embed(const ad::Var<float>& cover, const ad::Var<float>& wm) const;
};

// Builds freshly initialized components. Each component draws from its own
// seed stream, so the presence of one never shifts another's init.
Nets build_nets(const ModelConfig& cfg, std::uint64_t init_seed, bool with_embedder,
                bool with_encoder, bool with_decoder, bool with_extractor);

// Rebuilds the stage-appropriate components and restores every parameter
// (strict: checkpoint and store must carry exactly the same names).
Nets nets_from_checkpoint(const ModelCheckpoint& ckpt);

// ---- batch plumbing ----

Tensor<float> stack_images(const std::vector<Tensor<float>>& images,
                           const std::vector<i64>& idx);
Tensor<float> stack_watermarks(const std::vector<WatermarkBits>& wms);
Tensor<float> slice_batch(const Tensor<float>& batch, i64 i);
Tensor<float> rotate_first_dim(const Tensor<float>& batch, i64 shift);

// Anchor/positive/negative triplet materials. The positive is a compound
// augmentation of the anchor's marked image and carries the anchor's
// watermark; the negative is the batch rotated by one. The invariant-domain
// and extracted fields are filled by complete_triplet when the checkpoint
// being inspected has those components.
struct TripletBatch {
  Tensor<float> covers_a, covers_n;
  Tensor<float> wm_a, wm_p, wm_n;
  Tensor<float> marked_a, marked_p, marked_n;
  std::optional<Tensor<float>> id_a, id_p, id_n;
  std::optional<Tensor<float>> extracted_a, extracted_p, extracted_n;
};

TripletBatch make_triplet(const std::vector<Tensor<float>>& covers,
                          const std::vector<WatermarkBits>& wms, const Nets& nets,
                          const CompoundAugmentConfig& aug, Rng& rng);

// Fills id_* (encoder present) and extracted_* (extraction path present).
void complete_triplet(TripletBatch& t, const Nets& nets);

// Eval-mode watermark logits for a {B,S,S,C} batch through the
// stage-appropriate path: encoder -> decoder -> extractor when the codec is
// present, otherwise the extractor directly.
Tensor<float> extract_logits_eval(const Nets& nets, const Tensor<float>& batch);
std::vector<WatermarkBits> extract_bits_batch(const Nets& nets, const Tensor<float>& batch);

// ---- training ----

struct StageResult {
  ModelCheckpoint ckpt;
  nlohmann::json log;  // {"stage", "steps": [{step, loss, lr, ...}], "final": {...}}
};

class Trainer {
 public:
  Trainer(RunConfig cfg, Dataset data);

  // Stage 1: embedder + extractor jointly, no noise (Eq. 2 + Eq. 3).
  StageResult stage1_pretrain();
  // Stage 2: extractor discarded, embedder frozen, encoder on Eq. 1.
  StageResult stage2_train_encoder(const ModelCheckpoint& stage1);
  // Stage 3: encoder unfrozen, fresh decoder + extractor, Eq. 4 (+ lambda Eq. 1).
  StageResult stage3_finetune(const ModelCheckpoint& stage2);

  const Dataset& data() const { return data_; }
  const std::vector<WatermarkBits>& watermark_pool() const { return pool_; }

 private:
  struct CleanTrainMetrics {
    double brr = 0.0, psnr = 0.0;
  };

  i64 effective_batch() const;
  i64 epoch_steps_effective() const;
  double lr_at(i64 step, int stage) const;
  std::vector<WatermarkBits> step_watermarks(const std::vector<i64>& idx, i64 step,
                                             std::uint64_t stage) const;
  CleanTrainMetrics eval_clean_train(const Nets& nets) const;
  double eval_augmented_train_brr(const Nets& nets, std::uint64_t stage) const;
  void require_matching_config(const ModelCheckpoint& ckpt) const;
  ModelCheckpoint finish_checkpoint(const Nets& nets, const std::string& stage,
                                    i64 steps_taken, nlohmann::json metrics) const;

  RunConfig cfg_;
  Dataset data_;
  std::vector<WatermarkBits> pool_;  // generate_watermark per training image
};

// ---- evaluation & ablations ----

struct EvalOptions {
  i64 repeats = 1;       // noise applications per (image, noise, level)
  std::uint64_t seed = 0;
  i64 batch = 8;
};

// §IV-B protocol: per image, derive the watermark, embed, attack, recover.
// Noise seeds are level-independent so escalating levels of one noise see
// paired random draws.
MetricReport evaluate(const ModelCheckpoint& ckpt, const std::vector<Tensor<float>>& images,
                      const std::vector<NoiseSpec>& noises, const EvalOptions& opts);

// Escalating-severity spec list for the given noises (Fig. 5 protocol).
std::vector<NoiseSpec> sweep_specs(const std::vector<Noise>& names);

// Paths A (stage-1 extractor, no invariant domain) and B (full pipeline)
// on identical compound-augmented inputs.
struct AblationPair {
  MetricReport direct;     // path A
  MetricReport invariant;  // path B
};
AblationPair ablate_invariant_domain(const ModelCheckpoint& stage1,
                                     const ModelCheckpoint& stage3,
                                     const std::vector<Tensor<float>>& images,
                                     const CompoundAugmentConfig& aug,
                                     const EvalOptions& opts);

// Cross-attention vs convolutional embedder at equal stage-1 budget;
// reports holdout-set embedding PSNR/BRR and residual-image statistics.
struct EmbedderAblation {
  MetricReport cross, conv;
  double residual_mean_cross = 0.0, residual_max_cross = 0.0;
  double residual_mean_conv = 0.0, residual_max_conv = 0.0;
  ModelCheckpoint ckpt_cross, ckpt_conv;
};
EmbedderAblation ablate_embedder(const RunConfig& cfg, const Dataset& data);

}  // namespace crossmark
