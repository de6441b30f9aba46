#include "crossmark/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "crossmark/augment.hpp"

namespace crossmark {
namespace {

// Purpose tags for derived seed streams. Every random draw in training and
// evaluation flows from (seed, tag, ...) chains, never from shared mutable
// state, so runs are reproducible and streams never collide.
constexpr std::uint64_t kTagInit = 0xA1;
constexpr std::uint64_t kTagShuffle = 0xA2;
constexpr std::uint64_t kTagWm = 0xA3;
constexpr std::uint64_t kTagDropout = 0xA4;
constexpr std::uint64_t kTagAug = 0xA5;
constexpr std::uint64_t kTagAugCheck = 0xA6;
constexpr std::uint64_t kTagEvalNoise = 0xA7;
constexpr std::uint64_t kTagAblate = 0xA8;

constexpr std::uint64_t kCompEmbedder = 1;
constexpr std::uint64_t kCompEncoder = 2;
constexpr std::uint64_t kCompDecoder = 3;
constexpr std::uint64_t kCompExtractor = 4;

// Shuffled-epoch batch scheduler: one Fisher-Yates permutation per epoch
// from a per-epoch derived seed. Batches never straddle an epoch boundary,
// so a batch holds distinct indices whenever batch <= n.
class BatchSchedule {
 public:
  BatchSchedule(i64 n, std::uint64_t seed) : n_(n), seed_(seed) { refill(); }

  std::vector<i64> next(i64 batch) {
    if (batch > n_) throw ConfigError("batch size exceeds training set size");
    if (n_ - pos_ < batch) {
      ++epoch_;
      refill();
    }
    std::vector<i64> out(order_.begin() + pos_, order_.begin() + pos_ + batch);
    pos_ += batch;
    return out;
  }

 private:
  void refill() {
    order_.resize((size_t)n_);
    std::iota(order_.begin(), order_.end(), 0);
    Rng r(derive_seed(seed_, (std::uint64_t)epoch_));
    for (i64 i = n_ - 1; i > 0; --i) {
      const i64 j = r.uniform_int(0, i);
      std::swap(order_[(size_t)i], order_[(size_t)j]);
    }
    pos_ = 0;
  }

  i64 n_ = 0, pos_ = 0, epoch_ = 0;
  std::uint64_t seed_;
  std::vector<i64> order_;
};

i64 matching_bits(const WatermarkBits& a, const WatermarkBits& b) {
  i64 m = 0;
  for (i64 r = 0; r < WatermarkBits::kSide; ++r)
    for (i64 c = 0; c < WatermarkBits::kSide; ++c) m += (a.at(r, c) == b.at(r, c)) ? 1 : 0;
  return m;
}

void copy_into_row(Tensor<float>& batch, i64 j, const Tensor<float>& img) {
  const i64 per = batch.numel() / batch.shape[0];
  if (img.numel() != per)
    throw ShapeError("batch row size mismatch: " + img.shape_str() + " into " + batch.shape_str());
  std::copy(img.data.begin(), img.data.end(), batch.data.begin() + (size_t)(j * per));
}

nlohmann::json json_db(double v) {
  // JSON has no literal infinity; mirror the report sentinel.
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json("inf");
}

void check_finite_loss(double v, const char* stage, i64 step) {
  if (!std::isfinite(v))
    throw NumericError(std::string(stage) + " loss diverged at step " + std::to_string(step));
}

}  // namespace

// ---- Nets ----

ad::Var<float> Nets::embed(const ad::Var<float>& cover, const ad::Var<float>& wm) const {
  if (cross_embedder) return cross_embedder->embed(cover, wm);
  if (conv_embedder) return conv_embedder->embed(cover, wm);
  throw CheckpointError("no embedder present");
}

Nets build_nets(const ModelConfig& cfg, std::uint64_t init_seed, bool with_embedder,
                bool with_encoder, bool with_decoder, bool with_extractor) {
  cfg.validate();
  Nets n;
  n.cfg = cfg;
  if (with_embedder) {
    Rng r(derive_seed(init_seed, kCompEmbedder));
    if (cfg.embedder_type == "cross_attention")
      n.cross_embedder.emplace(n.ps, "embedder", cfg, r);
    else
      n.conv_embedder.emplace(n.ps, "embedder", cfg, r);
  }
  if (with_encoder) {
    Rng r(derive_seed(init_seed, kCompEncoder));
    n.encoder.emplace(n.ps, "encoder", cfg, r);
  }
  if (with_decoder) {
    Rng r(derive_seed(init_seed, kCompDecoder));
    n.decoder.emplace(n.ps, "decoder", cfg, r);
  }
  if (with_extractor) {
    Rng r(derive_seed(init_seed, kCompExtractor));
    n.extractor.emplace(n.ps, "extractor", cfg, r);
  }
  return n;
}

Nets nets_from_checkpoint(const ModelCheckpoint& ckpt) {
  ckpt.config.validate();
  bool we = false, wenc = false, wdec = false, wext = false;
  if (ckpt.stage == "stage1") {
    we = wext = true;
  } else if (ckpt.stage == "stage2") {
    we = wenc = true;
  } else if (ckpt.stage == "stage3") {
    we = wenc = wdec = wext = true;
  } else {
    throw CheckpointError("unknown stage tag '" + ckpt.stage + "'");
  }
  Nets n = build_nets(ckpt.config, /*init_seed=*/0, we, wenc, wdec, wext);
  restore_params(ckpt, n.ps);
  for (auto& [name, e] : n.ps.entries()) {
    const auto it = ckpt.trainable.find(name);
    if (it != ckpt.trainable.end()) {
      e.trainable = it->second;
      e.var->requires_grad = it->second;
    }
  }
  return n;
}

// ---- batch plumbing ----

Tensor<float> stack_images(const std::vector<Tensor<float>>& images, const std::vector<i64>& idx) {
  if (idx.empty()) throw ConfigError("stack_images: empty index list");
  for (i64 i : idx)
    if (i < 0 || (size_t)i >= images.size()) throw ConfigError("stack_images: index out of range");
  const Tensor<float>& first = images[(size_t)idx[0]];
  if (first.ndim() != 3) throw ShapeError("stack_images expects H x W x C images");
  Tensor<float> out({(i64)idx.size(), first.shape[0], first.shape[1], first.shape[2]});
  const i64 per = first.numel();
  for (size_t j = 0; j < idx.size(); ++j) {
    const Tensor<float>& im = images[(size_t)idx[j]];
    require_same_shape(first, im, "stack_images");
    std::copy(im.data.begin(), im.data.end(), out.data.begin() + j * (size_t)per);
  }
  return out;
}

Tensor<float> stack_watermarks(const std::vector<WatermarkBits>& wms) {
  if (wms.empty()) throw ConfigError("stack_watermarks: empty batch");
  const i64 side = WatermarkBits::kSide;
  Tensor<float> out({(i64)wms.size(), side, side, 1});
  for (size_t j = 0; j < wms.size(); ++j) {
    const auto t = wms[j].to_tensor<float>();
    std::copy(t.data.begin(), t.data.end(), out.data.begin() + j * (size_t)t.numel());
  }
  return out;
}

Tensor<float> slice_batch(const Tensor<float>& batch, i64 i) {
  if (batch.ndim() < 2) throw ShapeError("slice_batch expects a batched tensor");
  if (i < 0 || i >= batch.shape[0]) throw ShapeError("slice_batch: index out of range");
  std::vector<i64> shape(batch.shape.begin() + 1, batch.shape.end());
  Tensor<float> out(shape);
  const i64 per = out.numel();
  std::copy(batch.data.begin() + (size_t)(i * per), batch.data.begin() + (size_t)((i + 1) * per),
            out.data.begin());
  return out;
}

Tensor<float> rotate_first_dim(const Tensor<float>& batch, i64 shift) {
  if (batch.ndim() < 1 || batch.shape[0] <= 0)
    throw ShapeError("rotate_first_dim expects a batched tensor");
  const i64 b = batch.shape[0];
  const i64 per = batch.numel() / b;
  Tensor<float> out(batch.shape);
  for (i64 i = 0; i < b; ++i) {
    const i64 src = ((i + shift) % b + b) % b;
    std::copy(batch.data.begin() + (size_t)(src * per),
              batch.data.begin() + (size_t)((src + 1) * per),
              out.data.begin() + (size_t)(i * per));
  }
  return out;
}

TripletBatch make_triplet(const std::vector<Tensor<float>>& covers,
                          const std::vector<WatermarkBits>& wms, const Nets& nets,
                          const CompoundAugmentConfig& aug, Rng& rng) {
  if (covers.size() < 2)
    throw ConfigError("triplet construction needs a batch of at least 2 distinct covers");
  if (wms.size() != covers.size())
    throw ConfigError("triplet construction: covers and watermarks differ in count");
  if (!nets.has_embedder()) throw CheckpointError("triplet construction needs an embedder");
  aug.validate();

  std::vector<i64> idx((size_t)covers.size());
  std::iota(idx.begin(), idx.end(), 0);

  TripletBatch t;
  t.covers_a = stack_images(covers, idx);
  t.covers_n = rotate_first_dim(t.covers_a, 1);
  t.wm_a = stack_watermarks(wms);
  t.wm_p = t.wm_a;
  t.wm_n = rotate_first_dim(t.wm_a, 1);

  t.marked_a = nets.embed(ad::leaf(t.covers_a), ad::leaf(t.wm_a))->value;
  // The embedder acts per sample, so embedding the rotated batch equals
  // rotating the embedded batch.
  t.marked_n = rotate_first_dim(t.marked_a, 1);
  t.marked_p = Tensor<float>(t.marked_a.shape);
  for (i64 j = 0; j < t.marked_a.shape[0]; ++j)
    copy_into_row(t.marked_p, j, compound_augment(slice_batch(t.marked_a, j), aug, rng));
  return t;
}

void complete_triplet(TripletBatch& t, const Nets& nets) {
  if (nets.encoder) {
    t.id_a = nets.encoder->encode(ad::leaf(t.marked_a))->value;
    t.id_p = nets.encoder->encode(ad::leaf(t.marked_p))->value;
    t.id_n = nets.encoder->encode(ad::leaf(t.marked_n))->value;
  }
  if (nets.extractor && (!nets.encoder || nets.decoder)) {
    t.extracted_a = extract_logits_eval(nets, t.marked_a);
    t.extracted_p = extract_logits_eval(nets, t.marked_p);
    t.extracted_n = extract_logits_eval(nets, t.marked_n);
  }
}

Tensor<float> extract_logits_eval(const Nets& nets, const Tensor<float>& batch) {
  if (!nets.extractor)
    throw CheckpointError("checkpoint has no extractor; recovery needs stage 1 or stage 3");
  if (nets.encoder.has_value() != nets.decoder.has_value())
    throw CheckpointError("partial invariant codec: encoder and decoder must travel together");
  Rng unused(0);
  ad::Var<float> img = ad::leaf(batch);
  if (nets.encoder) img = nets.decoder->decode(nets.encoder->encode(img));
  return nets.extractor->logits(img, /*train=*/false, unused)->value;
}

std::vector<WatermarkBits> extract_bits_batch(const Nets& nets, const Tensor<float>& batch) {
  const Tensor<float> logits = extract_logits_eval(nets, batch);
  std::vector<WatermarkBits> out;
  out.reserve((size_t)logits.shape[0]);
  for (i64 j = 0; j < logits.shape[0]; ++j)
    out.push_back(WatermarkBits::threshold_logits(slice_batch(logits, j)));
  return out;
}

// ---- Trainer ----

Trainer::Trainer(RunConfig cfg, Dataset data) : cfg_(std::move(cfg)), data_(std::move(data)) {
  cfg_.validate();
  if (data_.train.size() < 2)
    throw ConfigError("training needs at least 2 images (triplet negatives rotate the batch)");
  const auto check = [&](const Tensor<float>& img, const char* what) {
    if (img.ndim() != 3 || img.shape[0] != cfg_.model.image_size ||
        img.shape[1] != cfg_.model.image_size || img.shape[2] != cfg_.model.image_channels)
      throw ShapeError(std::string(what) + " does not match the configured image shape: " +
                       img.shape_str());
  };
  pool_.reserve(data_.train.size());
  for (const auto& img : data_.train) {
    check(img, "training image");
    pool_.push_back(generate_watermark(img));
  }
  for (const auto& img : data_.holdout) check(img, "holdout image");
}

i64 Trainer::effective_batch() const {
  return std::min<i64>(cfg_.training.batch_size, (i64)data_.train.size());
}

i64 Trainer::epoch_steps_effective() const {
  if (cfg_.training.epoch_steps > 0) return cfg_.training.epoch_steps;
  const i64 n = (i64)data_.train.size();
  const i64 b = effective_batch();
  return (n + b - 1) / b;
}

double Trainer::lr_at(i64 step, int stage) const {
  const i64 epoch = step / epoch_steps_effective();
  return cfg_.training.stage_lr(stage) * std::pow(cfg_.training.lr_decay, (double)epoch);
}

std::vector<WatermarkBits> Trainer::step_watermarks(const std::vector<i64>& idx, i64 step,
                                                    std::uint64_t stage) const {
  const auto& tc = cfg_.training;
  const i64 n = (i64)pool_.size();
  std::vector<WatermarkBits> out;
  out.reserve(idx.size());
  for (i64 i : idx) {
    if (tc.wm_source == "pool_rotate") {
      out.push_back(pool_[(size_t)((i + step) % n)]);
    } else if (tc.wm_source == "self") {
      out.push_back(pool_[(size_t)i]);
    } else if (tc.wm_source == "random_bits") {
      Rng r(derive_seed(derive_seed(tc.seed, kTagWm, stage), (std::uint64_t)step,
                        (std::uint64_t)i));
      out.push_back(random_watermark(r));
    } else {
      throw ConfigError("unknown wm_source '" + tc.wm_source + "'");
    }
  }
  return out;
}

Trainer::CleanTrainMetrics Trainer::eval_clean_train(const Nets& nets) const {
  const i64 n = (i64)data_.train.size();
  const i64 b = effective_batch();
  double psnr_sum = 0.0;
  i64 match = 0;
  for (i64 start = 0; start < n; start += b) {
    const i64 end = std::min(start + b, n);
    std::vector<i64> idx;
    for (i64 j = start; j < end; ++j) idx.push_back(j);
    std::vector<WatermarkBits> wms;
    for (i64 j = start; j < end; ++j) wms.push_back(pool_[(size_t)j]);
    const Tensor<float> cover = stack_images(data_.train, idx);
    const Tensor<float> marked =
        nets.embed(ad::leaf(cover), ad::leaf(stack_watermarks(wms)))->value;
    const auto bits = extract_bits_batch(nets, marked);
    for (i64 j = 0; j < end - start; ++j) {
      psnr_sum += psnr(data_.train[(size_t)idx[(size_t)j]], slice_batch(marked, j));
      match += matching_bits(wms[(size_t)j], bits[(size_t)j]);
    }
  }
  return {100.0 * (double)match / (64.0 * (double)n), psnr_sum / (double)n};
}

double Trainer::eval_augmented_train_brr(const Nets& nets, std::uint64_t stage) const {
  const i64 n = (i64)data_.train.size();
  const i64 b = effective_batch();
  const std::uint64_t s = derive_seed(cfg_.training.seed, kTagAugCheck, stage);
  i64 match = 0;
  for (i64 start = 0; start < n; start += b) {
    const i64 end = std::min(start + b, n);
    std::vector<i64> idx;
    for (i64 j = start; j < end; ++j) idx.push_back(j);
    std::vector<WatermarkBits> wms;
    for (i64 j = start; j < end; ++j) wms.push_back(pool_[(size_t)j]);
    const Tensor<float> marked =
        nets.embed(ad::leaf(stack_images(data_.train, idx)), ad::leaf(stack_watermarks(wms)))
            ->value;
    Tensor<float> attacked(marked.shape);
    for (i64 j = 0; j < end - start; ++j) {
      Rng r(derive_seed(s, (std::uint64_t)(start + j)));
      copy_into_row(attacked, j, compound_augment(slice_batch(marked, j), cfg_.augment, r));
    }
    const auto bits = extract_bits_batch(nets, attacked);
    for (i64 j = 0; j < end - start; ++j) match += matching_bits(wms[(size_t)j], bits[(size_t)j]);
  }
  return 100.0 * (double)match / (64.0 * (double)n);
}

void Trainer::require_matching_config(const ModelCheckpoint& ckpt) const {
  if (nlohmann::json(ckpt.config) != nlohmann::json(cfg_.model))
    throw CheckpointError("checkpoint architecture differs from the run configuration");
}

ModelCheckpoint Trainer::finish_checkpoint(const Nets& nets, const std::string& stage,
                                           i64 steps_taken, nlohmann::json metrics) const {
  ModelCheckpoint ck = snapshot_params(nets.ps);
  ck.stage = stage;
  ck.config = cfg_.model;
  ck.metrics = std::move(metrics);
  ck.rng_state =
      nlohmann::json({{"seed", cfg_.training.seed}, {"steps", steps_taken}}).dump();
  return ck;
}

StageResult Trainer::stage1_pretrain() {
  const auto& tc = cfg_.training;
  Nets nets = build_nets(cfg_.model, derive_seed(tc.seed, kTagInit, 1), /*embedder=*/true,
                         /*encoder=*/false, /*decoder=*/false, /*extractor=*/true);
  Adam<float> opt;
  const i64 n = (i64)data_.train.size();
  const i64 b = effective_batch();
  BatchSchedule sched(n, derive_seed(tc.seed, kTagShuffle, 1));

  nlohmann::json steps_log = nlohmann::json::array();
  double last_loss = 0.0;
  i64 steps_taken = 0;
  bool stopped = false;
  const bool want_stop =
      tc.check_every > 0 && (tc.stage1_target_brr > 0 || tc.stage1_target_psnr > 0);

  for (i64 step = 0; step < tc.stage1_steps; ++step) {
    const auto idx = sched.next(b);
    const auto wms = step_watermarks(idx, step, 1);
    auto cover = ad::leaf(stack_images(data_.train, idx));
    auto wm = ad::leaf(stack_watermarks(wms));
    auto marked = nets.embed(cover, wm);
    Rng drop(derive_seed(tc.seed, kTagDropout, 1, (std::uint64_t)step));
    auto logits = nets.extractor->logits(marked, /*train=*/true, drop);
    auto loss = ad::add(ad::scale(ad::mse(cover, marked), (float)tc.emb_weight),
                        ad::mse(wm, logits));
    last_loss = (double)loss->value.data[0];
    check_finite_loss(last_loss, "stage 1", step);
    nets.ps.zero_grads();
    ad::backward(loss);
    opt.step(nets.ps, lr_at(step, 1));
    steps_taken = step + 1;

    if (tc.log_every > 0 && step % tc.log_every == 0)
      steps_log.push_back({{"step", step}, {"loss", last_loss}, {"lr", lr_at(step, 1)}});
    if (want_stop && (step + 1) % tc.check_every == 0) {
      const auto m = eval_clean_train(nets);
      steps_log.push_back(
          {{"step", step}, {"train_brr", m.brr}, {"train_psnr", json_db(m.psnr)}});
      if ((tc.stage1_target_brr <= 0 || m.brr >= tc.stage1_target_brr) &&
          (tc.stage1_target_psnr <= 0 || m.psnr >= tc.stage1_target_psnr)) {
        stopped = true;
        break;
      }
    }
  }

  const auto fin = eval_clean_train(nets);
  nlohmann::json metrics = {{"steps", steps_taken},        {"final_loss", last_loss},
                            {"train_brr", fin.brr},        {"train_psnr", json_db(fin.psnr)},
                            {"early_stopped", stopped}};
  StageResult res;
  res.ckpt = finish_checkpoint(nets, "stage1", steps_taken, metrics);
  res.log = {{"stage", "stage1"}, {"steps", steps_log}, {"final", metrics}};
  return res;
}

StageResult Trainer::stage2_train_encoder(const ModelCheckpoint& stage1) {
  const auto& tc = cfg_.training;
  if (stage1.stage != "stage1")
    throw CheckpointError("stage 2 requires a stage-1 checkpoint, got '" + stage1.stage + "'");
  require_matching_config(stage1);

  // The stage-1 extractor is deliberately discarded: only the embedder
  // parameters travel forward, and they stay frozen from here on.
  Nets nets = build_nets(cfg_.model, derive_seed(tc.seed, kTagInit, 2), /*embedder=*/true,
                         /*encoder=*/true, /*decoder=*/false, /*extractor=*/false);
  restore_params_prefix(stage1, nets.ps, "embedder.");
  nets.ps.set_trainable("embedder.", false);

  Adam<float> opt;
  const i64 n = (i64)data_.train.size();
  const i64 b = effective_batch();
  BatchSchedule sched(n, derive_seed(tc.seed, kTagShuffle, 2));

  nlohmann::json steps_log = nlohmann::json::array();
  double last_loss = 0.0, window_sum = 0.0, window_mean = -1.0;
  i64 window_count = 0, steps_taken = 0;
  bool stopped = false;

  for (i64 step = 0; step < tc.stage2_steps; ++step) {
    const auto idx = sched.next(b);
    const auto wms = step_watermarks(idx, step, 2);
    auto marked =
        nets.embed(ad::leaf(stack_images(data_.train, idx)), ad::leaf(stack_watermarks(wms)));
    auto m_a = ad::leaf(marked->value);  // embedder frozen: cut the graph here

    Tensor<float> mp(m_a->value.shape);
    const std::uint64_t aug_seed = derive_seed(tc.seed, kTagAug, 2);
    for (i64 j = 0; j < b; ++j) {
      Rng ar(derive_seed(aug_seed, (std::uint64_t)step, (std::uint64_t)j));
      copy_into_row(mp, j, compound_augment(slice_batch(m_a->value, j), cfg_.augment, ar));
    }
    auto m_p = ad::leaf(mp);

    auto id_a = nets.encoder->encode(m_a);
    auto id_p = nets.encoder->encode(m_p);
    // Per-sample networks commute with batch rotation, so the negative
    // invariant domain is the anchor batch rotated by one.
    auto id_n = ad::rotate_batch(id_a, 1);
    auto loss = ad_loss::triplet(id_a, id_p, id_n, tc.margin);
    last_loss = (double)loss->value.data[0];
    check_finite_loss(last_loss, "stage 2", step);
    nets.ps.zero_grads();
    ad::backward(loss);
    opt.step(nets.ps, lr_at(step, 2));
    steps_taken = step + 1;
    window_sum += last_loss;
    ++window_count;

    if (tc.log_every > 0 && step % tc.log_every == 0)
      steps_log.push_back({{"step", step}, {"loss", last_loss}, {"lr", lr_at(step, 2)}});
    if (tc.check_every > 0 && (step + 1) % tc.check_every == 0) {
      window_mean = window_sum / (double)window_count;
      steps_log.push_back({{"step", step}, {"window_loss", window_mean}});
      window_sum = 0.0;
      window_count = 0;
      if (tc.stage2_target_loss > 0 && window_mean <= tc.stage2_target_loss) {
        stopped = true;
        break;
      }
    }
  }

  nlohmann::json metrics = {{"steps", steps_taken},
                            {"final_loss", last_loss},
                            {"window_loss", window_mean},
                            {"early_stopped", stopped}};
  StageResult res;
  res.ckpt = finish_checkpoint(nets, "stage2", steps_taken, metrics);
  res.log = {{"stage", "stage2"}, {"steps", steps_log}, {"final", metrics}};
  return res;
}

StageResult Trainer::stage3_finetune(const ModelCheckpoint& stage2) {
  const auto& tc = cfg_.training;
  if (stage2.stage != "stage2")
    throw CheckpointError("stage 3 requires a stage-2 checkpoint, got '" + stage2.stage + "'");
  require_matching_config(stage2);

  Nets nets = build_nets(cfg_.model, derive_seed(tc.seed, kTagInit, 3), /*embedder=*/true,
                         /*encoder=*/true, /*decoder=*/true, /*extractor=*/true);
  restore_params_prefix(stage2, nets.ps, "embedder.");
  restore_params_prefix(stage2, nets.ps, "encoder.");
  nets.ps.set_trainable("embedder.", false);  // encoder stays trainable (unfrozen)

  Adam<float> opt;
  const i64 n = (i64)data_.train.size();
  const i64 b = effective_batch();
  BatchSchedule sched(n, derive_seed(tc.seed, kTagShuffle, 3));

  nlohmann::json steps_log = nlohmann::json::array();
  double last_loss = 0.0;
  i64 steps_taken = 0;
  bool stopped = false;
  const bool want_stop = tc.check_every > 0 && tc.stage3_target_brr > 0;

  for (i64 step = 0; step < tc.stage3_steps; ++step) {
    const auto idx = sched.next(b);
    const auto wms = step_watermarks(idx, step, 3);
    const Tensor<float> wm_t = stack_watermarks(wms);
    auto marked =
        nets.embed(ad::leaf(stack_images(data_.train, idx)), ad::leaf(wm_t));
    auto m_a = ad::leaf(marked->value);

    Tensor<float> mp(m_a->value.shape);
    const std::uint64_t aug_seed = derive_seed(tc.seed, kTagAug, 3);
    for (i64 j = 0; j < b; ++j) {
      Rng ar(derive_seed(aug_seed, (std::uint64_t)step, (std::uint64_t)j));
      copy_into_row(mp, j, compound_augment(slice_batch(m_a->value, j), cfg_.augment, ar));
    }
    auto m_p = ad::leaf(mp);

    auto id_a = nets.encoder->encode(m_a);
    auto id_p = nets.encoder->encode(m_p);
    auto id_n = ad::rotate_batch(id_a, 1);
    auto dec_a = nets.decoder->decode(id_a);
    auto dec_p = nets.decoder->decode(id_p);
    auto dec_n = ad::rotate_batch(dec_a, 1);
    Rng drop(derive_seed(tc.seed, kTagDropout, 3, (std::uint64_t)step));
    auto la = nets.extractor->logits(dec_a, /*train=*/true, drop);
    auto lp = nets.extractor->logits(dec_p, /*train=*/true, drop);
    auto ln = ad::rotate_batch(la, 1);
    auto wa = ad::leaf(wm_t);
    auto wn = ad::leaf(rotate_first_dim(wm_t, 1));

    auto loss = ad_loss::extractor_final(wa, wa, wn, la, lp, ln);
    if (tc.lambda > 0)
      loss = ad::add(loss, ad::scale(ad_loss::triplet(id_a, id_p, id_n, tc.margin),
                                     (float)tc.lambda));
    last_loss = (double)loss->value.data[0];
    check_finite_loss(last_loss, "stage 3", step);
    nets.ps.zero_grads();
    ad::backward(loss);
    opt.step(nets.ps, lr_at(step, 3));
    steps_taken = step + 1;

    if (tc.log_every > 0 && step % tc.log_every == 0)
      steps_log.push_back({{"step", step}, {"loss", last_loss}, {"lr", lr_at(step, 3)}});
    if (want_stop && (step + 1) % tc.check_every == 0) {
      const double brr_aug = eval_augmented_train_brr(nets, 3);
      steps_log.push_back({{"step", step}, {"train_brr_augmented", brr_aug}});
      if (brr_aug >= tc.stage3_target_brr) {
        stopped = true;
        break;
      }
    }
  }

  const auto fin = eval_clean_train(nets);
  const double brr_aug = eval_augmented_train_brr(nets, 3);
  nlohmann::json metrics = {{"steps", steps_taken},
                            {"final_loss", last_loss},
                            {"train_brr", fin.brr},
                            {"train_psnr", json_db(fin.psnr)},
                            {"train_brr_augmented", brr_aug},
                            {"early_stopped", stopped}};
  StageResult res;
  res.ckpt = finish_checkpoint(nets, "stage3", steps_taken, metrics);
  res.log = {{"stage", "stage3"}, {"steps", steps_log}, {"final", metrics}};
  return res;
}

// ---- evaluation ----

MetricReport evaluate(const ModelCheckpoint& ckpt, const std::vector<Tensor<float>>& images,
                      const std::vector<NoiseSpec>& noises, const EvalOptions& opts) {
  if (images.empty()) throw ConfigError("evaluation set is empty");
  if (opts.repeats < 1) throw ConfigError("evaluation repeats must be >= 1");
  if (opts.batch < 1) throw ConfigError("evaluation batch must be >= 1");
  for (const auto& s : noises) check_noise_level(s.name, s.level);

  Nets nets = nets_from_checkpoint(ckpt);
  if (!nets.extractor)
    throw CheckpointError("stage '" + ckpt.stage +
                          "' checkpoint has no recovery path; evaluate needs stage 1 or stage 3");

  const i64 n = (i64)images.size();
  const i64 b = std::min(opts.batch, n);
  double psnr_embed_sum = 0.0;
  i64 clean_match = 0;
  struct Acc {
    i64 match = 0;
    double psnr_sum = 0.0;
  };
  std::vector<Acc> acc(noises.size());

  for (i64 start = 0; start < n; start += b) {
    const i64 end = std::min(start + b, n);
    std::vector<i64> idx;
    std::vector<WatermarkBits> wms;
    for (i64 j = start; j < end; ++j) {
      idx.push_back(j);
      wms.push_back(generate_watermark(images[(size_t)j]));
    }
    const Tensor<float> marked =
        nets.embed(ad::leaf(stack_images(images, idx)), ad::leaf(stack_watermarks(wms)))->value;

    const auto clean_bits = extract_bits_batch(nets, marked);
    for (i64 j = 0; j < end - start; ++j) {
      clean_match += matching_bits(wms[(size_t)j], clean_bits[(size_t)j]);
      psnr_embed_sum += psnr(images[(size_t)(start + j)], slice_batch(marked, j));
    }

    for (size_t si = 0; si < noises.size(); ++si) {
      const NoiseSpec& spec = noises[si];
      // Level-independent stream: escalating levels of one noise see paired
      // draws, so a sweep varies only the severity.
      const std::uint64_t s_noise =
          derive_seed(opts.seed, kTagEvalNoise, (std::uint64_t)spec.name);
      for (i64 rep = 0; rep < opts.repeats; ++rep) {
        Tensor<float> attacked(marked.shape);
        for (i64 j = 0; j < end - start; ++j) {
          Rng nr(derive_seed(s_noise, (std::uint64_t)(start + j), (std::uint64_t)rep));
          const Tensor<float> m_j = slice_batch(marked, j);
          const Tensor<float> a_j = apply_noise(m_j, spec, nr);
          acc[si].psnr_sum += psnr(m_j, a_j);
          copy_into_row(attacked, j, a_j);
        }
        const auto bits = extract_bits_batch(nets, attacked);
        for (i64 j = 0; j < end - start; ++j)
          acc[si].match += matching_bits(wms[(size_t)j], bits[(size_t)j]);
      }
    }
  }

  MetricReport rep;
  rep.psnr_db = psnr_embed_sum / (double)n;
  rep.brr_percent = 100.0 * (double)clean_match / (64.0 * (double)n);
  for (size_t si = 0; si < noises.size(); ++si) {
    const double trials = (double)n * (double)opts.repeats;
    rep.entries.push_back(MetricEntry{noise_name(noises[si].name), noises[si].level,
                                      100.0 * (double)acc[si].match / (64.0 * trials),
                                      acc[si].psnr_sum / trials});
  }
  return rep;
}

std::vector<NoiseSpec> sweep_specs(const std::vector<Noise>& names) {
  std::vector<NoiseSpec> specs;
  for (Noise n : names)
    for (double level : attack_sweep_levels(n)) specs.push_back(NoiseSpec{n, level});
  return specs;
}

AblationPair ablate_invariant_domain(const ModelCheckpoint& stage1,
                                     const ModelCheckpoint& stage3,
                                     const std::vector<Tensor<float>>& images,
                                     const CompoundAugmentConfig& aug,
                                     const EvalOptions& opts) {
  if (stage1.stage != "stage1")
    throw CheckpointError("ablation path A needs a stage-1 checkpoint, got '" + stage1.stage +
                          "'");
  if (stage3.stage != "stage3")
    throw CheckpointError("ablation path B needs a stage-3 checkpoint, got '" + stage3.stage +
                          "'");
  if (images.empty()) throw ConfigError("ablation image set is empty");
  if (opts.repeats < 1) throw ConfigError("ablation repeats must be >= 1");
  aug.validate();
  for (const auto& [name, t] : stage1.arrays) {
    if (name.rfind("embedder.", 0) != 0) continue;
    const auto it = stage3.arrays.find(name);
    if (it == stage3.arrays.end() || it->second.shape != t.shape ||
        !std::equal(t.data.begin(), t.data.end(), it->second.data.begin()))
      throw CheckpointError(
          "the two checkpoints carry different embedders; both paths must share one pipeline");
  }

  Nets direct = nets_from_checkpoint(stage1);
  Nets invariant = nets_from_checkpoint(stage3);
  const i64 n = (i64)images.size();
  const i64 b = std::min(opts.batch, n);
  double psnr_embed_sum = 0.0, psnr_aug_sum = 0.0;
  i64 clean_a = 0, clean_b = 0, aug_a = 0, aug_b = 0;

  for (i64 start = 0; start < n; start += b) {
    const i64 end = std::min(start + b, n);
    std::vector<i64> idx;
    std::vector<WatermarkBits> wms;
    for (i64 j = start; j < end; ++j) {
      idx.push_back(j);
      wms.push_back(generate_watermark(images[(size_t)j]));
    }
    const Tensor<float> marked =
        direct.embed(ad::leaf(stack_images(images, idx)), ad::leaf(stack_watermarks(wms)))
            ->value;
    for (i64 j = 0; j < end - start; ++j)
      psnr_embed_sum += psnr(images[(size_t)(start + j)], slice_batch(marked, j));

    const auto bits_a = extract_bits_batch(direct, marked);
    const auto bits_b = extract_bits_batch(invariant, marked);
    for (i64 j = 0; j < end - start; ++j) {
      clean_a += matching_bits(wms[(size_t)j], bits_a[(size_t)j]);
      clean_b += matching_bits(wms[(size_t)j], bits_b[(size_t)j]);
    }

    const std::uint64_t s = derive_seed(opts.seed, kTagAblate);
    for (i64 rep = 0; rep < opts.repeats; ++rep) {
      Tensor<float> attacked(marked.shape);
      for (i64 j = 0; j < end - start; ++j) {
        Rng ar(derive_seed(s, (std::uint64_t)(start + j), (std::uint64_t)rep));
        const Tensor<float> m_j = slice_batch(marked, j);
        const Tensor<float> a_j = compound_augment(m_j, aug, ar);
        psnr_aug_sum += psnr(m_j, a_j);
        copy_into_row(attacked, j, a_j);
      }
      // Identical distorted inputs feed both recovery paths.
      const auto abits_a = extract_bits_batch(direct, attacked);
      const auto abits_b = extract_bits_batch(invariant, attacked);
      for (i64 j = 0; j < end - start; ++j) {
        aug_a += matching_bits(wms[(size_t)j], abits_a[(size_t)j]);
        aug_b += matching_bits(wms[(size_t)j], abits_b[(size_t)j]);
      }
    }
  }

  const double trials = (double)n * (double)opts.repeats;
  const double psnr_embed = psnr_embed_sum / (double)n;
  const double psnr_aug = psnr_aug_sum / trials;
  AblationPair out;
  out.direct.psnr_db = psnr_embed;
  out.direct.brr_percent = 100.0 * (double)clean_a / (64.0 * (double)n);
  out.direct.entries.push_back(
      MetricEntry{"compound", 1.0, 100.0 * (double)aug_a / (64.0 * trials), psnr_aug});
  out.invariant.psnr_db = psnr_embed;
  out.invariant.brr_percent = 100.0 * (double)clean_b / (64.0 * (double)n);
  out.invariant.entries.push_back(
      MetricEntry{"compound", 1.0, 100.0 * (double)aug_b / (64.0 * trials), psnr_aug});
  return out;
}

EmbedderAblation ablate_embedder(const RunConfig& cfg, const Dataset& data) {
  if (data.holdout.empty())
    throw ConfigError("embedder ablation needs a holdout split (set dataset.holdout_count)");

  const auto train_arm = [&](const std::string& type) {
    RunConfig c = cfg;
    c.model.embedder_type = type;
    // Equal fixed budget for both arms: ablate_steps, no early stop.
    c.training.stage1_steps = c.training.ablate_steps;
    c.training.stage1_target_brr = 0;
    c.training.stage1_target_psnr = 0;
    Trainer t(c, data);
    return t.stage1_pretrain();
  };
  const StageResult cross = train_arm("cross_attention");
  const StageResult conv = train_arm("conv_baseline");

  const auto eval_arm = [&](const ModelCheckpoint& ck, double& res_mean, double& res_max) {
    Nets nets = nets_from_checkpoint(ck);
    const i64 n = (i64)data.holdout.size();
    const i64 b = std::min<i64>(8, n);
    double psnr_sum = 0.0, diff_sum = 0.0, diff_max = 0.0;
    i64 match = 0, elems = 0;
    for (i64 start = 0; start < n; start += b) {
      const i64 end = std::min(start + b, n);
      std::vector<i64> idx;
      std::vector<WatermarkBits> wms;
      for (i64 j = start; j < end; ++j) {
        idx.push_back(j);
        wms.push_back(generate_watermark(data.holdout[(size_t)j]));
      }
      const Tensor<float> cover = stack_images(data.holdout, idx);
      const Tensor<float> marked =
          nets.embed(ad::leaf(cover), ad::leaf(stack_watermarks(wms)))->value;
      const auto bits = extract_bits_batch(nets, marked);
      for (i64 j = 0; j < end - start; ++j) {
        psnr_sum += psnr(data.holdout[(size_t)(start + j)], slice_batch(marked, j));
        match += matching_bits(wms[(size_t)j], bits[(size_t)j]);
      }
      for (i64 e = 0; e < marked.numel(); ++e) {
        const double d = std::abs((double)marked.data[(size_t)e] - (double)cover.data[(size_t)e]);
        diff_sum += d;
        diff_max = std::max(diff_max, d);
        ++elems;
      }
    }
    res_mean = diff_sum / (double)elems;
    res_max = diff_max;
    MetricReport rep;
    rep.psnr_db = psnr_sum / (double)n;
    rep.brr_percent = 100.0 * (double)match / (64.0 * (double)n);
    return rep;
  };

  EmbedderAblation out;
  out.ckpt_cross = cross.ckpt;
  out.ckpt_conv = conv.ckpt;
  out.cross = eval_arm(cross.ckpt, out.residual_mean_cross, out.residual_max_cross);
  out.conv = eval_arm(conv.ckpt, out.residual_mean_conv, out.residual_max_conv);
  return out;
}

}  // namespace crossmark
