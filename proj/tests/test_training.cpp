#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "crossmark/training.hpp"
#include "support/test_util.hpp"

using namespace crossmark;
using namespace crossmark::testsupport;

namespace {

std::vector<Tensor<float>> make_corpus(int n, std::uint64_t seed0, i64 side = 32) {
  std::vector<Tensor<float>> out;
  for (int i = 0; i < n; ++i) out.push_back(make_synthetic_image(side, seed0 + (std::uint64_t)i));
  return out;
}

RunConfig desk_config() {
  RunConfig cfg;
  cfg.model = tiny_config();
  cfg.dataset.dir = "unused";  // data is injected directly
  cfg.dataset.resize = 32;
  cfg.training.seed = 33;
  cfg.training.batch_size = 4;
  cfg.training.lr = 1e-3;
  cfg.training.lr_decay = 1.0;
  cfg.training.stage1_steps = 6;
  cfg.training.stage2_steps = 30;
  cfg.training.stage3_steps = 6;
  cfg.training.log_every = 2;
  cfg.training.check_every = 0;
  cfg.training.margin = 1.0;
  cfg.training.ablate_steps = 3;
  return cfg;
}

Dataset desk_data(int train_n = 4, int holdout_n = 0) {
  Dataset d;
  d.train = make_corpus(train_n, 300);
  d.holdout = make_corpus(holdout_n, 900);
  return d;
}

bool params_equal(const std::map<std::string, Tensor<float>>& a,
                  const std::map<std::string, Tensor<float>>& b, const std::string& prefix) {
  i64 seen = 0;
  for (const auto& [name, t] : a) {
    if (name.rfind(prefix, 0) != 0) continue;
    ++seen;
    const auto it = b.find(name);
    if (it == b.end() || !bit_equal(t, it->second)) return false;
  }
  return seen > 0;
}

}  // namespace

TEST_SUITE_BEGIN("properties");

TEST_CASE("build_nets: per-component init streams never interfere") {
  const ModelConfig cfg = tiny_config();
  Nets both = build_nets(cfg, 9, true, true, false, false);
  Nets enc_only = build_nets(cfg, 9, false, true, false, false);
  Nets all = build_nets(cfg, 9, true, true, true, true);

  CHECK(both.cross_embedder.has_value());
  CHECK(!both.conv_embedder.has_value());
  CHECK(both.has_embedder());
  CHECK(!enc_only.has_embedder());
  CHECK(all.decoder.has_value());
  CHECK(all.extractor.has_value());

  // The encoder draws the same init whether or not an embedder exists.
  for (const auto& [name, e] : enc_only.ps.entries())
    CHECK(bit_equal(both.ps.get(name)->value, e.var->value));
  // And the embedder likewise ignores the later components.
  for (const auto& [name, e] : both.ps.entries())
    if (name.rfind("embedder.", 0) == 0) CHECK(bit_equal(all.ps.get(name)->value, e.var->value));

  // Same seed reproduces; a different seed does not.
  Nets again = build_nets(cfg, 9, true, true, false, false);
  for (const auto& [name, e] : both.ps.entries())
    CHECK(bit_equal(again.ps.get(name)->value, e.var->value));
  Nets other = build_nets(cfg, 10, true, true, false, false);
  CHECK(!bit_equal(other.ps.get("embedder.out_fc.w")->value,
                   both.ps.get("embedder.out_fc.w")->value));

  ModelConfig conv_cfg = cfg;
  conv_cfg.embedder_type = "conv_baseline";
  Nets conv = build_nets(conv_cfg, 9, true, false, false, false);
  CHECK(conv.conv_embedder.has_value());
  CHECK(!conv.cross_embedder.has_value());
}

TEST_CASE("batch plumbing: stack, slice and rotate") {
  const auto imgs = make_corpus(3, 50, 8);
  const Tensor<float> batch = stack_images(imgs, {2, 0, 1});
  CHECK(batch.shape == std::vector<i64>{3, 8, 8, 3});
  CHECK(bit_equal(slice_batch(batch, 0), imgs[2]));
  CHECK(bit_equal(slice_batch(batch, 1), imgs[0]));
  CHECK(bit_equal(slice_batch(batch, 2), imgs[1]));

  CHECK_THROWS_AS(stack_images(imgs, {}), ConfigError);
  CHECK_THROWS_AS(stack_images(imgs, {3}), ConfigError);
  CHECK_THROWS_AS(stack_images(imgs, {-1}), ConfigError);
  auto ragged = imgs;
  ragged.push_back(make_synthetic_image(16, 1));
  CHECK_THROWS_AS(stack_images(ragged, {0, 3}), ShapeError);
  CHECK_THROWS_AS(slice_batch(batch, 3), ShapeError);
  CHECK_THROWS_AS(slice_batch(Tensor<float>({4}), 0), ShapeError);

  Rng rng(1);
  std::vector<WatermarkBits> wms = {random_watermark(rng), random_watermark(rng)};
  const Tensor<float> wb = stack_watermarks(wms);
  CHECK(wb.shape == std::vector<i64>{2, 8, 8, 1});
  CHECK(bit_equal(slice_batch(wb, 0), wms[0].to_tensor<float>()));
  CHECK(bit_equal(slice_batch(wb, 1), wms[1].to_tensor<float>()));
  CHECK_THROWS_AS(stack_watermarks({}), ConfigError);

  // rotate_first_dim: out[i] = in[(i + shift) mod B].
  const Tensor<float> rot = rotate_first_dim(batch, 1);
  CHECK(bit_equal(slice_batch(rot, 0), slice_batch(batch, 1)));
  CHECK(bit_equal(slice_batch(rot, 2), slice_batch(batch, 0)));
  CHECK(bit_equal(rotate_first_dim(rot, 2), batch));  // rotations compose to identity
  const Tensor<float> neg = rotate_first_dim(batch, -1);
  CHECK(bit_equal(slice_batch(neg, 0), slice_batch(batch, 2)));
  CHECK(bit_equal(rotate_first_dim(batch, 3), batch));
  const Tensor<float> single = stack_images(imgs, {1});
  CHECK(bit_equal(rotate_first_dim(single, 1), single));
}

TEST_CASE("per-sample networks commute with batch rotation bit-exactly") {
  const ModelConfig cfg = tiny_config();
  Nets nets = build_nets(cfg, 21, true, true, false, false);
  const Tensor<float> covers = stack_images(make_corpus(3, 60), {0, 1, 2});
  Rng rng(2);
  std::vector<WatermarkBits> wv = {random_watermark(rng), random_watermark(rng),
                                   random_watermark(rng)};
  const Tensor<float> wms = stack_watermarks(wv);

  const Tensor<float> marked = nets.embed(ad::leaf(covers), ad::leaf(wms))->value;
  const Tensor<float> marked_rot =
      nets.embed(ad::leaf(rotate_first_dim(covers, 1)), ad::leaf(rotate_first_dim(wms, 1)))
          ->value;
  CHECK(bit_equal(marked_rot, rotate_first_dim(marked, 1)));

  const Tensor<float> enc = nets.encoder->encode(ad::leaf(marked))->value;
  const Tensor<float> enc_rot =
      nets.encoder->encode(ad::leaf(rotate_first_dim(marked, 1)))->value;
  CHECK(bit_equal(enc_rot, rotate_first_dim(enc, 1)));
}

TEST_CASE("make_triplet wires anchors, positives and rotated negatives") {
  const ModelConfig cfg = tiny_config();
  Nets nets = build_nets(cfg, 13, true, false, false, false);
  const auto covers = make_corpus(4, 70);
  std::vector<WatermarkBits> wms;
  for (const auto& img : covers) wms.push_back(generate_watermark(img));

  // With every inclusion probability zero the positive equals the anchor.
  CompoundAugmentConfig off;
  Rng r0(5);
  const TripletBatch t0 = make_triplet(covers, wms, nets, off, r0);
  CHECK(t0.covers_a.shape == std::vector<i64>{4, 32, 32, 3});
  CHECK(bit_equal(t0.marked_p, t0.marked_a));
  CHECK(bit_equal(t0.wm_p, t0.wm_a));
  CHECK(bit_equal(t0.covers_n, rotate_first_dim(t0.covers_a, 1)));
  CHECK(bit_equal(t0.wm_n, rotate_first_dim(t0.wm_a, 1)));
  CHECK(bit_equal(t0.marked_n, rotate_first_dim(t0.marked_a, 1)));
  CHECK(!t0.id_a.has_value());
  CHECK(!t0.extracted_a.has_value());

  // The negative really is the embedding of the rotated batch.
  const Tensor<float> direct =
      nets.embed(ad::leaf(t0.covers_n), ad::leaf(t0.wm_n))->value;
  CHECK(bit_equal(t0.marked_n, direct));

  // Real augmentation: deterministic per seed, and it changes the positive.
  const auto aug = CompoundAugmentConfig::defaults();
  Rng r1(6), r2(6), r3(7);
  const TripletBatch ta = make_triplet(covers, wms, nets, aug, r1);
  const TripletBatch tb = make_triplet(covers, wms, nets, aug, r2);
  const TripletBatch tc = make_triplet(covers, wms, nets, aug, r3);
  CHECK(bit_equal(ta.marked_p, tb.marked_p));
  CHECK(!bit_equal(ta.marked_p, tc.marked_p));
  CHECK(!bit_equal(ta.marked_p, ta.marked_a));
  CHECK(bit_equal(ta.marked_a, t0.marked_a));  // anchor path ignores the aug rng

  CHECK_THROWS_AS(make_triplet({covers[0]}, {wms[0]}, nets, off, r1), ConfigError);
  CHECK_THROWS_AS(make_triplet(covers, {wms[0], wms[1]}, nets, off, r1), ConfigError);
  Nets no_emb = build_nets(cfg, 13, false, true, false, false);
  CHECK_THROWS_AS(make_triplet(covers, wms, no_emb, off, r1), CheckpointError);
}

TEST_SUITE_END();

TEST_CASE("complete_triplet fills what the checkpoint stage can compute") {
  const ModelConfig cfg = tiny_config();
  const auto covers = make_corpus(2, 80);
  std::vector<WatermarkBits> wms;
  for (const auto& img : covers) wms.push_back(generate_watermark(img));
  CompoundAugmentConfig off;

  Nets stage2ish = build_nets(cfg, 14, true, true, false, false);
  Rng r1(8);
  TripletBatch t2 = make_triplet(covers, wms, stage2ish, off, r1);
  complete_triplet(t2, stage2ish);
  REQUIRE(t2.id_a.has_value());
  CHECK(t2.id_a->shape == std::vector<i64>{2, 64, 16});
  CHECK(t2.id_p.has_value());
  CHECK(t2.id_n.has_value());
  CHECK(!t2.extracted_a.has_value());  // encoder without decoder: no recovery path
  CHECK(bit_equal(*t2.id_p, *t2.id_a));  // identity augmentation
  CHECK(bit_equal(*t2.id_n, rotate_first_dim(*t2.id_a, 1)));

  Nets stage1ish = build_nets(cfg, 15, true, false, false, true);
  Rng r2(8);
  TripletBatch t1 = make_triplet(covers, wms, stage1ish, off, r2);
  complete_triplet(t1, stage1ish);
  CHECK(!t1.id_a.has_value());
  REQUIRE(t1.extracted_a.has_value());
  CHECK(t1.extracted_a->shape == std::vector<i64>{2, 8, 8, 1});

  Nets full = build_nets(cfg, 16, true, true, true, true);
  Rng r3(8);
  TripletBatch t3 = make_triplet(covers, wms, full, off, r3);
  complete_triplet(t3, full);
  CHECK(t3.id_a.has_value());
  CHECK(t3.extracted_a.has_value());
}

TEST_CASE("extraction path demands a complete pipeline") {
  const ModelConfig cfg = tiny_config();
  const Tensor<float> batch = stack_images(make_corpus(2, 85), {0, 1});

  Nets no_ext = build_nets(cfg, 17, true, true, false, false);
  CHECK_THROWS_AS(extract_logits_eval(no_ext, batch), CheckpointError);

  Nets half_codec = build_nets(cfg, 17, true, true, false, true);  // encoder, no decoder
  CHECK_THROWS_AS(extract_logits_eval(half_codec, batch), CheckpointError);

  Nets direct = build_nets(cfg, 17, true, false, false, true);
  const auto bits = extract_bits_batch(direct, batch);
  CHECK(bits.size() == 2);
  const Tensor<float> logits = extract_logits_eval(direct, batch);
  CHECK(logits.shape == std::vector<i64>{2, 8, 8, 1});
  // Eval extraction is deterministic (no dropout).
  CHECK(bit_equal(extract_logits_eval(direct, batch), logits));
}

TEST_CASE("trainer constructor validates data against the model") {
  RunConfig cfg = desk_config();
  CHECK_THROWS_AS(Trainer(cfg, Dataset{}), ConfigError);  // no images

  Dataset one;
  one.train = make_corpus(1, 300);
  CHECK_THROWS_AS(Trainer(cfg, one), ConfigError);  // batch rotation needs 2

  Dataset wrong;
  wrong.train = make_corpus(2, 300, 16);  // 16x16 into a 32x32 model
  CHECK_THROWS_AS(Trainer(cfg, wrong), ShapeError);

  Dataset bad_holdout = desk_data(2);
  bad_holdout.holdout = make_corpus(1, 900, 16);
  CHECK_THROWS_AS(Trainer(cfg, bad_holdout), ShapeError);

  RunConfig bad_cfg = desk_config();
  bad_cfg.training.lr = -1.0;
  CHECK_THROWS_AS(Trainer(bad_cfg, desk_data()), ConfigError);

  // The watermark pool is the per-image derived watermark, in order.
  Trainer t(desk_config(), desk_data());
  REQUIRE(t.watermark_pool().size() == 4);
  for (size_t i = 0; i < 4; ++i)
    CHECK(t.watermark_pool()[i].to_hex() == generate_watermark(t.data().train[i]).to_hex());
}

TEST_CASE("three-stage pipeline: determinism, freezing, tags and evaluation") {
  RunConfig cfg = desk_config();
  cfg.training.stage2_lr = 9e-4;  // distinct from lr: proves the override routes
  const Dataset data = desk_data();

  // ---- stage 1: two independent runs agree bit-for-bit ----
  Trainer t1(cfg, data);
  const StageResult s1 = t1.stage1_pretrain();
  {
    Trainer t1b(cfg, data);
    const StageResult s1b = t1b.stage1_pretrain();
    CHECK(s1.log == s1b.log);
    REQUIRE(s1.ckpt.arrays.size() == s1b.ckpt.arrays.size());
    for (const auto& [name, t] : s1.ckpt.arrays) CHECK(bit_equal(t, s1b.ckpt.arrays.at(name)));
  }
  CHECK(s1.ckpt.stage == "stage1");
  CHECK(s1.log.at("stage") == "stage1");
  CHECK(s1.ckpt.metrics.at("steps") == 6);
  CHECK(s1.ckpt.metrics.at("early_stopped") == false);
  CHECK(params_equal(s1.ckpt.arrays, s1.ckpt.arrays, "embedder."));
  CHECK(params_equal(s1.ckpt.arrays, s1.ckpt.arrays, "extractor."));
  for (const auto& [name, t] : s1.ckpt.arrays) {
    CHECK((name.rfind("embedder.", 0) == 0 || name.rfind("extractor.", 0) == 0));
    CHECK(t.all_finite());
  }
  // Logged entries carry step/loss/lr at the configured cadence.
  const auto& steps1 = s1.log.at("steps");
  REQUIRE(steps1.size() == 3);  // steps 0, 2, 4
  CHECK(steps1[0].at("step") == 0);
  CHECK(steps1[1].at("step") == 2);
  CHECK(steps1[0].contains("loss"));
  CHECK(steps1[0].contains("lr"));

  // ---- stage-tag and architecture guards ----
  CHECK_THROWS_AS(t1.stage3_finetune(s1.ckpt), CheckpointError);
  {
    RunConfig other = cfg;
    other.model.wm_embed_dim = 16;
    Trainer tx(other, data);
    CHECK_THROWS_AS(tx.stage2_train_encoder(s1.ckpt), CheckpointError);
  }

  // ---- stage 2: embedder adopted frozen, extractor discarded ----
  const StageResult s2 = t1.stage2_train_encoder(s1.ckpt);
  CHECK(s2.ckpt.stage == "stage2");
  CHECK(params_equal(s2.ckpt.arrays, s1.ckpt.arrays, "embedder."));  // frozen copy
  bool any_encoder = false;
  for (const auto& [name, t] : s2.ckpt.arrays) {
    CHECK(name.rfind("extractor.", 0) != 0);
    CHECK(name.rfind("decoder.", 0) != 0);
    any_encoder = any_encoder || name.rfind("encoder.", 0) == 0;
    if (name.rfind("embedder.", 0) == 0) CHECK(s2.ckpt.trainable.at(name) == false);
    if (name.rfind("encoder.", 0) == 0) CHECK(s2.ckpt.trainable.at(name) == true);
  }
  CHECK(any_encoder);
  CHECK_THROWS_AS(t1.stage2_train_encoder(s2.ckpt), CheckpointError);

  // The triplet objective actually comes down over the stage-2 run, and the
  // stage's logged rate is the per-stage override, not the base lr.
  {
    const auto& sl = s2.log.at("steps");
    double first3 = 0.0, last3 = 0.0;
    REQUIRE(sl.size() >= 6);
    for (size_t i = 0; i < 3; ++i) first3 += sl[i].at("loss").get<double>();
    for (size_t i = sl.size() - 3; i < sl.size(); ++i) last3 += sl[i].at("loss").get<double>();
    CHECK(last3 < first3);
    CHECK(sl[0].at("lr").get<double>() == 9e-4);
    CHECK(steps1[0].at("lr").get<double>() == cfg.training.lr);
  }

  // ---- stage 3: encoder unfrozen, decoder + extractor fresh ----
  const StageResult s3 = t1.stage3_finetune(s2.ckpt);
  CHECK(s3.ckpt.stage == "stage3");
  CHECK(params_equal(s3.ckpt.arrays, s1.ckpt.arrays, "embedder."));  // still frozen
  bool any_dec = false, any_ext = false;
  for (const auto& [name, t] : s3.ckpt.arrays) {
    any_dec = any_dec || name.rfind("decoder.", 0) == 0;
    any_ext = any_ext || name.rfind("extractor.", 0) == 0;
    if (name.rfind("embedder.", 0) == 0) CHECK(s3.ckpt.trainable.at(name) == false);
    if (name.rfind("encoder.", 0) == 0) CHECK(s3.ckpt.trainable.at(name) == true);
  }
  CHECK(any_dec);
  CHECK(any_ext);
  CHECK(s3.ckpt.metrics.contains("train_brr_augmented"));

  // ---- nets_from_checkpoint rebuilds each stage exactly ----
  {
    Nets n1 = nets_from_checkpoint(s1.ckpt);
    CHECK(n1.cross_embedder.has_value());
    CHECK(n1.extractor.has_value());
    CHECK(!n1.encoder.has_value());
    for (const auto& [name, e] : n1.ps.entries())
      CHECK(bit_equal(e.var->value, s1.ckpt.arrays.at(name)));

    Nets n2 = nets_from_checkpoint(s2.ckpt);
    CHECK(n2.encoder.has_value());
    CHECK(!n2.extractor.has_value());
    for (const auto& [name, e] : n2.ps.entries()) {
      if (name.rfind("embedder.", 0) == 0) {
        CHECK(!e.trainable);
        CHECK(!e.var->requires_grad);
      }
    }

    Nets n3 = nets_from_checkpoint(s3.ckpt);
    CHECK(n3.encoder.has_value());
    CHECK(n3.decoder.has_value());
    CHECK(n3.extractor.has_value());

    ModelCheckpoint broken = s1.ckpt;
    broken.stage = "stage9";
    CHECK_THROWS_AS(nets_from_checkpoint(broken), CheckpointError);
    ModelCheckpoint missing = s1.ckpt;
    missing.arrays.erase(missing.arrays.begin());
    CHECK_THROWS_AS(nets_from_checkpoint(missing), CheckpointError);
  }

  // ---- evaluation protocol ----
  const auto eval_imgs = make_corpus(5, 500);
  EvalOptions opts;
  opts.seed = 11;

  const MetricReport clean = evaluate(s1.ckpt, eval_imgs, {}, opts);
  CHECK(clean.entries.empty());
  CHECK(clean.brr_percent >= 0.0);
  CHECK(clean.brr_percent <= 100.0);
  CHECK(std::isfinite(clean.psnr_db));
  CHECK_NOTHROW(validate_report_json(clean.to_json()));
  CHECK_NOTHROW(validate_report_csv(clean.to_csv()));

  // An identity-level attack reproduces the clean path exactly.
  const MetricReport ident =
      evaluate(s1.ckpt, eval_imgs, {NoiseSpec{Noise::kCrop, 0.0}}, opts);
  REQUIRE(ident.entries.size() == 1);
  CHECK(ident.entries[0].brr_percent == ident.brr_percent);
  CHECK(std::isinf(ident.entries[0].psnr_db));
  CHECK_NOTHROW(validate_report_json(ident.to_json()));

  // Determinism in the seed, and invariance to evaluation batch size.
  const std::vector<NoiseSpec> mix = {NoiseSpec{Noise::kGaussianBlur, 1.0},
                                      NoiseSpec{Noise::kSaltPepper, 0.1}};
  const MetricReport r1 = evaluate(s1.ckpt, eval_imgs, mix, opts);
  CHECK(evaluate(s1.ckpt, eval_imgs, mix, opts).to_json() == r1.to_json());
  EvalOptions small = opts;
  small.batch = 2;
  CHECK(evaluate(s1.ckpt, eval_imgs, mix, small).to_json() == r1.to_json());
  EvalOptions reseeded = opts;
  reseeded.seed = 12;
  CHECK(evaluate(s1.ckpt, eval_imgs, mix, reseeded).to_json() != r1.to_json());

  // Guard rails.
  CHECK_THROWS_AS(evaluate(s2.ckpt, eval_imgs, {}, opts), CheckpointError);
  CHECK_THROWS_AS(evaluate(s1.ckpt, {}, {}, opts), ConfigError);
  EvalOptions zero = opts;
  zero.repeats = 0;
  CHECK_THROWS_AS(evaluate(s1.ckpt, eval_imgs, {}, zero), ConfigError);
  CHECK_THROWS_AS(evaluate(s1.ckpt, eval_imgs, {NoiseSpec{Noise::kJpeg, 0.5}}, opts),
                  ConfigError);

  // The stage-3 pipeline evaluates end to end.
  const MetricReport full = evaluate(s3.ckpt, eval_imgs, {NoiseSpec{Noise::kHflip, 1.0}}, opts);
  REQUIRE(full.entries.size() == 1);
  CHECK(full.entries[0].noise == "hflip");
  CHECK_NOTHROW(validate_report_json(full.to_json()));

  // ---- invariant-domain ablation plumbing ----
  CompoundAugmentConfig off;  // identity augmentation isolates the plumbing
  const AblationPair ab = ablate_invariant_domain(s1.ckpt, s3.ckpt, eval_imgs, off, opts);
  REQUIRE(ab.direct.entries.size() == 1);
  REQUIRE(ab.invariant.entries.size() == 1);
  CHECK(ab.direct.entries[0].brr_percent == ab.direct.brr_percent);
  CHECK(ab.invariant.entries[0].brr_percent == ab.invariant.brr_percent);
  CHECK(std::isinf(ab.direct.entries[0].psnr_db));
  CHECK(ab.direct.psnr_db == ab.invariant.psnr_db);  // one shared embedder

  CHECK_THROWS_AS(ablate_invariant_domain(s3.ckpt, s3.ckpt, eval_imgs, off, opts),
                  CheckpointError);
  CHECK_THROWS_AS(ablate_invariant_domain(s1.ckpt, s1.ckpt, eval_imgs, off, opts),
                  CheckpointError);
  CHECK_THROWS_AS(ablate_invariant_domain(s1.ckpt, s3.ckpt, {}, off, opts), ConfigError);
  {
    ModelCheckpoint tampered = s3.ckpt;
    tampered.arrays.at("embedder.out_fc.w").data[0] += 0.25f;
    CHECK_THROWS_AS(ablate_invariant_domain(s1.ckpt, tampered, eval_imgs, off, opts),
                    CheckpointError);
  }
}

TEST_CASE("learning-rate schedule decays per epoch in the logs") {
  RunConfig cfg = desk_config();
  cfg.training.lr = 1e-3;
  cfg.training.lr_decay = 0.5;
  cfg.training.epoch_steps = 2;
  cfg.training.stage1_steps = 6;
  cfg.training.log_every = 1;
  Trainer t(cfg, desk_data());
  const StageResult s1 = t.stage1_pretrain();
  const auto& sl = s1.log.at("steps");
  REQUIRE(sl.size() == 6);
  const double expected[] = {1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4};
  for (size_t i = 0; i < 6; ++i) CHECK(sl[i].at("lr").get<double>() == expected[i]);
}

TEST_CASE("stage-1 early stop honours its targets") {
  RunConfig cfg = desk_config();
  cfg.training.stage1_steps = 50;
  cfg.training.check_every = 2;
  // Targets every untrained desk model clears instantly: the point here is
  // the stopping plumbing, not the training quality.
  cfg.training.stage1_target_brr = 1.0;
  cfg.training.stage1_target_psnr = 0.05;
  Trainer t(cfg, desk_data());
  const StageResult s1 = t.stage1_pretrain();
  CHECK(s1.ckpt.metrics.at("early_stopped") == true);
  CHECK(s1.ckpt.metrics.at("steps").get<i64>() <= 4);
}

TEST_CASE("sweep_specs expands noises into escalating level lists") {
  const auto specs = sweep_specs({Noise::kJpeg, Noise::kHflip});
  REQUIRE(specs.size() == 4);
  CHECK(specs[0].name == Noise::kJpeg);
  CHECK(specs[0].level == 90.0);
  CHECK(specs[1].level == 50.0);
  CHECK(specs[2].level == 10.0);
  CHECK(specs[3].name == Noise::kHflip);
  CHECK(specs[3].level == 1.0);

  i64 total = 0;
  for (Noise n : train_noises()) total += (i64)attack_sweep_levels(n).size();
  for (Noise n : test_noises()) total += (i64)attack_sweep_levels(n).size();
  std::vector<Noise> all = train_noises();
  all.insert(all.end(), test_noises().begin(), test_noises().end());
  CHECK((i64)sweep_specs(all).size() == total);
}

TEST_CASE("embedder ablation trains both arms at equal budget") {
  RunConfig cfg = desk_config();
  const Dataset data = desk_data(4, 2);

  CHECK_THROWS_AS(ablate_embedder(cfg, desk_data(4, 0)), ConfigError);  // no holdout

  const EmbedderAblation ab = ablate_embedder(cfg, data);
  CHECK(ab.ckpt_cross.stage == "stage1");
  CHECK(ab.ckpt_conv.stage == "stage1");
  CHECK(ab.ckpt_cross.config.embedder_type == "cross_attention");
  CHECK(ab.ckpt_conv.config.embedder_type == "conv_baseline");
  CHECK(ab.ckpt_cross.metrics.at("steps") == cfg.training.ablate_steps);
  CHECK(ab.ckpt_conv.metrics.at("steps") == cfg.training.ablate_steps);
  CHECK(std::isfinite(ab.cross.psnr_db));
  CHECK(std::isfinite(ab.conv.psnr_db));
  CHECK(ab.residual_mean_cross >= 0.0);
  CHECK(ab.residual_max_cross >= ab.residual_mean_cross);
  CHECK(ab.residual_mean_conv >= 0.0);
  CHECK(ab.residual_max_conv >= ab.residual_mean_conv);

  // The two arms answer with different parameter sets (distinct architectures).
  bool cross_names_differ = false;
  for (const auto& [name, t] : ab.ckpt_cross.arrays)
    if (!ab.ckpt_conv.arrays.count(name)) cross_names_differ = true;
  CHECK(cross_names_differ);
}
