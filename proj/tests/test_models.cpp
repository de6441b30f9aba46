#include <doctest.h>

#include "crossmark/models.hpp"
#include "support/test_util.hpp"

using namespace crossmark;
using namespace crossmark::testsupport;

namespace {

Tensor<float> unit_batch(std::vector<i64> shape, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor<float>::rand_uniform(std::move(shape), rng);
}

}  // namespace

TEST_CASE("model config derived sizes: full-scale geometry") {
  ModelConfig c;  // defaults = full size
  CHECK(c.cover_grid() == 8);
  CHECK(c.cover_tokens() == 64);
  CHECK(c.cover_dim() == 768);
  CHECK(c.wm_tokens() == 64);
  CHECK(c.wm_in_dim() == 1);
  CHECK(c.fused_dim() == 784);
  CHECK(c.extract_block() == 16);
  c.validate();
}

TEST_CASE("model config validation rejects inconsistent geometry") {
  auto expect_reject = [](auto mutate) {
    ModelConfig c = tiny_config();
    mutate(c);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  expect_reject([](ModelConfig& c) { c.image_size = 30; });        // patch divisibility
  expect_reject([](ModelConfig& c) { c.wm_size = 4; });            // grid mismatch
  expect_reject([](ModelConfig& c) { c.attn_dim = 15; });          // heads divisibility
  expect_reject([](ModelConfig& c) { c.dropout_rate = 1.0; });
  expect_reject([](ModelConfig& c) { c.dropout_rate = -0.1; });
  expect_reject([](ModelConfig& c) { c.embedder_type = "mlp"; });
  expect_reject([](ModelConfig& c) { c.heads = 0; });

  // Token grids match but the extractor entry block does not divide.
  ModelConfig c = tiny_config();
  c.image_size = 12;
  c.patch_cover = 3;
  c.patch_wm = 2;  // wm_grid 4 = cover_grid 4, but 12 % 8 != 0
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("cross-attention embedder: shapes, range, determinism") {
  const ModelConfig cfg = tiny_config();
  ParameterStore<float> ps;
  Rng rng(100);
  CrossAttentionEmbedder<float> emb(ps, "embedder", cfg, rng);

  auto cover = ad::leaf(unit_batch({2, 32, 32, 3}, 1));
  auto wm = ad::leaf(unit_batch({2, 8, 8, 1}, 2));
  for (auto& v : wm->value.data) v = v >= 0.5f ? 1.0f : 0.0f;

  auto marked = emb.embed(cover, wm);
  CHECK(marked->value.shape == std::vector<i64>{2, 32, 32, 3});
  for (float v : marked->value.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  CHECK(emb.embed(cover, wm)->value.data == marked->value.data);  // determinism

  // Same init seed in a fresh store reproduces outputs bit-exactly.
  ParameterStore<float> ps2;
  Rng rng2(100);
  CrossAttentionEmbedder<float> emb2(ps2, "embedder", cfg, rng2);
  CHECK(emb2.embed(cover, wm)->value.data == marked->value.data);

  CHECK_THROWS_AS(emb.embed(ad::leaf(unit_batch({2, 31, 32, 3}, 3)), wm), ShapeError);
  CHECK_THROWS_AS(emb.embed(cover, ad::leaf(unit_batch({2, 4, 4, 1}, 4))), ShapeError);
  CHECK_THROWS_AS(emb.embed(ad::leaf(unit_batch({32, 32, 3}, 5)), wm), ShapeError);
}

TEST_CASE("conv baseline embedder: shapes, range, determinism") {
  const ModelConfig cfg = tiny_config();
  ParameterStore<float> ps;
  Rng rng(200);
  ConvBaselineEmbedder<float> emb(ps, "embedder", cfg, rng);

  auto cover = ad::leaf(unit_batch({2, 32, 32, 3}, 6));
  auto wm = ad::leaf(unit_batch({2, 8, 8, 1}, 7));
  auto marked = emb.embed(cover, wm);
  CHECK(marked->value.shape == std::vector<i64>{2, 32, 32, 3});
  for (float v : marked->value.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  CHECK(emb.embed(cover, wm)->value.data == marked->value.data);
}

TEST_CASE("embedding residual: zero map, single pixel, normalization") {
  auto cover = make_synthetic_image(16, 1);
  auto zero = embedding_residual(cover, cover);
  for (float v : zero.data) CHECK(v == 0.0f);

  auto marked = cover;
  marked.data[(size_t)((5 * 16 + 7) * 3 + 1)] += 0.125f;
  auto res = embedding_residual(cover, marked);
  i64 nonzero = 0;
  for (float v : res.data) nonzero += v != 0.0f;
  CHECK(nonzero == 1);
  CHECK(res.data[(size_t)((5 * 16 + 7) * 3 + 1)] == 1.0f);  // normalized by channel max

  CHECK_THROWS_AS(embedding_residual(cover, Tensor<float>({8, 8, 3})), ShapeError);
  CHECK_THROWS_AS(embedding_residual(Tensor<float>({2, 8, 8, 3}), Tensor<float>({2, 8, 8, 3})),
                  ShapeError);
}

TEST_CASE("encoder and decoder: invariant-domain geometry") {
  const ModelConfig cfg = tiny_config();
  ParameterStore<float> ps;
  Rng rng(300);
  Encoder<float> enc(ps, "encoder", cfg, rng);
  Decoder<float> dec(ps, "decoder", cfg, rng);

  auto marked = ad::leaf(unit_batch({3, 32, 32, 3}, 8));
  auto id = enc.encode(marked);
  CHECK(id->value.shape == std::vector<i64>{3, 64, 16});
  CHECK(id->value.all_finite());
  CHECK(enc.encode(marked)->value.data == id->value.data);

  auto projected = dec.decode(id);
  CHECK(projected->value.shape == std::vector<i64>{3, 32, 32, 3});
  CHECK(dec.decode(id)->value.data == projected->value.data);

  CHECK_THROWS_AS(enc.encode(ad::leaf(unit_batch({3, 16, 16, 3}, 9))), ShapeError);
  CHECK_THROWS_AS(dec.decode(ad::leaf(unit_batch({3, 64, 8}, 10))), ShapeError);
  CHECK_THROWS_AS(dec.decode(ad::leaf(unit_batch({3, 32, 16}, 11))), ShapeError);
}

TEST_CASE("extractor: logit grid shape and dropout modes") {
  const ModelConfig cfg = tiny_config();
  ParameterStore<float> ps;
  Rng rng(400);
  Extractor<float> ext(ps, "extractor", cfg, rng);

  auto x = ad::leaf(unit_batch({2, 32, 32, 3}, 12));
  Rng unused(0);
  auto logits = ext.logits(x, false, unused);
  CHECK(logits->value.shape == std::vector<i64>{2, 8, 8, 1});

  // Eval mode never consumes rng: state is untouched and outputs repeat.
  Rng probe(55);
  const std::string before = probe.state();
  auto again = ext.logits(x, false, probe);
  CHECK(probe.state() == before);
  CHECK(again->value.data == logits->value.data);

  // Train mode is deterministic per seed and differs across seeds.
  Rng d1(7), d2(7), d3(8);
  auto t1 = ext.logits(x, true, d1);
  auto t2 = ext.logits(x, true, d2);
  auto t3 = ext.logits(x, true, d3);
  CHECK(t1->value.data == t2->value.data);
  CHECK(t1->value.data != t3->value.data);

  CHECK_THROWS_AS(ext.logits(ad::leaf(unit_batch({2, 16, 16, 3}, 13)), false, unused),
                  ShapeError);
}
