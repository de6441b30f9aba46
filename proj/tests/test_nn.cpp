#include <doctest.h>

#include <cmath>

#include "crossmark/nn.hpp"
#include "support/test_util.hpp"

using namespace crossmark;
using namespace crossmark::testsupport;

TEST_SUITE_BEGIN("properties");

TEST_CASE("patchify/unpatchify round-trip exactly on assorted shapes") {
  struct Case {
    i64 h, w, c, patch;
  };
  for (const Case cs : {Case{8, 8, 3, 2}, Case{12, 8, 1, 4}, Case{16, 16, 3, 16},
                        Case{8, 8, 1, 1}, Case{6, 9, 2, 3}}) {
    Rng rng(cs.h * 100 + cs.w);
    auto img = Tensor<float>::rand_uniform({cs.h, cs.w, cs.c}, rng);
    auto toks = patchify(img, cs.patch);
    CHECK(toks.tokens() == (cs.h / cs.patch) * (cs.w / cs.patch));
    CHECK(toks.dim() == cs.patch * cs.patch * cs.c);
    CHECK(bit_equal(unpatchify(toks), img));
  }
}

TEST_CASE("patchify token layout on the 2x2 reference") {
  Tensor<float> img({2, 2, 1}, std::vector<float>{1.0f, 2.0f, 3.0f, 4.0f});
  auto toks = patchify(img, 1);
  CHECK(toks.data.shape == std::vector<i64>{4, 1});
  CHECK(toks.data.data == std::vector<float>{1.0f, 2.0f, 3.0f, 4.0f});
  CHECK(bit_equal(unpatchify(toks), img));
}

TEST_SUITE_END();

TEST_CASE("patchify rejects bad shapes") {
  Tensor<float> img({9, 8, 3});
  CHECK_THROWS_AS(patchify(img, 2), ShapeError);
  CHECK_THROWS_AS(patchify(Tensor<float>({4, 4}), 2), ShapeError);

  TokenSeq<float> no_grid;
  no_grid.data = Tensor<float>({4, 4});
  CHECK_THROWS_AS(unpatchify(no_grid), ShapeError);

  auto toks = patchify(Tensor<float>({4, 4, 1}), 2);
  toks.grid->channels = 3;  // now D no longer matches the grid
  CHECK_THROWS_AS(unpatchify(toks), ShapeError);
}

TEST_CASE("parameter store: creation, lookup, freezing, removal") {
  ParameterStore<float> ps;
  Rng rng(1);
  auto w = ps.create("enc.w", Tensor<float>::randn({4, 4}, rng));
  ps.create("enc.b", Tensor<float>::zeros({4}));
  ps.create("dec.w", Tensor<float>::randn({4, 4}, rng));

  CHECK_THROWS_AS(ps.create("enc.w", Tensor<float>::zeros({1})), ConfigError);
  CHECK_THROWS_AS(ps.get("missing"), ConfigError);
  CHECK(ps.has("enc.b"));
  CHECK(ps.get("enc.w") == w);
  CHECK(ps.total_params() == 16 + 4 + 16);
  CHECK(w->requires_grad);

  ps.set_trainable("enc.", false);
  CHECK(!ps.entries().at("enc.w").trainable);
  CHECK(!ps.entries().at("enc.w").var->requires_grad);
  CHECK(!ps.entries().at("enc.b").trainable);
  CHECK(ps.entries().at("dec.w").trainable);

  ps.set_trainable("enc.", true);
  CHECK(ps.entries().at("enc.w").var->requires_grad);

  ps.remove_prefix("enc.");
  CHECK(!ps.has("enc.w"));
  CHECK(!ps.has("enc.b"));
  CHECK(ps.has("dec.w"));
}

TEST_CASE("channel_fc applies the same affine map to every token") {
  ParameterStore<float> ps;
  Rng rng(2);
  ChannelFC<float> fc(ps, "fc", 3, 2, rng, 0.25);
  CHECK(fc.b->value.data == std::vector<float>{0.25f, 0.25f});

  auto x = ad::leaf(Tensor<float>::randn({2, 4, 3}, rng));
  auto y = fc(x);
  CHECK(y->value.shape == std::vector<i64>{2, 4, 2});
  for (i64 r = 0; r < 8; ++r)
    for (i64 o = 0; o < 2; ++o) {
      double acc = 0.25;
      for (i64 k = 0; k < 3; ++k)
        acc += (double)x->value.data[(size_t)(r * 3 + k)] *
               (double)fc.w->value.data[(size_t)(k * 2 + o)];
      CHECK((double)y->value.data[(size_t)(r * 2 + o)] == doctest::Approx(acc).epsilon(1e-5));
    }
}

TEST_CASE("identity channel_fc is the identity map") {
  ParameterStore<float> ps;
  Rng rng(3);
  ChannelFC<float> fc(ps, "fc", 3, 3, rng);
  fc.w->value.fill(0.0f);
  for (i64 i = 0; i < 3; ++i) fc.w->value.data[(size_t)(i * 3 + i)] = 1.0f;
  auto x = ad::leaf(Tensor<float>::randn({1, 5, 3}, rng));
  CHECK(max_abs_diff(fc(x)->value, x->value) < 1e-6);
}

TEST_CASE("init_fan_in scales variance by fan-in") {
  Rng rng(4);
  auto t = init_fan_in<float>({100, 100}, 64, rng);
  double acc = 0;
  for (float v : t.data) acc += (double)v * (double)v;
  const double stddev = std::sqrt(acc / (double)t.numel());
  CHECK(stddev == doctest::Approx(1.0 / 8.0).epsilon(0.05));
}

TEST_CASE("multi-head attention: shapes, row sums, degenerate cases") {
  ParameterStore<float> ps;
  Rng rng(5);
  const i64 qd = 6, kvd = 4, ad_ = 8, heads = 2, od = 6;
  MultiHeadAttention<float> mha(ps, "mha", qd, kvd, ad_, heads, od, rng);

  auto q = ad::leaf(Tensor<float>::randn({2, 5, qd}, rng));
  auto kv = ad::leaf(Tensor<float>::randn({2, 3, kvd}, rng));
  auto res = mha.forward_with_weights(q, kv);
  CHECK(res.out->value.shape == std::vector<i64>{2, 5, od});
  CHECK(res.weights->value.shape == std::vector<i64>{2 * heads, 5, 3});
  for (i64 r = 0; r < 2 * heads * 5; ++r) {
    double sum = 0;
    for (i64 k = 0; k < 3; ++k) sum += (double)res.weights->value.data[(size_t)(r * 3 + k)];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }

  SUBCASE("two kv tokens with identical keys attend 0.5/0.5") {
    Tensor<float> twin({1, 2, kvd});
    Rng r2(9);
    for (i64 k = 0; k < kvd; ++k) {
      const float v = (float)r2.normal();
      twin.data[(size_t)k] = v;
      twin.data[(size_t)(kvd + k)] = v;
    }
    auto q1 = ad::leaf(Tensor<float>::randn({1, 4, qd}, rng));
    auto w = mha.forward_with_weights(q1, ad::leaf(twin)).weights;
    for (i64 i = 0; i < w->value.numel(); ++i)
      CHECK((double)w->value.data[(size_t)i] == doctest::Approx(0.5).epsilon(1e-6));
  }

  SUBCASE("single kv token with identity value path returns that token") {
    ParameterStore<float> ps2;
    Rng r3(11);
    MultiHeadAttention<float> m2(ps2, "m", 3, 4, 4, 2, 4, r3);
    m2.wv->value.fill(0.0f);
    for (i64 i = 0; i < 4; ++i) m2.wv->value.data[(size_t)(i * 4 + i)] = 1.0f;
    m2.bv->value.fill(0.0f);
    m2.wo->value.fill(0.0f);
    for (i64 i = 0; i < 4; ++i) m2.wo->value.data[(size_t)(i * 4 + i)] = 1.0f;
    m2.bo->value.fill(0.0f);
    auto q1 = ad::leaf(Tensor<float>::randn({1, 5, 3}, r3));
    auto kv1 = ad::leaf(Tensor<float>::randn({1, 1, 4}, r3));
    auto out = m2(q1, kv1);
    for (i64 t = 0; t < 5; ++t)
      for (i64 k = 0; k < 4; ++k)
        CHECK((double)out->value.data[(size_t)(t * 4 + k)] ==
              doctest::Approx((double)kv1->value.data[(size_t)k]).epsilon(1e-5));
  }

  SUBCASE("NaN input raises a numeric error") {
    auto bad = ad::leaf(Tensor<float>::zeros({2, 3, kvd}));
    bad->value.data[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(mha(q, bad), NumericError);
  }

  SUBCASE("attention width must divide by heads") {
    ParameterStore<float> ps3;
    Rng r4(12);
    CHECK_THROWS_AS(MultiHeadAttention<float>(ps3, "x", 4, 4, 6, 4, 4, r4), ConfigError);
  }
}

TEST_CASE("transformer block preserves shape and validates width") {
  ParameterStore<float> ps;
  Rng rng(6);
  TransformerBlock<float> blk(ps, "blk", 8, 2, rng);
  auto x = ad::leaf(Tensor<float>::randn({2, 7, 8}, rng));
  auto y = blk(x);
  CHECK(y->value.shape == x->value.shape);
  auto y2 = blk(x);
  CHECK(y2->value.data == y->value.data);  // determinism

  auto bad = ad::leaf(Tensor<float>::randn({2, 7, 6}, rng));
  CHECK_THROWS_AS(blk(bad), ShapeError);
}

TEST_CASE("conv layer rejects even kernels") {
  ParameterStore<float> ps;
  Rng rng(7);
  CHECK_THROWS_AS(Conv2d<float>(ps, "c", 2, 3, 4, rng), ConfigError);
}

TEST_CASE("adam minimizes a quadratic and honors freezing") {
  ParameterStore<float> ps;
  auto x = ps.create("x", Tensor<float>({4}, std::vector<float>{1.5f, -2.0f, 0.7f, 3.0f}));
  auto frozen = ps.create("frozen", Tensor<float>({2}, std::vector<float>{5.0f, -5.0f}), false);
  const auto frozen_before = frozen->value.data;

  Adam<float> opt;
  for (int step = 0; step < 400; ++step) {
    ps.zero_grads();
    auto target = ad::leaf(Tensor<float>::zeros({4}));
    auto loss = ad::mse(x, target);
    ad::backward(loss);
    opt.step(ps, 0.05);
  }
  for (float v : x->value.data) CHECK(std::abs(v) < 1e-3);
  CHECK(frozen->value.data == frozen_before);  // bit-identical, never touched
  CHECK(opt.steps_taken() == 400);

  opt.reset();
  CHECK(opt.steps_taken() == 0);
}

TEST_CASE("adam skips parameters that received no gradient") {
  ParameterStore<float> ps;
  auto used = ps.create("used", Tensor<float>({2}, std::vector<float>{1.0f, 1.0f}));
  auto unused = ps.create("unused", Tensor<float>({2}, std::vector<float>{2.0f, 2.0f}));
  const auto unused_before = unused->value.data;

  Adam<float> opt;
  ps.zero_grads();
  ad::backward(ad::mse(used, ad::leaf(Tensor<float>::zeros({2}))));
  opt.step(ps, 0.1);
  CHECK(unused->value.data == unused_before);
  CHECK(used->value.data != std::vector<float>{1.0f, 1.0f});
}
