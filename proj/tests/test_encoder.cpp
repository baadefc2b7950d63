// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "genrep/encoder.hpp"
#include "genrep/optim.hpp"
#include "genrep/vecmath.hpp"
#include "testutil.hpp"

using namespace genrep;
using namespace genrep::test;

namespace {

EncoderConfig small_cfg() {
    EncoderConfig c;
    c.image_size = 16;
    c.patch_size = 4;
    c.dim = 32;
    c.depth = 2;
    c.heads = 4;
    return c;
}

std::vector<float> random_image(int size, Rng& rng) {
    std::vector<float> img(static_cast<size_t>(3) * size * size);
    for (float& v : img) {
        v = static_cast<float>(rng.uniform());
    }
    return img;
}

} // namespace

TEST_CASE("encode shapes: 32px, patch 4 gives 64 locals plus one cls") {
    EncoderConfig c; // defaults
    Encoder enc(c, 1);
    Rng rng(2);
    NoGradGuard ng;
    TokenBundle b = enc.encode(random_image(32, rng));
    CHECK(b.locals.shape() == std::vector<int>{64, 64});
    CHECK(b.cls.shape() == std::vector<int>{64});
    CHECK_FALSE(b.pooled.defined());
}

TEST_CASE("encode rejects wrong image size") {
    Encoder enc(small_cfg(), 1);
    Rng rng(3);
    CHECK_THROWS_AS(enc.encode(random_image(32, rng)), DimError);
}

TEST_CASE("identical images give identical bundles") {
    Encoder enc(small_cfg(), 7);
    Rng rng(4);
    std::vector<float> img = random_image(16, rng);
    NoGradGuard ng;
    TokenBundle a = enc.encode(img);
    TokenBundle b = enc.encode(img);
    CHECK(a.cls.vec() == b.cls.vec());
    CHECK(a.locals.vec() == b.locals.vec());
}

TEST_CASE("cls cosine similarities are finite and bounded") {
    Encoder enc(small_cfg(), 9);
    Rng rng(5);
    NoGradGuard ng;
    std::vector<TokenBundle> bundles;
    for (int i = 0; i < 10; ++i) {
        bundles.push_back(enc.encode(random_image(16, rng)));
    }
    for (size_t i = 0; i < bundles.size(); ++i) {
        for (size_t j = i + 1; j < bundles.size(); ++j) {
            const double c = cosine_sim(bundles[i].cls.data(), bundles[j].cls.data(),
                                        bundles[i].cls.numel());
            REQUIRE(std::isfinite(c));
            REQUIRE(std::abs(c) <= 1.0 + 1e-9);
        }
    }
}

TEST_CASE("condition token counts follow the rounding law") {
    // m = 1 + round(ratio * L) across the sweep
    const int L = 64;
    Rng rng(6);
    for (double ratio : {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}) {
        std::vector<int> idx = select_condition_indices(L, ratio, rng);
        CHECK(static_cast<int>(idx.size()) == static_cast<int>(std::llround(ratio * L)));
        // uniqueness
        std::set<int> s(idx.begin(), idx.end());
        CHECK(s.size() == idx.size());
        for (int i : idx) {
            CHECK(i >= 0);
            CHECK(i < L);
        }
    }
    CHECK(condition_local_count(0.1, 64) == 6);
}

TEST_CASE("select_condition_tokens returns cls-first rows") {
    Encoder enc(small_cfg(), 11);
    Rng rng(7);
    NoGradGuard ng;
    TokenBundle b = enc.encode(random_image(16, rng));
    ConditionSpec spec;
    spec.local_ratio = 0.0;
    Rng sel(1);
    Tensor cond = select_condition_tokens(b, spec, sel);
    CHECK(cond.shape() == std::vector<int>{1, 32});
    CHECK(std::equal(cond.data(), cond.data() + 32, b.cls.data()));

    spec.local_ratio = 1.0;
    Tensor cond_all = select_condition_tokens(b, spec, sel);
    CHECK(cond_all.shape() == std::vector<int>{17, 32});

    spec.local_ratio = 0.1; // round(0.1 * 16) = 2 locals
    Tensor cond_frac = select_condition_tokens(b, spec, sel);
    CHECK(cond_frac.shape() == std::vector<int>{3, 32});
}

TEST_CASE("lora zero-init reproduces the base encoder bit-exactly") {
    Encoder enc(small_cfg(), 13);
    Rng rng(8);
    std::vector<float> img = random_image(16, rng);
    NoGradGuard ng;
    TokenBundle before = enc.encode(img);
    LoraConfig lc;
    lc.rank = 4;
    lc.dropout = 0.0f;
    enc.apply_lora(lc, 99);
    TokenBundle after = enc.encode(img);
    REQUIRE(before.cls.vec() == after.cls.vec());
    REQUIRE(before.locals.vec() == after.locals.vec());
}

TEST_CASE("lora trainable count is rank*(din+dout) per target") {
    EncoderConfig c = small_cfg();
    Encoder enc(c, 13);
    LoraConfig lc;
    lc.rank = 4;
    enc.apply_lora(lc, 99);
    long expected = 0;
    // every attention projection in every block is dim x dim
    expected = static_cast<long>(c.depth) * 4 * lc.rank * (c.dim + c.dim);
    CHECK(trainable_param_count(enc.params.all()) == expected);
    // base weights are frozen
    for (Parameter* p : enc.params.all()) {
        if (p->name.find("lora") == std::string::npos) {
            CHECK_FALSE(p->trainable);
        }
    }
}

TEST_CASE("lora with unmatched targets is a configuration error") {
    Encoder enc(small_cfg(), 13);
    LoraConfig lc;
    lc.targets = {"does.not.exist"};
    CHECK_THROWS_AS(enc.apply_lora(lc, 1), ConfigError);
}

TEST_CASE("merged lora weights reproduce adapter forward") {
    EncoderConfig c = small_cfg();
    Encoder enc(c, 21);
    LoraConfig lc;
    lc.rank = 4;
    lc.dropout = 0.0f;
    enc.apply_lora(lc, 5);
    // drive the adapters away from zero with a few optimizer steps
    AdamW opt(enc.lora_params(), {1e-2, 0.9, 0.999, 1e-8, 0.0});
    Rng rng(31);
    const int L = c.local_tokens();
    for (int step = 0; step < 50; ++step) {
        opt.zero_grad();
        Tensor patches = random_tensor({2, L, c.patch_dim()}, rng, 0.5);
        Tensor tokens = enc.forward_tokens(patches, {});
        Tensor loss = mean_sq_diff(tokens, Tensor::zeros(tokens.shape()));
        loss.backward();
        opt.step();
    }
    Rng rng2(77);
    std::vector<float> img = random_image(16, rng2);
    NoGradGuard ng;
    TokenBundle adapter_fwd = enc.encode(img);

    Encoder merged(c, 21);
    merged.apply_lora(lc, 5);
    merged.copy_params_from(enc); // base and adapter params identical
    merged.merge_lora();
    TokenBundle merged_fwd = merged.encode(img);
    for (size_t i = 0; i < adapter_fwd.cls.numel(); ++i) {
        CHECK(merged_fwd.cls.vec()[i] ==
              doctest::Approx(adapter_fwd.cls.vec()[i]).epsilon(1e-5));
    }
}

TEST_CASE("feature drift: zero for self, two for negated features") {
    EncoderConfig c = small_cfg();
    Encoder enc(c, 17);
    Rng rng(12);
    std::vector<std::vector<float>> imgs;
    for (int i = 0; i < 4; ++i) {
        imgs.push_back(random_image(16, rng));
    }
    CHECK(feature_drift(enc, enc, imgs) == doctest::Approx(0.0).epsilon(1e-9));

    Encoder neg(c, 17);
    neg.copy_params_from(enc);
    // negating the last norm's affine params negates every output feature
    for (float& v : neg.params.find("ln_final.gain")->tensor.vec()) {
        v = -v;
    }
    for (float& v : neg.params.find("ln_final.bias")->tensor.vec()) {
        v = -v;
    }
    CHECK(feature_drift(enc, neg, imgs) == doctest::Approx(2.0).epsilon(1e-6));
    CHECK_THROWS_AS(feature_drift(enc, neg, {}), ContractError);
}

TEST_CASE("attention pooling differs from the class token") {
    EncoderConfig c = small_cfg();
    c.pooling = Pooling::attention_pool;
    Encoder enc(c, 23);
    Rng rng(14);
    NoGradGuard ng;
    for (int i = 0; i < 3; ++i) {
        TokenBundle b = enc.encode(random_image(16, rng));
        REQUIRE(b.pooled.defined());
        double diff = 0.0;
        for (int d = 0; d < c.dim; ++d) {
            diff += std::abs(b.pooled.vec()[static_cast<size_t>(d)] -
                             b.cls.vec()[static_cast<size_t>(d)]);
        }
        CHECK(diff > 1e-3);
    }
}

TEST_CASE("invalid configs are rejected") {
    EncoderConfig c = small_cfg();
    c.patch_size = 5;
    CHECK_THROWS_AS(Encoder(c, 1), ConfigError);
    ConditionSpec bad;
    bad.local_ratio = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
