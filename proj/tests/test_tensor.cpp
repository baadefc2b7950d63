// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "genrep/tensor.hpp"
#include "testutil.hpp"

using namespace genrep;
using namespace genrep::test;

TEST_CASE("matmul identity and hand arithmetic") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor col = Tensor::from_data({2, 1}, {3, 4});
    Tensor r = matmul(eye, col);
    CHECK(r.vec() == std::vector<float>{3, 4});

    Tensor row = Tensor::from_data({1, 2}, {1, 2});
    Tensor r2 = matmul(row, col);
    CHECK(r2.vec() == std::vector<float>{11});
}

TEST_CASE("matmul rejects mismatched inner extents") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_AS(matmul(a, b), DimError);
}

TEST_CASE("matmul gradient vs finite differences, 20 instances") {
    Rng rng(101);
    for (int i = 0; i < 20; ++i) {
        Tensor a = random_tensor({4, 5}, rng);
        Tensor b = random_tensor({5, 3}, rng);
        Rng wrng(900 + i);
        double err = fd_check(
            [&wrng](std::vector<Tensor>& in) {
                Rng w(wrng);
                return weighted_sum(matmul(in[0], in[1]), w);
            },
            {a, b});
        CHECK(err < 1e-3);
    }
}

TEST_CASE("matmul_ex transpose variants gradients") {
    Rng rng(102);
    for (int i = 0; i < 20; ++i) {
        const bool ta = (i & 1) != 0;
        const bool tb = (i & 2) != 0;
        Tensor a = ta ? random_tensor({5, 4}, rng) : random_tensor({4, 5}, rng);
        Tensor b = tb ? random_tensor({3, 5}, rng) : random_tensor({5, 3}, rng);
        double err = fd_check(
            [ta, tb, i](std::vector<Tensor>& in) {
                Rng w(1000 + i);
                return weighted_sum(matmul_ex(in[0], in[1], ta, tb), w);
            },
            {a, b});
        CHECK(err < 1e-3);
    }
}

TEST_CASE("layer_norm constant input and symmetric example") {
    Tensor x = Tensor::from_data({1, 3}, {1, 1, 1});
    Tensor g = Tensor::from_data({3}, {1, 1, 1});
    Tensor b = Tensor::from_data({3}, {0, 0, 0});
    Tensor y = layer_norm(x, g, b, 1e-5f);
    for (float v : y.vec()) {
        CHECK(std::abs(v) < 1e-4);
    }

    Tensor x2 = Tensor::from_data({1, 2}, {0, 2});
    Tensor g2 = Tensor::from_data({2}, {1, 1});
    Tensor b2 = Tensor::from_data({2}, {0, 0});
    Tensor y2 = layer_norm(x2, g2, b2, 0.0f);
    CHECK(y2.vec()[0] == doctest::Approx(-1.0));
    CHECK(y2.vec()[1] == doctest::Approx(1.0));
}

TEST_CASE("layer_norm rejects zero feature dim tensors") {
    CHECK_THROWS(Tensor::zeros({2, 0}));
}

TEST_CASE("layer_norm gradient, 20 instances") {
    Rng rng(103);
    for (int i = 0; i < 20; ++i) {
        Tensor x = random_tensor({2, 8}, rng);
        Tensor g = random_tensor({8}, rng, 0.5);
        Tensor b = random_tensor({8}, rng, 0.5);
        double err = fd_check(
            [i](std::vector<Tensor>& in) {
                Rng w(1100 + i);
                return weighted_sum(layer_norm(in[0], in[1], in[2], 1e-3f), w);
            },
            {x, g, b});
        CHECK(err < 1e-3);
    }
}

TEST_CASE("attention with a single key returns v regardless of q") {
    Rng rng(104);
    Tensor q = random_tensor({3, 4}, rng);
    Tensor k = random_tensor({1, 4}, rng);
    Tensor v = random_tensor({1, 4}, rng);
    Tensor o = attention(q, k, v, 1);
    for (int i = 0; i < 3; ++i) {
        for (int d = 0; d < 4; ++d) {
            CHECK(o.vec()[static_cast<size_t>(i) * 4 + d] ==
                  doctest::Approx(v.vec()[static_cast<size_t>(d)]));
        }
    }
}

TEST_CASE("attention with identical keys averages v rows") {
    Rng rng(105);
    Tensor q = random_tensor({2, 4}, rng);
    Tensor krow = random_tensor({1, 4}, rng);
    std::vector<float> kd;
    for (int i = 0; i < 5; ++i) {
        kd.insert(kd.end(), krow.vec().begin(), krow.vec().end());
    }
    Tensor k = Tensor::from_data({5, 4}, kd);
    Tensor v = random_tensor({5, 4}, rng);
    Tensor o = attention(q, k, v, 2);
    for (int d = 0; d < 4; ++d) {
        double mean = 0.0;
        for (int i = 0; i < 5; ++i) {
            mean += v.vec()[static_cast<size_t>(i) * 4 + d];
        }
        mean /= 5.0;
        CHECK(o.vec()[static_cast<size_t>(d)] == doctest::Approx(mean).epsilon(1e-4));
        CHECK(o.vec()[4 + static_cast<size_t>(d)] == doctest::Approx(mean).epsilon(1e-4));
    }
}

TEST_CASE("attention rejects indivisible head count") {
    Tensor q = Tensor::zeros({3, 5});
    CHECK_THROWS_AS(attention(q, q, q, 2), ConfigError);
}

TEST_CASE("attention gradient, 20 instances") {
    Rng rng(106);
    for (int i = 0; i < 20; ++i) {
        Tensor q = random_tensor({3, 4}, rng);
        Tensor k = random_tensor({3, 4}, rng);
        Tensor v = random_tensor({3, 4}, rng);
        double err = fd_check(
            [i](std::vector<Tensor>& in) {
                Rng w(1200 + i);
                return weighted_sum(attention(in[0], in[1], in[2], 1), w);
            },
            {q, k, v});
        CHECK(err < 1e-3);
    }
}

TEST_CASE("batched attention gradient with distinct kv length") {
    Rng rng(107);
    for (int i = 0; i < 5; ++i) {
        Tensor q = random_tensor({2, 3, 8}, rng);
        Tensor k = random_tensor({2, 5, 8}, rng);
        Tensor v = random_tensor({2, 5, 8}, rng);
        double err = fd_check(
            [i](std::vector<Tensor>& in) {
                Rng w(1300 + i);
                return weighted_sum(attention(in[0], in[1], in[2], 2), w);
            },
            {q, k, v});
        CHECK(err < 1e-3);
    }
}

TEST_CASE("backward seeds: sum gives ones, sum of squares gives 2x") {
    Tensor x = Tensor::from_data({2, 3}, {1, -2, 3, 0.5f, 0, -1}, true);
    Tensor loss = sum_all(x);
    loss.backward();
    for (float g : x.grad()) {
        CHECK(g == 1.0f);
    }

    Tensor x2 = Tensor::from_data({2}, {1, 2}, true);
    Tensor loss2 = sum_all(mul(x2, x2));
    loss2.backward();
    CHECK(x2.grad()[0] == doctest::Approx(2.0));
    CHECK(x2.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    CHECK_THROWS_AS(x.backward(), ContractError);
}

TEST_CASE("repeated backward accumulates") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor loss = sum_all(x);
    loss.backward();
    loss.backward();
    CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("elementwise and shape op gradients, 20 instances each") {
    Rng rng(108);
    auto check20 = [&](const char* name, auto make_inputs, auto op) {
        for (int i = 0; i < 20; ++i) {
            std::vector<Tensor> inputs = make_inputs(rng);
            double err = fd_check(
                [&op, i](std::vector<Tensor>& in) {
                    Rng w(1400 + i);
                    return weighted_sum(op(in), w);
                },
                inputs);
            INFO(name << " instance " << i);
            CHECK(err < 1e-3);
        }
    };
    check20(
        "add", [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4}, r), random_tensor({3, 4}, r)}; },
        [](std::vector<Tensor>& in) { return add(in[0], in[1]); });
    check20(
        "sub", [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4}, r), random_tensor({3, 4}, r)}; },
        [](std::vector<Tensor>& in) { return sub(in[0], in[1]); });
    check20(
        "mul", [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4}, r), random_tensor({3, 4}, r)}; },
        [](std::vector<Tensor>& in) { return mul(in[0], in[1]); });
    check20(
        "scale", [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4}, r)}; },
        [](std::vector<Tensor>& in) { return scale(in[0], 1.7f); });
    check20(
        "silu", [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4}, r)}; },
        [](std::vector<Tensor>& in) { return silu(in[0]); });
    check20(
        "gelu", [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4}, r)}; },
        [](std::vector<Tensor>& in) { return gelu(in[0]); });
    check20(
        "reshape", [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4}, r)}; },
        [](std::vector<Tensor>& in) { return reshape(in[0], {2, 6}); });
    check20(
        "concat_axis1",
        [](Rng& r) {
            return std::vector<Tensor>{random_tensor({2, 3, 4}, r), random_tensor({2, 2, 4}, r)};
        },
        [](std::vector<Tensor>& in) { return concat_axis1(in[0], in[1]); });
    check20(
        "slice_axis1", [](Rng& r) { return std::vector<Tensor>{random_tensor({2, 5, 3}, r)}; },
        [](std::vector<Tensor>& in) { return slice_axis1(in[0], 1, 3); });
    check20(
        "gather_axis1", [](Rng& r) { return std::vector<Tensor>{random_tensor({2, 5, 3}, r)}; },
        [](std::vector<Tensor>& in) {
            return gather_axis1(in[0], {4, 0, 4, 2, 2, 1}, 3);
        });
    check20(
        "tile_token", [](Rng& r) { return std::vector<Tensor>{random_tensor({6}, r)}; },
        [](std::vector<Tensor>& in) { return tile_token(in[0], 3, 2); });
    check20(
        "embed_rows", [](Rng& r) { return std::vector<Tensor>{random_tensor({5, 4}, r)}; },
        [](std::vector<Tensor>& in) { return embed_rows(in[0], {0, 3, 3, 1}, 2, 2); });
    check20(
        "add_posemb",
        [](Rng& r) {
            return std::vector<Tensor>{random_tensor({2, 4, 3}, r), random_tensor({4, 3}, r)};
        },
        [](std::vector<Tensor>& in) { return add_posemb(in[0], in[1]); });
    check20(
        "mean_axis1", [](Rng& r) { return std::vector<Tensor>{random_tensor({2, 5, 3}, r)}; },
        [](std::vector<Tensor>& in) { return mean_axis1(in[0]); });
    check20(
        "modulate",
        [](Rng& r) {
            return std::vector<Tensor>{random_tensor({2, 4, 3}, r), random_tensor({2, 3}, r),
                                       random_tensor({2, 3}, r)};
        },
        [](std::vector<Tensor>& in) { return modulate(in[0], in[1], in[2]); });
    check20(
        "gated_add",
        [](Rng& r) {
            return std::vector<Tensor>{random_tensor({2, 4, 3}, r), random_tensor({2, 3}, r),
                                       random_tensor({2, 4, 3}, r)};
        },
        [](std::vector<Tensor>& in) { return gated_add(in[0], in[1], in[2]); });
    check20(
        "linear",
        [](Rng& r) {
            return std::vector<Tensor>{random_tensor({2, 3, 4}, r), random_tensor({5, 4}, r),
                                       random_tensor({5}, r)};
        },
        [](std::vector<Tensor>& in) { return linear(in[0], in[1], &in[2]); });
    check20(
        "mean_sq_diff",
        [](Rng& r) {
            return std::vector<Tensor>{random_tensor({3, 4}, r), random_tensor({3, 4}, r)};
        },
        [](std::vector<Tensor>& in) { return mean_sq_diff(in[0], in[1]); });
    check20(
        "cross_entropy", [](Rng& r) { return std::vector<Tensor>{random_tensor({4, 5}, r)}; },
        [](std::vector<Tensor>& in) {
            return cross_entropy_logits(in[0], {1, 0, 4, 2});
        });
}

TEST_CASE("dropout scales kept entries and zeroes the rest") {
    Rng rng(109);
    Tensor x = Tensor::full({100, 10}, 1.0f);
    Rng drng(42);
    Tensor y = dropout(x, 0.3f, drng, true);
    int kept = 0;
    for (float v : y.vec()) {
        if (v != 0.0f) {
            CHECK(v == doctest::Approx(1.0f / 0.7f));
            ++kept;
        }
    }
    CHECK(kept > 600);
    CHECK(kept < 800);
    Rng drng2(42);
    Tensor ye = dropout(x, 0.3f, drng2, false);
    CHECK(ye.vec() == x.vec());
}

TEST_CASE("non-finite guard raises when enabled") {
    set_check_finite(true);
    Tensor a = Tensor::from_data({2}, {1.0f, 3.0e38f});
    Tensor b = Tensor::from_data({2}, {1.0f, 3.0e38f});
    CHECK_THROWS_AS(add(a, b), ContractError);
    set_check_finite(false);
    Tensor ok = add(a, b);
    CHECK(std::isinf(ok.vec()[1]));
}

TEST_CASE("cross entropy label bounds") {
    Tensor logits = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(cross_entropy_logits(logits, {0, 3}), ContractError);
}
