// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "genrep/projector.hpp"
#include "testutil.hpp"

using namespace genrep;
using namespace genrep::test;

TEST_CASE("zero weights give zero output") {
    ProjectorConfig c{8, 12, 0};
    Projector p(c, 3);
    for (Parameter* par : p.params.all()) {
        std::fill(par->tensor.vec().begin(), par->tensor.vec().end(), 0.0f);
    }
    Rng rng(1);
    Tensor out = p.project(random_tensor({5, 8}, rng));
    for (float v : out.vec()) {
        CHECK(v == 0.0f);
    }
    CHECK(out.shape() == std::vector<int>{5, 12});
}

TEST_CASE("row-wise purity: identical rows map to identical rows") {
    ProjectorConfig c{8, 12, 0};
    Projector p(c, 5);
    Rng rng(2);
    Tensor row = random_tensor({1, 8}, rng);
    std::vector<float> five;
    for (int i = 0; i < 5; ++i) {
        five.insert(five.end(), row.vec().begin(), row.vec().end());
    }
    Tensor out1 = p.project(row);
    Tensor out5 = p.project(Tensor::from_data({5, 8}, five));
    for (int i = 0; i < 5; ++i) {
        for (int d = 0; d < 12; ++d) {
            REQUIRE(out5.vec()[static_cast<size_t>(i) * 12 + d] ==
                    out1.vec()[static_cast<size_t>(d)]);
        }
    }
}

TEST_CASE("row permutation equivariance") {
    ProjectorConfig c{6, 10, 0};
    Projector p(c, 7);
    Rng rng(3);
    Tensor x = random_tensor({4, 6}, rng);
    std::vector<float> perm_data;
    const std::array<int, 4> perm = {2, 0, 3, 1};
    for (int i : perm) {
        perm_data.insert(perm_data.end(), x.vec().begin() + static_cast<size_t>(i) * 6,
                         x.vec().begin() + static_cast<size_t>(i + 1) * 6);
    }
    Tensor y = p.project(x);
    Tensor yp = p.project(Tensor::from_data({4, 6}, perm_data));
    for (int i = 0; i < 4; ++i) {
        for (int d = 0; d < 10; ++d) {
            REQUIRE(yp.vec()[static_cast<size_t>(i) * 10 + d] ==
                    y.vec()[static_cast<size_t>(perm[static_cast<size_t>(i)]) * 10 + d]);
        }
    }
}

TEST_CASE("projector gradient on a random 2x8 input") {
    ProjectorConfig c{8, 6, 0};
    Projector p(c, 9);
    Rng rng(4);
    for (int i = 0; i < 20; ++i) {
        Tensor x = random_tensor({2, 8}, rng);
        double err = fd_check(
            [&p, i](std::vector<Tensor>& in) {
                Rng w(1500 + i);
                return weighted_sum(p.project(in[0]), w);
            },
            {x});
        CHECK(err < 1e-3);
    }
}

TEST_CASE("width mismatch is a dimension error") {
    ProjectorConfig c{8, 6, 0};
    Projector p(c, 9);
    CHECK_THROWS_AS(p.project(Tensor::zeros({2, 7})), DimError);
}
