// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "genrep/optim.hpp"
#include "testutil.hpp"

using namespace genrep;
using namespace genrep::test;

namespace {

Parameter make_param(const char* name, std::vector<int> shape, std::vector<float> data,
                     bool trainable = true) {
    Parameter p;
    p.name = name;
    p.tensor = Tensor::from_data(std::move(shape), std::move(data), true);
    p.trainable = trainable;
    return p;
}

void set_grad(Parameter& p, std::vector<float> g) {
    p.tensor.node->grad = std::move(g);
}

} // namespace

TEST_CASE("first adamw step matches the hand-computed update") {
    Parameter w = make_param("w", {1}, {1.0f});
    AdamW opt({&w}, {0.1, 0.9, 0.999, 1e-8, 0.0});
    set_grad(w, {1.0f});
    opt.step();
    // m_hat = 1, v_hat = 1: w = 1 - 0.1 * 1/(1 + 1e-8)
    CHECK(w.tensor.vec()[0] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("zero gradients with zero decay leave parameters unchanged") {
    Parameter w = make_param("w", {2, 2}, {1, 2, 3, 4});
    AdamW opt({&w}, {0.1, 0.9, 0.999, 1e-8, 0.0});
    set_grad(w, {0, 0, 0, 0});
    opt.step();
    opt.step();
    CHECK(w.tensor.vec() == std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("frozen parameters never change, even with gradients") {
    Parameter w = make_param("w", {2}, {1, 2});
    w.set_trainable(false);
    w.tensor.node->grad = {5.0f, 5.0f};
    AdamW opt({&w}, {0.1, 0.9, 0.999, 1e-8, 0.01});
    opt.step();
    CHECK(w.tensor.vec() == std::vector<float>{1, 2});
}

TEST_CASE("missing gradient on a trainable parameter is a contract error") {
    Parameter w = make_param("w", {2}, {1, 2});
    AdamW opt({&w}, {0.1, 0.9, 0.999, 1e-8, 0.0});
    CHECK_THROWS_AS(opt.step(), ContractError);
}

TEST_CASE("decoupled decay skips rank-1 parameters") {
    Parameter w = make_param("w", {2, 1}, {1, 1});
    Parameter b = make_param("b", {2}, {1, 1});
    AdamW opt({&w, &b}, {0.1, 0.9, 0.999, 1e-8, 0.5});
    set_grad(w, {0, 0});
    set_grad(b, {0, 0});
    opt.step();
    CHECK(w.tensor.vec()[0] == doctest::Approx(1.0 - 0.1 * 0.5));
    CHECK(b.tensor.vec()[0] == 1.0f); // no decay on biases/gains
}

TEST_CASE("state blob round trip") {
    Parameter w = make_param("w", {3}, {1, 2, 3});
    AdamW a({&w}, {0.1, 0.9, 0.999, 1e-8, 0.0});
    set_grad(w, {1, 1, 1});
    a.step();
    std::vector<float> blob = a.state_blob();

    Parameter w2 = make_param("w", {3}, {1, 2, 3});
    AdamW b({&w2}, {0.1, 0.9, 0.999, 1e-8, 0.0});
    b.load_state_blob(blob, a.step_count());
    CHECK(b.step_count() == 1);
    CHECK(b.state_blob() == blob);
}
