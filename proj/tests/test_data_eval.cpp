// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "genrep/data.hpp"
#include "genrep/eval.hpp"

using namespace genrep;

namespace {

DataConfig small_data() {
    DataConfig c;
    c.n = 400;
    c.seed = 11;
    c.image_size = 32;
    c.noise_sigma = 0.05f;
    return c;
}

EncoderConfig small_enc() {
    EncoderConfig c;
    c.image_size = 32;
    c.patch_size = 8;
    c.dim = 32;
    c.depth = 2;
    c.heads = 4;
    return c;
}

} // namespace

TEST_CASE("dataset generation is bit-deterministic") {
    Dataset a = generate_dataset(small_data());
    Dataset b = generate_dataset(small_data());
    REQUIRE(a.items.size() == b.items.size());
    for (size_t i = 0; i < a.items.size(); ++i) {
        REQUIRE(a.items[i].image == b.items[i].image);
        REQUIRE(a.items[i].spec.seed == b.items[i].spec.seed);
    }
}

TEST_CASE("attribute marginals are uniform within multinomial bounds") {
    DataConfig c = small_data();
    c.n = 4000;
    Dataset ds = generate_dataset(c);
    const std::array<Attr, 6> attrs = {Attr::shape,       Attr::color,    Attr::count,
                                       Attr::orientation, Attr::position, Attr::size};
    for (Attr a : attrs) {
        const int k = attribute_cardinality(a);
        std::vector<int> counts(static_cast<size_t>(k), 0);
        for (const LabeledImage& it : ds.items) {
            ++counts[static_cast<size_t>(attribute_value(it.spec, a))];
        }
        const double expected = static_cast<double>(c.n) / k;
        double chi2 = 0.0;
        for (int v = 0; v < k; ++v) {
            const double d = counts[static_cast<size_t>(v)] - expected;
            chi2 += d * d / expected;
        }
        // chi-square has mean dof and variance 2*dof
        const double dof = k - 1;
        INFO(attribute_name(a) << " chi2 " << chi2);
        CHECK(chi2 < dof + 3.0 * std::sqrt(2.0 * dof) + 1.0);
    }
}

TEST_CASE("splits are 80/10/10 with disjoint per-item seeds") {
    Dataset ds = generate_dataset(small_data());
    CHECK(ds.split_indices(0).size() == 320);
    CHECK(ds.split_indices(1).size() == 40);
    CHECK(ds.split_indices(2).size() == 40);
    std::set<uint64_t> seeds;
    for (const LabeledImage& it : ds.items) {
        REQUIRE(seeds.insert(it.spec.seed).second);
    }
}

TEST_CASE("dataset file round trip and size formula") {
    DataConfig c = small_data();
    c.n = 50;
    Dataset ds = generate_dataset(c);
    const std::string path = "/tmp/genrep_test_dataset.bin";
    save_dataset(ds, path);
    const uint64_t expected =
        dataset_file_size(c.n, c.image_size, dataset_header_line(c).size());
    CHECK(std::filesystem::file_size(path) == expected);

    Dataset back = load_dataset(path);
    REQUIRE(back.items.size() == ds.items.size());
    for (size_t i = 0; i < ds.items.size(); ++i) {
        REQUIRE(back.items[i].image == ds.items[i].image);
        CHECK(back.items[i].split == ds.items[i].split);
        CHECK(back.items[i].spec.color == ds.items[i].spec.color);
        CHECK(back.items[i].spec.seed == ds.items[i].spec.seed);
    }
    std::filesystem::remove(path);
}

TEST_CASE("renders expose each attribute visibly") {
    // changing any single attribute changes the image
    SceneSpec base;
    base.shape_class = 1;
    base.color = 0;
    base.count = 2;
    base.orientation = 1;
    base.position = 2;
    base.size_class = 0;
    base.noise_sigma = 0.0f;
    base.seed = 77;
    std::vector<float> ref = render_scene(base, 32);
    for (Attr a : {Attr::shape, Attr::color, Attr::count, Attr::orientation, Attr::position,
                   Attr::size}) {
        SceneSpec mod = base;
        set_attribute_value(mod, a, (attribute_value(base, a) + 1) % attribute_cardinality(a));
        std::vector<float> other = render_scene(mod, 32);
        INFO(attribute_name(a));
        CHECK(other != ref);
    }
}

TEST_CASE("probe separates linearly separable toy features") {
    const int n = 40, d = 4;
    std::vector<float> X(static_cast<size_t>(n) * d, 0.0f);
    std::vector<int> y(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        y[static_cast<size_t>(i)] = i % 2;
        X[static_cast<size_t>(i) * d] = i % 2 == 0 ? -1.0f : 1.0f;
        X[static_cast<size_t>(i) * d + 1] = 0.1f * static_cast<float>(i % 5);
    }
    LinearProbe p = train_linear_probe(X, y, n, d, 2, 1e-4);
    CHECK(probe_accuracy(p, X, y, n) == doctest::Approx(1.0));
}

TEST_CASE("probe on random features stays at chance level") {
    Rng rng(5);
    double mean_acc = 0.0;
    const int seeds = 20;
    for (int s = 0; s < seeds; ++s) {
        const int n = 240, d = 16, k = 4;
        std::vector<float> X(static_cast<size_t>(2 * n) * d);
        for (float& v : X) {
            v = static_cast<float>(rng.normal());
        }
        std::vector<int> y(static_cast<size_t>(2 * n));
        for (int& v : y) {
            v = rng.uniform_int(k);
        }
        std::vector<float> Xtr(X.begin(), X.begin() + static_cast<size_t>(n) * d);
        std::vector<int> ytr(y.begin(), y.begin() + n);
        LinearProbe p = train_linear_probe(Xtr, ytr, n, d, k, 1e-2);
        std::vector<float> Xte(X.begin() + static_cast<size_t>(n) * d, X.end());
        std::vector<int> yte(y.begin() + n, y.end());
        mean_acc += probe_accuracy(p, Xte, yte, n);
    }
    mean_acc /= seeds;
    // 3 sigma of the mean of 20 binomial(240, 1/4) estimates
    const double sigma = std::sqrt(0.25 * 0.75 / 240.0) / std::sqrt(20.0);
    CHECK(std::abs(mean_acc - 0.25) < 3.0 * sigma + 0.01);
}

TEST_CASE("conflicting duplicated features cannot beat the class prior") {
    const int n = 60, d = 3;
    std::vector<float> X(static_cast<size_t>(n) * d, 1.0f);
    std::vector<int> y(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        y[static_cast<size_t>(i)] = i < 36 ? 0 : (i < 54 ? 1 : 2);
    }
    LinearProbe p = train_linear_probe(X, y, n, d, 3, 1e-3);
    CHECK(probe_accuracy(p, X, y, n) <= 36.0 / 60.0 + 1e-9);
}

TEST_CASE("degenerate single-class labels are rejected") {
    std::vector<float> X(40, 0.5f);
    std::vector<int> y(10, 2);
    CHECK_THROWS_AS(train_linear_probe(X, y, 10, 4, 3, 1e-3), ContractError);
}

TEST_CASE("probe training is deterministic") {
    Rng rng(9);
    const int n = 100, d = 8, k = 3;
    std::vector<float> X(static_cast<size_t>(n) * d);
    for (float& v : X) {
        v = static_cast<float>(rng.normal());
    }
    std::vector<int> y(static_cast<size_t>(n));
    for (int& v : y) {
        v = rng.uniform_int(k);
    }
    LinearProbe a = train_linear_probe(X, y, n, d, k, 1e-3);
    LinearProbe b = train_linear_probe(X, y, n, d, k, 1e-3);
    for (size_t i = 0; i < a.w.size(); ++i) {
        REQUIRE(std::abs(a.w[i] - b.w[i]) < 1e-8);
    }
}

TEST_CASE("evaluation never mutates encoder parameters") {
    Dataset ds = generate_dataset(small_data());
    Encoder enc(small_enc(), 3);
    std::vector<std::vector<float>> before;
    for (Parameter* p : enc.params.all()) {
        before.push_back(p->tensor.vec());
    }
    ProbeReport rep = fine_grained_eval(enc, ds, enc, nullptr, 1e-3, 8);
    CHECK(rep.fine_mean >= 0.0);
    size_t i = 0;
    for (Parameter* p : enc.params.all()) {
        REQUIRE(p->tensor.vec() == before[i]);
        ++i;
    }
}

TEST_CASE("label-shuffled probes sit at chance") {
    DataConfig dc = small_data();
    dc.n = 600;
    Dataset ds = generate_dataset(dc);
    Encoder enc(small_enc(), 3);
    const std::vector<int> train_idx = ds.split_indices(0);
    std::vector<float> feats = extract_cls_features(enc, ds, train_idx);
    const int n = static_cast<int>(train_idx.size());
    Rng rng(13);
    for (Attr a : {Attr::color, Attr::count}) {
        const int k = attribute_cardinality(a);
        std::vector<int> y(static_cast<size_t>(n));
        for (int& v : y) {
            v = rng.uniform_int(k); // shuffled = resampled labels
        }
        std::vector<int> y_test(y.begin() + n / 2, y.end());
        std::vector<float> f_test(feats.begin() + static_cast<size_t>(n / 2) * enc.cfg.dim,
                                  feats.end());
        std::vector<int> y_train(y.begin(), y.begin() + n / 2);
        std::vector<float> f_train(feats.begin(),
                                   feats.begin() + static_cast<size_t>(n / 2) * enc.cfg.dim);
        LinearProbe p = train_linear_probe(f_train, y_train, n / 2, enc.cfg.dim, k, 1e-2);
        const double acc = probe_accuracy(p, f_test, y_test, n - n / 2);
        const double chance = 1.0 / k;
        const double sigma = std::sqrt(chance * (1 - chance) / (n - n / 2));
        INFO(attribute_name(a) << " acc " << acc);
        CHECK(std::abs(acc - chance) < 3.0 * sigma + 0.02);
    }
}

TEST_CASE("paired discrimination: tie-break scores half on equal logits") {
    Encoder enc(small_enc(), 3);
    ProbeSuite suite;
    LinearProbe zero;
    zero.classes = 6;
    zero.dim = enc.cfg.dim;
    zero.w.assign(static_cast<size_t>(6) * (enc.cfg.dim + 1), 0.0);
    suite.probes["color"] = zero;
    Rng rng(17);
    const double acc = paired_discrimination_eval(enc, suite, Attr::color, 40, 32, 0.05f, rng);
    CHECK(acc == doctest::Approx(0.5));
}

TEST_CASE("paired discrimination requires a trained probe") {
    Encoder enc(small_enc(), 3);
    ProbeSuite suite;
    Rng rng(18);
    CHECK_THROWS_AS(paired_discrimination_eval(enc, suite, Attr::count, 4, 32, 0.05f, rng),
                    ContractError);
}
