// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "genrep/rng.hpp"
#include "genrep/tensor.hpp"

namespace genrep::test {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double sigma = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (float& v : t.vec()) {
        v = static_cast<float>(rng.normal() * sigma);
    }
    return t;
}

// Scalar loss built from op outputs so every entry of every input gets a
// nonzero pull: loss = sum(w .* out) with fixed random weights.
inline Tensor weighted_sum(const Tensor& out, Rng& rng) {
    Tensor w = random_tensor(out.shape(), rng);
    return sum_all(mul(out, w));
}

using LossFn = std::function<Tensor(std::vector<Tensor>&)>;

// Central finite differences against the analytic gradient. Relative error
// uses max(1, |g|, |fd|) as the scale. Checks every entry unless
// max_entries caps it (sampled deterministically).
inline double fd_check(const LossFn& fn, std::vector<Tensor> inputs, double eps = 1e-3,
                       int max_entries = 0) {
    for (Tensor& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tensor loss = fn(inputs);
    loss.backward();

    Rng pick(12345);
    double max_rel = 0.0;
    for (Tensor& t : inputs) {
        const size_t n = t.numel();
        std::vector<size_t> entries;
        if (max_entries <= 0 || static_cast<size_t>(max_entries) >= n) {
            for (size_t i = 0; i < n; ++i) {
                entries.push_back(i);
            }
        } else {
            for (int i = 0; i < max_entries; ++i) {
                entries.push_back(static_cast<size_t>(pick.uniform_int(static_cast<int>(n))));
            }
        }
        const std::vector<float> g =
            t.grad().empty() ? std::vector<float>(n, 0.0f) : t.grad();
        for (size_t i : entries) {
            const float orig = t.data()[i];
            double lp, lm;
            {
                NoGradGuard ng;
                t.data()[i] = static_cast<float>(orig + eps);
                lp = fn(inputs).item();
                t.data()[i] = static_cast<float>(orig - eps);
                lm = fn(inputs).item();
                t.data()[i] = orig;
            }
            const double fd = (lp - lm) / (2.0 * eps);
            const double a = g[i];
            const double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

} // namespace genrep::test
