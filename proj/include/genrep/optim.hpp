// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "genrep/nn.hpp"

namespace genrep {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled weight decay, applied only to trainable rank>=2 weights
// (never to gains or biases). Frozen parameters are never touched.
class AdamW {
public:
    AdamW(std::vector<Parameter*> params, AdamWConfig cfg);

    void zero_grad();
    void step();
    int64_t step_count() const { return t_; }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }

    // flat state blobs for checkpoint/resume
    std::vector<float> state_blob() const;
    void load_state_blob(const std::vector<float>& blob, int64_t step);

private:
    std::vector<Parameter*> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    int64_t t_ = 0;
};

} // namespace genrep
