// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "genrep/nn.hpp"

namespace genrep {

struct ProjectorConfig {
    int in_dim = 64;
    int out_dim = 128;
    int hidden = 0; // 0 -> 2 * out_dim

    int hidden_dim() const { return hidden > 0 ? hidden : 2 * out_dim; }
    void validate() const {
        if (in_dim < 1 || out_dim < 1 || hidden_dim() < 1) {
            throw ConfigError("projector: dims must be >= 1");
        }
    }
};

// Row-wise two-layer MLP bridging encoder features into the denoiser's
// condition space.
class Projector {
public:
    Projector(const ProjectorConfig& cfg, uint64_t seed);

    // tokens [m, in_dim] or [B, m, in_dim]
    Tensor project(const Tensor& tokens, const FwdCtx& ctx = {}) const;

    ProjectorConfig cfg;
    ParamRegistry params;

private:
    Linear fc1_;
    Linear fc2_;
};

} // namespace genrep
