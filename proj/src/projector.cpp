// SPDX-License-Identifier: Apache-2.0
#include "genrep/projector.hpp"

namespace genrep {

Projector::Projector(const ProjectorConfig& c, uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(splitmix64(seed ^ 0x9a07ULL));
    fc1_ = make_linear(params, "fc1", cfg.in_dim, cfg.hidden_dim(), rng);
    fc2_ = make_linear(params, "fc2", cfg.hidden_dim(), cfg.out_dim, rng);
}

Tensor Projector::project(const Tensor& tokens, const FwdCtx& ctx) const {
    if (tokens.shape().back() != cfg.in_dim) {
        throw DimError("projector: token width mismatch");
    }
    Tensor h = silu(fc1_.forward(tokens, ctx));
    return fc2_.forward(h, ctx);
}

} // namespace genrep
