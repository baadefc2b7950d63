// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "genrep/encoder.hpp"
#include "genrep/nn.hpp"
#include "genrep/projector.hpp"

namespace genrep {

enum class TimeMode { uniform, scaled_logit_normal };

// t = sigmoid(scale * eps)
double scaled_logit_normal_t(double scale, double eps);

struct TimestepSampler {
    TimeMode mode = TimeMode::scaled_logit_normal;
    double scale = 1.0;

    void validate() const {
        if (scale <= 0.0) {
            throw ConfigError("timestep sampler: scale must be positive");
        }
    }
    // uniform: U(0,1); scaled: sigmoid(scale * eps), eps ~ N(0,1).
    // Draws are strictly inside (0,1).
    double sample(Rng& rng) const;
};

struct FlowDenoiserConfig {
    int n_mm = 2;
    int n_single = 4;
    int width = 128;
    int heads = 4;
    int patch = 4;      // latent patch over pixels
    int image_size = 32;

    int grid() const { return image_size / patch; }
    int latent_tokens() const { return grid() * grid(); }
    int token_dim() const { return 3 * patch * patch; }
    void validate() const;
};

// Straight-path interpolant t*x1 + (1-t)*x0; differentiable in x0/x1.
Tensor interpolate(const Tensor& x0, const Tensor& x1, double t);

// FLUX-style velocity model: dual-stream blocks over (latent, condition)
// followed by single-stream blocks over the concatenated sequence, all
// modulated by adaptive layer norm driven by time + pooled condition.
class FlowDenoiser {
public:
    FlowDenoiser(const FlowDenoiserConfig& cfg, uint64_t seed);

    // xt [B, Lt, token_dim], t per sample, cond [B, m, width]
    Tensor forward(const Tensor& xt, const std::vector<double>& t, const Tensor& cond,
                   const FwdCtx& ctx = {}) const;

    FlowDenoiserConfig cfg;
    ParamRegistry params;

private:
    struct MmBlock {
        Linear ada_x, ada_c;
        Linear qx, kx, vx, ox;
        Linear qc, kc, vc, oc;
        Mlp mlp_x, mlp_c;
    };
    struct SingleBlock {
        Linear ada;
        Linear q, k, v, o;
        Mlp mlp;
    };

    Tensor time_embedding(const std::vector<double>& t) const;
    Tensor modulation_vector(const std::vector<double>& t, const Tensor& cond,
                             const FwdCtx& ctx) const;

    Linear embed_;
    Parameter* pos_emb_ = nullptr;
    Mlp time_mlp_;
    std::vector<MmBlock> mm_;
    std::vector<SingleBlock> single_;
    Linear ada_out_;
    Linear head_;
};

// Per-sample training objective: draw t and x0, form the interpolant, and
// regress the velocity target x1 - x0 under the projected encoder condition.
// Averaged over elements and the batch. The encoder runs without gradients
// unless encoder_grad is set.
Tensor flow_matching_loss(const std::vector<const std::vector<float>*>& images,
                          const Encoder& encoder, const Projector& projector,
                          const FlowDenoiser& denoiser, const TimestepSampler& sampler,
                          const ConditionSpec& cspec, Rng& rng, const FwdCtx& ctx,
                          bool encoder_grad,
                          const std::vector<const std::vector<float>*>* cond_images = nullptr);

struct EulerResult {
    std::vector<float> latent; // [Lt * token_dim]
    std::vector<float> image;  // de-patchified, clamped to [0,1]
};

// Integrates dz = g(z, t, cond) dt from 0 to 1 with midpoint timestamps,
// starting from x0 ~ N(0,I).
EulerResult euler_sample(const FlowDenoiser& denoiser, const Tensor& cond, int steps, Rng& rng);

// Cosine similarity of the reference encoder's global features of the two
// images; higher means the reconstruction kept the semantics.
double reconstruction_score(const std::vector<float>& reconstructed,
                            const std::vector<float>& reference,
                            const Encoder& reference_encoder);

} // namespace genrep
