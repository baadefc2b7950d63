// SPDX-License-Identifier: Apache-2.0
#include "genrep/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "genrep/patches.hpp"
#include "genrep/vecmath.hpp"

namespace genrep {

double scaled_logit_normal_t(double scale, double eps) {
    const double t = 1.0 / (1.0 + std::exp(-scale * eps));
    // extreme draws would otherwise round to exactly 0 or 1
    return std::clamp(t, std::numeric_limits<double>::min(),
                      1.0 - std::numeric_limits<double>::epsilon() / 2);
}

double TimestepSampler::sample(Rng& rng) const {
    validate();
    if (mode == TimeMode::uniform) {
        return rng.uniform_open();
    }
    return scaled_logit_normal_t(scale, rng.normal());
}

void FlowDenoiserConfig::validate() const {
    if (n_mm < 0 || n_single < 0 || n_mm + n_single < 1) {
        throw ConfigError("flow: need at least one block");
    }
    if (width <= 0 || heads <= 0 || width % heads != 0) {
        throw ConfigError("flow: width must be divisible by heads");
    }
    if (patch <= 0 || image_size % patch != 0) {
        throw ConfigError("flow: image_size must be divisible by patch");
    }
}

Tensor interpolate(const Tensor& x0, const Tensor& x1, double t) {
    if (x0.shape() != x1.shape()) {
        throw DimError("interpolate: shape mismatch");
    }
    if (t < 0.0 || t > 1.0) {
        throw ContractError("interpolate: t must be in [0,1]");
    }
    return add(scale(x1, static_cast<float>(t)), scale(x0, static_cast<float>(1.0 - t)));
}

namespace {

// (shift, scale) style slices out of a [B, n*width] modulation tensor
Tensor mod_slice(const Tensor& m, int n, int i, int width) {
    const int B = m.dim(0);
    Tensor r = reshape(m, {B, n, width});
    return reshape(slice_axis1(r, i, 1), {B, width});
}

} // namespace

FlowDenoiser::FlowDenoiser(const FlowDenoiserConfig& c, uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(splitmix64(seed ^ 0xf10ULL));
    const int w = cfg.width;
    embed_ = make_linear(params, "embed", cfg.token_dim(), w, rng);
    pos_emb_ = &params.add("pos_emb", Tensor::zeros({cfg.latent_tokens(), w}));
    init_trunc_normal(pos_emb_->tensor, 0.02f, rng);
    time_mlp_ = make_mlp(params, "time_mlp", w, w, w, Act::silu, rng);
    mm_.reserve(cfg.n_mm);
    for (int i = 0; i < cfg.n_mm; ++i) {
        const std::string base = "mm" + std::to_string(i);
        MmBlock b;
        b.ada_x = make_linear(params, base + ".ada_x", w, 6 * w, rng, true, /*zero_init=*/true);
        b.ada_c = make_linear(params, base + ".ada_c", w, 6 * w, rng, true, /*zero_init=*/true);
        b.qx = make_linear(params, base + ".qx", w, w, rng);
        b.kx = make_linear(params, base + ".kx", w, w, rng);
        b.vx = make_linear(params, base + ".vx", w, w, rng);
        b.ox = make_linear(params, base + ".ox", w, w, rng);
        b.qc = make_linear(params, base + ".qc", w, w, rng);
        b.kc = make_linear(params, base + ".kc", w, w, rng);
        b.vc = make_linear(params, base + ".vc", w, w, rng);
        b.oc = make_linear(params, base + ".oc", w, w, rng);
        b.mlp_x = make_mlp(params, base + ".mlp_x", w, 4 * w, w, Act::silu, rng);
        b.mlp_c = make_mlp(params, base + ".mlp_c", w, 4 * w, w, Act::silu, rng);
        mm_.push_back(b);
    }
    single_.reserve(cfg.n_single);
    for (int i = 0; i < cfg.n_single; ++i) {
        const std::string base = "single" + std::to_string(i);
        SingleBlock b;
        b.ada = make_linear(params, base + ".ada", w, 3 * w, rng, true, /*zero_init=*/true);
        b.q = make_linear(params, base + ".q", w, w, rng);
        b.k = make_linear(params, base + ".k", w, w, rng);
        b.v = make_linear(params, base + ".v", w, w, rng);
        b.o = make_linear(params, base + ".o", w, w, rng);
        b.mlp = make_mlp(params, base + ".mlp", w, 4 * w, w, Act::silu, rng);
        single_.push_back(b);
    }
    ada_out_ = make_linear(params, "ada_out", w, 2 * w, rng, true, /*zero_init=*/true);
    head_ = make_linear(params, "head", w, cfg.token_dim(), rng);
}

Tensor FlowDenoiser::time_embedding(const std::vector<double>& t) const {
    const int B = static_cast<int>(t.size());
    const int w = cfg.width;
    const int half = w / 2;
    std::vector<float> feats(static_cast<size_t>(B) * w);
    for (int b = 0; b < B; ++b) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            const double ang = t[static_cast<size_t>(b)] * 1000.0 * freq;
            feats[static_cast<size_t>(b) * w + i] = static_cast<float>(std::cos(ang));
            feats[static_cast<size_t>(b) * w + half + i] = static_cast<float>(std::sin(ang));
        }
        if (w % 2 != 0) {
            feats[static_cast<size_t>(b) * w + w - 1] = 0.0f;
        }
    }
    return Tensor::from_data({B, w}, std::move(feats));
}

Tensor FlowDenoiser::modulation_vector(const std::vector<double>& t, const Tensor& cond,
                                       const FwdCtx& ctx) const {
    Tensor temb = time_mlp_.forward(time_embedding(t), ctx);
    return add(temb, mean_axis1(cond));
}

Tensor FlowDenoiser::forward(const Tensor& xt, const std::vector<double>& t, const Tensor& cond,
                             const FwdCtx& ctx) const {
    if (xt.rank() != 3 || xt.dim(1) != cfg.latent_tokens() || xt.dim(2) != cfg.token_dim()) {
        throw DimError("flow: xt must be [B, Lt, token_dim]");
    }
    if (cond.rank() != 3 || cond.dim(2) != cfg.width) {
        throw DimError("flow: cond must be [B, m, width]");
    }
    const int B = xt.dim(0);
    if (static_cast<int>(t.size()) != B || cond.dim(0) != B) {
        throw DimError("flow: batch sizes disagree");
    }
    const int Lt = cfg.latent_tokens();
    const int w = cfg.width;

    Tensor mvec = silu(modulation_vector(t, cond, ctx));
    Tensor x = add_posemb(embed_.forward(xt, ctx), pos_emb_->tensor);
    Tensor c = cond;

    for (const MmBlock& b : mm_) {
        Tensor mx = b.ada_x.forward(mvec, ctx);
        Tensor mc = b.ada_c.forward(mvec, ctx);
        Tensor xh = modulate(norm_no_affine(x), mod_slice(mx, 6, 0, w), mod_slice(mx, 6, 1, w));
        Tensor ch = modulate(norm_no_affine(c), mod_slice(mc, 6, 0, w), mod_slice(mc, 6, 1, w));
        Tensor q = concat_axis1(b.qx.forward(xh, ctx), b.qc.forward(ch, ctx));
        Tensor k = concat_axis1(b.kx.forward(xh, ctx), b.kc.forward(ch, ctx));
        Tensor v = concat_axis1(b.vx.forward(xh, ctx), b.vc.forward(ch, ctx));
        Tensor a = attention(q, k, v, cfg.heads);
        Tensor ax = slice_axis1(a, 0, Lt);
        Tensor ac = slice_axis1(a, Lt, cond.dim(1));
        x = gated_add(x, mod_slice(mx, 6, 2, w), b.ox.forward(ax, ctx));
        c = gated_add(c, mod_slice(mc, 6, 2, w), b.oc.forward(ac, ctx));
        Tensor xh2 = modulate(norm_no_affine(x), mod_slice(mx, 6, 3, w), mod_slice(mx, 6, 4, w));
        Tensor ch2 = modulate(norm_no_affine(c), mod_slice(mc, 6, 3, w), mod_slice(mc, 6, 4, w));
        x = gated_add(x, mod_slice(mx, 6, 5, w), b.mlp_x.forward(xh2, ctx));
        c = gated_add(c, mod_slice(mc, 6, 5, w), b.mlp_c.forward(ch2, ctx));
    }

    Tensor s = concat_axis1(x, c);
    for (const SingleBlock& b : single_) {
        Tensor m = b.ada.forward(mvec, ctx);
        Tensor h = modulate(norm_no_affine(s), mod_slice(m, 3, 0, w), mod_slice(m, 3, 1, w));
        Tensor a = b.o.forward(
            attention(b.q.forward(h, ctx), b.k.forward(h, ctx), b.v.forward(h, ctx), cfg.heads),
            ctx);
        Tensor f = b.mlp.forward(h, ctx);
        s = gated_add(s, mod_slice(m, 3, 2, w), add(a, f));
    }

    Tensor latent = slice_axis1(s, 0, Lt);
    Tensor mo = ada_out_.forward(mvec, ctx);
    Tensor h = modulate(norm_no_affine(latent), mod_slice(mo, 2, 0, w), mod_slice(mo, 2, 1, w));
    return head_.forward(h, ctx);
}

Tensor flow_matching_loss(const std::vector<const std::vector<float>*>& images,
                          const Encoder& encoder, const Projector& projector,
                          const FlowDenoiser& denoiser, const TimestepSampler& sampler,
                          const ConditionSpec& cspec, Rng& rng, const FwdCtx& ctx,
                          bool encoder_grad,
                          const std::vector<const std::vector<float>*>* cond_images) {
    if (images.empty()) {
        throw ContractError("flow loss: empty batch");
    }
    if (cond_images != nullptr && cond_images->size() != images.size()) {
        throw DimError("flow loss: condition image count mismatch");
    }
    cspec.validate();
    const int B = static_cast<int>(images.size());
    const int L = encoder.cfg.local_tokens();
    const int pd = encoder.cfg.patch_dim();
    const int Lt = denoiser.cfg.latent_tokens();
    const int td = denoiser.cfg.token_dim();

    std::vector<int> local_idx = select_condition_indices(L, cspec.local_ratio, rng);

    std::vector<float> enc_patches(static_cast<size_t>(B) * L * pd);
    std::vector<float> x1(static_cast<size_t>(B) * Lt * td);
    std::vector<float> xt(x1.size());
    std::vector<float> target(x1.size());
    std::vector<double> t(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
        const std::vector<float>& img = *images[static_cast<size_t>(b)];
        const std::vector<float>& cimg =
            cond_images != nullptr ? *(*cond_images)[static_cast<size_t>(b)] : img;
        std::vector<float> ep = encoder_input_patches(cimg, encoder.cfg);
        std::copy(ep.begin(), ep.end(), enc_patches.begin() + static_cast<size_t>(b) * L * pd);
        std::vector<float> lat = patchify(img, denoiser.cfg.image_size, denoiser.cfg.patch);
        std::copy(lat.begin(), lat.end(), x1.begin() + static_cast<size_t>(b) * Lt * td);
        t[static_cast<size_t>(b)] = sampler.sample(rng);
        const float tb = static_cast<float>(t[static_cast<size_t>(b)]);
        for (int i = 0; i < Lt * td; ++i) {
            const size_t off = static_cast<size_t>(b) * Lt * td + i;
            const float noise = static_cast<float>(rng.normal());
            xt[off] = tb * x1[off] + (1.0f - tb) * noise;
            target[off] = x1[off] - noise;
        }
    }

    Tensor cond_in;
    {
        Tensor patches = Tensor::from_data({B, L, pd}, std::move(enc_patches));
        if (encoder_grad) {
            Tensor tokens = encoder.forward_tokens(patches, ctx);
            cond_in = encoder.condition_tokens(tokens, local_idx, ctx);
        } else {
            NoGradGuard ng;
            Tensor tokens = encoder.forward_tokens(patches, ctx);
            cond_in = encoder.condition_tokens(tokens, local_idx, ctx);
        }
    }
    Tensor cond = projector.project(cond_in, ctx);
    Tensor pred = denoiser.forward(Tensor::from_data({B, Lt, td}, std::move(xt)), t, cond, ctx);
    return mean_sq_diff(pred, Tensor::from_data({B, Lt, td}, std::move(target)));
}

EulerResult euler_sample(const FlowDenoiser& denoiser, const Tensor& cond, int steps, Rng& rng) {
    if (steps < 1) {
        throw ContractError("euler_sample: steps must be >= 1");
    }
    NoGradGuard ng;
    const int Lt = denoiser.cfg.latent_tokens();
    const int td = denoiser.cfg.token_dim();
    std::vector<float> z(static_cast<size_t>(Lt) * td);
    for (float& v : z) {
        v = static_cast<float>(rng.normal());
    }
    const float dt = 1.0f / static_cast<float>(steps);
    for (int k = 0; k < steps; ++k) {
        const double tk = (k + 0.5) / static_cast<double>(steps);
        Tensor zt = Tensor::from_data({1, Lt, td}, z);
        Tensor v = denoiser.forward(zt, {tk}, cond, {});
        const float* pv = v.data();
        for (size_t i = 0; i < z.size(); ++i) {
            z[i] += dt * pv[i];
        }
    }
    EulerResult out;
    out.latent = z;
    out.image = depatchify(z, denoiser.cfg.image_size, denoiser.cfg.patch);
    for (float& v : out.image) {
        v = std::clamp(v, 0.0f, 1.0f);
    }
    return out;
}

double reconstruction_score(const std::vector<float>& reconstructed,
                            const std::vector<float>& reference,
                            const Encoder& reference_encoder) {
    if (reconstructed.size() != reference.size()) {
        throw DimError("reconstruction_score: image shapes differ");
    }
    NoGradGuard ng;
    TokenBundle a = reference_encoder.encode(reconstructed);
    TokenBundle b = reference_encoder.encode(reference);
    return cosine_sim(a.cls.data(), b.cls.data(), a.cls.numel());
}

} // namespace genrep
