// SPDX-License-Identifier: Apache-2.0
#include "genrep/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "genrep/kernels.hpp"
#include "genrep/patches.hpp"
#include "genrep/vecmath.hpp"

namespace genrep {

void EncoderConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
        throw ConfigError("encoder: image_size must be divisible by patch_size");
    }
    if (dim <= 0 || heads <= 0 || dim % heads != 0) {
        throw ConfigError("encoder: dim must be divisible by heads");
    }
    if (depth < 1) {
        throw ConfigError("encoder: depth must be >= 1");
    }
}

void LoraConfig::validate() const {
    if (rank < 1) {
        throw ConfigError("lora: rank must be >= 1");
    }
    if (dropout < 0.0f || dropout >= 1.0f) {
        throw ConfigError("lora: dropout must be in [0,1)");
    }
    if (targets.empty()) {
        throw ConfigError("lora: no target patterns");
    }
}

void ConditionSpec::validate() const {
    if (local_ratio < 0.0 || local_ratio > 1.0) {
        throw ConfigError("condition: local_ratio must be in [0,1]");
    }
}

std::vector<float> encoder_input_patches(const std::vector<float>& image,
                                         const EncoderConfig& cfg) {
    std::vector<float> patches = patchify(image, cfg.image_size, cfg.patch_size);
    for (float& v : patches) {
        v -= 0.5f;
    }
    return patches;
}

Encoder::Encoder(const EncoderConfig& c, uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(seed);
    const int L = cfg.local_tokens();
    cls_token_ = &params.add("cls_token", Tensor::zeros({cfg.dim}));
    init_trunc_normal(cls_token_->tensor, 0.02f, rng);
    pos_emb_ = &params.add("pos_emb", Tensor::zeros({L + 1, cfg.dim}));
    init_trunc_normal(pos_emb_->tensor, 0.02f, rng);
    patch_embed_ = make_linear(params, "patch_embed", cfg.patch_dim(), cfg.dim, rng);
    blocks_.reserve(cfg.depth);
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string base = "block" + std::to_string(i);
        Block b;
        b.ln1 = make_layer_norm(params, base + ".ln1", cfg.dim);
        b.attn = make_attention(params, base + ".attn", cfg.dim, cfg.heads, rng);
        b.ln2 = make_layer_norm(params, base + ".ln2", cfg.dim);
        b.mlp = make_mlp(params, base + ".mlp", cfg.dim, 4 * cfg.dim, cfg.dim, Act::gelu, rng);
        blocks_.push_back(b);
    }
    ln_final_ = make_layer_norm(params, "ln_final", cfg.dim);
    if (cfg.pooling == Pooling::attention_pool) {
        pool_query_ = &params.add("pool.query", Tensor::zeros({cfg.dim}));
        init_trunc_normal(pool_query_->tensor, 0.02f, rng);
        pool_attn_ = make_attention(params, "pool.attn", cfg.dim, cfg.heads, rng);
    }
}

Tensor Encoder::forward_tokens(const Tensor& patches, const FwdCtx& ctx) const {
    if (patches.rank() != 3 || patches.dim(1) != cfg.local_tokens() ||
        patches.dim(2) != cfg.patch_dim()) {
        throw DimError("encoder: expected patches [B, L, patch_dim]");
    }
    const int B = patches.dim(0);
    Tensor x = patch_embed_.forward(patches, ctx);
    Tensor cls = tile_token(cls_token_->tensor, B);
    x = concat_axis1(cls, x);
    x = add_posemb(x, pos_emb_->tensor);
    for (const Block& b : blocks_) {
        x = add(x, b.attn.forward(b.ln1.forward(x), ctx));
        x = add(x, b.mlp.forward(b.ln2.forward(x), ctx));
    }
    return ln_final_.forward(x);
}

Tensor Encoder::attention_pool(const Tensor& locals, const FwdCtx& ctx) const {
    if (cfg.pooling != Pooling::attention_pool) {
        throw ContractError("encoder: attention_pool not enabled");
    }
    Tensor q = tile_token(pool_query_->tensor, locals.dim(0));
    return pool_attn_.forward_kv(q, locals, ctx);
}

Tensor Encoder::condition_tokens(const Tensor& tokens, const std::vector<int>& local_indices,
                                 const FwdCtx& ctx) const {
    const int B = tokens.dim(0);
    const int L = cfg.local_tokens();
    Tensor global = cfg.pooling == Pooling::attention_pool
                        ? attention_pool(slice_axis1(tokens, 1, L), ctx)
                        : slice_axis1(tokens, 0, 1);
    if (local_indices.empty()) {
        return global;
    }
    std::vector<int> idx;
    idx.reserve(static_cast<size_t>(B) * local_indices.size());
    for (int b = 0; b < B; ++b) {
        for (int i : local_indices) {
            idx.push_back(i + 1); // skip the class token slot
        }
    }
    Tensor locals = gather_axis1(tokens, idx, static_cast<int>(local_indices.size()));
    return concat_axis1(global, locals);
}

TokenBundle Encoder::encode(const std::vector<float>& image, const FwdCtx& ctx) const {
    if (static_cast<int>(image.size()) != 3 * cfg.image_size * cfg.image_size) {
        throw DimError("encode: image must be 3 x image_size x image_size");
    }
    const int L = cfg.local_tokens();
    Tensor patches = Tensor::from_data({1, L, cfg.patch_dim()},
                                       encoder_input_patches(image, cfg));
    Tensor tokens = forward_tokens(patches, ctx);
    TokenBundle out;
    out.cls = reshape(slice_axis1(tokens, 0, 1), {cfg.dim});
    out.locals = reshape(slice_axis1(tokens, 1, L), {L, cfg.dim});
    if (cfg.pooling == Pooling::attention_pool) {
        out.pooled = reshape(attention_pool(reshape(out.locals, {1, L, cfg.dim}), ctx), {cfg.dim});
    }
    return out;
}

void Encoder::apply_lora(const LoraConfig& lcfg, uint64_t seed) {
    lcfg.validate();
    if (lora_applied_) {
        throw ContractError("encoder: lora already applied");
    }
    Rng rng(splitmix64(seed ^ 0x10a2ULL));
    std::vector<std::pair<std::string, Linear*>> linears;
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string base = "block" + std::to_string(i) + ".attn.";
        linears.emplace_back(base + "wq", &blocks_[static_cast<size_t>(i)].attn.wq);
        linears.emplace_back(base + "wk", &blocks_[static_cast<size_t>(i)].attn.wk);
        linears.emplace_back(base + "wv", &blocks_[static_cast<size_t>(i)].attn.wv);
        linears.emplace_back(base + "wo", &blocks_[static_cast<size_t>(i)].attn.wo);
    }
    std::vector<std::pair<std::string, Linear*>> matched;
    for (auto& [name, lin] : linears) {
        for (const std::string& pat : lcfg.targets) {
            if (name.find(pat) != std::string::npos) {
                matched.emplace_back(name, lin);
                break;
            }
        }
    }
    if (matched.empty()) {
        throw ConfigError("lora: no parameters match the target patterns");
    }
    for (Parameter* p : params.all()) {
        p->set_trainable(false);
    }
    for (auto& [name, lin] : matched) {
        const int out_dim = lin->w->tensor.dim(0);
        const int in_dim = lin->w->tensor.dim(1);
        Tensor a = Tensor::zeros({lcfg.rank, in_dim});
        init_normal(a, 1.0f / std::sqrt(static_cast<float>(in_dim)), rng);
        Tensor b = Tensor::zeros({out_dim, lcfg.rank});
        lin->lora.a = &params.add(name + ".lora_a", std::move(a));
        lin->lora.b = &params.add(name + ".lora_b", std::move(b));
        lin->lora.scale = lcfg.alpha / static_cast<float>(lcfg.rank);
        lin->lora.dropout = lcfg.dropout;
        lora_targets_.push_back(lin);
    }
    lora_applied_ = true;
}

std::vector<Parameter*> Encoder::lora_params() {
    std::vector<Parameter*> out;
    for (Linear* lin : lora_targets_) {
        out.push_back(lin->lora.a);
        out.push_back(lin->lora.b);
    }
    return out;
}

void Encoder::merge_lora() {
    if (!lora_applied_) {
        throw ContractError("encoder: no lora to merge");
    }
    for (Linear* lin : lora_targets_) {
        const int out_dim = lin->w->tensor.dim(0);
        const int in_dim = lin->w->tensor.dim(1);
        const int rank = lin->lora.a->tensor.dim(0);
        std::vector<float> delta(static_cast<size_t>(out_dim) * in_dim);
        kern::matmul(lin->lora.b->tensor.data(), lin->lora.a->tensor.data(), delta.data(),
                     out_dim, rank, in_dim, false, false, false);
        float* w = lin->w->tensor.data();
        for (size_t i = 0; i < delta.size(); ++i) {
            w[i] += lin->lora.scale * delta[i];
        }
        lin->lora = LoraAdapter{};
    }
    lora_targets_.clear();
    lora_applied_ = false;
}

void Encoder::copy_params_from(const Encoder& other) {
    for (const Parameter* src : other.params.all()) {
        Parameter* dst = params.find(src->name);
        if (dst == nullptr) {
            throw ContractError("copy_params_from: missing parameter " + src->name);
        }
        if (dst->tensor.shape() != src->tensor.shape()) {
            throw DimError("copy_params_from: shape mismatch for " + src->name);
        }
        dst->tensor.vec() = src->tensor.vec();
    }
}

int condition_local_count(double ratio, int local_tokens) {
    return static_cast<int>(std::llround(ratio * local_tokens));
}

std::vector<int> select_condition_indices(int local_tokens, double ratio, Rng& rng) {
    const int n = condition_local_count(ratio, local_tokens);
    std::vector<int> pool(static_cast<size_t>(local_tokens));
    for (int i = 0; i < local_tokens; ++i) {
        pool[static_cast<size_t>(i)] = i;
    }
    // partial Fisher-Yates
    for (int i = 0; i < n; ++i) {
        const int j = i + rng.uniform_int(local_tokens - i);
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(n));
    std::sort(pool.begin(), pool.end());
    return pool;
}

Tensor select_condition_tokens(const TokenBundle& bundle, const ConditionSpec& spec, Rng& rng) {
    spec.validate();
    const int L = bundle.locals.dim(0);
    const int dim = bundle.locals.dim(1);
    const Tensor& global = bundle.pooled.defined() ? bundle.pooled : bundle.cls;
    Tensor head = reshape(global, {1, 1, dim});
    std::vector<int> idx = select_condition_indices(L, spec.local_ratio, rng);
    if (idx.empty()) {
        return reshape(head, {1, dim});
    }
    Tensor locals3 = reshape(bundle.locals, {1, L, dim});
    Tensor picked = gather_axis1(locals3, idx, static_cast<int>(idx.size()));
    Tensor cond = concat_axis1(head, picked);
    return reshape(cond, {1 + static_cast<int>(idx.size()), dim});
}

double feature_drift(const Encoder& enc, const Encoder& reference,
                     const std::vector<std::vector<float>>& probe_images) {
    if (enc.cfg.dim != reference.cfg.dim || enc.cfg.image_size != reference.cfg.image_size ||
        enc.cfg.patch_size != reference.cfg.patch_size) {
        throw DimError("feature_drift: encoder configs differ");
    }
    if (probe_images.empty()) {
        throw ContractError("feature_drift: empty probe set");
    }
    NoGradGuard ng;
    double total = 0.0;
    for (const auto& img : probe_images) {
        TokenBundle a = enc.encode(img);
        TokenBundle b = reference.encode(img);
        total += 1.0 - cosine_sim(a.cls.data(), b.cls.data(), a.cls.numel());
    }
    return total / static_cast<double>(probe_images.size());
}

} // namespace genrep
