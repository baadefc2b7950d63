// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "genrep/nn.hpp"

namespace genrep {

enum class Pooling { class_token, attention_pool };

struct EncoderConfig {
    int image_size = 32;
    int patch_size = 4;
    int dim = 64;
    int depth = 4;
    int heads = 4;
    Pooling pooling = Pooling::class_token;

    int grid() const { return image_size / patch_size; }
    int local_tokens() const { return grid() * grid(); }
    int patch_dim() const { return 3 * patch_size * patch_size; }
    void validate() const;
};

// Encoder output for a single image. In attention_pool mode `pooled` holds
// the query-attended aggregate of the local tokens; otherwise it is
// undefined and the class token is the global feature.
struct TokenBundle {
    Tensor cls;    // [dim]
    Tensor locals; // [L, dim]
    Tensor pooled; // [dim], attention_pool mode only
};

struct LoraConfig {
    int rank = 16;
    float alpha = 16.0f;
    float dropout = 0.1f;
    std::vector<std::string> targets = {"attn.wq", "attn.wk", "attn.wv", "attn.wo"};

    void validate() const;
};

struct ConditionSpec {
    double local_ratio = 0.0; // fraction of local tokens appended to the global one
    uint64_t selection_seed = 0;

    void validate() const;
};

// Patchified image centered on the mid-gray level; the encoder's input.
std::vector<float> encoder_input_patches(const std::vector<float>& image,
                                         const EncoderConfig& cfg);

// Small ViT. The class token sits at sequence position 0.
class Encoder {
public:
    Encoder(const EncoderConfig& cfg, uint64_t seed);

    // patches [B, L, patch_dim] -> tokens [B, 1+L, dim]
    Tensor forward_tokens(const Tensor& patches, const FwdCtx& ctx) const;
    // locals [B, L, dim] -> [B, 1, dim]
    Tensor attention_pool(const Tensor& locals, const FwdCtx& ctx) const;
    // Global-plus-selected-locals condition rows, shared indices across the
    // batch: tokens [B, 1+L, dim] -> [B, m, dim].
    Tensor condition_tokens(const Tensor& tokens, const std::vector<int>& local_indices,
                            const FwdCtx& ctx) const;

    TokenBundle encode(const std::vector<float>& image, const FwdCtx& ctx = {}) const;

    void apply_lora(const LoraConfig& cfg, uint64_t seed);
    bool has_lora() const { return lora_applied_; }
    // Folds adapters into the base weights and detaches them; forward then
    // uses plain linears.
    void merge_lora();
    std::vector<Parameter*> lora_params();

    void copy_params_from(const Encoder& other);

    EncoderConfig cfg;
    ParamRegistry params;

private:
    struct Block {
        LayerNorm ln1;
        SelfAttention attn;
        LayerNorm ln2;
        Mlp mlp;
    };

    Parameter* cls_token_ = nullptr;
    Parameter* pos_emb_ = nullptr;
    Linear patch_embed_;
    std::vector<Block> blocks_;
    LayerNorm ln_final_;
    Parameter* pool_query_ = nullptr;
    SelfAttention pool_attn_;
    bool lora_applied_ = false;
    std::vector<Linear*> lora_targets_;
};

// Number of appended locals for a given ratio: round(ratio * L).
int condition_local_count(double ratio, int local_tokens);
// Uniform without-replacement local subset, sorted for stable gathers.
std::vector<int> select_condition_indices(int local_tokens, double ratio, Rng& rng);
// Single-bundle condition rows: [m, dim], global token first.
Tensor select_condition_tokens(const TokenBundle& bundle, const ConditionSpec& spec, Rng& rng);

// Mean cosine distance of global features over probe images; in [0,2].
double feature_drift(const Encoder& enc, const Encoder& reference,
                     const std::vector<std::vector<float>>& probe_images);

} // namespace genrep
