// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <utility>
#include <vector>

#include "genrep/encoder.hpp"
#include "genrep/nn.hpp"
#include "genrep/projector.hpp"

namespace genrep {

// Frozen nearest-neighbor quantizer over image patches. Ties resolve to the
// lowest index.
struct Codebook {
    int K = 0;
    int dim = 0;
    std::vector<float> entries; // [K, dim]

    const float* entry(int i) const { return entries.data() + static_cast<size_t>(i) * dim; }
    int nearest(const float* v) const;
};

// k-means with k-means++ seeding; empty clusters are re-seeded from the
// farthest point. Centers accumulate in double during the build.
Codebook build_codebook(const std::vector<float>& patches, int n, int dim, int K, int iters,
                        Rng& rng, std::vector<double>* iteration_errors = nullptr);
// Mean squared distance of each patch to its nearest entry.
double mean_quantization_error(const Codebook& cb, const std::vector<float>& patches, int n);

struct TokenSequence {
    int L = 0;
    int dim = 0;
    std::vector<int> indices;              // codebook ids, length L
    std::vector<float> embeddings;         // [L, dim], rows = entries[indices]
    std::vector<uint8_t> mask;             // length L
    std::vector<std::pair<int, int>> positions; // grid (x, y)

    int masked_count() const;
};

TokenSequence quantize_image(const std::vector<float>& image, const Codebook& cb, int image_size,
                             int patch);
std::vector<float> dequantize_image(const TokenSequence& seq, const Codebook& cb, int image_size,
                                    int patch);

struct MaskSpec {
    double ratio_low = 0.5;
    double ratio_high = 0.9;

    void validate() const {
        if (!(0.0 < ratio_low && ratio_low <= ratio_high && ratio_high < 1.0)) {
            throw ConfigError("mask: need 0 < low <= high < 1");
        }
    }
    double draw_ratio(Rng& rng) const {
        validate();
        return rng.uniform(ratio_low, ratio_high);
    }
};

int mask_count_for_ratio(double ratio, int L);
// Uniform without-replacement positions, sorted.
std::vector<int> draw_mask_positions(int L, int count, Rng& rng);
// Draws the ratio, marks seq.mask, returns (masked, unmasked) positions.
std::pair<std::vector<int>, std::vector<int>> mask_tokens(TokenSequence& seq,
                                                          const MaskSpec& spec, Rng& rng);

struct PerceiverConfig {
    int layers = 6;
    int width = 128;
    int heads = 4;

    void validate() const {
        if (layers < 1 || width < 1 || heads < 1 || width % heads != 0) {
            throw ConfigError("perceiver: width must be divisible by heads");
        }
    }
};

// Masked-token predictor. Unmasked tokens are embedded and fused with the
// projected condition through one cross-attention layer; learned mask
// queries then cross-attend to the result and emit codebook logits.
class PerceiverDenoiser {
public:
    PerceiverDenoiser(const PerceiverConfig& cfg, int codebook_k, int token_dim,
                      int max_positions, uint64_t seed);

    // Q = unmasked rows, K/V = concat(unmasked, condition); one layer plus
    // residual. cond may be null (degenerates to self-attention).
    Tensor condition_cross_attn(const Tensor& unmasked, const Tensor* cond,
                                const FwdCtx& ctx = {}) const;

    // unmasked_embed [B, u, token_dim]; position ids are flattened per batch.
    // Returns logits [B*M, K] for the masked slots.
    Tensor predict_masked(const Tensor& unmasked_embed, const std::vector<int>& unmasked_pos,
                          const Tensor* cond, const std::vector<int>& masked_pos, int M,
                          const FwdCtx& ctx = {}) const;

    PerceiverConfig cfg;
    int K;
    int token_dim;
    int max_positions;
    ParamRegistry params;

private:
    struct Block {
        LayerNorm ln1;
        SelfAttention attn; // queries -> conditioned tokens
        LayerNorm ln2;
        Mlp mlp;
    };

    Tensor pos_rows(const std::vector<int>& pos, int B, int M) const;

    Linear embed_;
    Parameter* pos_emb_ = nullptr;
    Parameter* mask_query_ = nullptr;
    SelfAttention cond_attn_;
    std::vector<Block> blocks_;
    Linear head_;
};

Tensor ce_loss(const Tensor& logits, const std::vector<int>& true_indices);

// Batched training objective. The mask ratio is drawn once per batch
// (forced_ratio >= 0 pins it); positions are drawn per sample.
Tensor masked_prediction_loss(const std::vector<const std::vector<float>*>& images,
                              const Encoder& encoder, const Projector& projector,
                              const PerceiverDenoiser& perceiver, const Codebook& cb,
                              const MaskSpec& mspec, const ConditionSpec& cspec, Rng& rng,
                              const FwdCtx& ctx, bool encoder_grad, double forced_ratio = -1.0,
                              double* top1_accuracy = nullptr,
                              const std::vector<const std::vector<float>*>* cond_images = nullptr);

// Fills every masked slot with the argmax code in one shot.
TokenSequence greedy_decode(const PerceiverDenoiser& perceiver, const TokenSequence& partial,
                            const Tensor* cond, const Codebook& cb);

} // namespace genrep
