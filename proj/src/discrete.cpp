// SPDX-License-Identifier: Apache-2.0
#include "genrep/discrete.hpp"

#include <algorithm>
#include <cmath>

#include "genrep/patches.hpp"
#include "genrep/vecmath.hpp"

namespace genrep {

int Codebook::nearest(const float* v) const {
    int best = 0;
    double best_d = l2_sq(entry(0), v, static_cast<size_t>(dim));
    for (int i = 1; i < K; ++i) {
        const double d = l2_sq(entry(i), v, static_cast<size_t>(dim));
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

namespace {

double dist_sq_d(const std::vector<double>& centers, int c, const float* p, int dim) {
    const double* e = centers.data() + static_cast<size_t>(c) * dim;
    double s = 0.0;
    for (int i = 0; i < dim; ++i) {
        const double d = e[i] - p[i];
        s += d * d;
    }
    return s;
}

} // namespace

Codebook build_codebook(const std::vector<float>& patches, int n, int dim, int K, int iters,
                        Rng& rng, std::vector<double>* iteration_errors) {
    if (n < K) {
        throw ConfigError("codebook: need at least K corpus patches");
    }
    if (static_cast<size_t>(n) * dim != patches.size()) {
        throw DimError("codebook: patch buffer size mismatch");
    }
    std::vector<double> centers(static_cast<size_t>(K) * dim);
    const auto patch_ptr = [&](int i) { return patches.data() + static_cast<size_t>(i) * dim; };

    // k-means++ seeding
    std::vector<double> d2(static_cast<size_t>(n), 0.0);
    {
        const int first = rng.uniform_int(n);
        for (int j = 0; j < dim; ++j) {
            centers[static_cast<size_t>(j)] = patch_ptr(first)[j];
        }
        for (int i = 0; i < n; ++i) {
            d2[static_cast<size_t>(i)] = dist_sq_d(centers, 0, patch_ptr(i), dim);
        }
        for (int c = 1; c < K; ++c) {
            double total = 0.0;
            for (double v : d2) {
                total += v;
            }
            int pick = 0;
            if (total > 0.0) {
                double target = rng.uniform() * total;
                double acc = 0.0;
                pick = n - 1;
                for (int i = 0; i < n; ++i) {
                    acc += d2[static_cast<size_t>(i)];
                    if (acc >= target) {
                        pick = i;
                        break;
                    }
                }
            } else {
                pick = rng.uniform_int(n);
            }
            for (int j = 0; j < dim; ++j) {
                centers[static_cast<size_t>(c) * dim + j] = patch_ptr(pick)[j];
            }
            for (int i = 0; i < n; ++i) {
                const double d = dist_sq_d(centers, c, patch_ptr(i), dim);
                d2[static_cast<size_t>(i)] = std::min(d2[static_cast<size_t>(i)], d);
            }
        }
    }

    std::vector<int> assign(static_cast<size_t>(n), 0);
    std::vector<double> assign_d(static_cast<size_t>(n), 0.0);
    for (int it = 0; it < iters; ++it) {
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double best_d = dist_sq_d(centers, 0, patch_ptr(i), dim);
            for (int c = 1; c < K; ++c) {
                const double d = dist_sq_d(centers, c, patch_ptr(i), dim);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            assign[static_cast<size_t>(i)] = best;
            assign_d[static_cast<size_t>(i)] = best_d;
        }
        if (iteration_errors != nullptr) {
            double total = 0.0;
            for (double d : assign_d) {
                total += d;
            }
            iteration_errors->push_back(total);
        }
        std::vector<double> sums(static_cast<size_t>(K) * dim, 0.0);
        std::vector<int> counts(static_cast<size_t>(K), 0);
        for (int i = 0; i < n; ++i) {
            const int c = assign[static_cast<size_t>(i)];
            ++counts[static_cast<size_t>(c)];
            const float* p = patch_ptr(i);
            double* s = sums.data() + static_cast<size_t>(c) * dim;
            for (int j = 0; j < dim; ++j) {
                s[j] += p[j];
            }
        }
        for (int c = 0; c < K; ++c) {
            if (counts[static_cast<size_t>(c)] > 0) {
                const double inv = 1.0 / counts[static_cast<size_t>(c)];
                for (int j = 0; j < dim; ++j) {
                    centers[static_cast<size_t>(c) * dim + j] =
                        sums[static_cast<size_t>(c) * dim + j] * inv;
                }
            } else {
                // farthest point becomes the new center
                int far = 0;
                for (int i = 1; i < n; ++i) {
                    if (assign_d[static_cast<size_t>(i)] > assign_d[static_cast<size_t>(far)]) {
                        far = i;
                    }
                }
                for (int j = 0; j < dim; ++j) {
                    centers[static_cast<size_t>(c) * dim + j] = patch_ptr(far)[j];
                }
                assign_d[static_cast<size_t>(far)] = 0.0;
            }
        }
    }

    Codebook cb;
    cb.K = K;
    cb.dim = dim;
    cb.entries.resize(centers.size());
    for (size_t i = 0; i < centers.size(); ++i) {
        cb.entries[i] = static_cast<float>(centers[i]);
    }
    // pairwise-distinct entries keep nearest() ties impossible in practice
    for (int c = 1; c < K; ++c) {
        for (int p = 0; p < c; ++p) {
            if (std::equal(cb.entry(c), cb.entry(c) + dim, cb.entry(p))) {
                cb.entries[static_cast<size_t>(c) * dim] += 1e-5f * static_cast<float>(c + 1);
                break;
            }
        }
    }
    return cb;
}

double mean_quantization_error(const Codebook& cb, const std::vector<float>& patches, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        const float* p = patches.data() + static_cast<size_t>(i) * cb.dim;
        s += l2_sq(cb.entry(cb.nearest(p)), p, static_cast<size_t>(cb.dim));
    }
    return s / n;
}

int TokenSequence::masked_count() const {
    int c = 0;
    for (uint8_t m : mask) {
        c += m != 0 ? 1 : 0;
    }
    return c;
}

TokenSequence quantize_image(const std::vector<float>& image, const Codebook& cb, int image_size,
                             int patch) {
    if (cb.K == 0) {
        throw ContractError("quantize: codebook not built");
    }
    std::vector<float> patches = patchify(image, image_size, patch);
    const int g = image_size / patch;
    const int L = g * g;
    TokenSequence seq;
    seq.L = L;
    seq.dim = cb.dim;
    seq.indices.resize(static_cast<size_t>(L));
    seq.embeddings.resize(static_cast<size_t>(L) * cb.dim);
    seq.mask.assign(static_cast<size_t>(L), 0);
    seq.positions.resize(static_cast<size_t>(L));
    for (int i = 0; i < L; ++i) {
        const float* p = patches.data() + static_cast<size_t>(i) * cb.dim;
        const int idx = cb.nearest(p);
        seq.indices[static_cast<size_t>(i)] = idx;
        std::copy(cb.entry(idx), cb.entry(idx) + cb.dim,
                  seq.embeddings.begin() + static_cast<size_t>(i) * cb.dim);
        seq.positions[static_cast<size_t>(i)] = {i % g, i / g};
    }
    return seq;
}

std::vector<float> dequantize_image(const TokenSequence& seq, const Codebook& cb, int image_size,
                                    int patch) {
    (void)cb;
    return depatchify(seq.embeddings, image_size, patch);
}

int mask_count_for_ratio(double ratio, int L) {
    return static_cast<int>(std::llround(ratio * L));
}

std::vector<int> draw_mask_positions(int L, int count, Rng& rng) {
    std::vector<int> pool(static_cast<size_t>(L));
    for (int i = 0; i < L; ++i) {
        pool[static_cast<size_t>(i)] = i;
    }
    for (int i = 0; i < count; ++i) {
        const int j = i + rng.uniform_int(L - i);
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(count));
    std::sort(pool.begin(), pool.end());
    return pool;
}

std::pair<std::vector<int>, std::vector<int>> mask_tokens(TokenSequence& seq,
                                                          const MaskSpec& spec, Rng& rng) {
    if (seq.L < 2) {
        throw ContractError("mask_tokens: need at least two tokens");
    }
    const double r = spec.draw_ratio(rng);
    const int count = mask_count_for_ratio(r, seq.L);
    std::vector<int> masked = draw_mask_positions(seq.L, count, rng);
    std::fill(seq.mask.begin(), seq.mask.end(), 0);
    for (int p : masked) {
        seq.mask[static_cast<size_t>(p)] = 1;
    }
    std::vector<int> unmasked;
    unmasked.reserve(static_cast<size_t>(seq.L - count));
    for (int i = 0; i < seq.L; ++i) {
        if (seq.mask[static_cast<size_t>(i)] == 0) {
            unmasked.push_back(i);
        }
    }
    return {std::move(masked), std::move(unmasked)};
}

PerceiverDenoiser::PerceiverDenoiser(const PerceiverConfig& c, int codebook_k, int token_dim_,
                                     int max_positions_, uint64_t seed)
    : cfg(c), K(codebook_k), token_dim(token_dim_), max_positions(max_positions_) {
    cfg.validate();
    if (K < 2 || token_dim < 1 || max_positions < 2) {
        throw ConfigError("perceiver: bad codebook/token geometry");
    }
    Rng rng(splitmix64(seed ^ 0xd15cULL));
    const int w = cfg.width;
    embed_ = make_linear(params, "embed", token_dim, w, rng);
    pos_emb_ = &params.add("pos_emb", Tensor::zeros({max_positions, w}));
    init_trunc_normal(pos_emb_->tensor, 0.02f, rng);
    mask_query_ = &params.add("mask_query", Tensor::zeros({w}));
    init_trunc_normal(mask_query_->tensor, 0.02f, rng);
    cond_attn_ = make_attention(params, "cond_attn", w, cfg.heads, rng);
    blocks_.reserve(cfg.layers);
    for (int i = 0; i < cfg.layers; ++i) {
        const std::string base = "layer" + std::to_string(i);
        Block b;
        b.ln1 = make_layer_norm(params, base + ".ln1", w);
        b.attn = make_attention(params, base + ".attn", w, cfg.heads, rng);
        b.ln2 = make_layer_norm(params, base + ".ln2", w);
        b.mlp = make_mlp(params, base + ".mlp", w, 4 * w, w, Act::silu, rng);
        blocks_.push_back(b);
    }
    head_ = make_linear(params, "head", w, K, rng);
}

Tensor PerceiverDenoiser::pos_rows(const std::vector<int>& pos, int B, int M) const {
    return embed_rows(pos_emb_->tensor, pos, B, M);
}

Tensor PerceiverDenoiser::condition_cross_attn(const Tensor& unmasked, const Tensor* cond,
                                               const FwdCtx& ctx) const {
    const bool batched = unmasked.rank() == 3;
    Tensor u = batched ? unmasked
                       : reshape(unmasked, {1, unmasked.dim(0), unmasked.dim(1)});
    if (u.dim(2) != cfg.width) {
        throw DimError("condition_cross_attn: token width mismatch");
    }
    Tensor kv = u;
    if (cond != nullptr) {
        Tensor c = cond->rank() == 3 ? *cond : reshape(*cond, {1, cond->dim(0), cond->dim(1)});
        if (c.dim(2) != cfg.width) {
            throw DimError("condition_cross_attn: condition width mismatch");
        }
        kv = concat_axis1(u, c);
    }
    Tensor fused = add(u, cond_attn_.forward_kv(u, kv, ctx));
    return batched ? fused : reshape(fused, {unmasked.dim(0), unmasked.dim(1)});
}

Tensor PerceiverDenoiser::predict_masked(const Tensor& unmasked_embed,
                                         const std::vector<int>& unmasked_pos, const Tensor* cond,
                                         const std::vector<int>& masked_pos, int M,
                                         const FwdCtx& ctx) const {
    if (M < 1) {
        throw ContractError("predict_masked: empty mask");
    }
    if (unmasked_embed.rank() != 3 || unmasked_embed.dim(2) != token_dim) {
        throw DimError("predict_masked: unmasked tokens must be [B, u, token_dim]");
    }
    const int B = unmasked_embed.dim(0);
    const int u = unmasked_embed.dim(1);
    Tensor tokens = add(embed_.forward(unmasked_embed, ctx), pos_rows(unmasked_pos, B, u));
    Tensor conditioned = condition_cross_attn(tokens, cond, ctx);

    Tensor queries = add(tile_token(mask_query_->tensor, B, M), pos_rows(masked_pos, B, M));
    for (const Block& b : blocks_) {
        queries = add(queries,
                      b.attn.forward_kv(b.ln1.forward(queries), conditioned, ctx));
        queries = add(queries, b.mlp.forward(b.ln2.forward(queries), ctx));
    }
    Tensor logits = head_.forward(queries, ctx);
    return reshape(logits, {B * M, K});
}

Tensor ce_loss(const Tensor& logits, const std::vector<int>& true_indices) {
    return cross_entropy_logits(logits, true_indices);
}

Tensor masked_prediction_loss(const std::vector<const std::vector<float>*>& images,
                              const Encoder& encoder, const Projector& projector,
                              const PerceiverDenoiser& perceiver, const Codebook& cb,
                              const MaskSpec& mspec, const ConditionSpec& cspec, Rng& rng,
                              const FwdCtx& ctx, bool encoder_grad, double forced_ratio,
                              double* top1_accuracy,
                              const std::vector<const std::vector<float>*>* cond_images) {
    if (images.empty()) {
        throw ContractError("masked loss: empty batch");
    }
    if (cond_images != nullptr && cond_images->size() != images.size()) {
        throw DimError("masked loss: condition image count mismatch");
    }
    cspec.validate();
    const int B = static_cast<int>(images.size());
    const int L = encoder.cfg.local_tokens();
    const int pd = encoder.cfg.patch_dim();

    const double ratio = forced_ratio >= 0.0 ? forced_ratio : mspec.draw_ratio(rng);
    // patch grid of the quantizer
    const int patch = static_cast<int>(std::lround(std::sqrt(cb.dim / 3.0)));
    const int Lq = (encoder.cfg.image_size / patch) * (encoder.cfg.image_size / patch);
    const int M = mask_count_for_ratio(ratio, Lq);
    const int u = Lq - M;
    if (M < 1 || u < 1) {
        throw ContractError("masked loss: degenerate mask");
    }

    std::vector<int> cond_idx = select_condition_indices(L, cspec.local_ratio, rng);

    std::vector<float> enc_patches(static_cast<size_t>(B) * L * pd);
    std::vector<float> unmasked(static_cast<size_t>(B) * u * cb.dim);
    std::vector<int> unmasked_pos(static_cast<size_t>(B) * u);
    std::vector<int> masked_pos(static_cast<size_t>(B) * M);
    std::vector<int> labels(static_cast<size_t>(B) * M);
    for (int b = 0; b < B; ++b) {
        const std::vector<float>& img = *images[static_cast<size_t>(b)];
        const std::vector<float>& cimg =
            cond_images != nullptr ? *(*cond_images)[static_cast<size_t>(b)] : img;
        std::vector<float> ep = encoder_input_patches(cimg, encoder.cfg);
        std::copy(ep.begin(), ep.end(), enc_patches.begin() + static_cast<size_t>(b) * L * pd);
        TokenSequence seq = quantize_image(img, cb, encoder.cfg.image_size, patch);
        std::vector<int> mpos = draw_mask_positions(Lq, M, rng);
        std::vector<uint8_t> used(static_cast<size_t>(Lq), 0);
        for (int i = 0; i < M; ++i) {
            const int p = mpos[static_cast<size_t>(i)];
            used[static_cast<size_t>(p)] = 1;
            masked_pos[static_cast<size_t>(b) * M + i] = p;
            labels[static_cast<size_t>(b) * M + i] = seq.indices[static_cast<size_t>(p)];
        }
        int k = 0;
        for (int p = 0; p < Lq; ++p) {
            if (used[static_cast<size_t>(p)] == 0) {
                unmasked_pos[static_cast<size_t>(b) * u + k] = p;
                std::copy(seq.embeddings.begin() + static_cast<size_t>(p) * cb.dim,
                          seq.embeddings.begin() + static_cast<size_t>(p + 1) * cb.dim,
                          unmasked.begin() + (static_cast<size_t>(b) * u + k) * cb.dim);
                ++k;
            }
        }
    }

    Tensor cond_in;
    {
        Tensor patches = Tensor::from_data({B, L, pd}, std::move(enc_patches));
        if (encoder_grad) {
            Tensor tokens = encoder.forward_tokens(patches, ctx);
            cond_in = encoder.condition_tokens(tokens, cond_idx, ctx);
        } else {
            NoGradGuard ng;
            Tensor tokens = encoder.forward_tokens(patches, ctx);
            cond_in = encoder.condition_tokens(tokens, cond_idx, ctx);
        }
    }
    Tensor cond = projector.project(cond_in, ctx);

    Tensor logits =
        perceiver.predict_masked(Tensor::from_data({B, u, cb.dim}, std::move(unmasked)),
                                 unmasked_pos, &cond, masked_pos, M, ctx);
    if (top1_accuracy != nullptr) {
        int hits = 0;
        const float* pl = logits.data();
        const int K = perceiver.K;
        for (int r = 0; r < B * M; ++r) {
            const float* row = pl + static_cast<size_t>(r) * K;
            int best = 0;
            for (int j = 1; j < K; ++j) {
                if (row[j] > row[best]) {
                    best = j;
                }
            }
            hits += best == labels[static_cast<size_t>(r)] ? 1 : 0;
        }
        *top1_accuracy = static_cast<double>(hits) / static_cast<double>(B * M);
    }
    return ce_loss(logits, labels);
}

TokenSequence greedy_decode(const PerceiverDenoiser& perceiver, const TokenSequence& partial,
                            const Tensor* cond, const Codebook& cb) {
    TokenSequence out = partial;
    const int M = partial.masked_count();
    if (M == 0) {
        return out;
    }
    const int u = partial.L - M;
    if (u < 1) {
        throw ContractError("greedy_decode: no unmasked context");
    }
    NoGradGuard ng;
    std::vector<float> unmasked(static_cast<size_t>(u) * cb.dim);
    std::vector<int> unmasked_pos(static_cast<size_t>(u));
    std::vector<int> masked_pos(static_cast<size_t>(M));
    int ku = 0, km = 0;
    for (int p = 0; p < partial.L; ++p) {
        if (partial.mask[static_cast<size_t>(p)] != 0) {
            masked_pos[static_cast<size_t>(km++)] = p;
        } else {
            std::copy(partial.embeddings.begin() + static_cast<size_t>(p) * cb.dim,
                      partial.embeddings.begin() + static_cast<size_t>(p + 1) * cb.dim,
                      unmasked.begin() + static_cast<size_t>(ku) * cb.dim);
            unmasked_pos[static_cast<size_t>(ku)] = p;
            ++ku;
        }
    }
    Tensor logits =
        perceiver.predict_masked(Tensor::from_data({1, u, cb.dim}, std::move(unmasked)),
                                 unmasked_pos, cond, masked_pos, M, {});
    const float* pl = logits.data();
    for (int i = 0; i < M; ++i) {
        const float* row = pl + static_cast<size_t>(i) * perceiver.K;
        int best = 0;
        for (int j = 1; j < perceiver.K; ++j) {
            if (row[j] > row[best]) {
                best = j;
            }
        }
        const int p = masked_pos[static_cast<size_t>(i)];
        out.indices[static_cast<size_t>(p)] = best;
        std::copy(cb.entry(best), cb.entry(best) + cb.dim,
                  out.embeddings.begin() + static_cast<size_t>(p) * cb.dim);
        out.mask[static_cast<size_t>(p)] = 0;
    }
    return out;
}

} // namespace genrep
