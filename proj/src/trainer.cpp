// SPDX-License-Identifier: Apache-2.0
#include "genrep/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "genrep/patches.hpp"

namespace genrep {

GenerativeStack::GenerativeStack(const StackConfig& c, const EncoderConfig& enc_cfg,
                                 uint64_t seed)
    : cfg(c) {
    cfg.condition.validate();
    const int cond_width =
        cfg.paradigm == Paradigm::flow ? cfg.flow.width : cfg.perceiver.width;
    ProjectorConfig pc;
    pc.in_dim = enc_cfg.dim;
    pc.out_dim = cond_width;
    pc.hidden = cfg.projector_hidden;
    projector = std::make_unique<Projector>(pc, splitmix64(seed ^ 0x17eaULL));
    if (cfg.paradigm == Paradigm::flow) {
        FlowDenoiserConfig fc = cfg.flow;
        fc.image_size = enc_cfg.image_size;
        fc.validate();
        cfg.flow = fc;
        flow = std::make_unique<FlowDenoiser>(fc, splitmix64(seed ^ 0x2fe1ULL));
    } else {
        const int g = enc_cfg.image_size / cfg.discrete_patch;
        perceiver = std::make_unique<PerceiverDenoiser>(
            cfg.perceiver, cfg.codebook_k, 3 * cfg.discrete_patch * cfg.discrete_patch, g * g,
            splitmix64(seed ^ 0x3a9dULL));
    }
}

void GenerativeStack::build_codebook_from(const Dataset& ds, Rng& rng) {
    if (!needs_codebook()) {
        return;
    }
    const int S = ds.cfg.image_size;
    const int p = cfg.discrete_patch;
    const int per_img = (S / p) * (S / p);
    const int dim = 3 * p * p;
    const std::vector<int> train_idx = ds.split_indices(0);
    // cap the corpus so the build stays cheap; sampling keeps it representative
    const int max_patches = std::max(cfg.codebook_k * 24, 4096);
    std::vector<float> corpus;
    corpus.reserve(static_cast<size_t>(max_patches) * dim);
    int n = 0;
    std::vector<int> order(train_idx.begin(), train_idx.end());
    for (size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<int>(i)))]);
    }
    for (int idx : order) {
        std::vector<float> patches = patchify(ds.items[static_cast<size_t>(idx)].image, S, p);
        for (int k = 0; k < per_img && n < max_patches; ++k, ++n) {
            corpus.insert(corpus.end(), patches.begin() + static_cast<size_t>(k) * dim,
                          patches.begin() + static_cast<size_t>(k + 1) * dim);
        }
        if (n >= max_patches) {
            break;
        }
    }
    codebook = build_codebook(corpus, n, dim, cfg.codebook_k, cfg.codebook_iters, rng);
}

void GenerativeStack::set_codebook(Codebook cb) { codebook = std::move(cb); }

Tensor GenerativeStack::training_loss(const std::vector<const std::vector<float>*>& batch,
                                      const Encoder& encoder, bool encoder_grad, Rng& rng,
                                      const FwdCtx& ctx) {
    if (cfg.paradigm == Paradigm::flow) {
        return flow_matching_loss(batch, encoder, *projector, *flow, cfg.sampler, cfg.condition,
                                  rng, ctx, encoder_grad);
    }
    if (codebook.K == 0) {
        throw ContractError("stack: codebook not built");
    }
    return masked_prediction_loss(batch, encoder, *projector, *perceiver, codebook, cfg.mask,
                                  cfg.condition, rng, ctx, encoder_grad);
}

double GenerativeStack::validation_loss(const Dataset& ds, const std::vector<int>& indices,
                                        const Encoder& encoder, uint64_t crn_seed, int max_items,
                                        int batch_size, bool permute_pairs) {
    NoGradGuard ng;
    Rng rng(splitmix64(crn_seed ^ 0x7a1ce5ULL));
    double total = 0.0;
    int batches = 0;
    const int n = std::min<int>(max_items, static_cast<int>(indices.size()));
    for (int start = 0; start < n; start += batch_size) {
        const int b = std::min(batch_size, n - start);
        std::vector<const std::vector<float>*> batch;
        batch.reserve(static_cast<size_t>(b));
        for (int i = 0; i < b; ++i) {
            batch.push_back(&ds.items[static_cast<size_t>(indices[static_cast<size_t>(start + i)])].image);
        }
        std::vector<const std::vector<float>*> cond_batch;
        const std::vector<const std::vector<float>*>* cond_ptr = nullptr;
        if (permute_pairs) {
            for (int i = 0; i < b; ++i) {
                cond_batch.push_back(batch[static_cast<size_t>((i + 1) % b)]);
            }
            cond_ptr = &cond_batch;
        }
        Tensor loss;
        if (cfg.paradigm == Paradigm::flow) {
            loss = flow_matching_loss(batch, encoder, *projector, *flow, cfg.sampler,
                                      cfg.condition, rng, {}, false, cond_ptr);
        } else {
            loss = masked_prediction_loss(batch, encoder, *projector, *perceiver, codebook,
                                          cfg.mask, cfg.condition, rng, {}, false,
                                          cfg.recon_mask_ratio, nullptr, cond_ptr);
        }
        total += loss.item();
        ++batches;
    }
    return batches > 0 ? total / batches : 0.0;
}

std::vector<float> GenerativeStack::reconstruct(const std::vector<float>& image,
                                                const Encoder& encoder, uint64_t seed) {
    NoGradGuard ng;
    Rng rng(splitmix64(seed ^ 0x4ec0ULL));
    TokenBundle bundle = encoder.encode(image);
    Tensor cond_rows = select_condition_tokens(bundle, cfg.condition, rng);
    Tensor cond = projector->project(
        reshape(cond_rows, {1, cond_rows.dim(0), cond_rows.dim(1)}), {});
    if (cfg.paradigm == Paradigm::flow) {
        return euler_sample(*flow, cond, cfg.recon_steps, rng).image;
    }
    TokenSequence seq = quantize_image(image, codebook, encoder.cfg.image_size, cfg.discrete_patch);
    const int M = mask_count_for_ratio(cfg.recon_mask_ratio, seq.L);
    std::vector<int> masked = draw_mask_positions(seq.L, M, rng);
    for (int p : masked) {
        seq.mask[static_cast<size_t>(p)] = 1;
    }
    TokenSequence full = greedy_decode(*perceiver, seq, &cond, codebook);
    std::vector<float> img = dequantize_image(full, codebook, encoder.cfg.image_size,
                                              cfg.discrete_patch);
    for (float& v : img) {
        v = std::clamp(v, 0.0f, 1.0f);
    }
    return img;
}

std::vector<Parameter*> GenerativeStack::projector_params() { return projector->params.all(); }

std::vector<Parameter*> GenerativeStack::denoiser_params() {
    return cfg.paradigm == Paradigm::flow ? flow->params.all() : perceiver->params.all();
}

std::vector<Parameter*> GenerativeStack::all_gen_params() {
    std::vector<Parameter*> out = projector_params();
    std::vector<Parameter*> d = denoiser_params();
    out.insert(out.end(), d.begin(), d.end());
    return out;
}

ParamMap GenerativeStack::checkpoint_params() {
    ParamMap map;
    append_params(map, "projector.", projector->params);
    if (cfg.paradigm == Paradigm::flow) {
        append_params(map, "flow.", flow->params);
    } else {
        append_params(map, "perceiver.", perceiver->params);
    }
    return map;
}

namespace {

std::vector<const std::vector<float>*> sample_batch(const Dataset& ds,
                                                    const std::vector<int>& pool, int batch_size,
                                                    Rng& rng) {
    std::vector<const std::vector<float>*> batch;
    batch.reserve(static_cast<size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) {
        const int idx = pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))];
        batch.push_back(&ds.items[static_cast<size_t>(idx)].image);
    }
    return batch;
}

void check_loss_finite(double v, const char* stage) {
    if (!std::isfinite(v)) {
        throw ContractError(std::string(stage) + ": non-finite training loss");
    }
}

struct LoopCfg {
    const char* tag;
    int steps;
    double lr;
    int start_step = 0;
};

// One optimizer step per loop iteration; gradient accumulation splits the
// batch sampling, not the step count.
void run_training_loop(const Dataset& ds, const std::vector<int>& pool, Encoder& encoder,
                       GenerativeStack& stack, AdamW& opt, const TrainerConfig& cfg,
                       bool encoder_grad, const LoopCfg& loop, const std::string& run_id,
                       CsvLogger* log, const EvalHookFn& hook) {
    Rng rng(splitmix64(cfg.seed ^ (0x57a6eULL + static_cast<uint64_t>(loop.lr * 1e9) +
                                   static_cast<uint64_t>(loop.steps) +
                                   static_cast<uint64_t>(loop.start_step) * 0x9e37ULL)));
    FwdCtx ctx{true, &rng};
    for (int step = loop.start_step + 1; step <= loop.steps; ++step) {
        opt.zero_grad();
        double loss_value = 0.0;
        for (int acc = 0; acc < cfg.grad_accum; ++acc) {
            auto batch = sample_batch(ds, pool, cfg.batch_size, rng);
            Tensor loss = stack.training_loss(batch, encoder, encoder_grad, rng, ctx);
            if (cfg.grad_accum > 1) {
                loss = scale(loss, 1.0f / static_cast<float>(cfg.grad_accum));
            }
            loss_value += loss.item();
            loss.backward();
        }
        check_loss_finite(loss_value, loop.tag);
        opt.step();
        if (log != nullptr && (step % cfg.log_every == 0 || step == loop.steps)) {
            log->row(run_id, loop.tag, step, "train_loss", loss_value);
        }
        if (hook && cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == loop.steps)) {
            hook(loop.tag, step);
        }
    }
}

} // namespace

void train_warmup(Encoder& encoder, const Dataset& ds, const TrainerConfig& cfg,
                  const std::string& run_id, CsvLogger* log) {
    const std::vector<int> pool = ds.split_indices(0);
    if (pool.empty()) {
        throw ContractError("warmup: empty train split");
    }
    ParamRegistry head_reg;
    Rng init_rng(splitmix64(cfg.seed ^ 0x6eadULL));
    Linear head = make_linear(head_reg, "head", encoder.cfg.dim, 4, init_rng);
    std::vector<Parameter*> all = encoder.params.all();
    for (Parameter* p : all) {
        p->set_trainable(true);
    }
    std::vector<Parameter*> head_params = head_reg.all();
    all.insert(all.end(), head_params.begin(), head_params.end());
    AdamW opt(all, cfg.adamw(cfg.warmup_lr));

    Rng rng(splitmix64(cfg.seed ^ 0x3a11ULL));
    FwdCtx ctx{true, &rng};
    const int L = encoder.cfg.local_tokens();
    const int pd = encoder.cfg.patch_dim();
    for (int step = 1; step <= cfg.warmup_steps; ++step) {
        opt.zero_grad();
        std::vector<int> ids(static_cast<size_t>(cfg.batch_size));
        for (int& id : ids) {
            id = pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))];
        }
        std::vector<float> patches(static_cast<size_t>(cfg.batch_size) * L * pd);
        std::vector<int> labels(static_cast<size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            const LabeledImage& it = ds.items[static_cast<size_t>(ids[static_cast<size_t>(b)])];
            std::vector<float> p = encoder_input_patches(it.image, encoder.cfg);
            std::copy(p.begin(), p.end(), patches.begin() + static_cast<size_t>(b) * L * pd);
            labels[static_cast<size_t>(b)] = it.spec.shape_class;
        }
        Tensor tokens = encoder.forward_tokens(
            Tensor::from_data({cfg.batch_size, L, pd}, std::move(patches)), ctx);
        Tensor cls = reshape(slice_axis1(tokens, 0, 1), {cfg.batch_size, encoder.cfg.dim});
        Tensor logits = head.forward(cls, ctx);
        Tensor loss = cross_entropy_logits(logits, labels);
        const double lv = loss.item();
        check_loss_finite(lv, "warmup");
        loss.backward();
        opt.step();
        if (log != nullptr && (step % cfg.log_every == 0 || step == cfg.warmup_steps)) {
            log->row(run_id, "warmup", step, "train_loss", lv);
        }
    }
}

void train_stage1(const Dataset& ds, Encoder& encoder, GenerativeStack& stack,
                  const TrainerConfig& cfg, const std::string& run_id, CsvLogger* log,
                  const EvalHookFn& hook, AdamW* external_opt, int start_step) {
    const std::vector<int> pool = ds.split_indices(0);
    if (pool.empty()) {
        throw ContractError("stage1: empty dataset");
    }
    for (Parameter* p : encoder.params.all()) {
        p->set_trainable(false);
    }
    for (Parameter* p : stack.all_gen_params()) {
        p->set_trainable(true);
    }
    AdamW local_opt(stack.all_gen_params(), cfg.adamw(cfg.stage1_lr));
    AdamW& opt = external_opt != nullptr ? *external_opt : local_opt;
    run_training_loop(ds, pool, encoder, stack, opt, cfg, /*encoder_grad=*/false,
                      {"stage1", cfg.stage1_steps, cfg.stage1_lr, start_step}, run_id, log,
                      hook);
}

void train_stage2(const Dataset& ds, Encoder& encoder, GenerativeStack& stack,
                  const TrainerConfig& cfg, bool use_lora, const std::string& run_id,
                  CsvLogger* log, const EvalHookFn& hook, AdamW* external_opt, int start_step) {
    const std::vector<int> pool = ds.split_indices(0);
    if (pool.empty()) {
        throw ContractError("stage2: empty dataset");
    }
    std::vector<Parameter*> trainables;
    if (use_lora) {
        if (!encoder.has_lora()) {
            throw ContractError("stage2: lora not applied to the encoder");
        }
        trainables = encoder.lora_params();
        for (Parameter* p : trainables) {
            p->set_trainable(true);
        }
    } else {
        // direct full-parameter tuning (ablation arm)
        for (Parameter* p : encoder.params.all()) {
            p->set_trainable(true);
            trainables.push_back(p);
        }
    }
    for (Parameter* p : stack.projector_params()) {
        p->set_trainable(cfg.update_projector_in_stage2);
        if (cfg.update_projector_in_stage2) {
            trainables.push_back(p);
        }
    }
    for (Parameter* p : stack.denoiser_params()) {
        p->set_trainable(cfg.update_denoiser_in_stage2);
        if (cfg.update_denoiser_in_stage2) {
            trainables.push_back(p);
        }
    }
    AdamW local_opt(trainables, cfg.adamw(cfg.stage2_lr));
    AdamW& opt = external_opt != nullptr ? *external_opt : local_opt;
    run_training_loop(ds, pool, encoder, stack, opt, cfg, /*encoder_grad=*/true,
                      {"stage2", cfg.stage2_steps, cfg.stage2_lr, start_step}, run_id, log,
                      hook);
}

void train_end_to_end(const Dataset& ds, Encoder& encoder, GenerativeStack& stack,
                      const TrainerConfig& cfg, const std::string& run_id, CsvLogger* log,
                      const EvalHookFn& hook, AdamW* external_opt, int start_step) {
    const std::vector<int> pool = ds.split_indices(0);
    if (pool.empty()) {
        throw ContractError("e2e: empty dataset");
    }
    std::vector<Parameter*> trainables;
    if (encoder.has_lora()) {
        trainables = encoder.lora_params();
        for (Parameter* p : trainables) {
            p->set_trainable(true);
        }
    } else {
        for (Parameter* p : encoder.params.all()) {
            p->set_trainable(true);
            trainables.push_back(p);
        }
    }
    for (Parameter* p : stack.all_gen_params()) {
        p->set_trainable(true);
        trainables.push_back(p);
    }
    AdamW local_opt(trainables, cfg.adamw(cfg.stage1_lr));
    AdamW& opt = external_opt != nullptr ? *external_opt : local_opt;
    run_training_loop(ds, pool, encoder, stack, opt, cfg, /*encoder_grad=*/true,
                      {"e2e", cfg.stage1_steps + cfg.stage2_steps, cfg.stage1_lr, start_step},
                      run_id, log, hook);
}

} // namespace genrep
