// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>

#include "genrep/csvlog.hpp"
#include "genrep/checkpoint.hpp"
#include "genrep/data.hpp"
#include "genrep/discrete.hpp"
#include "genrep/encoder.hpp"
#include "genrep/flow.hpp"
#include "genrep/optim.hpp"
#include "genrep/projector.hpp"

namespace genrep {

enum class Paradigm { flow, discrete };

struct TrainerConfig {
    double stage1_lr = 1e-4;
    double stage2_lr = 1e-5;
    double warmup_lr = 1e-3;
    int stage1_steps = 4000;
    int stage2_steps = 1000;
    int warmup_steps = 2000;
    int batch_size = 64;
    int grad_accum = 1;
    bool update_denoiser_in_stage2 = false;
    bool update_projector_in_stage2 = false;
    uint64_t seed = 1;
    int log_every = 50;
    int eval_every = 200;
    double weight_decay = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int lora_rank = 16;
    double lora_alpha = 16.0;
    double lora_dropout = 0.1;

    AdamWConfig adamw(double lr) const {
        return AdamWConfig{lr, adam_beta1, adam_beta2, adam_eps, weight_decay};
    }
    LoraConfig lora() const {
        LoraConfig c;
        c.rank = lora_rank;
        c.alpha = static_cast<float>(lora_alpha);
        c.dropout = static_cast<float>(lora_dropout);
        return c;
    }
};

// Paradigm-specific knobs for the generative side.
struct StackConfig {
    Paradigm paradigm = Paradigm::flow;
    FlowDenoiserConfig flow;
    TimestepSampler sampler;
    PerceiverConfig perceiver;
    int discrete_patch = 4;
    int codebook_k = 512;
    int codebook_iters = 12;
    MaskSpec mask;
    ConditionSpec condition;
    int projector_hidden = 0;
    int recon_steps = 20;         // Euler steps for reconstruction diagnostics
    double recon_mask_ratio = 0.7; // pinned eval mask for the discrete decode
};

// Projector + denoiser (+ codebook for the discrete paradigm) behind one
// train/eval surface so the two-stage trainer is paradigm-agnostic.
class GenerativeStack {
public:
    GenerativeStack(const StackConfig& cfg, const EncoderConfig& enc_cfg, uint64_t seed);

    bool needs_codebook() const { return cfg.paradigm == Paradigm::discrete; }
    void build_codebook_from(const Dataset& ds, Rng& rng);
    void set_codebook(Codebook cb);

    Tensor training_loss(const std::vector<const std::vector<float>*>& batch,
                         const Encoder& encoder, bool encoder_grad, Rng& rng, const FwdCtx& ctx);
    // Held-out objective under common random numbers so checkpoints are
    // comparable; runs without gradients.
    double validation_loss(const Dataset& ds, const std::vector<int>& indices,
                           const Encoder& encoder, uint64_t crn_seed, int max_items,
                           int batch_size, bool permute_pairs = false);
    std::vector<float> reconstruct(const std::vector<float>& image, const Encoder& encoder,
                                   uint64_t seed);

    std::vector<Parameter*> projector_params();
    std::vector<Parameter*> denoiser_params();
    std::vector<Parameter*> all_gen_params();
    ParamMap checkpoint_params();

    StackConfig cfg;
    std::unique_ptr<Projector> projector;
    std::unique_ptr<FlowDenoiser> flow;
    std::unique_ptr<PerceiverDenoiser> perceiver;
    Codebook codebook;
};

using EvalHookFn = std::function<void(const std::string& stage, int step)>;

// Supervised warm-up on the coarse shape classes; the resulting snapshot is
// the reference model for drift and reconstruction scoring.
void train_warmup(Encoder& encoder, const Dataset& ds, const TrainerConfig& cfg,
                  const std::string& run_id, CsvLogger* log);

void train_stage1(const Dataset& ds, Encoder& encoder, GenerativeStack& stack,
                  const TrainerConfig& cfg, const std::string& run_id, CsvLogger* log,
                  const EvalHookFn& hook = {}, AdamW* external_opt = nullptr,
                  int start_step = 0);

// Requires LoRA applied when use_lora; flags control whether the generative
// side keeps training.
void train_stage2(const Dataset& ds, Encoder& encoder, GenerativeStack& stack,
                  const TrainerConfig& cfg, bool use_lora, const std::string& run_id,
                  CsvLogger* log, const EvalHookFn& hook = {}, AdamW* external_opt = nullptr,
                  int start_step = 0);

// Joint baseline at the same total step budget.
void train_end_to_end(const Dataset& ds, Encoder& encoder, GenerativeStack& stack,
                      const TrainerConfig& cfg, const std::string& run_id, CsvLogger* log,
                      const EvalHookFn& hook = {}, AdamW* external_opt = nullptr,
                      int start_step = 0);

} // namespace genrep
