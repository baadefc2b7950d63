// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "genrep/data.hpp"
#include "genrep/trainer.hpp"

namespace genrep {

struct EvalConfig {
    double probe_l2 = 1e-3;
    int recon_images = 64;
    int pair_count = 200;
};

struct AblationConfig {
    std::string dimension;
    std::vector<std::string> grid;
    std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
};

// One structured config drives every phase. Unknown keys are rejected so a
// typo can never silently fall back to a default.
struct RunConfig {
    DataConfig data;
    EncoderConfig encoder;
    ConditionSpec condition;
    int projector_in_dim = 0;  // 0 derives from encoder.dim
    int projector_out_dim = 0; // 0 derives from the denoiser width
    int projector_hidden = 0;  // 0 derives as 2 * out_dim
    FlowDenoiserConfig flow;
    TimestepSampler sampler;
    int flow_recon_steps = 20;
    PerceiverConfig perceiver;
    int discrete_patch = 4;
    int codebook_k = 512;
    int codebook_iters = 12;
    MaskSpec mask;
    double recon_mask_ratio = 0.7;
    TrainerConfig trainer;
    bool use_lora = true;
    EvalConfig eval;
    AblationConfig ablation;

    StackConfig stack_config(Paradigm paradigm) const;
    std::string run_id() const; // config hash
    nlohmann::json to_json() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

uint64_t fnv1a64(const std::string& s);

} // namespace genrep
