// SPDX-License-Identifier: Apache-2.0
#include "genrep/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace genrep {

namespace {

class Section {
public:
    Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {}

    template <typename T>
    void get(const char* key, T& out) {
        known_.insert(key);
        if (j_.contains(key)) {
            out = j_.at(key).get<T>();
        }
    }

    void get_enum(const char* key, std::string& out) { get<std::string>(key, out); }

    ~Section() noexcept(false) {
        for (const auto& [k, v] : j_.items()) {
            (void)v;
            if (known_.count(k) == 0) {
                throw ConfigError("unknown config key: " + name_ + "." + k);
            }
        }
    }

private:
    const nlohmann::json& j_;
    std::string name_;
    std::set<std::string> known_;
};

const nlohmann::json kEmpty = nlohmann::json::object();

const nlohmann::json& section(const nlohmann::json& j, const char* name) {
    return j.contains(name) ? j.at(name) : kEmpty;
}

} // namespace

RunConfig parse_run_config(const nlohmann::json& j) {
    static const std::set<std::string> kSections = {"data",     "encoder", "projector",
                                                    "flow",     "discrete", "trainer",
                                                    "eval",     "ablation"};
    for (const auto& [k, v] : j.items()) {
        (void)v;
        if (kSections.count(k) == 0) {
            throw ConfigError("unknown config section: " + k);
        }
    }
    RunConfig c;
    {
        Section s(section(j, "data"), "data");
        s.get("n", c.data.n);
        s.get("seed", c.data.seed);
        s.get("image_size", c.data.image_size);
        s.get("noise_sigma", c.data.noise_sigma);
    }
    {
        Section s(section(j, "encoder"), "encoder");
        s.get("image_size", c.encoder.image_size);
        s.get("patch_size", c.encoder.patch_size);
        s.get("dim", c.encoder.dim);
        s.get("depth", c.encoder.depth);
        s.get("heads", c.encoder.heads);
        std::string pooling = "class_token";
        s.get_enum("pooling", pooling);
        if (pooling == "class_token") {
            c.encoder.pooling = Pooling::class_token;
        } else if (pooling == "attention_pool") {
            c.encoder.pooling = Pooling::attention_pool;
        } else {
            throw ConfigError("encoder.pooling must be class_token or attention_pool");
        }
        s.get("local_ratio", c.condition.local_ratio);
        s.get("selection_seed", c.condition.selection_seed);
    }
    {
        Section s(section(j, "projector"), "projector");
        s.get("in_dim", c.projector_in_dim);
        s.get("out_dim", c.projector_out_dim);
        s.get("hidden", c.projector_hidden);
    }
    {
        Section s(section(j, "flow"), "flow");
        s.get("n_mm", c.flow.n_mm);
        s.get("n_single", c.flow.n_single);
        s.get("width", c.flow.width);
        s.get("heads", c.flow.heads);
        s.get("patch", c.flow.patch);
        std::string mode = "scaled_logit_normal";
        s.get_enum("t_mode", mode);
        if (mode == "uniform") {
            c.sampler.mode = TimeMode::uniform;
        } else if (mode == "scaled_logit_normal") {
            c.sampler.mode = TimeMode::scaled_logit_normal;
        } else {
            throw ConfigError("flow.t_mode must be uniform or scaled_logit_normal");
        }
        s.get("t_scale", c.sampler.scale);
        s.get("recon_steps", c.flow_recon_steps);
    }
    {
        Section s(section(j, "discrete"), "discrete");
        s.get("codebook_k", c.codebook_k);
        s.get("codebook_iters", c.codebook_iters);
        s.get("perceiver_layers", c.perceiver.layers);
        s.get("width", c.perceiver.width);
        s.get("heads", c.perceiver.heads);
        s.get("patch", c.discrete_patch);
        s.get("mask_low", c.mask.ratio_low);
        s.get("mask_high", c.mask.ratio_high);
        s.get("recon_mask_ratio", c.recon_mask_ratio);
    }
    {
        Section s(section(j, "trainer"), "trainer");
        s.get("stage1_lr", c.trainer.stage1_lr);
        s.get("stage2_lr", c.trainer.stage2_lr);
        s.get("warmup_lr", c.trainer.warmup_lr);
        s.get("stage1_steps", c.trainer.stage1_steps);
        s.get("stage2_steps", c.trainer.stage2_steps);
        s.get("warmup_steps", c.trainer.warmup_steps);
        s.get("batch_size", c.trainer.batch_size);
        s.get("grad_accum", c.trainer.grad_accum);
        s.get("update_denoiser_in_stage2", c.trainer.update_denoiser_in_stage2);
        s.get("update_projector_in_stage2", c.trainer.update_projector_in_stage2);
        s.get("seed", c.trainer.seed);
        s.get("log_every", c.trainer.log_every);
        s.get("eval_every", c.trainer.eval_every);
        s.get("weight_decay", c.trainer.weight_decay);
        s.get("adam_beta1", c.trainer.adam_beta1);
        s.get("adam_beta2", c.trainer.adam_beta2);
        s.get("adam_eps", c.trainer.adam_eps);
        s.get("lora_rank", c.trainer.lora_rank);
        s.get("lora_alpha", c.trainer.lora_alpha);
        s.get("lora_dropout", c.trainer.lora_dropout);
        s.get("use_lora", c.use_lora);
    }
    {
        Section s(section(j, "eval"), "eval");
        s.get("probe_l2", c.eval.probe_l2);
        s.get("recon_images", c.eval.recon_images);
        s.get("pair_count", c.eval.pair_count);
    }
    {
        Section s(section(j, "ablation"), "ablation");
        s.get("dimension", c.ablation.dimension);
        s.get("grid", c.ablation.grid);
        s.get("seeds", c.ablation.seeds);
    }
    if (c.data.image_size != c.encoder.image_size) {
        throw ConfigError("data.image_size must match encoder.image_size");
    }
    c.encoder.validate();
    c.condition.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open config: " + path);
    }
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) {
        throw ConfigError("config is not valid json: " + path);
    }
    return parse_run_config(j);
}

StackConfig RunConfig::stack_config(Paradigm paradigm) const {
    StackConfig s;
    s.paradigm = paradigm;
    s.flow = flow;
    s.flow.image_size = encoder.image_size;
    s.sampler = sampler;
    s.perceiver = perceiver;
    s.discrete_patch = discrete_patch;
    s.codebook_k = codebook_k;
    s.codebook_iters = codebook_iters;
    s.mask = mask;
    s.condition = condition;
    s.projector_hidden = projector_hidden;
    s.recon_steps = flow_recon_steps;
    s.recon_mask_ratio = recon_mask_ratio;
    return s;
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["data"] = {{"n", data.n},
                 {"seed", data.seed},
                 {"image_size", data.image_size},
                 {"noise_sigma", data.noise_sigma}};
    j["encoder"] = {{"image_size", encoder.image_size},
                    {"patch_size", encoder.patch_size},
                    {"dim", encoder.dim},
                    {"depth", encoder.depth},
                    {"heads", encoder.heads},
                    {"pooling", encoder.pooling == Pooling::class_token ? "class_token"
                                                                        : "attention_pool"},
                    {"local_ratio", condition.local_ratio},
                    {"selection_seed", condition.selection_seed}};
    j["projector"] = {{"in_dim", projector_in_dim},
                      {"out_dim", projector_out_dim},
                      {"hidden", projector_hidden}};
    j["flow"] = {{"n_mm", flow.n_mm},
                 {"n_single", flow.n_single},
                 {"width", flow.width},
                 {"heads", flow.heads},
                 {"patch", flow.patch},
                 {"t_mode", sampler.mode == TimeMode::uniform ? "uniform" : "scaled_logit_normal"},
                 {"t_scale", sampler.scale},
                 {"recon_steps", flow_recon_steps}};
    j["discrete"] = {{"codebook_k", codebook_k},
                     {"codebook_iters", codebook_iters},
                     {"perceiver_layers", perceiver.layers},
                     {"width", perceiver.width},
                     {"heads", perceiver.heads},
                     {"patch", discrete_patch},
                     {"mask_low", mask.ratio_low},
                     {"mask_high", mask.ratio_high},
                     {"recon_mask_ratio", recon_mask_ratio}};
    j["trainer"] = {{"stage1_lr", trainer.stage1_lr},
                    {"stage2_lr", trainer.stage2_lr},
                    {"warmup_lr", trainer.warmup_lr},
                    {"stage1_steps", trainer.stage1_steps},
                    {"stage2_steps", trainer.stage2_steps},
                    {"warmup_steps", trainer.warmup_steps},
                    {"batch_size", trainer.batch_size},
                    {"grad_accum", trainer.grad_accum},
                    {"update_denoiser_in_stage2", trainer.update_denoiser_in_stage2},
                    {"update_projector_in_stage2", trainer.update_projector_in_stage2},
                    {"seed", trainer.seed},
                    {"log_every", trainer.log_every},
                    {"eval_every", trainer.eval_every},
                    {"weight_decay", trainer.weight_decay},
                    {"adam_beta1", trainer.adam_beta1},
                    {"adam_beta2", trainer.adam_beta2},
                    {"adam_eps", trainer.adam_eps},
                    {"lora_rank", trainer.lora_rank},
                    {"lora_alpha", trainer.lora_alpha},
                    {"lora_dropout", trainer.lora_dropout},
                    {"use_lora", use_lora}};
    j["eval"] = {{"probe_l2", eval.probe_l2},
                 {"recon_images", eval.recon_images},
                 {"pair_count", eval.pair_count}};
    j["ablation"] = {{"dimension", ablation.dimension},
                     {"grid", ablation.grid},
                     {"seeds", ablation.seeds}};
    return j;
}

uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string RunConfig::run_id() const {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(to_json().dump())));
    return buf;
}

} // namespace genrep
