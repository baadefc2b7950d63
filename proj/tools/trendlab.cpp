// SPDX-License-Identifier: Apache-2.0
//
// Calibration harness: measures conditioning sensitivity, drift separation,
// probe headroom, and trend directions for a candidate configuration.
// Development tool; the shipped surface is the genrep CLI.

#include <cstdio>
#include <cstring>
#include <string>

#include "genrep/pipeline.hpp"

using namespace genrep;

namespace {

RunConfig lab_config(uint64_t seed) {
    RunConfig c;
    c.data.n = 1536;
    c.data.seed = seed;
    c.data.image_size = 32;
    c.data.noise_sigma = 0.06f;
    c.encoder.image_size = 32;
    c.encoder.patch_size = 8;
    c.encoder.dim = 48;
    c.encoder.depth = 3;
    c.encoder.heads = 4;
    c.flow.n_mm = 1;
    c.flow.n_single = 2;
    c.flow.width = 64;
    c.flow.heads = 4;
    c.flow.patch = 8;
    c.perceiver.layers = 3;
    c.perceiver.width = 64;
    c.perceiver.heads = 4;
    c.discrete_patch = 8;
    c.codebook_k = 256;
    c.codebook_iters = 10;
    c.trainer.warmup_steps = 300;
    c.trainer.warmup_lr = 1e-3;
    c.trainer.stage1_steps = 700;
    c.trainer.stage2_steps = 240;
    c.trainer.stage1_lr = 3e-4;
    c.trainer.stage2_lr = 1e-3;
    c.trainer.batch_size = 16;
    c.trainer.seed = seed;
    c.trainer.eval_every = 0;
    c.trainer.lora_rank = 8;
    c.trainer.lora_dropout = 0.0;
    c.trainer.log_every = 100;
    c.flow_recon_steps = 10;
    c.eval.recon_images = 24;
    c.eval.probe_l2 = 1e-3;
    return c;
}

void report(const char* tag, const ProbeReport& r) {
    std::printf("%s: coarse %.3f fine %.3f [", tag, r.coarse, r.fine_mean);
    for (const auto& [k, v] : r.per_attribute) {
        std::printf(" %s %.3f", k.c_str(), v);
    }
    std::printf(" ] drift %.4f recon %.3f\n", r.drift, r.recon_score);
}

void probe_headroom(uint64_t seed) {
    RunConfig cfg = lab_config(seed);
    auto ds = dataset_cached(cfg.data);
    Encoder random_enc(cfg.encoder, cfg.trainer.seed);
    ProbeReport rnd = fine_grained_eval(random_enc, *ds, random_enc, nullptr, 1e-3, 0);
    report("random-encoder", rnd);
    auto warm = warm_encoder(cfg, nullptr);
    ProbeReport v0 = fine_grained_eval(*warm, *ds, *warm, nullptr, 1e-3, 0);
    report("V0(warm)", v0);
}

void condition_sensitivity(uint64_t seed, Paradigm paradigm, int steps, double lr) {
    RunConfig cfg = lab_config(seed);
    cfg.trainer.stage1_steps = steps;
    cfg.trainer.stage1_lr = lr;
    auto ds = dataset_cached(cfg.data);
    auto enc = warm_encoder(cfg, nullptr);
    GenerativeStack stack(cfg.stack_config(paradigm), cfg.encoder, seed);
    if (stack.needs_codebook()) {
        stack.set_codebook(codebook_cached(cfg, *ds));
    }
    const std::vector<int> val = ds->split_indices(1);
    train_stage1(*ds, *enc, stack, cfg.trainer, "lab", nullptr);
    const double matched = stack.validation_loss(*ds, val, *enc, 7, 128, 16, false);
    const double permuted = stack.validation_loss(*ds, val, *enc, 7, 128, 16, true);
    std::printf("cond-sens %s steps %d lr %g: matched %.5f permuted %.5f gap %.3f%%\n",
                paradigm == Paradigm::flow ? "flow" : "disc", steps, lr, matched, permuted,
                100.0 * (permuted - matched) / matched);
}

void drift_compare(uint64_t seed, int steps, double lr) {
    RunConfig cfg = lab_config(seed);
    cfg.trainer.stage2_steps = steps;
    cfg.trainer.stage2_lr = lr;
    auto ds = dataset_cached(cfg.data);
    for (bool use_lora : {true, false}) {
        auto enc = warm_encoder(cfg, nullptr);
        Encoder ref(cfg.encoder, cfg.trainer.seed);
        ref.copy_params_from(*enc);
        GenerativeStack stack(cfg.stack_config(Paradigm::flow), cfg.encoder, seed);
        train_stage1(*ds, *enc, stack, cfg.trainer, "lab", nullptr);
        if (use_lora) {
            enc->apply_lora(cfg.trainer.lora(), seed);
        }
        train_stage2(*ds, *enc, stack, cfg.trainer, use_lora, "lab", nullptr);
        std::vector<std::vector<float>> probe;
        for (int i : ds->split_indices(1)) {
            probe.push_back(ds->items[static_cast<size_t>(i)].image);
            if (probe.size() == 24) {
                break;
            }
        }
        std::printf("drift %s steps %d lr %g: %.5f\n", use_lora ? "lora  " : "direct", steps,
                    lr, feature_drift(*enc, ref, probe));
    }
}

void full_run(uint64_t seed, Paradigm paradigm, const char* dim, const char* x) {
    RunConfig base = lab_config(seed);
    PipelineMode mode = PipelineMode::two_stage;
    RunConfig cfg = apply_dimension(base, dim, x, paradigm, mode);
    cfg.data.seed = seed;
    cfg.trainer.seed = seed;
    PipelineOutcome oc = run_pipeline(cfg, paradigm, mode, "");
    std::printf("run %s %s=%s seed %llu: v0 fine %.3f coarse %.3f | final fine %.3f coarse %.3f "
                "| val_loss %.4f recon %.3f drift %.4f\n",
                paradigm == Paradigm::flow ? "flow" : "disc", dim, x,
                static_cast<unsigned long long>(seed), oc.v0.fine_mean, oc.v0.coarse,
                oc.final_report.fine_mean, oc.final_report.coarse, oc.final_val_loss,
                oc.final_report.recon_score, oc.final_report.drift);
    std::printf("   curve:");
    for (const StepPoint& p : oc.curve) {
        std::printf(" (%d: rs %.3f fa %.3f vl %.3f)", p.step, p.recon_score, p.fine_acc,
                    p.val_loss);
    }
    std::printf("\n");
}

} // namespace

int main(int argc, char** argv) {
    const std::string mode = argc > 1 ? argv[1] : "headroom";
    const uint64_t seed = argc > 2 ? std::stoull(argv[2]) : 1;
    if (mode == "headroom") {
        probe_headroom(seed);
    } else if (mode == "cond") {
        const int steps = argc > 3 ? std::stoi(argv[3]) : 700;
        const double lr = argc > 4 ? std::stod(argv[4]) : 3e-4;
        condition_sensitivity(seed, Paradigm::flow, steps, lr);
        condition_sensitivity(seed, Paradigm::discrete, steps, lr);
    } else if (mode == "drift") {
        const int steps = argc > 3 ? std::stoi(argv[3]) : 240;
        const double lr = argc > 4 ? std::stod(argv[4]) : 1e-3;
        drift_compare(seed, steps, lr);
    } else if (mode == "run") {
        const char* dim = argc > 3 ? argv[3] : "local_ratio";
        const char* x = argc > 4 ? argv[4] : "0";
        const char* par = argc > 5 ? argv[5] : "flow";
        full_run(seed, std::strcmp(par, "flow") == 0 ? Paradigm::flow : Paradigm::discrete, dim,
                 x);
    } else {
        std::fprintf(stderr, "modes: headroom | cond | drift | run\n");
        return 2;
    }
    return 0;
}
