// SPDX-License-Identifier: Apache-2.0
//
// Operator surface: dataset generation, stage-wise training, evaluation,
// ablation sweeps, and tidy-CSV figure exports.

#include <filesystem>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "genrep/image_io.hpp"
#include "genrep/pipeline.hpp"

namespace fs = std::filesystem;
using namespace genrep;

namespace {

void print_marginals(const Dataset& ds) {
    const std::array<Attr, 6> attrs = {Attr::shape,       Attr::color,    Attr::count,
                                       Attr::orientation, Attr::position, Attr::size};
    for (Attr a : attrs) {
        std::map<int, int> counts;
        for (const LabeledImage& it : ds.items) {
            ++counts[attribute_value(it.spec, a)];
        }
        std::cout << attribute_name(a) << ":";
        for (int v = 0; v < attribute_cardinality(a); ++v) {
            std::cout << ' ' << static_cast<double>(counts[v]) / static_cast<double>(ds.items.size());
        }
        std::cout << '\n';
    }
}

struct StageCkpt {
    ParamMap map;
    std::unique_ptr<Parameter> opt_state;
};

StageCkpt checkpoint_map(Encoder& enc, GenerativeStack* stack, AdamW* opt) {
    StageCkpt ck;
    append_params(ck.map, "encoder.", enc.params);
    if (stack != nullptr) {
        ParamMap gen = stack->checkpoint_params();
        ck.map.insert(ck.map.end(), gen.begin(), gen.end());
    }
    if (opt != nullptr) {
        std::vector<float> blob = opt->state_blob();
        ck.opt_state = std::make_unique<Parameter>();
        ck.opt_state->name = "optim.state";
        ck.opt_state->tensor =
            Tensor::from_data({static_cast<int>(blob.size())}, std::move(blob));
        ck.map.emplace_back("optim.state", ck.opt_state.get());
    }
    return ck;
}

void save_stage(const std::string& path, Encoder& enc, GenerativeStack* stack, AdamW* opt,
                int completed_steps, const RunConfig& cfg, Paradigm paradigm) {
    StageCkpt ck = checkpoint_map(enc, stack, opt);
    nlohmann::json extra;
    extra["completed_steps"] = completed_steps;
    extra["optim_t"] = opt != nullptr ? opt->step_count() : 0;
    extra["lora"] = enc.has_lora();
    extra["paradigm"] = paradigm == Paradigm::flow ? "flow" : "discrete";
    extra["config"] = cfg.to_json();
    save_checkpoint(path, ck.map, extra);
}

int resume_steps(const std::string& path, Encoder& enc, GenerativeStack* stack, AdamW* opt) {
    StageCkpt ck = checkpoint_map(enc, stack, opt);
    nlohmann::json extra = load_checkpoint(path, ck.map);
    if (opt != nullptr && ck.opt_state != nullptr) {
        opt->load_state_blob(ck.opt_state->tensor.vec(), extra.value("optim_t", 0));
    }
    return extra.value("completed_steps", 0);
}

Paradigm parse_paradigm(const std::string& s) {
    if (s == "flow") {
        return Paradigm::flow;
    }
    if (s == "discrete") {
        return Paradigm::discrete;
    }
    throw ConfigError("paradigm must be flow or discrete");
}

// shared with the in-memory pipeline: probe accuracy + reconstruction score
// rows at stage-2 checkpoints
EvalHookFn make_curve_hook(const RunConfig& cfg, const Dataset& ds, Encoder& encoder,
                           Encoder& reference, GenerativeStack& stack, CsvLogger& log,
                           const std::string& run_id) {
    return [&, run_id](const std::string& stage, int step) {
        ProbeSuite suite = train_probe_suite(encoder, ds, cfg.eval.probe_l2);
        const std::vector<int> test_idx = ds.split_indices(2);
        std::vector<float> feats = extract_cls_features(encoder, ds, test_idx);
        const int n = static_cast<int>(test_idx.size());
        double fine = 0.0;
        for (Attr a : kFineAttrs) {
            std::vector<int> y(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) {
                y[static_cast<size_t>(i)] = attribute_value(
                    ds.items[static_cast<size_t>(test_idx[static_cast<size_t>(i)])].spec, a);
            }
            fine += probe_accuracy(suite.probes[attribute_name(a)], feats, y, n);
        }
        fine /= static_cast<double>(kFineAttrs.size());
        const std::vector<int> val_idx = ds.split_indices(1);
        double rs = 0.0;
        int count = 0;
        for (int i = 0; i < 32 && i < static_cast<int>(val_idx.size()); ++i) {
            const LabeledImage& it = ds.items[static_cast<size_t>(val_idx[static_cast<size_t>(i)])];
            rs += reconstruction_score(stack.reconstruct(it.image, encoder, it.spec.seed),
                                       it.image, reference);
            ++count;
        }
        log.row(run_id, stage, step, "fine_acc", fine);
        log.row(run_id, stage, step, "recon_score", count > 0 ? rs / count : 0.0);
        log.flush();
    };
}

int cmd_train(const std::string& config_path, const std::string& paradigm_str,
              const std::string& stage, bool resume) {
    RunConfig cfg = load_run_config(config_path);
    const Paradigm paradigm = parse_paradigm(paradigm_str);
    const std::string run_id = cfg.run_id();
    const std::string run_dir = run_root() + "/" + run_id;
    fs::create_directories(run_dir);
    {
        std::ofstream f(run_dir + "/config.json");
        f << cfg.to_json().dump(2) << '\n';
    }
    CsvLogger log(run_dir + "/metrics.csv", /*append=*/true);
    const std::string tag = paradigm == Paradigm::flow ? "flow" : "discrete";

    auto ds = dataset_cached(cfg.data);

    // warm start (shared across stages and paradigms)
    const std::string warm_path = run_dir + "/warmup.ckpt";
    Encoder encoder(cfg.encoder, cfg.trainer.seed);
    if (checkpoint_exists(warm_path)) {
        ParamMap map;
        append_params(map, "encoder.", encoder.params);
        load_checkpoint(warm_path, map);
    } else {
        train_warmup(encoder, *ds, cfg.trainer, run_id, &log);
        ParamMap map;
        append_params(map, "encoder.", encoder.params);
        save_checkpoint(warm_path, map, {{"config", cfg.to_json()}});
    }
    Encoder reference(cfg.encoder, cfg.trainer.seed);
    reference.copy_params_from(encoder);

    GenerativeStack stack(cfg.stack_config(paradigm), cfg.encoder, cfg.trainer.seed);
    if (stack.needs_codebook()) {
        stack.set_codebook(codebook_cached(cfg, *ds));
    }

    const std::string s1_path = run_dir + "/" + tag + "_stage1.ckpt";
    const std::string s2_path = run_dir + "/" + tag + "_stage2.ckpt";
    const std::string e2e_path = run_dir + "/" + tag + "_e2e.ckpt";

    if (stage == "1") {
        for (Parameter* p : encoder.params.all()) {
            p->set_trainable(false);
        }
        AdamW opt(stack.all_gen_params(), cfg.trainer.adamw(cfg.trainer.stage1_lr));
        int start = 0;
        if (resume && checkpoint_exists(s1_path)) {
            start = resume_steps(s1_path, encoder, &stack, &opt);
        }
        train_stage1(*ds, encoder, stack, cfg.trainer, run_id, &log, {}, &opt, start);
        save_stage(s1_path, encoder, &stack, &opt, cfg.trainer.stage1_steps, cfg, paradigm);
    } else if (stage == "2") {
        if (!checkpoint_exists(s1_path)) {
            throw ContractError("stage 2 requires the stage-1 checkpoint at " + s1_path +
                                "; run --stage 1 first");
        }
        resume_steps(s1_path, encoder, &stack, nullptr);
        if (cfg.use_lora) {
            encoder.apply_lora(cfg.trainer.lora(), cfg.trainer.seed);
        }
        // trainable set mirrors train_stage2
        std::vector<Parameter*> trainables;
        if (cfg.use_lora) {
            trainables = encoder.lora_params();
        } else {
            trainables = encoder.params.all();
        }
        if (cfg.trainer.update_projector_in_stage2) {
            auto v = stack.projector_params();
            trainables.insert(trainables.end(), v.begin(), v.end());
        }
        if (cfg.trainer.update_denoiser_in_stage2) {
            auto v = stack.denoiser_params();
            trainables.insert(trainables.end(), v.begin(), v.end());
        }
        AdamW opt(trainables, cfg.trainer.adamw(cfg.trainer.stage2_lr));
        int start = 0;
        if (resume && checkpoint_exists(s2_path)) {
            start = resume_steps(s2_path, encoder, &stack, &opt);
        }
        EvalHookFn hook = make_curve_hook(cfg, *ds, encoder, reference, stack, log, run_id);
        train_stage2(*ds, encoder, stack, cfg.trainer, cfg.use_lora, run_id, &log, hook, &opt,
                     start);
        save_stage(s2_path, encoder, &stack, &opt, cfg.trainer.stage2_steps, cfg, paradigm);
    } else if (stage == "e2e") {
        if (cfg.use_lora) {
            encoder.apply_lora(cfg.trainer.lora(), cfg.trainer.seed);
        }
        std::vector<Parameter*> trainables =
            cfg.use_lora ? encoder.lora_params() : encoder.params.all();
        auto gen = stack.all_gen_params();
        trainables.insert(trainables.end(), gen.begin(), gen.end());
        AdamW opt(trainables, cfg.trainer.adamw(cfg.trainer.stage1_lr));
        int start = 0;
        if (resume && checkpoint_exists(e2e_path)) {
            start = resume_steps(e2e_path, encoder, &stack, &opt);
        }
        EvalHookFn hook = make_curve_hook(cfg, *ds, encoder, reference, stack, log, run_id);
        train_end_to_end(*ds, encoder, stack, cfg.trainer, run_id, &log, hook, &opt, start);
        save_stage(e2e_path, encoder, &stack, &opt,
                   cfg.trainer.stage1_steps + cfg.trainer.stage2_steps, cfg, paradigm);
    } else {
        throw ConfigError("--stage must be 1, 2 or e2e");
    }
    std::cout << "run_id " << run_id << "\nrun_dir " << run_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& dataset_path) {
    // model geometry comes from the config embedded in the checkpoint
    std::ifstream probe_file(ckpt_path, std::ios::binary);
    if (!probe_file) {
        throw IoError("cannot open checkpoint: " + ckpt_path);
    }
    uint64_t hlen = 0;
    probe_file.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    probe_file.read(hs.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json header = nlohmann::json::parse(hs);
    if (!header.contains("extra") || !header["extra"].contains("config")) {
        throw ContractError("checkpoint lacks an embedded config: " + ckpt_path);
    }
    RunConfig cfg = parse_run_config(header["extra"]["config"]);
    const bool has_lora = header["extra"].value("lora", false);
    const Paradigm paradigm = parse_paradigm(header["extra"].value("paradigm", "flow"));

    Dataset ds = load_dataset(dataset_path);
    Encoder encoder(cfg.encoder, cfg.trainer.seed);
    if (has_lora) {
        encoder.apply_lora(cfg.trainer.lora(), cfg.trainer.seed);
    }
    GenerativeStack stack(cfg.stack_config(paradigm), cfg.encoder, cfg.trainer.seed);
    if (stack.needs_codebook()) {
        stack.set_codebook(codebook_cached(cfg, ds));
    }
    ParamMap map;
    append_params(map, "encoder.", encoder.params);
    ParamMap gen = stack.checkpoint_params();
    map.insert(map.end(), gen.begin(), gen.end());
    load_checkpoint(ckpt_path, map);

    // the warm snapshot is the scoring reference; rebuilt deterministically
    std::shared_ptr<Encoder> reference = warm_encoder(cfg, nullptr);

    auto recon = [&](const std::vector<float>& img, uint64_t seed) {
        return stack.reconstruct(img, encoder, seed);
    };
    ProbeReport rep = fine_grained_eval(encoder, ds, *reference, recon, cfg.eval.probe_l2,
                                        cfg.eval.recon_images);
    std::cout << "coarse_accuracy " << rep.coarse << "\n";
    for (const auto& [k, v] : rep.per_attribute) {
        std::cout << k << "_accuracy " << v << "\n";
    }
    std::cout << "finegrained_mean " << rep.fine_mean << "\ndrift " << rep.drift
              << "\nreconstruction_score " << rep.recon_score << "\n";

    const std::string run_dir = run_root() + "/" + cfg.run_id();
    fs::create_directories(run_dir);
    CsvLogger log(run_dir + "/metrics.csv", /*append=*/true);
    log.row(cfg.run_id(), "eval", 0, "coarse_accuracy", rep.coarse);
    log.row(cfg.run_id(), "eval", 0, "finegrained_mean", rep.fine_mean);
    log.row(cfg.run_id(), "eval", 0, "drift", rep.drift);
    log.row(cfg.run_id(), "eval", 0, "reconstruction_score", rep.recon_score);
    return 0;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) {
                out.push_back(cur);
            }
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) {
        out.push_back(cur);
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-stage denoiser-conditioned visual representation trainer"};
    app.require_subcommand(1);
    bool check_finite = false;
    app.add_flag("--check-finite", check_finite, "abort on any non-finite tensor value");

    auto* gen = app.add_subcommand("gen-data", "render a synthetic dataset file");
    int gen_n = 0;
    uint64_t gen_seed = 1;
    std::string gen_out;
    int gen_size = 32;
    double gen_sigma = 0.05;
    gen->add_option("--n", gen_n, "number of images")->required();
    gen->add_option("--seed", gen_seed, "dataset seed");
    gen->add_option("--out", gen_out, "output path")->required();
    gen->add_option("--image-size", gen_size, "square image size");
    gen->add_option("--noise-sigma", gen_sigma, "background noise sigma");

    auto* train = app.add_subcommand("train", "run one training phase");
    std::string train_config, train_paradigm = "flow", train_stage;
    bool train_resume = false;
    train->add_option("--config", train_config, "config json")->required();
    train->add_option("--paradigm", train_paradigm, "flow | discrete");
    train->add_option("--stage", train_stage, "1 | 2 | e2e")->required();
    train->add_flag("--resume", train_resume, "continue from the stage checkpoint");

    auto* eval_cmd = app.add_subcommand("eval", "probe evaluation of a checkpoint");
    std::string eval_ckpt, eval_data;
    eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
    eval_cmd->add_option("--dataset", eval_data)->required();

    auto* ablate = app.add_subcommand("ablate", "grid sweep over one dimension");
    std::string ab_config, ab_paradigm = "flow", ab_dimension, ab_grid, ab_seeds, ab_out;
    ablate->add_option("--config", ab_config, "config json")->required();
    ablate->add_option("--paradigm", ab_paradigm, "flow | discrete");
    ablate->add_option("--dimension", ab_dimension,
                       "local_ratio | stages | t_scale | denoiser_size | mask_ratio | lora")
        ->required();
    ablate->add_option("--grid", ab_grid, "comma-separated grid values");
    ablate->add_option("--seeds", ab_seeds, "comma-separated seeds");
    ablate->add_option("--out-dir", ab_out, "output directory");

    auto* plot = app.add_subcommand("plot-export", "tidy csv for one figure");
    std::string plot_dir, plot_fig;
    plot->add_option("--run-dir", plot_dir)->required();
    plot->add_option("--figure", plot_fig,
                     "fig1_tradeoff | fig4_ratio | fig5_stages | tab4_scale | tab5_size | tab8_mask")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    set_check_finite(check_finite);
    try {
        if (gen->parsed()) {
            if (gen_n < 1) {
                throw ConfigError("--n must be >= 1");
            }
            DataConfig dc;
            dc.n = gen_n;
            dc.seed = gen_seed;
            dc.image_size = gen_size;
            dc.noise_sigma = static_cast<float>(gen_sigma);
            Dataset ds = generate_dataset(dc);
            save_dataset(ds, gen_out);
            print_marginals(ds);
            std::cout << "wrote " << gen_out << " ("
                      << dataset_file_size(dc.n, dc.image_size,
                                           dataset_header_line(dc).size())
                      << " bytes)\n";
            return 0;
        }
        if (train->parsed()) {
            return cmd_train(train_config, train_paradigm, train_stage, train_resume);
        }
        if (eval_cmd->parsed()) {
            return cmd_eval(eval_ckpt, eval_data);
        }
        if (ablate->parsed()) {
            RunConfig cfg = load_run_config(ab_config);
            const Paradigm paradigm = parse_paradigm(ab_paradigm);
            const std::string dim = ab_dimension.empty() ? cfg.ablation.dimension : ab_dimension;
            std::vector<std::string> grid =
                ab_grid.empty() ? cfg.ablation.grid : split_list(ab_grid);
            std::vector<uint64_t> seeds;
            if (ab_seeds.empty()) {
                seeds = cfg.ablation.seeds;
            } else {
                for (const std::string& s : split_list(ab_seeds)) {
                    seeds.push_back(std::stoull(s));
                }
            }
            const std::string out_dir =
                ab_out.empty() ? run_root() + "/ablate_" + dim + "_" + cfg.run_id() : ab_out;
            fs::create_directories(out_dir);
            std::vector<AblationRow> rows =
                ablation_sweep(cfg, paradigm, dim, grid, seeds, /*verbose=*/true);
            write_ablation_csv(out_dir + "/ablation.csv", rows);
            for (const std::string& line : trend_summary(rows)) {
                std::cout << line << "\n";
            }
            std::cout << "wrote " << out_dir << "/ablation.csv\n";
            return 0;
        }
        if (plot->parsed()) {
            const std::string out = plot_export(plot_dir, plot_fig);
            std::cout << "wrote " << out << "\n";
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
