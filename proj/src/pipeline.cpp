// SPDX-License-Identifier: Apache-2.0
#include "genrep/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <unordered_map>

namespace genrep {

namespace {

std::string data_key(const DataConfig& c) {
    std::ostringstream os;
    os << c.n << '|' << c.seed << '|' << c.image_size << '|' << c.noise_sigma;
    return os.str();
}

std::string warm_key(const RunConfig& c) {
    std::ostringstream os;
    os << data_key(c.data) << '|' << c.encoder.image_size << '|' << c.encoder.patch_size << '|'
       << c.encoder.dim << '|' << c.encoder.depth << '|' << c.encoder.heads << '|'
       << static_cast<int>(c.encoder.pooling) << '|' << c.trainer.warmup_steps << '|'
       << c.trainer.warmup_lr << '|' << c.trainer.batch_size << '|' << c.trainer.seed;
    return os.str();
}

std::string codebook_key(const RunConfig& c) {
    std::ostringstream os;
    os << data_key(c.data) << '|' << c.discrete_patch << '|' << c.codebook_k << '|'
       << c.codebook_iters << '|' << c.trainer.seed;
    return os.str();
}

std::unordered_map<std::string, std::shared_ptr<const Dataset>> g_datasets;
using ParamSnapshot = std::vector<std::pair<std::string, std::vector<float>>>;
std::unordered_map<std::string, ParamSnapshot> g_warm;
std::unordered_map<std::string, ProbeReport> g_v0_reports;
std::unordered_map<std::string, Codebook> g_codebooks;

ParamSnapshot snapshot_params(ParamRegistry& reg) {
    ParamSnapshot snap;
    for (Parameter* p : reg.all()) {
        snap.emplace_back(p->name, p->tensor.vec());
    }
    return snap;
}

void restore_params(ParamRegistry& reg, const ParamSnapshot& snap) {
    for (const auto& [name, data] : snap) {
        Parameter* p = reg.find(name);
        if (p == nullptr || p->tensor.numel() != data.size()) {
            throw ContractError("snapshot restore mismatch: " + name);
        }
        p->tensor.vec() = data;
    }
}

} // namespace

std::shared_ptr<const Dataset> dataset_cached(const DataConfig& cfg) {
    const std::string key = data_key(cfg);
    auto it = g_datasets.find(key);
    if (it == g_datasets.end()) {
        it = g_datasets.emplace(key, std::make_shared<Dataset>(generate_dataset(cfg))).first;
    }
    return it->second;
}

std::shared_ptr<Encoder> warm_encoder(const RunConfig& cfg, CsvLogger* log) {
    const std::string key = warm_key(cfg);
    auto enc = std::make_shared<Encoder>(cfg.encoder, cfg.trainer.seed);
    auto it = g_warm.find(key);
    if (it == g_warm.end()) {
        auto ds = dataset_cached(cfg.data);
        train_warmup(*enc, *ds, cfg.trainer, cfg.run_id(), log);
        it = g_warm.emplace(key, snapshot_params(enc->params)).first;
    } else {
        restore_params(enc->params, it->second);
    }
    return enc;
}

Codebook codebook_cached(const RunConfig& cfg, const Dataset& ds) {
    const std::string key = codebook_key(cfg);
    auto it = g_codebooks.find(key);
    if (it == g_codebooks.end()) {
        Rng rng(splitmix64(cfg.trainer.seed ^ 0xc0deULL));
        GenerativeStack tmp(cfg.stack_config(Paradigm::discrete), cfg.encoder, cfg.trainer.seed);
        tmp.build_codebook_from(ds, rng);
        it = g_codebooks.emplace(key, std::move(tmp.codebook)).first;
    }
    return it->second;
}

void clear_pipeline_caches() {
    g_datasets.clear();
    g_warm.clear();
    g_v0_reports.clear();
    g_codebooks.clear();
}

std::string run_root() {
    const char* env = std::getenv("GENH_RUN_ROOT");
    return env != nullptr && *env != '\0' ? env : "runs";
}

PipelineOutcome run_pipeline(const RunConfig& cfg, Paradigm paradigm, PipelineMode mode,
                             const std::string& run_dir) {
    PipelineOutcome out;
    out.run_id = cfg.run_id();

    CsvLogger log;
    std::string ckpt_prefix;
    if (!run_dir.empty()) {
        std::filesystem::create_directories(run_dir);
        log.open(run_dir + "/metrics.csv", /*append=*/true);
        ckpt_prefix = run_dir + "/";
        std::ofstream cfg_out(run_dir + "/config.json");
        cfg_out << cfg.to_json().dump(2) << '\n';
    }
    CsvLogger* logp = log.is_open() ? &log : nullptr;

    auto ds = dataset_cached(cfg.data);
    std::shared_ptr<Encoder> encoder = warm_encoder(cfg, logp);

    // V0 probe report is per warm snapshot, shared across grid points
    {
        const std::string key = warm_key(cfg);
        auto it = g_v0_reports.find(key);
        if (it == g_v0_reports.end()) {
            ProbeReport rep = fine_grained_eval(*encoder, *ds, *encoder, nullptr,
                                                cfg.eval.probe_l2, cfg.eval.recon_images);
            it = g_v0_reports.emplace(key, std::move(rep)).first;
        }
        out.v0 = it->second;
    }

    // the warm snapshot is the fixed reference for drift and recon scoring
    Encoder reference(cfg.encoder, cfg.trainer.seed);
    reference.copy_params_from(*encoder);

    GenerativeStack stack(cfg.stack_config(paradigm), cfg.encoder, cfg.trainer.seed);
    if (stack.needs_codebook()) {
        stack.set_codebook(codebook_cached(cfg, *ds));
    }

    const std::vector<int> val_idx = ds->split_indices(1);
    const uint64_t crn_seed = splitmix64(cfg.trainer.seed ^ 0xc47ULL);
    const int hook_recon = std::min(cfg.eval.recon_images, 32);

    auto reconstruct_fn = [&](const std::vector<float>& img, uint64_t seed) {
        return stack.reconstruct(img, *encoder, seed);
    };

    auto curve_point = [&](int step) {
        StepPoint pt;
        pt.step = step;
        ProbeSuite suite = train_probe_suite(*encoder, *ds, cfg.eval.probe_l2);
        const std::vector<int> test_idx = ds->split_indices(2);
        std::vector<float> feats = extract_cls_features(*encoder, *ds, test_idx);
        const int n = static_cast<int>(test_idx.size());
        double fine_total = 0.0;
        for (Attr a : kFineAttrs) {
            std::vector<int> y(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) {
                y[static_cast<size_t>(i)] = attribute_value(
                    ds->items[static_cast<size_t>(test_idx[static_cast<size_t>(i)])].spec, a);
            }
            fine_total += probe_accuracy(suite.probes[attribute_name(a)], feats, y, n);
        }
        pt.fine_acc = fine_total / static_cast<double>(kFineAttrs.size());
        double rs = 0.0;
        int count = 0;
        for (int i = 0; i < hook_recon && i < static_cast<int>(val_idx.size()); ++i) {
            const LabeledImage& it = ds->items[static_cast<size_t>(val_idx[static_cast<size_t>(i)])];
            rs += reconstruction_score(stack.reconstruct(it.image, *encoder, it.spec.seed),
                                       it.image, reference);
            ++count;
        }
        pt.recon_score = count > 0 ? rs / count : 0.0;
        pt.val_loss = stack.validation_loss(*ds, val_idx, *encoder, crn_seed, 128,
                                            cfg.trainer.batch_size);
        return pt;
    };

    const char* phase2 = mode == PipelineMode::two_stage ? "stage2" : "e2e";
    auto hook = [&](const std::string& stage, int step) {
        StepPoint pt = curve_point(step);
        out.curve.push_back(pt);
        if (logp != nullptr) {
            logp->row(out.run_id, stage, step, "recon_score", pt.recon_score);
            logp->row(out.run_id, stage, step, "fine_acc", pt.fine_acc);
            logp->row(out.run_id, stage, step, "val_loss", pt.val_loss);
        }
    };

    if (mode == PipelineMode::two_stage) {
        train_stage1(*ds, *encoder, stack, cfg.trainer, out.run_id, logp);
        if (!ckpt_prefix.empty()) {
            ParamMap map = stack.checkpoint_params();
            append_params(map, "encoder.", encoder->params);
            save_checkpoint(ckpt_prefix + (paradigm == Paradigm::flow ? "flow" : "discrete") +
                                "_stage1.ckpt",
                            map);
        }
        if (cfg.use_lora) {
            encoder->apply_lora(cfg.trainer.lora(), cfg.trainer.seed);
        }
        out.curve.push_back(curve_point(0));
        train_stage2(*ds, *encoder, stack, cfg.trainer, cfg.use_lora, out.run_id, logp, hook);
    } else {
        if (cfg.use_lora) {
            encoder->apply_lora(cfg.trainer.lora(), cfg.trainer.seed);
        }
        out.curve.push_back(curve_point(0));
        train_end_to_end(*ds, *encoder, stack, cfg.trainer, out.run_id, logp, hook);
    }

    out.final_report = fine_grained_eval(*encoder, *ds, reference, reconstruct_fn,
                                         cfg.eval.probe_l2, cfg.eval.recon_images);
    out.final_val_loss =
        stack.validation_loss(*ds, val_idx, *encoder, crn_seed, 256, cfg.trainer.batch_size);

    if (logp != nullptr) {
        logp->row(out.run_id, phase2, cfg.trainer.stage2_steps, "final_fine_acc",
                  out.final_report.fine_mean);
        logp->row(out.run_id, phase2, cfg.trainer.stage2_steps, "final_coarse_acc",
                  out.final_report.coarse);
        logp->row(out.run_id, phase2, cfg.trainer.stage2_steps, "final_val_loss",
                  out.final_val_loss);
        logp->row(out.run_id, phase2, cfg.trainer.stage2_steps, "final_drift",
                  out.final_report.drift);
        logp->flush();
    }
    if (!ckpt_prefix.empty()) {
        ParamMap map = stack.checkpoint_params();
        append_params(map, "encoder.", encoder->params);
        save_checkpoint(ckpt_prefix + (paradigm == Paradigm::flow ? "flow" : "discrete") +
                            (mode == PipelineMode::two_stage ? "_stage2.ckpt" : "_e2e.ckpt"),
                        map);
    }
    return out;
}

RunConfig apply_dimension(const RunConfig& base, const std::string& dimension,
                          const std::string& x, Paradigm paradigm, PipelineMode& mode) {
    RunConfig cfg = base;
    mode = PipelineMode::two_stage;
    if (dimension == "local_ratio") {
        cfg.condition.local_ratio = std::stod(x);
    } else if (dimension == "stages") {
        if (x == "two_stage") {
            mode = PipelineMode::two_stage;
        } else if (x == "end_to_end") {
            mode = PipelineMode::end_to_end;
        } else {
            throw ConfigError("stages grid values: two_stage | end_to_end");
        }
    } else if (dimension == "t_scale") {
        if (x == "uniform") {
            cfg.sampler.mode = TimeMode::uniform;
        } else {
            cfg.sampler.mode = TimeMode::scaled_logit_normal;
            cfg.sampler.scale = std::stod(x);
        }
    } else if (dimension == "denoiser_size") {
        if (paradigm == Paradigm::flow) {
            const int n = std::stoi(x);
            cfg.flow.n_mm = n;
            cfg.flow.n_single = 2 * n;
        } else {
            cfg.perceiver.layers = std::stoi(x);
        }
    } else if (dimension == "mask_ratio") {
        if (x == "random") {
            cfg.mask.ratio_low = 0.5;
            cfg.mask.ratio_high = 0.9;
        } else {
            const double r = std::stod(x);
            cfg.mask.ratio_low = r;
            cfg.mask.ratio_high = r;
        }
    } else if (dimension == "lora") {
        if (x != "on" && x != "off") {
            throw ConfigError("lora grid values: on | off");
        }
        cfg.use_lora = x == "on";
    } else {
        throw ConfigError("unknown ablation dimension: " + dimension);
    }
    return cfg;
}

std::vector<AblationRow> ablation_sweep(const RunConfig& base, Paradigm paradigm,
                                        const std::string& dimension,
                                        const std::vector<std::string>& grid,
                                        const std::vector<uint64_t>& seeds, bool verbose) {
    if (grid.empty() || seeds.empty()) {
        throw ConfigError("ablation: empty grid or seed list");
    }
    std::vector<AblationRow> rows;
    for (uint64_t seed : seeds) {
        for (const std::string& x : grid) {
            PipelineMode mode = PipelineMode::two_stage;
            RunConfig cfg = apply_dimension(base, dimension, x, paradigm, mode);
            cfg.data.seed = seed;
            cfg.trainer.seed = seed;
            if (verbose) {
                std::cerr << "[ablate] " << dimension << "=" << x << " seed=" << seed << "\n";
            }
            PipelineOutcome oc = run_pipeline(cfg, paradigm, mode, "");
            auto push = [&](const std::string& metric, double v) {
                rows.push_back({dimension, x, seed, metric, v});
            };
            push("finegrained_accuracy", oc.final_report.fine_mean);
            push("coarse_accuracy", oc.final_report.coarse);
            push("reconstruction_loss", oc.final_val_loss);
            push("reconstruction_score", oc.final_report.recon_score);
            push("drift", oc.final_report.drift);
            push("v0_finegrained_accuracy", oc.v0.fine_mean);
            push("v0_coarse_accuracy", oc.v0.coarse);
        }
    }
    return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw IoError("cannot write: " + path);
    }
    f << "dimension,x,seed,metric,value\n";
    for (const AblationRow& r : rows) {
        f << r.dimension << ',' << r.x << ',' << r.seed << ',' << r.metric << ','
          << format_value(r.value) << '\n';
    }
}

std::vector<AblationRow> read_ablation_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open: " + path);
    }
    std::vector<AblationRow> rows;
    std::string line;
    std::getline(f, line); // header
    while (std::getline(f, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream is(line);
        AblationRow r;
        std::string seed, value;
        std::getline(is, r.dimension, ',');
        std::getline(is, r.x, ',');
        std::getline(is, seed, ',');
        std::getline(is, r.metric, ',');
        std::getline(is, value, ',');
        r.seed = std::stoull(seed);
        r.value = std::stod(value);
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<std::string> trend_summary(const std::vector<AblationRow>& rows) {
    // per-seed fine-grained accuracy by grid point
    std::map<std::string, std::map<uint64_t, double>> acc;
    for (const AblationRow& r : rows) {
        if (r.metric == "finegrained_accuracy") {
            acc[r.x][r.seed] = r.value;
        }
    }
    std::vector<std::string> keys;
    for (const auto& [x, m] : acc) {
        (void)m;
        keys.push_back(x);
    }
    std::vector<std::string> lines;
    for (size_t i = 0; i < keys.size(); ++i) {
        for (size_t j = i + 1; j < keys.size(); ++j) {
            int wins = 0, losses = 0, ties = 0;
            double mean_diff = 0.0;
            int n = 0;
            for (const auto& [seed, va] : acc[keys[i]]) {
                auto it = acc[keys[j]].find(seed);
                if (it == acc[keys[j]].end()) {
                    continue;
                }
                const double d = va - it->second;
                mean_diff += d;
                ++n;
                if (d > 0) {
                    ++wins;
                } else if (d < 0) {
                    ++losses;
                } else {
                    ++ties;
                }
            }
            if (n == 0) {
                continue;
            }
            char buf[160];
            std::snprintf(buf, sizeof(buf),
                          "finegrained_accuracy %s vs %s: wins %d, losses %d, ties %d, mean diff %+0.4f",
                          keys[i].c_str(), keys[j].c_str(), wins, losses, ties, mean_diff / n);
            lines.emplace_back(buf);
        }
    }
    return lines;
}

const std::vector<std::string> kFigureKeys = {"fig1_tradeoff", "fig4_ratio", "fig5_stages",
                                              "tab4_scale",    "tab5_size",  "tab8_mask"};

namespace {

struct Tidy {
    std::string x;
    std::string series;
    double mean;
    double stderr_;
};

void write_tidy(const std::string& path, const std::vector<Tidy>& rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw IoError("cannot write: " + path);
    }
    f << "x,series,mean,stderr\n";
    for (const Tidy& t : rows) {
        f << t.x << ',' << t.series << ',' << format_value(t.mean) << ','
          << format_value(t.stderr_) << '\n';
    }
}

std::vector<Tidy> aggregate(const std::vector<AblationRow>& rows, const std::string& dimension,
                            const std::vector<std::string>& metrics) {
    std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
    for (const AblationRow& r : rows) {
        if (r.dimension != dimension) {
            continue;
        }
        for (const std::string& m : metrics) {
            if (r.metric == m) {
                groups[{r.x, m}].push_back(r.value);
            }
        }
    }
    std::vector<Tidy> out;
    for (const auto& [key, vals] : groups) {
        double mean = 0.0;
        for (double v : vals) {
            mean += v;
        }
        mean /= static_cast<double>(vals.size());
        double var = 0.0;
        for (double v : vals) {
            var += (v - mean) * (v - mean);
        }
        const double stderr_ =
            vals.size() > 1 ? std::sqrt(var / (static_cast<double>(vals.size()) - 1)) /
                                  std::sqrt(static_cast<double>(vals.size()))
                            : 0.0;
        out.push_back({key.first, key.second, mean, stderr_});
    }
    return out;
}

} // namespace

std::string plot_export(const std::string& run_dir, const std::string& figure) {
    if (std::find(kFigureKeys.begin(), kFigureKeys.end(), figure) == kFigureKeys.end()) {
        std::string keys;
        for (const std::string& k : kFigureKeys) {
            keys += (keys.empty() ? "" : ", ") + k;
        }
        throw ConfigError("unknown figure key: " + figure + " (valid: " + keys + ")");
    }
    const std::string out_path = run_dir + "/export_" + figure + ".csv";
    if (figure == "fig1_tradeoff") {
        // stage-2 checkpoint curve out of the run's metric log
        std::ifstream f(run_dir + "/metrics.csv");
        if (!f) {
            throw IoError("no metrics.csv under " + run_dir);
        }
        std::vector<Tidy> rows;
        std::string line;
        std::getline(f, line);
        while (std::getline(f, line)) {
            std::istringstream is(line);
            std::string run_id, stage, step, metric, value;
            std::getline(is, run_id, ',');
            std::getline(is, stage, ',');
            std::getline(is, step, ',');
            std::getline(is, metric, ',');
            std::getline(is, value, ',');
            if ((stage == "stage2" || stage == "e2e") &&
                (metric == "recon_score" || metric == "fine_acc")) {
                rows.push_back({step,
                                metric == "recon_score" ? "reconstruction_score"
                                                        : "finegrained_accuracy",
                                std::stod(value), 0.0});
            }
        }
        write_tidy(out_path, rows);
        return out_path;
    }
    const std::vector<AblationRow> rows = read_ablation_csv(run_dir + "/ablation.csv");
    std::vector<Tidy> tidy;
    if (figure == "fig4_ratio") {
        tidy = aggregate(rows, "local_ratio",
                         {"finegrained_accuracy", "reconstruction_loss", "reconstruction_score"});
    } else if (figure == "fig5_stages") {
        tidy = aggregate(rows, "stages", {"finegrained_accuracy"});
    } else if (figure == "tab4_scale") {
        tidy = aggregate(rows, "t_scale", {"finegrained_accuracy"});
    } else if (figure == "tab5_size") {
        tidy = aggregate(rows, "denoiser_size", {"finegrained_accuracy"});
    } else {
        tidy = aggregate(rows, "mask_ratio", {"finegrained_accuracy"});
    }
    write_tidy(out_path, tidy);
    return out_path;
}

} // namespace genrep
