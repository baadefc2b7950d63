// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "genrep/config.hpp"
#include "genrep/eval.hpp"
#include "genrep/trainer.hpp"

namespace genrep {

enum class PipelineMode { two_stage, end_to_end };

struct StepPoint {
    int step = 0;
    double recon_score = 0.0;
    double fine_acc = 0.0;
    double val_loss = 0.0;
};

struct PipelineOutcome {
    std::string run_id;
    ProbeReport v0;
    ProbeReport final_report;
    double final_val_loss = 0.0;
    std::vector<StepPoint> curve; // second-phase checkpoints, step 0 first
};

// Dataset / warm start / codebook caches shared across sweep runs in one
// process. Keys derive from the relevant config slices, so a seed always
// maps to the same V0 snapshot no matter which grid point asks first.
std::shared_ptr<const Dataset> dataset_cached(const DataConfig& cfg);
std::shared_ptr<Encoder> warm_encoder(const RunConfig& cfg, CsvLogger* log);
Codebook codebook_cached(const RunConfig& cfg, const Dataset& ds);
void clear_pipeline_caches();

// Full run: warm-up, stage-1 + stage-2 (or the joint baseline), evaluation.
// run_dir may be empty for in-memory runs; when set, checkpoints and CSV
// logs land under it.
PipelineOutcome run_pipeline(const RunConfig& cfg, Paradigm paradigm, PipelineMode mode,
                             const std::string& run_dir);

struct AblationRow {
    std::string dimension;
    std::string x;
    uint64_t seed = 0;
    std::string metric;
    double value = 0.0;
};

// One full pipeline per (grid point, seed), paired by seed.
std::vector<AblationRow> ablation_sweep(const RunConfig& base, Paradigm paradigm,
                                        const std::string& dimension,
                                        const std::vector<std::string>& grid,
                                        const std::vector<uint64_t>& seeds, bool verbose);

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);
std::vector<AblationRow> read_ablation_csv(const std::string& path);

// Pairwise per-seed win counts on fine-grained accuracy, one line per pair.
std::vector<std::string> trend_summary(const std::vector<AblationRow>& rows);

extern const std::vector<std::string> kFigureKeys;
// Writes export_<figure>.csv (x, series, mean, stderr) into run_dir.
std::string plot_export(const std::string& run_dir, const std::string& figure);

// grid-point application shared by the CLI and the sweep
RunConfig apply_dimension(const RunConfig& base, const std::string& dimension,
                          const std::string& x, Paradigm paradigm, PipelineMode& mode);

std::string run_root();

} // namespace genrep
