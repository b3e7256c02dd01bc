#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dfl/latent_models.hpp"
#include "dfl/metrics.hpp"
#include "dfl/sampler.hpp"

namespace dfl {

/// Full pipeline configuration; every stage derives its own seed from the
/// master seed, so one config + seed determines every artifact bit-for-bit.
struct ExperimentConfig {
    std::uint64_t seed = 1;
    DatasetConfig dataset;
    FlowTrainConfig flow;  // flow.seed is ignored; the master seed is used
    int flow_hidden = 256;
    int flow_time_features = 8;
    LatentTrainConfig latent;  // latent.seed likewise
    int reps = 20;
    int n_samples = 4;
    int n_steps = 50;
    double gamma = 1.0;
    double jitter = 1e-3;
    double t_max = 1.0;
    bool stop_gradient_through_velocity = true;
    std::vector<VariantSpec> variants;  // resolved at load time; defaults to the full grid
    std::vector<int> eval_steps = {10, 20, 30, 40, 50};
    int eval_bank = 0;  // 0 -> classes * test_per_class
    bool verbose = true;
};

ExperimentConfig default_experiment_config();
/// iid + dpp + pg + ours plus the two frame-only ablation variants, with the
/// config's guidance scalars applied.
std::vector<VariantSpec> default_variant_grid(const ExperimentConfig& c);

/// JSON config merged over defaults; unknown keys are an error.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
void save_experiment_config(const ExperimentConfig& c, const std::filesystem::path& path);

// Stage entry points (the CLI subcommands). All artifacts live under `out`:
// data/, models/, runs/, reports/, state/, config.json.
Dataset stage_gen_data(const ExperimentConfig& c, const std::filesystem::path& out);
FlowTrainResult stage_train_flow(const ExperimentConfig& c, const std::filesystem::path& out, const Dataset& ds);
LatentModels stage_train_latent(const ExperimentConfig& c, const std::filesystem::path& out, const Dataset& ds,
                                const VelocityField& flow);
GenerateSummary stage_sample(const ExperimentConfig& c, const std::filesystem::path& out, const Dataset& ds,
                             const VelocityField& flow, const LatentModels& models);
std::vector<RunMetrics> stage_evaluate(const std::filesystem::path& out, const Dataset& ds);
void stage_report(const std::filesystem::path& out);

/// End-to-end run: gen-data, train-flow, train-latent (with its baseline
/// evaluation), sample, evaluate, report. Stages whose recorded input hash
/// (config subset + upstream checkpoint hashes) is unchanged and whose
/// outputs exist are skipped, so reruns are cheap and reproduce the same
/// bytes. Errors carry the stage name.
void run_experiment(const ExperimentConfig& c, const std::filesystem::path& out);

}  // namespace dfl
