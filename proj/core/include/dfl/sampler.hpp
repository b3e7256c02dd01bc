#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dfl/guidance.hpp"

namespace dfl {

struct SamplerConfig {
    int n_samples = 4;
    int n_steps = 50;
    GuidanceConfig guidance;
};

struct TraceRow {
    int step = 0;
    double t = 0.0;
    StepTrace trace;
};

struct JointSampleResult {
    std::vector<Tensor> samples;  // latent-shaped [T,C,H,W]
    std::vector<TraceRow> trace;  // one row per Euler step
};

/// Prompt directions in latent-embedding space (alignment applied to the
/// class-mean reference embeddings); what sample-time projection removes.
struct ClassPrompts {
    Tensor dir_v, dir_f;
};
ClassPrompts make_class_prompts(const LatentModels& models, const Dataset& ds, int cls);

/// Draws n_samples jointly: per-sample noise streams split from noise_seed,
/// shared Euler steps, and (when guidance is on) a diversity velocity added to
/// each sample's update. With guidance off the update instructions match
/// independent single-sample runs exactly, so results agree bitwise.
/// models/prompts may be null when guidance is off.
JointSampleResult joint_sample(const VelocityField& flow, const LatentModels* models, const ClassPrompts* prompts,
                               int cls, const SamplerConfig& cfg, std::uint64_t noise_seed,
                               ProjStats* proj_stats = nullptr);

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& rows, int n_samples);

/// One named sampling configuration of the comparison grid.
struct VariantSpec {
    std::string name;
    GuidanceConfig guidance;
};

struct GenerateConfig {
    std::vector<VariantSpec> variants;
    int reps = 20;
    int n_samples = 4;
    int n_steps = 50;
    std::uint64_t seed = 0;
    bool verbose = true;
};

struct GenerateSummary {
    long runs = 0;
    long proj_degenerate = 0;
};

/// Writes runs_dir/{variant}/{class}/{rep}/sample_{i}.lat plus trace.csv for
/// every cell of the grid, and a manifest describing the grid and seeds.
/// The noise seed of a (class, rep) cell is shared across variants, so methods
/// are compared on identical initial noise.
GenerateSummary batch_generate(const std::filesystem::path& runs_dir, const VelocityField& flow,
                               const LatentModels& models, const Dataset& ds, const GenerateConfig& cfg,
                               const std::map<std::string, std::string>& provenance = {});

}  // namespace dfl
