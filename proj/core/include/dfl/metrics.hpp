#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dfl/stats.hpp"
#include "dfl/tensor.hpp"
#include "dfl/world.hpp"

namespace dfl {

struct VendiScore {
    double raw = 1.0;         // in [1, n]
    double normalized = 1.0;  // raw / n
};

/// Effective diversity count of n embeddings (rows [n, d], unit-normalized
/// internally): exp of the entropy of the eigenvalues of the cosine-similarity
/// kernel divided by n.
VendiScore vendi_score(const Tensor& rows);

/// Per-pixel temporal interpolation residual of a decoded video: each
/// interior frame is predicted from its neighbors (Catmull-Rom weights
/// (-1,9,9,-1)/16, linear at the edges) and compared by MSE. Lower is more
/// temporally consistent.
double consistency_mse(const Tensor& video);

struct RunMetrics {
    std::string variant;
    int cls = 0;
    int rep = 0;
    double vendi_v_raw = 0.0, vendi_v_normalized = 0.0;
    double vendi_f_raw = 0.0, vendi_f_normalized = 0.0;
    double mse = 0.0;
};

struct VariantInfo {
    std::string name;
    std::string method;
    bool use_video_term = true;
    bool use_consistency_regulation = true;
};

struct RunsManifestInfo {
    std::vector<VariantInfo> variants;
    int reps = 0, n_samples = 0, classes = 0;
};
RunsManifestInfo read_runs_manifest(const std::filesystem::path& runs_dir);

struct MetricSeries {
    MeanCi stats;                 // over repetitions (per-rep value = mean over classes)
    std::vector<double> per_rep;  // kept for paired tests
};

struct MethodAggregate {
    VariantInfo info;
    MetricSeries vendi_v_raw, vendi_v_normalized, vendi_f_raw, vendi_f_normalized, mse;
};

struct EvaluateResult {
    std::vector<RunMetrics> runs;
    std::vector<MethodAggregate> methods;  // manifest order
    int reps = 0;
    int n_samples = 0;
};

/// Scores every run listed by the manifest (layout {variant}/{class}/{rep}/
/// sample_i.lat). Samples are decoded on the fly; diversity embeddings come
/// from the dataset's fixed reference encoders, never the trained latent
/// models. Missing sample files are collected and reported in one error.
std::vector<RunMetrics> score_runs(const std::filesystem::path& runs_dir, const Dataset& ds,
                                   const RunsManifestInfo& manifest);

/// Per-method statistics: per-rep values are class means, CIs are Student-t
/// over repetitions.
EvaluateResult aggregate_runs(const std::vector<RunMetrics>& runs, const RunsManifestInfo& manifest);

/// score_runs + aggregate_runs against the manifest found in runs_dir.
EvaluateResult evaluate_runs(const std::filesystem::path& runs_dir, const Dataset& ds);

void write_runs_csv(const std::filesystem::path& path, const std::vector<RunMetrics>& runs);
std::vector<RunMetrics> load_runs_csv(const std::filesystem::path& path);

/// main.csv/json (per-method means, CIs and paired tests against the iid
/// runs) and ablation.csv/json (the diversity-kernel / regulation flag grid).
void write_summary_reports(const std::filesystem::path& out_dir, const EvaluateResult& res);

/// write_runs_csv into out_dir/runs.csv plus write_summary_reports.
void write_metric_reports(const std::filesystem::path& out_dir, const EvaluateResult& res);

}  // namespace dfl
