#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfl/autodiff.hpp"
#include "dfl/flow.hpp"
#include "dfl/latent_models.hpp"

namespace dfl {

struct ProjStats {
    long degenerate = 0;  // times the direction was too small, input returned unchanged
};

/// Component of a orthogonal to b: a - (a.b/||b||^2) b. If ||b|| < 1e-12 the
/// input is returned unchanged and the event is counted.
Tensor proj_orthogonal(const Tensor& a, const Tensor& b, ProjStats* stats = nullptr);
Var proj_orthogonal_on_tape(Tape& tape, Var a, Var b, ProjStats* stats = nullptr);

/// Gradient regulation: alpha = (g_d . g_c)/||g_c||^2. Conflict-free
/// (alpha >= 0) returns g_d unchanged; otherwise the component along g_c is
/// removed. ||g_c|| < 1e-12 also returns g_d unchanged.
struct RegulateResult {
    Tensor g;
    double alpha = 0.0;
    bool regulated = false;
};
RegulateResult regulate_gradient(const Tensor& g_d, const Tensor& g_c);

enum class GuidanceMethod { None, Dpp, ParticleGuidance, Ours };
std::string method_name(GuidanceMethod m);
GuidanceMethod method_from_name(const std::string& name);

struct GuidanceConfig {
    GuidanceMethod method = GuidanceMethod::None;
    bool use_video_term = true;            // include video-level distances in the kernel
    bool use_consistency_regulation = true;  // project conflicting diversity gradients
    double gamma = 1.0;                    // guidance strength
    double jitter = 1e-3;                  // ridge on the kernel diagonal
    double t_max = 1.0;                    // guide only while t < t_max
    bool stop_gradient_through_velocity = true;
};

/// Median of the strictly off-diagonal entries of a square matrix, floored at
/// 1e-12. Used detached (no gradient) as the kernel bandwidth.
double median_offdiag(const Tensor& d);

/// [n,n] matrix of squared distances ||e_i - e_j||^2 built from per-sample
/// embedding Vars; the diagonal is zero.
Var pairwise_distance_matrix(Tape& tape, const std::vector<Var>& e);
/// Same, averaged over per-frame embeddings ef[i][j].
Var frame_distance_matrix(Tape& tape, const std::vector<std::vector<Var>>& ef);

/// log det(exp(-dist/bandwidth) + jitter I)
Var dpp_objective(Tape& tape, Var dist, double bandwidth, double jitter);
/// sum_{i<j} -exp(-dist_ij/sigma2)
Var particle_guidance_objective(Tape& tape, Var dist, double sigma2);
/// -sum over interior frames of ||predicted - actual||^2 for one latent Var.
Var consistency_objective(Tape& tape, const InterpolatorVars& p, Var latent);

/// Everything the per-step guidance computation needs besides the states.
struct GuidanceContext {
    GuidanceConfig cfg;
    const VelocityField* flow = nullptr;  // required when gradients flow through the velocity
    const LatentModels* models = nullptr;
    Tensor prompt_dir_v;  // alignment-mapped prompt, video level [n_latent]
    Tensor prompt_dir_f;  // frame level [n_latent]
    ProjStats* proj_stats = nullptr;
};

/// Per-sample trace of one guided step; entries are NaN when not computed.
struct StepTrace {
    double o_d = 0.0;
    bool has_o_d = false;
    std::vector<double> o_c;      // per sample; empty when not computed
    std::vector<double> alpha;    // per sample; empty when regulation is off
    std::vector<double> reg_dot;  // g_reg . g_c after regulation; empty when regulation is off
    std::vector<double> u_ratio;  // ||u_i|| / ||v_i||
};

struct GuidanceStep {
    std::vector<Tensor> u;  // per-sample diversity velocity, flat [d_x]
    StepTrace trace;
};

/// Computes the diversity velocities u_i for one Euler step: embeds the
/// extrapolated terminals, differentiates the joint diversity objective,
/// optionally regulates each gradient against the sample's consistency
/// gradient, and rescales to gamma * ||v_i||.
GuidanceStep guidance_step(const GuidanceContext& ctx, const std::vector<Tensor>& x_t,
                           const std::vector<Tensor>& v, double t, int cls);

}  // namespace dfl
