#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dfl/autodiff.hpp"
#include "dfl/rng.hpp"
#include "dfl/serialize.hpp"
#include "dfl/world.hpp"

namespace dfl {

struct FlowDims {
    WorldDims world;
    int n_classes = 10;
    int n_time = 8;  // sinusoidal time features, frequencies 2^0..2^(n_time-1)
    int hidden = 256;

    int d_x() const { return static_cast<int>(world.latent_numel()); }
    int d_f() const { return n_time + n_classes; }
};

/// v_theta(x_t, t | class): flattened latent + time/class features through a
/// two-hidden-layer tanh MLP back to a flattened latent. The first layer's
/// weight is split by input block (w1x for the latent, w1f for the features)
/// so both the plain batched path and the tape path use identical structure.
struct VelocityField {
    FlowDims dims;
    ParamStore params;  // w1x,w1f,b1,w2,b2,w3,b3

    static VelocityField init(const FlowDims& dims, Rng& rng);
    static VelocityField zeros(const FlowDims& dims);
};

Tensor time_class_features(double t, int cls, const FlowDims& dims);  // [d_f]

/// Batched plain evaluation: x_rows [n, d_x] -> velocities [n, d_x] at shared
/// (t, class). Row i's result is bitwise independent of the other rows, so a
/// joint batch and n single-sample evaluations agree exactly.
Tensor velocity_rows(const VelocityField& v, const Tensor& x_rows, double t, int cls);

struct FlowVars {
    Var w1x, w1f, b1, w2, b2, w3, b3;
};
FlowVars push_flow_params(Tape& tape, const VelocityField& v, bool trainable);
/// x_rows [B, d_x], features [B, d_f] (one row per batch element).
Var velocity_on_tape(Tape& tape, const FlowVars& p, Var x_rows, Var features);

struct FlowTrainConfig {
    int steps = 4000;
    int batch = 16;
    double lr = 1e-3;  // cosine-decayed
    double momentum = 0.9;
    std::uint64_t seed = 1;
};

struct FlowTrainResult {
    VelocityField model;
    std::vector<double> loss_curve;
    double final_loss = 0.0;  // mean over the last (up to) 100 steps
    int aborted_at = -1;      // step index when loss went non-finite, else -1
};

/// Rectified-flow regression: x_t = (1-t) x_0 + t x_1, target x_1 - x_0,
/// per-element MSE, SGD with momentum and cosine learning-rate decay. On a
/// non-finite loss the last snapshot (taken every 25 steps) is restored.
FlowTrainResult train_flow(const Dataset& ds, const FlowDims& dims, const FlowTrainConfig& cfg);

/// Euler integration of dx/dt = v_theta from x_0 ~ N(0, I) over n_steps equal
/// steps; returns the terminal latent [T_lat, C, H, W].
Tensor euler_sample(const VelocityField& v, int cls, int n_steps, Rng& rng);

/// One trajectory with per-step extrapolated terminals. states [n_steps+1, d_x]
/// holds x at t_k = k/n_steps; xhat1 row k is x_k + (1 - t_k) v(x_k, t_k),
/// reusing the same velocity evaluation as the update (row n equals x_n).
struct Trajectory {
    Tensor states;
    Tensor xhat1;
};
Trajectory euler_trajectory(const VelocityField& v, int cls, int n_steps, Rng& rng);

Tensor extrapolate_x1(const Tensor& x_t, double t, const Tensor& v_value);

/// base path grows ".ckpt" (ParamStore) and ".json" (dims + training summary).
void save_flow(const VelocityField& v, const std::filesystem::path& base);
void save_flow(const FlowTrainResult& r, const std::filesystem::path& base);
VelocityField load_flow(const std::filesystem::path& base);

}  // namespace dfl
