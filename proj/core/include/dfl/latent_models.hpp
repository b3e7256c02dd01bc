#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dfl/autodiff.hpp"
#include "dfl/flow.hpp"
#include "dfl/world.hpp"

namespace dfl {

/// Fixed random projection turning the spatial mean of a latent (per frame
/// and channel) into an embedding-sized unit vector. Stands in for "the
/// spatially pooled latent itself" wherever an embedding-shaped statistic is
/// needed: the embedder regularizer and the latent-mean evaluation baseline.
class PooledProjector {
public:
    PooledProjector(const WorldDims& dims, std::uint64_t seed, int out_dim);

    Tensor pool_video(const Tensor& latent) const;           // [out_dim], unit norm
    Tensor pool_frame(const Tensor& latent, int frame) const;  // [out_dim], unit norm

private:
    WorldDims dims_;
    int out_dim_;
    Tensor rv_;  // [t_lat*c_lat, out_dim]
    Tensor rf_;  // [c_lat, out_dim]
};

enum class EmbedLevel { Video, Frame };

/// Latent-space embedder: per-frame 3x3 conv (2 layers, tanh), spatial mean
/// pool, then temporal mean (video level) or per-frame rows (frame level),
/// and a linear head to embed_dim. Outputs are unit-normalized.
struct LatentEmbedder {
    EmbedLevel level = EmbedLevel::Video;
    WorldDims world;
    int embed_dim = 16;
    int channels = 8;
    ParamStore params;  // c1w,c1b,c2w,c2b,head_w,head_b

    static LatentEmbedder init(EmbedLevel level, const WorldDims& world, int embed_dim, int channels, Rng& rng);
};

struct EmbedderVars {
    Var c1w, c1b, c2w, c2b, head_w, head_b;
};
EmbedderVars push_embedder(Tape& tape, const LatentEmbedder& m, bool trainable);

/// latent is a Var of shape [T_lat, C, H, W].
Var embed_video_on_tape(Tape& tape, const EmbedderVars& p, Var latent);
std::vector<Var> embed_frames_on_tape(Tape& tape, const EmbedderVars& p, Var latent);

// plain-value conveniences (build a throwaway tape internally)
Tensor embed_video_value(const LatentEmbedder& m, const Tensor& latent);
Tensor embed_frames_value(const LatentEmbedder& m, const Tensor& latent);  // [T_lat, embed_dim]

/// Learned map from reference-embedding space into latent-embedding space
/// with a grow-only sparsity mask; masked entries stay exactly zero.
struct Alignment {
    Tensor a;     // [n_latent, n_image]
    Tensor mask;  // 1.0 live, 0.0 masked

    static Alignment init(int n_latent, int n_image, Rng& rng);
    Tensor masked() const { return mul(a, mask); }
    void apply_mask();
    double masked_fraction() const;
    /// Mask the smallest-|a| live entries until at least `fraction` of all
    /// entries are masked. Never unmasks.
    void sparsify_to(double fraction);
};

/// Predicts interior latent frame j from frames j-1 and j+1 (concatenated on
/// channels, conv-tanh-conv). Boundary frames pass through unchanged.
struct LatentInterpolator {
    WorldDims world;
    int channels = 8;
    ParamStore params;  // c1w,c1b,c2w,c2b

    static LatentInterpolator init(const WorldDims& world, int channels, Rng& rng);
};

struct InterpolatorVars {
    Var c1w, c1b, c2w, c2b;
};
InterpolatorVars push_interpolator(Tape& tape, const LatentInterpolator& m, bool trainable);
/// Predicted frame j (Var [C,H,W]) from a latent Var [T,C,H,W]; 1 <= j <= T-2.
Var interp_predict_on_tape(Tape& tape, const InterpolatorVars& p, Var latent, int j);

Tensor interp_predict(const LatentInterpolator& m, const Tensor& latent, int j);
/// Full wrapper: boundary frames unchanged, interior frames predicted.
Tensor interp_apply(const LatentInterpolator& m, const Tensor& latent);

// ---- losses (all built on the caller's tape; refs are constants) ----

/// (1/N^2) sum_{i,i'} (e_i . e_i' - ref_i . ref_i')^2; needs N >= 2.
Var loss_similarity(Tape& tape, const std::vector<Var>& e, const std::vector<Tensor>& ref);
/// (1/N) sum_i (1 - e_i . (A ref_i)); a_masked is the masked alignment on tape.
Var loss_pairing(Tape& tape, const std::vector<Var>& e, const std::vector<Tensor>& ref, Var a_masked);
/// 1 - (1/N) sum_i e_i . pooled_i.
Var loss_reg_mean(Tape& tape, const std::vector<Var>& e, const std::vector<Tensor>& pooled);
/// mean of squared entries of the (masked) alignment.
Var loss_reg_proj(Tape& tape, Var a_masked);

/// Per-step sampler states cached for latent-model training: extrapolated
/// terminals at every step plus reference embeddings of the decoded terminal.
/// Built once by running the real sampler; training then draws (entry, step)
/// pairs from it.
struct TrajectoryBank {
    struct Entry {
        int cls = 0;
        Tensor xhat1;       // [n_steps+1, d_x]
        Tensor ref_video;   // [n_image]
        Tensor ref_frames;  // [T_lat, n_image]
    };
    int n_steps = 50;
    std::vector<Entry> entries;

    static TrajectoryBank build(const VelocityField& flow, const Dataset& ds, int size, int n_steps,
                                std::uint64_t seed);
    Tensor latent_at(std::size_t entry, int step) const;  // flat [d_x]; callers reshape
};

struct LatentTrainConfig {
    int embed_dim = 16;
    int conv_channels = 12;
    int stage_steps = 4000;  // per stage: early / middle / late
    int batch = 8;
    double lr = 3e-3;  // Adam
    double lambda_s = 10.0;
    double target_sparsity = 0.8;
    int sparsify_every = 200;
    int interp_epochs = 1000;
    double interp_mu = 0.1;
    int bank_size = 120;
    std::uint64_t seed = 1;
};

struct EmbedderTrainResult {
    LatentEmbedder model;
    Alignment align;
    std::vector<double> loss_curve;
    double final_loss = 0.0;
    int proj_degenerate = 0;  // times the prompt direction was too small to project against
};

/// Staged training (early/middle/late flow steps, stage_steps each) of one
/// embedder + alignment against the bank's reference embeddings; the middle
/// stage sparsifies the alignment up to target_sparsity.
EmbedderTrainResult train_embedder(EmbedLevel level, const TrajectoryBank& bank, const Dataset& ds,
                                   const LatentTrainConfig& cfg);

struct InterpolatorTrainResult {
    LatentInterpolator model;
    std::vector<double> loss_curve;  // per epoch
    double final_loss = 0.0;
};
InterpolatorTrainResult train_interpolator(const TrajectoryBank& bank, const Dataset& ds,
                                           const LatentTrainConfig& cfg);

struct LatentModels {
    LatentEmbedder m_v, m_f;
    Alignment a_v, a_f;
    LatentInterpolator m_c;
};

void save_embedder(const EmbedderTrainResult& r, const std::filesystem::path& base);
void load_embedder(const std::filesystem::path& base, LatentEmbedder& model, Alignment& align);
void save_interpolator(const InterpolatorTrainResult& r, const std::filesystem::path& base);
LatentInterpolator load_interpolator(const std::filesystem::path& base);
LatentModels load_latent_models(const std::filesystem::path& dir);

struct LatentEvalRow {
    int flow_step = 0;
    std::string metric;    // similarity_mse_video / similarity_mse_frame / interp_mse
    std::string baseline;  // latent_mean / prev_frame / next_frame / mean_neighbors
    double model_value = 0.0;
    double baseline_value = 0.0;
};

/// Fresh-trajectory evaluation of the trained models against their simple
/// baselines at the listed flow steps (similarity MSE for the embedders,
/// prediction MSE for the interpolator).
std::vector<LatentEvalRow> eval_latent_models(const LatentModels& models, const VelocityField& flow,
                                              const Dataset& ds, const std::vector<int>& steps, int bank_size,
                                              std::uint64_t seed);
void write_latent_eval_csv(const std::filesystem::path& path, const std::vector<LatentEvalRow>& rows);

}  // namespace dfl
