#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dfl/rng.hpp"
#include "dfl/tensor.hpp"

namespace dfl {

enum class Motion { Linear, Circular, Bounce };

const char* motion_name(Motion m);
Motion motion_from_name(const std::string& name);

/// Scene conditioning: plays the role of a text prompt. A class pins blob
/// count, motion pattern and intensity; per-sample randomness supplies
/// positions, velocities and amplitudes.
struct SceneClass {
    int id = 0;
    int blob_count = 1;
    Motion motion = Motion::Linear;
    double base_intensity = 1.0;
    double speed = 1.0;  // pixels per latent frame
    double sigma = 1.5;  // blob radius in pixels
};

SceneClass make_scene_class(int id);

struct WorldDims {
    int t_lat = 5, c_lat = 2, h_lat = 8, w_lat = 8;
    int c_vid = 3, h_vid = 16, w_vid = 16;

    int t_vid() const { return 4 * (t_lat - 1) + 1; }
    std::vector<int> latent_shape() const { return {t_lat, c_lat, h_lat, w_lat}; }
    std::vector<int> video_shape() const { return {t_vid(), c_vid, h_vid, w_vid}; }
    std::size_t latent_numel() const;
    std::size_t frame_numel() const { return static_cast<std::size_t>(c_lat) * h_lat * w_lat; }
};

/// Moving-Gaussian-blob latent video [T_lat, C, H, W]; temporally smooth,
/// rescaled so the video RMS lands near the class base intensity.
Tensor synth_latent_video(const SceneClass& cls, const WorldDims& dims, Rng& rng);

/// Fixed linear decoder latent -> video space. Latent frame 0 maps to video
/// frame 0; latent frame j>=1 yields video frames 4(j-1)+1..4j by temporal
/// interpolation, with nearest 2x spatial upsampling and a fixed channel mix.
/// Never differentiated.
Tensor decode(const Tensor& latent, const WorldDims& dims);

/// Frozen video-space encoders the latent embedders are trained to mimic.
/// Two fixed random layers with tanh in between, unit-normalized outputs;
/// fully determined by (dims, seed).
class ReferenceEmbedder {
public:
    ReferenceEmbedder(const WorldDims& dims, std::uint64_t seed, int embed_dim = 16);

    Tensor embed_video(const Tensor& video) const;  // [embed_dim]
    /// One embedding per latent frame: entry 0 from video frame 0, entry j>=1
    /// the renormalized mean over its group of four video frames. [T_lat, embed_dim]
    Tensor embed_frames_grouped(const Tensor& video) const;

    int embed_dim() const { return embed_dim_; }

private:
    Tensor embed_frame_mean(const Tensor& video, int frame_begin, int frame_end, const Tensor& w1,
                            const Tensor& b1, const Tensor& w2, const Tensor& b2) const;

    WorldDims dims_;
    int embed_dim_;
    int hidden_ = 64;
    Tensor wv1_, bv1_, wv2_, bv2_;
    Tensor wf1_, bf1_, wf2_, bf2_;
};

struct DatasetConfig {
    int classes = 10;
    int train_per_class = 100;
    int test_per_class = 20;
    int ref_embed_dim = 16;
    WorldDims dims;
};

/// Handle to an on-disk dataset. Layout under root:
///   manifest.json
///   {split}/{class}/{index}.lat / .vid / .v.emb / .f.emb
///   prompt/{class}.v.emb / .f.emb   (class-mean reference embeddings)
struct Dataset {
    std::filesystem::path root;
    DatasetConfig cfg;
    std::uint64_t seed = 0;
    std::vector<SceneClass> classes;

    std::filesystem::path sample_path(const std::string& split, int cls, int index, const char* ext) const;
    Tensor load_latent(const std::string& split, int cls, int index) const;
    Tensor load_video(const std::string& split, int cls, int index) const;
    Tensor load_video_embedding(const std::string& split, int cls, int index) const;
    Tensor load_frame_embedding(const std::string& split, int cls, int index) const;
    Tensor prompt_video_embedding(int cls) const;
    Tensor prompt_frame_embedding(int cls) const;
    int per_class(const std::string& split) const;
    ReferenceEmbedder reference_embedder() const;
    std::uint64_t pool_projector_seed() const;
};

Dataset build_dataset(const std::filesystem::path& root, const DatasetConfig& cfg, std::uint64_t seed);
Dataset load_dataset(const std::filesystem::path& root);

/// Smooth unit-normalization x / sqrt(x.x + 1e-12), shared by every embedding
/// producer in the project (world encoders, latent embedders, metrics).
Tensor unit_normalized(const Tensor& x);

}  // namespace dfl
