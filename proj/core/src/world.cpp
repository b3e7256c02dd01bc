#include "dfl/world.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "dfl/serialize.hpp"
#include "json.hpp"

namespace dfl {

namespace {
constexpr double kPi = 3.14159265358979323846;
// fixed latent->video channel mix (C_v x C_lat for the default 3x2)
constexpr double kMix[3][2] = {{1.0, 0.0}, {0.5, 0.5}, {0.0, 1.0}};
}  // namespace

const char* motion_name(Motion m) {
    switch (m) {
        case Motion::Linear: return "linear";
        case Motion::Circular: return "circular";
        case Motion::Bounce: return "bounce";
    }
    return "linear";
}

Motion motion_from_name(const std::string& name) {
    if (name == "linear") return Motion::Linear;
    if (name == "circular") return Motion::Circular;
    if (name == "bounce") return Motion::Bounce;
    throw std::invalid_argument("unknown motion pattern '" + name + "'");
}

SceneClass make_scene_class(int id) {
    SceneClass c;
    c.id = id;
    c.blob_count = 1 + (id % 3);
    c.motion = static_cast<Motion>(id % 3);
    c.base_intensity = 0.6 + 0.1 * (id % 5);
    c.speed = 0.5 + 0.25 * ((id / 3) % 4);
    c.sigma = 1.2 + 0.3 * ((id / 2) % 3);
    return c;
}

std::size_t WorldDims::latent_numel() const {
    return static_cast<std::size_t>(t_lat) * c_lat * h_lat * w_lat;
}

Tensor unit_normalized(const Tensor& x) {
    const double inv = 1.0 / std::sqrt(dot(x, x) + 1e-12);
    return scaled(x, inv);
}

Tensor synth_latent_video(const SceneClass& cls, const WorldDims& dims, Rng& rng) {
    struct Blob {
        double px, py, amp;
        double vx, vy;            // linear / bounce velocity
        double cx, cy, r, phi, omega;  // circular orbit
    };
    std::vector<Blob> blobs;
    const double h = dims.h_lat, w = dims.w_lat;
    for (int b = 0; b < cls.blob_count; ++b) {
        Blob bl{};
        bl.px = 1.0 + (w - 2.0) * rng.uniform();
        bl.py = 1.0 + (h - 2.0) * rng.uniform();
        bl.amp = 0.75 + 0.5 * rng.uniform();
        const double theta = 2.0 * kPi * rng.uniform();
        const double speed = cls.speed * (0.8 + 0.4 * rng.uniform());
        bl.vx = speed * std::cos(theta);
        bl.vy = speed * std::sin(theta);
        bl.cx = bl.px;
        bl.cy = bl.py;
        bl.r = 1.0 + 2.0 * rng.uniform();
        bl.phi = theta;
        bl.omega = speed / bl.r;
        blobs.push_back(bl);
    }
    const double target_rms = cls.base_intensity * (0.75 + 0.5 * rng.uniform());

    auto reflect = [](double p, double lo, double hi) {
        const double span = 2.0 * (hi - lo);
        double q = std::fmod(p - lo, span);
        if (q < 0) q += span;
        return lo + (q <= hi - lo ? q : span - q);
    };

    Tensor x(dims.latent_shape());
    const std::size_t frame = dims.frame_numel();
    const std::size_t plane = static_cast<std::size_t>(dims.h_lat) * dims.w_lat;
    for (int tau = 0; tau < dims.t_lat; ++tau) {
        double* xt = x.data() + static_cast<std::size_t>(tau) * frame;
        for (const Blob& bl : blobs) {
            double px = bl.px, py = bl.py;
            switch (cls.motion) {
                case Motion::Linear:
                    px += bl.vx * tau;
                    py += bl.vy * tau;
                    break;
                case Motion::Circular:
                    px = bl.cx + bl.r * std::cos(bl.phi + bl.omega * tau);
                    py = bl.cy + bl.r * std::sin(bl.phi + bl.omega * tau);
                    break;
                case Motion::Bounce:
                    px = reflect(bl.px + bl.vx * tau, 0.5, w - 1.5);
                    py = reflect(bl.py + bl.vy * tau, 0.5, h - 1.5);
                    break;
            }
            const double inv2s2 = 1.0 / (2.0 * cls.sigma * cls.sigma);
            for (int c = 0; c < dims.c_lat; ++c) {
                // channel 1 sees the blob half a pixel off and dimmer, so the
                // two channels carry correlated but distinct content
                const double off = 0.5 * c;
                const double camp = bl.amp * (c == 0 ? 1.0 : 0.6);
                for (int i = 0; i < dims.h_lat; ++i) {
                    const double dy = i - (py + off);
                    for (int j = 0; j < dims.w_lat; ++j) {
                        const double dx = j - (px + off);
                        xt[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(i) * dims.w_lat + j] +=
                            camp * std::exp(-(dx * dx + dy * dy) * inv2s2);
                    }
                }
            }
        }
    }
    double ms = 0.0;
    for (double v : x.vec()) ms += v * v;
    const double rms = std::sqrt(ms / static_cast<double>(x.size()));
    if (rms > 1e-12) {
        const double s = target_rms / rms;
        for (double& v : x.vec()) v *= s;
    }
    return x;
}

Tensor decode(const Tensor& latent, const WorldDims& dims) {
    if (latent.shape() != dims.latent_shape()) {
        throw std::invalid_argument("decode: expected latent " + shape_str(dims.latent_shape()) + ", got " +
                                    shape_str(latent.shape()));
    }
    if (dims.c_lat != 2 || dims.c_vid != 3 || dims.h_vid != 2 * dims.h_lat || dims.w_vid != 2 * dims.w_lat) {
        throw std::invalid_argument("decode: decoder is fixed to 2 latent channels, 3 video channels, 2x upsampling");
    }
    Tensor out(dims.video_shape());
    const std::size_t vplane = static_cast<std::size_t>(dims.h_vid) * dims.w_vid;
    const std::size_t vframe = static_cast<std::size_t>(dims.c_vid) * vplane;
    const std::size_t lplane = static_cast<std::size_t>(dims.h_lat) * dims.w_lat;
    const std::size_t lframe = static_cast<std::size_t>(dims.c_lat) * lplane;
    for (int vidx = 0; vidx < dims.t_vid(); ++vidx) {
        int j_lo = 0, j_hi = 0;
        double wgt = 0.0;
        if (vidx > 0) {
            const int j = (vidx - 1) / 4 + 1;  // latent group
            const int k = vidx - 4 * (j - 1);  // 1..4 within group
            j_lo = j - 1;
            j_hi = j;
            wgt = k / 4.0;
        }
        const double* lo = latent.data() + static_cast<std::size_t>(j_lo) * lframe;
        const double* hi = latent.data() + static_cast<std::size_t>(j_hi) * lframe;
        double* of = out.data() + static_cast<std::size_t>(vidx) * vframe;
        for (int i = 0; i < dims.h_lat; ++i) {
            for (int jc = 0; jc < dims.w_lat; ++jc) {
                double blend[2];
                for (int c = 0; c < 2; ++c) {
                    const std::size_t at = static_cast<std::size_t>(c) * lplane + static_cast<std::size_t>(i) * dims.w_lat + jc;
                    blend[c] = (1.0 - wgt) * lo[at] + wgt * hi[at];
                }
                for (int cv = 0; cv < 3; ++cv) {
                    const double v = kMix[cv][0] * blend[0] + kMix[cv][1] * blend[1];
                    for (int di = 0; di < 2; ++di)
                        for (int dj = 0; dj < 2; ++dj)
                            of[static_cast<std::size_t>(cv) * vplane +
                               static_cast<std::size_t>(2 * i + di) * dims.w_vid + (2 * jc + dj)] = v;
                }
            }
        }
    }
    return out;
}

ReferenceEmbedder::ReferenceEmbedder(const WorldDims& dims, std::uint64_t seed, int embed_dim)
    : dims_(dims), embed_dim_(embed_dim) {
    const int in = dims.c_vid * dims.h_vid * dims.w_vid;
    const double s1 = 1.0 / std::sqrt(static_cast<double>(in));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden_));
    Rng rv(seed_combine(seed, "ref-video"));
    wv1_ = scaled(Tensor::randn({hidden_, in}, rv), s1);
    bv1_ = scaled(Tensor::randn({hidden_}, rv), 0.1);
    wv2_ = scaled(Tensor::randn({embed_dim_, hidden_}, rv), s2);
    bv2_ = scaled(Tensor::randn({embed_dim_}, rv), 0.1);
    Rng rf(seed_combine(seed, "ref-frame"));
    wf1_ = scaled(Tensor::randn({hidden_, in}, rf), s1);
    bf1_ = scaled(Tensor::randn({hidden_}, rf), 0.1);
    wf2_ = scaled(Tensor::randn({embed_dim_, hidden_}, rf), s2);
    bf2_ = scaled(Tensor::randn({embed_dim_}, rf), 0.1);
}

Tensor ReferenceEmbedder::embed_frame_mean(const Tensor& video, int frame_begin, int frame_end, const Tensor& w1,
                                           const Tensor& b1, const Tensor& w2, const Tensor& b2) const {
    const std::size_t vframe = static_cast<std::size_t>(dims_.c_vid) * dims_.h_vid * dims_.w_vid;
    Tensor mean_frame({static_cast<int>(vframe)});
    const double inv = 1.0 / (frame_end - frame_begin);
    for (int f = frame_begin; f < frame_end; ++f) {
        const double* src = video.data() + static_cast<std::size_t>(f) * vframe;
        for (std::size_t i = 0; i < vframe; ++i) mean_frame[i] += inv * src[i];
    }
    Tensor h({hidden_});
    for (int i = 0; i < hidden_; ++i) {
        double acc = b1[static_cast<std::size_t>(i)];
        const double* row = w1.data() + static_cast<std::size_t>(i) * vframe;
        for (std::size_t k = 0; k < vframe; ++k) acc += row[k] * mean_frame[k];
        h[static_cast<std::size_t>(i)] = std::tanh(acc);
    }
    Tensor e({embed_dim_});
    for (int i = 0; i < embed_dim_; ++i) {
        double acc = b2[static_cast<std::size_t>(i)];
        const double* row = w2.data() + static_cast<std::size_t>(i) * hidden_;
        for (int k = 0; k < hidden_; ++k) acc += row[k] * h[static_cast<std::size_t>(k)];
        e[static_cast<std::size_t>(i)] = acc;
    }
    return unit_normalized(e);
}

Tensor ReferenceEmbedder::embed_video(const Tensor& video) const {
    if (video.shape() != dims_.video_shape()) {
        throw std::invalid_argument("embed_video: expected video " + shape_str(dims_.video_shape()) + ", got " +
                                    shape_str(video.shape()));
    }
    return embed_frame_mean(video, 0, dims_.t_vid(), wv1_, bv1_, wv2_, bv2_);
}

Tensor ReferenceEmbedder::embed_frames_grouped(const Tensor& video) const {
    if (video.shape() != dims_.video_shape()) {
        throw std::invalid_argument("embed_frames_grouped: expected video " + shape_str(dims_.video_shape()) +
                                    ", got " + shape_str(video.shape()));
    }
    Tensor out({dims_.t_lat, embed_dim_});
    for (int j = 0; j < dims_.t_lat; ++j) {
        Tensor group({embed_dim_});
        const int begin = (j == 0) ? 0 : 4 * (j - 1) + 1;
        const int end = (j == 0) ? 1 : 4 * j + 1;
        const double inv = 1.0 / (end - begin);
        for (int f = begin; f < end; ++f) {
            Tensor e = embed_frame_mean(video, f, f + 1, wf1_, bf1_, wf2_, bf2_);
            axpy(inv, e, group);
        }
        Tensor g = unit_normalized(group);
        for (int d = 0; d < embed_dim_; ++d) out(j, d) = g[static_cast<std::size_t>(d)];
    }
    return out;
}

std::filesystem::path Dataset::sample_path(const std::string& split, int cls, int index, const char* ext) const {
    return root / split / std::to_string(cls) / (std::to_string(index) + ext);
}

Tensor Dataset::load_latent(const std::string& split, int cls, int index) const {
    return load_tensor(sample_path(split, cls, index, ".lat"));
}
Tensor Dataset::load_video(const std::string& split, int cls, int index) const {
    return load_tensor(sample_path(split, cls, index, ".vid"));
}
Tensor Dataset::load_video_embedding(const std::string& split, int cls, int index) const {
    return load_tensor(sample_path(split, cls, index, ".v.emb"));
}
Tensor Dataset::load_frame_embedding(const std::string& split, int cls, int index) const {
    return load_tensor(sample_path(split, cls, index, ".f.emb"));
}
Tensor Dataset::prompt_video_embedding(int cls) const {
    return load_tensor(root / "prompt" / (std::to_string(cls) + ".v.emb"));
}
Tensor Dataset::prompt_frame_embedding(int cls) const {
    return load_tensor(root / "prompt" / (std::to_string(cls) + ".f.emb"));
}

int Dataset::per_class(const std::string& split) const {
    if (split == "train") return cfg.train_per_class;
    if (split == "test") return cfg.test_per_class;
    throw std::invalid_argument("dataset: unknown split '" + split + "'");
}

ReferenceEmbedder Dataset::reference_embedder() const {
    return ReferenceEmbedder(cfg.dims, seed_combine(seed, "ref-encoders"), cfg.ref_embed_dim);
}

std::uint64_t Dataset::pool_projector_seed() const { return seed_combine(seed, "pool-projector"); }

namespace {

nlohmann::json dims_to_json(const WorldDims& d) {
    return {{"t_lat", d.t_lat}, {"c_lat", d.c_lat}, {"h_lat", d.h_lat}, {"w_lat", d.w_lat},
            {"c_vid", d.c_vid}, {"h_vid", d.h_vid}, {"w_vid", d.w_vid}};
}

WorldDims dims_from_json(const nlohmann::json& j) {
    WorldDims d;
    d.t_lat = j.at("t_lat");
    d.c_lat = j.at("c_lat");
    d.h_lat = j.at("h_lat");
    d.w_lat = j.at("w_lat");
    d.c_vid = j.at("c_vid");
    d.h_vid = j.at("h_vid");
    d.w_vid = j.at("w_vid");
    return d;
}

}  // namespace

Dataset build_dataset(const std::filesystem::path& root, const DatasetConfig& cfg, std::uint64_t seed) {
    if (cfg.classes < 1 || cfg.train_per_class < 1 || cfg.test_per_class < 1) {
        throw std::invalid_argument("build_dataset: counts must be >= 1");
    }
    if (cfg.dims.t_lat < 3) throw std::invalid_argument("build_dataset: need T_lat >= 3");
    Dataset ds;
    ds.root = root;
    ds.cfg = cfg;
    ds.seed = seed;
    for (int c = 0; c < cfg.classes; ++c) ds.classes.push_back(make_scene_class(c));

    const ReferenceEmbedder ref = ds.reference_embedder();
    std::error_code ec;
    std::filesystem::create_directories(root / "prompt", ec);

    for (const char* split : {"train", "test"}) {
        const int count = ds.per_class(split);
        for (int c = 0; c < cfg.classes; ++c) {
            std::filesystem::create_directories(root / split / std::to_string(c), ec);
            Tensor prompt_v({cfg.ref_embed_dim});
            Tensor prompt_f({cfg.ref_embed_dim});
            for (int i = 0; i < count; ++i) {
                Rng rng(seed_combine(seed_combine(seed_combine(seed, split), static_cast<std::uint64_t>(c)),
                                     static_cast<std::uint64_t>(i)));
                const Tensor lat = synth_latent_video(ds.classes[static_cast<std::size_t>(c)], cfg.dims, rng);
                const Tensor vid = decode(lat, cfg.dims);
                const Tensor ev = ref.embed_video(vid);
                const Tensor ef = ref.embed_frames_grouped(vid);
                save_tensor(ds.sample_path(split, c, i, ".lat"), lat);
                save_tensor(ds.sample_path(split, c, i, ".vid"), vid);
                save_tensor(ds.sample_path(split, c, i, ".v.emb"), ev);
                save_tensor(ds.sample_path(split, c, i, ".f.emb"), ef);
                if (std::string(split) == "train") {
                    axpy(1.0 / count, ev, prompt_v);
                    for (int j = 0; j < cfg.dims.t_lat; ++j)
                        for (int d = 0; d < cfg.ref_embed_dim; ++d)
                            prompt_f[static_cast<std::size_t>(d)] += ef(j, d) / (count * cfg.dims.t_lat);
                }
            }
            if (std::string(split) == "train") {
                save_tensor(root / "prompt" / (std::to_string(c) + ".v.emb"), unit_normalized(prompt_v));
                save_tensor(root / "prompt" / (std::to_string(c) + ".f.emb"), unit_normalized(prompt_f));
            }
        }
    }

    nlohmann::json man;
    man["classes"] = cfg.classes;
    man["train_per_class"] = cfg.train_per_class;
    man["test_per_class"] = cfg.test_per_class;
    man["ref_embed_dim"] = cfg.ref_embed_dim;
    man["seed"] = seed;
    man["dims"] = dims_to_json(cfg.dims);
    nlohmann::json descr = nlohmann::json::array();
    for (const SceneClass& sc : ds.classes) {
        descr.push_back({{"id", sc.id},
                         {"blob_count", sc.blob_count},
                         {"motion", motion_name(sc.motion)},
                         {"base_intensity", sc.base_intensity},
                         {"speed", sc.speed},
                         {"sigma", sc.sigma}});
    }
    man["class_descriptors"] = descr;
    std::ofstream mf(root / "manifest.json");
    if (!mf) throw std::runtime_error("build_dataset: cannot write manifest at " + (root / "manifest.json").string());
    mf << man.dump(2) << "\n";
    return ds;
}

Dataset load_dataset(const std::filesystem::path& root) {
    std::ifstream mf(root / "manifest.json");
    if (!mf) throw std::runtime_error("load_dataset: no manifest at " + (root / "manifest.json").string());
    nlohmann::json man;
    mf >> man;
    Dataset ds;
    ds.root = root;
    ds.cfg.classes = man.at("classes");
    ds.cfg.train_per_class = man.at("train_per_class");
    ds.cfg.test_per_class = man.at("test_per_class");
    ds.cfg.ref_embed_dim = man.at("ref_embed_dim");
    ds.cfg.dims = dims_from_json(man.at("dims"));
    ds.seed = man.at("seed");
    for (const auto& j : man.at("class_descriptors")) {
        SceneClass sc;
        sc.id = j.at("id");
        sc.blob_count = j.at("blob_count");
        sc.motion = motion_from_name(j.at("motion"));
        sc.base_intensity = j.at("base_intensity");
        sc.speed = j.at("speed");
        sc.sigma = j.at("sigma");
        ds.classes.push_back(sc);
    }
    return ds;
}

}  // namespace dfl
