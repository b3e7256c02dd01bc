#include "dfl/latent_models.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "dfl/guidance.hpp"
#include "json.hpp"

namespace dfl {

namespace {

Tensor row_of(const Tensor& m, int r) {
    if (m.rank() != 2) throw std::invalid_argument("row_of: rank-2 tensor expected");
    const int n = m.dim(1);
    Tensor out({n});
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j)] = m(r, j);
    return out;
}

Tensor tanh_t(const Tensor& x) {
    Tensor out = x;
    for (auto& v : out.vec()) v = std::tanh(v);
    return out;
}

std::size_t pick(Rng& rng, std::size_t n) {
    auto i = static_cast<std::size_t>(rng.uniform() * static_cast<double>(n));
    return i >= n ? n - 1 : i;
}

// spatial mean per (frame, channel) of a [T,C,H,W] latent -> [T*C]
Tensor spatial_means(const Tensor& latent) {
    const int t = latent.dim(0), c = latent.dim(1), h = latent.dim(2), w = latent.dim(3);
    const int hw = h * w;
    Tensor out({t * c});
    const double* p = latent.data();
    for (int i = 0; i < t * c; ++i) {
        double s = 0.0;
        for (int k = 0; k < hw; ++k) s += p[static_cast<std::size_t>(i) * hw + k];
        out[static_cast<std::size_t>(i)] = s / hw;
    }
    return out;
}

struct Adam {
    double lr = 1e-3;
    double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    int t = 0;
    std::vector<Tensor> m, v;

    void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
        if (params.size() != grads.size()) throw std::invalid_argument("adam: params/grads mismatch");
        if (m.empty()) {
            for (auto* p : params) {
                m.emplace_back(p->shape());
                v.emplace_back(p->shape());
            }
        }
        ++t;
        const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            const Tensor& g = *grads[i];
            for (std::size_t k = 0; k < p.size(); ++k) {
                m[i][k] = b1 * m[i][k] + (1.0 - b1) * g[k];
                v[i][k] = b2 * v[i][k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[i][k] / c1) / (std::sqrt(v[i][k] / c2) + eps);
            }
        }
    }
};

// flow-step range [lo, hi] of a training stage: thirds of t over 0..n_steps
void stage_bounds(int n_steps, int stage, int& lo, int& hi) {
    auto hi_of = [&](int s) { return s >= 2 ? n_steps : (n_steps * (s + 1) + 2) / 3 - 1; };
    lo = stage == 0 ? 0 : hi_of(stage - 1) + 1;
    hi = hi_of(stage);
    if (lo > hi) throw std::invalid_argument("stage_bounds: empty stage, n_steps too small");
}

Var scalar_mean(Tape& tape, const std::vector<Var>& terms) {
    if (terms.empty()) throw std::invalid_argument("scalar_mean: no terms");
    return tape.scale(tape.sum(tape.concat0(terms)), 1.0 / static_cast<double>(terms.size()));
}

nlohmann::json world_json(const WorldDims& d) {
    return {{"t_lat", d.t_lat}, {"c_lat", d.c_lat}, {"h_lat", d.h_lat}, {"w_lat", d.w_lat},
            {"c_vid", d.c_vid}, {"h_vid", d.h_vid}, {"w_vid", d.w_vid}};
}

WorldDims world_from_json(const nlohmann::json& j) {
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

void write_loss_csv(const std::filesystem::path& path, const char* index_name, const std::vector<double>& curve) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << index_name << ",loss\n";
    char buf[64];
    for (std::size_t i = 0; i < curve.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.10g\n", i, curve[i]);
        f << buf;
    }
}

double tail_mean(const std::vector<double>& curve, std::size_t window) {
    if (curve.empty()) return 0.0;
    const std::size_t n = std::min(window, curve.size());
    double s = 0.0;
    for (std::size_t i = curve.size() - n; i < curve.size(); ++i) s += curve[i];
    return s / static_cast<double>(n);
}

}  // namespace

// ---- PooledProjector ----

PooledProjector::PooledProjector(const WorldDims& dims, std::uint64_t seed, int out_dim)
    : dims_(dims), out_dim_(out_dim) {
    Rng rv(seed_combine(seed, "pool-video"));
    Rng rf(seed_combine(seed, "pool-frame"));
    const int in_v = dims.t_lat * dims.c_lat;
    rv_ = scaled(Tensor::randn({in_v, out_dim}, rv), 1.0 / std::sqrt(in_v));
    rf_ = scaled(Tensor::randn({dims.c_lat, out_dim}, rf), 1.0 / std::sqrt(dims.c_lat));
}

Tensor PooledProjector::pool_video(const Tensor& latent) const {
    Tensor s = spatial_means(latent).reshaped({1, dims_.t_lat * dims_.c_lat});
    return unit_normalized(matmul(s, rv_).reshaped({out_dim_}));
}

Tensor PooledProjector::pool_frame(const Tensor& latent, int frame) const {
    Tensor s = spatial_means(latent);
    Tensor sf({1, dims_.c_lat});
    for (int c = 0; c < dims_.c_lat; ++c) sf[static_cast<std::size_t>(c)] = s[frame * dims_.c_lat + c];
    return unit_normalized(matmul(sf, rf_).reshaped({out_dim_}));
}

// ---- LatentEmbedder ----

LatentEmbedder LatentEmbedder::init(EmbedLevel level, const WorldDims& world, int embed_dim, int channels,
                                    Rng& rng) {
    LatentEmbedder m;
    m.level = level;
    m.world = world;
    m.embed_dim = embed_dim;
    m.channels = channels;
    const int c = world.c_lat;
    m.params.set("c1w", scaled(Tensor::randn({channels, c, 3, 3}, rng), 1.0 / std::sqrt(9.0 * c)));
    m.params.set("c1b", Tensor::zeros({channels}));
    m.params.set("c2w", scaled(Tensor::randn({channels, channels, 3, 3}, rng), 1.0 / std::sqrt(9.0 * channels)));
    m.params.set("c2b", Tensor::zeros({channels}));
    m.params.set("head_w", scaled(Tensor::randn({channels, embed_dim}, rng), 1.0 / std::sqrt(channels)));
    m.params.set("head_b", Tensor::zeros({embed_dim}));
    return m;
}

EmbedderVars push_embedder(Tape& tape, const LatentEmbedder& m, bool trainable) {
    EmbedderVars p;
    p.c1w = tape.leaf(m.params.at("c1w"), trainable);
    p.c1b = tape.leaf(m.params.at("c1b"), trainable);
    p.c2w = tape.leaf(m.params.at("c2w"), trainable);
    p.c2b = tape.leaf(m.params.at("c2b"), trainable);
    p.head_w = tape.leaf(m.params.at("head_w"), trainable);
    p.head_b = tape.leaf(m.params.at("head_b"), trainable);
    return p;
}

namespace {

// per-frame conv trunk + spatial mean pool: latent [T,C,H,W] -> rows [T, channels]
Var pooled_rows(Tape& tape, const EmbedderVars& p, Var latent) {
    const auto& sh = latent.value().shape();
    if (sh.size() != 4) throw std::invalid_argument("embedder: latent must be [T,C,H,W]");
    const int t = sh[0], h = sh[2], w = sh[3];
    const int ch = p.c2w.value().dim(0);
    const int hw = h * w;
    Var pool_w = tape.constant(Tensor::full({hw, 1}, 1.0 / hw));
    std::vector<Var> rows;
    rows.reserve(static_cast<std::size_t>(t));
    for (int j = 0; j < t; ++j) {
        Var frame = tape.reshape(tape.slice0(latent, j, j + 1), {sh[1], h, w});
        Var h1 = tape.tanh(tape.conv2d(frame, p.c1w, p.c1b));
        Var h2 = tape.tanh(tape.conv2d(h1, p.c2w, p.c2b));
        rows.push_back(tape.reshape(tape.matmul(tape.reshape(h2, {ch, hw}), pool_w), {1, ch}));
    }
    return tape.concat0(rows);
}

}  // namespace

Var embed_video_on_tape(Tape& tape, const EmbedderVars& p, Var latent) {
    Var rows = pooled_rows(tape, p, latent);
    const int t = rows.value().dim(0);
    Var avg = tape.matmul(tape.constant(Tensor::full({1, t}, 1.0 / t)), rows);
    Var out = tape.bias_add(tape.matmul(avg, p.head_w), p.head_b);
    return tape.normalize(tape.reshape(out, {p.head_b.value().dim(0)}));
}

std::vector<Var> embed_frames_on_tape(Tape& tape, const EmbedderVars& p, Var latent) {
    Var rows = pooled_rows(tape, p, latent);
    const int t = rows.value().dim(0);
    const int ed = p.head_b.value().dim(0);
    Var out = tape.bias_add(tape.matmul(rows, p.head_w), p.head_b);
    std::vector<Var> e;
    e.reserve(static_cast<std::size_t>(t));
    for (int j = 0; j < t; ++j) e.push_back(tape.normalize(tape.reshape(tape.slice0(out, j, j + 1), {ed})));
    return e;
}

Tensor embed_video_value(const LatentEmbedder& m, const Tensor& latent) {
    Tape tape;
    EmbedderVars p = push_embedder(tape, m, false);
    return embed_video_on_tape(tape, p, tape.constant(latent)).value();
}

Tensor embed_frames_value(const LatentEmbedder& m, const Tensor& latent) {
    Tape tape;
    EmbedderVars p = push_embedder(tape, m, false);
    std::vector<Var> e = embed_frames_on_tape(tape, p, tape.constant(latent));
    Tensor out({static_cast<int>(e.size()), m.embed_dim});
    for (std::size_t j = 0; j < e.size(); ++j)
        for (int k = 0; k < m.embed_dim; ++k) out(static_cast<int>(j), k) = e[j].value()[static_cast<std::size_t>(k)];
    return out;
}

// ---- Alignment ----

Alignment Alignment::init(int n_latent, int n_image, Rng& rng) {
    Alignment a;
    a.a = scaled(Tensor::randn({n_latent, n_image}, rng), 1.0 / std::sqrt(n_image));
    a.mask = Tensor::full({n_latent, n_image}, 1.0);
    return a;
}

void Alignment::apply_mask() { a = mul(a, mask); }

double Alignment::masked_fraction() const {
    double z = 0.0;
    for (auto v : mask.vec()) z += (v == 0.0) ? 1.0 : 0.0;
    return z / static_cast<double>(mask.size());
}

void Alignment::sparsify_to(double fraction) {
    if (fraction < 0.0 || fraction > 1.0) throw std::invalid_argument("sparsify_to: fraction outside [0,1]");
    const auto total = mask.size();
    const auto target = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(total) - 1e-9));
    std::size_t cur = 0;
    for (auto v : mask.vec()) cur += (v == 0.0) ? 1 : 0;
    if (target <= cur) return;
    std::vector<std::pair<double, std::size_t>> live;
    for (std::size_t i = 0; i < total; ++i)
        if (mask[i] != 0.0) live.emplace_back(std::fabs(a[i]), i);
    std::sort(live.begin(), live.end());
    const std::size_t extra = std::min(target - cur, live.size());
    for (std::size_t k = 0; k < extra; ++k) {
        mask[live[k].second] = 0.0;
        a[live[k].second] = 0.0;
    }
}

// ---- LatentInterpolator ----

LatentInterpolator LatentInterpolator::init(const WorldDims& world, int channels, Rng& rng) {
    LatentInterpolator m;
    m.world = world;
    m.channels = channels;
    const int c = world.c_lat;
    m.params.set("c1w", scaled(Tensor::randn({channels, 2 * c, 3, 3}, rng), 1.0 / std::sqrt(9.0 * 2 * c)));
    m.params.set("c1b", Tensor::zeros({channels}));
    m.params.set("c2w", scaled(Tensor::randn({c, channels, 3, 3}, rng), 1.0 / std::sqrt(9.0 * channels)));
    m.params.set("c2b", Tensor::zeros({c}));
    return m;
}

InterpolatorVars push_interpolator(Tape& tape, const LatentInterpolator& m, bool trainable) {
    InterpolatorVars p;
    p.c1w = tape.leaf(m.params.at("c1w"), trainable);
    p.c1b = tape.leaf(m.params.at("c1b"), trainable);
    p.c2w = tape.leaf(m.params.at("c2w"), trainable);
    p.c2b = tape.leaf(m.params.at("c2b"), trainable);
    return p;
}

Var interp_predict_on_tape(Tape& tape, const InterpolatorVars& p, Var latent, int j) {
    const auto& sh = latent.value().shape();
    if (sh.size() != 4) throw std::invalid_argument("interpolator: latent must be [T,C,H,W]");
    if (j < 1 || j > sh[0] - 2) throw std::invalid_argument("interpolator: frame index not interior");
    Var prev = tape.reshape(tape.slice0(latent, j - 1, j), {sh[1], sh[2], sh[3]});
    Var next = tape.reshape(tape.slice0(latent, j + 1, j + 2), {sh[1], sh[2], sh[3]});
    Var both = tape.concat0({prev, next});
    Var h = tape.tanh(tape.conv2d(both, p.c1w, p.c1b));
    return tape.conv2d(h, p.c2w, p.c2b);
}

Tensor interp_predict(const LatentInterpolator& m, const Tensor& latent, int j) {
    const auto& sh = latent.shape();
    if (sh.size() != 4) throw std::invalid_argument("interpolator: latent must be [T,C,H,W]");
    if (j < 1 || j > sh[0] - 2) throw std::invalid_argument("interpolator: frame index not interior");
    const std::size_t fn = static_cast<std::size_t>(sh[1]) * sh[2] * sh[3];
    Tensor both({2 * sh[1], sh[2], sh[3]});
    std::copy_n(latent.data() + (j - 1) * fn, fn, both.data());
    std::copy_n(latent.data() + (j + 1) * fn, fn, both.data() + fn);
    Tensor h = tanh_t(conv2d(both, m.params.at("c1w"), m.params.at("c1b")));
    return conv2d(h, m.params.at("c2w"), m.params.at("c2b"));
}

Tensor interp_apply(const LatentInterpolator& m, const Tensor& latent) {
    Tensor out = latent;
    const auto& sh = latent.shape();
    const std::size_t fn = static_cast<std::size_t>(sh[1]) * sh[2] * sh[3];
    for (int j = 1; j <= sh[0] - 2; ++j) {
        Tensor pred = interp_predict(m, latent, j);
        std::copy_n(pred.data(), fn, out.data() + j * fn);
    }
    return out;
}

// ---- losses ----

Var loss_similarity(Tape& tape, const std::vector<Var>& e, const std::vector<Tensor>& ref) {
    const std::size_t n = e.size();
    if (n < 2) throw std::invalid_argument("loss_similarity: need at least two samples");
    if (ref.size() != n) throw std::invalid_argument("loss_similarity: embedding/reference count mismatch");
    std::vector<Var> terms;
    terms.reserve(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            const double r = dot(ref[i], ref[k]);
            terms.push_back(tape.pow_const(tape.affine(tape.dot(e[i], e[k]), 1.0, -r), 2.0));
        }
    return scalar_mean(tape, terms);
}

Var loss_pairing(Tape& tape, const std::vector<Var>& e, const std::vector<Tensor>& ref, Var a_masked) {
    const std::size_t n = e.size();
    if (ref.size() != n || n == 0) throw std::invalid_argument("loss_pairing: embedding/reference count mismatch");
    const int n_latent = a_masked.value().dim(0);
    const int n_image = a_masked.value().dim(1);
    std::vector<Var> terms;
    terms.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Var mapped = tape.reshape(tape.matmul(a_masked, tape.constant(ref[i].reshaped({n_image, 1}))), {n_latent});
        terms.push_back(tape.affine(tape.dot(e[i], mapped), -1.0, 1.0));
    }
    return scalar_mean(tape, terms);
}

Var loss_reg_mean(Tape& tape, const std::vector<Var>& e, const std::vector<Tensor>& pooled) {
    const std::size_t n = e.size();
    if (pooled.size() != n || n == 0) throw std::invalid_argument("loss_reg_mean: embedding/pool count mismatch");
    std::vector<Var> terms;
    terms.reserve(n);
    for (std::size_t i = 0; i < n; ++i) terms.push_back(tape.dot(e[i], tape.constant(pooled[i])));
    return tape.affine(scalar_mean(tape, terms), -1.0, 1.0);
}

Var loss_reg_proj(Tape& tape, Var a_masked) { return tape.mean(tape.mul(a_masked, a_masked)); }

// ---- TrajectoryBank ----

TrajectoryBank TrajectoryBank::build(const VelocityField& flow, const Dataset& ds, int size, int n_steps,
                                     std::uint64_t seed) {
    if (size < 1) throw std::invalid_argument("trajectory bank: size must be positive");
    TrajectoryBank bank;
    bank.n_steps = n_steps;
    bank.entries.reserve(static_cast<std::size_t>(size));
    ReferenceEmbedder ref = ds.reference_embedder();
    const WorldDims& wd = flow.dims.world;
    const std::uint64_t base = seed_combine(seed, "bank");
    for (int m = 0; m < size; ++m) {
        Entry en;
        en.cls = m % ds.cfg.classes;
        Rng rng(seed_combine(base, static_cast<std::uint64_t>(m)));
        Trajectory tr = euler_trajectory(flow, en.cls, n_steps, rng);
        Tensor video = decode(row_of(tr.xhat1, n_steps).reshaped(wd.latent_shape()), wd);
        en.ref_video = ref.embed_video(video);
        en.ref_frames = ref.embed_frames_grouped(video);
        en.xhat1 = std::move(tr.xhat1);
        bank.entries.push_back(std::move(en));
    }
    return bank;
}

Tensor TrajectoryBank::latent_at(std::size_t entry, int step) const {
    const Entry& en = entries.at(entry);
    if (step < 0 || step > n_steps) throw std::invalid_argument("trajectory bank: step out of range");
    return row_of(en.xhat1, step);
}

// ---- embedder training ----

EmbedderTrainResult train_embedder(EmbedLevel level, const TrajectoryBank& bank, const Dataset& ds,
                                   const LatentTrainConfig& cfg) {
    const WorldDims& wd = ds.cfg.dims;
    Rng rng(seed_combine(seed_combine(cfg.seed, "train-embed"), level == EmbedLevel::Video ? 0u : 1u));
    EmbedderTrainResult res;
    res.model = LatentEmbedder::init(level, wd, cfg.embed_dim, cfg.conv_channels, rng);
    res.align = Alignment::init(cfg.embed_dim, ds.cfg.ref_embed_dim, rng);
    PooledProjector pool(wd, ds.pool_projector_seed(), cfg.embed_dim);
    ProjStats pstats;

    std::vector<Tensor> prompts;
    prompts.reserve(static_cast<std::size_t>(ds.cfg.classes));
    for (int c = 0; c < ds.cfg.classes; ++c)
        prompts.push_back(level == EmbedLevel::Video ? ds.prompt_video_embedding(c) : ds.prompt_frame_embedding(c));

    const int batch = std::max(2, cfg.batch);
    const int total = 3 * cfg.stage_steps;
    Adam opt;
    opt.lr = cfg.lr;

    for (int step = 0; step < total; ++step) {
        const int stage = step / cfg.stage_steps;
        int k_lo = 0, k_hi = 0;
        stage_bounds(bank.n_steps, stage, k_lo, k_hi);

        Tape tape;
        EmbedderVars ev = push_embedder(tape, res.model, true);
        Var a_var = tape.leaf(res.align.a);
        Var a_masked = tape.mul(a_var, tape.constant(res.align.mask));
        const int n_image = ds.cfg.ref_embed_dim;

        std::vector<std::vector<Var>> e_v(1);
        std::vector<std::vector<Tensor>> refs(1), pooled(1);
        const int t_lat = wd.t_lat;
        if (level == EmbedLevel::Frame) {
            e_v.assign(static_cast<std::size_t>(t_lat), {});
            refs.assign(static_cast<std::size_t>(t_lat), {});
            pooled.assign(static_cast<std::size_t>(t_lat), {});
        }

        for (int b = 0; b < batch; ++b) {
            const std::size_t idx = pick(rng, bank.entries.size());
            const int k = k_lo + static_cast<int>(pick(rng, static_cast<std::size_t>(k_hi - k_lo + 1)));
            const TrajectoryBank::Entry& en = bank.entries[idx];
            Tensor lat = bank.latent_at(idx, k).reshaped(wd.latent_shape());
            Var x = tape.constant(lat);
            Var dir = tape.reshape(tape.matmul(a_masked, tape.constant(prompts[static_cast<std::size_t>(en.cls)]
                                                                           .reshaped({n_image, 1}))),
                                   {cfg.embed_dim});
            if (level == EmbedLevel::Video) {
                Var m_out = embed_video_on_tape(tape, ev, x);
                e_v[0].push_back(proj_orthogonal_on_tape(tape, m_out, dir, &pstats));
                refs[0].push_back(en.ref_video);
                pooled[0].push_back(pool.pool_video(lat));
            } else {
                std::vector<Var> m_rows = embed_frames_on_tape(tape, ev, x);
                for (int j = 0; j < t_lat; ++j) {
                    e_v[static_cast<std::size_t>(j)].push_back(proj_orthogonal_on_tape(tape, m_rows[static_cast<std::size_t>(j)], dir, &pstats));
                    refs[static_cast<std::size_t>(j)].push_back(row_of(en.ref_frames, j));
                    pooled[static_cast<std::size_t>(j)].push_back(pool.pool_frame(lat, j));
                }
            }
        }

        std::vector<Var> ls, lp, lm;
        for (std::size_t g = 0; g < e_v.size(); ++g) {
            ls.push_back(loss_similarity(tape, e_v[g], refs[g]));
            lp.push_back(loss_pairing(tape, e_v[g], refs[g], a_masked));
            lm.push_back(loss_reg_mean(tape, e_v[g], pooled[g]));
        }
        Var loss = tape.add(tape.add(tape.scale(scalar_mean(tape, ls), cfg.lambda_s), scalar_mean(tape, lp)),
                            tape.add(scalar_mean(tape, lm), loss_reg_proj(tape, a_masked)));
        const double lv = loss.value().scalar_value();
        if (!std::isfinite(lv)) throw std::runtime_error("embedder training diverged at step " + std::to_string(step));
        tape.backward(loss);

        opt.step({&res.model.params.at("c1w"), &res.model.params.at("c1b"), &res.model.params.at("c2w"),
                  &res.model.params.at("c2b"), &res.model.params.at("head_w"), &res.model.params.at("head_b"),
                  &res.align.a},
                 {&ev.c1w.grad(), &ev.c1b.grad(), &ev.c2w.grad(), &ev.c2b.grad(), &ev.head_w.grad(),
                  &ev.head_b.grad(), &a_var.grad()});
        res.align.apply_mask();

        if (stage == 1 && cfg.target_sparsity > 0.0 && cfg.sparsify_every > 0) {
            const int s_in = step - cfg.stage_steps + 1;
            if (s_in % cfg.sparsify_every == 0)
                res.align.sparsify_to(cfg.target_sparsity * s_in / static_cast<double>(cfg.stage_steps));
        }
        res.loss_curve.push_back(lv);
    }
    res.final_loss = tail_mean(res.loss_curve, 100);
    res.proj_degenerate = static_cast<int>(pstats.degenerate);
    return res;
}

// ---- interpolator training ----

InterpolatorTrainResult train_interpolator(const TrajectoryBank& bank, const Dataset& ds,
                                           const LatentTrainConfig& cfg) {
    const WorldDims& wd = ds.cfg.dims;
    Rng rng(seed_combine(cfg.seed, "train-interp"));
    InterpolatorTrainResult res;
    res.model = LatentInterpolator::init(wd, cfg.conv_channels, rng);
    Adam opt;
    opt.lr = cfg.lr;
    const int t_lat = wd.t_lat;
    const std::vector<int> fshape = {wd.c_lat, wd.h_lat, wd.w_lat};

    for (int epoch = 0; epoch < cfg.interp_epochs; ++epoch) {
        opt.lr = cfg.lr * 0.5 * (1.0 + std::cos(M_PI * epoch / std::max(1, cfg.interp_epochs)));
        double epoch_loss = 0.0;
        for (std::size_t m = 0; m < bank.entries.size(); ++m) {
            const int k = static_cast<int>(pick(rng, static_cast<std::size_t>(bank.n_steps + 1)));
            Tensor lat = bank.latent_at(m, k).reshaped(wd.latent_shape());
            Tape tape;
            InterpolatorVars iv = push_interpolator(tape, res.model, true);
            Var x = tape.constant(lat);
            std::vector<Var> terms;
            for (int j = 1; j <= t_lat - 2; ++j) {
                Var pred = interp_predict_on_tape(tape, iv, x, j);
                Var actual = tape.reshape(tape.slice0(x, j, j + 1), fshape);
                Var lin = tape.scale(tape.add(tape.reshape(tape.slice0(x, j - 1, j), fshape),
                                              tape.reshape(tape.slice0(x, j + 1, j + 2), fshape)),
                                     0.5);
                Var d1 = tape.sub(pred, actual);
                Var d2 = tape.sub(pred, lin);
                terms.push_back(tape.add(tape.dot(d1, d1), tape.scale(tape.dot(d2, d2), cfg.interp_mu)));
            }
            Var loss = tape.sum(tape.concat0(terms));
            const double lv = loss.value().scalar_value();
            if (!std::isfinite(lv))
                throw std::runtime_error("interpolator training diverged at epoch " + std::to_string(epoch));
            tape.backward(loss);
            opt.step({&res.model.params.at("c1w"), &res.model.params.at("c1b"), &res.model.params.at("c2w"),
                      &res.model.params.at("c2b")},
                     {&iv.c1w.grad(), &iv.c1b.grad(), &iv.c2w.grad(), &iv.c2b.grad()});
            epoch_loss += lv;
        }
        res.loss_curve.push_back(epoch_loss / static_cast<double>(bank.entries.size()));
    }
    res.final_loss = tail_mean(res.loss_curve, 100);
    return res;
}

// ---- checkpoints ----

void save_embedder(const EmbedderTrainResult& r, const std::filesystem::path& base) {
    ParamStore store = r.model.params;
    store.set("align_a", r.align.a);
    store.set("align_mask", r.align.mask);
    store.save(base.string() + ".ckpt");
    nlohmann::json j;
    j["level"] = r.model.level == EmbedLevel::Video ? "video" : "frame";
    j["embed_dim"] = r.model.embed_dim;
    j["channels"] = r.model.channels;
    j["world"] = world_json(r.model.world);
    j["parameters"] = store.total_elements();
    j["final_loss"] = r.final_loss;
    j["steps_run"] = r.loss_curve.size();
    j["masked_fraction"] = r.align.masked_fraction();
    j["proj_degenerate"] = r.proj_degenerate;
    std::ofstream f(base.string() + ".json");
    if (!f) throw std::runtime_error("save_embedder: cannot write " + base.string() + ".json");
    f << j.dump(2) << "\n";
    write_loss_csv(base.string() + "_loss.csv", "step", r.loss_curve);
}

void load_embedder(const std::filesystem::path& base, LatentEmbedder& model, Alignment& align) {
    std::ifstream f(base.string() + ".json");
    if (!f) throw std::runtime_error("load_embedder: no sidecar at " + base.string() + ".json");
    nlohmann::json j;
    f >> j;
    model.level = j.at("level") == "video" ? EmbedLevel::Video : EmbedLevel::Frame;
    model.embed_dim = j.at("embed_dim");
    model.channels = j.at("channels");
    model.world = world_from_json(j.at("world"));
    ParamStore store = ParamStore::load(base.string() + ".ckpt");
    align.a = store.at("align_a");
    align.mask = store.at("align_mask");
    model.params = ParamStore();
    for (const char* name : {"c1w", "c1b", "c2w", "c2b", "head_w", "head_b"}) model.params.set(name, store.at(name));
}

void save_interpolator(const InterpolatorTrainResult& r, const std::filesystem::path& base) {
    r.model.params.save(base.string() + ".ckpt");
    nlohmann::json j;
    j["channels"] = r.model.channels;
    j["world"] = world_json(r.model.world);
    j["parameters"] = r.model.params.total_elements();
    j["final_loss"] = r.final_loss;
    j["epochs_run"] = r.loss_curve.size();
    std::ofstream f(base.string() + ".json");
    if (!f) throw std::runtime_error("save_interpolator: cannot write " + base.string() + ".json");
    f << j.dump(2) << "\n";
    write_loss_csv(base.string() + "_loss.csv", "epoch", r.loss_curve);
}

LatentInterpolator load_interpolator(const std::filesystem::path& base) {
    std::ifstream f(base.string() + ".json");
    if (!f) throw std::runtime_error("load_interpolator: no sidecar at " + base.string() + ".json");
    nlohmann::json j;
    f >> j;
    LatentInterpolator m;
    m.channels = j.at("channels");
    m.world = world_from_json(j.at("world"));
    m.params = ParamStore::load(base.string() + ".ckpt");
    return m;
}

LatentModels load_latent_models(const std::filesystem::path& dir) {
    LatentModels m;
    load_embedder(dir / "embed_v", m.m_v, m.a_v);
    load_embedder(dir / "embed_f", m.m_f, m.a_f);
    m.m_c = load_interpolator(dir / "interp");
    return m;
}

// ---- evaluation ----

namespace {

double similarity_mse(const std::vector<Tensor>& e, const std::vector<Tensor>& ref) {
    const std::size_t n = e.size();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            const double d = dot(e[i], e[k]) - dot(ref[i], ref[k]);
            s += d * d;
        }
    return s / static_cast<double>(n * n);
}

double mean_sq(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

Tensor frame_of(const Tensor& latent, int j) {
    const auto& sh = latent.shape();
    const std::size_t fn = static_cast<std::size_t>(sh[1]) * sh[2] * sh[3];
    Tensor out({sh[1], sh[2], sh[3]});
    std::copy_n(latent.data() + j * fn, fn, out.data());
    return out;
}

}  // namespace

std::vector<LatentEvalRow> eval_latent_models(const LatentModels& models, const VelocityField& flow,
                                              const Dataset& ds, const std::vector<int>& steps, int bank_size,
                                              std::uint64_t seed) {
    const WorldDims& wd = ds.cfg.dims;
    const int n_steps = steps.empty() ? 50 : *std::max_element(steps.begin(), steps.end());
    TrajectoryBank bank = TrajectoryBank::build(flow, ds, bank_size, n_steps, seed_combine(seed, "latent-eval"));
    PooledProjector pool(wd, ds.pool_projector_seed(), models.m_v.embed_dim);

    std::vector<Tensor> dir_v, dir_f;
    for (int c = 0; c < ds.cfg.classes; ++c) {
        const int ni = ds.cfg.ref_embed_dim;
        dir_v.push_back(matmul(models.a_v.masked(), ds.prompt_video_embedding(c).reshaped({ni, 1}))
                            .reshaped({models.m_v.embed_dim}));
        dir_f.push_back(matmul(models.a_f.masked(), ds.prompt_frame_embedding(c).reshaped({ni, 1}))
                            .reshaped({models.m_f.embed_dim}));
    }

    std::vector<LatentEvalRow> rows;
    for (int k : steps) {
        std::vector<Tensor> ev, pv, rv;
        std::vector<std::vector<Tensor>> ef(static_cast<std::size_t>(wd.t_lat)), pf(static_cast<std::size_t>(wd.t_lat)),
            rf(static_cast<std::size_t>(wd.t_lat));
        double interp_model = 0.0, interp_prev = 0.0, interp_next = 0.0, interp_mean = 0.0;
        std::size_t interp_count = 0;

        for (std::size_t m = 0; m < bank.entries.size(); ++m) {
            const TrajectoryBank::Entry& en = bank.entries[m];
            Tensor lat = bank.latent_at(m, k).reshaped(wd.latent_shape());
            ev.push_back(proj_orthogonal(embed_video_value(models.m_v, lat), dir_v[static_cast<std::size_t>(en.cls)]));
            pv.push_back(pool.pool_video(lat));
            rv.push_back(en.ref_video);
            Tensor fe = embed_frames_value(models.m_f, lat);
            for (int j = 0; j < wd.t_lat; ++j) {
                ef[static_cast<std::size_t>(j)].push_back(
                    proj_orthogonal(row_of(fe, j), dir_f[static_cast<std::size_t>(en.cls)]));
                pf[static_cast<std::size_t>(j)].push_back(pool.pool_frame(lat, j));
                rf[static_cast<std::size_t>(j)].push_back(row_of(en.ref_frames, j));
            }
            for (int j = 1; j <= wd.t_lat - 2; ++j) {
                Tensor actual = frame_of(lat, j);
                Tensor prev = frame_of(lat, j - 1);
                Tensor next = frame_of(lat, j + 1);
                interp_model += mean_sq(interp_predict(models.m_c, lat, j), actual);
                interp_prev += mean_sq(prev, actual);
                interp_next += mean_sq(next, actual);
                interp_mean += mean_sq(scaled(add(prev, next), 0.5), actual);
                ++interp_count;
            }
        }

        double sim_f_model = 0.0, sim_f_base = 0.0;
        for (int j = 0; j < wd.t_lat; ++j) {
            sim_f_model += similarity_mse(ef[static_cast<std::size_t>(j)], rf[static_cast<std::size_t>(j)]);
            sim_f_base += similarity_mse(pf[static_cast<std::size_t>(j)], rf[static_cast<std::size_t>(j)]);
        }
        sim_f_model /= wd.t_lat;
        sim_f_base /= wd.t_lat;

        rows.push_back({k, "similarity_mse_video", "latent_mean", similarity_mse(ev, rv), similarity_mse(pv, rv)});
        rows.push_back({k, "similarity_mse_frame", "latent_mean", sim_f_model, sim_f_base});
        const double im = interp_model / static_cast<double>(interp_count);
        rows.push_back({k, "interp_mse", "prev_frame", im, interp_prev / static_cast<double>(interp_count)});
        rows.push_back({k, "interp_mse", "next_frame", im, interp_next / static_cast<double>(interp_count)});
        rows.push_back({k, "interp_mse", "mean_neighbors", im, interp_mean / static_cast<double>(interp_count)});
    }
    return rows;
}

void write_latent_eval_csv(const std::filesystem::path& path, const std::vector<LatentEvalRow>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "flow_step,metric_name,model_value,baseline_name,baseline_value\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%s,%.10g,%s,%.10g\n", r.flow_step, r.metric.c_str(), r.model_value,
                      r.baseline.c_str(), r.baseline_value);
        f << buf;
    }
}

}  // namespace dfl
