#include "dfl/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dfl {

Tensor proj_orthogonal(const Tensor& a, const Tensor& b, ProjStats* stats) {
    if (!same_shape(a, b)) throw std::invalid_argument("proj_orthogonal: shape mismatch");
    const double nb = norm2(b);
    if (nb < 1e-12) {
        if (stats) ++stats->degenerate;
        return a;
    }
    Tensor out = a;
    axpy(-dot(a, b) / (nb * nb), b, out);
    return out;
}

Var proj_orthogonal_on_tape(Tape& tape, Var a, Var b, ProjStats* stats) {
    if (!same_shape(a.value(), b.value())) throw std::invalid_argument("proj_orthogonal: shape mismatch");
    const double nb = norm2(b.value());
    if (nb < 1e-12) {
        if (stats) ++stats->degenerate;
        return a;
    }
    Var coef = tape.mul(tape.dot(a, b), tape.pow_const(tape.dot(b, b), -1.0));
    return tape.sub(a, tape.scale_by(b, coef));
}

RegulateResult regulate_gradient(const Tensor& g_d, const Tensor& g_c) {
    if (!same_shape(g_d, g_c)) throw std::invalid_argument("regulate_gradient: shape mismatch");
    RegulateResult r;
    r.g = g_d;
    const double nc = norm2(g_c);
    if (nc < 1e-12) return r;
    r.alpha = dot(g_d, g_c) / (nc * nc);
    if (r.alpha >= 0.0) return r;  // conflict-free: g_d passes through untouched
    axpy(-r.alpha, g_c, r.g);
    r.regulated = true;
    return r;
}

std::string method_name(GuidanceMethod m) {
    switch (m) {
        case GuidanceMethod::None: return "none";
        case GuidanceMethod::Dpp: return "dpp";
        case GuidanceMethod::ParticleGuidance: return "pg";
        case GuidanceMethod::Ours: return "ours";
    }
    throw std::invalid_argument("method_name: unknown method");
}

GuidanceMethod method_from_name(const std::string& name) {
    if (name == "none") return GuidanceMethod::None;
    if (name == "dpp") return GuidanceMethod::Dpp;
    if (name == "pg" || name == "particle_guidance") return GuidanceMethod::ParticleGuidance;
    if (name == "ours") return GuidanceMethod::Ours;
    throw std::invalid_argument("unknown guidance method: " + name);
}

double median_offdiag(const Tensor& d) {
    if (d.rank() != 2 || d.dim(0) != d.dim(1)) throw std::invalid_argument("median_offdiag: square matrix expected");
    const int n = d.dim(0);
    if (n < 2) throw std::invalid_argument("median_offdiag: need at least two rows");
    std::vector<double> v;
    v.reserve(static_cast<std::size_t>(n) * (n - 1));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) v.push_back(d(i, j));
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    const double med = (v.size() % 2 == 1) ? v[m] : 0.5 * (v[m - 1] + v[m]);
    return std::max(med, 1e-12);
}

namespace {

Var assemble_square(Tape& tape, const std::vector<std::vector<Var>>& d) {
    const int n = static_cast<int>(d.size());
    std::vector<Var> rows;
    rows.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) rows.push_back(tape.reshape(tape.concat0(d[static_cast<std::size_t>(i)]), {1, n}));
    return tape.concat0(rows);
}

}  // namespace

Var pairwise_distance_matrix(Tape& tape, const std::vector<Var>& e) {
    const int n = static_cast<int>(e.size());
    if (n < 2) throw std::invalid_argument("pairwise_distance_matrix: need at least two samples");
    Var zero = tape.constant(Tensor::scalar(0.0));
    std::vector<std::vector<Var>> d(static_cast<std::size_t>(n), std::vector<Var>(static_cast<std::size_t>(n), zero));
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            Var diff = tape.sub(e[static_cast<std::size_t>(i)], e[static_cast<std::size_t>(j)]);
            Var s = tape.dot(diff, diff);
            d[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = s;
            d[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = s;
        }
    return assemble_square(tape, d);
}

Var frame_distance_matrix(Tape& tape, const std::vector<std::vector<Var>>& ef) {
    const int n = static_cast<int>(ef.size());
    if (n < 2) throw std::invalid_argument("frame_distance_matrix: need at least two samples");
    const std::size_t t = ef[0].size();
    if (t == 0) throw std::invalid_argument("frame_distance_matrix: no frames");
    Var zero = tape.constant(Tensor::scalar(0.0));
    std::vector<std::vector<Var>> d(static_cast<std::size_t>(n), std::vector<Var>(static_cast<std::size_t>(n), zero));
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            std::vector<Var> per_frame;
            per_frame.reserve(t);
            for (std::size_t k = 0; k < t; ++k) {
                Var diff = tape.sub(ef[static_cast<std::size_t>(i)][k], ef[static_cast<std::size_t>(j)][k]);
                per_frame.push_back(tape.dot(diff, diff));
            }
            Var s = tape.scale(tape.sum(tape.concat0(per_frame)), 1.0 / static_cast<double>(t));
            d[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = s;
            d[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = s;
        }
    return assemble_square(tape, d);
}

Var dpp_objective(Tape& tape, Var dist, double bandwidth, double jitter) {
    if (bandwidth <= 0.0) throw std::invalid_argument("dpp_objective: bandwidth must be positive");
    const int n = dist.value().dim(0);
    Tensor ridge({n, n});
    for (int i = 0; i < n; ++i) ridge(i, i) = jitter;
    Var kernel = tape.add(tape.exp(tape.scale(dist, -1.0 / bandwidth)), tape.constant(ridge));
    return tape.logdet_psd(kernel);
}

Var particle_guidance_objective(Tape& tape, Var dist, double sigma2) {
    if (sigma2 <= 0.0) throw std::invalid_argument("particle_guidance_objective: sigma2 must be positive");
    const int n = dist.value().dim(0);
    Tensor upper({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) upper(i, j) = 1.0;
    Var e = tape.exp(tape.scale(dist, -1.0 / sigma2));
    return tape.scale(tape.sum(tape.mul(e, tape.constant(upper))), -1.0);
}

Var consistency_objective(Tape& tape, const InterpolatorVars& p, Var latent) {
    const auto& sh = latent.value().shape();
    if (sh.size() != 4) throw std::invalid_argument("consistency_objective: latent must be [T,C,H,W]");
    if (sh[0] < 3) throw std::invalid_argument("consistency_objective: need at least three frames");
    const std::vector<int> fshape = {sh[1], sh[2], sh[3]};
    std::vector<Var> terms;
    for (int j = 1; j <= sh[0] - 2; ++j) {
        Var pred = interp_predict_on_tape(tape, p, latent, j);
        Var diff = tape.sub(pred, tape.reshape(tape.slice0(latent, j, j + 1), fshape));
        terms.push_back(tape.dot(diff, diff));
    }
    return tape.scale(tape.sum(tape.concat0(terms)), -1.0);
}

namespace {

Tensor row_copy(const Tensor& m, int r) {
    const int n = m.dim(1);
    Tensor out({n});
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j)] = m(r, j);
    return out;
}

}  // namespace

GuidanceStep guidance_step(const GuidanceContext& ctx, const std::vector<Tensor>& x_t,
                           const std::vector<Tensor>& v, double t, int cls) {
    const std::size_t n = x_t.size();
    if (v.size() != n) throw std::invalid_argument("guidance_step: state/velocity count mismatch");
    GuidanceStep out;
    out.u.resize(n);

    const bool guided =
        ctx.cfg.method != GuidanceMethod::None && ctx.cfg.gamma != 0.0 && n >= 2 && t < ctx.cfg.t_max;
    if (!guided) {
        for (std::size_t i = 0; i < n; ++i) out.u[i] = Tensor::zeros(x_t[i].shape());
        return out;
    }
    if (!ctx.models) throw std::invalid_argument("guidance_step: latent models required");
    const WorldDims& wd = ctx.models->m_v.world;
    const std::vector<int> lat_shape = wd.latent_shape();
    const int d_x = static_cast<int>(wd.latent_numel());

    Tape tape;
    std::vector<Var> xhat(n);
    Var x_rows_var;
    const bool through_velocity = !ctx.cfg.stop_gradient_through_velocity;
    if (through_velocity) {
        if (!ctx.flow) throw std::invalid_argument("guidance_step: flow model required to differentiate the velocity");
        Tensor rows({static_cast<int>(n), d_x});
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(x_t[i].data(), static_cast<std::size_t>(d_x), rows.data() + i * static_cast<std::size_t>(d_x));
        x_rows_var = tape.leaf(std::move(rows));
        Tensor feat_row = time_class_features(t, cls, ctx.flow->dims);
        Tensor feats({static_cast<int>(n), feat_row.dim(0)});
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(feat_row.data(), feat_row.size(), feats.data() + i * feat_row.size());
        FlowVars fv = push_flow_params(tape, *ctx.flow, false);
        Var vel = velocity_on_tape(tape, fv, x_rows_var, tape.constant(std::move(feats)));
        Var xh_rows = tape.add(x_rows_var, tape.scale(vel, 1.0 - t));
        for (std::size_t i = 0; i < n; ++i)
            xhat[i] = tape.reshape(tape.slice0(xh_rows, static_cast<int>(i), static_cast<int>(i) + 1), lat_shape);
    } else {
        for (std::size_t i = 0; i < n; ++i)
            xhat[i] = tape.leaf(extrapolate_x1(x_t[i], t, v[i]).reshaped(lat_shape));
    }

    // embeddings of the extrapolated terminals, projected off the prompt direction
    EmbedderVars mf = push_embedder(tape, ctx.models->m_f, false);
    Var dir_f = tape.constant(ctx.prompt_dir_f);
    std::vector<std::vector<Var>> ef(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<Var> rows = embed_frames_on_tape(tape, mf, xhat[i]);
        ef[i].reserve(rows.size());
        for (Var r : rows) ef[i].push_back(proj_orthogonal_on_tape(tape, r, dir_f, ctx.proj_stats));
    }
    Var dist;
    if (ctx.cfg.use_video_term) {
        EmbedderVars mv = push_embedder(tape, ctx.models->m_v, false);
        Var dir_v = tape.constant(ctx.prompt_dir_v);
        std::vector<Var> e_v;
        e_v.reserve(n);
        for (std::size_t i = 0; i < n; ++i)
            e_v.push_back(proj_orthogonal_on_tape(tape, embed_video_on_tape(tape, mv, xhat[i]), dir_v, ctx.proj_stats));
        dist = tape.scale(tape.add(pairwise_distance_matrix(tape, e_v), frame_distance_matrix(tape, ef)), 0.5);
    } else {
        dist = frame_distance_matrix(tape, ef);
    }

    const double bw = median_offdiag(dist.value());
    Var o_d = ctx.cfg.method == GuidanceMethod::ParticleGuidance
                  ? particle_guidance_objective(tape, dist, bw)
                  : dpp_objective(tape, dist, bw, ctx.cfg.jitter);
    out.trace.o_d = o_d.value().scalar_value();
    out.trace.has_o_d = true;

    InterpolatorVars iv = push_interpolator(tape, ctx.models->m_c, false);
    std::vector<Var> oc(n);
    for (std::size_t i = 0; i < n; ++i) {
        oc[i] = consistency_objective(tape, iv, xhat[i]);
        out.trace.o_c.push_back(oc[i].value().scalar_value());
    }

    tape.backward(o_d);
    std::vector<Tensor> g_d(n);
    for (std::size_t i = 0; i < n; ++i)
        g_d[i] = through_velocity ? row_copy(x_rows_var.grad(), static_cast<int>(i))
                                  : xhat[i].grad().reshaped({d_x});

    if (ctx.cfg.use_consistency_regulation) {
        tape.backward(tape.sum(tape.concat0(oc)));
        for (std::size_t i = 0; i < n; ++i) {
            Tensor g_c = through_velocity ? row_copy(x_rows_var.grad(), static_cast<int>(i))
                                          : xhat[i].grad().reshaped({d_x});
            RegulateResult rr = regulate_gradient(g_d[i], g_c);
            g_d[i] = std::move(rr.g);
            out.trace.alpha.push_back(rr.alpha);
            out.trace.reg_dot.push_back(dot(g_d[i], g_c));
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        const double gn = norm2(g_d[i]);
        const double vn = norm2(v[i]);
        if (gn < 1e-12 || vn == 0.0) {
            out.u[i] = Tensor::zeros({d_x});
            out.trace.u_ratio.push_back(0.0);
            continue;
        }
        out.u[i] = scaled(g_d[i], ctx.cfg.gamma * vn / gn);
        out.trace.u_ratio.push_back(norm2(out.u[i]) / vn);
    }
    return out;
}

}  // namespace dfl
