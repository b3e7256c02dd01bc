#include "dfl/sampler.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace dfl {

namespace {

Tensor row_copy(const Tensor& m, int r) {
    const int n = m.dim(1);
    Tensor out({n});
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j)] = m(r, j);
    return out;
}

void append_cell(std::string& line, double v, bool present) {
    char buf[40];
    if (present) {
        std::snprintf(buf, sizeof(buf), ",%.17g", v);
        line += buf;
    } else {
        line += ",na";
    }
}

}  // namespace

ClassPrompts make_class_prompts(const LatentModels& models, const Dataset& ds, int cls) {
    const int ni = ds.cfg.ref_embed_dim;
    ClassPrompts p;
    p.dir_v = matmul(models.a_v.masked(), ds.prompt_video_embedding(cls).reshaped({ni, 1}))
                  .reshaped({models.m_v.embed_dim});
    p.dir_f = matmul(models.a_f.masked(), ds.prompt_frame_embedding(cls).reshaped({ni, 1}))
                  .reshaped({models.m_f.embed_dim});
    return p;
}

JointSampleResult joint_sample(const VelocityField& flow, const LatentModels* models, const ClassPrompts* prompts,
                               int cls, const SamplerConfig& cfg, std::uint64_t noise_seed,
                               ProjStats* proj_stats) {
    const int n = cfg.n_samples;
    const int steps = cfg.n_steps;
    if (n < 1) throw std::invalid_argument("joint_sample: n_samples must be positive");
    if (steps < 1) throw std::invalid_argument("joint_sample: n_steps must be positive");
    const int d = flow.dims.d_x();

    Rng base(noise_seed);
    Tensor x({n, d});
    for (int i = 0; i < n; ++i) {
        Rng ri = base.split(static_cast<std::uint64_t>(i));
        for (int e = 0; e < d; ++e) x(i, e) = ri.normal();
    }

    const bool run_guided = cfg.guidance.method != GuidanceMethod::None && cfg.guidance.gamma != 0.0 && n >= 2;
    GuidanceContext ctx;
    if (run_guided) {
        if (!models || !prompts) throw std::invalid_argument("joint_sample: guidance needs latent models and prompts");
        ctx.cfg = cfg.guidance;
        ctx.flow = &flow;
        ctx.models = models;
        ctx.prompt_dir_v = prompts->dir_v;
        ctx.prompt_dir_f = prompts->dir_f;
        ctx.proj_stats = proj_stats;
    }

    const double dt = 1.0 / steps;
    JointSampleResult res;
    res.trace.reserve(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k) {
        const double t = static_cast<double>(k) / steps;
        Tensor v = velocity_rows(flow, x, t, cls);
        TraceRow row;
        row.step = k;
        row.t = t;
        if (run_guided) {
            std::vector<Tensor> xs(static_cast<std::size_t>(n)), vs(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) {
                xs[static_cast<std::size_t>(i)] = row_copy(x, i);
                vs[static_cast<std::size_t>(i)] = row_copy(v, i);
            }
            GuidanceStep gs = guidance_step(ctx, xs, vs, t, cls);
            row.trace = std::move(gs.trace);
            for (int i = 0; i < n; ++i) {
                const Tensor& u = gs.u[static_cast<std::size_t>(i)];
                for (int e = 0; e < d; ++e) x(i, e) += dt * (v(i, e) + u[static_cast<std::size_t>(e)]);
            }
        } else {
            axpy(dt, v, x);
        }
        if (!x.all_finite())
            throw std::runtime_error("joint_sample: non-finite state after step " + std::to_string(k));
        res.trace.push_back(std::move(row));
    }

    res.samples.reserve(static_cast<std::size_t>(n));
    const std::vector<int> lat_shape = flow.dims.world.latent_shape();
    for (int i = 0; i < n; ++i) res.samples.push_back(row_copy(x, i).reshaped(lat_shape));
    return res;
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& rows, int n_samples) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "step,t,o_d";
    for (int i = 0; i < n_samples; ++i) f << ",o_c_" << i;
    for (int i = 0; i < n_samples; ++i) f << ",alpha_" << i;
    for (int i = 0; i < n_samples; ++i) f << ",reg_dot_" << i;
    for (int i = 0; i < n_samples; ++i) f << ",u_ratio_" << i;
    f << "\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g", r.step, r.t);
        std::string line = buf;
        append_cell(line, r.trace.o_d, r.trace.has_o_d);
        const auto n = static_cast<std::size_t>(n_samples);
        for (std::size_t i = 0; i < n; ++i) append_cell(line, i < r.trace.o_c.size() ? r.trace.o_c[i] : 0.0, i < r.trace.o_c.size());
        for (std::size_t i = 0; i < n; ++i) append_cell(line, i < r.trace.alpha.size() ? r.trace.alpha[i] : 0.0, i < r.trace.alpha.size());
        for (std::size_t i = 0; i < n; ++i) append_cell(line, i < r.trace.reg_dot.size() ? r.trace.reg_dot[i] : 0.0, i < r.trace.reg_dot.size());
        for (std::size_t i = 0; i < n; ++i) append_cell(line, i < r.trace.u_ratio.size() ? r.trace.u_ratio[i] : 0.0, i < r.trace.u_ratio.size());
        f << line << "\n";
    }
}

GenerateSummary batch_generate(const std::filesystem::path& runs_dir, const VelocityField& flow,
                               const LatentModels& models, const Dataset& ds, const GenerateConfig& cfg,
                               const std::map<std::string, std::string>& provenance) {
    namespace fs = std::filesystem;
    if (cfg.variants.empty()) throw std::invalid_argument("batch_generate: no variants");
    if (cfg.reps < 1) throw std::invalid_argument("batch_generate: reps must be positive");
    fs::create_directories(runs_dir);

    nlohmann::json manifest;
    manifest["seed"] = cfg.seed;
    manifest["reps"] = cfg.reps;
    manifest["n_samples"] = cfg.n_samples;
    manifest["n_steps"] = cfg.n_steps;
    manifest["classes"] = ds.cfg.classes;
    for (const auto& v : cfg.variants) {
        nlohmann::json jv;
        jv["name"] = v.name;
        jv["method"] = method_name(v.guidance.method);
        jv["use_video_term"] = v.guidance.use_video_term;
        jv["use_consistency_regulation"] = v.guidance.use_consistency_regulation;
        jv["gamma"] = v.guidance.gamma;
        jv["jitter"] = v.guidance.jitter;
        jv["t_max"] = v.guidance.t_max;
        jv["stop_gradient_through_velocity"] = v.guidance.stop_gradient_through_velocity;
        jv["run_seed_base"] = seed_combine(seed_combine(cfg.seed, "run"), v.name);
        manifest["variants"].push_back(jv);
    }
    for (const auto& [k, val] : provenance) manifest["provenance"][k] = val;

    std::vector<ClassPrompts> prompts;
    prompts.reserve(static_cast<std::size_t>(ds.cfg.classes));
    for (int c = 0; c < ds.cfg.classes; ++c) prompts.push_back(make_class_prompts(models, ds, c));

    GenerateSummary summary;
    ProjStats pstats;
    const std::uint64_t noise_base = seed_combine(cfg.seed, "sample-noise");
    for (const auto& variant : cfg.variants) {
        SamplerConfig scfg;
        scfg.n_samples = cfg.n_samples;
        scfg.n_steps = cfg.n_steps;
        scfg.guidance = variant.guidance;
        for (int cls = 0; cls < ds.cfg.classes; ++cls) {
            for (int rep = 0; rep < cfg.reps; ++rep) {
                const std::uint64_t noise_seed =
                    seed_combine(seed_combine(noise_base, static_cast<std::uint64_t>(cls)),
                                 static_cast<std::uint64_t>(rep));
                JointSampleResult r = joint_sample(flow, &models, &prompts[static_cast<std::size_t>(cls)], cls,
                                                   scfg, noise_seed, &pstats);
                const fs::path dir = runs_dir / variant.name / std::to_string(cls) / std::to_string(rep);
                fs::create_directories(dir);
                for (std::size_t i = 0; i < r.samples.size(); ++i)
                    save_tensor(dir / ("sample_" + std::to_string(i) + ".lat"), r.samples[i]);
                write_trace_csv(dir / "trace.csv", r.trace, cfg.n_samples);
                ++summary.runs;
            }
            if (cfg.verbose)
                std::fprintf(stderr, "generate: %s class %d/%d done (%ld runs)\n", variant.name.c_str(), cls + 1,
                             ds.cfg.classes, summary.runs);
        }
    }
    summary.proj_degenerate = pstats.degenerate;
    manifest["proj_degenerate"] = summary.proj_degenerate;

    std::ofstream mf(runs_dir / "manifest.json");
    if (!mf) throw std::runtime_error("batch_generate: cannot write manifest");
    mf << manifest.dump(2) << "\n";
    return summary;
}

}  // namespace dfl
