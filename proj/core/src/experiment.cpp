#include "dfl/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace dfl {

namespace fs = std::filesystem;

ExperimentConfig default_experiment_config() {
    ExperimentConfig c;
    c.variants = default_variant_grid(c);
    return c;
}

std::vector<VariantSpec> default_variant_grid(const ExperimentConfig& c) {
    auto base = [&](GuidanceMethod m, bool video, bool reg) {
        GuidanceConfig g;
        g.method = m;
        g.use_video_term = video;
        g.use_consistency_regulation = reg;
        g.gamma = c.gamma;
        g.jitter = c.jitter;
        g.t_max = c.t_max;
        g.stop_gradient_through_velocity = c.stop_gradient_through_velocity;
        return g;
    };
    return {
        {"iid", base(GuidanceMethod::None, true, false)},
        {"dpp", base(GuidanceMethod::Dpp, true, false)},
        {"pg", base(GuidanceMethod::ParticleGuidance, true, false)},
        {"ours", base(GuidanceMethod::Ours, true, true)},
        {"ours_frame_only", base(GuidanceMethod::Ours, false, true)},
        {"dpp_frame_only", base(GuidanceMethod::Dpp, false, false)},
    };
}

namespace {

void check_keys(const nlohmann::json& j, const char* section, std::initializer_list<const char*> allowed) {
    for (const auto& [key, val] : j.items()) {
        (void)val;
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok)
            throw std::invalid_argument("config: unknown key '" + key + "' in section '" + section + "'");
    }
}

nlohmann::json config_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["dataset"] = {{"classes", c.dataset.classes},
                    {"train_per_class", c.dataset.train_per_class},
                    {"test_per_class", c.dataset.test_per_class},
                    {"ref_embed_dim", c.dataset.ref_embed_dim},
                    {"world",
                     {{"t_lat", c.dataset.dims.t_lat},
                      {"c_lat", c.dataset.dims.c_lat},
                      {"h_lat", c.dataset.dims.h_lat},
                      {"w_lat", c.dataset.dims.w_lat},
                      {"c_vid", c.dataset.dims.c_vid},
                      {"h_vid", c.dataset.dims.h_vid},
                      {"w_vid", c.dataset.dims.w_vid}}}};
    j["flow"] = {{"steps", c.flow.steps},       {"batch", c.flow.batch},
                 {"lr", c.flow.lr},             {"momentum", c.flow.momentum},
                 {"hidden", c.flow_hidden},     {"time_features", c.flow_time_features}};
    j["latent"] = {{"embed_dim", c.latent.embed_dim},
                   {"conv_channels", c.latent.conv_channels},
                   {"stage_steps", c.latent.stage_steps},
                   {"batch", c.latent.batch},
                   {"lr", c.latent.lr},
                   {"lambda_s", c.latent.lambda_s},
                   {"target_sparsity", c.latent.target_sparsity},
                   {"sparsify_every", c.latent.sparsify_every},
                   {"interp_epochs", c.latent.interp_epochs},
                   {"interp_mu", c.latent.interp_mu},
                   {"bank_size", c.latent.bank_size}};
    nlohmann::json jv = nlohmann::json::array();
    for (const auto& v : c.variants)
        jv.push_back({{"name", v.name},
                      {"method", method_name(v.guidance.method)},
                      {"use_video_term", v.guidance.use_video_term},
                      {"use_consistency_regulation", v.guidance.use_consistency_regulation}});
    j["sampling"] = {{"reps", c.reps},
                     {"n_samples", c.n_samples},
                     {"n_steps", c.n_steps},
                     {"gamma", c.gamma},
                     {"jitter", c.jitter},
                     {"t_max", c.t_max},
                     {"stop_gradient_through_velocity", c.stop_gradient_through_velocity},
                     {"variants", jv}};
    j["eval"] = {{"steps", c.eval_steps}, {"bank", c.eval_bank}};
    j["verbose"] = c.verbose;
    return j;
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;  // defaults; variants resolved at the end
    check_keys(j, "top-level", {"seed", "dataset", "flow", "latent", "sampling", "eval", "verbose"});
    c.seed = j.value("seed", c.seed);
    c.verbose = j.value("verbose", c.verbose);
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        check_keys(d, "dataset", {"classes", "train_per_class", "test_per_class", "ref_embed_dim", "world"});
        c.dataset.classes = d.value("classes", c.dataset.classes);
        c.dataset.train_per_class = d.value("train_per_class", c.dataset.train_per_class);
        c.dataset.test_per_class = d.value("test_per_class", c.dataset.test_per_class);
        c.dataset.ref_embed_dim = d.value("ref_embed_dim", c.dataset.ref_embed_dim);
        if (d.contains("world")) {
            const auto& w = d.at("world");
            check_keys(w, "dataset.world", {"t_lat", "c_lat", "h_lat", "w_lat", "c_vid", "h_vid", "w_vid"});
            c.dataset.dims.t_lat = w.value("t_lat", c.dataset.dims.t_lat);
            c.dataset.dims.c_lat = w.value("c_lat", c.dataset.dims.c_lat);
            c.dataset.dims.h_lat = w.value("h_lat", c.dataset.dims.h_lat);
            c.dataset.dims.w_lat = w.value("w_lat", c.dataset.dims.w_lat);
            c.dataset.dims.c_vid = w.value("c_vid", c.dataset.dims.c_vid);
            c.dataset.dims.h_vid = w.value("h_vid", c.dataset.dims.h_vid);
            c.dataset.dims.w_vid = w.value("w_vid", c.dataset.dims.w_vid);
        }
    }
    if (j.contains("flow")) {
        const auto& f = j.at("flow");
        check_keys(f, "flow", {"steps", "batch", "lr", "momentum", "hidden", "time_features"});
        c.flow.steps = f.value("steps", c.flow.steps);
        c.flow.batch = f.value("batch", c.flow.batch);
        c.flow.lr = f.value("lr", c.flow.lr);
        c.flow.momentum = f.value("momentum", c.flow.momentum);
        c.flow_hidden = f.value("hidden", c.flow_hidden);
        c.flow_time_features = f.value("time_features", c.flow_time_features);
    }
    if (j.contains("latent")) {
        const auto& l = j.at("latent");
        check_keys(l, "latent",
                   {"embed_dim", "conv_channels", "stage_steps", "batch", "lr", "lambda_s", "target_sparsity",
                    "sparsify_every", "interp_epochs", "interp_mu", "bank_size"});
        c.latent.embed_dim = l.value("embed_dim", c.latent.embed_dim);
        c.latent.conv_channels = l.value("conv_channels", c.latent.conv_channels);
        c.latent.stage_steps = l.value("stage_steps", c.latent.stage_steps);
        c.latent.batch = l.value("batch", c.latent.batch);
        c.latent.lr = l.value("lr", c.latent.lr);
        c.latent.lambda_s = l.value("lambda_s", c.latent.lambda_s);
        c.latent.target_sparsity = l.value("target_sparsity", c.latent.target_sparsity);
        c.latent.sparsify_every = l.value("sparsify_every", c.latent.sparsify_every);
        c.latent.interp_epochs = l.value("interp_epochs", c.latent.interp_epochs);
        c.latent.interp_mu = l.value("interp_mu", c.latent.interp_mu);
        c.latent.bank_size = l.value("bank_size", c.latent.bank_size);
    }
    bool have_variants = false;
    nlohmann::json jvars;
    if (j.contains("sampling")) {
        const auto& s = j.at("sampling");
        check_keys(s, "sampling",
                   {"reps", "n_samples", "n_steps", "gamma", "jitter", "t_max",
                    "stop_gradient_through_velocity", "variants"});
        c.reps = s.value("reps", c.reps);
        c.n_samples = s.value("n_samples", c.n_samples);
        c.n_steps = s.value("n_steps", c.n_steps);
        c.gamma = s.value("gamma", c.gamma);
        c.jitter = s.value("jitter", c.jitter);
        c.t_max = s.value("t_max", c.t_max);
        c.stop_gradient_through_velocity =
            s.value("stop_gradient_through_velocity", c.stop_gradient_through_velocity);
        if (s.contains("variants")) {
            have_variants = true;
            jvars = s.at("variants");
        }
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        check_keys(e, "eval", {"steps", "bank"});
        if (e.contains("steps")) c.eval_steps = e.at("steps").get<std::vector<int>>();
        c.eval_bank = e.value("bank", c.eval_bank);
    }
    if (have_variants) {
        for (const auto& jv : jvars) {
            check_keys(jv, "sampling.variants[]",
                       {"name", "method", "use_video_term", "use_consistency_regulation"});
            VariantSpec v;
            v.name = jv.at("name");
            v.guidance.method = method_from_name(jv.at("method"));
            v.guidance.use_video_term = jv.value("use_video_term", true);
            v.guidance.use_consistency_regulation = jv.value("use_consistency_regulation", true);
            v.guidance.gamma = c.gamma;
            v.guidance.jitter = c.jitter;
            v.guidance.t_max = c.t_max;
            v.guidance.stop_gradient_through_velocity = c.stop_gradient_through_velocity;
            c.variants.push_back(std::move(v));
        }
        if (c.variants.empty()) throw std::invalid_argument("config: sampling.variants is empty");
    } else {
        c.variants = default_variant_grid(c);
    }
    return c;
}

std::string hash_hex(const std::string& s) {
    const std::uint64_t h = fnv1a64(s.data(), s.size());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

bool stage_done(const fs::path& out, const char* name, const std::string& input_hash) {
    std::ifstream f(out / "state" / (std::string(name) + ".json"));
    if (!f) return false;
    try {
        nlohmann::json j;
        f >> j;
        return j.value("input_hash", "") == input_hash;
    } catch (...) {
        return false;
    }
}

void mark_stage(const fs::path& out, const char* name, const std::string& input_hash) {
    fs::create_directories(out / "state");
    nlohmann::json j;
    j["input_hash"] = input_hash;
    std::ofstream f(out / "state" / (std::string(name) + ".json"));
    if (!f) throw std::runtime_error("cannot write stage state for " + std::string(name));
    f << j.dump(2) << "\n";
}

void log_stage(const ExperimentConfig& c, const char* stage, const char* what) {
    if (c.verbose) std::fprintf(stderr, "experiment: %s %s\n", stage, what);
}

}  // namespace

ExperimentConfig load_experiment_config(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot read " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("config: parse error in " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

void save_experiment_config(const ExperimentConfig& c, const fs::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("config: cannot write " + path.string());
    f << config_json(c).dump(2) << "\n";
}

Dataset stage_gen_data(const ExperimentConfig& c, const fs::path& out) {
    return build_dataset(out / "data", c.dataset, c.seed);
}

FlowTrainResult stage_train_flow(const ExperimentConfig& c, const fs::path& out, const Dataset& ds) {
    FlowDims dims;
    dims.world = c.dataset.dims;
    dims.n_classes = c.dataset.classes;
    dims.n_time = c.flow_time_features;
    dims.hidden = c.flow_hidden;
    FlowTrainConfig fc = c.flow;
    fc.seed = c.seed;
    FlowTrainResult r = train_flow(ds, dims, fc);
    fs::create_directories(out / "models");
    save_flow(r, out / "models" / "flow");
    if (c.verbose)
        std::fprintf(stderr, "train-flow: final loss %.6g over last steps (aborted_at=%d)\n", r.final_loss,
                     r.aborted_at);
    return r;
}

LatentModels stage_train_latent(const ExperimentConfig& c, const fs::path& out, const Dataset& ds,
                                const VelocityField& flow) {
    LatentTrainConfig lc = c.latent;
    lc.seed = c.seed;
    TrajectoryBank bank = TrajectoryBank::build(flow, ds, lc.bank_size, c.n_steps, seed_combine(c.seed, "latent-bank"));
    log_stage(c, "train-latent", "trajectory bank built");
    EmbedderTrainResult rv = train_embedder(EmbedLevel::Video, bank, ds, lc);
    if (c.verbose) std::fprintf(stderr, "train-latent: video embedder final loss %.6g\n", rv.final_loss);
    EmbedderTrainResult rf = train_embedder(EmbedLevel::Frame, bank, ds, lc);
    if (c.verbose) std::fprintf(stderr, "train-latent: frame embedder final loss %.6g\n", rf.final_loss);
    InterpolatorTrainResult ri = train_interpolator(bank, ds, lc);
    if (c.verbose) std::fprintf(stderr, "train-latent: interpolator final loss %.6g\n", ri.final_loss);

    const fs::path dir = out / "models" / "latent";
    fs::create_directories(dir);
    save_embedder(rv, dir / "embed_v");
    save_embedder(rf, dir / "embed_f");
    save_interpolator(ri, dir / "interp");

    LatentModels m;
    m.m_v = std::move(rv.model);
    m.a_v = std::move(rv.align);
    m.m_f = std::move(rf.model);
    m.a_f = std::move(rf.align);
    m.m_c = std::move(ri.model);

    const int bank_n = c.eval_bank > 0 ? c.eval_bank : c.dataset.classes * c.dataset.test_per_class;
    std::vector<LatentEvalRow> rows = eval_latent_models(m, flow, ds, c.eval_steps, bank_n, c.seed);
    write_latent_eval_csv(dir / "eval.csv", rows);
    log_stage(c, "train-latent", "baseline evaluation written");
    return m;
}

GenerateSummary stage_sample(const ExperimentConfig& c, const fs::path& out, const Dataset& ds,
                             const VelocityField& flow, const LatentModels& models) {
    GenerateConfig gc;
    gc.variants = c.variants.empty() ? default_variant_grid(c) : c.variants;
    gc.reps = c.reps;
    gc.n_samples = c.n_samples;
    gc.n_steps = c.n_steps;
    gc.seed = c.seed;
    gc.verbose = c.verbose;
    std::map<std::string, std::string> prov;
    for (const char* name : {"flow", "latent/embed_v", "latent/embed_f", "latent/interp"}) {
        const fs::path ck = out / "models" / (std::string(name) + ".ckpt");
        if (fs::exists(ck)) prov[std::string(name) + ".ckpt"] = file_hash_hex(ck);
    }
    return batch_generate(out / "runs", flow, models, ds, gc, prov);
}

std::vector<RunMetrics> stage_evaluate(const fs::path& out, const Dataset& ds) {
    const RunsManifestInfo manifest = read_runs_manifest(out / "runs");
    std::vector<RunMetrics> runs = score_runs(out / "runs", ds, manifest);
    fs::create_directories(out / "reports");
    write_runs_csv(out / "reports" / "runs.csv", runs);
    return runs;
}

void stage_report(const fs::path& out) {
    const RunsManifestInfo manifest = read_runs_manifest(out / "runs");
    std::vector<RunMetrics> runs = load_runs_csv(out / "reports" / "runs.csv");
    write_summary_reports(out / "reports", aggregate_runs(runs, manifest));
}

void run_experiment(const ExperimentConfig& config, const fs::path& out) {
    ExperimentConfig c = config;
    if (c.variants.empty()) c.variants = default_variant_grid(c);
    fs::create_directories(out);
    save_experiment_config(c, out / "config.json");
    const nlohmann::json jc = config_json(c);

    auto run_stage = [&](const char* name, const std::string& input_hash, bool outputs_exist, auto&& body) {
        if (stage_done(out, name, input_hash) && outputs_exist) {
            log_stage(c, name, "cached");
            return;
        }
        log_stage(c, name, "running");
        try {
            body();
        } catch (const std::exception& e) {
            throw std::runtime_error("stage " + std::string(name) + ": " + e.what());
        }
        mark_stage(out, name, input_hash);
    };

    const std::string h_data = hash_hex(jc.at("dataset").dump() + std::to_string(c.seed));
    Dataset ds;
    run_stage("gen-data", h_data, fs::exists(out / "data" / "manifest.json"), [&] { ds = stage_gen_data(c, out); });
    if (ds.classes.empty()) ds = load_dataset(out / "data");

    const std::string h_flow = hash_hex(h_data + jc.at("flow").dump());
    const fs::path flow_base = out / "models" / "flow";
    VelocityField flow;
    bool flow_loaded = false;
    run_stage("train-flow", h_flow,
              fs::exists(flow_base.string() + ".ckpt") && fs::exists(flow_base.string() + ".json"), [&] {
                  flow = stage_train_flow(c, out, ds).model;
                  flow_loaded = true;
              });
    if (!flow_loaded) flow = load_flow(flow_base);

    const fs::path lat_dir = out / "models" / "latent";
    const std::string h_lat = hash_hex(h_flow + file_hash_hex(flow_base.string() + ".ckpt") +
                                       jc.at("latent").dump() + jc.at("eval").dump() + std::to_string(c.n_steps));
    const bool lat_outputs = fs::exists(lat_dir / "embed_v.json") && fs::exists(lat_dir / "embed_f.json") &&
                             fs::exists(lat_dir / "interp.json") && fs::exists(lat_dir / "eval.csv");
    LatentModels models;
    bool models_loaded = false;
    run_stage("train-latent", h_lat, lat_outputs, [&] {
        models = stage_train_latent(c, out, ds, flow);
        models_loaded = true;
    });
    if (!models_loaded) models = load_latent_models(lat_dir);

    std::string ckpt_hashes;
    for (const char* name : {"latent/embed_v.ckpt", "latent/embed_f.ckpt", "latent/interp.ckpt"})
        ckpt_hashes += file_hash_hex(out / "models" / name);
    const std::string h_smp = hash_hex(h_lat + ckpt_hashes + jc.at("sampling").dump());
    run_stage("sample", h_smp, fs::exists(out / "runs" / "manifest.json"),
              [&] { stage_sample(c, out, ds, flow, models); });

    const std::string h_eval = hash_hex(h_smp + file_hash_hex(out / "runs" / "manifest.json"));
    run_stage("evaluate", h_eval, fs::exists(out / "reports" / "runs.csv"), [&] { stage_evaluate(out, ds); });

    const std::string h_rep = hash_hex(h_eval + file_hash_hex(out / "reports" / "runs.csv"));
    const bool rep_outputs = fs::exists(out / "reports" / "main.csv") && fs::exists(out / "reports" / "main.json") &&
                             fs::exists(out / "reports" / "ablation.csv") &&
                             fs::exists(out / "reports" / "ablation.json");
    run_stage("report", h_rep, rep_outputs, [&] { stage_report(out); });
}

}  // namespace dfl
