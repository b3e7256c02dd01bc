#include "dfl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "dfl/linalg.hpp"
#include "dfl/serialize.hpp"
#include "json.hpp"

namespace dfl {

VendiScore vendi_score(const Tensor& rows) {
    if (rows.rank() != 2) throw std::invalid_argument("vendi_score: embeddings must be [n, d]");
    const int n = rows.dim(0), d = rows.dim(1);
    if (n < 1) throw std::invalid_argument("vendi_score: need at least one embedding");
    std::vector<Tensor> e;
    e.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Tensor r({d});
        for (int j = 0; j < d; ++j) r[static_cast<std::size_t>(j)] = rows(i, j);
        e.push_back(unit_normalized(r));
    }
    Tensor s({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) s(i, j) = dot(e[static_cast<std::size_t>(i)], e[static_cast<std::size_t>(j)]) / n;
    EigResult eig = sym_eig(s);
    double entropy = 0.0;
    for (int i = 0; i < n; ++i) {
        const double lam = std::max(0.0, eig.values[static_cast<std::size_t>(i)]);
        if (lam > 0.0) entropy -= lam * std::log(lam);
    }
    VendiScore v;
    v.raw = std::exp(entropy);
    v.normalized = v.raw / n;
    return v;
}

double consistency_mse(const Tensor& video) {
    if (video.rank() != 4) throw std::invalid_argument("consistency_mse: video must be [T,C,H,W]");
    const int t = video.dim(0);
    if (t < 3) throw std::invalid_argument("consistency_mse: need at least three frames");
    const std::size_t fn = static_cast<std::size_t>(video.dim(1)) * video.dim(2) * video.dim(3);
    const double* p = video.data();
    double acc = 0.0;
    std::size_t count = 0;
    for (int j = 1; j <= t - 2; ++j) {
        const bool cubic = j >= 2 && j <= t - 3;
        const double* fm1 = p + (j - 1) * fn;
        const double* fp1 = p + (j + 1) * fn;
        const double* fm2 = cubic ? p + (j - 2) * fn : nullptr;
        const double* fp2 = cubic ? p + (j + 2) * fn : nullptr;
        const double* fj = p + j * fn;
        for (std::size_t k = 0; k < fn; ++k) {
            const double pred = cubic ? (-fm2[k] + 9.0 * fm1[k] + 9.0 * fp1[k] - fp2[k]) / 16.0
                                      : 0.5 * (fm1[k] + fp1[k]);
            const double diff = pred - fj[k];
            acc += diff * diff;
        }
        count += fn;
    }
    return acc / static_cast<double>(count);
}

RunsManifestInfo read_runs_manifest(const std::filesystem::path& runs_dir) {
    std::ifstream f(runs_dir / "manifest.json");
    if (!f) throw std::runtime_error("evaluate: no manifest at " + (runs_dir / "manifest.json").string());
    nlohmann::json j;
    f >> j;
    RunsManifestInfo m;
    m.reps = j.at("reps");
    m.n_samples = j.at("n_samples");
    m.classes = j.at("classes");
    for (const auto& jv : j.at("variants")) {
        VariantInfo v;
        v.name = jv.at("name");
        v.method = jv.at("method");
        v.use_video_term = jv.at("use_video_term");
        v.use_consistency_regulation = jv.at("use_consistency_regulation");
        m.variants.push_back(std::move(v));
    }
    if (m.variants.empty()) throw std::runtime_error("evaluate: manifest lists no variants");
    return m;
}

std::vector<RunMetrics> score_runs(const std::filesystem::path& runs_dir, const Dataset& ds,
                                   const RunsManifestInfo& manifest) {
    ReferenceEmbedder ref = ds.reference_embedder();
    const WorldDims& wd = ds.cfg.dims;
    std::vector<RunMetrics> runs;
    std::vector<std::string> missing;

    for (const auto& variant : manifest.variants) {
        for (int cls = 0; cls < manifest.classes; ++cls) {
            for (int rep = 0; rep < manifest.reps; ++rep) {
                const std::filesystem::path dir = runs_dir / variant.name / std::to_string(cls) / std::to_string(rep);
                std::vector<Tensor> videos;
                bool ok = true;
                for (int i = 0; i < manifest.n_samples; ++i) {
                    const std::filesystem::path p = dir / ("sample_" + std::to_string(i) + ".lat");
                    if (!std::filesystem::exists(p)) {
                        missing.push_back(p.string());
                        ok = false;
                        break;
                    }
                    videos.push_back(decode(load_tensor(p), wd));
                }
                if (!ok) continue;
                const int n = manifest.n_samples;
                Tensor ev_rows({n, ref.embed_dim()});
                std::vector<Tensor> ef;
                double mse_sum = 0.0;
                for (int i = 0; i < n; ++i) {
                    Tensor e = ref.embed_video(videos[static_cast<std::size_t>(i)]);
                    for (int k = 0; k < ref.embed_dim(); ++k) ev_rows(i, k) = e[static_cast<std::size_t>(k)];
                    ef.push_back(ref.embed_frames_grouped(videos[static_cast<std::size_t>(i)]));
                    mse_sum += consistency_mse(videos[static_cast<std::size_t>(i)]);
                }
                const VendiScore vv = vendi_score(ev_rows);
                double vf_raw = 0.0, vf_norm = 0.0;
                for (int j = 0; j < wd.t_lat; ++j) {
                    Tensor rows({n, ref.embed_dim()});
                    for (int i = 0; i < n; ++i)
                        for (int k = 0; k < ref.embed_dim(); ++k) rows(i, k) = ef[static_cast<std::size_t>(i)](j, k);
                    const VendiScore v = vendi_score(rows);
                    vf_raw += v.raw;
                    vf_norm += v.normalized;
                }
                RunMetrics rm;
                rm.variant = variant.name;
                rm.cls = cls;
                rm.rep = rep;
                rm.vendi_v_raw = vv.raw;
                rm.vendi_v_normalized = vv.normalized;
                rm.vendi_f_raw = vf_raw / wd.t_lat;
                rm.vendi_f_normalized = vf_norm / wd.t_lat;
                rm.mse = mse_sum / n;
                runs.push_back(std::move(rm));
            }
        }
    }

    if (!missing.empty()) {
        std::string msg = "evaluate: missing runs:";
        const std::size_t show = std::min<std::size_t>(missing.size(), 10);
        for (std::size_t i = 0; i < show; ++i) msg += " " + missing[i];
        if (missing.size() > show) msg += " (+" + std::to_string(missing.size() - show) + " more)";
        throw std::runtime_error(msg);
    }
    return runs;
}

EvaluateResult aggregate_runs(const std::vector<RunMetrics>& runs, const RunsManifestInfo& manifest) {
    EvaluateResult res;
    res.runs = runs;
    res.reps = manifest.reps;
    res.n_samples = manifest.n_samples;

    for (const auto& variant : manifest.variants) {
        MethodAggregate agg;
        agg.info = variant;
        const auto reps = static_cast<std::size_t>(manifest.reps);
        std::vector<double> vv(reps, 0.0), vvn(reps, 0.0), vf(reps, 0.0), vfn(reps, 0.0), mse(reps, 0.0);
        std::vector<int> counts(reps, 0);
        for (const auto& r : runs) {
            if (r.variant != variant.name) continue;
            if (r.rep < 0 || r.rep >= manifest.reps) throw std::runtime_error("aggregate: rep index out of range");
            const auto k = static_cast<std::size_t>(r.rep);
            vv[k] += r.vendi_v_raw;
            vvn[k] += r.vendi_v_normalized;
            vf[k] += r.vendi_f_raw;
            vfn[k] += r.vendi_f_normalized;
            mse[k] += r.mse;
            ++counts[k];
        }
        for (std::size_t k = 0; k < reps; ++k)
            if (counts[k] != manifest.classes)
                throw std::runtime_error("aggregate: variant " + variant.name + " rep " + std::to_string(k) +
                                         " has " + std::to_string(counts[k]) + " runs, expected " +
                                         std::to_string(manifest.classes));
        auto finish = [&](std::vector<double> sums) {
            for (auto& v : sums) v /= manifest.classes;
            MetricSeries s;
            s.per_rep = std::move(sums);
            s.stats = mean_ci(s.per_rep);
            return s;
        };
        agg.vendi_v_raw = finish(std::move(vv));
        agg.vendi_v_normalized = finish(std::move(vvn));
        agg.vendi_f_raw = finish(std::move(vf));
        agg.vendi_f_normalized = finish(std::move(vfn));
        agg.mse = finish(std::move(mse));
        res.methods.push_back(std::move(agg));
    }
    return res;
}

EvaluateResult evaluate_runs(const std::filesystem::path& runs_dir, const Dataset& ds) {
    const RunsManifestInfo manifest = read_runs_manifest(runs_dir);
    return aggregate_runs(score_runs(runs_dir, ds, manifest), manifest);
}

void write_runs_csv(const std::filesystem::path& path, const std::vector<RunMetrics>& runs) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("report: cannot write " + path.string());
    f << "variant,class,rep,vendi_v_raw,vendi_v_normalized,vendi_f_raw,vendi_f_normalized,consistency_mse\n";
    char buf[256];
    for (const auto& r : runs) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.variant.c_str(), r.cls, r.rep,
                      r.vendi_v_raw, r.vendi_v_normalized, r.vendi_f_raw, r.vendi_f_normalized, r.mse);
        f << buf;
    }
}

std::vector<RunMetrics> load_runs_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("report: cannot read " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("report: empty runs csv " + path.string());
    std::vector<RunMetrics> runs;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 8) throw std::runtime_error("report: malformed runs csv row: " + line);
        RunMetrics r;
        r.variant = fields[0];
        r.cls = std::stoi(fields[1]);
        r.rep = std::stoi(fields[2]);
        r.vendi_v_raw = std::stod(fields[3]);
        r.vendi_v_normalized = std::stod(fields[4]);
        r.vendi_f_raw = std::stod(fields[5]);
        r.vendi_f_normalized = std::stod(fields[6]);
        r.mse = std::stod(fields[7]);
        runs.push_back(std::move(r));
    }
    return runs;
}

namespace {

std::string fmt_or_na(double v, bool present) {
    if (!present) return "na";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

nlohmann::json series_json(const MetricSeries& s) {
    nlohmann::json j;
    j["mean"] = s.stats.mean;
    j["n"] = s.stats.n;
    if (s.stats.defined) {
        j["ci_half_width"] = s.stats.half_width;
        j["ci_lo"] = s.stats.lo;
        j["ci_hi"] = s.stats.hi;
    } else {
        j["ci_half_width"] = nullptr;
        j["ci_lo"] = nullptr;
        j["ci_hi"] = nullptr;
    }
    j["per_rep"] = s.per_rep;
    return j;
}

nlohmann::json test_json(const PairedTest& t) {
    nlohmann::json j;
    j["p_value"] = t.p_value;
    j["mean_diff"] = t.mean_diff;
    j["n"] = t.n;
    j["defined"] = t.defined;
    if (t.defined) j["t_stat"] = t.t_stat;
    return j;
}

const MethodAggregate* find_method(const EvaluateResult& res, const std::string& name) {
    for (const auto& m : res.methods)
        if (m.info.name == name) return &m;
    return nullptr;
}

const MethodAggregate* find_iid(const EvaluateResult& res) {
    for (const auto& m : res.methods)
        if (m.info.method == "none") return &m;
    return nullptr;
}

}  // namespace

void write_summary_reports(const std::filesystem::path& out_dir, const EvaluateResult& res) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    char buf[512];

    const MethodAggregate* iid = find_iid(res);
    const MethodAggregate* dpp = find_method(res, "dpp");
    const MethodAggregate* ours = find_method(res, "ours");

    {
        std::ofstream f(out_dir / "main.csv");
        if (!f) throw std::runtime_error("report: cannot write main.csv");
        f << "method,n_reps,vendi_v_raw_mean,vendi_v_raw_hw,vendi_v_normalized_mean,vendi_v_normalized_hw,"
             "vendi_f_raw_mean,vendi_f_raw_hw,vendi_f_normalized_mean,vendi_f_normalized_hw,"
             "consistency_mse_mean,consistency_mse_hw,p_vendi_v_vs_iid,p_vendi_f_vs_iid,note\n";
        for (const auto& m : res.methods) {
            std::string p_vv = "na", p_vf = "na";
            if (iid && &m != iid) {
                p_vv = fmt_or_na(paired_one_sided_p(m.vendi_v_raw.per_rep, iid->vendi_v_raw.per_rep).p_value, true);
                p_vf = fmt_or_na(paired_one_sided_p(m.vendi_f_raw.per_rep, iid->vendi_f_raw.per_rep).p_value, true);
            }
            const char* note = m.info.method == "dpp" ? "diverseflow=approximated-by-dpp" : "";
            std::snprintf(buf, sizeof(buf), "%s,%d,%.10g,%s,%.10g,%s,%.10g,%s,%.10g,%s,%.10g,%s,%s,%s,%s\n",
                          m.info.name.c_str(), m.vendi_v_raw.stats.n, m.vendi_v_raw.stats.mean,
                          fmt_or_na(m.vendi_v_raw.stats.half_width, m.vendi_v_raw.stats.defined).c_str(),
                          m.vendi_v_normalized.stats.mean,
                          fmt_or_na(m.vendi_v_normalized.stats.half_width, m.vendi_v_normalized.stats.defined).c_str(),
                          m.vendi_f_raw.stats.mean,
                          fmt_or_na(m.vendi_f_raw.stats.half_width, m.vendi_f_raw.stats.defined).c_str(),
                          m.vendi_f_normalized.stats.mean,
                          fmt_or_na(m.vendi_f_normalized.stats.half_width, m.vendi_f_normalized.stats.defined).c_str(),
                          m.mse.stats.mean, fmt_or_na(m.mse.stats.half_width, m.mse.stats.defined).c_str(),
                          p_vv.c_str(), p_vf.c_str(), note);
            f << buf;
        }
    }

    nlohmann::json jmain;
    for (const auto& m : res.methods) {
        nlohmann::json jm;
        jm["name"] = m.info.name;
        jm["method"] = m.info.method;
        jm["use_video_term"] = m.info.use_video_term;
        jm["use_consistency_regulation"] = m.info.use_consistency_regulation;
        jm["vendi_v_raw"] = series_json(m.vendi_v_raw);
        jm["vendi_v_normalized"] = series_json(m.vendi_v_normalized);
        jm["vendi_f_raw"] = series_json(m.vendi_f_raw);
        jm["vendi_f_normalized"] = series_json(m.vendi_f_normalized);
        jm["consistency_mse"] = series_json(m.mse);
        if (iid && &m != iid) {
            jm["vs_iid"]["vendi_v_raw"] = test_json(paired_one_sided_p(m.vendi_v_raw.per_rep, iid->vendi_v_raw.per_rep));
            jm["vs_iid"]["vendi_f_raw"] = test_json(paired_one_sided_p(m.vendi_f_raw.per_rep, iid->vendi_f_raw.per_rep));
        }
        jmain["methods"].push_back(jm);
    }
    if (iid && dpp && ours) {
        const double denom = dpp->mse.stats.mean - iid->mse.stats.mean;
        if (denom > 0.0)
            jmain["comparisons"]["mse_gap_recovery_ours_vs_dpp"] = (dpp->mse.stats.mean - ours->mse.stats.mean) / denom;
        else
            jmain["comparisons"]["mse_gap_recovery_ours_vs_dpp"] = nullptr;
        jmain["comparisons"]["p_mse_ours_lt_dpp"] = test_json(paired_one_sided_p(dpp->mse.per_rep, ours->mse.per_rep));
        jmain["comparisons"]["p_vendi_v_ours_lt_dpp"] =
            test_json(paired_one_sided_p(dpp->vendi_v_raw.per_rep, ours->vendi_v_raw.per_rep));
    }
    jmain["notes"]["diverseflow"] = "approximated-by-dpp";
    jmain["notes"]["oracle"] = "cubic";
    jmain["reps"] = res.reps;
    jmain["n_samples"] = res.n_samples;
    {
        std::ofstream f(out_dir / "main.json");
        if (!f) throw std::runtime_error("report: cannot write main.json");
        f << jmain.dump(2) << "\n";
    }

    {
        std::ofstream f(out_dir / "ablation.csv");
        if (!f) throw std::runtime_error("report: cannot write ablation.csv");
        f << "name,use_video_term,use_consistency_regulation,n_reps,vendi_v_raw_mean,vendi_v_raw_hw,"
             "vendi_f_raw_mean,vendi_f_raw_hw,consistency_mse_mean,consistency_mse_hw\n";
        for (const auto& m : res.methods) {
            if (m.info.method != "dpp" && m.info.method != "ours") continue;
            std::snprintf(buf, sizeof(buf), "%s,%d,%d,%d,%.10g,%s,%.10g,%s,%.10g,%s\n", m.info.name.c_str(),
                          m.info.use_video_term ? 1 : 0, m.info.use_consistency_regulation ? 1 : 0,
                          m.vendi_v_raw.stats.n, m.vendi_v_raw.stats.mean,
                          fmt_or_na(m.vendi_v_raw.stats.half_width, m.vendi_v_raw.stats.defined).c_str(),
                          m.vendi_f_raw.stats.mean,
                          fmt_or_na(m.vendi_f_raw.stats.half_width, m.vendi_f_raw.stats.defined).c_str(),
                          m.mse.stats.mean, fmt_or_na(m.mse.stats.half_width, m.mse.stats.defined).c_str());
            f << buf;
        }
    }
    nlohmann::json jabl;
    for (const auto& m : res.methods) {
        if (m.info.method != "dpp" && m.info.method != "ours") continue;
        nlohmann::json jm;
        jm["name"] = m.info.name;
        jm["use_video_term"] = m.info.use_video_term;
        jm["use_consistency_regulation"] = m.info.use_consistency_regulation;
        jm["vendi_v_raw"] = series_json(m.vendi_v_raw);
        jm["vendi_f_raw"] = series_json(m.vendi_f_raw);
        jm["consistency_mse"] = series_json(m.mse);
        jabl["rows"].push_back(jm);
    }
    jabl["notes"]["diverseflow"] = "approximated-by-dpp";
    jabl["notes"]["oracle"] = "cubic";
    {
        std::ofstream f(out_dir / "ablation.json");
        if (!f) throw std::runtime_error("report: cannot write ablation.json");
        f << jabl.dump(2) << "\n";
    }
}

void write_metric_reports(const std::filesystem::path& out_dir, const EvaluateResult& res) {
    std::filesystem::create_directories(out_dir);
    write_runs_csv(out_dir / "runs.csv", res.runs);
    write_summary_reports(out_dir, res);
}

}  // namespace dfl
