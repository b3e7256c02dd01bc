#include "dfl/flow.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace dfl {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

VelocityField VelocityField::init(const FlowDims& dims, Rng& rng) {
    VelocityField v;
    v.dims = dims;
    const double s1 = 1.0 / std::sqrt(static_cast<double>(dims.d_x() + dims.d_f()));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(dims.hidden));
    v.params.set("w1x", scaled(Tensor::randn({dims.d_x(), dims.hidden}, rng), s1));
    v.params.set("w1f", scaled(Tensor::randn({dims.d_f(), dims.hidden}, rng), s1));
    v.params.set("b1", Tensor::zeros({dims.hidden}));
    v.params.set("w2", scaled(Tensor::randn({dims.hidden, dims.hidden}, rng), s2));
    v.params.set("b2", Tensor::zeros({dims.hidden}));
    v.params.set("w3", scaled(Tensor::randn({dims.hidden, dims.d_x()}, rng), s2));
    v.params.set("b3", Tensor::zeros({dims.d_x()}));
    return v;
}

VelocityField VelocityField::zeros(const FlowDims& dims) {
    VelocityField v;
    v.dims = dims;
    v.params.set("w1x", Tensor::zeros({dims.d_x(), dims.hidden}));
    v.params.set("w1f", Tensor::zeros({dims.d_f(), dims.hidden}));
    v.params.set("b1", Tensor::zeros({dims.hidden}));
    v.params.set("w2", Tensor::zeros({dims.hidden, dims.hidden}));
    v.params.set("b2", Tensor::zeros({dims.hidden}));
    v.params.set("w3", Tensor::zeros({dims.hidden, dims.d_x()}));
    v.params.set("b3", Tensor::zeros({dims.d_x()}));
    return v;
}

Tensor time_class_features(double t, int cls, const FlowDims& dims) {
    if (cls < 0 || cls >= dims.n_classes) {
        throw std::invalid_argument("time_class_features: class " + std::to_string(cls) + " outside [0," +
                                    std::to_string(dims.n_classes) + ")");
    }
    Tensor f({dims.d_f()});
    double freq = 1.0;
    for (int k = 0; k < dims.n_time; ++k) {
        f[static_cast<std::size_t>(k)] = std::sin(freq * t);
        freq *= 2.0;
    }
    f[static_cast<std::size_t>(dims.n_time + cls)] = 1.0;
    return f;
}

Tensor velocity_rows(const VelocityField& v, const Tensor& x_rows, double t, int cls) {
    const FlowDims& d = v.dims;
    if (x_rows.rank() != 2 || x_rows.dim(1) != d.d_x()) {
        throw std::invalid_argument("velocity_rows: expected [n," + std::to_string(d.d_x()) + "], got " +
                                    shape_str(x_rows.shape()));
    }
    const int n = x_rows.dim(0);
    const Tensor f = time_class_features(t, cls, d);
    const Tensor& w1x = v.params.at("w1x");
    const Tensor& w1f = v.params.at("w1f");
    const Tensor& b1 = v.params.at("b1");
    const Tensor& w2 = v.params.at("w2");
    const Tensor& b2 = v.params.at("b2");
    const Tensor& w3 = v.params.at("w3");
    const Tensor& b3 = v.params.at("b3");

    // feature contribution is shared by every row: r = f*w1f + b1
    Tensor r = b1;
    for (int k = 0; k < d.d_f(); ++k) {
        const double fk = f[static_cast<std::size_t>(k)];
        if (fk == 0.0) continue;
        const double* row = w1f.data() + static_cast<std::size_t>(k) * d.hidden;
        for (int h = 0; h < d.hidden; ++h) r[static_cast<std::size_t>(h)] += fk * row[h];
    }

    Tensor h1({n, d.hidden});
    mm_nn(x_rows.data(), w1x.data(), h1.data(), n, d.d_x(), d.hidden);
    for (int i = 0; i < n; ++i)
        for (int h = 0; h < d.hidden; ++h) h1(i, h) = std::tanh(h1(i, h) + r[static_cast<std::size_t>(h)]);

    Tensor h2({n, d.hidden});
    mm_nn(h1.data(), w2.data(), h2.data(), n, d.hidden, d.hidden);
    for (int i = 0; i < n; ++i)
        for (int h = 0; h < d.hidden; ++h) h2(i, h) = std::tanh(h2(i, h) + b2[static_cast<std::size_t>(h)]);

    Tensor out({n, d.d_x()});
    mm_nn(h2.data(), w3.data(), out.data(), n, d.hidden, d.d_x());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d.d_x(); ++j) out(i, j) += b3[static_cast<std::size_t>(j)];
    return out;
}

FlowVars push_flow_params(Tape& tape, const VelocityField& v, bool trainable) {
    FlowVars p;
    p.w1x = tape.leaf(v.params.at("w1x"), trainable);
    p.w1f = tape.leaf(v.params.at("w1f"), trainable);
    p.b1 = tape.leaf(v.params.at("b1"), trainable);
    p.w2 = tape.leaf(v.params.at("w2"), trainable);
    p.b2 = tape.leaf(v.params.at("b2"), trainable);
    p.w3 = tape.leaf(v.params.at("w3"), trainable);
    p.b3 = tape.leaf(v.params.at("b3"), trainable);
    return p;
}

Var velocity_on_tape(Tape& tape, const FlowVars& p, Var x_rows, Var features) {
    Var h1 = tape.tanh(tape.bias_add(tape.add(tape.matmul(x_rows, p.w1x), tape.matmul(features, p.w1f)), p.b1));
    Var h2 = tape.tanh(tape.bias_add(tape.matmul(h1, p.w2), p.b2));
    return tape.bias_add(tape.matmul(h2, p.w3), p.b3);
}

FlowTrainResult train_flow(const Dataset& ds, const FlowDims& dims, const FlowTrainConfig& cfg) {
    if (cfg.steps < 1 || cfg.batch < 1 || cfg.lr <= 0.0) {
        throw std::invalid_argument("train_flow: need steps >= 1, batch >= 1, lr > 0");
    }
    // load the training latents once, flattened
    struct Item {
        int cls;
        Tensor x1;
    };
    std::vector<Item> data;
    for (int c = 0; c < ds.cfg.classes; ++c) {
        for (int i = 0; i < ds.cfg.train_per_class; ++i) {
            data.push_back({c, ds.load_latent("train", c, i).reshaped({dims.d_x()})});
        }
    }
    if (data.empty()) throw std::runtime_error("train_flow: dataset has no training samples");

    Rng rng(seed_combine(cfg.seed, "train-flow"));
    FlowTrainResult res;
    res.model = VelocityField::init(dims, rng);
    ParamStore& params = res.model.params;
    ParamStore velocity;  // momentum buffers
    for (const auto& [name, t] : params) velocity.set(name, Tensor(t.shape()));
    ParamStore snapshot = params;

    const int B = cfg.batch;
    for (int step = 0; step < cfg.steps; ++step) {
        Tensor xt({B, dims.d_x()}), target({B, dims.d_x()}), feats({B, dims.d_f()});
        for (int b = 0; b < B; ++b) {
            const Item& it = data[static_cast<std::size_t>(rng.next_u64() % data.size())];
            const double t = rng.uniform();
            const Tensor f = time_class_features(t, it.cls, dims);
            for (int j = 0; j < dims.d_x(); ++j) {
                const double x0 = rng.normal();
                const double x1 = it.x1[static_cast<std::size_t>(j)];
                xt(b, j) = (1.0 - t) * x0 + t * x1;
                target(b, j) = x1 - x0;
            }
            for (int j = 0; j < dims.d_f(); ++j) feats(b, j) = f[static_cast<std::size_t>(j)];
        }

        Tape tape;
        FlowVars p = push_flow_params(tape, res.model, true);
        Var out = velocity_on_tape(tape, p, tape.constant(std::move(xt)), tape.constant(std::move(feats)));
        Var diff = tape.sub(out, tape.constant(std::move(target)));
        Var loss = tape.mean(tape.mul(diff, diff));
        const double loss_v = loss.value().scalar_value();
        res.loss_curve.push_back(loss_v);
        if (!std::isfinite(loss_v)) {
            params = snapshot;
            res.aborted_at = step;
            break;
        }
        tape.backward(loss);

        const double lr = cfg.lr * 0.5 * (1.0 + std::cos(kPi * step / cfg.steps));
        const Var grads[] = {p.w1x, p.w1f, p.b1, p.w2, p.b2, p.w3, p.b3};
        const char* names[] = {"w1x", "w1f", "b1", "w2", "b2", "w3", "b3"};
        for (int i = 0; i < 7; ++i) {
            Tensor& vel = velocity.at(names[i]);
            Tensor& prm = params.at(names[i]);
            const Tensor& g = grads[i].grad();
            for (std::size_t j = 0; j < prm.size(); ++j) {
                vel[j] = cfg.momentum * vel[j] - lr * g[j];
                prm[j] += vel[j];
            }
        }
        if (step % 25 == 0 && params.at("w1x").all_finite()) snapshot = params;
    }

    const std::size_t n = res.loss_curve.size();
    const std::size_t w = std::min<std::size_t>(100, n);
    double s = 0.0;
    for (std::size_t i = n - w; i < n; ++i) s += res.loss_curve[i];
    res.final_loss = (w > 0) ? s / static_cast<double>(w) : 0.0;
    return res;
}

Tensor euler_sample(const VelocityField& v, int cls, int n_steps, Rng& rng) {
    if (n_steps < 1) throw std::invalid_argument("euler_sample: need n_steps >= 1");
    const int d = v.dims.d_x();
    Tensor x = Tensor::randn({1, d}, rng);
    const double dt = 1.0 / n_steps;
    for (int k = 0; k < n_steps; ++k) {
        const double t = static_cast<double>(k) / n_steps;
        const Tensor vel = velocity_rows(v, x, t, cls);
        axpy(dt, vel, x);
        if (!x.all_finite()) {
            throw std::runtime_error("euler_sample: non-finite state at step " + std::to_string(k));
        }
    }
    return x.reshaped(v.dims.world.latent_shape());
}

Trajectory euler_trajectory(const VelocityField& v, int cls, int n_steps, Rng& rng) {
    if (n_steps < 1) throw std::invalid_argument("euler_trajectory: need n_steps >= 1");
    const int d = v.dims.d_x();
    Trajectory tr{Tensor({n_steps + 1, d}), Tensor({n_steps + 1, d})};
    Tensor x = Tensor::randn({1, d}, rng);
    const double dt = 1.0 / n_steps;
    for (int k = 0; k <= n_steps; ++k) {
        for (int j = 0; j < d; ++j) tr.states(k, j) = x[static_cast<std::size_t>(j)];
        if (k == n_steps) {
            for (int j = 0; j < d; ++j) tr.xhat1(k, j) = x[static_cast<std::size_t>(j)];
            break;
        }
        const double t = static_cast<double>(k) / n_steps;
        const Tensor vel = velocity_rows(v, x, t, cls);
        for (int j = 0; j < d; ++j) tr.xhat1(k, j) = x[static_cast<std::size_t>(j)] + (1.0 - t) * vel[static_cast<std::size_t>(j)];
        axpy(dt, vel, x);
        if (!x.all_finite()) {
            throw std::runtime_error("euler_trajectory: non-finite state at step " + std::to_string(k));
        }
    }
    return tr;
}

Tensor extrapolate_x1(const Tensor& x_t, double t, const Tensor& v_value) {
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("extrapolate_x1: t must lie in [0,1]");
    Tensor out = x_t;
    axpy(1.0 - t, v_value, out);
    return out;
}

namespace {

nlohmann::json flow_dims_json(const FlowDims& d) {
    return {{"t_lat", d.world.t_lat}, {"c_lat", d.world.c_lat}, {"h_lat", d.world.h_lat},
            {"w_lat", d.world.w_lat}, {"c_vid", d.world.c_vid}, {"h_vid", d.world.h_vid},
            {"w_vid", d.world.w_vid}, {"n_classes", d.n_classes}, {"n_time", d.n_time},
            {"hidden", d.hidden}};
}

FlowDims flow_dims_from_json(const nlohmann::json& j) {
    FlowDims d;
    d.world.t_lat = j.at("t_lat");
    d.world.c_lat = j.at("c_lat");
    d.world.h_lat = j.at("h_lat");
    d.world.w_lat = j.at("w_lat");
    d.world.c_vid = j.at("c_vid");
    d.world.h_vid = j.at("h_vid");
    d.world.w_vid = j.at("w_vid");
    d.n_classes = j.at("n_classes");
    d.n_time = j.at("n_time");
    d.hidden = j.at("hidden");
    return d;
}

void write_flow_sidecar(const VelocityField& v, const std::filesystem::path& base, const nlohmann::json& extra) {
    nlohmann::json j;
    j["dims"] = flow_dims_json(v.dims);
    j["parameters"] = v.params.total_elements();
    for (const auto& [k, val] : extra.items()) j[k] = val;
    std::ofstream f(base.string() + ".json");
    if (!f) throw std::runtime_error("save_flow: cannot write " + base.string() + ".json");
    f << j.dump(2) << "\n";
}

}  // namespace

void save_flow(const VelocityField& v, const std::filesystem::path& base) {
    v.params.save(base.string() + ".ckpt");
    write_flow_sidecar(v, base, {});
}

void save_flow(const FlowTrainResult& r, const std::filesystem::path& base) {
    r.model.params.save(base.string() + ".ckpt");
    nlohmann::json extra;
    extra["final_loss"] = r.final_loss;
    extra["steps_run"] = r.loss_curve.size();
    extra["aborted_at"] = r.aborted_at;
    write_flow_sidecar(r.model, base, extra);
    std::ofstream curve(base.string() + "_loss.csv");
    if (!curve) throw std::runtime_error("save_flow: cannot write " + base.string() + "_loss.csv");
    curve << "step,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < r.loss_curve.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.10g\n", i, r.loss_curve[i]);
        curve << buf;
    }
}

VelocityField load_flow(const std::filesystem::path& base) {
    std::ifstream f(base.string() + ".json");
    if (!f) throw std::runtime_error("load_flow: no sidecar at " + base.string() + ".json");
    nlohmann::json j;
    f >> j;
    VelocityField v;
    v.dims = flow_dims_from_json(j.at("dims"));
    v.params = ParamStore::load(base.string() + ".ckpt");
    return v;
}

}  // namespace dfl
