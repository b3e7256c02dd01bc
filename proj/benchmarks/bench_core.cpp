// Microbenchmarks for the numerical hot paths: dense matmul at flow-MLP
// sizes, the embedder convolutions, the symmetric eigensolver behind the
// diversity metrics, and a full guided integration step at default scale.

#include <benchmark/benchmark.h>

#include <algorithm>

#include "dfl/flow.hpp"
#include "dfl/linalg.hpp"
#include "dfl/guidance.hpp"
#include "dfl/latent_models.hpp"
#include "dfl/metrics.hpp"

using namespace dfl;

namespace {

void bm_matmul_flow(benchmark::State& state) {
    Rng rng(1);
    const int n = 16, k = 640, m = 256;
    Tensor a = Tensor::randn({n, k}, rng);
    Tensor b = Tensor::randn({k, m}, rng);
    Tensor c({n, m});
    for (auto _ : state) {
        std::fill(c.data(), c.data() + c.size(), 0.0);  // mm_nn accumulates
        mm_nn(a.data(), b.data(), c.data(), n, k, m);
        benchmark::DoNotOptimize(c.data());
    }
}
BENCHMARK(bm_matmul_flow);

void bm_conv2d_forward(benchmark::State& state) {
    Rng rng(2);
    Tensor x = Tensor::randn({2, 8, 8}, rng);
    Tensor w = Tensor::randn({8, 2, 3, 3}, rng);
    Tensor b = Tensor::randn({8}, rng);
    for (auto _ : state) {
        Tensor y = conv2d(x, w, b);
        benchmark::DoNotOptimize(y.data());
    }
}
BENCHMARK(bm_conv2d_forward);

void bm_conv2d_backward(benchmark::State& state) {
    Rng rng(3);
    Tensor x = Tensor::randn({2, 8, 8}, rng);
    Tensor w = Tensor::randn({8, 2, 3, 3}, rng);
    Tensor gy = Tensor::randn({8, 8, 8}, rng);
    Tensor gx, gw, gb;
    for (auto _ : state) {
        conv2d_backward(x, w, gy, gx, gw, gb);
        benchmark::DoNotOptimize(gx.data());
    }
}
BENCHMARK(bm_conv2d_backward);

void bm_sym_eig_16(benchmark::State& state) {
    Rng rng(4);
    Tensor b = Tensor::randn({16, 16}, rng);
    Tensor m({16, 16});
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j) {
            double s = i == j ? 1.0 : 0.0;
            for (int k = 0; k < 16; ++k) s += b(i, k) * b(j, k) / 16.0;
            m(i, j) = s;
        }
    for (auto _ : state) {
        EigResult r = sym_eig(m);
        benchmark::DoNotOptimize(r.values.data());
    }
}
BENCHMARK(bm_sym_eig_16);

void bm_vendi_16x16(benchmark::State& state) {
    Rng rng(5);
    Tensor rows = Tensor::randn({16, 16}, rng);
    for (auto _ : state) {
        VendiScore v = vendi_score(rows);
        benchmark::DoNotOptimize(v.raw);
    }
}
BENCHMARK(bm_vendi_16x16);

void bm_velocity_rows(benchmark::State& state) {
    FlowDims fd;
    Rng rng(6);
    VelocityField flow = VelocityField::init(fd, rng);
    Tensor x = Tensor::randn({4, fd.d_x()}, rng);
    for (auto _ : state) {
        Tensor v = velocity_rows(flow, x, 0.5, 3);
        benchmark::DoNotOptimize(v.data());
    }
}
BENCHMARK(bm_velocity_rows);

void bm_guided_step(benchmark::State& state) {
    // one full diversity-guidance step at default scale: embeds 4 candidate
    // terminals at both levels, backprops the DPP objective and regulates
    WorldDims w;
    FlowDims fd;
    Rng rng(7);
    VelocityField flow = VelocityField::init(fd, rng);
    LatentModels models;
    models.m_v = LatentEmbedder::init(EmbedLevel::Video, w, 16, 8, rng);
    models.m_f = LatentEmbedder::init(EmbedLevel::Frame, w, 16, 8, rng);
    models.a_v = Alignment::init(16, 16, rng);
    models.a_f = Alignment::init(16, 16, rng);
    models.m_c = LatentInterpolator::init(w, 8, rng);

    GuidanceContext ctx;
    ctx.cfg.method = GuidanceMethod::Ours;
    ctx.flow = &flow;
    ctx.models = &models;
    ctx.prompt_dir_v = unit_normalized(Tensor::randn({16}, rng));
    ctx.prompt_dir_f = unit_normalized(Tensor::randn({16}, rng));

    std::vector<Tensor> x_t, v;
    for (int i = 0; i < 4; ++i) {
        x_t.push_back(Tensor::randn({static_cast<int>(w.latent_numel())}, rng));
        v.push_back(velocity_rows(flow, x_t.back().reshaped({1, fd.d_x()}), 0.5, 0).reshaped({fd.d_x()}));
    }
    for (auto _ : state) {
        GuidanceStep g = guidance_step(ctx, x_t, v, 0.5, 0);
        benchmark::DoNotOptimize(g.u.data());
    }
}
BENCHMARK(bm_guided_step);

void bm_consistency_objective(benchmark::State& state) {
    WorldDims w;
    Rng rng(8);
    LatentInterpolator mc = LatentInterpolator::init(w, 8, rng);
    Tensor lat = Tensor::randn(w.latent_shape(), rng);
    for (auto _ : state) {
        Tape tape;
        InterpolatorVars iv = push_interpolator(tape, mc, false);
        Var leaf = tape.leaf(lat);
        Var obj = consistency_objective(tape, iv, leaf);
        tape.backward(obj);
        benchmark::DoNotOptimize(leaf.grad().data());
    }
}
BENCHMARK(bm_consistency_objective);

}  // namespace

BENCHMARK_MAIN();
