#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "dfl/guidance.hpp"
#include "doctest.h"

using namespace dfl;

namespace {

WorldDims tiny_world() {
    WorldDims w;
    w.t_lat = 4;
    w.c_lat = 2;
    w.h_lat = 4;
    w.w_lat = 4;
    w.h_vid = 8;
    w.w_vid = 8;
    return w;
}

struct TinyStack {
    FlowDims fd;
    VelocityField flow;
    LatentModels models;
    Tensor dir_v, dir_f;

    TinyStack() {
        fd.world = tiny_world();
        fd.n_classes = 2;
        fd.n_time = 4;
        fd.hidden = 16;
        Rng rng(41);
        flow = VelocityField::init(fd, rng);
        models.m_v = LatentEmbedder::init(EmbedLevel::Video, fd.world, 8, 4, rng);
        models.m_f = LatentEmbedder::init(EmbedLevel::Frame, fd.world, 8, 4, rng);
        models.a_v = Alignment::init(8, 8, rng);
        models.a_f = Alignment::init(8, 8, rng);
        models.m_c = LatentInterpolator::init(fd.world, 4, rng);
        dir_v = unit_normalized(Tensor::randn({8}, rng));
        dir_f = unit_normalized(Tensor::randn({8}, rng));
    }

    GuidanceContext context(GuidanceConfig cfg) const {
        GuidanceContext ctx;
        ctx.cfg = cfg;
        ctx.flow = &flow;
        ctx.models = &models;
        ctx.prompt_dir_v = dir_v;
        ctx.prompt_dir_f = dir_f;
        return ctx;
    }
};

}  // namespace

TEST_CASE("projection hand case and invariants") {
    Tensor a({2}, {1.0, 1.0});
    Tensor b({2}, {0.0, 2.0});
    Tensor p = proj_orthogonal(a, b);
    CHECK(p[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(0.0).epsilon(1e-15));

    Rng rng(1);
    ProjStats stats;
    for (int it = 0; it < 10000; ++it) {
        Tensor x = Tensor::randn({8}, rng);
        Tensor y = Tensor::randn({8}, rng);
        Tensor px = proj_orthogonal(x, y, &stats);
        CHECK(std::abs(dot(px, y)) < 1e-9);
        Tensor again = proj_orthogonal(px, y, &stats);
        for (std::size_t i = 0; i < px.size(); ++i) CHECK(again[i] == doctest::Approx(px[i]).epsilon(1e-9));
        CHECK(norm2(px) <= norm2(x) * (1.0 + 1e-12));
    }
    CHECK(stats.degenerate == 0);

    // direction too small: input returned unchanged and counted
    Tensor same = proj_orthogonal(a, Tensor({2}, {1e-13, 0.0}), &stats);
    CHECK(stats.degenerate == 1);
    CHECK(same[0] == a[0]);
    CHECK(same[1] == a[1]);
}

TEST_CASE("projection on tape matches the plain version and differentiates") {
    Rng rng(2);
    Tensor a = Tensor::randn({6}, rng);
    Tensor b = Tensor::randn({6}, rng);
    Tensor w = Tensor::randn({6}, rng);
    Tensor plain = proj_orthogonal(a, b);

    Tape tape;
    Var va = tape.leaf(a);
    Var vp = proj_orthogonal_on_tape(tape, va, tape.constant(b));
    for (std::size_t i = 0; i < plain.size(); ++i)
        CHECK(vp.value()[i] == doctest::Approx(plain[i]).epsilon(1e-14));

    Var root = tape.dot(vp, tape.constant(w));
    tape.backward(root);
    Tensor g = va.grad();
    const double eps = 1e-6;
    for (std::size_t i = 0; i < a.size(); ++i) {
        Tensor up = a, dn = a;
        up[i] += eps;
        dn[i] -= eps;
        const double fd = (dot(proj_orthogonal(up, b), w) - dot(proj_orthogonal(dn, b), w)) / (2 * eps);
        CHECK(g[i] == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("gradient regulation hand cases") {
    // conflicting: alpha = -1, component along g_c removed
    Tensor gd({2}, {1.0, -1.0});
    Tensor gc({2}, {0.0, 1.0});
    RegulateResult r = regulate_gradient(gd, gc);
    CHECK(r.regulated);
    CHECK(r.alpha == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(r.g[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(r.g[1] == doctest::Approx(0.0).epsilon(1e-15));

    // aligned: returned unchanged, bit for bit
    Tensor gd2({2}, {1.0, 0.5});
    RegulateResult r2 = regulate_gradient(gd2, gc);
    CHECK_FALSE(r2.regulated);
    CHECK(r2.alpha == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(r2.g[0] == gd2[0]);
    CHECK(r2.g[1] == gd2[1]);

    // vanishing consistency gradient: unchanged
    RegulateResult r3 = regulate_gradient(gd, Tensor({2}));
    CHECK_FALSE(r3.regulated);
    CHECK(r3.g[0] == gd[0]);
}

TEST_CASE("regulation invariants on random pairs") {
    Rng rng(3);
    for (int it = 0; it < 10000; ++it) {
        Tensor gd = Tensor::randn({8}, rng);
        Tensor gc = Tensor::randn({8}, rng);
        RegulateResult r = regulate_gradient(gd, gc);

        CHECK(dot(r.g, gc) >= -1e-9);
        CHECK(norm2(r.g) <= norm2(gd) * (1.0 + 1e-12));

        const bool aligned = dot(gd, gc) >= 0.0;
        CHECK(r.regulated == !aligned);
        if (aligned) {
            for (std::size_t i = 0; i < gd.size(); ++i) CHECK(r.g[i] == gd[i]);
        } else {
            double diff = 0;
            for (std::size_t i = 0; i < gd.size(); ++i) diff += std::abs(r.g[i] - gd[i]);
            CHECK(diff > 0);
        }

        // idempotence in value: re-regulating may fire on a ~1e-17 residual
        // dot product but must leave the vector unchanged to rounding
        RegulateResult rr = regulate_gradient(r.g, gc);
        for (std::size_t i = 0; i < gd.size(); ++i)
            CHECK(std::abs(rr.g[i] - r.g[i]) <= 1e-12 * std::max(1.0, std::abs(r.g[i])));
    }
}

TEST_CASE("median of off-diagonal entries") {
    Tensor d({3, 3}, {0, 1, 2, 1, 0, 5, 2, 5, 0});
    // off-diagonal multiset {1,2,1,2,5,5}, median = 2 (lower-middle average)
    CHECK(median_offdiag(d) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(median_offdiag(Tensor({2, 2}))== doctest::Approx(1e-12).epsilon(1e-15));
}

TEST_CASE("distance matrices against hand values") {
    Tape tape;
    Tensor e0({2}, {1.0, 0.0});
    Tensor e1({2}, {0.0, 1.0});
    std::vector<Var> e = {tape.constant(e0), tape.constant(e1)};
    Var d = pairwise_distance_matrix(tape, e);
    CHECK(d.value()(0, 0) == 0.0);
    CHECK(d.value()(0, 1) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(d.value()(1, 0) == doctest::Approx(2.0).epsilon(1e-15));

    // frame level: average of per-frame squared distances
    std::vector<std::vector<Var>> ef = {{tape.constant(e0), tape.constant(e0)},
                                        {tape.constant(e1), tape.constant(e0)}};
    Var df = frame_distance_matrix(tape, ef);
    CHECK(df.value()(0, 1) == doctest::Approx(1.0).epsilon(1e-15));  // (2 + 0) / 2
}

TEST_CASE("dpp objective on an identical pair hits the hand oracle") {
    Tape tape;
    Tensor e0({2}, {1.0, 0.0});
    std::vector<Var> e = {tape.constant(e0), tape.constant(e0)};
    Var dist = pairwise_distance_matrix(tape, e);
    const double bw = median_offdiag(dist.value());
    CHECK(bw == doctest::Approx(1e-12).epsilon(1e-15));  // identical pair floors the bandwidth
    Var od = dpp_objective(tape, dist, bw, 1e-3);
    // similarity matrix all ones; det((1+eps)^2 - 1) = 0.002001
    CHECK(od.value().scalar_value() == doctest::Approx(std::log(0.002001)).epsilon(1e-9));
    CHECK(od.value().scalar_value() == doctest::Approx(-6.2141).epsilon(1e-4));
}

TEST_CASE("particle guidance objective at the median distance") {
    Tape tape;
    Tensor e0({2}, {1.0, 0.0});
    Tensor e1({2}, {0.0, 1.0});
    std::vector<Var> e = {tape.constant(e0), tape.constant(e1)};
    Var dist = pairwise_distance_matrix(tape, e);
    const double s2 = median_offdiag(dist.value());
    CHECK(s2 == doctest::Approx(2.0).epsilon(1e-15));
    Var o = particle_guidance_objective(tape, dist, s2);
    CHECK(o.value().scalar_value() == doctest::Approx(-std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("dpp objective is invariant to a global distance rescale") {
    Rng rng(5);
    std::vector<Tensor> base;
    for (int i = 0; i < 4; ++i) base.push_back(unit_normalized(Tensor::randn({8}, rng)));

    auto objective = [&](double scale) {
        Tape tape;
        std::vector<Var> e;
        for (const auto& t : base) e.push_back(tape.constant(scaled(t, scale)));
        Var dist = pairwise_distance_matrix(tape, e);
        return dpp_objective(tape, dist, median_offdiag(dist.value()), 1e-3).value().scalar_value();
    };
    // scaling embeddings by c scales all squared distances by c^2; the median
    // bandwidth absorbs it
    CHECK(objective(1.0) == doctest::Approx(objective(3.0)).epsilon(1e-9));
}

TEST_CASE("objective gradients match finite differences with a frozen median") {
    Rng rng(6);
    for (int inst = 0; inst < 5; ++inst) {
        std::vector<Tensor> base;
        for (int i = 0; i < 3; ++i) base.push_back(Tensor::randn({6}, rng));

        // bandwidth computed once from the base point, reused on every evaluation
        double bw;
        {
            Tape t0;
            std::vector<Var> e;
            for (const auto& t : base) e.push_back(t0.constant(t));
            bw = median_offdiag(pairwise_distance_matrix(t0, e).value());
        }

        for (int which = 0; which < 2; ++which) {
            auto value = [&](const std::vector<Tensor>& pts) {
                Tape t2;
                std::vector<Var> e;
                for (const auto& t : pts) e.push_back(t2.constant(t));
                Var dist = pairwise_distance_matrix(t2, e);
                Var o = which == 0 ? dpp_objective(t2, dist, bw, 1e-3) : particle_guidance_objective(t2, dist, bw);
                return o.value().scalar_value();
            };

            Tape tape;
            std::vector<Var> e;
            for (const auto& t : base) e.push_back(tape.leaf(t));
            Var dist = pairwise_distance_matrix(tape, e);
            Var o = which == 0 ? dpp_objective(tape, dist, bw, 1e-3) : particle_guidance_objective(tape, dist, bw);
            tape.backward(o);

            const double eps = 1e-6;
            for (int i = 0; i < 3; ++i)
                for (std::size_t k = 0; k < base[static_cast<std::size_t>(i)].size(); ++k) {
                    std::vector<Tensor> up = base, dn = base;
                    up[static_cast<std::size_t>(i)][k] += eps;
                    dn[static_cast<std::size_t>(i)][k] -= eps;
                    const double fd = (value(up) - value(dn)) / (2 * eps);
                    const double an = e[static_cast<std::size_t>(i)].grad()[k];
                    CHECK(std::abs(an - fd) <= 1e-4 * std::max({1.0, std::abs(an), std::abs(fd)}));
                }
        }
    }
}

TEST_CASE("consistency objective value and gradient") {
    TinyStack s;
    Rng rng(7);
    Tensor lat = Tensor::randn(s.fd.world.latent_shape(), rng);

    Tape tape;
    InterpolatorVars iv = push_interpolator(tape, s.models.m_c, false);
    Var vl = tape.leaf(lat);
    Var oc = consistency_objective(tape, iv, vl);

    // hand value: negated sum of interior prediction residuals
    double expect = 0;
    const std::size_t per = s.fd.world.frame_numel();
    for (int j = 1; j + 1 < s.fd.world.t_lat; ++j) {
        Tensor pred = interp_predict(s.models.m_c, lat, j);
        for (std::size_t i = 0; i < per; ++i) {
            const double d = pred[i] - lat[j * per + i];
            expect -= d * d;
        }
    }
    CHECK(oc.value().scalar_value() == doctest::Approx(expect).epsilon(1e-10));

    tape.backward(oc);
    Tensor g = vl.grad();
    const double eps = 1e-5;
    auto value = [&](const Tensor& l) {
        Tape t2;
        InterpolatorVars iv2 = push_interpolator(t2, s.models.m_c, false);
        return consistency_objective(t2, iv2, t2.constant(l)).value().scalar_value();
    };
    Rng pick(8);
    for (int probe = 0; probe < 12; ++probe) {
        const std::size_t i = pick.next_u64() % lat.size();
        Tensor up = lat, dn = lat;
        up[i] += eps;
        dn[i] -= eps;
        const double fd = (value(up) - value(dn)) / (2 * eps);
        CHECK(std::abs(g[i] - fd) <= 1e-4 * std::max({1.0, std::abs(g[i]), std::abs(fd)}));
    }
}

TEST_CASE("identical batch members get identical diversity gradients") {
    TinyStack s;
    Rng rng(9);
    Tensor x = Tensor::randn({s.fd.d_x()}, rng);
    Tensor v = Tensor::randn({s.fd.d_x()}, rng);

    GuidanceConfig cfg;
    cfg.method = GuidanceMethod::Dpp;
    cfg.use_consistency_regulation = false;
    GuidanceStep gs = guidance_step(s.context(cfg), {x, x}, {v, v}, 0.3, 0);
    REQUIRE(gs.u.size() == 2);
    for (std::size_t i = 0; i < gs.u[0].size(); ++i)
        CHECK(gs.u[0][i] == doctest::Approx(gs.u[1][i]).epsilon(1e-12));
}

TEST_CASE("guidance step scaling, gating and trace") {
    TinyStack s;
    Rng rng(10);
    std::vector<Tensor> xs, vs;
    for (int i = 0; i < 3; ++i) {
        xs.push_back(Tensor::randn({s.fd.d_x()}, rng));
        vs.push_back(Tensor::randn({s.fd.d_x()}, rng));
    }

    GuidanceConfig cfg;
    cfg.method = GuidanceMethod::Ours;
    cfg.gamma = 0.7;
    GuidanceStep gs = guidance_step(s.context(cfg), xs, vs, 0.2, 1);
    REQUIRE(gs.u.size() == 3);
    CHECK(gs.trace.has_o_d);
    REQUIRE(gs.trace.o_c.size() == 3);
    REQUIRE(gs.trace.alpha.size() == 3);
    REQUIRE(gs.trace.reg_dot.size() == 3);
    REQUIRE(gs.trace.u_ratio.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(norm2(gs.u[static_cast<std::size_t>(i)]) ==
              doctest::Approx(0.7 * norm2(vs[static_cast<std::size_t>(i)])).epsilon(1e-9));
        CHECK(gs.trace.u_ratio[static_cast<std::size_t>(i)] == doctest::Approx(0.7).epsilon(1e-9));
        CHECK(gs.trace.reg_dot[static_cast<std::size_t>(i)] >= -1e-9);
        CHECK(std::isfinite(gs.trace.o_c[static_cast<std::size_t>(i)]));
    }

    // gamma = 0, t beyond t_max, or a single sample all disable guidance
    GuidanceConfig off = cfg;
    off.gamma = 0.0;
    GuidanceStep g0 = guidance_step(s.context(off), xs, vs, 0.2, 1);
    for (const auto& u : g0.u) CHECK(norm2(u) == 0.0);
    CHECK_FALSE(g0.trace.has_o_d);

    GuidanceConfig late = cfg;
    late.t_max = 0.5;
    GuidanceStep g1 = guidance_step(s.context(late), xs, vs, 0.6, 1);
    for (const auto& u : g1.u) CHECK(norm2(u) == 0.0);

    GuidanceStep g2 = guidance_step(s.context(cfg), {xs[0]}, {vs[0]}, 0.2, 1);
    CHECK(norm2(g2.u[0]) == 0.0);
}

TEST_CASE("guided step is permutation equivariant") {
    TinyStack s;
    Rng rng(11);
    std::vector<Tensor> xs, vs;
    for (int i = 0; i < 3; ++i) {
        xs.push_back(Tensor::randn({s.fd.d_x()}, rng));
        vs.push_back(Tensor::randn({s.fd.d_x()}, rng));
    }

    for (bool reg : {false, true}) {
        GuidanceConfig cfg;
        cfg.method = GuidanceMethod::Ours;
        cfg.use_consistency_regulation = reg;
        GuidanceStep a = guidance_step(s.context(cfg), xs, vs, 0.4, 0);
        GuidanceStep b = guidance_step(s.context(cfg), {xs[2], xs[0], xs[1]}, {vs[2], vs[0], vs[1]}, 0.4, 0);
        CHECK(a.trace.o_d == doctest::Approx(b.trace.o_d).epsilon(1e-9));
        const int perm[3] = {2, 0, 1};
        for (int i = 0; i < 3; ++i) {
            const Tensor& ua = a.u[static_cast<std::size_t>(perm[i])];
            const Tensor& ub = b.u[static_cast<std::size_t>(i)];
            for (std::size_t k = 0; k < ua.size(); ++k)
                CHECK(std::abs(ua[k] - ub[k]) <= 1e-9 * std::max(1.0, std::abs(ua[k])));
        }
    }
}

TEST_CASE("velocity-coupled gradients stay finite and scale correctly") {
    TinyStack s;
    Rng rng(12);
    std::vector<Tensor> xs, vs;
    for (int i = 0; i < 2; ++i) {
        xs.push_back(Tensor::randn({s.fd.d_x()}, rng));
        vs.push_back(Tensor::randn({s.fd.d_x()}, rng));
    }
    GuidanceConfig cfg;
    cfg.method = GuidanceMethod::Ours;
    cfg.stop_gradient_through_velocity = false;
    GuidanceStep gs = guidance_step(s.context(cfg), xs, vs, 0.3, 1);
    for (int i = 0; i < 2; ++i) {
        CHECK(gs.u[static_cast<std::size_t>(i)].all_finite());
        CHECK(norm2(gs.u[static_cast<std::size_t>(i)]) ==
              doctest::Approx(norm2(vs[static_cast<std::size_t>(i)])).epsilon(1e-9));
    }
}

TEST_CASE("method names round trip") {
    CHECK(method_from_name(method_name(GuidanceMethod::Dpp)) == GuidanceMethod::Dpp);
    CHECK(method_from_name(method_name(GuidanceMethod::ParticleGuidance)) == GuidanceMethod::ParticleGuidance);
    CHECK(method_from_name(method_name(GuidanceMethod::Ours)) == GuidanceMethod::Ours);
    CHECK(method_from_name("particle_guidance") == GuidanceMethod::ParticleGuidance);
    CHECK_THROWS(method_from_name("gradient_descent"));
}
