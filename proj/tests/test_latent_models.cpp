#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "dfl/latent_models.hpp"
#include "doctest.h"

using namespace dfl;

namespace {

WorldDims tiny_world() {
    WorldDims w;
    w.t_lat = 4;
    w.c_lat = 2;
    w.h_lat = 4;
    w.w_lat = 4;
    return w;
}

}  // namespace

TEST_CASE("pooled projector outputs are unit and deterministic") {
    WorldDims w = tiny_world();
    PooledProjector pp(w, 42, 8);
    Rng rng(1);
    Tensor lat = Tensor::randn(w.latent_shape(), rng);

    Tensor ev = pp.pool_video(lat);
    REQUIRE(ev.shape() == std::vector<int>{8});
    CHECK(norm2(ev) == doctest::Approx(1.0).epsilon(1e-9));

    Tensor ef = pp.pool_frame(lat, 2);
    REQUIRE(ef.shape() == std::vector<int>{8});
    CHECK(norm2(ef) == doctest::Approx(1.0).epsilon(1e-9));

    PooledProjector same(w, 42, 8);
    Tensor ev2 = same.pool_video(lat);
    for (std::size_t i = 0; i < ev.size(); ++i) CHECK(ev2[i] == ev[i]);
}

TEST_CASE("embedder shapes, normalization, tape agreement") {
    WorldDims w = tiny_world();
    Rng rng(7);
    LatentEmbedder mv = LatentEmbedder::init(EmbedLevel::Video, w, 8, 4, rng);
    LatentEmbedder mf = LatentEmbedder::init(EmbedLevel::Frame, w, 8, 4, rng);
    Tensor lat = Tensor::randn(w.latent_shape(), rng);

    Tensor ev = embed_video_value(mv, lat);
    REQUIRE(ev.shape() == std::vector<int>{8});
    CHECK(norm2(ev) == doctest::Approx(1.0).epsilon(1e-9));

    Tensor ef = embed_frames_value(mf, lat);
    REQUIRE(ef.shape() == std::vector<int>{w.t_lat, 8});
    for (int j = 0; j < w.t_lat; ++j) {
        double n = 0;
        for (int d = 0; d < 8; ++d) n += ef(j, d) * ef(j, d);
        CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-9));
    }

    Tape tape;
    EmbedderVars pv = push_embedder(tape, mv, false);
    Var on_tape = embed_video_on_tape(tape, pv, tape.constant(lat));
    for (std::size_t i = 0; i < ev.size(); ++i) CHECK(on_tape.value()[i] == ev[i]);

    EmbedderVars pf = push_embedder(tape, mf, false);
    std::vector<Var> rows = embed_frames_on_tape(tape, pf, tape.constant(lat));
    REQUIRE(rows.size() == static_cast<std::size_t>(w.t_lat));
    for (int j = 0; j < w.t_lat; ++j)
        for (int d = 0; d < 8; ++d) CHECK(rows[j].value()[d] == ef(j, d));
}

TEST_CASE("alignment sparsification grows monotonically and zeroes entries") {
    Rng rng(3);
    Alignment a = Alignment::init(8, 8, rng);
    CHECK(a.masked_fraction() == 0.0);

    a.sparsify_to(0.5);
    const double f1 = a.masked_fraction();
    CHECK(f1 >= 0.5);
    CHECK(f1 < 1.0);

    a.sparsify_to(0.25);  // never unmasks
    CHECK(a.masked_fraction() == f1);

    a.sparsify_to(0.75);
    CHECK(a.masked_fraction() >= 0.75);

    Tensor m = a.masked();
    int zeros = 0;
    for (std::size_t i = 0; i < m.size(); ++i)
        if (a.mask[i] == 0.0) {
            CHECK(m[i] == 0.0);
            ++zeros;
        }
    CHECK(zeros >= 48);

    // apply_mask zeroes the masked weights in place
    a.apply_mask();
    for (std::size_t i = 0; i < a.a.size(); ++i)
        if (a.mask[i] == 0.0) CHECK(a.a[i] == 0.0);
}

TEST_CASE("hand-checked loss values") {
    Tape tape;
    Tensor e1({2}, {1.0, 0.0});
    Tensor r1({2}, {1.0, 0.0});
    Tensor r2({2}, {0.0, 1.0});
    std::vector<Var> e = {tape.constant(e1), tape.constant(e1)};  // both embeddings equal
    std::vector<Tensor> refs = {r1, r2};

    // pair dots: e.e' = 1 for all four pairs, ref dots = 1,0,0,1 -> mean of
    // squared differences over the 4 ordered pairs = 0.5
    CHECK(loss_similarity(tape, e, refs).value().scalar_value() == doctest::Approx(0.5).epsilon(1e-12));

    // identity alignment: terms 1 - e_i . r_i = 0 and 1 -> mean 0.5
    Var eye = tape.constant(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}));
    CHECK(loss_pairing(tape, e, refs, eye).value().scalar_value() == doctest::Approx(0.5).epsilon(1e-12));

    // pooled targets dot to 1 and 0 -> 1 - 0.5
    std::vector<Tensor> pooled = {r1, r2};
    CHECK(loss_reg_mean(tape, e, pooled).value().scalar_value() == doctest::Approx(0.5).epsilon(1e-12));

    // mean squared alignment entry
    Var am = tape.constant(Tensor({2, 2}, {2.0, 0.0, 0.0, 0.0}));
    CHECK(loss_reg_proj(tape, am).value().scalar_value() == doctest::Approx(1.0).epsilon(1e-12));

    // orthogonal embeddings with identical refs: similarity loss counts the
    // two cross pairs -> (0-1)^2 * 2 / 4
    std::vector<Var> eo = {tape.constant(r1), tape.constant(r2)};
    std::vector<Tensor> same_refs = {r1, r1};
    CHECK(loss_similarity(tape, eo, same_refs).value().scalar_value() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("interpolator prediction and wrapper") {
    WorldDims w = tiny_world();
    Rng rng(8);
    LatentInterpolator mc = LatentInterpolator::init(w, 4, rng);
    Tensor lat = Tensor::randn(w.latent_shape(), rng);

    Tensor p1 = interp_predict(mc, lat, 1);
    REQUIRE(p1.shape() == std::vector<int>{w.c_lat, w.h_lat, w.w_lat});

    Tape tape;
    InterpolatorVars iv = push_interpolator(tape, mc, false);
    Var pt = interp_predict_on_tape(tape, iv, tape.constant(lat), 1);
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(pt.value()[i] == p1[i]);

    Tensor full = interp_apply(mc, lat);
    REQUIRE(full.shape() == lat.shape());
    const std::size_t per = w.frame_numel();
    for (std::size_t i = 0; i < per; ++i) {
        CHECK(full[i] == lat[i]);  // boundary frames pass through
        CHECK(full[(w.t_lat - 1) * per + i] == lat[(w.t_lat - 1) * per + i]);
    }
    for (std::size_t i = 0; i < per; ++i) CHECK(full[per + i] == p1[i]);

    CHECK_THROWS(interp_predict(mc, lat, 0));
    CHECK_THROWS(interp_predict(mc, lat, w.t_lat - 1));
}

TEST_CASE("trajectory bank and training on a tiny problem") {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / "dfl_test_latent_ds";
    fs::remove_all(root);
    DatasetConfig dc;
    dc.classes = 2;
    dc.train_per_class = 4;
    dc.test_per_class = 2;
    dc.ref_embed_dim = 8;
    Dataset ds = build_dataset(root, dc, 11);

    FlowDims fd;
    fd.world = dc.dims;
    fd.n_classes = 2;
    fd.n_time = 4;
    fd.hidden = 16;
    Rng rng(2);
    VelocityField flow = VelocityField::init(fd, rng);

    TrajectoryBank bank = TrajectoryBank::build(flow, ds, 6, 10, 77);
    REQUIRE(bank.entries.size() == 6);
    CHECK(bank.n_steps == 10);
    for (const auto& en : bank.entries) {
        CHECK(en.xhat1.shape() == std::vector<int>{11, fd.d_x()});
        CHECK(en.ref_video.shape() == std::vector<int>{8});
        CHECK(en.ref_frames.shape() == std::vector<int>{dc.dims.t_lat, 8});
        CHECK(en.cls >= 0);
        CHECK(en.cls < 2);
    }
    Tensor row = bank.latent_at(2, 5);
    REQUIRE(row.shape() == std::vector<int>{fd.d_x()});
    for (int e = 0; e < fd.d_x(); ++e) CHECK(row[e] == bank.entries[2].xhat1(5, e));

    TrajectoryBank bank2 = TrajectoryBank::build(flow, ds, 6, 10, 77);
    for (std::size_t i = 0; i < bank.entries[0].xhat1.size(); ++i)
        CHECK(bank2.entries[0].xhat1[i] == bank.entries[0].xhat1[i]);

    LatentTrainConfig lc;
    lc.embed_dim = 8;
    lc.conv_channels = 4;
    lc.stage_steps = 40;
    lc.batch = 4;
    lc.sparsify_every = 10;
    lc.target_sparsity = 0.5;
    lc.interp_epochs = 15;
    lc.bank_size = 6;
    lc.seed = 3;

    EmbedderTrainResult rv = train_embedder(EmbedLevel::Video, bank, ds, lc);
    REQUIRE(rv.loss_curve.size() == 3 * 40);
    CHECK(std::isfinite(rv.final_loss));
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) head += rv.loss_curve[i] / 10;
    for (int i = 110; i < 120; ++i) tail += rv.loss_curve[i] / 10;
    CHECK(tail < head);
    CHECK(rv.align.masked_fraction() >= 0.4);  // middle stage ran the schedule
    CHECK(rv.align.masked_fraction() <= 0.6);

    EmbedderTrainResult rf = train_embedder(EmbedLevel::Frame, bank, ds, lc);
    CHECK(std::isfinite(rf.final_loss));
    CHECK(rf.model.level == EmbedLevel::Frame);

    InterpolatorTrainResult ri = train_interpolator(bank, ds, lc);
    REQUIRE(ri.loss_curve.size() == 15);
    CHECK(std::isfinite(ri.final_loss));
    CHECK(ri.loss_curve.back() < ri.loss_curve.front());

    // checkpoint round trips
    const fs::path mdir = root / "models";
    fs::create_directories(mdir);
    save_embedder(rv, mdir / "embed_v");
    save_embedder(rf, mdir / "embed_f");
    save_interpolator(ri, mdir / "interp");

    LatentEmbedder mv2;
    Alignment av2;
    load_embedder(mdir / "embed_v", mv2, av2);
    CHECK(mv2.level == EmbedLevel::Video);
    CHECK(mv2.embed_dim == 8);
    for (const auto& [name, t] : rv.model.params) {
        const Tensor& u = mv2.params.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(u[i] == t[i]);
    }
    for (std::size_t i = 0; i < rv.align.a.size(); ++i) {
        CHECK(av2.a[i] == rv.align.a[i]);
        CHECK(av2.mask[i] == rv.align.mask[i]);
    }

    LatentModels all = load_latent_models(mdir);
    CHECK(all.m_f.level == EmbedLevel::Frame);
    Tensor lat = bank.latent_at(0, 10).reshaped(dc.dims.latent_shape());
    Tensor a = embed_video_value(rv.model, lat);
    Tensor b = embed_video_value(all.m_v, lat);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

    // evaluation rows cover every requested step and metric
    std::vector<LatentEvalRow> rows = eval_latent_models(all, flow, ds, {5, 10}, 4, 19);
    REQUIRE(rows.size() == 2 * 5);
    int interp_rows = 0;
    for (const auto& r : rows) {
        CHECK((r.flow_step == 5 || r.flow_step == 10));
        CHECK(std::isfinite(r.model_value));
        CHECK(std::isfinite(r.baseline_value));
        if (r.metric == "interp_mse") ++interp_rows;
    }
    CHECK(interp_rows == 6);  // three baselines per step

    write_latent_eval_csv(root / "eval.csv", rows);
    CHECK(fs::exists(root / "eval.csv"));

    fs::remove_all(root);
}
