#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "nsvar/dynroute.hpp"
#include "nsvar/rng.hpp"
#include "nsvar/sparsify.hpp"

using namespace nsvar;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.d_ff = 32;
    cfg.vocab = 8;
    cfg.num_classes = 2;
    cfg.scale_sides = {1, 2, 3};
    return cfg;
}

NextScaleModel trained_relu_model(uint64_t seed, const TokenDataset& ds) {
    NextScaleModel m = NextScaleModel::init(tiny_config(), seed);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch = 8;
    tc.lr = 2e-3;
    tc.seed = seed;
    train(m, ds, tc);
    relufy(m);
    return m;
}

}  // namespace

TEST_CASE("moefy_model: every block converted, dense tensors dropped, round trip") {
    ModelConfig cfg = tiny_config();
    TokenDataset ds = make_token_dataset(21, 16, cfg.pyramid());
    NextScaleModel model = trained_relu_model(21, ds);
    NextScaleModel dense = model;

    ClusterConfig cc;
    cc.num_experts = 4;
    cc.seed = 3;
    auto results = moefy_model(model, cc);
    CHECK(results.size() == 2);
    CHECK(model.moefied());
    for (const auto& blk : model.blocks) {
        REQUIRE(blk.moefied());
        CHECK(blk.experts->num_experts == 4);
        CHECK(blk.experts->expert_size == 8);
        CHECK(blk.w1.numel() == 0);
    }
    CHECK_THROWS_AS(moefy_model(model, cc), Error);  // already moefied

    // dense equivalence through the whole model at tau 0
    TauSchedule sched = TauSchedule::uniform(0.0, cfg.num_scales());
    GatingSpec gs{ForwardMode::Oracle, sched};
    for (int i = 0; i < 4; ++i) {
        ForwardOptions opts;
        opts.mode = gs.mode;
        opts.schedule = &gs.schedule;
        Tensor gated = forward_train(model, ds.items[static_cast<size_t>(i)].tokens,
                                     ds.items[static_cast<size_t>(i)].class_id, opts);
        Tensor ref = forward_train(dense, ds.items[static_cast<size_t>(i)].tokens,
                                   ds.items[static_cast<size_t>(i)].class_id);
        REQUIRE(gated.shape == ref.shape);
        for (size_t j = 0; j < ref.data.size(); ++j)
            CHECK(std::fabs(gated.data[j] - ref.data[j]) < 1e-9);
    }

    // checkpoint round trip for the MoEfied model
    std::string path = (std::filesystem::temp_directory_path() / "nsvar_moe.nsvm").string();
    save_checkpoint(path, model);
    NextScaleModel back = load_checkpoint(path);
    REQUIRE(back.moefied());
    CHECK(back.blocks[0].experts->assignment == model.blocks[0].experts->assignment);
    CHECK(back.blocks[0].experts->w1[0].data == model.blocks[0].experts->w1[0].data);
    CHECK(nll_eval(back, ds) == nll_eval(model, ds));
    std::filesystem::remove(path);
}

TEST_CASE("nll_eval: dense gating mode equals no-gating evaluation exactly") {
    ModelConfig cfg = tiny_config();
    TokenDataset ds = make_token_dataset(22, 8, cfg.pyramid());
    NextScaleModel model = trained_relu_model(22, ds);
    ClusterConfig cc;
    cc.num_experts = 4;
    moefy_model(model, cc);

    double plain = nll_eval(model, ds);
    GatingSpec gs{ForwardMode::Dense, TauSchedule::all_dense(cfg.num_scales())};
    CHECK(nll_eval(model, ds, gs) == plain);

    // tau = 0 gating equals dense evaluation (same expert sums, bit-identical)
    GatingSpec zero{ForwardMode::Oracle, TauSchedule::uniform(0.0, cfg.num_scales())};
    CHECK(std::fabs(nll_eval(model, ds, zero) - plain) < 1e-5);
}

TEST_CASE("train_router: holdout MSE improves over the untrained router") {
    ModelConfig cfg = tiny_config();
    TokenDataset ds = make_token_dataset(23, 32, cfg.pyramid());
    NextScaleModel model = trained_relu_model(23, ds);
    ClusterConfig cc;
    cc.num_experts = 4;
    moefy_model(model, cc);

    RouterTrainConfig rc;
    rc.epochs = 2;
    rc.batch = 64;
    rc.width = 8;
    rc.max_harvest_items = 24;
    rc.seed = 23;
    auto reports = train_router(model, ds, rc);
    REQUIRE(reports.size() == 2);
    CHECK(model.routed());
    for (const auto& rep : reports) {
        CHECK(rep.final_holdout_mse < rep.init_holdout_mse);
        CHECK(std::isfinite(rep.final_train_mse));
    }
}

TEST_CASE("train_router: zero epochs leaves the router at its seed init") {
    ModelConfig cfg = tiny_config();
    TokenDataset ds = make_token_dataset(24, 16, cfg.pyramid());
    NextScaleModel model = trained_relu_model(24, ds);
    ClusterConfig cc;
    cc.num_experts = 4;
    moefy_model(model, cc);

    RouterTrainConfig rc;
    rc.epochs = 0;
    rc.batch = 32;
    rc.width = 8;
    rc.max_harvest_items = 8;
    rc.seed = 77;
    train_router(model, ds, rc);
    RouterNet fresh = RouterNet::init(cfg.d_model, rc.width, 4, Rng::mix(rc.seed, 7001ull));
    CHECK(model.blocks[0].router->w0.data == fresh.w0.data);
    CHECK(model.blocks[0].router->b2.data == fresh.b2.data);
}

TEST_CASE("dynk_max with a trained router runs and selects fewer experts at high tau") {
    ModelConfig cfg = tiny_config();
    TokenDataset ds = make_token_dataset(25, 32, cfg.pyramid());
    NextScaleModel model = trained_relu_model(25, ds);
    ClusterConfig cc;
    cc.num_experts = 4;
    moefy_model(model, cc);
    RouterTrainConfig rc;
    rc.epochs = 1;
    rc.batch = 64;
    rc.width = 8;
    rc.max_harvest_items = 16;
    train_router(model, ds, rc);

    SamplerConfig sc;
    sc.seed = 5;
    sc.mode = ForwardMode::DynkMax;
    sc.gating = TauSchedule::uniform(0.0, cfg.num_scales());
    GatingTrace t0;
    sample(model, 0, sc, &t0);
    sc.gating = TauSchedule::uniform(1.0, cfg.num_scales());
    GatingTrace t1;
    sample(model, 0, sc, &t1);

    double mean0 = 0.0, mean1 = 0.0;
    for (int k = 1; k <= cfg.num_scales(); ++k) {
        mean0 += t0.mean_experts_per_token(k);
        mean1 += t1.mean_experts_per_token(k);
    }
    CHECK(mean0 == doctest::Approx(4.0 * cfg.num_scales()));  // tau 0 keeps all experts
    CHECK(mean1 < mean0);
}

TEST_CASE("oracle selection equals gate(expert_norms) on captured inputs") {
    ModelConfig cfg = tiny_config();
    TokenDataset ds = make_token_dataset(26, 8, cfg.pyramid());
    NextScaleModel model = trained_relu_model(26, ds);
    ClusterConfig cc;
    cc.num_experts = 4;
    moefy_model(model, cc);

    TauSchedule sched = TauSchedule::uniform(0.6, cfg.num_scales());
    int checked = 0;
    for (const auto& item : ds.items) {
        EvalCapture cap;
        cap.want_ffn_inputs = true;
        GatingTrace trace;
        ForwardOptions opts;
        opts.mode = ForwardMode::Oracle;
        opts.schedule = &sched;
        opts.trace = &trace;
        opts.capture = &cap;
        forward_train(model, item.tokens, item.class_id, opts);

        for (const auto& e : trace.entries) {
            const Tensor& xin = cap.ffn_inputs[e.layer];
            auto bounds = cfg.boundaries()[static_cast<size_t>(e.scale - 1)];
            int side = cfg.scale_sides[static_cast<size_t>(e.scale - 1)];
            int row = 1 + bounds.first + e.row * side + e.col;
            const double* x = xin.data.data() + static_cast<int64_t>(row) * cfg.d_model;
            auto norms = expert_norms(*model.blocks[e.layer].experts, x, model.cfg.activation);
            CHECK(e.mask == gate_mask(norms.data(), 4, sched.tau_for(e.scale)));
            ++checked;
        }
    }
    CHECK(checked > 100);
}

TEST_CASE("prune_ffn: keep 1.0 is the identity, keep 0.5 zeroes exactly half") {
    ModelConfig cfg = tiny_config();
    TokenDataset ds = make_token_dataset(27, 16, cfg.pyramid());
    NextScaleModel model = trained_relu_model(27, ds);
    std::vector<int> scales = {2, 3};

    NextScaleModel full = model;
    prune_ffn(full, 1.0, ds, scales);
    GatingSpec pruned{ForwardMode::Pruned, TauSchedule::all_dense(cfg.num_scales())};
    CHECK(nll_eval(full, ds, pruned) == nll_eval(model, ds));

    NextScaleModel half = model;
    prune_ffn(half, 0.5, ds, scales);
    for (const auto& blk : half.blocks) {
        REQUIRE(blk.prune.has_value());
        int64_t kept = 0;
        for (uint8_t v : blk.prune->keep) kept += v;
        CHECK(kept == cfg.d_ff / 2);
    }
    double dense_nll = nll_eval(model, ds);
    double pruned_nll = nll_eval(half, ds, pruned);
    MESSAGE("pruned-vs-dense NLL gap: " << (pruned_nll - dense_nll));
    CHECK(pruned_nll >= dense_nll);

    // checkpoint round trip keeps masks and scales
    std::string path = (std::filesystem::temp_directory_path() / "nsvar_prune.nsvm").string();
    save_checkpoint(path, half);
    NextScaleModel back = load_checkpoint(path);
    CHECK(back.prune_scales == scales);
    CHECK(back.blocks[0].prune->keep == half.blocks[0].prune->keep);
    CHECK(nll_eval(back, ds, pruned) == pruned_nll);
    std::filesystem::remove(path);
}

TEST_CASE("prune_ffn input validation") {
    ModelConfig cfg = tiny_config();
    TokenDataset ds = make_token_dataset(28, 4, cfg.pyramid());
    NextScaleModel model = NextScaleModel::init(cfg, 28);
    CHECK_THROWS_AS(prune_ffn(model, 0.0, ds, {2}), Error);
    CHECK_THROWS_AS(prune_ffn(model, 0.5, ds, {9}), Error);
}
