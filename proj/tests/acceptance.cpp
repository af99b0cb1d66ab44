// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one pass/fail line per criterion. Exit code is the number of
// failed criteria. Shared artifacts (the staged pipeline on the default toy
// geometry) are built once and reused; the determinism criterion reruns the
// whole pipeline from scratch.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "nsvar/harness.hpp"

using namespace nsvar;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %d: %s — %s\n", pass ? "PASS" : "FAIL", id, name.c_str(),
                detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double now_sec() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::string file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

Tensor random_matrix(int64_t r, int64_t c, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Tensor t = Tensor::zeros({r, c});
    for (double& v : t.data) v = rng.gaussian() * scale;
    return t;
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

// ------------------------------------------------------------- criterion 2

void criterion_gating_algebra() {
    double t0 = now_sec();
    Rng rng(20240517);
    const int experts = 8;
    int violations = 0;
    std::vector<double> taus;
    for (int i = 0; i < 20; ++i) taus.push_back(i / 19.0);

    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> p(experts);
        for (double& v : p) v = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
        double c = rng.uniform(0.05, 20.0);
        std::vector<double> scaled(p);
        for (double& v : scaled) v *= c;

        double mx = 0.0;
        int arg = 0;
        for (int i = 0; i < experts; ++i)
            if (p[static_cast<size_t>(i)] > mx) {
                mx = p[static_cast<size_t>(i)];
                arg = i;
            }

        uint64_t all = (1ull << experts) - 1ull;
        if (gate_mask(p.data(), experts, 0.0) != all) ++violations;  // tau 0 keeps everything

        uint64_t argmax_set = 0;
        for (int i = 0; i < experts; ++i)
            if (p[static_cast<size_t>(i)] >= mx) argmax_set |= 1ull << i;
        if (gate_mask(p.data(), experts, 1.0) != argmax_set) ++violations;  // tau 1 boundary

        uint64_t prev = all;
        for (double tau : taus) {
            uint64_t m = gate_mask(p.data(), experts, tau);
            if ((m & ~prev) != 0) ++violations;                              // nesting
            if (mx > 0.0 && !((m >> arg) & 1ull)) ++violations;              // argmax persists
            if (gate_mask(scaled.data(), experts, tau) != m) ++violations;   // scale invariance
            if (popcount64(m) > popcount64(prev)) ++violations;              // count monotone
            prev = m;
        }
    }
    report(2, "gating algebra suite", violations == 0,
           fmt("1000 vectors x 20 taus, %d violations (%.1fs)", violations, now_sec() - t0));
}

// ------------------------------------------------------------- criterion 3

void criterion_hoyer_suite() {
    double t0 = now_sec();
    bool ok = true;
    std::string why;

    auto expect = [&](bool cond, const std::string& msg) {
        if (!cond && ok) {
            ok = false;
            why = msg;
        }
    };

    expect(std::fabs(hoyer({1, 0, 0, 0}) - 1.0) < 1e-12, "one-hot != 1");
    std::vector<double> uni(9, 0.3);
    expect(std::fabs(hoyer(uni) - 9.0) < 1e-12, "uniform-9 != 9");
    expect(std::fabs(hoyer({3, 4}) - 1.96) < 1e-12, "[3,4] != 1.96");

    Rng rng(3);
    for (int trial = 0; trial < 200 && ok; ++trial) {
        std::vector<double> h(8);
        for (double& v : h) v = rng.gaussian();
        double base = hoyer(h);
        for (double c : {2.0, -0.5, 1e-3}) {
            std::vector<double> s(h);
            for (double& v : s) v *= c;
            expect(std::fabs(hoyer(s) - base) <= 1e-12 * std::max(1.0, base),
                   "scale invariance violated");
        }
    }

    // combined-loss gradient on a 1-layer toy model, 10 kink-free points
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.d_ff = 8;
    cfg.vocab = 4;
    cfg.num_classes = 2;
    cfg.scale_sides = {1, 2};
    cfg.activation = Activation::Relu;
    TokenDataset ds = make_token_dataset(33, 40, cfg.pyramid());
    TrainGraph tg = build_train_graph(cfg, 0.1);

    double worst = 0.0;
    int points = 0;
    // draw candidates until 10 kink-free points accumulate
    for (int trial = 0; trial < 40 && points < 10; ++trial) {
        NextScaleModel model = NextScaleModel::init(cfg, 100 + static_cast<uint64_t>(trial));
        for (size_t u = 0; u < model.blocks[0].b1.data.size(); ++u)
            model.blocks[0].b1.data[u] = (u % 2 == 0) ? 0.15 : -0.15;

        const auto& item = ds.items[static_cast<size_t>(trial)];
        auto idx = input_indices(cfg, item.tokens.maps, item.class_id, cfg.num_scales());
        auto flat = flatten(item.tokens);
        std::vector<int64_t> targets(flat.begin(), flat.end());

        // kink-free check: preactivations bounded away from zero
        EvalCapture cap;
        cap.want_ffn_inputs = true;
        ForwardOptions opts;
        opts.capture = &cap;
        forward_train(model, item.tokens, item.class_id, opts);
        Tensor pre = linear(cap.ffn_inputs[0], model.blocks[0].w1, model.blocks[0].b1);
        bool clean = true;
        for (double v : pre.data)
            if (std::fabs(v) < 1e-3) clean = false;
        if (!clean) continue;  // too close to a ReLU kink for central differences

        auto params = model.named_params();
        Tensor* slot = nullptr;
        for (auto& [name, t] : params)
            if (name == "blk0.ffn.w1") slot = t;

        auto eval = [&](const Tensor& p) {
            Bindings bind;
            for (auto& [name, t] : params) bind.tensors[name] = (t == slot) ? &p : t;
            bind.indices["tokens"] = &idx;
            bind.indices["targets"] = &targets;
            return forward(tg.graph, bind);
        };
        ScalarFn fn;
        fn.value = [&](const Tensor& p) { return eval(p).value(tg.loss_node).item(); };
        fn.grad = [&](const Tensor& p) {
            Evaluation ev = eval(p);
            return backward(tg.graph, ev, tg.loss_node).at("blk0.ffn.w1");
        };
        worst = std::max(worst, grad_check(fn, *slot, 1e-5));
        ++points;
    }
    expect(points >= 10, fmt("only %d kink-free points", points));
    expect(worst < 1e-4, fmt("gradient error %.3g >= 1e-4", worst));

    report(3, "hoyer suite", ok,
           ok ? fmt("closed forms exact, %d gradient points, worst rel err %.2e (%.1fs)",
                    points, worst, now_sec() - t0)
              : why);
}

// ------------------------------------------------------------- criterion 4

void criterion_moefication_suite() {
    double t0 = now_sec();
    bool ok = true;
    std::string why;
    auto expect = [&](bool cond, const std::string& msg) {
        if (!cond && ok) {
            ok = false;
            why = msg;
        }
    };

    const int d_model = 64, d_ff = 256;
    Tensor w1 = random_matrix(d_ff, d_model, 41, 0.3);
    Tensor b1 = random_matrix(d_ff, 1, 42, 0.1);
    b1.shape = {d_ff};
    Tensor w2 = random_matrix(d_model, d_ff, 43, 0.3);
    Tensor b2 = random_matrix(d_model, 1, 44, 0.1);
    b2.shape = {d_model};

    double worst = 0.0;
    for (int e_count : {32, 16, 8, 2}) {
        ClusterConfig cc;
        cc.num_experts = e_count;
        cc.seed = 7;
        auto res = balanced_kmeans(w1, cc);
        std::vector<int> counts(static_cast<size_t>(e_count), 0);
        for (int a : res.assignment) counts[static_cast<size_t>(a)]++;
        for (int c = 0; c < e_count; ++c)
            expect(counts[static_cast<size_t>(c)] == d_ff / e_count,
                   fmt("E=%d cluster sizes unbalanced", e_count));

        ExpertSet set = split_ffn(w1, b1, w2, b2, res.assignment);
        expect(set.expert_size == d_ff / e_count, "expert size mismatch");

        Rng rng(50 + static_cast<uint64_t>(e_count));
        for (int trial = 0; trial < 100; ++trial) {
            std::vector<double> x(d_model);
            for (double& v : x) v = rng.gaussian();
            // dense oracle
            std::vector<double> want(d_model);
            {
                std::vector<double> h(d_ff);
                for (int u = 0; u < d_ff; ++u) {
                    double s = b1.data[static_cast<size_t>(u)];
                    for (int j = 0; j < d_model; ++j) s += w1.at(u, j) * x[static_cast<size_t>(j)];
                    h[static_cast<size_t>(u)] = s > 0.0 ? s : 0.0;
                }
                for (int j = 0; j < d_model; ++j) {
                    double s = b2.data[static_cast<size_t>(j)];
                    for (int u = 0; u < d_ff; ++u) s += w2.at(j, u) * h[static_cast<size_t>(u)];
                    want[static_cast<size_t>(j)] = s;
                }
            }
            auto got = moe_forward(set, x.data(), Activation::Relu, ForwardMode::Dense, 0.0);
            for (int j = 0; j < d_model; ++j)
                worst = std::max(worst, std::fabs(got.y[static_cast<size_t>(j)] - want[static_cast<size_t>(j)]));
        }
    }
    expect(worst < 1e-10, fmt("reconstruction error %.3g >= 1e-10", worst));

    // brute-force balanced-2-partition oracle on an 8-unit instance
    {
        Rng rng(77);
        Tensor units = Tensor::zeros({8, 4});
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 4; ++j)
                units.at(i, j) = (i < 4 ? -5.0 : 5.0) + 0.2 * rng.gaussian();
        ClusterConfig cc;
        cc.num_experts = 2;
        cc.seed = 5;
        auto res = balanced_kmeans(units, cc);

        auto objective = [&](const std::vector<int>& assign) {
            double cents[2][4] = {{0}};
            for (int i = 0; i < 8; ++i)
                for (int j = 0; j < 4; ++j) cents[assign[static_cast<size_t>(i)]][j] += units.at(i, j) / 4.0;
            double obj = 0.0;
            for (int i = 0; i < 8; ++i)
                for (int j = 0; j < 4; ++j) {
                    double t = units.at(i, j) - cents[assign[static_cast<size_t>(i)]][j];
                    obj += t * t;
                }
            return obj;
        };
        std::vector<int> pick = {0, 0, 0, 0, 1, 1, 1, 1};
        std::sort(pick.begin(), pick.end());
        double best = 1e300;
        do {
            if (pick[0] != 0) continue;
            best = std::min(best, objective(pick));
        } while (std::next_permutation(pick.begin(), pick.end()));
        expect(std::fabs(objective(res.assignment) - best) < 1e-9,
               "balanced k-means missed the brute-force optimum");
    }

    report(4, "moefication suite", ok,
           ok ? fmt("sizes exact, reconstruction worst %.2e over the (E,size) grid, "
                    "brute-force oracle matched (%.1fs)",
                    worst, now_sec() - t0)
              : why);
}

// ------------------------------------------------------------- criterion 9

void criterion_flop_accounting(const NextScaleModel& routed) {
    double t0 = now_sec();
    bool ok = true;
    std::string why;
    auto expect = [&](bool cond, const std::string& msg) {
        if (!cond && ok) {
            ok = false;
            why = msg;
        }
    };
    const ModelConfig& cfg = routed.cfg;

    // dense generation total against the hand-derived closed form
    {
        SamplerConfig sc;
        sc.seed = 91;
        sc.mode = ForwardMode::Dense;
        sc.cfg = 1.5;
        GatingTrace trace;
        sample(routed, 0, sc, &trace);
        FlopsReport rep =
            count_generation(routed, trace, TauSchedule::all_dense(cfg.num_scales()));

        // closed form: per scale k with Q new tokens (plus the class slot at
        // k=1), prefix P, two guidance passes:
        //   L * (8 Q d^2 + 4 Q P d + 4 Q d d_ff) + 2 s_k^2 d V
        int64_t d = cfg.d_model, ff = cfg.d_ff, v = cfg.vocab, layers = cfg.depth;
        int64_t want = 0, before = 0;
        for (int side : cfg.scale_sides) {
            int64_t s2 = static_cast<int64_t>(side) * side;
            int64_t q = s2 + (before == 0 ? 1 : 0);
            int64_t prefix = 1 + before + s2;
            want += 2 * (layers * (8 * q * d * d + 4 * q * prefix * d + 4 * q * d * ff) +
                         2 * s2 * d * v);
            before += s2;
        }
        expect(rep.dense_total == want,
               fmt("dense total %lld != closed form %lld", (long long)rep.dense_total,
                   (long long)want));
    }

    // gated totals against an independent per-token accumulation on 10 traces
    TauSchedule sched = schedule_from_base(0.5, cfg.num_scales() - 2, cfg.num_scales());
    int64_t e_size = routed.blocks[0].experts->expert_size;
    int64_t rw = routed.blocks[0].router->width();
    int64_t e_count = routed.blocks[0].experts->num_experts;
    int64_t per_expert = 4 * cfg.d_model * e_size;
    int64_t per_router = 2 * (cfg.d_model * rw + rw * rw + rw * e_count);
    int64_t dense_tok = 4 * cfg.d_model * cfg.d_ff;

    for (int i = 0; i < 10 && ok; ++i) {
        SamplerConfig sc;
        sc.seed = 900 + static_cast<uint64_t>(i);
        sc.mode = ForwardMode::DynkMax;
        sc.cfg = 1.5;
        sc.gating = sched;
        GatingTrace trace;
        sample(routed, i % cfg.num_classes, sc, &trace);
        FlopsReport rep = count_generation(routed, trace, sched);

        int64_t want_ffn = 0, want_router = 0;
        for (const auto& e : trace.entries) {
            want_ffn += static_cast<int64_t>(e.count) * per_expert;
            want_router += per_router;
        }
        // dense-running scales and the class slot
        int64_t before = 0;
        for (int k = 1; k <= cfg.num_scales(); ++k) {
            int side = cfg.scale_sides[static_cast<size_t>(k - 1)];
            int64_t s2 = static_cast<int64_t>(side) * side;
            int64_t q = s2 + (k == 1 ? 1 : 0);
            if (!sched.is_gated(k))
                want_ffn += 2 * cfg.depth * q * dense_tok;
            else if (k == 1)
                want_ffn += 2 * cfg.depth * dense_tok;  // class slot only
            before += s2;
        }
        expect(rep.gated_ffn_total == want_ffn,
               fmt("trace %d: gated ffn %lld != oracle %lld", i, (long long)rep.gated_ffn_total,
                   (long long)want_ffn));
        expect(rep.router_total == want_router, fmt("trace %d: router flops mismatch", i));
    }

    report(9, "flop accounting", ok,
           ok ? fmt("closed form exact; 10 gated traces match the per-token oracle (%.1fs)",
                    now_sec() - t0)
              : why);
}

int main_impl() {
    std::printf("== acceptance suite: toy geometry (1,2,3,4,6,8), d_model 64, depth 6, "
                "d_ff 256, V 16, C 4, E 8 ==\n");
    double t_all = now_sec();

    fs::path scratch = fs::current_path() / "acceptance_scratch";
    fs::remove_all(scratch);
    fs::create_directories(scratch);

    // fast, self-contained criteria first
    criterion_gating_algebra();
    criterion_hoyer_suite();
    criterion_moefication_suite();

    // ------------------------------------------------------ shared pipeline
    PipelineConfig pcfg;
    pcfg.out_dir = (scratch / "run_a").string();
    pcfg.seed = 0;
    std::printf("-- running the staged pipeline (train 3 epochs, sparsify alpha 0.1 for 2, "
                "E=8, routers 2 epochs)...\n");
    std::fflush(stdout);
    double t_pipe = now_sec();
    PipelineResult pipe = run_pipeline(pcfg);
    std::printf("-- pipeline done in %.1fs\n", now_sec() - t_pipe);
    std::fflush(stdout);

    NextScaleModel sparse_model = load_checkpoint(pipe.sparse_ckpt);   // pre-MoEfication dense
    NextScaleModel routed = load_checkpoint(pipe.routed_ckpt);
    TokenDataset train_ds = read_dataset(pipe.train_data);
    TokenDataset heldout = read_dataset(pipe.heldout_data);
    const ModelConfig& cfg = routed.cfg;
    int k_scales = cfg.num_scales();

    criterion_flop_accounting(routed);

    // -------------------------------------------------------- criterion 1
    {
        double t0 = now_sec();
        TauSchedule zero = TauSchedule::uniform(0.0, k_scales);
        double worst = 0.0;
        int n = std::min<int>(50, static_cast<int>(heldout.items.size()));
        for (int i = 0; i < n; ++i) {
            const auto& item = heldout.items[static_cast<size_t>(i)];
            ForwardOptions opts;
            opts.mode = ForwardMode::Oracle;
            opts.schedule = &zero;
            Tensor gated = forward_train(routed, item.tokens, item.class_id, opts);
            Tensor dense = forward_train(sparse_model, item.tokens, item.class_id);
            for (size_t j = 0; j < dense.data.size(); ++j)
                worst = std::max(worst, std::fabs(gated.data[j] - dense.data[j]));
        }
        report(1, "dense equivalence at tau 0", worst < 1e-5,
               fmt("max |logit delta| %.3g over %d held-out sequences (%.1fs)", worst, n,
                   now_sec() - t0));
    }

    // -------------------------------------------------------- criterion 5
    {
        double t0 = now_sec();
        TauSchedule sched = TauSchedule::uniform(0.6, k_scales);
        int checked = 0, mask_bad = 0, out_bad = 0;
        for (size_t i = 0; i < heldout.items.size() && checked < 1000; ++i) {
            const auto& item = heldout.items[i];
            EvalCapture cap;
            cap.want_ffn_inputs = true;
            GatingTrace trace;
            ForwardOptions opts;
            opts.mode = ForwardMode::Oracle;
            opts.schedule = &sched;
            opts.trace = &trace;
            opts.capture = &cap;
            forward_train(routed, item.tokens, item.class_id, opts);

            auto bounds = cfg.boundaries();
            for (const auto& e : trace.entries) {
                if (checked >= 1000) break;
                const Tensor& xin = cap.ffn_inputs[e.layer];
                int side = cfg.scale_sides[static_cast<size_t>(e.scale - 1)];
                int row = 1 + bounds[static_cast<size_t>(e.scale - 1)].first + e.row * side + e.col;
                const double* x = xin.data.data() + static_cast<int64_t>(row) * cfg.d_model;
                const ExpertSet& set = *routed.blocks[e.layer].experts;
                auto norms = expert_norms(set, x, cfg.activation);
                if (e.mask != gate_mask(norms.data(), set.num_experts, sched.tau_for(e.scale)))
                    ++mask_bad;
                // dynk_max fed the true norms must reproduce oracle bit-exactly
                auto oracle = moe_forward(set, x, cfg.activation, ForwardMode::Oracle,
                                          sched.tau_for(e.scale));
                auto dynk = moe_forward(set, x, cfg.activation, ForwardMode::DynkMax,
                                        sched.tau_for(e.scale), norms.data());
                if (oracle.mask != dynk.mask || oracle.y != dynk.y) ++out_bad;
                ++checked;
            }
        }
        report(5, "oracle-mode consistency", checked >= 1000 && mask_bad == 0 && out_bad == 0,
               fmt("%d tokens, %d selection mismatches, %d output mismatches (%.1fs)", checked,
                   mask_bad, out_bad, now_sec() - t0));
    }

    // -------------------------------------------------------- criterion 6
    double chosen_tau = -1.0;
    {
        double t0 = now_sec();
        SweepConfig sw;
        sw.forward_mode = ForwardMode::DynkMax;
        sw.switch_scale = k_scales - 2;
        sw.gen_per_point = 2;
        std::vector<double> grid = {0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.7, 0.9};
        auto points = tau_sweep(routed, heldout, grid, sw);
        write_curve_csv((scratch / "tau_sweep.csv").string(), points, "acceptance sweep");

        double dense_nll = points[0].nll;
        double best_reduction = 0.0, best_deg = 0.0;
        for (size_t i = 1; i < points.size(); ++i) {
            double reduction = 1.0 - points[i].gated_gflops / points[i].dense_gflops;
            double deg = (points[i].nll - dense_nll) / dense_nll;
            if (reduction >= 0.10 && deg <= 0.02 && reduction > best_reduction) {
                best_reduction = reduction;
                best_deg = deg;
                chosen_tau = points[i].tau;
            }
        }
        report(6, "scaled compute-quality trade-off", chosen_tau >= 0.0,
               chosen_tau >= 0.0
                   ? fmt("tau %.2f on the last three scales: %.1f%% FLOP reduction at "
                         "%+.2f%% NLL vs dense %.4f (%.1fs)",
                         chosen_tau, 100.0 * best_reduction, 100.0 * best_deg, dense_nll,
                         now_sec() - t0)
                   : fmt("no grid point reached 10%% reduction within 2%% NLL (dense %.4f)",
                         dense_nll));
    }

    // -------------------------------------------------------- criterion 7
    {
        double t0 = now_sec();
        auto savings_at = [&](int scale) {
            TauSchedule single = TauSchedule::single_scale(scale, 1.0, k_scales);
            SamplerConfig sc;
            sc.seed = 70;
            sc.mode = ForwardMode::DynkMax;
            sc.gating = single;
            GatingTrace trace;
            sample(routed, 0, sc, &trace);
            FlopsReport rep = count_generation(routed, trace, single);
            double nll = nll_eval(routed, heldout, GatingSpec{ForwardMode::DynkMax, single});
            return std::make_pair(rep.dense_total - rep.gated_total, nll);
        };
        auto [save_fine, nll_fine] = savings_at(k_scales);
        auto [save_coarse, nll_coarse] = savings_at(1);
        report(7, "scale-ablation direction", save_fine > save_coarse,
               fmt("finest saves %lld flops vs coarsest %lld at tau 1.0; NLL %.4f vs %.4f "
                   "(reported, not asserted) (%.1fs)",
                   (long long)save_fine, (long long)save_coarse, nll_fine, nll_coarse,
                   now_sec() - t0));
    }

    // -------------------------------------------------------- criterion 8
    {
        double t0 = now_sec();
        double tau_star = chosen_tau >= 0.0 ? chosen_tau : 0.15;
        TauSchedule sched = schedule_from_base(tau_star, k_scales - 2, k_scales);
        double nll_dyn = nll_eval(routed, heldout, GatingSpec{ForwardMode::DynkMax, sched});

        // matched FFN budget on the last three scales from the gated trace
        SamplerConfig sc;
        sc.seed = 80;
        sc.mode = ForwardMode::DynkMax;
        sc.gating = sched;
        GatingTrace trace;
        sample(routed, 0, sc, &trace);
        FlopsReport rep = count_generation(routed, trace, sched);
        int64_t gated = 0, dense = 0;
        for (int k = k_scales - 2; k <= k_scales; ++k) {
            gated += rep.gated_ffn_by_scale[static_cast<size_t>(k - 1)];
            dense += rep.dense_ffn_by_scale[static_cast<size_t>(k - 1)];
        }
        double keep = static_cast<double>(gated) / static_cast<double>(dense);

        NextScaleModel pruned = sparse_model;
        std::vector<int> scales = {k_scales - 2, k_scales - 1, k_scales};
        prune_ffn(pruned, keep, train_ds, scales);
        double nll_pruned = nll_eval(pruned, heldout,
                                     GatingSpec{ForwardMode::Pruned, TauSchedule::all_dense(k_scales)});
        report(8, "pruned-FFN baseline", nll_dyn <= nll_pruned,
               fmt("matched keep %.3f: dynamic NLL %.4f vs pruned %.4f (gap %+.4f) (%.1fs)",
                   keep, nll_dyn, nll_pruned, nll_pruned - nll_dyn, now_sec() - t0));
    }

    // -------------------------------------------------------- criterion 10
    {
        double t0 = now_sec();
        PipelineConfig pcfg_b = pcfg;
        pcfg_b.out_dir = (scratch / "run_b").string();
        std::printf("-- rerunning the pipeline for the determinism criterion...\n");
        std::fflush(stdout);
        PipelineResult pipe_b = run_pipeline(pcfg_b);

        bool ok = file_bytes(pipe.manifest_path) == file_bytes(pipe_b.manifest_path);
        std::string first_diff = ok ? "" : "manifest";
        for (const char* name :
             {"train.nspd", "heldout.nspd", "dense.nsvm", "sparse.nsvm", "moefied.nsvm",
              "routed.nsvm", "train_log.csv", "sparse_log.csv", "sparsity_report.csv",
              "cluster_report.csv", "router_report.csv"}) {
            if (file_bytes((fs::path(pcfg.out_dir) / name).string()) !=
                file_bytes((fs::path(pcfg_b.out_dir) / name).string())) {
                if (ok) first_diff = name;
                ok = false;
            }
        }

        // heatmaps re-emitted from the same checkpoint are byte-identical
        TauSchedule sched = schedule_from_base(0.5, k_scales - 2, k_scales);
        auto heat_a = (scratch / "heat_a").string();
        auto heat_b = (scratch / "heat_b").string();
        expert_heatmap(routed, 0, 10, sched, ForwardMode::DynkMax, heat_a);
        expert_heatmap(routed, 0, 10, sched, ForwardMode::DynkMax, heat_b);
        for (int k = k_scales - 2; k <= k_scales; ++k) {
            std::string name = "heat_scale" + std::to_string(k) + ".pgm";
            if (file_bytes((fs::path(heat_a) / name).string()) !=
                file_bytes((fs::path(heat_b) / name).string())) {
                if (ok) first_diff = name;
                ok = false;
            }
        }
        report(10, "pipeline determinism", ok,
               ok ? fmt("manifests, checkpoints, CSVs and heatmaps bit-identical (%.1fs)",
                        now_sec() - t0)
                  : "first mismatch: " + first_diff);
    }

    std::printf("== %d/10 criteria passed in %.1fs ==\n", 10 - g_failures,
                now_sec() - t_all);
    return g_failures;
}

}  // namespace

int main() {
    try {
        return main_impl();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "acceptance suite aborted: %s\n", e.what());
        return 99;
    }
}
