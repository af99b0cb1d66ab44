#include "nsvar/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "nsvar/rng.hpp"

namespace nsvar {

namespace fs = std::filesystem;

// ------------------------------------------------------------ file plumbing

uint64_t hash_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "hash_file: cannot open " + path);
    uint64_t h = 14695981039346656037ull;
    char buf[65536];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
    }
    return h;
}

std::string hex64(uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string csv_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "write_text_file: cannot open " + path);
    os << content;
    require(os.good(), "write_text_file: write failed for " + path);
}

void write_pgm(const std::string& path, int width, int height,
               const std::vector<double>& values01) {
    require(static_cast<int>(values01.size()) == width * height, "write_pgm: size mismatch");
    std::ostringstream os;
    os << "P2\n" << width << " " << height << "\n255\n";
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            double v = std::min(1.0, std::max(0.0, values01[static_cast<size_t>(y * width + x)]));
            os << static_cast<int>(std::lround(v * 255.0));
            os << (x + 1 == width ? '\n' : ' ');
        }
    }
    write_text_file(path, os.str());
}

// ------------------------------------------------------------------ reports

void write_train_log_csv(const std::string& path, const TrainLog& log) {
    std::ostringstream os;
    os << "# train_log v1\nstep,ce,hoyer,loss\n";
    for (size_t i = 0; i < log.step_ce.size(); ++i)
        os << i << "," << csv_double(log.step_ce[i]) << "," << csv_double(log.step_hoyer[i])
           << "," << csv_double(log.step_loss[i]) << "\n";
    write_text_file(path, os.str());
}

void write_sparsity_csv(const std::string& path, const SparsityReport& rep) {
    std::ostringstream os;
    os << "# sparsity_report v1\nlayer,scale,zero_fraction,mean_hoyer\n";
    int k = static_cast<int>(rep.scale_sides.size());
    for (int l = 0; l < rep.layers; ++l)
        for (int s = 1; s <= k; ++s)
            os << l << "," << s << ","
               << csv_double(rep.zero_fraction[static_cast<size_t>(l * k + s - 1)]) << ","
               << csv_double(rep.mean_hoyer[static_cast<size_t>(l * k + s - 1)]) << "\n";
    write_text_file(path, os.str());
}

void write_cluster_csv(const std::string& path, const std::vector<ClusterResult>& results) {
    std::ostringstream os;
    os << "# cluster_report v1\nlayer,iteration,objective\n";
    for (size_t l = 0; l < results.size(); ++l)
        for (size_t i = 0; i < results[l].objectives.size(); ++i)
            os << l << "," << i << "," << csv_double(results[l].objectives[i]) << "\n";
    os << "# cluster sizes\nlayer,cluster,size\n";
    for (size_t l = 0; l < results.size(); ++l) {
        int num = 0;
        for (int a : results[l].assignment) num = std::max(num, a + 1);
        std::vector<int> sizes(static_cast<size_t>(num), 0);
        for (int a : results[l].assignment) sizes[static_cast<size_t>(a)]++;
        for (int c = 0; c < num; ++c)
            os << l << "," << c << "," << sizes[static_cast<size_t>(c)] << "\n";
    }
    write_text_file(path, os.str());
}

void write_router_csv(const std::string& path, const std::vector<RouterLayerReport>& reports) {
    std::ostringstream os;
    os << "# router_report v1\nlayer,pairs,init_holdout_mse,final_train_mse,final_holdout_mse\n";
    for (size_t l = 0; l < reports.size(); ++l)
        os << l << "," << reports[l].pairs << "," << csv_double(reports[l].init_holdout_mse)
           << "," << csv_double(reports[l].final_train_mse) << ","
           << csv_double(reports[l].final_holdout_mse) << "\n";
    write_text_file(path, os.str());
}

void write_flops_csv(const std::string& path, const FlopsReport& rep) {
    std::ostringstream os;
    os << "# flops_report v1 (multiply-add = 2 flops; each token counted once at its "
          "generation step)\n";
    os << "scale,layer,attn_flops,ffn_flops,router_flops\n";
    int k = static_cast<int>(rep.scale_sides.size());
    for (int s = 1; s <= k; ++s)
        for (int l = 0; l < rep.layers; ++l)
            os << s << "," << l << "," << rep.at(rep.attn, s, l) << "," << rep.at(rep.ffn, s, l)
               << "," << rep.at(rep.router, s, l) << "\n";
    os << "# gated_total," << rep.gated_total << "\n";
    os << "# dense_total," << rep.dense_total << "\n";
    os << "# gated_ffn_total," << rep.gated_ffn_total << "\n";
    os << "# dense_ffn_total," << rep.dense_ffn_total << "\n";
    os << "# router_total," << rep.router_total << "\n";
    os << "# reduction," << csv_double(rep.reduction()) << "\n";
    write_text_file(path, os.str());
}

std::string flops_table(const FlopsReport& rep) {
    std::ostringstream os;
    char line[160];
    os << "scale      attn        ffn     router   (summed over layers and passes)\n";
    int k = static_cast<int>(rep.scale_sides.size());
    for (int s = 1; s <= k; ++s) {
        int64_t attn = 0, ffn = 0, router = 0;
        for (int l = 0; l < rep.layers; ++l) {
            attn += rep.at(rep.attn, s, l);
            ffn += rep.at(rep.ffn, s, l);
            router += rep.at(rep.router, s, l);
        }
        std::snprintf(line, sizeof(line), "%5d %9.3fM %9.3fM %9.3fM\n", s, attn / 1e6,
                      ffn / 1e6, router / 1e6);
        os << line;
    }
    std::snprintf(line, sizeof(line),
                  "total %9.3fM gated vs %9.3fM dense  (reduction %.1f%%, router %.3fM)\n",
                  rep.gated_total / 1e6, rep.dense_total / 1e6, 100.0 * rep.reduction(),
                  rep.router_total / 1e6);
    os << line;
    return os.str();
}

void write_timing_csv(const std::string& path, const TimingReport& rep) {
    std::ostringstream os;
    os << "# timing_report v1 (median of " << rep.repeats << " repeats, batch " << rep.batch
       << ", threads " << rep.threads << ", mode " << forward_mode_name(rep.mode) << ", experts "
       << rep.num_experts << "x" << rep.expert_size << ")\n";
    os << "scale,total_sec,dispatch_sec,numeric_sec\n";
    for (size_t k = 0; k < rep.scale_sides.size(); ++k)
        os << (k + 1) << "," << csv_double(rep.total_sec[k]) << ","
           << csv_double(rep.dispatch_sec[k]) << "," << csv_double(rep.numeric_sec[k]) << "\n";
    write_text_file(path, os.str());
}

void write_trace_csv(const std::string& path, const GatingTrace& trace) {
    // pass-summed counts per (scale, layer, token)
    std::map<std::tuple<int, int, int, int>, int64_t> agg;
    for (const auto& e : trace.entries)
        agg[{e.scale, e.layer, e.row, e.col}] += e.count;
    std::ostringstream os;
    os << "# gating_trace v1 (experts_selected summed over guidance passes)\n";
    os << "scale,layer,token_row,token_col,experts_selected\n";
    for (const auto& [key, count] : agg)
        os << std::get<0>(key) << "," << std::get<1>(key) << "," << std::get<2>(key) << ","
           << std::get<3>(key) << "," << count << "\n";
    write_text_file(path, os.str());
}

// ----------------------------------------------------------------- pipeline

namespace {

std::string config_digest(const PipelineConfig& cfg) {
    std::ostringstream os;
    os << cfg.seed << "|" << cfg.n_train << "|" << cfg.n_heldout << "|";
    os << cfg.model.d_model << "," << cfg.model.depth << "," << cfg.model.heads << ","
       << cfg.model.d_ff << "," << cfg.model.vocab << "," << cfg.model.num_classes << ",";
    for (int s : cfg.model.scale_sides) os << s << "+";
    os << activation_name(cfg.model.activation) << "|";
    os << cfg.base_train.epochs << "," << cfg.base_train.batch << ","
       << csv_double(cfg.base_train.lr) << "," << csv_double(cfg.base_train.weight_decay) << "|";
    os << csv_double(cfg.sparsify.alpha) << "," << cfg.sparsify.epochs << ","
       << csv_double(cfg.sparsify.lr) << "|";
    os << cfg.cluster.num_experts << "," << cfg.cluster.max_iters << "|";
    os << cfg.router.epochs << "," << cfg.router.batch << "," << csv_double(cfg.router.lr) << ","
       << cfg.router.width << "," << cfg.router.max_harvest_items << "|";
    for (const auto& s : cfg.stages) os << s << ",";
    return os.str();
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& cfg) {
    static const std::vector<std::string> kChain = {"train", "sparsify", "moefy", "router"};
    require(!cfg.stages.empty() && cfg.stages.size() <= kChain.size(),
            "pipeline: empty or oversized stage list");
    for (size_t i = 0; i < cfg.stages.size(); ++i)
        require(cfg.stages[i] == kChain[i],
                "pipeline: stage '" + cfg.stages[i] + "' requires '" + kChain[i] +
                    "' at position " + std::to_string(i));

    fs::create_directories(cfg.out_dir);
    auto path = [&](const std::string& name) { return (fs::path(cfg.out_dir) / name).string(); };

    PipelineResult res;
    std::vector<std::string> artifact_names;

    // data
    TokenDataset train_ds = make_token_dataset(cfg.seed, cfg.n_train, cfg.model.pyramid());
    TokenDataset heldout = make_token_dataset(cfg.seed + 1, cfg.n_heldout, cfg.model.pyramid());
    res.train_data = path("train.nspd");
    res.heldout_data = path("heldout.nspd");
    write_dataset(res.train_data, train_ds);
    write_dataset(res.heldout_data, heldout);
    artifact_names.push_back("train.nspd");
    artifact_names.push_back("heldout.nspd");

    // stage: train
    NextScaleModel model = NextScaleModel::init(cfg.model, Rng::mix(cfg.seed, 100));
    {
        TrainConfig tc = cfg.base_train;
        tc.seed = Rng::mix(cfg.seed, 101);
        TrainLog log = train(model, train_ds, tc);
        res.dense_ckpt = path("dense.nsvm");
        save_checkpoint(res.dense_ckpt, model);
        write_train_log_csv(path("train_log.csv"), log);
        artifact_names.push_back("dense.nsvm");
        artifact_names.push_back("train_log.csv");
    }

    if (cfg.stages.size() >= 2) {
        relufy(model);
        SparsifyConfig sc = cfg.sparsify;
        sc.seed = Rng::mix(cfg.seed, 102);
        auto [log, rep] = finetune_sparse(model, train_ds, sc);
        res.sparse_ckpt = path("sparse.nsvm");
        save_checkpoint(res.sparse_ckpt, model);
        write_train_log_csv(path("sparse_log.csv"), log);
        write_sparsity_csv(path("sparsity_report.csv"), rep);
        artifact_names.push_back("sparse.nsvm");
        artifact_names.push_back("sparse_log.csv");
        artifact_names.push_back("sparsity_report.csv");
    }

    if (cfg.stages.size() >= 3) {
        ClusterConfig cc = cfg.cluster;
        cc.seed = Rng::mix(cfg.seed, 103);
        auto results = moefy_model(model, cc);
        res.moefied_ckpt = path("moefied.nsvm");
        save_checkpoint(res.moefied_ckpt, model);
        write_cluster_csv(path("cluster_report.csv"), results);
        artifact_names.push_back("moefied.nsvm");
        artifact_names.push_back("cluster_report.csv");
    }

    if (cfg.stages.size() >= 4) {
        RouterTrainConfig rc = cfg.router;
        rc.seed = Rng::mix(cfg.seed, 104);
        auto reports = train_router(model, train_ds, rc);
        res.routed_ckpt = path("routed.nsvm");
        save_checkpoint(res.routed_ckpt, model);
        write_router_csv(path("router_report.csv"), reports);
        artifact_names.push_back("routed.nsvm");
        artifact_names.push_back("router_report.csv");
    }

    nlohmann::ordered_json manifest;
    manifest["version"] = 1;
    manifest["seed"] = cfg.seed;
    manifest["config_hash"] = hex64(fnv1a64(config_digest(cfg)));
    manifest["stages"] = cfg.stages;
    nlohmann::ordered_json arts = nlohmann::ordered_json::array();
    for (const auto& name : artifact_names) {
        nlohmann::ordered_json a;
        a["name"] = name;
        a["fnv64"] = hex64(hash_file(path(name)));
        arts.push_back(a);
    }
    manifest["artifacts"] = arts;
    res.manifest_path = path("manifest.json");
    write_text_file(res.manifest_path, manifest.dump(2) + "\n");
    res.manifest_hash = hash_file(res.manifest_path);
    return res;
}

// -------------------------------------------------------------------- sweep

TauSchedule schedule_from_base(double base_tau, int switch_scale, int num_scales) {
    static const double kShape[3] = {0.81839, 0.81302, 0.78686};
    int n = num_scales - switch_scale + 1;
    require(n >= 1, "schedule_from_base: bad switch scale");
    std::vector<double> taus(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        double p = kShape[std::min(i, 2)] / kShape[0];
        taus[static_cast<size_t>(i)] = std::min(1.0, std::max(0.0, base_tau * p));
    }
    return TauSchedule::last_scales(switch_scale, taus, num_scales);
}

namespace {

CurvePoint eval_point(const NextScaleModel& model, const TokenDataset& heldout, double base_tau,
                      const std::string& schedule_id, const TauSchedule& schedule,
                      ForwardMode fmode, const SweepConfig& cfg) {
    CurvePoint pt;
    pt.tau = base_tau;
    pt.schedule_id = schedule_id;

    GatingSpec gs{fmode, schedule};
    pt.nll = nll_eval(model, heldout, fmode == ForwardMode::Dense ? std::nullopt
                                                                  : std::optional<GatingSpec>(gs));

    int k = model.cfg.num_scales();
    pt.experts_per_scale.assign(static_cast<size_t>(k), 0.0);
    double gated = 0.0, dense = 0.0;
    for (int g = 0; g < cfg.gen_per_point; ++g) {
        SamplerConfig sc;
        sc.cfg = cfg.cfg_scale;
        sc.seed = cfg.gen_seed + 1000ull * static_cast<uint64_t>(g);
        sc.mode = fmode;
        if (fmode != ForwardMode::Dense) sc.gating = schedule;
        GatingTrace trace;
        sample(model, g % model.cfg.num_classes, sc, &trace);
        FlopsReport rep = count_generation(model, trace, schedule);
        gated += static_cast<double>(rep.gated_total);
        dense += static_cast<double>(rep.dense_total);
        for (int s = 1; s <= k; ++s)
            pt.experts_per_scale[static_cast<size_t>(s - 1)] +=
                trace.mean_experts_per_token(s) / cfg.gen_per_point;
    }
    pt.gated_gflops = gated / cfg.gen_per_point / 1e9;
    pt.dense_gflops = dense / cfg.gen_per_point / 1e9;
    return pt;
}

}  // namespace

std::vector<CurvePoint> tau_sweep(const NextScaleModel& model, const TokenDataset& heldout,
                                  const std::vector<double>& taus, const SweepConfig& cfg) {
    int k = model.cfg.num_scales();
    int switch_scale = cfg.switch_scale > 0 ? cfg.switch_scale : std::max(1, k - 2);

    std::vector<CurvePoint> points;
    // dense baseline row first
    points.push_back(eval_point(model, heldout, -1.0, "dense", TauSchedule::all_dense(k),
                                ForwardMode::Dense, cfg));

    for (double t : taus) {
        TauSchedule sched = TauSchedule::all_dense(k);
        std::string id;
        switch (cfg.mode) {
            case SweepMode::LastScales:
                sched = schedule_from_base(t, switch_scale, k);
                id = "last" + std::to_string(k - switch_scale + 1);
                break;
            case SweepMode::Uniform:
                sched = TauSchedule::uniform(t, k);
                id = "uniform";
                break;
            case SweepMode::SingleScale:
                require(cfg.single_scale >= 1 && cfg.single_scale <= k,
                        "tau_sweep: bad single scale");
                sched = TauSchedule::single_scale(cfg.single_scale, t, k);
                id = "single" + std::to_string(cfg.single_scale);
                break;
        }
        points.push_back(eval_point(model, heldout, t, id, sched, cfg.forward_mode, cfg));
    }
    return points;
}

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& points,
                     const std::string& note) {
    std::ostringstream os;
    os << "# tau_sweep v1 (quality metric: held-out NLL per token)";
    if (!note.empty()) os << " " << note;
    os << "\n";
    os << "schedule,tau,gated_gflops,dense_gflops,nll";
    size_t k = points.empty() ? 0 : points[0].experts_per_scale.size();
    for (size_t s = 1; s <= k; ++s) os << ",experts_scale" << s;
    os << "\n";
    for (const auto& p : points) {
        os << p.schedule_id << "," << csv_double(p.tau) << "," << csv_double(p.gated_gflops)
           << "," << csv_double(p.dense_gflops) << "," << csv_double(p.nll);
        for (double e : p.experts_per_scale) os << "," << csv_double(e);
        os << "\n";
    }
    write_text_file(path, os.str());
}

std::vector<std::pair<int, std::vector<CurvePoint>>> scale_ablation(
    const NextScaleModel& model, const TokenDataset& heldout, const std::vector<double>& taus,
    const SweepConfig& cfg) {
    std::vector<std::pair<int, std::vector<CurvePoint>>> out;
    for (int s = 1; s <= model.cfg.num_scales(); ++s) {
        SweepConfig c = cfg;
        c.mode = SweepMode::SingleScale;
        c.single_scale = s;
        out.emplace_back(s, tau_sweep(model, heldout, taus, c));
    }
    return out;
}

void write_ablation_csv(const std::string& path,
                        const std::vector<std::pair<int, std::vector<CurvePoint>>>& curves) {
    std::ostringstream os;
    os << "# scale_ablation v1 (quality metric: held-out NLL per token)\n";
    os << "active_scale,schedule,tau,gated_gflops,dense_gflops,nll\n";
    for (const auto& [scale, points] : curves)
        for (const auto& p : points)
            os << scale << "," << p.schedule_id << "," << csv_double(p.tau) << ","
               << csv_double(p.gated_gflops) << "," << csv_double(p.dense_gflops) << ","
               << csv_double(p.nll) << "\n";
    write_text_file(path, os.str());
}

// ------------------------------------------------------------------ heatmap

std::vector<HeatmapGrid> expert_heatmap(const NextScaleModel& model, int class_id, uint64_t seed,
                                        const TauSchedule& schedule, ForwardMode mode,
                                        const std::string& out_dir) {
    require(model.moefied(), "expert_heatmap: MoEfied model required");
    SamplerConfig sc;
    sc.seed = seed;
    sc.mode = mode;
    sc.gating = schedule;
    GatingTrace trace;
    TokenHierarchy h = sample(model, class_id, sc, &trace);

    std::vector<HeatmapGrid> grids;
    for (int k = 1; k <= model.cfg.num_scales(); ++k) {
        if (!schedule.is_gated(k)) continue;
        HeatmapGrid g;
        g.scale = k;
        g.side = model.cfg.scale_sides[static_cast<size_t>(k - 1)];
        g.counts.assign(static_cast<size_t>(g.side * g.side), 0);
        grids.push_back(std::move(g));
    }
    for (const auto& e : trace.entries) {
        for (auto& g : grids) {
            if (g.scale != e.scale) continue;
            g.counts[static_cast<size_t>(e.row * g.side + e.col)] += e.count;
        }
    }

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        int passes = sc.cfg != 1.0 ? 2 : 1;
        int64_t full = static_cast<int64_t>(model.cfg.depth) * trace.num_experts * passes;
        std::ostringstream csv;
        csv << "# expert_heatmap v1 (counts summed over layers and guidance passes)\n";
        csv << "scale,token_row,token_col,experts_total\n";
        for (const auto& g : grids) {
            std::vector<double> norm(g.counts.size());
            for (size_t i = 0; i < g.counts.size(); ++i)
                norm[i] = full > 0 ? static_cast<double>(g.counts[i]) / static_cast<double>(full)
                                   : 0.0;
            write_pgm((fs::path(out_dir) / ("heat_scale" + std::to_string(g.scale) + ".pgm"))
                          .string(),
                      g.side, g.side, norm);
            for (int r = 0; r < g.side; ++r)
                for (int c = 0; c < g.side; ++c)
                    csv << g.scale << "," << r << "," << c << ","
                        << g.counts[static_cast<size_t>(r * g.side + c)] << "\n";
        }
        write_text_file((fs::path(out_dir) / "heatmap.csv").string(), csv.str());
        auto pixels = decode_to_image(h);
        write_pgm((fs::path(out_dir) / "sample.pgm").string(), model.cfg.scale_sides.back(),
                  model.cfg.scale_sides.back(), pixels);
    }
    return grids;
}

// -------------------------------------------------------------- alpha study

void alpha_study(const NextScaleModel& base, const TokenDataset& train_ds,
                 const TokenDataset& heldout, const AlphaStudyConfig& cfg,
                 const std::string& out_dir) {
    require(base.cfg.activation == Activation::Gelu, "alpha_study: start from the GeLU model");
    fs::create_directories(out_dir);

    std::ostringstream stats, curves;
    stats << "# alpha_study v1 (per-scale stats over the training set; quality: held-out "
             "NLL)\n";
    stats << "variant,alpha,scale,zero_fraction,mean_hoyer,nll_dense\n";
    curves << "# alpha_curves v1 (oracle routing on last three scales)\n";
    curves << "variant,alpha,tau,nll,gated_gflops,dense_gflops\n";

    int k = base.cfg.num_scales();
    int switch_scale = std::max(1, k - 2);

    auto run_variant = [&](const std::string& variant, double alpha, bool do_relufy) {
        NextScaleModel m = base;
        TrainLog log;
        SparsityReport rep;
        if (do_relufy) {
            relufy(m);
            SparsifyConfig sc = cfg.tune;
            sc.alpha = alpha;
            auto pr = finetune_sparse(m, train_ds, sc);
            log = std::move(pr.first);
            rep = std::move(pr.second);
        } else {
            TrainConfig tc;
            tc.epochs = cfg.tune.epochs;
            tc.batch = cfg.tune.batch;
            tc.lr = cfg.tune.lr;
            tc.warmup_frac = cfg.tune.warmup_frac;
            tc.clip = cfg.tune.clip;
            tc.weight_decay = cfg.tune.weight_decay;
            tc.label_drop = cfg.tune.label_drop;
            tc.hoyer_alpha = alpha;
            tc.seed = cfg.tune.seed;
            log = train(m, train_ds, tc);
            rep = sparsity_report(m, train_ds);
        }
        double nll_dense = nll_eval(m, heldout);
        for (int s = 1; s <= k; ++s) {
            double zf = 0.0, mh = 0.0;
            for (int l = 0; l < rep.layers; ++l) {
                zf += rep.zero_fraction[static_cast<size_t>(l * k + s - 1)];
                mh += rep.mean_hoyer[static_cast<size_t>(l * k + s - 1)];
            }
            stats << variant << "," << csv_double(alpha) << "," << s << ","
                  << csv_double(zf / rep.layers) << "," << csv_double(mh / rep.layers) << ","
                  << csv_double(nll_dense) << "\n";
        }

        ClusterConfig cc = cfg.cluster;
        moefy_model(m, cc);
        for (double t : cfg.oracle_taus) {
            TauSchedule sched = schedule_from_base(t, switch_scale, k);
            SweepConfig swc;
            swc.forward_mode = ForwardMode::Oracle;
            swc.gen_seed = cfg.gen_seed;
            swc.gen_per_point = 1;
            CurvePoint pt = [&] {
                GatingSpec gs{ForwardMode::Oracle, sched};
                CurvePoint p;
                p.tau = t;
                p.nll = nll_eval(m, heldout, gs);
                SamplerConfig sc2;
                sc2.seed = cfg.gen_seed;
                sc2.mode = ForwardMode::Oracle;
                sc2.gating = sched;
                GatingTrace trace;
                sample(m, 0, sc2, &trace);
                FlopsReport fr = count_generation(m, trace, sched);
                p.gated_gflops = static_cast<double>(fr.gated_total) / 1e9;
                p.dense_gflops = static_cast<double>(fr.dense_total) / 1e9;
                return p;
            }();
            curves << variant << "," << csv_double(alpha) << "," << csv_double(t) << ","
                   << csv_double(pt.nll) << "," << csv_double(pt.gated_gflops) << ","
                   << csv_double(pt.dense_gflops) << "\n";
        }
    };

    for (double a : cfg.alphas) run_variant("relu", a, true);
    run_variant("gelu-control", cfg.control_alpha, false);

    write_text_file((fs::path(out_dir) / "alpha_study.csv").string(), stats.str());
    write_text_file((fs::path(out_dir) / "alpha_curves.csv").string(), curves.str());
}

}  // namespace nsvar
