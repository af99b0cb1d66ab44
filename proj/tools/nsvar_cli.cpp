// Command-line driver for the next-scale MoE pipeline: data generation,
// training, sparsification, expert construction, routing, evaluation sweeps,
// heatmaps, and benchmarks.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "nsvar/harness.hpp"

using namespace nsvar;
namespace fs = std::filesystem;

namespace {

std::vector<int> parse_sides(const std::string& csv) {
    std::vector<int> out;
    size_t pos = 0;
    while (pos < csv.size()) {
        size_t next = csv.find(',', pos);
        if (next == std::string::npos) next = csv.size();
        out.push_back(std::stoi(csv.substr(pos, next - pos)));
        pos = next + 1;
    }
    return out;
}

TauSchedule schedule_from_flags(const std::vector<double>& taus, int switch_scale,
                                int num_scales, bool scale_aware) {
    if (taus.empty()) fail("a tau list is required for gated modes (--tau)");
    int sw = switch_scale > 0 ? switch_scale
                              : num_scales - static_cast<int>(taus.size()) + 1;
    if (scale_aware) return TauSchedule::scale_aware(sw, taus, num_scales);
    return TauSchedule::last_scales(sw, taus, num_scales);
}

void add_model_flags(CLI::App* cmd, ModelConfig& mc, std::string& sides, std::string& act) {
    cmd->add_option("--d-model", mc.d_model, "model width");
    cmd->add_option("--depth", mc.depth, "transformer blocks");
    cmd->add_option("--heads", mc.heads, "attention heads");
    cmd->add_option("--d-ff", mc.d_ff, "FFN hidden width");
    cmd->add_option("--vocab", mc.vocab, "token vocabulary size");
    cmd->add_option("--classes", mc.num_classes, "number of classes");
    cmd->add_option("--sides", sides, "scale sides, comma separated");
    cmd->add_option("--activation", act, "gelu or relu");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"next-scale autoregressive model with dynamic mixture-of-experts routing"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic token dataset");
    std::string gen_out = "data.nspd", gen_sides = "1,2,3,4,6,8";
    int gen_n = 512, gen_vocab = 16, gen_classes = 4;
    uint64_t gen_seed = 0;
    gen->add_option("--out", gen_out, "output dataset path")->required();
    gen->add_option("--n", gen_n, "number of samples");
    gen->add_option("--seed", gen_seed, "random seed");
    gen->add_option("--sides", gen_sides, "scale sides, comma separated");
    gen->add_option("--vocab", gen_vocab, "token vocabulary size");
    gen->add_option("--classes", gen_classes, "number of classes");

    auto* tr = app.add_subcommand("train", "train the dense model");
    std::string tr_data, tr_out = "dense.nsvm", tr_log, tr_sides = "1,2,3,4,6,8",
                tr_act = "gelu";
    ModelConfig tr_mc;
    TrainConfig tr_tc;
    tr->add_option("--data", tr_data, "training dataset (.nspd)")->required();
    tr->add_option("--out", tr_out, "output checkpoint");
    tr->add_option("--log", tr_log, "training log CSV");
    tr->add_option("--epochs", tr_tc.epochs, "training epochs");
    tr->add_option("--batch", tr_tc.batch, "batch size");
    tr->add_option("--lr", tr_tc.lr, "learning rate");
    tr->add_option("--weight-decay", tr_tc.weight_decay, "decoupled weight decay");
    tr->add_option("--clip", tr_tc.clip, "gradient norm clip");
    tr->add_option("--warmup", tr_tc.warmup_frac, "warmup fraction of one epoch");
    tr->add_option("--label-drop", tr_tc.label_drop, "null-class drop probability");
    tr->add_option("--seed", tr_tc.seed, "random seed");
    add_model_flags(tr, tr_mc, tr_sides, tr_act);

    auto* sp = app.add_subcommand("sparsify", "ReLUfy and fine-tune under the sparsity loss");
    std::string sp_in, sp_data, sp_out = "sparse.nsvm", sp_report, sp_log;
    SparsifyConfig sp_cfg;
    bool sp_no_relufy = false;
    sp->add_option("--in", sp_in, "input checkpoint")->required();
    sp->add_option("--data", sp_data, "training dataset")->required();
    sp->add_option("--out", sp_out, "output checkpoint");
    sp->add_option("--alpha", sp_cfg.alpha, "sparsity strength");
    sp->add_option("--epochs", sp_cfg.epochs, "fine-tune epochs");
    sp->add_option("--batch", sp_cfg.batch, "batch size");
    sp->add_option("--lr", sp_cfg.lr, "learning rate");
    sp->add_option("--weight-decay", sp_cfg.weight_decay, "decoupled weight decay");
    sp->add_option("--seed", sp_cfg.seed, "random seed");
    sp->add_option("--report", sp_report, "sparsity report CSV");
    sp->add_option("--log", sp_log, "training log CSV");
    sp->add_flag("--no-relufy", sp_no_relufy, "keep the GeLU activation (control run)");

    auto* mo = app.add_subcommand("moefy", "split every FFN into balanced experts");
    std::string mo_in, mo_out = "moefied.nsvm", mo_report;
    int mo_experts = 8, mo_expert_size = 0, mo_iters = 50;
    uint64_t mo_seed = 0;
    mo->add_option("--in", mo_in, "input checkpoint")->required();
    mo->add_option("--out", mo_out, "output checkpoint");
    mo->add_option("--experts", mo_experts, "number of experts per layer");
    mo->add_option("--expert-size", mo_expert_size,
                   "hidden units per expert (overrides --experts)");
    mo->add_option("--max-iters", mo_iters, "k-means iterations");
    mo->add_option("--seed", mo_seed, "random seed");
    mo->add_option("--report", mo_report, "cluster report CSV");

    auto* rt = app.add_subcommand("train-router", "fit norm-regression routers per layer");
    std::string rt_in, rt_data, rt_out = "routed.nsvm", rt_report;
    RouterTrainConfig rt_cfg;
    rt->add_option("--in", rt_in, "MoEfied checkpoint")->required();
    rt->add_option("--data", rt_data, "training dataset")->required();
    rt->add_option("--out", rt_out, "output checkpoint");
    rt->add_option("--epochs", rt_cfg.epochs, "router epochs");
    rt->add_option("--batch", rt_cfg.batch, "router batch size");
    rt->add_option("--lr", rt_cfg.lr, "router learning rate");
    rt->add_option("--router-width", rt_cfg.width, "router hidden width");
    rt->add_option("--harvest", rt_cfg.max_harvest_items, "sequences harvested for pairs");
    rt->add_option("--seed", rt_cfg.seed, "random seed");
    rt->add_option("--report", rt_report, "router report CSV");

    auto* sa = app.add_subcommand("sample", "generate images scale by scale");
    std::string sa_in, sa_out_dir = ".", sa_mode = "dense", sa_trace;
    SamplerConfig sa_cfg;
    std::vector<double> sa_taus;
    int sa_class = 0, sa_switch = 0, sa_per_class = 10;
    bool sa_all_classes = false;
    sa->add_option("--in", sa_in, "model checkpoint")->required();
    sa->add_option("--class-id", sa_class, "class to condition on");
    sa->add_option("--seed", sa_cfg.seed, "sampling seed");
    sa->add_option("--cfg", sa_cfg.cfg, "classifier-free guidance scale");
    sa->add_option("--top-k", sa_cfg.top_k, "sampling truncation parameter");
    sa->add_option("--top-p", sa_cfg.top_p, "nucleus sampling probability");
    sa->add_option("--mode", sa_mode, "dense | dynk_max | oracle | pruned");
    sa->add_option("--tau", sa_taus, "tau per gated scale")->delimiter(',');
    sa->add_option("--switch-scale", sa_switch, "first MoE scale (expert index switch)");
    sa->add_option("--out-dir", sa_out_dir, "output directory");
    sa->add_option("--trace", sa_trace, "gating trace CSV");
    std::string sa_flops;
    bool sa_scale_aware = false;
    sa->add_option("--flops", sa_flops, "FLOP report CSV for the generation trace");
    sa->add_flag("--scale-aware", sa_scale_aware, "enforce non-decreasing taus across scales");
    sa->add_option("--samples-per-class", sa_per_class, "images per class with --all-classes");
    sa->add_flag("--all-classes", sa_all_classes, "sample every class");

    auto* sw = app.add_subcommand("sweep-tau", "NLL/FLOP trade-off curve over a tau grid");
    std::string sw_in, sw_data, sw_out = "sweep.csv", sw_mode = "last", sw_fmode = "dynk_max";
    std::vector<double> sw_taus;
    int sw_switch = 0, sw_scale = 1, sw_gens = 2;
    double sw_cfg_scale = 1.5;
    std::string sw_in_b;
    sw->add_option("--in", sw_in, "routed checkpoint")->required();
    sw->add_option("--data", sw_data, "held-out dataset")->required();
    sw->add_option("--taus", sw_taus, "base tau grid")->required()->delimiter(',');
    sw->add_option("--mode", sw_mode, "last | uniform | single");
    sw->add_option("--scale", sw_scale, "active scale for single mode");
    sw->add_option("--switch-scale", sw_switch, "first MoE scale for last mode");
    sw->add_option("--forward", sw_fmode, "dynk_max | oracle");
    sw->add_option("--gens", sw_gens, "generation traces per point");
    sw->add_option("--cfg", sw_cfg_scale, "guidance scale for traces");
    sw->add_option("--out", sw_out, "output CSV");
    sw->add_option("--checkpoint-b", sw_in_b,
                   "optional second checkpoint (e.g. another depth); adds <out>.b.csv");

    auto* ab = app.add_subcommand("ablate-scale", "per-scale MoE ablation curves");
    std::string ab_in, ab_data, ab_out = "ablation.csv", ab_fmode = "dynk_max";
    std::vector<double> ab_taus;
    int ab_gens = 1;
    ab->add_option("--in", ab_in, "routed checkpoint")->required();
    ab->add_option("--data", ab_data, "held-out dataset")->required();
    ab->add_option("--taus", ab_taus, "tau grid")->required()->delimiter(',');
    ab->add_option("--forward", ab_fmode, "dynk_max | oracle");
    ab->add_option("--gens", ab_gens, "generation traces per point");
    ab->add_option("--out", ab_out, "output CSV");

    auto* hm = app.add_subcommand("heatmap", "per-token expert allocation maps");
    std::string hm_in, hm_out_dir = "heatmap", hm_mode = "dynk_max";
    std::vector<double> hm_taus;
    int hm_class = 0, hm_switch = 0;
    uint64_t hm_seed = 0;
    hm->add_option("--in", hm_in, "routed checkpoint")->required();
    hm->add_option("--class-id", hm_class, "class to condition on");
    hm->add_option("--seed", hm_seed, "sampling seed");
    hm->add_option("--tau", hm_taus, "tau per gated scale")->required()->delimiter(',');
    hm->add_option("--switch-scale", hm_switch, "first MoE scale");
    hm->add_option("--mode", hm_mode, "dynk_max | oracle");
    bool hm_scale_aware = false;
    hm->add_flag("--scale-aware", hm_scale_aware, "enforce non-decreasing taus across scales");
    hm->add_option("--out-dir", hm_out_dir, "output directory");

    auto* as = app.add_subcommand("alpha-study", "sparsity-strength sweep with a GeLU control");
    std::string as_in, as_train, as_heldout, as_out_dir = "alpha_study";
    AlphaStudyConfig as_cfg;
    as->add_option("--in", as_in, "dense (GeLU) checkpoint")->required();
    as->add_option("--train", as_train, "training dataset")->required();
    as->add_option("--heldout", as_heldout, "held-out dataset")->required();
    as->add_option("--alphas", as_cfg.alphas, "alpha grid")->delimiter(',');
    as->add_option("--epochs", as_cfg.tune.epochs, "fine-tune epochs per alpha");
    as->add_option("--batch", as_cfg.tune.batch, "batch size");
    as->add_option("--lr", as_cfg.tune.lr, "learning rate");
    as->add_option("--experts", as_cfg.cluster.num_experts, "experts for the oracle eval");
    as->add_option("--seed", as_cfg.tune.seed, "random seed");
    as->add_option("--out-dir", as_out_dir, "output directory");

    auto* be = app.add_subcommand("bench", "wall-clock benchmark per scale");
    std::string be_in, be_out = "timing.csv", be_mode = "dynk_max";
    std::vector<double> be_taus;
    int be_batch = 4, be_repeats = 3, be_threads = 0, be_switch = 0;
    uint64_t be_seed = 0;
    be->add_option("--in", be_in, "model checkpoint")->required();
    be->add_option("--mode", be_mode, "dense | dynk_max | oracle");
    be->add_option("--tau", be_taus, "tau per gated scale")->delimiter(',');
    be->add_option("--switch-scale", be_switch, "first MoE scale");
    be->add_option("--batch", be_batch, "generations per repeat");
    be->add_option("--repeats", be_repeats, "repeats for the median");
    be->add_option("--threads", be_threads, "pin worker threads (0 keeps the default)");
    be->add_option("--seed", be_seed, "sampling seed");
    be->add_option("--out", be_out, "output CSV");

    auto* pi = app.add_subcommand("pipeline", "run the staged pipeline end to end");
    PipelineConfig pi_cfg;
    std::string pi_stages = "train,sparsify,moefy,router", pi_sides = "1,2,3,4,6,8",
                pi_act = "gelu";
    pi->add_option("--out-dir", pi_cfg.out_dir, "output directory")->required();
    pi->add_option("--seed", pi_cfg.seed, "pipeline seed");
    pi->add_option("--stages", pi_stages, "prefix of train,sparsify,moefy,router");
    pi->add_option("--n-train", pi_cfg.n_train, "training samples");
    pi->add_option("--n-heldout", pi_cfg.n_heldout, "held-out samples");
    pi->add_option("--epochs", pi_cfg.base_train.epochs, "base training epochs");
    pi->add_option("--batch", pi_cfg.base_train.batch, "base batch size");
    pi->add_option("--lr", pi_cfg.base_train.lr, "base learning rate");
    pi->add_option("--alpha", pi_cfg.sparsify.alpha, "sparsity strength");
    pi->add_option("--sparsify-epochs", pi_cfg.sparsify.epochs, "sparsify epochs");
    pi->add_option("--experts", pi_cfg.cluster.num_experts, "experts per layer");
    pi->add_option("--router-epochs", pi_cfg.router.epochs, "router epochs");
    pi->add_option("--router-width", pi_cfg.router.width, "router hidden width");
    add_model_flags(pi, pi_cfg.model, pi_sides, pi_act);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            PyramidConfig cfg;
            cfg.scale_sides = parse_sides(gen_sides);
            cfg.vocab = gen_vocab;
            cfg.num_classes = gen_classes;
            TokenDataset ds = make_token_dataset(gen_seed, gen_n, cfg);
            write_dataset(gen_out, ds);
            std::printf("wrote %d samples to %s\n", gen_n, gen_out.c_str());
        } else if (*tr) {
            tr_mc.scale_sides = parse_sides(tr_sides);
            tr_mc.activation = activation_from_name(tr_act);
            TokenDataset ds = read_dataset(tr_data);
            NextScaleModel model = NextScaleModel::init(tr_mc, tr_tc.seed);
            TrainLog log = train(model, ds, tr_tc);
            save_checkpoint(tr_out, model);
            if (!tr_log.empty()) write_train_log_csv(tr_log, log);
            std::printf("trained %d epochs; final CE %.4f; wrote %s\n", tr_tc.epochs,
                        log.step_ce.empty() ? 0.0 : log.step_ce.back(), tr_out.c_str());
        } else if (*sp) {
            NextScaleModel model = load_checkpoint(sp_in);
            TokenDataset ds = read_dataset(sp_data);
            if (!sp_no_relufy) {
                if (!relufy(model))
                    std::fprintf(stderr, "warning: model is already ReLU; relufication skipped\n");
                auto [log, rep] = finetune_sparse(model, ds, sp_cfg);
                if (!sp_log.empty()) write_train_log_csv(sp_log, log);
                if (!sp_report.empty()) write_sparsity_csv(sp_report, rep);
                std::printf("sparsified (alpha %.4g); mean zero fraction %.4f\n", sp_cfg.alpha,
                            rep.mean_zero_fraction());
            } else {
                TrainConfig tc;
                tc.epochs = sp_cfg.epochs;
                tc.batch = sp_cfg.batch;
                tc.lr = sp_cfg.lr;
                tc.weight_decay = sp_cfg.weight_decay;
                tc.hoyer_alpha = sp_cfg.alpha;
                tc.seed = sp_cfg.seed;
                TrainLog log = train(model, ds, tc);
                if (!sp_log.empty()) write_train_log_csv(sp_log, log);
                std::printf("fine-tuned without relufication (alpha %.4g)\n", sp_cfg.alpha);
            }
            save_checkpoint(sp_out, model);
            std::printf("wrote %s\n", sp_out.c_str());
        } else if (*mo) {
            NextScaleModel model = load_checkpoint(mo_in);
            ClusterConfig cc;
            cc.num_experts = mo_expert_size > 0 ? model.cfg.d_ff / mo_expert_size : mo_experts;
            cc.max_iters = mo_iters;
            cc.seed = mo_seed;
            auto results = moefy_model(model, cc);
            save_checkpoint(mo_out, model);
            if (!mo_report.empty()) write_cluster_csv(mo_report, results);
            std::printf("split into %d experts of size %d; wrote %s\n", cc.num_experts,
                        model.blocks[0].experts->expert_size, mo_out.c_str());
        } else if (*rt) {
            NextScaleModel model = load_checkpoint(rt_in);
            TokenDataset ds = read_dataset(rt_data);
            auto reports = train_router(model, ds, rt_cfg);
            save_checkpoint(rt_out, model);
            if (!rt_report.empty()) write_router_csv(rt_report, reports);
            double mse = 0.0;
            for (const auto& r : reports) mse += r.final_holdout_mse / reports.size();
            std::printf("routers trained; mean holdout MSE %.5f; wrote %s\n", mse,
                        rt_out.c_str());
        } else if (*sa) {
            NextScaleModel model = load_checkpoint(sa_in);
            sa_cfg.mode = forward_mode_from_name(sa_mode);
            if (sa_cfg.mode == ForwardMode::DynkMax || sa_cfg.mode == ForwardMode::Oracle)
                sa_cfg.gating = schedule_from_flags(sa_taus, sa_switch,
                                                    model.cfg.num_scales(), sa_scale_aware);
            fs::create_directories(sa_out_dir);
            int side = model.cfg.scale_sides.back();
            auto emit = [&](int cls, uint64_t seed, const std::string& name) {
                SamplerConfig sc = sa_cfg;
                sc.seed = seed;
                GatingTrace trace;
                TokenHierarchy h = sample(model, cls, sc, &trace);
                write_pgm((fs::path(sa_out_dir) / name).string(), side, side,
                          decode_to_image(h));
                if (!sa_trace.empty()) write_trace_csv(sa_trace, trace);
                if (!sa_flops.empty()) {
                    TauSchedule sched = sc.gating.has_value()
                                            ? *sc.gating
                                            : TauSchedule::all_dense(model.cfg.num_scales());
                    FlopsReport rep = count_generation(model, trace, sched);
                    write_flops_csv(sa_flops, rep);
                    std::printf("%s", flops_table(rep).c_str());
                }
            };
            if (sa_all_classes) {
                for (int c = 0; c < model.cfg.num_classes; ++c)
                    for (int i = 0; i < sa_per_class; ++i)
                        emit(c, sa_cfg.seed + static_cast<uint64_t>(i),
                             "sample_c" + std::to_string(c) + "_" + std::to_string(i) + ".pgm");
            } else {
                emit(sa_class, sa_cfg.seed, "sample.pgm");
            }
            std::printf("samples written to %s\n", sa_out_dir.c_str());
        } else if (*sw) {
            NextScaleModel model = load_checkpoint(sw_in);
            TokenDataset heldout = read_dataset(sw_data);
            SweepConfig cfg;
            cfg.mode = sw_mode == "uniform"  ? SweepMode::Uniform
                       : sw_mode == "single" ? SweepMode::SingleScale
                                             : SweepMode::LastScales;
            cfg.switch_scale = sw_switch;
            cfg.single_scale = sw_scale;
            cfg.forward_mode = forward_mode_from_name(sw_fmode);
            cfg.gen_per_point = sw_gens;
            cfg.cfg_scale = sw_cfg_scale;
            auto points = tau_sweep(model, heldout, sw_taus, cfg);
            write_curve_csv(sw_out, points, "mode=" + sw_mode);
            if (!sw_in_b.empty()) {
                NextScaleModel other = load_checkpoint(sw_in_b);
                auto pts_b = tau_sweep(other, heldout, sw_taus, cfg);
                write_curve_csv(sw_out + ".b.csv", pts_b, "mode=" + sw_mode + " checkpoint-b");
            }
            std::printf("sweep (%zu points) written to %s\n", points.size(), sw_out.c_str());
        } else if (*ab) {
            NextScaleModel model = load_checkpoint(ab_in);
            TokenDataset heldout = read_dataset(ab_data);
            SweepConfig cfg;
            cfg.forward_mode = forward_mode_from_name(ab_fmode);
            cfg.gen_per_point = ab_gens;
            auto curves = scale_ablation(model, heldout, ab_taus, cfg);
            write_ablation_csv(ab_out, curves);
            std::printf("ablation (%zu scales) written to %s\n", curves.size(), ab_out.c_str());
        } else if (*hm) {
            NextScaleModel model = load_checkpoint(hm_in);
            TauSchedule sched = schedule_from_flags(hm_taus, hm_switch,
                                                    model.cfg.num_scales(), hm_scale_aware);
            auto grids = expert_heatmap(model, hm_class, hm_seed, sched,
                                        forward_mode_from_name(hm_mode), hm_out_dir);
            std::printf("%zu heatmaps written to %s\n", grids.size(), hm_out_dir.c_str());
        } else if (*as) {
            NextScaleModel base = load_checkpoint(as_in);
            TokenDataset train_ds = read_dataset(as_train);
            TokenDataset heldout = read_dataset(as_heldout);
            alpha_study(base, train_ds, heldout, as_cfg, as_out_dir);
            std::printf("alpha study written to %s\n", as_out_dir.c_str());
        } else if (*be) {
#ifdef _OPENMP
            if (be_threads > 0) omp_set_num_threads(be_threads);
#endif
            NextScaleModel model = load_checkpoint(be_in);
            ForwardMode mode = forward_mode_from_name(be_mode);
            std::optional<TauSchedule> sched;
            if (mode == ForwardMode::DynkMax || mode == ForwardMode::Oracle)
                sched = schedule_from_flags(be_taus, be_switch, model.cfg.num_scales(), false);
            TimingReport rep = bench_walltime(model, sched, mode, be_batch, be_repeats, be_seed);
            write_timing_csv(be_out, rep);
            std::printf("scale  total_ms  dispatch_ms  numeric_ms\n");
            for (size_t k = 0; k < rep.scale_sides.size(); ++k)
                std::printf("%5zu  %8.2f  %11.2f  %10.2f\n", k + 1, rep.total_sec[k] * 1e3,
                            rep.dispatch_sec[k] * 1e3, rep.numeric_sec[k] * 1e3);
            std::printf("timing written to %s (threads %d)\n", be_out.c_str(), rep.threads);
        } else if (*pi) {
            pi_cfg.model.scale_sides = parse_sides(pi_sides);
            pi_cfg.model.activation = activation_from_name(pi_act);
            pi_cfg.stages.clear();
            size_t pos = 0;
            while (pos < pi_stages.size()) {
                size_t next = pi_stages.find(',', pos);
                if (next == std::string::npos) next = pi_stages.size();
                pi_cfg.stages.push_back(pi_stages.substr(pos, next - pos));
                pos = next + 1;
            }
            PipelineResult res = run_pipeline(pi_cfg);
            std::printf("pipeline done; manifest %s\n", res.manifest_path.c_str());
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
