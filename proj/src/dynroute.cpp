#include "nsvar/dynroute.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nsvar/optim.hpp"
#include "nsvar/rng.hpp"

namespace nsvar {

std::vector<ClusterResult> moefy_model(NextScaleModel& model, const ClusterConfig& cfg) {
    require(!model.moefied(), "moefy_model: model is already MoEfied");
    require(cfg.num_experts >= 1 && model.cfg.d_ff % cfg.num_experts == 0,
            "moefy_model: expert count must divide d_ff");
    std::vector<ClusterResult> results;
    for (size_t l = 0; l < model.blocks.size(); ++l) {
        Block& blk = model.blocks[l];
        ClusterConfig layer_cfg = cfg;
        layer_cfg.seed = Rng::mix(cfg.seed, 0x6c61796572ull + l);
        ClusterResult res = balanced_kmeans(blk.w1, layer_cfg);
        blk.experts = split_ffn(blk.w1, blk.b1, blk.w2, blk.b2, res.assignment);
        blk.w1 = Tensor();
        blk.b1 = Tensor();
        blk.w2 = Tensor();
        blk.b2 = Tensor();
        results.push_back(std::move(res));
    }
    return results;
}

namespace {

struct RouterGraph {
    Graph graph;
    int mse_node = -1;
};

RouterGraph build_router_graph(int batch, int d_model, int width, int num_experts) {
    GraphBuilder b;
    int x = b.input("x", {batch, d_model}, false);
    int labels = b.input("labels", {batch, num_experts}, false);
    int w0 = b.input("w0", {width, d_model}, true);
    int b0 = b.input("b0", {width}, true);
    int w1 = b.input("w1", {width, width}, true);
    int b1 = b.input("b1", {width}, true);
    int w2 = b.input("w2", {num_experts, width}, true);
    int b2 = b.input("b2", {num_experts}, true);

    int h0 = b.gelu(b.add_bias(b.matmul(x, b.transpose(w0), "router.l0"), b0));
    int h1 = b.gelu(b.add_bias(b.matmul(h0, b.transpose(w1), "router.l1"), b1));
    int pred = b.abs(b.add_bias(b.matmul(h1, b.transpose(w2), "router.out"), b2));
    int diff = b.sub(pred, labels);
    int mse = b.mean_all(b.mul(diff, diff));
    b.mark_output(mse, "mse");

    RouterGraph rg;
    rg.mse_node = mse;
    rg.graph = b.build();
    return rg;
}

double router_mse(const RouterNet& r, const Tensor& x, const Tensor& labels) {
    Tensor pred = r.predict(x);
    double s = 0.0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        double d = pred.data[i] - labels.data[i];
        s += d * d;
    }
    return s / static_cast<double>(pred.numel());
}

Tensor take_rows(const Tensor& src, const std::vector<int64_t>& rows, int64_t begin, int64_t end) {
    int64_t cols = src.shape[1];
    Tensor out = Tensor::zeros({end - begin, cols});
    for (int64_t i = begin; i < end; ++i) {
        int64_t r = rows[static_cast<size_t>(i)];
        std::copy(src.data.begin() + r * cols, src.data.begin() + (r + 1) * cols,
                  out.data.begin() + (i - begin) * cols);
    }
    return out;
}

}  // namespace

std::vector<RouterLayerReport> train_router(NextScaleModel& model, const TokenDataset& ds,
                                            const RouterTrainConfig& cfg) {
    require(model.moefied(), "train_router: MoEfy the model first");
    require(!ds.items.empty(), "train_router: empty dataset");
    const ModelConfig& mc = model.cfg;
    int layers = mc.depth;
    int num_experts = model.blocks[0].experts->num_experts;
    int seq = mc.seq_len();

    int harvest = std::min<int>(cfg.max_harvest_items, static_cast<int>(ds.items.size()));
    int64_t pairs = static_cast<int64_t>(harvest) * seq;

    // teacher-forced FFN inputs per layer, then true norms as labels
    std::vector<Tensor> xs(static_cast<size_t>(layers));
    std::vector<Tensor> ys(static_cast<size_t>(layers));
    for (int l = 0; l < layers; ++l) {
        xs[static_cast<size_t>(l)] = Tensor::zeros({pairs, mc.d_model});
        ys[static_cast<size_t>(l)] = Tensor::zeros({pairs, num_experts});
    }
    for (int i = 0; i < harvest; ++i) {
        const auto& item = ds.items[static_cast<size_t>(i)];
        EvalCapture cap;
        cap.want_ffn_inputs = true;
        ForwardOptions opts;
        opts.capture = &cap;
        forward_train(model, item.tokens, item.class_id, opts);
        for (int l = 0; l < layers; ++l) {
            const Tensor& xin = cap.ffn_inputs[static_cast<size_t>(l)];
            const ExpertSet& set = *model.blocks[static_cast<size_t>(l)].experts;
            for (int t = 0; t < seq; ++t) {
                int64_t row = static_cast<int64_t>(i) * seq + t;
                const double* x = xin.data.data() + static_cast<int64_t>(t) * mc.d_model;
                std::copy(x, x + mc.d_model,
                          xs[static_cast<size_t>(l)].data.begin() + row * mc.d_model);
                auto norms = expert_norms(set, x, mc.activation);
                std::copy(norms.begin(), norms.end(),
                          ys[static_cast<size_t>(l)].data.begin() + row * num_experts);
            }
        }
    }

    int64_t holdout = static_cast<int64_t>(std::floor(cfg.holdout_frac * static_cast<double>(pairs)));
    int64_t train_n = pairs - holdout;
    require(train_n >= cfg.batch, "train_router: not enough pairs for one batch");

    std::vector<RouterLayerReport> reports;
    RouterGraph rg = build_router_graph(cfg.batch, mc.d_model, cfg.width, num_experts);

    for (int l = 0; l < layers; ++l) {
        RouterNet router = RouterNet::init(mc.d_model, cfg.width, num_experts,
                                           Rng::mix(cfg.seed, 7001ull + static_cast<uint64_t>(l)));

        std::vector<int64_t> all_rows(static_cast<size_t>(pairs));
        std::iota(all_rows.begin(), all_rows.end(), 0);
        Tensor hold_x = take_rows(xs[static_cast<size_t>(l)], all_rows, train_n, pairs);
        Tensor hold_y = take_rows(ys[static_cast<size_t>(l)], all_rows, train_n, pairs);

        RouterLayerReport rep;
        rep.pairs = pairs;
        rep.init_holdout_mse = holdout > 0 ? router_mse(router, hold_x, hold_y) : 0.0;

        std::vector<std::pair<std::string, Tensor*>> params = {
            {"w0", &router.w0}, {"b0", &router.b0}, {"w1", &router.w1},
            {"b1", &router.b1}, {"w2", &router.w2}, {"b2", &router.b2}};
        AdamConfig ac;
        ac.lr = cfg.lr;
        ac.clip_norm = 0.0;
        Adam opt(ac);

        int64_t steps_per_epoch = train_n / cfg.batch;
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            std::vector<int64_t> order(static_cast<size_t>(train_n));
            std::iota(order.begin(), order.end(), 0);
            Rng srng(Rng::mix(cfg.seed, 1000003ull * (l + 1) + epoch));
            for (int64_t i = train_n - 1; i > 0; --i) {
                int64_t j = static_cast<int64_t>(srng.below(static_cast<uint64_t>(i + 1)));
                std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
            }
            for (int64_t step = 0; step < steps_per_epoch; ++step) {
                Tensor bx = take_rows(xs[static_cast<size_t>(l)], order, step * cfg.batch,
                                      (step + 1) * cfg.batch);
                Tensor by = take_rows(ys[static_cast<size_t>(l)], order, step * cfg.batch,
                                      (step + 1) * cfg.batch);
                Bindings bind;
                bind.tensors["x"] = &bx;
                bind.tensors["labels"] = &by;
                for (auto& [name, t] : params) bind.tensors[name] = t;
                Evaluation ev = forward(rg.graph, bind);
                double mse = ev.value(rg.mse_node).item();
                require(std::isfinite(mse), "train_router: loss diverged");
                auto grads = backward(rg.graph, ev, rg.mse_node);
                opt.step(params, grads, cfg.lr);
            }
        }

        Tensor train_x = take_rows(xs[static_cast<size_t>(l)], all_rows, 0, train_n);
        Tensor train_y = take_rows(ys[static_cast<size_t>(l)], all_rows, 0, train_n);
        rep.final_train_mse = router_mse(router, train_x, train_y);
        rep.final_holdout_mse = holdout > 0 ? router_mse(router, hold_x, hold_y) : 0.0;
        model.blocks[static_cast<size_t>(l)].router = std::move(router);
        reports.push_back(rep);
    }
    return reports;
}

void prune_ffn(NextScaleModel& model, double keep_fraction, const TokenDataset& calibration,
               const std::vector<int>& scales) {
    require(!model.moefied(), "prune_ffn: baseline applies to the dense model");
    require(keep_fraction > 0.0 && keep_fraction <= 1.0, "prune_ffn: keep fraction in (0, 1]");
    require(!calibration.items.empty(), "prune_ffn: empty calibration set");
    for (int s : scales)
        require(s >= 1 && s <= model.cfg.num_scales(), "prune_ffn: bad scale index");

    const ModelConfig& cfg = model.cfg;
    int layers = cfg.depth;
    int64_t ff = cfg.d_ff;
    std::vector<std::vector<double>> mean_abs(static_cast<size_t>(layers),
                                              std::vector<double>(static_cast<size_t>(ff), 0.0));
    int64_t rows_used = 0;

    for (const auto& item : calibration.items) {
        EvalCapture cap;
        cap.want_ffn_acts = true;
        ForwardOptions opts;
        opts.capture = &cap;
        forward_train(model, item.tokens, item.class_id, opts);
        for (int l = 0; l < layers; ++l) {
            const Tensor& acts = cap.ffn_acts[static_cast<size_t>(l)];
            for (int64_t r = 0; r < acts.shape[0]; ++r) {
                int block = cfg.block_of_seq(static_cast<int>(r));
                if (std::find(scales.begin(), scales.end(), block) == scales.end()) continue;
                const double* row = acts.data.data() + r * ff;
                for (int64_t u = 0; u < ff; ++u)
                    mean_abs[static_cast<size_t>(l)][static_cast<size_t>(u)] += std::fabs(row[u]);
                if (l == 0) ++rows_used;
            }
        }
    }
    require(rows_used > 0, "prune_ffn: no calibration rows in the given scales");

    int keep_count = static_cast<int>(std::lround(keep_fraction * static_cast<double>(ff)));
    keep_count = std::max(1, std::min<int>(keep_count, static_cast<int>(ff)));

    for (int l = 0; l < layers; ++l) {
        std::vector<int64_t> order(static_cast<size_t>(ff));
        std::iota(order.begin(), order.end(), 0);
        const auto& scores = mean_abs[static_cast<size_t>(l)];
        std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            return scores[static_cast<size_t>(a)] < scores[static_cast<size_t>(b)];
        });
        PruneState ps;
        ps.keep.assign(static_cast<size_t>(ff), 1);
        for (int64_t i = 0; i < ff - keep_count; ++i)
            ps.keep[static_cast<size_t>(order[static_cast<size_t>(i)])] = 0;
        model.blocks[static_cast<size_t>(l)].prune = std::move(ps);
    }
    model.prune_scales = scales;
}

}  // namespace nsvar
