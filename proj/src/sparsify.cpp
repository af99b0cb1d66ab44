#include "nsvar/sparsify.hpp"

#include <cmath>

namespace nsvar {

bool relufy(NextScaleModel& model) {
    if (model.cfg.activation == Activation::Relu) return false;
    model.cfg.activation = Activation::Relu;
    return true;
}

double hoyer(const std::vector<double>& h) {
    double s = 0.0, q = 0.0;
    for (double v : h) {
        s += std::fabs(v);
        q += v * v;
    }
    if (q <= 0.0) return 0.0;
    return s * s / q;
}

double combined_loss(const NextScaleModel& model, const TokenDataset& ds,
                     const std::vector<int>& item_indices, double alpha) {
    require(!item_indices.empty(), "combined_loss: empty batch");
    require(alpha >= 0.0, "combined_loss: alpha must be >= 0");

    double total = 0.0;
    for (int idx : item_indices) {
        const auto& item = ds.items[static_cast<size_t>(idx)];
        EvalCapture cap;
        cap.want_ffn_acts = true;
        ForwardOptions opts;
        opts.capture = &cap;
        Tensor logits = forward_train(model, item.tokens, item.class_id, opts);
        double ce = cross_entropy(logits, flatten(item.tokens));
        double loss = ce;
        if (alpha > 0.0) {
            double hsum = 0.0;
            for (const Tensor& acts : cap.ffn_acts) {
                int64_t rows = acts.shape[0], cols = acts.shape[1];
                double layer_sum = 0.0;
                for (int64_t r = 0; r < rows; ++r) {
                    double s = 0.0, q = 0.0;
                    const double* row = acts.data.data() + r * cols;
                    for (int64_t j = 0; j < cols; ++j) {
                        s += std::fabs(row[j]);
                        q += row[j] * row[j];
                    }
                    if (q > 0.0) layer_sum += s * s / q;
                }
                hsum += layer_sum / static_cast<double>(rows);
            }
            loss += alpha * hsum / static_cast<double>(model.cfg.depth);
        }
        total += loss;
    }
    return total / static_cast<double>(item_indices.size());
}

double SparsityReport::mean_zero_fraction() const {
    double s = 0.0;
    for (double v : zero_fraction) s += v;
    return zero_fraction.empty() ? 0.0 : s / static_cast<double>(zero_fraction.size());
}

SparsityReport sparsity_report(const NextScaleModel& model, const TokenDataset& ds) {
    require(!model.moefied(), "sparsity_report: expects a dense-FFN model");
    require(!ds.items.empty(), "sparsity_report: empty dataset");
    const ModelConfig& cfg = model.cfg;
    int k = cfg.num_scales();
    int layers = cfg.depth;

    SparsityReport rep;
    rep.scale_sides = cfg.scale_sides;
    rep.layers = layers;
    rep.zero_fraction.assign(static_cast<size_t>(layers * k), 0.0);
    rep.mean_hoyer.assign(static_cast<size_t>(layers * k), 0.0);
    std::vector<int64_t> counts(static_cast<size_t>(layers * k), 0);   // activation entries
    std::vector<int64_t> row_counts(static_cast<size_t>(layers * k), 0);

    for (const auto& item : ds.items) {
        EvalCapture cap;
        cap.want_ffn_acts = true;
        ForwardOptions opts;
        opts.capture = &cap;
        forward_train(model, item.tokens, item.class_id, opts);
        for (int l = 0; l < layers; ++l) {
            const Tensor& acts = cap.ffn_acts[static_cast<size_t>(l)];
            int64_t rows = acts.shape[0], cols = acts.shape[1];
            for (int64_t r = 0; r < rows; ++r) {
                int block = cfg.block_of_seq(static_cast<int>(r));
                if (block < 1) continue;  // class slot has no scale
                size_t cell = static_cast<size_t>(l * k + block - 1);
                const double* row = acts.data.data() + r * cols;
                double s = 0.0, q = 0.0;
                int64_t zeros = 0;
                for (int64_t j = 0; j < cols; ++j) {
                    if (row[j] == 0.0) ++zeros;
                    s += std::fabs(row[j]);
                    q += row[j] * row[j];
                }
                rep.zero_fraction[cell] += static_cast<double>(zeros);
                counts[cell] += cols;
                if (q > 0.0) rep.mean_hoyer[cell] += s * s / q;
                row_counts[cell] += 1;
            }
        }
    }
    for (size_t i = 0; i < rep.zero_fraction.size(); ++i) {
        if (counts[i] > 0) rep.zero_fraction[i] /= static_cast<double>(counts[i]);
        if (row_counts[i] > 0) rep.mean_hoyer[i] /= static_cast<double>(row_counts[i]);
    }
    return rep;
}

std::pair<TrainLog, SparsityReport> finetune_sparse(NextScaleModel& model,
                                                    const TokenDataset& ds,
                                                    const SparsifyConfig& cfg) {
    require(model.cfg.activation == Activation::Relu,
            "finetune_sparse: model must be ReLUfied first");
    require(cfg.alpha >= 0.0, "finetune_sparse: alpha must be >= 0");

    TrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch = cfg.batch;
    tc.lr = cfg.lr;
    tc.warmup_frac = cfg.warmup_frac;
    tc.clip = cfg.clip;
    tc.weight_decay = cfg.weight_decay;
    tc.label_drop = cfg.label_drop;
    tc.hoyer_alpha = cfg.alpha;
    tc.seed = cfg.seed;

    TrainLog log = train(model, ds, tc);
    SparsityReport rep = sparsity_report(model, ds);
    return {std::move(log), std::move(rep)};
}

}  // namespace nsvar
