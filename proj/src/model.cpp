#include "nsvar/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "nsvar/kernels.hpp"
#include "nsvar/optim.hpp"
#include "nsvar/rng.hpp"

namespace nsvar {

// ------------------------------------------------------------------- config

void ModelConfig::validate() const {
    require(d_model > 0 && depth > 0 && heads > 0 && d_ff > 0, "model config: bad dims");
    require(d_model % heads == 0, "model config: d_model must divide into heads");
    require(vocab >= 2 && num_classes >= 1, "model config: bad vocab/classes");
    require(!scale_sides.empty() && scale_sides.front() == 1, "model config: bad scales");
    for (size_t i = 1; i < scale_sides.size(); ++i)
        require(scale_sides[i] > scale_sides[i - 1], "model config: sides must increase");
}

int ModelConfig::total_tokens() const {
    int n = 0;
    for (int s : scale_sides) n += s * s;
    return n;
}

std::vector<std::pair<int, int>> ModelConfig::boundaries() const {
    std::vector<std::pair<int, int>> b;
    int pos = 0;
    for (int s : scale_sides) {
        b.emplace_back(pos, pos + s * s);
        pos += s * s;
    }
    return b;
}

int ModelConfig::scale_of_flat(int flat_pos) const {
    int pos = 0;
    for (int k = 0; k < num_scales(); ++k) {
        pos += scale_sides[static_cast<size_t>(k)] * scale_sides[static_cast<size_t>(k)];
        if (flat_pos < pos) return k + 1;
    }
    fail("scale_of_flat: position out of range");
}

int ModelConfig::block_of_seq(int seq_pos) const {
    return seq_pos == 0 ? 0 : scale_of_flat(seq_pos - 1);
}

PyramidConfig ModelConfig::pyramid() const {
    PyramidConfig p;
    p.scale_sides = scale_sides;
    p.vocab = vocab;
    p.num_classes = num_classes;
    return p;
}

Tensor block_causal_mask(const std::vector<int>& scale_sides) {
    ModelConfig probe;
    probe.scale_sides = scale_sides;
    int s = probe.seq_len();
    Tensor m = Tensor::zeros({s, s});
    for (int i = 0; i < s; ++i) {
        int bi = probe.block_of_seq(i);
        for (int j = 0; j < s; ++j) {
            if (probe.block_of_seq(j) <= bi) m.data[static_cast<size_t>(i * s + j)] = 1.0;
        }
    }
    return m;
}

// -------------------------------------------------------------------- model

namespace {

Tensor gauss_tensor(std::vector<int64_t> shape, double std, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = rng.gaussian() * std;
    return t;
}

constexpr double kMaskDeny = -1e30;

}  // namespace

NextScaleModel NextScaleModel::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(Rng::mix(seed, 0x696e6974ull));
    NextScaleModel m;
    m.cfg = cfg;
    int d = cfg.d_model;
    m.tok_emb = gauss_tensor({cfg.vocab, d}, 0.02, rng);
    m.cls_emb = gauss_tensor({cfg.num_classes + 1, d}, 0.02, rng);
    m.pos_emb = gauss_tensor({cfg.seq_len(), d}, 0.01, rng);
    for (int i = 0; i < cfg.depth; ++i) {
        Block b;
        b.wq = gauss_tensor({d, d}, 0.02, rng);
        b.bq = Tensor::zeros({d});
        b.wk = gauss_tensor({d, d}, 0.02, rng);
        b.bk = Tensor::zeros({d});
        b.wv = gauss_tensor({d, d}, 0.02, rng);
        b.bv = Tensor::zeros({d});
        b.wo = gauss_tensor({d, d}, 0.02, rng);
        b.bo = Tensor::zeros({d});
        b.ln1_g = Tensor::full({d}, 1.0);
        b.ln1_b = Tensor::zeros({d});
        b.ln2_g = Tensor::full({d}, 1.0);
        b.ln2_b = Tensor::zeros({d});
        b.w1 = gauss_tensor({cfg.d_ff, d}, 0.02, rng);
        b.b1 = Tensor::zeros({cfg.d_ff});
        b.w2 = gauss_tensor({d, cfg.d_ff}, 0.02, rng);
        b.b2 = Tensor::zeros({d});
        m.blocks.push_back(std::move(b));
    }
    m.lnf_g = Tensor::full({d}, 1.0);
    m.lnf_b = Tensor::zeros({d});
    m.head_w = gauss_tensor({cfg.vocab, d}, 0.02, rng);
    m.head_b = Tensor::zeros({cfg.vocab});
    return m;
}

bool NextScaleModel::moefied() const {
    for (const auto& b : blocks)
        if (b.moefied()) return true;
    return false;
}

bool NextScaleModel::routed() const {
    for (const auto& b : blocks)
        if (!b.router.has_value()) return false;
    return !blocks.empty();
}

std::vector<std::pair<std::string, Tensor*>> NextScaleModel::named_params() {
    require(!moefied(), "named_params: model is MoEfied; dense training is over");
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("tok_emb", &tok_emb);
    out.emplace_back("cls_emb", &cls_emb);
    out.emplace_back("pos_emb", &pos_emb);
    for (size_t i = 0; i < blocks.size(); ++i) {
        std::string p = "blk" + std::to_string(i) + ".";
        Block& b = blocks[i];
        out.emplace_back(p + "wq", &b.wq);
        out.emplace_back(p + "bq", &b.bq);
        out.emplace_back(p + "wk", &b.wk);
        out.emplace_back(p + "bk", &b.bk);
        out.emplace_back(p + "wv", &b.wv);
        out.emplace_back(p + "bv", &b.bv);
        out.emplace_back(p + "wo", &b.wo);
        out.emplace_back(p + "bo", &b.bo);
        out.emplace_back(p + "ln1.g", &b.ln1_g);
        out.emplace_back(p + "ln1.b", &b.ln1_b);
        out.emplace_back(p + "ln2.g", &b.ln2_g);
        out.emplace_back(p + "ln2.b", &b.ln2_b);
        out.emplace_back(p + "ffn.w1", &b.w1);
        out.emplace_back(p + "ffn.b1", &b.b1);
        out.emplace_back(p + "ffn.w2", &b.w2);
        out.emplace_back(p + "ffn.b2", &b.b2);
    }
    out.emplace_back("lnf.g", &lnf_g);
    out.emplace_back("lnf.b", &lnf_b);
    out.emplace_back("head.w", &head_w);
    out.emplace_back("head.b", &head_b);
    return out;
}

// ------------------------------------------------------------------- inputs

std::vector<int> upsample_nn(const std::vector<int>& map, int src_side, int dst_side) {
    require(static_cast<int>(map.size()) == src_side * src_side, "upsample: size mismatch");
    require(dst_side >= src_side, "upsample: target side must not shrink");
    std::vector<int> out(static_cast<size_t>(dst_side * dst_side));
    for (int y = 0; y < dst_side; ++y) {
        int sy = y * src_side / dst_side;
        for (int x = 0; x < dst_side; ++x) {
            int sx = x * src_side / dst_side;
            out[static_cast<size_t>(y * dst_side + x)] = map[static_cast<size_t>(sy * src_side + sx)];
        }
    }
    return out;
}

std::vector<int64_t> input_indices(const ModelConfig& cfg,
                                   const std::vector<std::vector<int>>& maps, int class_slot,
                                   int upto_scale) {
    require(class_slot >= 0 && class_slot <= cfg.num_classes, "input_indices: bad class slot");
    require(upto_scale >= 1 && upto_scale <= cfg.num_scales(), "input_indices: bad scale");
    require(static_cast<int>(maps.size()) >= upto_scale - 1,
            "input_indices: need maps up to scale " + std::to_string(upto_scale - 1));
    int64_t cls_index = cfg.vocab + class_slot;
    std::vector<int64_t> idx;
    idx.push_back(cls_index);  // block 0: start/class token
    idx.push_back(cls_index);  // block 1: the scale-1 slot conditions on the class only
    for (int k = 2; k <= upto_scale; ++k) {
        int src = cfg.scale_sides[static_cast<size_t>(k - 2)];
        int dst = cfg.scale_sides[static_cast<size_t>(k - 1)];
        auto up = upsample_nn(maps[static_cast<size_t>(k - 2)], src, dst);
        for (int t : up) {
            require(t >= 0 && t < cfg.vocab, "input_indices: token outside vocab");
            idx.push_back(t);
        }
    }
    return idx;
}

// ---------------------------------------------------------------- inference

namespace {

void layer_norm_rows_infer(const Tensor& x, const Tensor& g, const Tensor& b, Tensor& out) {
    int64_t rows = x.shape[0], cols = x.shape[1];
    out = Tensor::zeros({rows, cols});
    for (int64_t i = 0; i < rows; ++i) {
        const double* xr = x.data.data() + i * cols;
        double* yr = out.data.data() + i * cols;
        double mu = 0.0;
        for (int64_t j = 0; j < cols; ++j) mu += xr[j];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (int64_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(cols);
        double inv = 1.0 / std::sqrt(var + 1e-5);
        for (int64_t j = 0; j < cols; ++j)
            yr[j] = (xr[j] - mu) * inv * g.data[static_cast<size_t>(j)] + b.data[static_cast<size_t>(j)];
    }
}

// multi-head attention over a prefix; allow[i * seq + j] gates attention
Tensor attention_infer(const Block& blk, const Tensor& xn, const ModelConfig& cfg,
                       const std::vector<uint8_t>& allow, int seq_stride) {
    int64_t p = xn.shape[0];
    int d = cfg.d_model;
    int dh = d / cfg.heads;
    double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor q = linear(xn, blk.wq, blk.bq);
    Tensor k = linear(xn, blk.wk, blk.bk);
    Tensor v = linear(xn, blk.wv, blk.bv);

    Tensor concat = Tensor::zeros({p, d});
    std::vector<double> qh(static_cast<size_t>(p * dh)), kht(static_cast<size_t>(dh * p)),
        vh(static_cast<size_t>(p * dh));
    std::vector<double> scores(static_cast<size_t>(p * p)), outh(static_cast<size_t>(p * dh));

    for (int h = 0; h < cfg.heads; ++h) {
        int off = h * dh;
        for (int64_t i = 0; i < p; ++i) {
            for (int j = 0; j < dh; ++j) {
                qh[static_cast<size_t>(i * dh + j)] = q.data[static_cast<size_t>(i * d + off + j)];
                kht[static_cast<size_t>(j * p + i)] = k.data[static_cast<size_t>(i * d + off + j)];
                vh[static_cast<size_t>(i * dh + j)] = v.data[static_cast<size_t>(i * d + off + j)];
            }
        }
        matmul(qh.data(), kht.data(), scores.data(), p, dh, p);
        for (int64_t i = 0; i < p; ++i) {
            double* row = scores.data() + i * p;
            const uint8_t* arow = allow.data() + i * seq_stride;
            for (int64_t j = 0; j < p; ++j)
                row[j] = arow[j] ? row[j] * sc : kMaskDeny;
            // softmax in place
            double mx = row[0];
            for (int64_t j = 1; j < p; ++j) mx = std::max(mx, row[j]);
            double s = 0.0;
            for (int64_t j = 0; j < p; ++j) {
                row[j] = std::exp(row[j] - mx);
                s += row[j];
            }
            for (int64_t j = 0; j < p; ++j) row[j] /= s;
        }
        matmul(scores.data(), vh.data(), outh.data(), p, p, dh);
        for (int64_t i = 0; i < p; ++i)
            for (int j = 0; j < dh; ++j)
                concat.data[static_cast<size_t>(i * d + off + j)] = outh[static_cast<size_t>(i * dh + j)];
    }
    return linear(concat, blk.wo, blk.bo);
}

double now_sec() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

bool scale_is_pruned(const std::vector<int>& prune_scales, int scale) {
    return std::find(prune_scales.begin(), prune_scales.end(), scale) != prune_scales.end();
}

// FFN / MoE dispatch for one block over all rows
Tensor ffn_dispatch(const NextScaleModel& model, const Block& blk, int layer, const Tensor& xn,
                    const std::vector<int>& row_scale, const ForwardOptions& opts) {
    const ModelConfig& cfg = model.cfg;
    int64_t p = xn.shape[0];
    int d = cfg.d_model;

    if (opts.capture && opts.capture->want_ffn_inputs)
        opts.capture->ffn_inputs[static_cast<size_t>(layer)] = xn;

    if (!blk.moefied()) {
        Tensor h = linear(xn, blk.w1, blk.b1);
        activate_inplace(h, cfg.activation);
        if (opts.capture && opts.capture->want_ffn_acts)
            opts.capture->ffn_acts[static_cast<size_t>(layer)] = h;
        if (opts.mode == ForwardMode::Pruned && blk.prune.has_value()) {
            int64_t ff = cfg.d_ff;
            for (int64_t i = 0; i < p; ++i) {
                if (!scale_is_pruned(model.prune_scales, row_scale[static_cast<size_t>(i)])) continue;
                double* row = h.data.data() + i * ff;
                for (int64_t u = 0; u < ff; ++u)
                    if (!blk.prune->keep[static_cast<size_t>(u)]) row[u] = 0.0;
            }
        }
        return linear(h, blk.w2, blk.b2);
    }

    const ExpertSet& set = *blk.experts;
    const auto all_bounds = cfg.boundaries();
    bool gating = (opts.mode == ForwardMode::DynkMax || opts.mode == ForwardMode::Oracle) &&
                  opts.schedule != nullptr;

    Tensor preds;
    if (gating && opts.mode == ForwardMode::DynkMax) {
        require(blk.router.has_value(), "ffn_dispatch: dynk_max needs a trained router");
        double t0 = opts.dispatch_sec ? now_sec() : 0.0;
        preds = blk.router->predict(xn);
        if (opts.dispatch_sec) *opts.dispatch_sec += now_sec() - t0;
    }

    Tensor out = Tensor::zeros({p, d});
    for (int64_t i = 0; i < p; ++i) {
        const double* x = xn.data.data() + i * d;
        int scale = row_scale[static_cast<size_t>(i)];
        bool row_gated = gating && scale >= 1 && opts.schedule->is_gated(scale);
        MoeRowResult res;
        if (!row_gated) {
            res = moe_forward(set, x, cfg.activation, ForwardMode::Dense, 0.0);
        } else {
            double tau = opts.schedule->tau_for(scale);
            const double* rp = nullptr;
            std::vector<double> norms;
            if (opts.mode == ForwardMode::DynkMax) {
                rp = preds.data.data() + i * set.num_experts;
            } else {
                double t0 = opts.dispatch_sec ? now_sec() : 0.0;
                norms = expert_norms(set, x, cfg.activation);
                if (opts.dispatch_sec) *opts.dispatch_sec += now_sec() - t0;
                rp = norms.data();
            }
            res = moe_forward(set, x, cfg.activation, ForwardMode::DynkMax, tau, rp);
            if (opts.trace && (opts.trace_only_scale < 0 || scale == opts.trace_only_scale)) {
                const auto& bounds = all_bounds[static_cast<size_t>(scale - 1)];
                int side = cfg.scale_sides[static_cast<size_t>(scale - 1)];
                int local = static_cast<int>(i) - 1 - bounds.first;
                GateEntry e;
                e.pass = opts.trace_pass;
                e.scale = static_cast<uint8_t>(scale);
                e.layer = static_cast<uint8_t>(layer);
                e.row = static_cast<uint16_t>(local / side);
                e.col = static_cast<uint16_t>(local % side);
                e.mask = res.mask;
                e.count = static_cast<uint16_t>(res.count);
                opts.trace->entries.push_back(e);
            }
        }
        std::memcpy(out.data.data() + i * d, res.y.data(), static_cast<size_t>(d) * sizeof(double));
    }
    return out;
}

}  // namespace

Tensor forward_seq(const NextScaleModel& model, const std::vector<int64_t>& indices,
                   const ForwardOptions& opts, int row_begin, int row_end) {
    const ModelConfig& cfg = model.cfg;
    int seq = cfg.seq_len();
    int p = static_cast<int>(indices.size());
    require(p >= 1 && p <= seq, "forward_seq: bad prefix length");
    require(0 <= row_begin && row_begin < row_end && row_end <= p, "forward_seq: bad row range");
    int d = cfg.d_model;

    if (opts.capture) {
        opts.capture->ffn_inputs.assign(static_cast<size_t>(cfg.depth), Tensor());
        opts.capture->ffn_acts.assign(static_cast<size_t>(cfg.depth), Tensor());
    }

    // embeddings: token rows then class rows
    Tensor x = Tensor::zeros({p, d});
    int64_t table_rows = cfg.vocab + cfg.num_classes + 1;
    for (int t = 0; t < p; ++t) {
        int64_t r = indices[static_cast<size_t>(t)];
        require(r >= 0 && r < table_rows, "forward_seq: embedding index out of range");
        const double* src = r < cfg.vocab
                                ? model.tok_emb.data.data() + r * d
                                : model.cls_emb.data.data() + (r - cfg.vocab) * d;
        double* dst = x.data.data() + static_cast<int64_t>(t) * d;
        const double* pos = model.pos_emb.data.data() + static_cast<int64_t>(t) * d;
        for (int j = 0; j < d; ++j) dst[j] = src[j] + pos[j];
    }

    // block-causal allow mask over the prefix
    std::vector<uint8_t> allow(static_cast<size_t>(p) * static_cast<size_t>(p));
    std::vector<int> row_scale(static_cast<size_t>(p));
    for (int i = 0; i < p; ++i) row_scale[static_cast<size_t>(i)] = cfg.block_of_seq(i);
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j)
            allow[static_cast<size_t>(i) * p + j] =
                row_scale[static_cast<size_t>(j)] <= row_scale[static_cast<size_t>(i)] ? 1 : 0;

    Tensor xn;
    for (int l = 0; l < cfg.depth; ++l) {
        const Block& blk = model.blocks[static_cast<size_t>(l)];
        layer_norm_rows_infer(x, blk.ln1_g, blk.ln1_b, xn);
        Tensor a = attention_infer(blk, xn, cfg, allow, p);
        for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += a.data[i];
        layer_norm_rows_infer(x, blk.ln2_g, blk.ln2_b, xn);
        Tensor f = ffn_dispatch(model, blk, l, xn, row_scale, opts);
        for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += f.data[i];
    }

    // final norm + head on the requested rows only
    int nrows = row_end - row_begin;
    Tensor tail = Tensor::zeros({nrows, d});
    std::memcpy(tail.data.data(), x.data.data() + static_cast<int64_t>(row_begin) * d,
                static_cast<size_t>(nrows) * d * sizeof(double));
    Tensor tail_n;
    layer_norm_rows_infer(tail, model.lnf_g, model.lnf_b, tail_n);
    Tensor logits = linear(tail_n, model.head_w, model.head_b);
    ensure_finite(logits, "forward_seq logits");
    return logits;
}

Tensor forward_train(const NextScaleModel& model, const TokenHierarchy& h, int class_id,
                     const ForwardOptions& opts) {
    const ModelConfig& cfg = model.cfg;
    require(h.scale_sides == cfg.scale_sides && h.vocab == cfg.vocab,
            "forward_train: hierarchy geometry mismatch");
    require(class_id >= 0 && class_id <= cfg.num_classes, "forward_train: bad class");
    auto idx = input_indices(cfg, h.maps, class_id, cfg.num_scales());
    return forward_seq(model, idx, opts, 1, cfg.seq_len());
}

double cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    require(logits.rank() == 2, "cross_entropy: logits must be 2-d");
    int64_t rows = logits.shape[0], cols = logits.shape[1];
    require(static_cast<int64_t>(targets.size()) == rows, "cross_entropy: target count mismatch");
    double total = 0.0;
    for (int64_t i = 0; i < rows; ++i) {
        int y = targets[static_cast<size_t>(i)];
        require(y >= 0 && y < cols, "cross_entropy: target outside vocab");
        const double* lr = logits.data.data() + i * cols;
        double m = lr[0];
        for (int64_t j = 1; j < cols; ++j) m = std::max(m, lr[j]);
        double s = 0.0;
        for (int64_t j = 0; j < cols; ++j) s += std::exp(lr[j] - m);
        total += m + std::log(s) - lr[y];
    }
    return total / static_cast<double>(rows);
}

// ------------------------------------------------------------------ training

TrainGraph build_train_graph(const ModelConfig& cfg, double hoyer_alpha) {
    cfg.validate();
    int d = cfg.d_model;
    int seq = cfg.seq_len();
    int n_tokens = cfg.total_tokens();
    int dh = d / cfg.heads;

    GraphBuilder b;
    int tok_emb = b.input("tok_emb", {cfg.vocab, d}, true);
    int cls_emb = b.input("cls_emb", {cfg.num_classes + 1, d}, true);
    int pos_emb = b.input("pos_emb", {seq, d}, true);
    int tokens = b.index_input("tokens", seq);
    int targets = b.index_input("targets", n_tokens);

    Tensor mask_add = Tensor::zeros({seq, seq});
    {
        Tensor allow = block_causal_mask(cfg.scale_sides);
        for (size_t i = 0; i < mask_add.data.size(); ++i)
            mask_add.data[i] = allow.data[i] > 0.5 ? 0.0 : -1e30;
    }
    int mask = b.constant(std::move(mask_add), "mask");

    int table = b.concat_rows({tok_emb, cls_emb});
    int x = b.add(b.gather(table, tokens, "embed"), pos_emb);

    std::vector<int> hoyer_nodes;
    for (int l = 0; l < cfg.depth; ++l) {
        std::string p = "blk" + std::to_string(l) + ".";
        int wq = b.input(p + "wq", {d, d}, true), bq = b.input(p + "bq", {d}, true);
        int wk = b.input(p + "wk", {d, d}, true), bk = b.input(p + "bk", {d}, true);
        int wv = b.input(p + "wv", {d, d}, true), bv = b.input(p + "bv", {d}, true);
        int wo = b.input(p + "wo", {d, d}, true), bo = b.input(p + "bo", {d}, true);
        int g1 = b.input(p + "ln1.g", {d}, true), b1v = b.input(p + "ln1.b", {d}, true);
        int g2 = b.input(p + "ln2.g", {d}, true), b2v = b.input(p + "ln2.b", {d}, true);
        int w1 = b.input(p + "ffn.w1", {cfg.d_ff, d}, true);
        int fb1 = b.input(p + "ffn.b1", {cfg.d_ff}, true);
        int w2 = b.input(p + "ffn.w2", {d, cfg.d_ff}, true);
        int fb2 = b.input(p + "ffn.b2", {d}, true);

        int xn = b.layer_norm_rows(x, g1, b1v);
        int q = b.add_bias(b.matmul(xn, b.transpose(wq), p + "q"), bq);
        int k = b.add_bias(b.matmul(xn, b.transpose(wk), p + "k"), bk);
        int v = b.add_bias(b.matmul(xn, b.transpose(wv), p + "v"), bv);
        std::vector<int> heads_out;
        for (int h = 0; h < cfg.heads; ++h) {
            int qh = b.slice_cols(q, h * dh, (h + 1) * dh);
            int kh = b.slice_cols(k, h * dh, (h + 1) * dh);
            int vh = b.slice_cols(v, h * dh, (h + 1) * dh);
            int scores = b.scale(b.matmul(qh, b.transpose(kh), p + "scores"),
                                 1.0 / std::sqrt(static_cast<double>(dh)));
            int masked = b.add(scores, mask);
            int probs = b.softmax_rows(masked);
            heads_out.push_back(b.matmul(probs, vh, p + "attnv"));
        }
        int cat = b.concat_cols(heads_out);
        int attn = b.add_bias(b.matmul(cat, b.transpose(wo), p + "proj"), bo);
        x = b.add(x, attn);

        int xf = b.layer_norm_rows(x, g2, b2v);
        int pre = b.add_bias(b.matmul(xf, b.transpose(w1), p + "ffn1"), fb1);
        int h = cfg.activation == Activation::Relu ? b.relu(pre) : b.gelu(pre);
        hoyer_nodes.push_back(b.hoyer_rows_mean(h));
        int f = b.add_bias(b.matmul(h, b.transpose(w2), p + "ffn2"), fb2);
        x = b.add(x, f);
    }

    int gf = b.input("lnf.g", {d}, true), bf = b.input("lnf.b", {d}, true);
    int head_w = b.input("head.w", {cfg.vocab, d}, true);
    int head_b = b.input("head.b", {cfg.vocab}, true);
    int xf = b.layer_norm_rows(x, gf, bf);
    int rows = b.slice_rows(xf, 1, seq);
    int logits = b.add_bias(b.matmul(rows, b.transpose(head_w), "head"), head_b);
    int ce = b.ce_mean(logits, targets);

    int hsum = hoyer_nodes[0];
    for (size_t i = 1; i < hoyer_nodes.size(); ++i) hsum = b.add(hsum, hoyer_nodes[i]);
    int hmean = b.scale(hsum, 1.0 / static_cast<double>(cfg.depth));

    int loss = hoyer_alpha > 0.0 ? b.add(ce, b.scale(hmean, hoyer_alpha)) : ce;

    b.mark_output(logits, "logits");
    b.mark_output(ce, "ce");
    b.mark_output(hmean, "hoyer");
    b.mark_output(loss, "loss");

    TrainGraph tg;
    tg.logits_node = logits;
    tg.ce_node = ce;
    tg.hoyer_node = hmean;
    tg.loss_node = loss;
    tg.graph = b.build();
    return tg;
}

TrainLog train(NextScaleModel& model, const TokenDataset& ds, const TrainConfig& cfg) {
    require(!model.moefied(), "train: dense training requires a non-MoEfied model");
    require(!ds.items.empty(), "train: empty dataset");
    require(ds.config.scale_sides == model.cfg.scale_sides && ds.config.vocab == model.cfg.vocab,
            "train: dataset geometry mismatch");
    TrainLog log;
    if (cfg.epochs <= 0) return log;

    int n = static_cast<int>(ds.items.size());
    int batch = std::min(cfg.batch, n);
    int steps_per_epoch = n / batch;
    require(steps_per_epoch >= 1, "train: batch larger than dataset");
    int64_t total_steps = static_cast<int64_t>(cfg.epochs) * steps_per_epoch;
    int64_t warmup = static_cast<int64_t>(std::ceil(cfg.warmup_frac * steps_per_epoch));

    TrainGraph tg = build_train_graph(model.cfg, cfg.hoyer_alpha);
    auto params = model.named_params();

    // cached per-item index streams; the class slot entries get patched on drop
    std::vector<std::vector<int64_t>> tok_idx(static_cast<size_t>(n));
    std::vector<std::vector<int64_t>> tgt_idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto& item = ds.items[static_cast<size_t>(i)];
        require(item.class_id >= 0 && item.class_id < model.cfg.num_classes,
                "train: class id outside model range");
        tok_idx[static_cast<size_t>(i)] =
            input_indices(model.cfg, item.tokens.maps, item.class_id, model.cfg.num_scales());
        auto flat = flatten(item.tokens);
        tgt_idx[static_cast<size_t>(i)].assign(flat.begin(), flat.end());
    }
    int64_t null_slot = model.cfg.vocab + model.cfg.num_classes;

    AdamConfig ac;
    ac.lr = cfg.lr;
    ac.clip_norm = cfg.clip;
    ac.weight_decay = cfg.weight_decay;
    Adam opt(ac);

    std::vector<std::map<std::string, Tensor>> slot_grads(static_cast<size_t>(batch));
    std::vector<double> slot_ce(static_cast<size_t>(batch)), slot_hoyer(static_cast<size_t>(batch)),
        slot_loss(static_cast<size_t>(batch));

    int64_t step_id = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(Rng::mix(cfg.seed, 2ull * epoch + 1));
        for (int i = n - 1; i > 0; --i) {
            int j = static_cast<int>(shuffle_rng.below(static_cast<uint64_t>(i + 1)));
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }
        Rng drop_rng(Rng::mix(cfg.seed, 2ull * epoch + 2));

        double epoch_ce_sum = 0.0;
        for (int step = 0; step < steps_per_epoch; ++step) {
            std::vector<std::vector<int64_t>> batch_tokens(static_cast<size_t>(batch));
            for (int s = 0; s < batch; ++s) {
                int item = order[static_cast<size_t>(step * batch + s)];
                batch_tokens[static_cast<size_t>(s)] = tok_idx[static_cast<size_t>(item)];
                if (cfg.label_drop > 0.0 && drop_rng.uniform() < cfg.label_drop) {
                    batch_tokens[static_cast<size_t>(s)][0] = null_slot;
                    batch_tokens[static_cast<size_t>(s)][1] = null_slot;
                }
            }

            // exceptions cannot unwind an OpenMP region; carry them out by hand
            std::vector<std::string> slot_err(static_cast<size_t>(batch));
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int s = 0; s < batch; ++s) {
                try {
                    int item = order[static_cast<size_t>(step * batch + s)];
                    Bindings bind;
                    for (auto& [name, t] : params) bind.tensors[name] = t;
                    bind.indices["tokens"] = &batch_tokens[static_cast<size_t>(s)];
                    bind.indices["targets"] = &tgt_idx[static_cast<size_t>(item)];
                    Evaluation ev = forward(tg.graph, bind);
                    slot_ce[static_cast<size_t>(s)] = ev.value(tg.ce_node).item();
                    slot_hoyer[static_cast<size_t>(s)] = ev.value(tg.hoyer_node).item();
                    slot_loss[static_cast<size_t>(s)] = ev.value(tg.loss_node).item();
                    slot_grads[static_cast<size_t>(s)] = backward(tg.graph, ev, tg.loss_node);
                } catch (const std::exception& e) {
                    slot_err[static_cast<size_t>(s)] = e.what();
                }
            }
            for (int s = 0; s < batch; ++s)
                if (!slot_err[static_cast<size_t>(s)].empty())
                    fail("train: " + slot_err[static_cast<size_t>(s)]);

            std::map<std::string, Tensor> gsum;
            double inv = 1.0 / static_cast<double>(batch);
            for (auto& [name, t] : params) gsum[name] = Tensor::zeros(t->shape);
            for (int s = 0; s < batch; ++s) {
                for (auto& [name, g] : slot_grads[static_cast<size_t>(s)]) {
                    Tensor& acc = gsum[name];
                    for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += g.data[i] * inv;
                }
            }

            double ce_mean = 0.0, hoyer_mean = 0.0, loss_mean = 0.0;
            for (int s = 0; s < batch; ++s) {
                ce_mean += slot_ce[static_cast<size_t>(s)] * inv;
                hoyer_mean += slot_hoyer[static_cast<size_t>(s)] * inv;
                loss_mean += slot_loss[static_cast<size_t>(s)] * inv;
            }
            require(std::isfinite(loss_mean), "train: loss diverged (non-finite)");
            log.step_ce.push_back(ce_mean);
            log.step_hoyer.push_back(hoyer_mean);
            log.step_loss.push_back(loss_mean);
            epoch_ce_sum += ce_mean;

            double lr_t = linear_lr(cfg.lr, step_id, warmup, total_steps);
            opt.step(params, gsum, lr_t);
            ++step_id;
        }
        log.epoch_ce.push_back(epoch_ce_sum / steps_per_epoch);
    }
    return log;
}

// ------------------------------------------------------------------ sampling

int sample_token_filtered(const double* logits, int vocab, int top_k, double top_p, Rng& rng) {
    std::vector<int> ord(static_cast<size_t>(vocab));
    std::iota(ord.begin(), ord.end(), 0);
    std::stable_sort(ord.begin(), ord.end(),
                     [&](int a, int b) { return logits[a] > logits[b]; });
    int k = std::min(top_k, vocab);

    // softmax over the top-k set
    double mx = logits[ord[0]];
    std::vector<double> e(static_cast<size_t>(k));
    double total = 0.0;
    for (int i = 0; i < k; ++i) {
        e[static_cast<size_t>(i)] = std::exp(logits[ord[static_cast<size_t>(i)]] - mx);
        total += e[static_cast<size_t>(i)];
    }

    // smallest prefix with cumulative mass >= top_p, boundary included
    int kept = k;
    double cum = 0.0;
    for (int i = 0; i < k; ++i) {
        cum += e[static_cast<size_t>(i)] / total;
        if (cum >= top_p) {
            kept = i + 1;
            break;
        }
    }

    double ksum = 0.0;
    for (int i = 0; i < kept; ++i) ksum += e[static_cast<size_t>(i)];
    double u = rng.uniform() * ksum;
    double acc = 0.0;
    for (int i = 0; i < kept; ++i) {
        acc += e[static_cast<size_t>(i)];
        if (u < acc) return ord[static_cast<size_t>(i)];
    }
    return ord[static_cast<size_t>(kept - 1)];
}

TokenHierarchy sample(const NextScaleModel& model, int class_id, const SamplerConfig& sc,
                      GatingTrace* trace, std::vector<ScaleTiming>* timings) {
    const ModelConfig& cfg = model.cfg;
    require(class_id >= 0 && class_id < cfg.num_classes, "sample: bad class id");
    require(sc.top_k >= 1, "sample: top_k must be >= 1");
    require(sc.top_p > 0.0 && sc.top_p <= 1.0, "sample: top_p outside (0, 1]");
    require(sc.cfg >= 0.0, "sample: guidance scale must be >= 0");
    if (sc.mode == ForwardMode::DynkMax || sc.mode == ForwardMode::Oracle)
        require(sc.gating.has_value(), "sample: gated mode needs a tau schedule");

    int passes = sc.cfg != 1.0 ? 2 : 1;
    if (trace) {
        trace->scale_sides = cfg.scale_sides;
        trace->layers = cfg.depth;
        trace->num_experts = model.moefied() ? model.blocks[0].experts->num_experts : 0;
        trace->passes = passes;
        trace->mode = sc.mode;
        trace->entries.clear();
    }
    if (timings) timings->assign(static_cast<size_t>(cfg.num_scales()), ScaleTiming{});

    Rng rng(Rng::mix(sc.seed, 0x73616d706c65ull));
    auto bounds = cfg.boundaries();
    int top_k = std::min(sc.top_k, cfg.vocab);

    TokenHierarchy h;
    h.scale_sides = cfg.scale_sides;
    h.vocab = cfg.vocab;

    for (int k = 1; k <= cfg.num_scales(); ++k) {
        double t0 = now_sec();
        double dispatch = 0.0;

        ForwardOptions opts;
        opts.mode = sc.mode;
        opts.schedule = sc.gating.has_value() ? &*sc.gating : nullptr;
        opts.trace = trace;
        opts.trace_only_scale = k;
        opts.dispatch_sec = &dispatch;

        int row0 = 1 + bounds[static_cast<size_t>(k - 1)].first;
        int row1 = 1 + bounds[static_cast<size_t>(k - 1)].second;

        auto idx_c = input_indices(cfg, h.maps, class_id, k);
        opts.trace_pass = 0;
        Tensor cond = forward_seq(model, idx_c, opts, row0, row1);

        Tensor guided;
        if (passes == 2) {
            auto idx_u = input_indices(cfg, h.maps, cfg.num_classes, k);
            opts.trace_pass = 1;
            Tensor uncond = forward_seq(model, idx_u, opts, row0, row1);
            guided = Tensor::zeros(cond.shape);
            for (size_t i = 0; i < guided.data.size(); ++i)
                guided.data[i] =
                    uncond.data[i] + sc.cfg * (cond.data[i] - uncond.data[i]);
        } else {
            guided = std::move(cond);
        }

        int side = cfg.scale_sides[static_cast<size_t>(k - 1)];
        std::vector<int> map(static_cast<size_t>(side * side));
        for (int t = 0; t < side * side; ++t)
            map[static_cast<size_t>(t)] = sample_token_filtered(
                guided.data.data() + static_cast<int64_t>(t) * cfg.vocab, cfg.vocab, top_k,
                sc.top_p, rng);
        h.maps.push_back(std::move(map));

        if (timings) {
            (*timings)[static_cast<size_t>(k - 1)].total_sec = now_sec() - t0;
            (*timings)[static_cast<size_t>(k - 1)].dispatch_sec = dispatch;
        }
    }
    return h;
}

double nll_eval(const NextScaleModel& model, const TokenDataset& ds,
                const std::optional<GatingSpec>& gating) {
    require(!ds.items.empty(), "nll_eval: empty dataset");
    require(ds.config.scale_sides == model.cfg.scale_sides && ds.config.vocab == model.cfg.vocab,
            "nll_eval: dataset geometry mismatch");
    int n = static_cast<int>(ds.items.size());
    std::vector<double> item_ce(static_cast<size_t>(n));
    std::vector<std::string> item_err(static_cast<size_t>(n));

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int i = 0; i < n; ++i) {
        try {
            const auto& item = ds.items[static_cast<size_t>(i)];
            ForwardOptions opts;
            if (gating.has_value()) {
                opts.mode = gating->mode;
                opts.schedule = &gating->schedule;
            }
            Tensor logits = forward_train(model, item.tokens, item.class_id, opts);
            item_ce[static_cast<size_t>(i)] = cross_entropy(logits, flatten(item.tokens));
        } catch (const std::exception& e) {
            item_err[static_cast<size_t>(i)] = e.what();
        }
    }

    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        if (!item_err[static_cast<size_t>(i)].empty())
            fail("nll_eval: " + item_err[static_cast<size_t>(i)]);
        total += item_ce[static_cast<size_t>(i)];
    }
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------- checkpoint

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    require(is.good(), "checkpoint: truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_name(std::ostream& os, const std::string& s) {
    require(s.size() < 65536, "checkpoint: name too long");
    unsigned char b[2] = {static_cast<unsigned char>(s.size() & 0xff),
                          static_cast<unsigned char>((s.size() >> 8) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 2);
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_name(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    require(is.good(), "checkpoint: truncated name");
    size_t len = static_cast<size_t>(b[0] | (b[1] << 8));
    std::string s(len, '\0');
    is.read(s.data(), static_cast<std::streamsize>(len));
    require(is.good(), "checkpoint: truncated name body");
    return s;
}

Tensor stack_expert_w1(const ExpertSet& set) {
    int64_t d = set.w1[0].shape[1];
    Tensor t = Tensor::zeros({set.d_ff(), d});
    int64_t off = 0;
    for (const auto& w : set.w1) {
        std::memcpy(t.data.data() + off, w.data.data(), w.data.size() * sizeof(double));
        off += w.numel();
    }
    return t;
}

Tensor stack_expert_b1(const ExpertSet& set) {
    Tensor t = Tensor::zeros({set.d_ff()});
    int64_t off = 0;
    for (const auto& w : set.b1) {
        std::memcpy(t.data.data() + off, w.data.data(), w.data.size() * sizeof(double));
        off += w.numel();
    }
    return t;
}

Tensor stack_expert_w2(const ExpertSet& set) {
    int64_t d = set.w2[0].shape[0];
    int64_t ff = set.d_ff();
    Tensor t = Tensor::zeros({d, ff});
    for (int e = 0; e < set.num_experts; ++e) {
        const Tensor& w = set.w2[static_cast<size_t>(e)];
        for (int64_t r = 0; r < d; ++r)
            std::memcpy(t.data.data() + r * ff + static_cast<int64_t>(e) * set.expert_size,
                        w.data.data() + r * set.expert_size,
                        static_cast<size_t>(set.expert_size) * sizeof(double));
    }
    return t;
}

ExpertSet unstack_experts(const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2,
                          const Tensor& assign, int num_experts) {
    ExpertSet set;
    set.num_experts = num_experts;
    int64_t ff = w1.shape[0];
    int64_t d = w1.shape[1];
    set.expert_size = static_cast<int>(ff / num_experts);
    set.b2 = b2;
    set.assignment.resize(static_cast<size_t>(ff));
    for (int64_t u = 0; u < ff; ++u)
        set.assignment[static_cast<size_t>(u)] = static_cast<int>(std::lround(assign.data[static_cast<size_t>(u)]));
    for (int e = 0; e < num_experts; ++e) {
        Tensor ew1 = Tensor::zeros({set.expert_size, d});
        Tensor eb1 = Tensor::zeros({set.expert_size});
        Tensor ew2 = Tensor::zeros({d, set.expert_size});
        int64_t row0 = static_cast<int64_t>(e) * set.expert_size;
        std::memcpy(ew1.data.data(), w1.data.data() + row0 * d,
                    static_cast<size_t>(set.expert_size * d) * sizeof(double));
        std::memcpy(eb1.data.data(), b1.data.data() + row0,
                    static_cast<size_t>(set.expert_size) * sizeof(double));
        for (int64_t r = 0; r < d; ++r)
            std::memcpy(ew2.data.data() + r * set.expert_size, w2.data.data() + r * ff + row0,
                        static_cast<size_t>(set.expert_size) * sizeof(double));
        set.w1.push_back(std::move(ew1));
        set.b1.push_back(std::move(eb1));
        set.w2.push_back(std::move(ew2));
    }
    return set;
}

}  // namespace

void save_checkpoint(const std::string& path, const NextScaleModel& model) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "save_checkpoint: cannot open " + path);
    const ModelConfig& cfg = model.cfg;

    os.write("NSVM", 4);
    put_u32(os, 1);
    put_u32(os, static_cast<uint32_t>(cfg.d_model));
    put_u32(os, static_cast<uint32_t>(cfg.depth));
    put_u32(os, static_cast<uint32_t>(cfg.heads));
    put_u32(os, static_cast<uint32_t>(cfg.d_ff));
    put_u32(os, static_cast<uint32_t>(cfg.vocab));
    put_u32(os, static_cast<uint32_t>(cfg.num_classes));
    put_u32(os, static_cast<uint32_t>(cfg.num_scales()));
    for (int s : cfg.scale_sides) put_u32(os, static_cast<uint32_t>(s));
    os.put(static_cast<char>(cfg.activation));

    bool moefied = model.moefied();
    bool routed = model.routed();
    bool pruned = !model.prune_scales.empty();
    os.put(static_cast<char>((moefied ? 1 : 0) | (routed ? 2 : 0) | (pruned ? 4 : 0)));
    if (moefied) put_u32(os, static_cast<uint32_t>(model.blocks[0].experts->num_experts));
    if (routed) put_u32(os, static_cast<uint32_t>(model.blocks[0].router->width()));
    if (pruned) {
        put_u32(os, static_cast<uint32_t>(model.prune_scales.size()));
        for (int s : model.prune_scales) put_u32(os, static_cast<uint32_t>(s));
    }

    std::vector<std::pair<std::string, Tensor>> tensors;
    tensors.emplace_back("tok_emb", model.tok_emb);
    tensors.emplace_back("cls_emb", model.cls_emb);
    tensors.emplace_back("pos_emb", model.pos_emb);
    for (size_t i = 0; i < model.blocks.size(); ++i) {
        const Block& blk = model.blocks[i];
        std::string p = "blk" + std::to_string(i) + ".";
        tensors.emplace_back(p + "wq", blk.wq);
        tensors.emplace_back(p + "bq", blk.bq);
        tensors.emplace_back(p + "wk", blk.wk);
        tensors.emplace_back(p + "bk", blk.bk);
        tensors.emplace_back(p + "wv", blk.wv);
        tensors.emplace_back(p + "bv", blk.bv);
        tensors.emplace_back(p + "wo", blk.wo);
        tensors.emplace_back(p + "bo", blk.bo);
        tensors.emplace_back(p + "ln1.g", blk.ln1_g);
        tensors.emplace_back(p + "ln1.b", blk.ln1_b);
        tensors.emplace_back(p + "ln2.g", blk.ln2_g);
        tensors.emplace_back(p + "ln2.b", blk.ln2_b);
        if (blk.moefied()) {
            const ExpertSet& set = *blk.experts;
            tensors.emplace_back(p + "moe.w1", stack_expert_w1(set));
            tensors.emplace_back(p + "moe.b1", stack_expert_b1(set));
            tensors.emplace_back(p + "moe.w2", stack_expert_w2(set));
            tensors.emplace_back(p + "moe.b2", set.b2);
            Tensor assign = Tensor::zeros({static_cast<int64_t>(set.assignment.size())});
            for (size_t u = 0; u < set.assignment.size(); ++u)
                assign.data[u] = static_cast<double>(set.assignment[u]);
            tensors.emplace_back(p + "moe.assign", std::move(assign));
        } else {
            tensors.emplace_back(p + "ffn.w1", blk.w1);
            tensors.emplace_back(p + "ffn.b1", blk.b1);
            tensors.emplace_back(p + "ffn.w2", blk.w2);
            tensors.emplace_back(p + "ffn.b2", blk.b2);
        }
        if (blk.router.has_value()) {
            const RouterNet& r = *blk.router;
            tensors.emplace_back(p + "router.w0", r.w0);
            tensors.emplace_back(p + "router.b0", r.b0);
            tensors.emplace_back(p + "router.w1", r.w1);
            tensors.emplace_back(p + "router.b1", r.b1);
            tensors.emplace_back(p + "router.w2", r.w2);
            tensors.emplace_back(p + "router.b2", r.b2);
        }
        if (blk.prune.has_value()) {
            Tensor keep = Tensor::zeros({static_cast<int64_t>(blk.prune->keep.size())});
            for (size_t u = 0; u < blk.prune->keep.size(); ++u)
                keep.data[u] = blk.prune->keep[u] ? 1.0 : 0.0;
            tensors.emplace_back(p + "prune.keep", std::move(keep));
        }
    }
    tensors.emplace_back("lnf.g", model.lnf_g);
    tensors.emplace_back("lnf.b", model.lnf_b);
    tensors.emplace_back("head.w", model.head_w);
    tensors.emplace_back("head.b", model.head_b);

    put_u32(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_name(os, name);
        write_tensor(os, t);
    }
    require(os.good(), "save_checkpoint: write failed for " + path);
}

NextScaleModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    require(is.good() && std::equal(magic, magic + 4, "NSVM"), "load_checkpoint: bad magic");
    require(get_u32(is) == 1, "load_checkpoint: unsupported version");

    ModelConfig cfg;
    cfg.d_model = static_cast<int>(get_u32(is));
    cfg.depth = static_cast<int>(get_u32(is));
    cfg.heads = static_cast<int>(get_u32(is));
    cfg.d_ff = static_cast<int>(get_u32(is));
    cfg.vocab = static_cast<int>(get_u32(is));
    cfg.num_classes = static_cast<int>(get_u32(is));
    uint32_t k = get_u32(is);
    cfg.scale_sides.resize(k);
    for (uint32_t i = 0; i < k; ++i) cfg.scale_sides[i] = static_cast<int>(get_u32(is));
    cfg.activation = static_cast<Activation>(is.get());
    cfg.validate();

    int flags = is.get();
    require(flags >= 0, "load_checkpoint: truncated flags");
    bool moefied = flags & 1, routed = flags & 2, pruned = flags & 4;
    int num_experts = moefied ? static_cast<int>(get_u32(is)) : 0;
    if (routed) get_u32(is);  // router width is implied by the tensors
    std::vector<int> prune_scales;
    if (pruned) {
        uint32_t np = get_u32(is);
        for (uint32_t i = 0; i < np; ++i) prune_scales.push_back(static_cast<int>(get_u32(is)));
    }

    std::map<std::string, Tensor> tensors;
    uint32_t count = get_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = get_name(is);
        tensors[name] = read_tensor(is);
    }
    auto take = [&](const std::string& name) {
        auto it = tensors.find(name);
        require(it != tensors.end(), "load_checkpoint: missing tensor " + name);
        return std::move(it->second);
    };

    NextScaleModel m;
    m.cfg = cfg;
    m.prune_scales = prune_scales;
    m.tok_emb = take("tok_emb");
    m.cls_emb = take("cls_emb");
    m.pos_emb = take("pos_emb");
    for (int i = 0; i < cfg.depth; ++i) {
        std::string p = "blk" + std::to_string(i) + ".";
        Block blk;
        blk.wq = take(p + "wq");
        blk.bq = take(p + "bq");
        blk.wk = take(p + "wk");
        blk.bk = take(p + "bk");
        blk.wv = take(p + "wv");
        blk.bv = take(p + "bv");
        blk.wo = take(p + "wo");
        blk.bo = take(p + "bo");
        blk.ln1_g = take(p + "ln1.g");
        blk.ln1_b = take(p + "ln1.b");
        blk.ln2_g = take(p + "ln2.g");
        blk.ln2_b = take(p + "ln2.b");
        if (moefied) {
            blk.experts = unstack_experts(take(p + "moe.w1"), take(p + "moe.b1"),
                                          take(p + "moe.w2"), take(p + "moe.b2"),
                                          take(p + "moe.assign"), num_experts);
        } else {
            blk.w1 = take(p + "ffn.w1");
            blk.b1 = take(p + "ffn.b1");
            blk.w2 = take(p + "ffn.w2");
            blk.b2 = take(p + "ffn.b2");
        }
        if (routed) {
            RouterNet r;
            r.w0 = take(p + "router.w0");
            r.b0 = take(p + "router.b0");
            r.w1 = take(p + "router.w1");
            r.b1 = take(p + "router.b1");
            r.w2 = take(p + "router.w2");
            r.b2 = take(p + "router.b2");
            blk.router = std::move(r);
        }
        if (pruned) {
            Tensor keep = take(p + "prune.keep");
            PruneState ps;
            ps.keep.resize(keep.data.size());
            for (size_t u = 0; u < keep.data.size(); ++u)
                ps.keep[u] = keep.data[u] > 0.5 ? 1 : 0;
            blk.prune = std::move(ps);
        }
        m.blocks.push_back(std::move(blk));
    }
    m.lnf_g = take("lnf.g");
    m.lnf_b = take("lnf.b");
    m.head_w = take("head.w");
    m.head_b = take("head.b");
    return m;
}

}  // namespace nsvar
