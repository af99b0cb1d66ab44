#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nsvar/gate.hpp"
#include "nsvar/graph.hpp"
#include "nsvar/moefy.hpp"
#include "nsvar/pyramid.hpp"
#include "nsvar/rng.hpp"
#include "nsvar/tensor.hpp"

namespace nsvar {

// Miniature next-scale transformer. Training teacher-forces the sequence
//   [class] [scale-1 slot] [up(r_1)] [up(r_2)] ... [up(r_{K-1})]
// where up() repeats the previous scale's token grid to the current side
// (nearest neighbor) and the scale-1 slot reuses the class embedding. Position
// 1+t predicts flatten position t under a block-causal mask, so every scale is
// generated in one parallel step from strictly coarser context.

struct ModelConfig {
    int d_model = 64;
    int depth = 6;
    int heads = 4;
    int d_ff = 256;
    int vocab = 16;
    int num_classes = 4;
    std::vector<int> scale_sides{1, 2, 3, 4, 6, 8};
    Activation activation = Activation::Gelu;

    void validate() const;
    int num_scales() const { return static_cast<int>(scale_sides.size()); }
    int total_tokens() const;
    int seq_len() const { return 1 + total_tokens(); }
    std::vector<std::pair<int, int>> boundaries() const;
    // 1-based scale of a flatten position
    int scale_of_flat(int flat_pos) const;
    // 0 for the start position, else the scale of flat position t-1
    int block_of_seq(int seq_pos) const;
    PyramidConfig pyramid() const;
};

// entry (i, j) == 1 iff block(j) <= block(i); start token is block 0
Tensor block_causal_mask(const std::vector<int>& scale_sides);

struct PruneState {
    std::vector<uint8_t> keep;  // per hidden unit
};

struct Block {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    // dense FFN; empty once the block is MoEfied
    Tensor w1, b1, w2, b2;
    std::optional<ExpertSet> experts;
    std::optional<RouterNet> router;
    std::optional<PruneState> prune;

    bool moefied() const { return experts.has_value(); }
};

struct NextScaleModel {
    ModelConfig cfg;
    Tensor tok_emb;  // V x d
    Tensor cls_emb;  // (C+1) x d; row C is the null class for CFG
    Tensor pos_emb;  // seq_len x d, laid out per scale block
    std::vector<Block> blocks;
    Tensor lnf_g, lnf_b;
    Tensor head_w, head_b;  // V x d, V
    std::vector<int> prune_scales;  // 1-based; empty when unpruned

    static NextScaleModel init(const ModelConfig& cfg, uint64_t seed);

    bool moefied() const;
    bool routed() const;
    // dense parameters in fixed order; requires a non-MoEfied model
    std::vector<std::pair<std::string, Tensor*>> named_params();
};

// nearest-neighbor upsample of a token grid
std::vector<int> upsample_nn(const std::vector<int>& map, int src_side, int dst_side);

// embedding indices into [tok_emb; cls_emb] for blocks 0..upto_scale
std::vector<int64_t> input_indices(const ModelConfig& cfg,
                                   const std::vector<std::vector<int>>& maps, int class_slot,
                                   int upto_scale);

struct GatingSpec {
    ForwardMode mode = ForwardMode::Dense;
    TauSchedule schedule;
};

struct EvalCapture {
    bool want_ffn_inputs = false;
    bool want_ffn_acts = false;
    std::vector<Tensor> ffn_inputs;  // per layer, T x d_model (post-norm rows)
    std::vector<Tensor> ffn_acts;    // per layer, T x d_ff (dense blocks only)
};

struct ScaleTiming {
    double total_sec = 0.0;
    double dispatch_sec = 0.0;
};

struct ForwardOptions {
    ForwardMode mode = ForwardMode::Dense;
    const TauSchedule* schedule = nullptr;
    GatingTrace* trace = nullptr;
    uint8_t trace_pass = 0;
    int trace_only_scale = -1;  // -1 records every gated scale
    EvalCapture* capture = nullptr;
    double* dispatch_sec = nullptr;
};

// Runs the transformer over the bound prefix and returns logits for sequence
// rows [row_begin, row_end). Pure given frozen weights.
Tensor forward_seq(const NextScaleModel& model, const std::vector<int64_t>& indices,
                   const ForwardOptions& opts, int row_begin, int row_end);

// logits over all flatten positions (N x V), teacher forced
Tensor forward_train(const NextScaleModel& model, const TokenHierarchy& h, int class_id,
                     const ForwardOptions& opts = {});

// mean negative log-softmax probability of targets
double cross_entropy(const Tensor& logits, const std::vector<int>& targets);

// ------------------------------------------------------------------ training

struct TrainConfig {
    int epochs = 3;
    int batch = 16;
    double lr = 2e-3;
    double warmup_frac = 0.2;  // of one epoch
    double clip = 1.0;
    double weight_decay = 0.0;
    double label_drop = 0.1;  // probability of training on the null class
    double hoyer_alpha = 0.0;
    uint64_t seed = 0;
};

struct TrainLog {
    std::vector<double> step_ce;
    std::vector<double> step_hoyer;
    std::vector<double> step_loss;
    std::vector<double> epoch_ce;  // mean per epoch
};

struct TrainGraph {
    Graph graph;
    int logits_node = -1;
    int ce_node = -1;
    int hoyer_node = -1;
    int loss_node = -1;
};

TrainGraph build_train_graph(const ModelConfig& cfg, double hoyer_alpha);

TrainLog train(NextScaleModel& model, const TokenDataset& ds, const TrainConfig& cfg);

// ------------------------------------------------------------------ sampling

struct SamplerConfig {
    double cfg = 1.5;
    int top_k = 900;  // clamped to vocab
    double top_p = 0.96;
    uint64_t seed = 0;
    ForwardMode mode = ForwardMode::Dense;
    std::optional<TauSchedule> gating;
};

TokenHierarchy sample(const NextScaleModel& model, int class_id, const SamplerConfig& sc,
                      GatingTrace* trace = nullptr, std::vector<ScaleTiming>* timings = nullptr);

// One categorical draw after top-k then top-p filtering (sorted by logit,
// ties broken toward lower token ids; the boundary token stays in).
int sample_token_filtered(const double* logits, int vocab, int top_k, double top_p, Rng& rng);

// mean NLL per token over the dataset under the given gating
double nll_eval(const NextScaleModel& model, const TokenDataset& ds,
                const std::optional<GatingSpec>& gating = {});

// ---------------------------------------------------------------- checkpoint

void save_checkpoint(const std::string& path, const NextScaleModel& model);
NextScaleModel load_checkpoint(const std::string& path);

}  // namespace nsvar
