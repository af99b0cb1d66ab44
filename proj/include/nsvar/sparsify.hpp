#pragma once

#include <vector>

#include "nsvar/model.hpp"

namespace nsvar {

// ReLUfication + sparsity-regularized fine-tuning. The regularizer is the
// Hoyer ratio (sum |h|)^2 / sum h^2 of each block's post-activation vector,
// averaged over token positions and then over blocks, weighted by alpha.

struct SparsifyConfig {
    double alpha = 0.1;
    int epochs = 2;
    int batch = 16;
    double lr = 1e-4;
    double warmup_frac = 0.2;
    double clip = 1.0;
    double weight_decay = 0.05;
    double label_drop = 0.1;
    uint64_t seed = 0;
};

// Swaps the FFN activation to ReLU, weights untouched. Returns false (no-op)
// when the model is already ReLU; callers surface the warning.
bool relufy(NextScaleModel& model);

// (sum |h_i|)^2 / sum h_i^2; 0 for an all-zero vector. In [1, dim] otherwise.
double hoyer(const std::vector<double>& h);

// CE over the items plus alpha times the mean per-block Hoyer value.
// alpha == 0 equals cross entropy exactly.
double combined_loss(const NextScaleModel& model, const TokenDataset& ds,
                     const std::vector<int>& item_indices, double alpha);

struct SparsityReport {
    std::vector<int> scale_sides;
    int layers = 0;
    // indexed [layer * num_scales + (scale-1)]
    std::vector<double> zero_fraction;
    std::vector<double> mean_hoyer;

    double zero_at(int layer, int scale_1based) const {
        return zero_fraction[static_cast<size_t>(layer * static_cast<int>(scale_sides.size()) +
                                                 scale_1based - 1)];
    }
    double mean_zero_fraction() const;
};

// Per-layer, per-scale activation statistics over a dataset (dense model).
SparsityReport sparsity_report(const NextScaleModel& model, const TokenDataset& ds);

// Fine-tunes a ReLUfied model under the combined loss; epochs == 0 leaves the
// model unchanged. Returns the training log and the post-tune report on ds.
std::pair<TrainLog, SparsityReport> finetune_sparse(NextScaleModel& model,
                                                    const TokenDataset& ds,
                                                    const SparsifyConfig& cfg);

}  // namespace nsvar
