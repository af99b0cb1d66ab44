#pragma once

#include <vector>

#include "nsvar/model.hpp"

namespace nsvar {

// Converts every block's dense FFN into an ExpertSet by balanced k-means over
// the W1 rows. Returns one ClusterResult per layer for reporting.
std::vector<ClusterResult> moefy_model(NextScaleModel& model, const ClusterConfig& cfg);

struct RouterTrainConfig {
    int epochs = 2;
    int batch = 256;
    double lr = 1e-3;
    int width = 32;
    uint64_t seed = 0;
    int max_harvest_items = 256;  // sequences harvested for (x, norms) pairs
    double holdout_frac = 0.1;
};

struct RouterLayerReport {
    double init_holdout_mse = 0.0;
    double final_holdout_mse = 0.0;
    double final_train_mse = 0.0;
    int64_t pairs = 0;
};

// Trains one norm-regression router per layer on teacher-forced activations
// harvested from the dataset; the MoEfied model weights stay frozen.
std::vector<RouterLayerReport> train_router(NextScaleModel& model, const TokenDataset& ds,
                                            const RouterTrainConfig& cfg);

// Static baseline: ranks hidden units by mean |activation| over the
// calibration set (within the given scales) and zeroes the lowest
// (1 - keep_fraction) of them for those scales.
void prune_ffn(NextScaleModel& model, double keep_fraction, const TokenDataset& calibration,
               const std::vector<int>& scales);

}  // namespace nsvar
