#pragma once

#include <vector>

#include "nsvar/nn.hpp"
#include "nsvar/tensor.hpp"

namespace nsvar {

// Offline expert construction: hidden units of one FFN are clustered by their
// input-weight rows and re-sliced into E experts whose sum reconstructs the
// dense FFN (each unit lives in exactly one expert, so the activation
// distributes over the partition).

struct ClusterConfig {
    int num_experts = 8;
    int max_iters = 50;
    uint64_t seed = 0;
};

struct ClusterResult {
    std::vector<int> assignment;     // unit -> cluster
    std::vector<double> objectives;  // accepted per-iteration objective, non-increasing
};

// Balanced k-means with k-means++ seeding and capacity-constrained greedy
// assignment (units in descending assignment-margin order). Every cluster ends
// with exactly rows/E members. Deterministic for a fixed seed.
ClusterResult balanced_kmeans(const Tensor& unit_vectors, const ClusterConfig& cfg);

struct ExpertSet {
    int num_experts = 0;
    int expert_size = 0;
    std::vector<Tensor> w1;      // per expert: expert_size x d_model
    std::vector<Tensor> b1;      // per expert: expert_size
    std::vector<Tensor> w2;      // per expert: d_model x expert_size
    Tensor b2;                   // shared, applied once at the layer
    std::vector<int> assignment; // hidden unit -> expert

    int d_model() const { return static_cast<int>(w2[0].shape[0]); }
    int d_ff() const { return num_experts * expert_size; }
};

// Slices (w1, b1, w2) by a balanced assignment; units keep ascending order
// inside each expert, so reassembly is bit-exact.
ExpertSet split_ffn(const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2,
                    const std::vector<int>& assignment);

// Inverse of split_ffn (up to the original unit order).
void reassemble_ffn(const ExpertSet& set, Tensor& w1, Tensor& b1, Tensor& w2);

// E_i(x) = W2_i . act(W1_i x + b1_i); the shared b2 is excluded.
std::vector<double> expert_forward(const ExpertSet& set, int expert, const double* x,
                                   Activation act);

// l2 norms of every expert's output for x; ground truth for router training
// and the oracle routing mode.
std::vector<double> expert_norms(const ExpertSet& set, const double* x, Activation act);

}  // namespace nsvar
