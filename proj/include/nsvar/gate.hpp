#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "nsvar/moefy.hpp"
#include "nsvar/tensor.hpp"

namespace nsvar {

// Relative-threshold expert selection: expert i is selected iff
// preds[i] >= tau * max(preds), inclusive. The rule is followed literally:
// when max(preds) == 0 every expert passes (0 >= 0).
uint64_t gate_mask(const double* preds, int num_experts, double tau);
std::vector<bool> gate(const std::vector<double>& preds, double tau);
int popcount64(uint64_t m);

enum class ForwardMode : uint8_t { Dense = 0, DynkMax = 1, Oracle = 2, Pruned = 3 };

const char* forward_mode_name(ForwardMode m);
ForwardMode forward_mode_from_name(const std::string& s);

// Per-scale thresholds. tau_by_scale[k] < 0 marks a dense scale (1-based
// scales stored at index k-1). The scale-aware factory enforces non-decreasing
// taus toward finer scales; the list factories accept anything in [0, 1].
struct TauSchedule {
    std::vector<double> tau_by_scale;

    int num_scales() const { return static_cast<int>(tau_by_scale.size()); }
    bool is_gated(int scale_1based) const;
    double tau_for(int scale_1based) const;
    int switch_scale() const;       // first gated scale; num_scales()+1 if none
    std::vector<double> taus() const;

    static TauSchedule all_dense(int num_scales);
    // scales switch_scale..K gated with the given taus (K - switch + 1 values)
    static TauSchedule last_scales(int switch_scale, const std::vector<double>& taus,
                                   int num_scales);
    // same, but rejects taus that decrease toward finer scales
    static TauSchedule scale_aware(int switch_scale, const std::vector<double>& taus,
                                   int num_scales);
    static TauSchedule uniform(double tau, int num_scales);
    static TauSchedule single_scale(int scale, double tau, int num_scales);
};

// Norm-regression router: d_model -> width -> width -> E, gelu inside,
// absolute value on the output so predictions are non-negative.
struct RouterNet {
    Tensor w0, b0, w1, b1, w2, b2;

    int width() const { return static_cast<int>(w0.shape[0]); }
    int num_experts() const { return static_cast<int>(w2.shape[0]); }
    int d_model() const { return static_cast<int>(w0.shape[1]); }

    static RouterNet init(int d_model, int width, int num_experts, uint64_t seed);

    // predictions for a batch of rows; output T x E, elementwise >= 0
    Tensor predict(const Tensor& x) const;
};

struct MoeRowResult {
    std::vector<double> y;  // d_model, includes the shared b2
    uint64_t mask = 0;
    int count = 0;
};

// Single-token MoE layer forward. Dense sums every expert; DynkMax gates on
// router_preds (length E); Oracle gates on true expert norms. Experts are
// accumulated in ascending index order in every mode, then b2 added once, so
// Dense == DynkMax at tau 0 bit-exactly and Oracle == DynkMax fed true norms.
MoeRowResult moe_forward(const ExpertSet& set, const double* x, Activation act,
                         ForwardMode mode, double tau, const double* router_preds = nullptr);

// One row per gated (pass, scale, layer, token) decision, appended in
// a deterministic order.
struct GateEntry {
    uint8_t pass;
    uint8_t scale;  // 1-based
    uint8_t layer;
    uint16_t row, col;
    uint64_t mask;
    uint16_t count;
};

struct GatingTrace {
    std::vector<int> scale_sides;
    int layers = 0;
    int num_experts = 0;
    int passes = 1;
    ForwardMode mode = ForwardMode::Dense;
    std::vector<GateEntry> entries;

    double mean_experts_per_token(int scale_1based) const;  // over layers+passes
};

}  // namespace nsvar
