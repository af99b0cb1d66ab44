#pragma once

#include <cstdint>
#include <vector>

#include "nsvar/model.hpp"

namespace nsvar {

// Multiply-add accounting (1 multiply-add = 2 FLOPs, bias adds and
// normalization/softmax/elementwise work excluded). Generation is counted
// incrementally: every token is charged once, at the step that produces it,
// with attention read across the full visible prefix. The reference
// implementation recomputes prefixes instead of caching, so wall-clock time is
// measured separately and never derived from these counts.

int64_t count_linear(int64_t tokens, int64_t d_in, int64_t d_out);

struct FlopsReport {
    std::vector<int> scale_sides;
    int layers = 0;
    int passes = 1;
    ForwardMode mode = ForwardMode::Dense;

    // gated run, per (scale, layer), summed over passes
    std::vector<int64_t> attn;    // [scale * layers + layer]
    std::vector<int64_t> ffn;
    std::vector<int64_t> router;
    std::vector<int64_t> head_by_scale;

    std::vector<int64_t> gated_ffn_by_scale;
    std::vector<int64_t> dense_ffn_by_scale;

    int64_t gated_total = 0;
    int64_t dense_total = 0;
    int64_t gated_ffn_total = 0;
    int64_t dense_ffn_total = 0;
    int64_t router_total = 0;

    double reduction() const {
        return 1.0 - static_cast<double>(gated_total) / static_cast<double>(dense_total);
    }
    int64_t at(const std::vector<int64_t>& grid, int scale_1based, int layer) const {
        return grid[static_cast<size_t>((scale_1based - 1) * layers + layer)];
    }
};

// Exact accounting for one generation trace. The dense baseline column uses
// the same pass count with every token dense and no router. Oracle traces
// charge only the selected experts (the norm pass is excluded) and no router.
FlopsReport count_generation(const NextScaleModel& model, const GatingTrace& trace,
                             const TauSchedule& schedule);

struct TimingReport {
    std::vector<int> scale_sides;
    int batch = 0;
    int repeats = 0;
    int threads = 0;
    int num_experts = 0;
    int expert_size = 0;
    ForwardMode mode = ForwardMode::Dense;
    // medians over repeats; each entry is the summed time of one batch
    std::vector<double> total_sec;
    std::vector<double> dispatch_sec;
    std::vector<double> numeric_sec;
};

// Wall-clock per scale for `batch` sequential generations, median of
// `repeats`. Dispatch bookkeeping (router prediction, gating, trace upkeep) is
// timed apart from the numeric kernels.
TimingReport bench_walltime(const NextScaleModel& model,
                            const std::optional<TauSchedule>& schedule, ForwardMode mode,
                            int batch, int repeats, uint64_t seed);

}  // namespace nsvar
