#include "nsvar/flops.hpp"

#include <algorithm>
#include <cmath>

#include "nsvar/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace nsvar {

int64_t count_linear(int64_t tokens, int64_t d_in, int64_t d_out) {
    require(tokens > 0 && d_in > 0 && d_out > 0, "count_linear: positive dims required");
    return 2 * tokens * d_in * d_out;
}

FlopsReport count_generation(const NextScaleModel& model, const GatingTrace& trace,
                             const TauSchedule& schedule) {
    const ModelConfig& cfg = model.cfg;
    require(trace.scale_sides == cfg.scale_sides, "count_generation: trace geometry mismatch");
    require(trace.layers == cfg.depth, "count_generation: trace layer count mismatch");
    require(schedule.num_scales() == cfg.num_scales(),
            "count_generation: schedule geometry mismatch");

    int k_scales = cfg.num_scales();
    int layers = cfg.depth;
    int passes = trace.passes;
    int64_t d = cfg.d_model;
    int64_t ff = cfg.d_ff;

    bool gated_run = trace.mode == ForwardMode::DynkMax || trace.mode == ForwardMode::Oracle;
    bool count_router = trace.mode == ForwardMode::DynkMax;

    int64_t expert_size = 0;
    if (gated_run) {
        require(model.moefied(), "count_generation: gated trace without experts");
        expert_size = model.blocks[0].experts->expert_size;
        require(trace.num_experts == model.blocks[0].experts->num_experts,
                "count_generation: trace expert count mismatch");
    }
    int64_t router_flops_per_token = 0;
    if (count_router) {
        require(model.routed(), "count_generation: dynk_max trace without routers");
        int64_t w = model.blocks[0].router->width();
        router_flops_per_token = count_linear(1, d, w) + count_linear(1, w, w) +
                                 count_linear(1, w, static_cast<int64_t>(trace.num_experts));
    }

    // selected-count sums per (scale, layer) from the trace
    std::vector<int64_t> sel(static_cast<size_t>(k_scales * layers), 0);
    std::vector<int64_t> seen(static_cast<size_t>(k_scales * layers), 0);
    for (const auto& e : trace.entries) {
        require(e.scale >= 1 && e.scale <= k_scales && e.layer < layers,
                "count_generation: trace entry out of range");
        sel[static_cast<size_t>((e.scale - 1) * layers + e.layer)] += e.count;
        seen[static_cast<size_t>((e.scale - 1) * layers + e.layer)] += 1;
    }
    for (int k = 1; k <= k_scales; ++k) {
        int side = cfg.scale_sides[static_cast<size_t>(k - 1)];
        bool gated_scale = gated_run && schedule.is_gated(k);
        for (int l = 0; l < layers; ++l) {
            int64_t expect = gated_scale ? static_cast<int64_t>(passes) * side * side : 0;
            require(seen[static_cast<size_t>((k - 1) * layers + l)] == expect,
                    "count_generation: trace/geometry mismatch at scale " + std::to_string(k));
        }
    }

    FlopsReport rep;
    rep.scale_sides = cfg.scale_sides;
    rep.layers = layers;
    rep.passes = passes;
    rep.mode = trace.mode;
    rep.attn.assign(static_cast<size_t>(k_scales * layers), 0);
    rep.ffn.assign(static_cast<size_t>(k_scales * layers), 0);
    rep.router.assign(static_cast<size_t>(k_scales * layers), 0);
    rep.head_by_scale.assign(static_cast<size_t>(k_scales), 0);
    rep.gated_ffn_by_scale.assign(static_cast<size_t>(k_scales), 0);
    rep.dense_ffn_by_scale.assign(static_cast<size_t>(k_scales), 0);

    int64_t dense_ffn_per_token = count_linear(1, d, ff) + count_linear(1, ff, d);
    int64_t expert_ffn_per_sel =
        gated_run ? count_linear(1, d, expert_size) + count_linear(1, expert_size, d) : 0;

    auto bounds = cfg.boundaries();
    for (int k = 1; k <= k_scales; ++k) {
        int side = cfg.scale_sides[static_cast<size_t>(k - 1)];
        int64_t new_tokens = static_cast<int64_t>(side) * side + (k == 1 ? 1 : 0);
        int64_t prefix = 1 + bounds[static_cast<size_t>(k - 1)].second;
        bool gated_scale = gated_run && schedule.is_gated(k);

        for (int l = 0; l < layers; ++l) {
            size_t cell = static_cast<size_t>((k - 1) * layers + l);
            // qkv + output projections, then scores and their application
            int64_t attn = passes * (4 * count_linear(new_tokens, d, d) +
                                     2 * (2 * new_tokens * prefix * d));
            rep.attn[cell] = attn;

            int64_t ffn_dense = passes * new_tokens * dense_ffn_per_token;
            int64_t ffn_gated;
            if (gated_scale) {
                ffn_gated = sel[cell] * expert_ffn_per_sel;
                // the class token rides along dense at scale 1
                if (k == 1) ffn_gated += passes * dense_ffn_per_token;
                if (count_router)
                    rep.router[cell] =
                        static_cast<int64_t>(passes) * side * side * router_flops_per_token;
            } else if (trace.mode == ForwardMode::Pruned &&
                       std::find(model.prune_scales.begin(), model.prune_scales.end(), k) !=
                           model.prune_scales.end()) {
                const auto& keep = model.blocks[static_cast<size_t>(l)].prune->keep;
                int64_t kept = 0;
                for (uint8_t v : keep) kept += v;
                ffn_gated = passes * (static_cast<int64_t>(side) * side) *
                                (count_linear(1, d, kept) + count_linear(1, kept, d)) +
                            (k == 1 ? passes * dense_ffn_per_token : 0);
            } else {
                ffn_gated = ffn_dense;
            }
            rep.ffn[cell] = ffn_gated;
            rep.gated_ffn_by_scale[static_cast<size_t>(k - 1)] += ffn_gated;
            rep.dense_ffn_by_scale[static_cast<size_t>(k - 1)] += ffn_dense;
        }
        rep.head_by_scale[static_cast<size_t>(k - 1)] =
            passes * count_linear(static_cast<int64_t>(side) * side, d, cfg.vocab);
    }

    for (int k = 0; k < k_scales; ++k) {
        rep.gated_ffn_total += rep.gated_ffn_by_scale[static_cast<size_t>(k)];
        rep.dense_ffn_total += rep.dense_ffn_by_scale[static_cast<size_t>(k)];
        rep.gated_total += rep.head_by_scale[static_cast<size_t>(k)];
        rep.dense_total += rep.head_by_scale[static_cast<size_t>(k)];
        for (int l = 0; l < layers; ++l) {
            size_t cell = static_cast<size_t>(k * layers + l);
            rep.gated_total += rep.attn[cell] + rep.ffn[cell] + rep.router[cell];
            rep.dense_total += rep.attn[cell];
            rep.router_total += rep.router[cell];
        }
    }
    rep.dense_total += rep.dense_ffn_total;
    return rep;
}

TimingReport bench_walltime(const NextScaleModel& model,
                            const std::optional<TauSchedule>& schedule, ForwardMode mode,
                            int batch, int repeats, uint64_t seed) {
    require(repeats >= 3, "bench_walltime: need at least 3 repeats");
    require(batch >= 1, "bench_walltime: batch must be >= 1");

    int k_scales = model.cfg.num_scales();
    TimingReport rep;
    rep.scale_sides = model.cfg.scale_sides;
    rep.batch = batch;
    rep.repeats = repeats;
    rep.threads = kernel_threads();
    rep.mode = mode;
    if (model.moefied()) {
        rep.num_experts = model.blocks[0].experts->num_experts;
        rep.expert_size = model.blocks[0].experts->expert_size;
    }

    std::vector<std::vector<double>> totals(static_cast<size_t>(k_scales)),
        dispatch(static_cast<size_t>(k_scales));

    for (int r = 0; r < repeats; ++r) {
        std::vector<double> t_total(static_cast<size_t>(k_scales), 0.0),
            t_disp(static_cast<size_t>(k_scales), 0.0);
        for (int b = 0; b < batch; ++b) {
            SamplerConfig sc;
            sc.seed = seed + static_cast<uint64_t>(b);
            sc.mode = mode;
            sc.gating = schedule;
            std::vector<ScaleTiming> timing;
            sample(model, b % model.cfg.num_classes, sc, nullptr, &timing);
            for (int k = 0; k < k_scales; ++k) {
                t_total[static_cast<size_t>(k)] += timing[static_cast<size_t>(k)].total_sec;
                t_disp[static_cast<size_t>(k)] += timing[static_cast<size_t>(k)].dispatch_sec;
            }
        }
        for (int k = 0; k < k_scales; ++k) {
            totals[static_cast<size_t>(k)].push_back(t_total[static_cast<size_t>(k)]);
            dispatch[static_cast<size_t>(k)].push_back(t_disp[static_cast<size_t>(k)]);
        }
    }

    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        size_t n = v.size();
        return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    for (int k = 0; k < k_scales; ++k) {
        double t = median(totals[static_cast<size_t>(k)]);
        double dsp = median(dispatch[static_cast<size_t>(k)]);
        rep.total_sec.push_back(t);
        rep.dispatch_sec.push_back(dsp);
        rep.numeric_sec.push_back(std::max(0.0, t - dsp));
    }
    return rep;
}

}  // namespace nsvar
