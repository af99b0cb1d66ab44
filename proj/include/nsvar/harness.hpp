#pragma once

#include <string>
#include <vector>

#include "nsvar/dynroute.hpp"
#include "nsvar/flops.hpp"
#include "nsvar/model.hpp"
#include "nsvar/sparsify.hpp"

namespace nsvar {

// ------------------------------------------------------------ file plumbing

uint64_t hash_file(const std::string& path);
std::string hex64(uint64_t v);
std::string csv_double(double v);  // %.17g, reproducible
void write_text_file(const std::string& path, const std::string& content);

// P2 portable graymap; values clamped to [0, 1] and scaled to 255
void write_pgm(const std::string& path, int width, int height,
               const std::vector<double>& values01);

// ------------------------------------------------------------------ reports

void write_train_log_csv(const std::string& path, const TrainLog& log);
void write_sparsity_csv(const std::string& path, const SparsityReport& rep);
void write_cluster_csv(const std::string& path, const std::vector<ClusterResult>& results);
void write_router_csv(const std::string& path, const std::vector<RouterLayerReport>& reports);
void write_flops_csv(const std::string& path, const FlopsReport& rep);
std::string flops_table(const FlopsReport& rep);  // human-readable summary
void write_timing_csv(const std::string& path, const TimingReport& rep);
void write_trace_csv(const std::string& path, const GatingTrace& trace);

// ----------------------------------------------------------------- pipeline

struct PipelineConfig {
    std::string out_dir;
    uint64_t seed = 0;
    int n_train = 512;
    int n_heldout = 128;
    ModelConfig model;
    TrainConfig base_train;
    SparsifyConfig sparsify;
    ClusterConfig cluster;
    RouterTrainConfig router;
    // prefix of {train, sparsify, moefy, router}
    std::vector<std::string> stages = {"train", "sparsify", "moefy", "router"};
};

struct PipelineResult {
    std::string train_data, heldout_data;
    std::string dense_ckpt, sparse_ckpt, moefied_ckpt, routed_ckpt;
    std::string manifest_path;
    uint64_t manifest_hash = 0;
};

PipelineResult run_pipeline(const PipelineConfig& cfg);

// -------------------------------------------------------------------- sweep

// Schedule from a base tau scaled by the reference list's per-scale
// proportions, slightly decreasing toward fine scales.
TauSchedule schedule_from_base(double base_tau, int switch_scale, int num_scales);

enum class SweepMode { LastScales, Uniform, SingleScale };

struct CurvePoint {
    double tau = -1.0;  // base tau; -1 marks the dense baseline row
    std::string schedule_id;
    double gated_gflops = 0.0;
    double dense_gflops = 0.0;
    double nll = 0.0;
    std::vector<double> experts_per_scale;
};

struct SweepConfig {
    SweepMode mode = SweepMode::LastScales;
    int switch_scale = 0;     // 0 = num_scales - 2 (last three scales)
    int single_scale = 0;     // SingleScale mode
    ForwardMode forward_mode = ForwardMode::DynkMax;
    int gen_per_point = 2;    // generation traces averaged per point
    uint64_t gen_seed = 17;
    double cfg_scale = 1.5;
};

std::vector<CurvePoint> tau_sweep(const NextScaleModel& model, const TokenDataset& heldout,
                                  const std::vector<double>& taus, const SweepConfig& cfg);

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& points,
                     const std::string& note);

// one curve per scale, MoE active only at that scale
std::vector<std::pair<int, std::vector<CurvePoint>>> scale_ablation(
    const NextScaleModel& model, const TokenDataset& heldout, const std::vector<double>& taus,
    const SweepConfig& cfg);

void write_ablation_csv(const std::string& path,
                        const std::vector<std::pair<int, std::vector<CurvePoint>>>& curves);

// ------------------------------------------------------------------ heatmap

struct HeatmapGrid {
    int scale = 0;
    int side = 0;
    std::vector<int64_t> counts;  // selected experts summed over layers+passes
};

// Samples with gating and sums per-token selected experts across layers and
// both guidance passes. When out_dir is non-empty, writes heat_scale<k>.pgm,
// heatmap.csv and the decoded sample.pgm there.
std::vector<HeatmapGrid> expert_heatmap(const NextScaleModel& model, int class_id, uint64_t seed,
                                        const TauSchedule& schedule, ForwardMode mode,
                                        const std::string& out_dir);

// -------------------------------------------------------------- alpha study

struct AlphaStudyConfig {
    std::vector<double> alphas{0.0, 0.001, 0.01, 0.1, 1.0};
    double control_alpha = 0.1;  // GeLU (no ReLUfication) control
    SparsifyConfig tune;
    ClusterConfig cluster;
    std::vector<double> oracle_taus{0.0, 0.5, 0.9};
    uint64_t gen_seed = 29;
};

// Per alpha: ReLUfy + fine-tune, report sparsity and dense NLL, then MoEfy and
// evaluate oracle-mode NLL/FLOP points. Adds one GeLU control without
// ReLUfication. Writes alpha_study.csv and alpha_curves.csv under out_dir.
void alpha_study(const NextScaleModel& base, const TokenDataset& train_ds,
                 const TokenDataset& heldout, const AlphaStudyConfig& cfg,
                 const std::string& out_dir);

}  // namespace nsvar
