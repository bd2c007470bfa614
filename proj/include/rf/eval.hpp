#pragma once

// Autoregressive sampling with classifier-free guidance, long-horizon drift
// evaluation, routing-frequency statistics and the strategy comparison.

#include "rf/kvtext.hpp"
#include "rf/model.hpp"
#include "rf/routing.hpp"
#include "rf/synth_data.hpp"
#include "rf/training.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace rf::eval {

struct RolloutConfig {
    std::size_t num_frames = 64;
    std::size_t solver_steps = 32;
    double shift = 5.0;
    double cfg_scale = 5.0;
    routing::RoutingConfig routing;
    std::uint64_t seed = 0;

    void validate(const model::ModelConfig& m) const;
    void write(kv::Table& t) const;  // keys prefixed "eval."
    static RolloutConfig read(const kv::Table& t);
    bool operator==(const RolloutConfig&) const = default;
};

struct RolloutHooks {
    // unit, solver step, conditional / unconditional / guided velocity
    std::function<void(std::size_t, std::size_t, std::span<const double>, std::span<const double>,
                        std::span<const double>)>
        on_guidance;
    // Instruments the conditional branch while denoising this unit only.
    std::size_t instrument_unit = static_cast<std::size_t>(-1);
    model::InferenceHooks* inference = nullptr;
};

// Standardized frames, num_frames * tokens * d_in values. Each unit starts
// from fresh noise and is solved over shifted_uniform(solver_steps, shift)
// with v = v_null + w (v_c - v_null); the result is appended to both caches.
std::vector<double> rollout(const model::ModelParams& p, int cond, const RolloutConfig& cfg,
                            RolloutHooks* hooks = nullptr);

struct DriftCurves {
    std::string model;
    std::vector<std::vector<double>> per_seed;  // residuals r_1..r_{N-1}
    std::vector<double> mean;
    double late_mean = 0.0;   // target frames 33..64
    double early_mean = 0.0;  // target frames 2..32
};

// Residual r_i compares frame i + 1 against the map applied to frame i;
// `frame_lo`, `frame_hi` are 1-based target frames, inclusive.
double window_mean(std::span<const double> residuals, std::size_t frame_lo, std::size_t frame_hi);

inline constexpr std::size_t kEarlyFirst = 2, kEarlyLast = 32, kLateFirst = 33, kLateLast = 64;

struct NamedModel {
    std::string name;
    const model::ModelParams* params = nullptr;
};

// Rolls out n_seeds sequences per model (seed i uses mix(cfg.seed, i)),
// unstandardizes with `stats` and scores them with dynamics_residual.
std::vector<DriftCurves> drift_eval(const std::vector<NamedModel>& models, const data::DynamicsSpec& spec,
                                    const data::Stats& stats, const RolloutConfig& cfg, std::size_t n_seeds);

// Residuals of one sequence of unstandardized frames.
std::vector<double> sequence_residuals(const data::DynamicsSpec& spec, std::span<const double> raw_frames);

// model,seed,frame,residual; frame is the 1-based target frame.
void write_drift_csv(const std::filesystem::path& path, const std::vector<DriftCurves>& curves,
                     const std::string& header);
void write_drift_summary_csv(const std::filesystem::path& path, const std::vector<DriftCurves>& curves,
                             const std::string& header);

struct PlotSeries {
    std::string name;
    std::vector<double> x, y;
};

// Plain line chart; a non-empty header goes into an XML comment.
void write_svg_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series, const std::string& title,
                    const std::string& x_label, const std::string& y_label, const std::string& header = {});

struct RoutingStats {
    std::size_t target_frame = 0;  // 1-based
    std::size_t layers = 0, heads = 0, history = 0;
    std::size_t queries = 0;  // query tokens per step
    std::size_t steps = 0;
    // counts[(layer * heads + head) * history + j] for history frame j + 1
    std::vector<std::size_t> counts;

    std::size_t count(std::size_t layer, std::size_t head, std::size_t history_index) const;
    std::size_t total() const;
    // Selections summed over layers and heads, per history frame.
    std::vector<std::size_t> per_history() const;
};

// Rolls out up to target_frame and counts, for the conditional branch while
// denoising that frame, how often each history frame is selected.
RoutingStats routing_stats(const model::ModelParams& p, int cond, const RolloutConfig& cfg, std::size_t target_frame);

// layer,head,history_index,count
void write_routing_csv(const std::filesystem::path& path, const RoutingStats& st, const std::string& header);

struct MatrixEntry {
    train::Strategy strategy;
    double shift = 0.6;
};

// teacher (reported at s = 0), noise_aug and parallel_resample at 0.6,
// ar_resample at 0.1, 0.6 and 5.0.
std::vector<MatrixEntry> default_matrix();

struct MatrixRow {
    std::string strategy;
    double shift = 0.0;
    double late_mean = 0.0;
    double early_mean = 0.0;
};

struct MatrixOptions {
    std::size_t n_seeds = 10;
    std::filesystem::path out_dir;  // per-entry final checkpoints, when set
    std::string config_text;
    std::function<void(const std::string&)> progress;
};

struct MatrixResult {
    std::vector<MatrixRow> rows;  // ascending late_mean, then early_mean
    std::vector<DriftCurves> curves;
};

// One shared teacher-forcing warmup, then one training per entry with the
// same step budget, each scored by drift_eval.
MatrixResult strategy_matrix(const data::Dataset& ds, const model::ModelConfig& mcfg, const train::TrainConfig& base,
                             std::uint64_t seed, const std::vector<MatrixEntry>& entries, const RolloutConfig& rcfg,
                             const MatrixOptions& opts);

// strategy,s,late_mean,early_mean
void write_matrix_csv(const std::filesystem::path& path, const std::vector<MatrixRow>& rows, const std::string& header);

// Least-squares slope of y against x.
double linear_slope(std::span<const double> x, std::span<const double> y);

}  // namespace rf::eval
