#pragma once

// Training regimes: teacher forcing, noise augmentation, parallel resampling
// and autoregressive resampling, plus AdamW and the warmup schedule.

#include "rf/checkpoint.hpp"
#include "rf/flow_matching.hpp"
#include "rf/kvtext.hpp"
#include "rf/model.hpp"
#include "rf/rng.hpp"
#include "rf/routing.hpp"
#include "rf/synth_data.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rf::train {

enum class Strategy { Teacher, NoiseAug, ParallelResample, ArResample };

std::string strategy_name(Strategy s);  // teacher, noise_aug, parallel_resample, ar_resample
Strategy parse_strategy(const std::string& name);

struct TrainConfig {
    Strategy strategy = Strategy::ArResample;
    double shift = 0.6;  // simulation timestep shift s
    std::size_t warmup_steps = 500;
    std::size_t total_steps = 3500;
    std::size_t batch_size = 16;
    double learning_rate = 5e-5;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t resample_solver_steps = 1;
    double cond_dropout_prob = 0.1;
    // Sparse routing is only turned on for the optional fine-tune phase.
    routing::RoutingConfig routing;
    std::size_t routing_finetune_steps = 0;
    std::size_t checkpoint_every = 500;
    std::size_t metrics_every = 1;

    void validate() const;
    std::size_t schedule_length() const { return total_steps + routing_finetune_steps; }

    void write(kv::Table& t) const;  // keys prefixed "train."
    static TrainConfig read(const kv::Table& t);
    bool operator==(const TrainConfig&) const = default;
};

class AdamW {
public:
    AdamW(std::vector<std::pair<std::string, ad::Array>> params, double lr, double beta1, double beta2, double eps,
          double weight_decay);

    // Applies one update from the current gradients; missing gradients count as zero.
    void step();

    std::uint64_t steps() const { return t_; }
    const std::vector<std::vector<double>>& first_moment() const { return m_; }
    const std::vector<std::vector<double>>& second_moment() const { return v_; }
    void set_state(std::uint64_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

private:
    std::vector<std::pair<std::string, ad::Array>> params_;
    double lr_, b1_, b2_, eps_, wd_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Square root of the summed squared gradients.
double grad_norm(const model::ModelParams& p);

struct DegradedHistory {
    std::vector<double> frames;  // same layout as the source sequence
    double t_s = 0.0;
};

// x_t = interpolate(x, eps, t_s) per frame, with fresh noise from `rng`.
DegradedHistory degrade_noise_aug(std::span<const double> x, double t_s, Rng& rng);

// Velocity for every unit of a sequence at a shared timestep, with the
// clean sequence as history.
using ParallelVelocity = std::function<std::vector<double>(std::span<const double> x_t, double t)>;

// Corrupts each frame to t_s then solves back to 0 over
// shifted_uniform(solver_steps, shift).truncated(t_s), all units in one pass per step.
DegradedHistory degrade_parallel(std::span<const double> x, double t_s, Rng& rng, const ParallelVelocity& velocity,
                                 std::size_t solver_steps, double shift);

// Per-unit velocity against everything committed so far.
class ArVelocitySource {
public:
    virtual ~ArVelocitySource() = default;
    virtual std::vector<double> velocity(std::size_t unit, std::span<const double> x_t, double t) = 0;
    // Called once a unit is finished; it becomes history for later units.
    virtual void commit(std::size_t unit, std::span<const double> x_tilde) = 0;
};

// Units are resampled in order, each conditioned on the already resampled ones.
DegradedHistory degrade_ar_resample(std::span<const double> x, std::size_t unit_size, double t_s, Rng& rng,
                                    ArVelocitySource& source, std::size_t solver_steps, double shift);

// Network-backed velocities; everything runs with gradients disabled.
ParallelVelocity model_parallel_velocity(const model::ModelParams& p, std::span<const double> clean, int cond,
                                         const routing::RoutingConfig& routing = {});

class ModelArSource : public ArVelocitySource {
public:
    ModelArSource(const model::ModelParams& p, int cond, routing::RoutingConfig routing = {});
    std::vector<double> velocity(std::size_t unit, std::span<const double> x_t, double t) override;
    void commit(std::size_t unit, std::span<const double> x_tilde) override;

private:
    const model::ModelParams& p_;
    int cond_;
    routing::RoutingConfig routing_;
    model::KVCache cache_;
};

// The exact conditional velocity eps - x for known endpoints.
class OracleArSource : public ArVelocitySource {
public:
    OracleArSource(std::vector<double> x, std::size_t unit_size) : x_(std::move(x)), unit_(unit_size) {}
    void set_noise(std::vector<double> eps) { eps_ = std::move(eps); }
    std::vector<double> velocity(std::size_t unit, std::span<const double> x_t, double t) override;
    void commit(std::size_t, std::span<const double>) override {}

private:
    std::vector<double> x_, eps_;
    std::size_t unit_;
};

struct Example {
    std::vector<double> x;  // standardized frames
    int cond = 0;
};

// Everything a single example contributes to the loss, fixed before the
// differentiable pass.
struct PreparedExample {
    std::vector<double> x_t;      // noised target frames
    std::vector<double> history;  // clean or degraded
    std::vector<double> t;        // per unit
    std::vector<double> target;   // eps - x
    int cond = 0;
    double t_s = 0.0;
};

struct StepStats {
    double loss = 0.0;
    double ts_mean = 0.0;
    double grad_norm = 0.0;
};

// Draws dropout, per-unit t and noise from `data_rng`, and t_s plus the
// degradation noise from `degrade_rng`; runs the degradation with gradients off.
PreparedExample prepare_example(const model::ModelParams& p, const Example& ex, Strategy strategy,
                                const TrainConfig& cfg, const routing::RoutingConfig& routing, Rng& data_rng,
                                Rng& degrade_rng);

// forward_train plus backward of weight * fm_loss; returns the unweighted loss.
double accumulate_example(const model::ModelParams& p, const PreparedExample& ex, double weight,
                          const routing::RoutingConfig& routing);

// Gradients of the batch mean loss, left in p. Throws on a non-finite loss,
// naming the batch seed. `prepared`, when given, receives the examples used.
StepStats compute_gradients(const model::ModelParams& p, const std::vector<Example>& batch, Strategy strategy,
                            const TrainConfig& cfg, const routing::RoutingConfig& routing, std::uint64_t batch_seed,
                            std::vector<PreparedExample>* prepared = nullptr);

StepStats teacher_step(const model::ModelParams& p, AdamW& opt, const std::vector<Example>& batch,
                       const TrainConfig& cfg, std::uint64_t batch_seed);

// Uses cfg.strategy; teacher delegates to teacher_step.
StepStats resampling_forcing_step(const model::ModelParams& p, AdamW& opt, const std::vector<Example>& batch,
                                  const TrainConfig& cfg, std::uint64_t batch_seed);

struct MetricsRow {
    std::size_t step = 0;  // 1-based, after the update
    std::string strategy;
    double loss = 0.0;
    double ts_mean = 0.0;
    double grad_norm = 0.0;
    double wall_time = 0.0;
};

inline constexpr const char* kMetricsColumns = "step,strategy,loss,ts_mean,grad_norm,wall_time";
std::string format_metrics_row(const MetricsRow& r);

// Stateful schedule: warmup teacher steps, the configured strategy up to
// total_steps, then an optional routing fine-tune.
class Trainer {
public:
    Trainer(const model::ModelConfig& mcfg, const TrainConfig& tcfg, const data::Dataset& ds, std::uint64_t seed);

    // Rejects a checkpoint whose identity differs from this run's.
    static Trainer resume(const ckpt::Checkpoint& c, const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                          const data::Dataset& ds, std::uint64_t seed);

    // Continues a finished warmup under a different post-warmup strategy.
    // Bit-identical to a fresh run of `tcfg`, since the warmup never
    // depends on the strategy.
    Trainer fork(const TrainConfig& tcfg) const;

    Strategy phase_strategy(std::size_t step_index) const;
    const routing::RoutingConfig& phase_routing(std::size_t step_index) const;

    MetricsRow step();
    bool done() const { return step_ >= tcfg_.schedule_length(); }
    std::size_t steps_done() const { return step_; }

    ckpt::Checkpoint checkpoint(const std::string& config_text, ckpt::Precision prec = ckpt::Precision::F64) const;
    std::string identity() const;

    const model::ModelParams& params() const { return params_; }
    const TrainConfig& train_config() const { return tcfg_; }
    std::uint64_t seed() const { return seed_; }

private:
    std::vector<Example> draw_batch(Rng& rng) const;

    model::ModelConfig mcfg_;
    TrainConfig tcfg_;
    const data::Dataset* ds_;
    std::uint64_t seed_;
    model::ModelParams params_;
    std::unique_ptr<AdamW> opt_;
    Rng batch_rng_;
    std::size_t step_ = 0;
    double start_time_ = 0.0;
};

struct ScheduleOptions {
    std::filesystem::path out_dir;
    std::string config_text;  // embedded in checkpoints and artifact headers
    bool resume = false;
    ckpt::Precision precision = ckpt::Precision::F64;
    std::size_t stop_after = 0;  // 0 = run to the end; otherwise stop once this many steps are done
    std::function<void(const MetricsRow&)> on_row;
};

// Writes metrics.csv, ckpt_<step>.rfck at the cadence and final.rfck.
// With resume, continues from the newest checkpoint in out_dir.
Trainer run_schedule(const model::ModelConfig& mcfg, const TrainConfig& tcfg, const data::Dataset& ds,
                     std::uint64_t seed, const ScheduleOptions& opts);

std::filesystem::path latest_checkpoint(const std::filesystem::path& dir);

}  // namespace rf::train
