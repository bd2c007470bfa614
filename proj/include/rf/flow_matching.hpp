#pragma once

// Rectified-flow primitives on flat frame buffers.

#include "rf/autodiff.hpp"
#include "rf/rng.hpp"

#include <functional>
#include <span>
#include <vector>

namespace rf::fm {

// x_t = (1 - t) x + t eps
std::vector<double> interpolate(std::span<const double> x, std::span<const double> eps, double t);

// d x_t / dt along the straight path: eps - x
std::vector<double> velocity_target(std::span<const double> x, std::span<const double> eps);

// Mean over frames of the per-frame squared L2 velocity error. Buffers hold
// `frames` equally sized frames back to back.
double fm_loss(std::span<const double> pred_v, std::span<const double> x, std::span<const double> eps,
               std::size_t frames);

// Differentiable form: `target` is the constant eps - x.
ad::Array fm_loss(const ad::Array& pred_v, std::span<const double> target, std::size_t frames);

// s t / (1 + (s - 1) t)
double shift_timestep(double t, double s);

struct DiffusionState {
    std::vector<double> x;
    std::vector<double> eps;
    double t = 0.0;
    std::vector<double> x_t;

    static DiffusionState make(std::vector<double> x, std::vector<double> eps, double t);
};

class TimestepSchedule {
public:
    // Requires a strictly decreasing list from 1.0 to 0.0.
    TimestepSchedule(std::vector<double> steps, double shift);

    // n uniform intervals on [0, 1], each knot passed through shift_timestep.
    static TimestepSchedule shifted_uniform(std::size_t n, double shift);

    const std::vector<double>& steps() const { return steps_; }
    double shift() const { return shift_; }
    std::size_t intervals() const { return steps_.size() - 1; }

    // t_start followed by every knot strictly below it.
    std::vector<double> truncated(double t_start) const;

private:
    std::vector<double> steps_;
    double shift_;
};

using VelocityFn = std::function<std::vector<double>(std::span<const double> x_t, double t)>;

// Explicit Euler from t_start down to 0 over the truncated schedule.
std::vector<double> euler_solve(std::span<const double> x_start, double t_start, const TimestepSchedule& schedule,
                                const VelocityFn& velocity);

// sigmoid(z), z ~ N(0, 1)
double sample_logit_normal(Rng& rng);

struct SimulationTimestepSampler {
    double shift = 1.0;

    explicit SimulationTimestepSampler(double s);
    double sample(Rng& rng) const;
};

}  // namespace rf::fm
