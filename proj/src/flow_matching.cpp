#include "rf/flow_matching.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace rf::fm {

namespace {

void require_same_size(std::span<const double> a, std::span<const double> b, const char* op) {
    if (a.size() != b.size()) {
        throw std::invalid_argument(std::string(op) + ": size mismatch " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
    }
}

}  // namespace

std::vector<double> interpolate(std::span<const double> x, std::span<const double> eps, double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("interpolate: t outside [0, 1]: " + std::to_string(t));
    require_same_size(x, eps, "interpolate");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (1.0 - t) * x[i] + t * eps[i];
    return out;
}

std::vector<double> velocity_target(std::span<const double> x, std::span<const double> eps) {
    require_same_size(x, eps, "velocity_target");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = eps[i] - x[i];
    return out;
}

double fm_loss(std::span<const double> pred_v, std::span<const double> x, std::span<const double> eps,
               std::size_t frames) {
    if (frames == 0) throw std::invalid_argument("fm_loss: no frames");
    require_same_size(pred_v, x, "fm_loss");
    require_same_size(x, eps, "fm_loss");
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = (eps[i] - x[i]) - pred_v[i];
        total += d * d;
    }
    return total / static_cast<double>(frames);
}

ad::Array fm_loss(const ad::Array& pred_v, std::span<const double> target, std::size_t frames) {
    if (frames == 0) throw std::invalid_argument("fm_loss: no frames");
    if (pred_v.size() != target.size()) {
        throw std::invalid_argument("fm_loss: prediction shape " + ad::shape_str(pred_v.shape()) +
                                    " vs target length " + std::to_string(target.size()));
    }
    auto t = ad::Array::from(pred_v.shape(), std::vector<double>(target.begin(), target.end()));
    auto diff = t - pred_v;
    return ad::mul_scalar(ad::sum(diff * diff), 1.0 / static_cast<double>(frames));
}

double shift_timestep(double t, double s) {
    if (!(s > 0.0)) throw std::invalid_argument("shift_timestep: shift must be positive, got " + std::to_string(s));
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("shift_timestep: t outside [0, 1]: " + std::to_string(t));
    if (t == 0.0 || t == 1.0) return t;
    // Extended precision keeps the result correctly rounded for dyadic t (e.g. 0.5 -> 0.375 at s = 0.6).
    const long double sl = s, tl = t;
    return static_cast<double>(sl * tl / (1.0L + (sl - 1.0L) * tl));
}

DiffusionState DiffusionState::make(std::vector<double> x, std::vector<double> eps, double t) {
    DiffusionState st;
    st.x_t = interpolate(x, eps, t);
    st.x = std::move(x);
    st.eps = std::move(eps);
    st.t = t;
    return st;
}

TimestepSchedule::TimestepSchedule(std::vector<double> steps, double shift) : steps_(std::move(steps)), shift_(shift) {
    if (steps_.size() < 2) throw std::invalid_argument("TimestepSchedule: need at least two knots");
    if (steps_.front() != 1.0 || steps_.back() != 0.0) {
        throw std::invalid_argument("TimestepSchedule: endpoints must be exactly 1 and 0");
    }
    for (std::size_t i = 1; i < steps_.size(); ++i) {
        if (!(steps_[i] < steps_[i - 1])) throw std::invalid_argument("TimestepSchedule: knots must strictly decrease");
    }
    if (!(shift_ > 0.0)) throw std::invalid_argument("TimestepSchedule: shift must be positive");
}

TimestepSchedule TimestepSchedule::shifted_uniform(std::size_t n, double shift) {
    if (n == 0) throw std::invalid_argument("TimestepSchedule: zero steps");
    std::vector<double> knots(n + 1);
    for (std::size_t k = 0; k <= n; ++k) {
        const double u = k == n ? 0.0 : 1.0 - static_cast<double>(k) / static_cast<double>(n);
        knots[k] = shift_timestep(u, shift);
    }
    return TimestepSchedule(std::move(knots), shift);
}

std::vector<double> TimestepSchedule::truncated(double t_start) const {
    if (!(t_start > 0.0 && t_start <= 1.0)) {
        throw std::invalid_argument("TimestepSchedule::truncated: t_start outside (0, 1]: " + std::to_string(t_start));
    }
    std::vector<double> out{t_start};
    for (double t : steps_)
        if (t < t_start) out.push_back(t);
    return out;
}

std::vector<double> euler_solve(std::span<const double> x_start, double t_start, const TimestepSchedule& schedule,
                                const VelocityFn& velocity) {
    const auto knots = schedule.truncated(t_start);
    std::vector<double> x(x_start.begin(), x_start.end());
    for (std::size_t k = 0; k + 1 < knots.size(); ++k) {
        const double dt = knots[k + 1] - knots[k];
        const auto v = velocity(x, knots[k]);
        require_same_size(x, v, "euler_solve");
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += dt * v[i];
    }
    return x;
}

double sample_logit_normal(Rng& rng) {
    const double z = rng.normal();
    return 1.0 / (1.0 + std::exp(-z));
}

SimulationTimestepSampler::SimulationTimestepSampler(double s) : shift(s) {
    if (!(s > 0.0)) throw std::invalid_argument("SimulationTimestepSampler: shift must be positive");
}

double SimulationTimestepSampler::sample(Rng& rng) const {
    // Box-Muller keeps |z| below ~8.6, so the sigmoid stays strictly inside (0, 1).
    return shift_timestep(sample_logit_normal(rng), shift);
}

}  // namespace rf::fm
