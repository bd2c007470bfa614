#pragma once

// Test-only helpers: random arrays and a central finite-difference oracle
// that never touches the reverse-mode path it checks.

#include "rf/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace rf::test {

inline ad::Array random_array(std::mt19937_64& gen, ad::Shape shape, bool requires_grad = true, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = dist(gen);
    return ad::Array::from(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> random_vector(std::mt19937_64& gen, std::size_t n, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(gen);
    return v;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double rel_error(std::span<const double> a, std::span<const double> b) {
    double num = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double den = std::max(std::sqrt(na), std::sqrt(nb));
    return den == 0.0 ? 0.0 : std::sqrt(num) / den;
}

using ScalarFn = std::function<ad::Array(const std::vector<ad::Array>&)>;

// Central differences on plain values, re-evaluating `fn` with gradients off.
inline std::vector<double> finite_difference(const ScalarFn& fn, const std::vector<ad::Array>& inputs,
                                             std::size_t which, double step = 1e-6) {
    ad::NoGradGuard guard;
    std::vector<double> base(inputs[which].data().begin(), inputs[which].data().end());
    std::vector<double> grad(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        auto eval = [&](double delta) {
            auto v = base;
            v[i] += delta;
            auto args = inputs;
            args[which] = ad::Array::from(inputs[which].shape(), std::move(v));
            return fn(args).item();
        };
        grad[i] = (eval(step) - eval(-step)) / (2.0 * step);
    }
    return grad;
}

// Worst relative error over all inputs between reverse-mode and finite differences.
inline double gradient_check(const ScalarFn& fn, const std::vector<ad::Array>& inputs, double step = 1e-6) {
    for (auto a : inputs) a.zero_grad();
    auto loss = fn(inputs);
    ad::backward(loss);
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (!inputs[k].requires_grad()) continue;
        auto fd = finite_difference(fn, inputs, k, step);
        auto an = inputs[k].grad_or_zero();
        worst = std::max(worst, rel_error(an, fd));
    }
    return worst;
}

}  // namespace rf::test
