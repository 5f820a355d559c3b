#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "msgen/error.hpp"

namespace msgen::segnet {

struct AdamConfig {
    double lr = 1e-3;
    double weight_decay = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;

    AdamState() = default;
    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

/// One Adam update with L2-coupled weight decay (the decay term is added
/// to the gradient before the moment updates). Moments are kept in double
/// regardless of the parameter type.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state, const AdamConfig& cfg)
{
    if (grads.size() != params.size())
        throw ValidationError("adam_step: gradient size does not match parameters");
    if (state.m.empty() && state.t == 0) state = AdamState(params.size());
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw ValidationError("adam_step: optimizer state size does not match parameters");

    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double p = static_cast<double>(params[i]);
        const double g = static_cast<double>(grads[i]) + cfg.weight_decay * p;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        params[i] = static_cast<T>(p - cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
}

} // namespace msgen::segnet
