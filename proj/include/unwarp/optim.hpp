#pragma once

#include <cmath>
#include <map>
#include <string>

#include "unwarp/autodiff.hpp"

namespace unwarp {

template <typename T>
struct AdamWConfig {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(1e-2);
};

template <typename T>
struct AdamWState {
    NdArray<T> m;  // first moment
    NdArray<T> v;  // second moment
    std::int64_t step = 0;
};

// One decoupled-weight-decay Adam step. Decay is applied directly to the
// parameter, not folded into the gradient.
template <typename T>
void adamw_step(NdArray<T>& param, const NdArray<T>& grad, AdamWState<T>& state, const AdamWConfig<T>& cfg) {
    require(param.shape == grad.shape,
            "adamw_step: grad shape " + grad.shape.str() + " does not match param " + param.shape.str());
    if (state.m.data.empty()) {
        state.m = NdArray<T>::zeros(param.shape);
        state.v = NdArray<T>::zeros(param.shape);
    }
    require(state.m.shape == param.shape && state.v.shape == param.shape,
            "adamw_step: moment shape does not match param " + param.shape.str());
    state.step += 1;
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step)));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step)));
    for (size_t i = 0; i < param.data.size(); ++i) {
        const T g = grad.data[i];
        state.m.data[i] = cfg.beta1 * state.m.data[i] + (T(1) - cfg.beta1) * g;
        state.v.data[i] = cfg.beta2 * state.v.data[i] + (T(1) - cfg.beta2) * g * g;
        const T mhat = state.m.data[i] / bc1;
        const T vhat = state.v.data[i] / bc2;
        param.data[i] -= cfg.lr * cfg.weight_decay * param.data[i];
        param.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

// One-cycle schedule: linear ramp from max_lr/25 over the warmup fraction,
// then cosine decay down to max_lr/1e4.
inline double onecycle_lr(std::int64_t step, std::int64_t total_steps, double max_lr, double warmup_frac = 0.1) {
    require(total_steps >= 1, "onecycle_lr: total_steps must be >= 1");
    require(step >= 0 && step < total_steps,
            "onecycle_lr: step " + std::to_string(step) + " outside [0," + std::to_string(total_steps) + ")");
    const double start = max_lr / 25.0;
    const double final_lr = max_lr / 1e4;
    const double warm = warmup_frac * static_cast<double>(total_steps);
    if (static_cast<double>(step) < warm) {
        const double t = warm > 0 ? static_cast<double>(step) / warm : 1.0;
        return start + (max_lr - start) * t;
    }
    const double span = static_cast<double>(total_steps - 1) - warm;
    const double t = span > 0 ? (static_cast<double>(step) - warm) / span : 1.0;
    return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace unwarp
