// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lamer/matrix.hpp"

namespace lamer {

/// Linear warmup to `peak` then linear decay to zero at `total_steps`.
/// Step s (0-based) of the warmup uses peak * (s + 1) / warmup_steps.
struct LrSchedule {
    double peak = 1.5e-3;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 1;

    static LrSchedule with_warmup_fraction(double peak, double fraction, std::size_t total_steps);
    double at(std::size_t step) const;
};

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
};

/// Adam moments for an ordered list of parameter tensors.
struct OptimState {
    LrSchedule schedule;
    AdamOptions options;
    std::size_t step = 0;
    std::vector<Matrix> first_moment;
    std::vector<Matrix> second_moment;

    explicit OptimState(LrSchedule s = {}, AdamOptions o = {}) : schedule(s), options(o) {}
    double current_lr() const { return schedule.at(step); }
};

/// One bias-corrected Adam update. Moments are allocated on the first call
/// and must shape-match their parameters afterwards.
void optim_step(OptimState& state, std::span<Matrix* const> params, std::span<const Matrix* const> grads);

}  // namespace lamer
