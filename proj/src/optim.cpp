// SPDX-License-Identifier: Apache-2.0
#include "lamer/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lamer/errors.hpp"

namespace lamer {

LrSchedule LrSchedule::with_warmup_fraction(double peak, double fraction, std::size_t total_steps) {
    if (peak < 0.0 || fraction < 0.0 || fraction > 1.0)
        throw ConfigError("learning-rate schedule: peak must be >= 0 and warmup fraction in [0, 1]");
    LrSchedule s;
    s.peak = peak;
    s.total_steps = std::max<std::size_t>(total_steps, 1);
    s.warmup_steps = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(s.total_steps)));
    return s;
}

double LrSchedule::at(std::size_t step) const {
    if (step < warmup_steps)
        return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (step >= total_steps || total_steps <= warmup_steps) return step == warmup_steps ? peak : 0.0;
    return peak * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup_steps);
}

void optim_step(OptimState& state, std::span<Matrix* const> params, std::span<const Matrix* const> grads) {
    if (params.size() != grads.size()) {
        throw DimensionError("optim_step: " + std::to_string(params.size()) + " parameters but " +
                             std::to_string(grads.size()) + " gradients");
    }
    if (state.first_moment.empty() && !params.empty()) {
        for (const Matrix* p : params) {
            state.first_moment.emplace_back(p->rows(), p->cols());
            state.second_moment.emplace_back(p->rows(), p->cols());
        }
    }
    if (state.first_moment.size() != params.size())
        throw DimensionError("optim_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                             " tensors, got " + std::to_string(params.size()));

    const auto& o = state.options;
    const double lr = state.schedule.at(state.step);
    const double t = static_cast<double>(state.step + 1);
    const double correction1 = 1.0 - std::pow(o.beta1, t);
    const double correction2 = 1.0 - std::pow(o.beta2, t);

    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& p = *params[i];
        const Matrix& g = *grads[i];
        Matrix& m = state.first_moment[i];
        Matrix& v = state.second_moment[i];
        if (!p.same_shape(g) || !p.same_shape(m)) {
            throw DimensionError("optim_step: tensor " + std::to_string(i) + " has shape " + shape_str(p) +
                                 ", gradient " + shape_str(g) + ", moments " + shape_str(m));
        }
        auto pd = p.data();
        auto gd = g.data();
        auto md = m.data();
        auto vd = v.data();
        for (std::size_t j = 0; j < pd.size(); ++j) {
            md[j] = o.beta1 * md[j] + (1.0 - o.beta1) * gd[j];
            vd[j] = o.beta2 * vd[j] + (1.0 - o.beta2) * gd[j] * gd[j];
            const double m_hat = md[j] / correction1;
            const double v_hat = vd[j] / correction2;
            pd[j] -= lr * m_hat / (std::sqrt(v_hat) + o.eps);
        }
    }
    ++state.step;
}

}  // namespace lamer
