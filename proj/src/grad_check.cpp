// SPDX-License-Identifier: Apache-2.0
#include "lamer/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "lamer/errors.hpp"

namespace lamer {

namespace {

double checked(double v, const std::string& where) {
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss while perturbing " + where);
    return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<double()>& loss, std::span<const GradCheckParam> params,
                           double epsilon) {
    if (!(epsilon > 0.0)) throw ConfigError("grad_check: epsilon must be positive");
    GradCheckReport report;
    checked(loss(), "nothing");
    for (const auto& p : params) {
        if (p.value == nullptr || p.analytic == nullptr || !p.value->same_shape(*p.analytic))
            throw DimensionError("grad_check: parameter '" + p.name + "' has no matching analytic gradient");
        auto values = p.value->data();
        auto analytic = p.analytic->data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + epsilon;
            const double up = checked(loss(), p.name);
            values[i] = saved - epsilon;
            const double down = checked(loss(), p.name);
            values[i] = saved;

            const double numeric = (up - down) / (2.0 * epsilon);
            const double a = analytic[i];
            const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            ++report.coordinates;
            if (rel > report.max_rel_error || report.coordinates == 1) {
                report.max_rel_error = rel;
                report.worst_param = p.name;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace lamer
