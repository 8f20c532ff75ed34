// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "lamer/matrix.hpp"

namespace lamer {

/// One tensor under test: the live parameter (perturbed in place and restored)
/// and the analytic gradient computed beforehand by the caller.
struct GradCheckParam {
    std::string name;
    Matrix* value = nullptr;
    const Matrix* analytic = nullptr;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coordinates = 0;
};

/// Central-difference check of every coordinate of every parameter.
/// Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
/// Throws NumericError if the loss is ever non-finite.
GradCheckReport grad_check(const std::function<double()>& loss, std::span<const GradCheckParam> params,
                           double epsilon = 1e-5);

}  // namespace lamer
