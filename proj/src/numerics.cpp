// SPDX-License-Identifier: Apache-2.0
#include "lamer/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lamer/errors.hpp"

namespace lamer {

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    if (logits.empty()) return out;
    const double peak = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - peak);
        total += out[i];
    }
    for (double& v : out) v /= total;
    return out;
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto p = softmax(logits.row(r));
        std::copy(p.begin(), p.end(), out.row(r).begin());
    }
    return out;
}

CrossEntropy cross_entropy(const Matrix& logits, std::span<const std::size_t> labels) {
    if (labels.size() != logits.rows()) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             shape_str(logits) + " logits");
    }
    if (logits.rows() == 0) throw StateError("cross_entropy: no rows");
    const std::size_t classes = logits.cols();
    const double inv_rows = 1.0 / static_cast<double>(logits.rows());

    CrossEntropy result;
    result.grad = Matrix(logits.rows(), classes);
    double total = 0.0;
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        const std::size_t y = labels[t];
        if (y >= classes) {
            throw IndexError("cross_entropy: label " + std::to_string(y) + " at row " + std::to_string(t) +
                             " outside [0, " + std::to_string(classes) + ")");
        }
        auto row = logits.row(t);
        const double peak = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - peak);
        const double log_z = std::log(z) + peak;
        total += log_z - row[y];
        auto g = result.grad.row(t);
        for (std::size_t c = 0; c < classes; ++c) g[c] = std::exp(row[c] - log_z) * inv_rows;
        g[y] -= inv_rows;
    }
    result.loss = total * inv_rows;
    return result;
}

std::size_t argmax(std::span<const double> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[best]) best = i;
    return best;
}

}  // namespace lamer
