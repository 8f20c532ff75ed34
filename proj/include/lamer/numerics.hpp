// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lamer/matrix.hpp"

namespace lamer {

/// Max-subtracted softmax; entries are positive and sum to one.
std::vector<double> softmax(std::span<const double> logits);

/// Row-wise softmax of a matrix.
Matrix softmax_rows(const Matrix& logits);

struct CrossEntropy {
    double loss = 0.0;  ///< mean negative log-probability over rows
    Matrix grad;        ///< d loss / d logits = (softmax - onehot) / rows
};

/// Mean cross-entropy of `logits` (T × C) against integer `labels`.
/// Throws IndexError for a label outside [0, C), DimensionError when the
/// label count differs from T, StateError when T is zero.
CrossEntropy cross_entropy(const Matrix& logits, std::span<const std::size_t> labels);

/// Index of the largest entry, lowest index on ties.
std::size_t argmax(std::span<const double> values);

}  // namespace lamer
