// SPDX-License-Identifier: Apache-2.0
#include "lamer/matrix.hpp"

#include <algorithm>
#include <cmath>

#include "lamer/errors.hpp"

namespace lamer {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) {
            throw DimensionError("ragged initializer: expected rows of length " +
                                 std::to_string(cols_) + ", got " + std::to_string(r.size()));
        }
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_data(std::size_t rows, std::size_t cols, std::vector<double> data) {
    if (data.size() != rows * cols) {
        throw DimensionError("from_data: " + std::to_string(data.size()) + " values for a " +
                             std::to_string(rows) + "x" + std::to_string(cols) + " matrix");
    }
    Matrix m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.data_ = std::move(data);
    return m;
}

Matrix Matrix::row_vector(std::span<const double> values) {
    return from_data(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix& Matrix::operator+=(const Matrix& other) {
    if (!same_shape(other))
        throw DimensionError("operator+=: " + shape_str(*this) + " vs " + shape_str(other));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    if (!same_shape(other))
        throw DimensionError("operator-=: " + shape_str(*this) + " vs " + shape_str(other));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double scale) {
    for (double& v : data_) v *= scale;
    return *this;
}

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw DimensionError("matmul: " + shape_str(a) + " times " + shape_str(b));
    Matrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    // i-k-j order: each out(i, j) still sums over k in ascending order.
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* o = out.row(i).data();
        const double* ar = a.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = ar[k];
            const double* br = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) o[j] += aik * br[j];
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols())
        throw DimensionError("matmul_nt: " + shape_str(a) + " times transpose of " + shape_str(b));
    // Same per-element summation order as a row-by-row dot product.
    return matmul(a, b.transposed());
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    Matrix out(a.cols(), b.cols());
    matmul_tn_acc(out, a, b);
    return out;
}

void matmul_tn_acc(Matrix& out, const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
        throw DimensionError("matmul_tn: transpose of " + shape_str(a) + " times " + shape_str(b) +
                             " into " + shape_str(out));
    }
    const std::size_t n = b.cols();
    for (std::size_t t = 0; t < a.rows(); ++t) {
        const double* ar = a.row(t).data();
        const double* br = b.row(t).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double ai = ar[i];
            if (ai == 0.0) continue;
            double* o = out.row(i).data();
            for (std::size_t j = 0; j < n; ++j) o[j] += ai * br[j];
        }
    }
}

void axpy(double alpha, const Matrix& x, Matrix& y) {
    if (!x.same_shape(y)) throw DimensionError("axpy: " + shape_str(x) + " vs " + shape_str(y));
    auto xs = x.data();
    auto ys = y.data();
    for (std::size_t i = 0; i < xs.size(); ++i) ys[i] += alpha * xs[i];
}

void add_row_bias(Matrix& m, const Matrix& bias) {
    if (bias.rows() != 1 || bias.cols() != m.cols())
        throw DimensionError("add_row_bias: " + shape_str(m) + " with bias " + shape_str(bias));
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) row[c] += bias(0, c);
    }
}

void accumulate_column_sums(Matrix& out, const Matrix& m) {
    if (out.rows() != 1 || out.cols() != m.cols())
        throw DimensionError("accumulate_column_sums: " + shape_str(out) + " vs " + shape_str(m));
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) out(0, c) += row[c];
    }
}

void throw_dot_mismatch(std::size_t a, std::size_t b) {
    throw DimensionError("dot: lengths " + std::to_string(a) + " and " + std::to_string(b));
}

double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data()) s += v * v;
    return std::sqrt(s);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw DimensionError("max_abs_diff: " + shape_str(a) + " vs " + shape_str(b));
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

bool all_finite(const Matrix& m) {
    return std::all_of(m.data().begin(), m.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace lamer
