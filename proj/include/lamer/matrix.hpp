// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace lamer {

/// Dense row-major matrix of doubles.
///
/// All products accumulate each output element over the shared dimension in
/// ascending index order, so results are reproducible bit-for-bit.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    static Matrix from_data(std::size_t rows, std::size_t cols, std::vector<double> data);
    static Matrix row_vector(std::span<const double> values);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    const std::vector<double>& values() const { return data_; }

    void fill(double value);
    void set_zero() { fill(0.0); }
    Matrix transposed() const;
    bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double scale);

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

std::string shape_str(const Matrix& m);

/// a · b
Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ. The common case for token-major activations times (out × in) weights.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// aᵀ · b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// out += aᵀ · b, accumulated row by row of a/b in ascending order.
void matmul_tn_acc(Matrix& out, const Matrix& a, const Matrix& b);

/// y += alpha * x
void axpy(double alpha, const Matrix& x, Matrix& y);
/// Adds `bias` (1 × cols) to every row.
void add_row_bias(Matrix& m, const Matrix& bias);
/// Column sums accumulated into `out` (1 × cols).
void accumulate_column_sums(Matrix& out, const Matrix& m);

[[noreturn]] void throw_dot_mismatch(std::size_t a, std::size_t b);

/// Ascending-index sum. Throws DimensionError on length mismatch.
inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw_dot_mismatch(a.size(), b.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}
double frobenius_norm(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& m);

}  // namespace lamer
