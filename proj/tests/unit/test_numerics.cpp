// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "lamer/errors.hpp"
#include "lamer/grad_check.hpp"
#include "lamer/matrix.hpp"
#include "lamer/numerics.hpp"
#include "lamer/optim.hpp"
#include "lamer/rng.hpp"

using namespace lamer;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (double& v : m.data()) v = rng.normal();
    return m;
}

// Plain triple loop, j-inner, no shared code with matmul.
Matrix naive_product(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            long double s = 0.0L;
            for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
            out(i, j) = static_cast<double>(s);
        }
    return out;
}

std::vector<long double> softmax_oracle(const std::vector<double>& x) {
    long double mx = x[0];
    for (double v : x) mx = std::max<long double>(mx, v);
    long double z = 0.0L;
    std::vector<long double> e(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) z += e[i] = std::exp(static_cast<long double>(x[i]) - mx);
    for (auto& v : e) v /= z;
    return e;
}

}  // namespace

TEST_CASE("matmul: identity and hand arithmetic") {
    Rng rng(1);
    const Matrix m = random_matrix(3, 4, rng);
    CHECK(matmul(Matrix::identity(3), m) == m);
    const Matrix a{{1, 2}, {3, 4}};
    const Matrix b{{1}, {1}};
    CHECK(matmul(a, b) == Matrix{{3}, {7}});
}

TEST_CASE("matmul family matches a triple-loop oracle") {
    Rng rng(2);
    const Matrix a = random_matrix(7, 5, rng);
    const Matrix b = random_matrix(5, 4, rng);
    CHECK(max_abs_diff(matmul(a, b), naive_product(a, b)) < 1e-12);
    CHECK(max_abs_diff(matmul_nt(a, b.transposed()), naive_product(a, b)) < 1e-12);
    CHECK(max_abs_diff(matmul_tn(a.transposed(), b), naive_product(a, b)) < 1e-12);

    Matrix acc(7, 4, 1.0);
    matmul_tn_acc(acc, a.transposed(), b);
    Matrix expect = naive_product(a, b);
    for (double& v : expect.data()) v += 1.0;
    CHECK(max_abs_diff(acc, expect) < 1e-12);
}

TEST_CASE("matmul_nt and matmul agree bit for bit") {
    Rng rng(3);
    const Matrix a = random_matrix(6, 9, rng);
    const Matrix b = random_matrix(9, 5, rng);
    CHECK(matmul_nt(a, b.transposed()) == matmul(a, b));
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            std::vector<double> col(b.rows());
            for (std::size_t k = 0; k < b.rows(); ++k) col[k] = b(k, j);
            CHECK(matmul(a, b)(i, j) == dot(a.row(i), col));
        }
}

TEST_CASE("matmul rejects mismatched shapes and names both") {
    const Matrix a(2, 3), b(4, 2);
    try {
        (void)matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
        CHECK(msg.find("4x2") != std::string::npos);
    }
    CHECK_THROWS_AS((void)matmul_nt(a, b), DimensionError);
    CHECK_THROWS_AS((void)dot(a.row(0), b.row(0)), DimensionError);
}

TEST_CASE("softmax: symmetry, stability and a high-precision oracle") {
    for (double p : softmax(std::vector<double>{0, 0, 0, 0})) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

    const auto big = softmax(std::vector<double>{1000.0, 0.0});
    CHECK(std::isfinite(big[0]));
    CHECK(big[0] == doctest::Approx(1.0));
    CHECK(big[1] >= 0.0);
    CHECK(big[1] < 1e-300);

    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> x(1 + rng.uniform_index(12));
        for (double& v : x) v = rng.normal(0.0, 5.0);
        const auto p = softmax(x);
        const auto q = softmax_oracle(x);
        double sum = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            CHECK(p[i] > 0.0);
            CHECK(std::abs(p[i] - static_cast<double>(q[i])) < 1e-15);
            sum += p[i];
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("cross_entropy: closed forms") {
    const Matrix uniform(3, 10);
    const std::vector<std::size_t> labels{0, 4, 9};
    const auto ce = cross_entropy(uniform, labels);
    CHECK(ce.loss == doctest::Approx(std::log(10.0)).epsilon(1e-15));
    CHECK(std::abs(ce.loss - 2.302585) < 1e-6);

    double prev = std::numeric_limits<double>::infinity();
    for (double margin : {1.0, 5.0, 20.0, 60.0}) {
        const Matrix l{{margin, 0.0, 0.0}};
        const double loss = cross_entropy(l, std::vector<std::size_t>{0}).loss;
        CHECK(loss >= 0.0);
        CHECK(loss < prev);
        prev = loss;
    }
    CHECK(prev < 1e-25);
}

TEST_CASE("cross_entropy: 4x3 logits against a per-row oracle") {
    const Matrix logits{{0.3, -1.2, 2.0}, {1.5, 1.5, -0.5}, {-2.0, 0.1, 0.7}, {0.0, 3.0, -1.0}};
    const std::vector<std::size_t> labels{2, 0, 1, 1};
    const auto ce = cross_entropy(logits, labels);
    long double total = 0.0L;
    for (std::size_t r = 0; r < 4; ++r) {
        const std::vector<double> row(logits.row(r).begin(), logits.row(r).end());
        const auto p = softmax_oracle(row);
        total -= std::log(p[labels[r]]);
        for (std::size_t c = 0; c < 3; ++c) {
            const long double expect = (p[c] - (c == labels[r] ? 1.0L : 0.0L)) / 4.0L;
            CHECK(std::abs(ce.grad(r, c) - static_cast<double>(expect)) < 1e-15);
        }
    }
    CHECK(std::abs(ce.loss - static_cast<double>(total / 4.0L)) < 1e-14);
}

TEST_CASE("cross_entropy: errors") {
    const Matrix logits(2, 3);
    CHECK_THROWS_AS(cross_entropy(logits, std::vector<std::size_t>{0, 3}), IndexError);
    CHECK_THROWS_AS(cross_entropy(logits, std::vector<std::size_t>{0}), DimensionError);
}

TEST_CASE("argmax takes the lowest index on ties") {
    CHECK(argmax(std::vector<double>{1.0, 3.0, 3.0, 2.0}) == 1);
    CHECK(argmax(std::vector<double>{-1.0}) == 0);
}

TEST_CASE("grad_check: constant and quadratic functions") {
    Matrix x{{0.5, -1.5, 2.0}};
    Matrix zero(1, 3);
    const GradCheckParam cp{"x", &x, &zero};
    const auto constant = grad_check([] { return 4.0; }, std::span(&cp, 1));
    CHECK(constant.max_rel_error == 0.0);

    Matrix analytic = x;
    const GradCheckParam qp{"x", &x, &analytic};
    auto quadratic = [&x] {
        double s = 0.0;
        for (double v : x.data()) s += 0.5 * v * v;
        return s;
    };
    const auto report = grad_check(quadratic, std::span(&qp, 1), 1e-5);
    CHECK(report.max_rel_error < 1e-7);
    CHECK(report.coordinates == 3);
    CHECK(x == Matrix{{0.5, -1.5, 2.0}});  // restored

    const GradCheckParam np{"x", &x, &zero};
    CHECK_THROWS_AS(grad_check([] { return std::nan(""); }, std::span(&np, 1)), NumericError);
}

TEST_CASE("lr schedule: warmup then linear decay") {
    const LrSchedule s{1.0, 10, 100};
    CHECK(s.at(0) == doctest::Approx(0.1));
    CHECK(s.at(9) == 1.0);
    CHECK(s.at(10) == 1.0);
    CHECK(s.at(55) == doctest::Approx(0.5));
    CHECK(s.at(100) == 0.0);
    for (std::size_t i = 1; i <= 10; ++i) CHECK(s.at(i) >= s.at(i - 1));
    for (std::size_t i = 11; i <= 100; ++i) CHECK(s.at(i) <= s.at(i - 1));
    for (std::size_t i = 0; i <= 120; ++i) CHECK(s.at(i) >= 0.0);
    const auto w = LrSchedule::with_warmup_fraction(1.5e-3, 0.08, 3000);
    CHECK(w.warmup_steps == 240);
    CHECK(w.at(239) == 1.5e-3);
}

TEST_CASE("optim_step: fixed point, shapes, quadratic descent") {
    Matrix p{{1.0, -2.0}};
    const Matrix zero(1, 2);
    OptimState st(LrSchedule{0.1, 0, 100});
    Matrix* params[] = {&p};
    const Matrix* grads[] = {&zero};
    optim_step(st, params, grads);
    CHECK(p == Matrix{{1.0, -2.0}});
    CHECK(st.first_moment.at(0).same_shape(p));
    CHECK(st.second_moment.at(0).same_shape(p));

    const Matrix wrong(2, 1);
    const Matrix* bad[] = {&wrong};
    CHECK_THROWS_AS(optim_step(st, params, bad), DimensionError);

    // f(x, y) = x^2 + 3 y^2
    Matrix x{{2.0, -1.0}};
    Matrix g(1, 2);
    OptimState q(LrSchedule{0.05, 5, 105});
    Matrix* xs[] = {&x};
    const Matrix* gs[] = {&g};
    auto f = [&x] { return x(0, 0) * x(0, 0) + 3.0 * x(0, 1) * x(0, 1); };
    std::vector<double> losses{f()};
    for (int i = 0; i < 100; ++i) {
        g(0, 0) = 2.0 * x(0, 0);
        g(0, 1) = 6.0 * x(0, 1);
        optim_step(q, xs, gs);
        losses.push_back(f());
    }
    for (std::size_t i = 6; i < losses.size(); ++i) CHECK(losses[i] < losses[i - 1]);
    CHECK(losses.back() < 1e-2 * losses.front());
}

TEST_CASE("rng: determinism and named sub-seeds") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(42);
    for (int i = 0; i < 100; ++i) {
        const double n1 = c.normal();
        CHECK(std::isfinite(n1));
    }
    CHECK(derive_seed(7, "data") == derive_seed(7, "data"));
    CHECK(derive_seed(7, "data") != derive_seed(7, "mask"));
    CHECK(derive_seed(7, "data") != derive_seed(8, "data"));

    Rng u(5);
    std::vector<int> hist(7, 0);
    for (int i = 0; i < 7000; ++i) ++hist[u.uniform_index(7)];
    for (int h : hist) CHECK(std::abs(h - 1000) < 150);
    for (int i = 0; i < 1000; ++i) {
        const auto v = u.uniform_int(-3, 3);
        CHECK(v >= -3);
        CHECK(v <= 3);
    }
    const std::vector<double> w{0.0, 3.0, 1.0};
    int ones = 0;
    for (int i = 0; i < 4000; ++i) {
        const auto k = u.categorical(w);
        CHECK(k != 0);
        ones += k == 1 ? 1 : 0;
    }
    CHECK(std::abs(ones - 3000) < 150);
}

TEST_CASE("matrix invariants") {
    Matrix m(3, 4, 2.0);
    CHECK(m.size() == 12);
    CHECK(all_finite(m));
    m(1, 2) = std::numeric_limits<double>::infinity();
    CHECK_FALSE(all_finite(m));
    CHECK_THROWS_AS(Matrix::from_data(2, 2, {1.0, 2.0, 3.0}), DimensionError);
    Matrix a(2, 2, 1.0), b(2, 3);
    CHECK_THROWS_AS(a += b, DimensionError);
}
