// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "lamer/errors.hpp"
#include "lamer/grad_check.hpp"
#include "lamer/lamer_module.hpp"
#include "lamer/numerics.hpp"

using namespace lamer;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
    Matrix m(r, c);
    for (double& v : m.data()) v = rng.normal(0.0, sd);
    return m;
}

LamerModule random_module(const LamerConfig& cfg, Rng& rng) {
    LamerModule m = LamerModule::create(cfg, random_matrix(cfg.d_out, cfg.d_in, rng), rng);
    for (auto& e : m.experts) e.b = random_matrix(cfg.d_out, cfg.rank, rng, 0.5);
    m.router = random_matrix(cfg.num_experts, cfg.d_in, rng, 0.7);
    return m;
}

// Evaluates every expert and weights it by the (mostly zero) weight vector.
Matrix dense_oracle(const Matrix& h0, const LamerModule& m) {
    Matrix out = matmul_nt(h0, m.base);
    for (std::size_t t = 0; t < h0.rows(); ++t) {
        std::vector<double> logits(m.config.num_experts);
        for (std::size_t k = 0; k < logits.size(); ++k)
            for (std::size_t i = 0; i < h0.cols(); ++i) logits[k] += m.router(k, i) * h0(t, i);
        const auto p = softmax(logits);
        std::vector<std::size_t> order(p.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
        std::vector<double> w(p.size(), 0.0);
        double s = 0.0;
        for (std::size_t j = 0; j < m.config.top_k; ++j) s += p[order[j]];
        for (std::size_t j = 0; j < m.config.top_k; ++j) w[order[j]] = p[order[j]] / s;
        for (std::size_t k = 0; k < p.size(); ++k) {
            const Matrix x = Matrix::row_vector(h0.row(t));
            const Matrix delta = matmul_nt(matmul_nt(x, m.experts[k].a), m.experts[k].b);
            for (std::size_t o = 0; o < out.cols(); ++o) out(t, o) += w[k] * delta(0, o);
        }
    }
    return out;
}

}  // namespace

TEST_CASE("route: symmetric logits and the tie rule") {
    const auto d = route_logits(std::vector<double>{0, 0, 0, 0}, 2);
    CHECK(d.selected == std::vector<std::size_t>{0, 1});
    CHECK(d.weights == std::vector<double>{0.5, 0.5, 0.0, 0.0});
}

TEST_CASE("route: renormalization arithmetic") {
    const std::vector<double> logits{std::log(0.5), std::log(0.3), std::log(0.2)};
    const auto d = route_logits(logits, 2);
    CHECK(d.selected == std::vector<std::size_t>{0, 1});
    CHECK(d.weights[0] == doctest::Approx(0.625).epsilon(1e-14));
    CHECK(d.weights[1] == doctest::Approx(0.375).epsilon(1e-14));
    CHECK(d.weights[2] == 0.0);
}

TEST_CASE("route: selected set equals a full-sort oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> logits(8);
        for (double& v : logits) v = rng.normal();
        const auto d = route_logits(logits, 3);
        std::vector<std::size_t> order(8);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return logits[a] > logits[b]; });
        std::vector<std::size_t> expect(order.begin(), order.begin() + 3);
        std::vector<std::size_t> got = d.selected;
        std::sort(expect.begin(), expect.end());
        std::sort(got.begin(), got.end());
        CHECK(got == expect);

        std::size_t nonzero = 0;
        double sum = 0.0;
        for (double w : d.weights) {
            nonzero += w != 0.0 ? 1 : 0;
            sum += w;
        }
        CHECK(nonzero == 3);
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("route: shift invariance of the gate") {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> logits(6);
        for (double& v : logits) v = rng.normal();
        std::vector<double> shifted = logits;
        const double c = rng.normal(0.0, 10.0);
        for (double& v : shifted) v += c;
        const auto a = route_logits(logits, 2);
        const auto b = route_logits(shifted, 2);
        CHECK(a.selected == b.selected);
        for (std::size_t k = 0; k < 6; ++k) {
            CHECK(std::abs(a.probs[k] - b.probs[k]) < 1e-12);
            CHECK(std::abs(a.weights[k] - b.weights[k]) < 1e-12);
        }
    }
}

TEST_CASE("config validation") {
    CHECK_THROWS_AS((LamerConfig{8, 8, 2, 4, 5}.validate()), ConfigError);
    CHECK_THROWS_AS((LamerConfig{8, 8, 2, 4, 0}.validate()), ConfigError);
    CHECK_THROWS_AS((LamerConfig{8, 6, 6, 4, 2}.validate()), ConfigError);
    CHECK_THROWS_AS((LamerConfig{8, 6, 0, 4, 2}.validate()), ConfigError);
    CHECK_NOTHROW((LamerConfig{8, 6, 5, 4, 4}.validate()));
}

TEST_CASE("lamer_forward: zero-delta initialization is bit-exact") {
    Rng rng(13);
    const LamerConfig cfg{10, 7, 3, 4, 2};
    const LamerModule m = LamerModule::create(cfg, random_matrix(7, 10, rng), rng);
    for (const auto& e : m.experts) {
        CHECK(e.b == Matrix(7, 3));
        CHECK(e.a.rows() == 3);
        CHECK(e.a.cols() == 10);
    }
    const Matrix h0 = random_matrix(9, 10, rng);
    CHECK(lamer_forward(h0, m).output == matmul_nt(h0, m.base));
}

TEST_CASE("lamer_forward: K = N with a single nonzero expert") {
    Rng rng(14);
    const LamerConfig cfg{6, 5, 2, 3, 3};
    LamerModule m = LamerModule::create(cfg, random_matrix(5, 6, rng), rng);
    m.router = random_matrix(3, 6, rng);
    m.experts[1].b = random_matrix(5, 2, rng);
    const Matrix h0 = random_matrix(4, 6, rng);
    const auto out = lamer_forward(h0, m);
    for (std::size_t t = 0; t < 4; ++t) {
        const auto p = route(h0.row(t), m.router, 3).probs;
        const Matrix x = Matrix::row_vector(h0.row(t));
        const Matrix base = matmul_nt(x, m.base);
        const Matrix delta = matmul_nt(matmul_nt(x, m.experts[1].a), m.experts[1].b);
        for (std::size_t o = 0; o < 5; ++o) CHECK(std::abs(out.output(t, o) - (base(0, o) + p[1] * delta(0, o))) < 1e-12);
    }
}

TEST_CASE("lamer_forward: sparse output equals the dense masked-sum oracle") {
    Rng rng(15);
    for (std::size_t n : {2, 4, 8}) {
        const LamerConfig cfg{12, 9, 3, n, std::min<std::size_t>(2, n)};
        const LamerModule m = random_module(cfg, rng);
        const Matrix h0 = random_matrix(16, 12, rng);
        const auto out = lamer_forward(h0, m);
        CHECK(max_abs_diff(out.output, dense_oracle(h0, m)) < 1e-10);
        CHECK(out.decisions.size() == 16);
        CHECK(out.stats.tokens == 16);
    }
    const LamerModule m = random_module({12, 9, 3, 4, 2}, rng);
    CHECK_THROWS_AS(lamer_forward(Matrix(3, 11), m), DimensionError);
}

TEST_CASE("load stats: sums and the recount oracle") {
    Rng rng(16);
    const LamerModule m = random_module({8, 8, 2, 6, 2}, rng);
    const Matrix h0 = random_matrix(40, 8, rng);
    const auto out = lamer_forward(h0, m);
    const auto mean = out.stats.mean_prob();
    const auto f = out.stats.dispatch_fraction();
    CHECK(std::abs(std::accumulate(mean.begin(), mean.end(), 0.0) - 1.0) < 1e-10);
    std::vector<std::size_t> counts(6, 0);
    std::vector<long double> psum(6, 0.0L);
    for (const auto& d : out.decisions) {
        for (std::size_t k : d.selected) ++counts[k];
        for (std::size_t k = 0; k < 6; ++k) psum[k] += d.probs[k];
    }
    CHECK(std::accumulate(counts.begin(), counts.end(), std::size_t{0}) == 80);
    long double expect = 0.0L;
    for (std::size_t k = 0; k < 6; ++k) {
        CHECK(f[k] == static_cast<double>(counts[k]) / 80.0);
        expect += (psum[k] / 40.0L) * (static_cast<long double>(counts[k]) / 80.0L);
    }
    CHECK(std::abs(load_balance_loss(out.stats).loss - static_cast<double>(6.0L * expect)) < 1e-12);
}

TEST_CASE("load balance: closed forms and bounds") {
    LoadStats uniform(4, 1);
    uniform.tokens = 4;
    uniform.prob_sum = {1.0, 1.0, 1.0, 1.0};
    uniform.dispatch_count = {1, 1, 1, 1};
    CHECK(load_balance_loss(uniform).loss == 1.0);

    LoadStats collapse(4, 1);
    collapse.tokens = 3;
    collapse.prob_sum = {3.0, 0.0, 0.0, 0.0};
    collapse.dispatch_count = {3, 0, 0, 0};
    const auto lb = load_balance_loss(collapse);
    CHECK(lb.loss == 4.0);
    CHECK(lb.grad_mean_prob == std::vector<double>{4.0, 0.0, 0.0, 0.0});

    CHECK_THROWS_AS(load_balance_loss(LoadStats(4, 1)), StateError);

    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const LamerModule m = random_module({6, 6, 2, 5, 2}, rng);
        const auto s = lamer_forward(random_matrix(10, 6, rng, 3.0), m).stats;
        const double l = load_balance_loss(s).loss;
        CHECK(l >= 0.0);
        CHECK(l <= 5.0 + 1e-12);
    }
}

TEST_CASE("lamer_backward: missing trace") {
    Rng rng(18);
    const LamerModule m = random_module({6, 6, 2, 3, 1}, rng);
    CHECK_THROWS_AS(lamer_backward(m, LamerTrace{}, Matrix(2, 6)), StateError);
}

TEST_CASE("lamer_backward: unselected experts get exactly zero gradient") {
    Rng rng(19);
    LamerModule m = random_module({6, 5, 2, 4, 2}, rng);
    // Make expert 3 unreachable.
    for (std::size_t i = 0; i < 6; ++i) m.router(3, i) = 0.0;
    m.router(0, 0) = m.router(1, 1) = m.router(2, 2) = 50.0;
    Matrix h0 = random_matrix(8, 6, rng);
    for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t i = 0; i < 3; ++i) h0(t, i) = 5.0;
    const auto out = lamer_forward(h0, m);
    CHECK(out.stats.dispatch_count[3] == 0);
    const auto g = lamer_backward(m, out.trace, random_matrix(8, 5, rng));
    CHECK(g.experts[3].a == Matrix(2, 6));
    CHECK(g.experts[3].b == Matrix(5, 2));
    CHECK(frobenius_norm(g.router) > 0.0);
}

TEST_CASE("lamer_backward: single expert reduces to plain LoRA") {
    Rng rng(20);
    const LamerModule m = random_module({6, 5, 2, 1, 1}, rng);
    const Matrix h0 = random_matrix(7, 6, rng);
    const Matrix go = random_matrix(7, 5, rng);
    const auto out = lamer_forward(h0, m);
    const auto g = lamer_backward(m, out.trace, go);
    const Matrix z = matmul_nt(h0, m.experts[0].a);                    // T × r
    CHECK(max_abs_diff(g.experts[0].b, matmul_tn(go, z)) < 1e-12);  // Σ_t g_t (A h_t)ᵀ
    const Matrix gz = matmul(go, m.experts[0].b);                     // T × r
    CHECK(max_abs_diff(g.experts[0].a, matmul_tn(gz, h0)) < 1e-12);
    CHECK(g.router == Matrix(1, 6));
}

TEST_CASE("lamer_backward: finite differences at tie-safe points") {
    Rng rng(21);
    for (std::size_t n : {2, 4, 8}) {
        for (std::size_t k : {1, 2, 3}) {
            if (k > n) continue;
            LamerModule m = random_module({7, 6, 2, n, k}, rng);
            const Matrix h_init = random_matrix(5, 7, rng);
            Matrix h0 = h_init;
            const Matrix r = random_matrix(5, 6, rng);
            const double coef = 0.3;

            auto loss = [&] {
                const auto out = lamer_forward(h0, m);
                double s = 0.0;
                for (std::size_t i = 0; i < r.size(); ++i) s += r.data()[i] * out.output.data()[i];
                return s + coef * load_balance_loss(out.stats).loss;
            };
            const auto out = lamer_forward(h0, m);
            double margin = 1e9;
            for (const auto& d : out.decisions) margin = std::min(margin, d.margin());
            if (margin <= 1e-6) continue;
            auto gmp = load_balance_loss(out.stats).grad_mean_prob;
            for (double& v : gmp) v *= coef;
            const auto g = lamer_backward(m, out.trace, r, gmp);

            std::vector<GradCheckParam> params{{"router", &m.router, &g.router}, {"input", &h0, &g.input}};
            for (std::size_t e = 0; e < n; ++e) {
                params.push_back({"a", &m.experts[e].a, &g.experts[e].a});
                params.push_back({"b", &m.experts[e].b, &g.experts[e].b});
            }
            const auto report = grad_check(loss, params);
            INFO("N=" << n << " K=" << k << " worst=" << report.worst_param);
            CHECK(report.max_rel_error < 1e-4);
        }
    }
}
