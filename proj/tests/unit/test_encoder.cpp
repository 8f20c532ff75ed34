// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "lamer/encoder.hpp"
#include "lamer/errors.hpp"
#include "lamer/grad_check.hpp"
#include "lamer/numerics.hpp"

using namespace lamer;

namespace {

EncoderConfig tiny_config() {
    EncoderConfig c;
    c.input_dim = 3;
    c.num_layers = 2;
    c.model_dim = 8;
    c.ffn_dim = 12;
    c.heads = 2;
    c.num_clusters = 4;
    c.lora_rank = 2;
    c.top_k = 2;
    return c;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
    Matrix m(r, c);
    for (double& v : m.data()) v = rng.normal(0.0, sd);
    return m;
}

EncoderModel tiny_lamer(std::uint64_t seed, std::vector<std::size_t> counts = {2, 3}) {
    Rng rng(seed);
    const EncoderModel backbone = EncoderModel::create_backbone(tiny_config(), rng);
    Rng init(seed + 1), router(seed + 2);
    AllocationPlan plan{1, std::move(counts)};
    return lamerify(backbone, plan, 2, 2, init, router);
}

// Scalar re-derivation of the forward pass, one token and one feature at a time.
struct Oracle {
    const EncoderModel& m;

    static std::vector<double> norm(const std::vector<double>& x, const LayerNormParams& p) {
        double mean = 0.0;
        for (double v : x) mean += v;
        mean /= static_cast<double>(x.size());
        double var = 0.0;
        for (double v : x) var += (v - mean) * (v - mean);
        var /= static_cast<double>(x.size());
        std::vector<double> y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
            y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * p.gain(0, i) + p.bias(0, i);
        return y;
    }

    static std::vector<double> affine(const Matrix& w, const Matrix& b, const std::vector<double>& x) {
        std::vector<double> y(w.rows());
        for (std::size_t o = 0; o < w.rows(); ++o) {
            double s = b.empty() ? 0.0 : b(0, o);
            for (std::size_t i = 0; i < x.size(); ++i) s += w(o, i) * x[i];
            y[o] = s;
        }
        return y;
    }

    static std::vector<double> mixed(const Matrix& w0, const Matrix& b, const std::vector<LoraExpert>& experts,
                                     const std::vector<double>& gate, const std::vector<double>& x) {
        std::vector<double> y = affine(w0, b, x);
        for (std::size_t k = 0; k < experts.size(); ++k) {
            if (gate[k] == 0.0) continue;
            const auto low = affine(experts[k].a, Matrix(), x);
            const auto delta = affine(experts[k].b, Matrix(), low);
            for (std::size_t o = 0; o < y.size(); ++o) y[o] += gate[k] * delta[o];
        }
        return y;
    }

    std::vector<std::vector<double>> logits(const Matrix& frames, const MaskSpec& mask) const {
        const auto& c = m.config;
        const std::size_t T = frames.rows(), d = c.model_dim;
        std::vector<std::vector<double>> x(T);
        for (std::size_t t = 0; t < T; ++t) {
            std::vector<double> f(frames.row(t).begin(), frames.row(t).end());
            x[t] = mask.contains(t) ? std::vector<double>(m.mask_emb.row(0).begin(), m.mask_emb.row(0).end())
                                    : affine(m.proj_w, m.proj_b, f);
            for (std::size_t j = 0; j < d; ++j) {
                const double pair = static_cast<double>(2 * (j / 2));
                const double angle = static_cast<double>(t) / std::pow(10000.0, pair / static_cast<double>(d));
                x[t][j] += j % 2 == 0 ? std::sin(angle) : std::cos(angle);
            }
        }
        for (const auto& layer : m.layers) {
            const std::size_t dh = d / c.heads;
            std::vector<std::vector<double>> q(T), k(T), v(T);
            for (std::size_t t = 0; t < T; ++t) {
                const auto n = norm(x[t], layer.ln1);
                q[t] = affine(layer.attn.wq, layer.attn.bq, n);
                k[t] = affine(layer.attn.wk, layer.attn.bk, n);
                v[t] = affine(layer.attn.wv, layer.attn.bv, n);
            }
            std::vector<std::vector<double>> next = x;
            for (std::size_t t = 0; t < T; ++t) {
                std::vector<double> concat(d, 0.0);
                for (std::size_t h = 0; h < c.heads; ++h) {
                    std::vector<double> s(T);
                    for (std::size_t u = 0; u < T; ++u) {
                        for (std::size_t j = 0; j < dh; ++j) s[u] += q[t][h * dh + j] * k[u][h * dh + j];
                        s[u] /= std::sqrt(static_cast<double>(dh));
                    }
                    const double top = *std::max_element(s.begin(), s.end());
                    double z = 0.0;
                    for (double& e : s) z += (e = std::exp(e - top));
                    for (std::size_t u = 0; u < T; ++u)
                        for (std::size_t j = 0; j < dh; ++j) concat[h * dh + j] += s[u] / z * v[u][h * dh + j];
                }
                const auto o = affine(layer.attn.wo, layer.attn.bo, concat);
                for (std::size_t j = 0; j < d; ++j) next[t][j] += o[j];
            }
            x = next;
            for (std::size_t t = 0; t < T; ++t) {
                const auto n = norm(x[t], layer.ln2);
                const std::size_t N = layer.ffn.num_experts();
                std::vector<double> gate(N, 0.0);
                if (N > 0) {
                    auto p = affine(layer.ffn.router, Matrix(), n);
                    const double top = *std::max_element(p.begin(), p.end());
                    double z = 0.0;
                    for (double& e : p) z += (e = std::exp(e - top));
                    for (double& e : p) e /= z;
                    std::vector<std::size_t> order(N);
                    for (std::size_t i = 0; i < N; ++i) order[i] = i;
                    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] > p[b]; });
                    double s = 0.0;
                    for (std::size_t i = 0; i < c.top_k; ++i) s += p[order[i]];
                    for (std::size_t i = 0; i < c.top_k; ++i) gate[order[i]] = p[order[i]] / s;
                }
                auto hidden = mixed(layer.ffn.w1, layer.ffn.b1, layer.ffn.up, gate, n);
                for (double& e : hidden) e = 0.5 * e * (1.0 + std::erf(e / std::numbers::sqrt2));
                const auto y = mixed(layer.ffn.w2, layer.ffn.b2, layer.ffn.down, gate, hidden);
                for (std::size_t j = 0; j < d; ++j) x[t][j] += y[j];
            }
        }
        std::vector<std::vector<double>> out(T);
        for (std::size_t t = 0; t < T; ++t) out[t] = affine(m.head_w, m.head_b, norm(x[t], m.final_ln));
        return out;
    }
};

void randomize_experts(EncoderModel& m, Rng& rng) {
    for (auto& layer : m.layers) {
        for (auto& e : layer.ffn.up) e.b = random_matrix(e.b.rows(), e.b.cols(), rng, 0.3);
        for (auto& e : layer.ffn.down) e.b = random_matrix(e.b.rows(), e.b.cols(), rng, 0.3);
        layer.ffn.router = random_matrix(layer.ffn.router.rows(), layer.ffn.router.cols(), rng, 0.8);
    }
}

double min_margin(const EncoderOutput& out) {
    double m = INFINITY;
    for (const auto& layer : out.routing)
        for (const auto& d : layer) m = std::min(m, d.margin());
    return m;
}

}  // namespace

TEST_CASE("allocate_experts: progressive, reversed and uniform plans") {
    const auto prog = allocate_experts(24, 6, {2, 4, 6, 8});
    REQUIRE(prog.size() == 24);
    for (std::size_t l = 0; l < 24; ++l) CHECK(prog[l] == 2 + 2 * (l / 6));
    const auto rev = allocate_experts(24, 6, {8, 6, 4, 2});
    for (std::size_t l = 0; l < 24; ++l) CHECK(rev[l] == 8 - 2 * (l / 6));
    const auto uni = allocate_experts(8, 2, {5, 5, 5, 5});
    CHECK(std::all_of(uni.begin(), uni.end(), [](std::size_t n) { return n == 5; }));
    CHECK(allocate_experts(8, 2, {2, 4, 6, 8}) == std::vector<std::size_t>{2, 2, 4, 4, 6, 6, 8, 8});
}

TEST_CASE("allocate_experts: indivisible or mismatched layouts are rejected") {
    CHECK_THROWS_AS(allocate_experts(10, 4, {2, 4, 6}), ConfigError);
    CHECK_THROWS_AS(allocate_experts(24, 6, {2, 4, 6}), ConfigError);
    CHECK_THROWS_AS(allocate_experts(8, 0, {2}), ConfigError);
    CHECK_THROWS_AS(allocate_experts(8, 2, {2, 0, 6, 8}), ConfigError);
}

TEST_CASE("encoder config: validation and JSON round trip") {
    EncoderConfig c = tiny_config();
    c.allocation = AllocationPlan{1, {2, 3}};
    CHECK_NOTHROW(c.validate());
    const EncoderConfig back = encoder_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));

    EncoderConfig bad = c;
    bad.heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.top_k = 3;  // exceeds the smallest expert count
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    auto j = to_json(c);
    j["unknown_knob"] = 1;
    CHECK_THROWS_AS(encoder_config_from_json(j), ConfigError);
}

TEST_CASE("sample_mask: degenerate probabilities and span truncation") {
    Rng rng(3);
    CHECK(sample_mask(50, 0.0, 10, rng).indices.empty());
    const auto all = sample_mask(50, 1.0, 10, rng);
    CHECK(all.indices.size() == 50);
    const auto one = sample_mask(1, 1.0, 10, rng);
    CHECK(one.indices == std::vector<std::size_t>{0});
    CHECK(sample_mask(0, 0.5, 3, rng).indices.empty());
    CHECK_THROWS_AS(sample_mask(5, 1.5, 3, rng), ConfigError);
    CHECK_THROWS_AS(sample_mask(5, 0.5, 0, rng), ConfigError);
}

TEST_CASE("sample_mask: expected masked fraction") {
    // A frame stays unmasked only if none of the up to `span` starts covering it fire.
    const std::size_t T = 200, span = 10;
    const double p = 0.08;
    double expected = 0.0;
    for (std::size_t t = 0; t < T; ++t) expected += 1.0 - std::pow(1.0 - p, static_cast<double>(std::min(t + 1, span)));
    expected /= static_cast<double>(T);
    Rng rng(17);
    double total = 0.0;
    const int trials = 4000;
    for (int i = 0; i < trials; ++i) {
        const auto m = sample_mask(T, p, span, rng);
        CHECK(std::is_sorted(m.indices.begin(), m.indices.end()));
        CHECK(std::adjacent_find(m.indices.begin(), m.indices.end()) == m.indices.end());
        total += static_cast<double>(m.indices.size()) / T;
    }
    CHECK(total / trials == doctest::Approx(expected).epsilon(0.01));
}

TEST_CASE("lamerify: zero-delta experts reproduce the backbone bit for bit") {
    Rng rng(5);
    const EncoderModel backbone = EncoderModel::create_backbone(tiny_config(), rng);
    Rng init(6), router(7);
    const EncoderModel lamer = lamerify(backbone, AllocationPlan{1, {2, 3}}, 2, 2, init, router);
    CHECK(lamer.config.has_lamer());
    CHECK(lamer.layers[0].ffn.num_experts() == 2);
    CHECK(lamer.layers[1].ffn.num_experts() == 3);
    CHECK(frozen_checksum(lamer) == frozen_checksum(backbone));

    const Matrix frames = random_matrix(9, 3, rng);
    const MaskSpec mask{{2, 3, 4}};
    const auto a = encoder_forward(frames, mask, backbone);
    const auto b = encoder_forward(frames, mask, lamer);
    CHECK(a.logits == b.logits);
    CHECK(b.stats[1].tokens == 9);
}

TEST_CASE("encoder_forward: matches a scalar oracle") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        EncoderModel m = tiny_lamer(seed);
        Rng rng(seed + 100);
        randomize_experts(m, rng);
        const Matrix frames = random_matrix(7, 3, rng);
        const MaskSpec mask{{1, 5}};
        const auto out = encoder_forward(frames, mask, m);
        const auto expect = Oracle{m}.logits(frames, mask);
        double worst = 0.0;
        for (std::size_t t = 0; t < 7; ++t)
            for (std::size_t c = 0; c < 4; ++c) worst = std::max(worst, std::abs(out.logits(t, c) - expect[t][c]));
        CHECK(worst < 1e-10);
    }
}

TEST_CASE("encoder_forward: single frame and dimension errors") {
    EncoderModel m = tiny_lamer(9);
    Rng rng(9);
    const Matrix one = random_matrix(1, 3, rng);
    const auto out = encoder_forward(one, MaskSpec{}, m);
    CHECK(out.logits.rows() == 1);
    CHECK(all_finite(out.logits));
    const auto expect = Oracle{m}.logits(one, MaskSpec{});
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.logits(0, c) == doctest::Approx(expect[0][c]).epsilon(1e-12));
    CHECK_THROWS_AS(encoder_forward(random_matrix(4, 5, rng), MaskSpec{}, m), DimensionError);
    CHECK_THROWS_AS(encoder_forward(one, MaskSpec{{3}}, m), IndexError);
    CHECK_THROWS_AS(out.hidden(3), IndexError);
    CHECK(encoder_features(m, one, 2) == out.hidden(2));
}

TEST_CASE("trainable parameters: phase contract and closed-form counts") {
    EncoderModel m = tiny_lamer(4);
    const auto& c = m.config;
    const std::size_t d = c.model_dim, f = c.ffn_dim, r = c.lora_rank, C = c.num_clusters, L = c.num_layers;
    const std::size_t frozen = (d * c.input_dim + d) + d + L * (4 * d + 4 * (d * d + d) + (f * d + f) + (d * f + d)) + 2 * d;
    const std::size_t head = C * d + C;
    std::size_t lamer = 0;
    for (std::size_t n : c.experts_per_layer()) lamer += n * (2 * r * (d + f) + d);

    CHECK(count_parameters(m) == frozen + head + lamer);
    CHECK(count_parameters(m, Phase::Pretrain) == frozen + head + lamer);
    CHECK(count_parameters(m, Phase::Continual) == head + lamer);
    for (const auto& p : trainable_parameters(m, Phase::Continual))
        CHECK((p.group == ParamGroup::Expert || p.group == ParamGroup::Router || p.group == ParamGroup::Head));

    m.config.train_head_in_continual = false;
    CHECK(count_parameters(m, Phase::Continual) == lamer);
}

TEST_CASE("frozen checksum: sensitive to frozen tensors only") {
    EncoderModel m = tiny_lamer(8);
    const auto base = frozen_checksum(m);
    const auto whole = model_checksum(m);
    m.layers[0].ffn.up[0].b(0, 0) += 1.0;
    m.layers[1].ffn.router(0, 0) += 1.0;
    m.head_b(0, 0) += 1.0;
    CHECK(frozen_checksum(m) == base);
    CHECK(model_checksum(m) != whole);
    m.layers[1].ffn.w1(2, 2) += 1e-12;
    CHECK(frozen_checksum(m) != base);
}

TEST_CASE("encoder_backward: finite differences over every tensor") {
    std::size_t checked = 0;
    for (std::uint64_t seed = 20; seed < 40 && checked < 2; ++seed) {
        EncoderModel m = tiny_lamer(seed);
        Rng rng(seed * 7 + 1);
        randomize_experts(m, rng);
        const Matrix frames = random_matrix(6, 3, rng);
        const MaskSpec mask{{2, 3}};
        const Matrix readout = random_matrix(6, 4, rng);
        const double lb_coef = 0.3;

        const auto out = encoder_forward(frames, mask, m);
        if (min_margin(out) < 1e-3) continue;  // selection could flip under perturbation

        std::vector<std::vector<double>> gmp(m.layers.size());
        std::vector<std::size_t> tokens(m.layers.size());
        for (std::size_t l = 0; l < m.layers.size(); ++l) {
            gmp[l] = load_balance_loss(out.stats[l]).grad_mean_prob;
            for (double& g : gmp[l]) g *= lb_coef;
            tokens[l] = out.stats[l].tokens;
        }
        EncoderModel grads = m.zeros_like();
        encoder_backward(m, out.trace, readout, gmp, tokens, GradRequest{}, grads);

        auto loss = [&]() {
            const auto o = encoder_forward(frames, mask, m);
            double s = 0.0;
            for (std::size_t i = 0; i < readout.size(); ++i) s += readout.data()[i] * o.logits.data()[i];
            for (const auto& st : o.stats) s += lb_coef * load_balance_loss(st).loss;
            return s;
        };
        auto live = named_params(m);
        const auto analytic = named_params(std::as_const(grads));
        std::vector<GradCheckParam> params;
        std::size_t skipped = 0;
        for (std::size_t i = 0; i < live.size(); ++i) {
            // Softmax is shift invariant, so the key bias has an exactly zero gradient.
            if (live[i].name.ends_with("attn.bk")) {
                CHECK(frobenius_norm(*analytic[i].value) < 1e-12);
                skipped += live[i].value->size();
                continue;
            }
            params.push_back({live[i].name, live[i].value, analytic[i].value});
        }
        const auto report = grad_check(loss, params);
        INFO("worst ", report.worst_param, "[", report.worst_index, "] analytic ", report.worst_analytic,
             " numeric ", report.worst_numeric);
        CHECK(report.max_rel_error < 1e-5);
        CHECK(report.coordinates + skipped == count_parameters(m));
        ++checked;
    }
    CHECK(checked == 2);
}

TEST_CASE("encoder_backward: continual request leaves backbone gradients untouched") {
    EncoderModel m = tiny_lamer(31);
    Rng rng(31);
    randomize_experts(m, rng);
    const Matrix frames = random_matrix(5, 3, rng);
    const auto out = encoder_forward(frames, MaskSpec{{0}}, m);
    EncoderModel grads = m.zeros_like();
    encoder_backward(m, out.trace, random_matrix(5, 4, rng), {}, {}, grad_request_for(Phase::Continual, m.config), grads);
    for (const auto& p : named_params(std::as_const(grads))) {
        const bool trainable = is_trainable(p.group, Phase::Continual, m.config);
        if (!trainable) CHECK_MESSAGE(frobenius_norm(*p.value) == 0.0, p.name);
    }
    CHECK(frobenius_norm(grads.head_w) > 0.0);
    CHECK(frobenius_norm(grads.layers[0].ffn.router) > 0.0);
}
