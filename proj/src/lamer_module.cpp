// SPDX-License-Identifier: Apache-2.0
#include "lamer/lamer_module.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "lamer/errors.hpp"
#include "lamer/numerics.hpp"

namespace lamer {

void LamerConfig::validate() const {
    if (num_experts == 0) throw ConfigError("lamer: num_experts must be at least 1");
    if (top_k < 1 || top_k > num_experts) {
        throw ConfigError("lamer: top_k must lie in [1, num_experts], got top_k=" + std::to_string(top_k) +
                          " with num_experts=" + std::to_string(num_experts));
    }
    if (rank < 1 || rank >= std::min(d_in, d_out)) {
        throw ConfigError("lamer: rank must lie in [1, min(d_in, d_out)), got rank=" + std::to_string(rank) +
                          " for " + std::to_string(d_out) + "x" + std::to_string(d_in));
    }
}

double RouterDecision::margin() const {
    const std::size_t k = selected.size();
    if (k >= probs.size()) return std::numeric_limits<double>::infinity();
    double best_rejected = -1.0;
    for (std::size_t i = 0; i < probs.size(); ++i)
        if (weights[i] == 0.0) best_rejected = std::max(best_rejected, probs[i]);
    return probs[selected.back()] - best_rejected;
}

RouterDecision route_logits(std::span<const double> logits, std::size_t top_k) {
    if (top_k < 1 || top_k > logits.size())
        throw ConfigError("route: top_k=" + std::to_string(top_k) + " with " + std::to_string(logits.size()) +
                          " experts");
    RouterDecision d;
    d.probs = softmax(logits);
    std::vector<std::size_t> order(d.probs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return d.probs[a] > d.probs[b]; });
    d.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k));
    double mass = 0.0;
    for (std::size_t k : d.selected) mass += d.probs[k];
    d.weights.assign(d.probs.size(), 0.0);
    for (std::size_t k : d.selected) d.weights[k] = d.probs[k] / mass;
    return d;
}

RouterDecision route(std::span<const double> h0, const Matrix& router, std::size_t top_k) {
    if (router.cols() != h0.size())
        throw DimensionError("route: router " + shape_str(router) + " with input of length " +
                             std::to_string(h0.size()));
    std::vector<double> logits(router.rows());
    for (std::size_t k = 0; k < router.rows(); ++k) logits[k] = dot(router.row(k), h0);
    return route_logits(logits, top_k);
}

LoadStats::LoadStats(std::size_t num_experts, std::size_t k)
    : top_k(k), prob_sum(num_experts, 0.0), dispatch_count(num_experts, 0) {}

void LoadStats::add(const RouterDecision& d) {
    if (d.probs.size() != num_experts() || d.selected.size() != top_k)
        throw DimensionError("LoadStats: decision over " + std::to_string(d.probs.size()) + " experts / top-" +
                             std::to_string(d.selected.size()) + " added to stats over " +
                             std::to_string(num_experts()) + " / top-" + std::to_string(top_k));
    for (std::size_t k = 0; k < d.probs.size(); ++k) prob_sum[k] += d.probs[k];
    for (std::size_t k : d.selected) ++dispatch_count[k];
    ++tokens;
}

void LoadStats::merge(const LoadStats& other) {
    if (other.num_experts() != num_experts() || other.top_k != top_k)
        throw DimensionError("LoadStats: merging incompatible statistics");
    for (std::size_t k = 0; k < prob_sum.size(); ++k) {
        prob_sum[k] += other.prob_sum[k];
        dispatch_count[k] += other.dispatch_count[k];
    }
    tokens += other.tokens;
}

std::vector<double> LoadStats::mean_prob() const {
    std::vector<double> m(prob_sum.size(), 0.0);
    if (tokens == 0) return m;
    for (std::size_t k = 0; k < m.size(); ++k) m[k] = prob_sum[k] / static_cast<double>(tokens);
    return m;
}

std::vector<double> LoadStats::dispatch_fraction() const {
    std::vector<double> f(dispatch_count.size(), 0.0);
    if (tokens == 0) return f;
    const double slots = static_cast<double>(tokens * top_k);
    for (std::size_t k = 0; k < f.size(); ++k) f[k] = static_cast<double>(dispatch_count[k]) / slots;
    return f;
}

LoadBalance load_balance_loss(const LoadStats& stats) {
    if (stats.tokens == 0 || stats.num_experts() == 0) throw StateError("load_balance_loss: empty statistics");
    const auto m = stats.mean_prob();
    const auto f = stats.dispatch_fraction();
    const double n = static_cast<double>(stats.num_experts());
    LoadBalance lb;
    lb.grad_mean_prob.resize(m.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < m.size(); ++k) {
        acc += m[k] * f[k];
        lb.grad_mean_prob[k] = n * f[k];
    }
    lb.loss = n * acc;
    return lb;
}

Matrix experts_forward(const Matrix& x, const Matrix& base, std::span<const LoraExpert> experts,
                       std::span<const RouterDecision> decisions, ExpertCache* cache) {
    if (decisions.size() != x.rows())
        throw DimensionError("experts_forward: " + std::to_string(decisions.size()) + " decisions for " +
                             std::to_string(x.rows()) + " tokens");
    Matrix out = matmul_nt(x, base);
    if (experts.empty()) return out;

    const std::size_t rank = experts.front().a.rows();
    const std::size_t k_sel = decisions.empty() ? 0 : decisions.front().selected.size();
    if (cache != nullptr) cache->low_rank = Matrix(x.rows(), k_sel * rank);
    std::vector<double> z(rank);
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const auto& d = decisions[t];
        auto xt = x.row(t);
        auto ot = out.row(t);
        for (std::size_t s = 0; s < d.selected.size(); ++s) {
            const std::size_t k = d.selected[s];
            const LoraExpert& e = experts[k];
            for (std::size_t i = 0; i < rank; ++i) z[i] = dot(e.a.row(i), xt);
            if (cache != nullptr) std::copy(z.begin(), z.end(), cache->low_rank.row(t).begin() + s * rank);
            const double w = d.weights[k];
            for (std::size_t o = 0; o < ot.size(); ++o) ot[o] += w * dot(e.b.row(o), z);
        }
    }
    return out;
}

void experts_backward(const Matrix& x, const Matrix& grad_out, const Matrix& base,
                      std::span<const LoraExpert> experts, std::span<const RouterDecision> decisions,
                      const ExpertCache& cache, std::span<LoraExpert> dexperts, Matrix* dbase, Matrix& dx,
                      Matrix& dweights) {
    if (grad_out.rows() != x.rows() || grad_out.cols() != base.rows())
        throw DimensionError("experts_backward: gradient " + shape_str(grad_out) + " for output of " +
                             std::to_string(x.rows()) + "x" + std::to_string(base.rows()));
    dx += matmul(grad_out, base);
    if (dbase != nullptr) matmul_tn_acc(*dbase, grad_out, x);
    if (experts.empty()) return;

    const std::size_t rank = experts.front().a.rows();
    std::vector<double> bg(rank);
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const auto& d = decisions[t];
        auto xt = x.row(t);
        auto gt = grad_out.row(t);
        auto dxt = dx.row(t);
        for (std::size_t s = 0; s < d.selected.size(); ++s) {
            const std::size_t k = d.selected[s];
            const LoraExpert& e = experts[k];
            LoraExpert& de = dexperts[k];
            const double w = d.weights[k];
            auto z = cache.low_rank.row(t).subspan(s * rank, rank);

            // bg = B_kᵀ g
            std::fill(bg.begin(), bg.end(), 0.0);
            for (std::size_t o = 0; o < gt.size(); ++o) {
                const double go = gt[o];
                auto brow = e.b.row(o);
                auto dbrow = de.b.row(o);
                for (std::size_t i = 0; i < rank; ++i) {
                    bg[i] += brow[i] * go;
                    dbrow[i] += w * go * z[i];
                }
            }
            dweights(t, k) += dot(bg, z);
            for (std::size_t i = 0; i < rank; ++i) {
                const double c = w * bg[i];
                auto arow = e.a.row(i);
                auto darow = de.a.row(i);
                for (std::size_t j = 0; j < xt.size(); ++j) {
                    darow[j] += c * xt[j];
                    dxt[j] += c * arow[j];
                }
            }
        }
    }
}

void router_backward(const Matrix& x, const Matrix& router, std::span<const RouterDecision> decisions,
                     const Matrix& dweights, std::span<const double> grad_mean_prob, std::size_t stat_tokens,
                     Matrix& drouter, Matrix& dx) {
    const std::size_t n = router.rows();
    if (!grad_mean_prob.empty() && (grad_mean_prob.size() != n || stat_tokens == 0))
        throw DimensionError("router_backward: load-balance gradient does not match the router");
    const double spread = grad_mean_prob.empty() ? 0.0 : 1.0 / static_cast<double>(stat_tokens);

    std::vector<double> dp(n);
    std::vector<double> dlogit(n);
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const auto& d = decisions[t];
        double mass = 0.0;
        double weighted = 0.0;
        for (std::size_t k : d.selected) {
            mass += d.probs[k];
            weighted += d.weights[k] * dweights(t, k);
        }
        for (std::size_t k = 0; k < n; ++k) dp[k] = grad_mean_prob.empty() ? 0.0 : grad_mean_prob[k] * spread;
        for (std::size_t k : d.selected) dp[k] += (dweights(t, k) - weighted) / mass;

        double pdp = 0.0;
        for (std::size_t k = 0; k < n; ++k) pdp += d.probs[k] * dp[k];
        auto xt = x.row(t);
        auto dxt = dx.row(t);
        for (std::size_t k = 0; k < n; ++k) {
            const double g = d.probs[k] * (dp[k] - pdp);
            auto rrow = router.row(k);
            auto drrow = drouter.row(k);
            for (std::size_t j = 0; j < xt.size(); ++j) {
                drrow[j] += g * xt[j];
                dxt[j] += g * rrow[j];
            }
        }
    }
}

LamerModule LamerModule::create(const LamerConfig& config, Matrix base, Rng& rng) {
    config.validate();
    if (base.rows() != config.d_out || base.cols() != config.d_in)
        throw DimensionError("LamerModule: base " + shape_str(base) + " does not match " +
                             std::to_string(config.d_out) + "x" + std::to_string(config.d_in));
    LamerModule m;
    m.config = config;
    m.base = std::move(base);
    const double a_std = 1.0 / std::sqrt(static_cast<double>(config.d_in));
    for (std::size_t k = 0; k < config.num_experts; ++k) {
        LoraExpert e{Matrix(config.rank, config.d_in), Matrix(config.d_out, config.rank)};
        for (double& v : e.a.data()) v = rng.normal(0.0, a_std);
        m.experts.push_back(std::move(e));
    }
    m.router = Matrix(config.num_experts, config.d_in);
    for (double& v : m.router.data()) v = rng.normal(0.0, 0.02);
    return m;
}

LamerOutput lamer_forward(const Matrix& h0, const LamerModule& module) {
    const auto& cfg = module.config;
    if (h0.cols() != cfg.d_in)
        throw DimensionError("lamer_forward: input " + shape_str(h0) + " for d_in=" + std::to_string(cfg.d_in));
    LamerOutput out;
    out.stats = LoadStats(cfg.num_experts, cfg.top_k);
    out.decisions.reserve(h0.rows());
    for (std::size_t t = 0; t < h0.rows(); ++t) {
        out.decisions.push_back(route(h0.row(t), module.router, cfg.top_k));
        out.stats.add(out.decisions.back());
    }
    out.output = experts_forward(h0, module.base, module.experts, out.decisions, &out.trace.cache);
    out.trace.valid = true;
    out.trace.input = h0;
    out.trace.decisions = out.decisions;
    return out;
}

LamerGrads lamer_backward(const LamerModule& module, const LamerTrace& trace, const Matrix& grad_out,
                          std::span<const double> grad_mean_prob) {
    if (!trace.valid) throw StateError("lamer_backward: no forward cache for this batch");
    const auto& cfg = module.config;
    if (grad_out.rows() != trace.input.rows() || grad_out.cols() != cfg.d_out)
        throw DimensionError("lamer_backward: gradient " + shape_str(grad_out) + " for output " +
                             std::to_string(trace.input.rows()) + "x" + std::to_string(cfg.d_out));
    LamerGrads g;
    for (std::size_t k = 0; k < cfg.num_experts; ++k)
        g.experts.push_back({Matrix(cfg.rank, cfg.d_in), Matrix(cfg.d_out, cfg.rank)});
    g.router = Matrix(cfg.num_experts, cfg.d_in);
    g.input = Matrix(trace.input.rows(), cfg.d_in);
    Matrix dweights(trace.input.rows(), cfg.num_experts);
    experts_backward(trace.input, grad_out, module.base, module.experts, trace.decisions, trace.cache, g.experts,
                     nullptr, g.input, dweights);
    router_backward(trace.input, module.router, trace.decisions, dweights, grad_mean_prob, trace.input.rows(),
                    g.router, g.input);
    return g;
}

}  // namespace lamer
