// SPDX-License-Identifier: Apache-2.0
#pragma once

// Mixture of LoRA experts over a frozen projection.
//
//   h_out = W0 h + sum_{k in TopK(p)} w_k * B_k A_k h,   p = softmax(Wr h)
//   w_k   = p_k / sum_{j in TopK} p_j
//
// Only selected experts are evaluated; the Top-K set is held fixed in the
// backward pass, so unselected experts receive exactly zero gradient while
// the router gradient stays dense through the softmax normalizer.

#include <cstddef>
#include <span>
#include <vector>

#include "lamer/matrix.hpp"
#include "lamer/rng.hpp"

namespace lamer {

struct LamerConfig {
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::size_t rank = 0;
    std::size_t num_experts = 0;
    std::size_t top_k = 0;

    /// Throws ConfigError unless 1 <= top_k <= num_experts and
    /// 1 <= rank < min(d_in, d_out).
    void validate() const;
};

struct RouterDecision {
    std::vector<double> probs;          ///< softmax over all experts
    std::vector<std::size_t> selected;  ///< Top-K indices, by descending probability
    std::vector<double> weights;        ///< renormalized over `selected`, zero elsewhere

    /// Gap between the K-th and (K+1)-th largest probability; infinite when K == N.
    double margin() const;
};

/// Top-K over already-computed logits. Ties go to the lower expert index.
RouterDecision route_logits(std::span<const double> logits, std::size_t top_k);
/// Router forward for one token: p = softmax(router · h0).
RouterDecision route(std::span<const double> h0, const Matrix& router, std::size_t top_k);

/// Per-batch routing statistics for the load-balancing loss.
struct LoadStats {
    std::size_t top_k = 1;
    std::size_t tokens = 0;
    std::vector<double> prob_sum;              ///< sum over tokens of p_k
    std::vector<std::size_t> dispatch_count;   ///< tokens whose Top-K contains k

    LoadStats() = default;
    LoadStats(std::size_t num_experts, std::size_t k);

    std::size_t num_experts() const { return prob_sum.size(); }
    void add(const RouterDecision& d);
    void merge(const LoadStats& other);
    /// m_k: mean routing probability.
    std::vector<double> mean_prob() const;
    /// f_k: dispatch count / (tokens * top_k); sums to one.
    std::vector<double> dispatch_fraction() const;
};

struct LoadBalance {
    double loss = 0.0;
    /// d loss / d m_k = N * f_k. f is a constant of the batch.
    std::vector<double> grad_mean_prob;
};

/// L_lb = N * sum_k m_k f_k. Throws StateError on empty statistics.
LoadBalance load_balance_loss(const LoadStats& stats);

struct LoraExpert {
    Matrix a;  ///< rank × d_in
    Matrix b;  ///< d_out × rank
};

/// Intermediate values of an expert bank forward, reused by the backward.
struct ExpertCache {
    /// Row t holds A_k x_t for each selected expert, concatenated in the
    /// order of decisions[t].selected (K·rank values).
    Matrix low_rank;
};

/// out = x·W0ᵀ + per-token weighted sum of the selected experts' deltas.
Matrix experts_forward(const Matrix& x, const Matrix& base, std::span<const LoraExpert> experts,
                       std::span<const RouterDecision> decisions, ExpertCache* cache = nullptr);

/// Accumulating backward of experts_forward.
///  - dexperts:  gradient of each A_k/B_k (only selected experts touched)
///  - dbase:     gradient of W0, skipped when null
///  - dx:        input gradient (T × d_in)
///  - dweights:  T × N, d loss / d w_k for selected k
void experts_backward(const Matrix& x, const Matrix& grad_out, const Matrix& base,
                      std::span<const LoraExpert> experts, std::span<const RouterDecision> decisions,
                      const ExpertCache& cache, std::span<LoraExpert> dexperts, Matrix* dbase, Matrix& dx,
                      Matrix& dweights);

/// Backward through renormalized Top-K gating and the router softmax.
/// `dweights` is d loss / d w (T × N); `grad_mean_prob` optionally adds
/// d loss / d m_k, spread as 1/`stat_tokens` over every token (the load-balance path).
void router_backward(const Matrix& x, const Matrix& router, std::span<const RouterDecision> decisions,
                     const Matrix& dweights, std::span<const double> grad_mean_prob, std::size_t stat_tokens,
                     Matrix& drouter, Matrix& dx);

/// One Lamer position: frozen base projection, N LoRA experts and a router.
struct LamerModule {
    LamerConfig config;
    Matrix base;                     ///< W0, d_out × d_in, frozen
    std::vector<LoraExpert> experts;
    Matrix router;                   ///< Wr, N × d_in

    /// A_k ~ N(0, 1/d_in), B_k = 0, Wr ~ N(0, 0.02²).
    static LamerModule create(const LamerConfig& config, Matrix base, Rng& rng);
};

/// Forward state kept for the backward pass. A default-constructed trace is
/// "missing" and makes lamer_backward throw StateError.
struct LamerTrace {
    bool valid = false;
    Matrix input;
    std::vector<RouterDecision> decisions;
    ExpertCache cache;
};

struct LamerOutput {
    Matrix output;
    std::vector<RouterDecision> decisions;
    LoadStats stats;
    LamerTrace trace;
};

LamerOutput lamer_forward(const Matrix& h0, const LamerModule& module);

struct LamerGrads {
    std::vector<LoraExpert> experts;
    Matrix router;
    Matrix input;
};

/// Gradients of {A_k, B_k, Wr} (plus the input) for upstream gradient
/// `grad_out`. `grad_mean_prob` is the optional load-balance gradient
/// d loss / d m, already scaled by its coefficient.
LamerGrads lamer_backward(const LamerModule& module, const LamerTrace& trace, const Matrix& grad_out,
                          std::span<const double> grad_mean_prob = {});

}  // namespace lamer
