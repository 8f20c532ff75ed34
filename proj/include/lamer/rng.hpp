// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace lamer {

/// SplitMix64 generator. The whole state is one 64-bit word, which is what
/// checkpoints persist. All derived distributions are implemented here rather
/// than with <random> distributions so that streams are identical across
/// standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_index(std::uint64_t n);
    /// Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
    bool bernoulli(double p) { return uniform() < p; }
    /// Standard normal via Box-Muller; no cached second value, so the state
    /// alone determines the stream.
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    /// Index drawn with probability proportional to `weights` (all >= 0, sum > 0).
    std::size_t categorical(std::span<const double> weights);

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

private:
    std::uint64_t state_;
};

/// Deterministically derives a named sub-seed from a root seed, so that data,
/// masking, initialization and routing streams can be varied independently.
std::uint64_t derive_seed(std::uint64_t root, std::string_view name);

}  // namespace lamer
