// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic "languages" as Gaussian-emission HMMs over frame vectors, on-disk
// corpora, and the replay mixer used during continual training.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lamer/matrix.hpp"
#include "lamer/rng.hpp"

namespace lamer {

struct SynthLanguageSpec {
    std::size_t id = 0;
    std::string name;
    Matrix means;        ///< states × d_input
    Matrix variances;    ///< states × d_input, diagonal
    Matrix transitions;  ///< states × states, rows sum to one
    std::size_t min_length = 40;
    std::size_t max_length = 120;

    std::size_t num_states() const { return means.rows(); }
    std::size_t dim() const { return means.cols(); }
    /// Throws ConfigError on shape mismatch, non-stochastic rows or negative variances.
    void validate() const;
};

nlohmann::json to_json(const SynthLanguageSpec& spec);
SynthLanguageSpec language_from_json(const nlohmann::json& j);

/// Three languages over a shared pool of acoustic states: A is the
/// "pretraining" language, B and C are new. Languages reuse some state means
/// (with small offsets) but differ in which states they use and in their
/// transition structure.
std::vector<SynthLanguageSpec> default_languages(std::size_t d_input = 16, std::uint64_t seed = 7);

struct Sequence {
    std::size_t id = 0;
    std::size_t language = 0;
    std::string split = "train";
    Matrix frames;                    ///< T × d_input (values are exactly representable in f32)
    std::vector<std::size_t> states;  ///< latent path; empty when loaded from disk
    std::vector<std::size_t> labels;  ///< cluster targets, filled by labeling
};

/// HMM samples: initial state uniform, path from the transition matrix,
/// frames from the state Gaussians, length uniform in [min_length, max_length].
std::vector<Sequence> synth_corpus(const SynthLanguageSpec& spec, std::size_t num_sequences, Rng& rng);

/// Stacks the frames of several sequences (in order) into one matrix.
Matrix stack_frames(const std::vector<const Sequence*>& sequences);

struct CorpusManifest {
    std::size_t language = 0;
    std::string name;
    std::size_t dim = 0;
};

/// Writes `<dir>/manifest.json` and one `<id>.f32` file per sequence
/// (little-endian f32, row-major).
void save_corpus(const std::filesystem::path& dir, const CorpusManifest& info, const std::vector<Sequence>& seqs);
std::vector<Sequence> load_corpus(const std::filesystem::path& dir, CorpusManifest* info = nullptr);

std::vector<const Sequence*> select_split(const std::vector<Sequence>& seqs, const std::string& split);

struct BatchItem {
    const Sequence* sequence = nullptr;
    std::size_t language = 0;
    bool is_replay = false;
};

/// Interleaves a fixed reservoir of old-language sequences into a stream of
/// new-language sequences. Each batch slot is a replay item with probability
/// `ratio`, drawn uniformly with replacement from the reservoir; otherwise it
/// is the next item of the new stream (reshuffled every pass).
class ReplayMixer {
public:
    ReplayMixer(double ratio, std::vector<Sequence> reservoir, std::vector<const Sequence*> stream, Rng rng);

    std::vector<BatchItem> next_batch(std::size_t batch_size);

    double ratio() const { return ratio_; }
    const std::vector<Sequence>& reservoir() const { return reservoir_; }
    /// FNV-1a over reservoir frames; stable for the mixer's lifetime.
    std::uint64_t reservoir_checksum() const;
    std::uint64_t rng_state() const { return rng_.state(); }

private:
    const Sequence* next_new();

    double ratio_;
    std::vector<Sequence> reservoir_;
    std::vector<const Sequence*> stream_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    Rng rng_;
};

/// Draws `count` distinct sequences uniformly (once) from an old-language pool.
std::vector<Sequence> draw_reservoir(const std::vector<const Sequence*>& pool, std::size_t count, Rng& rng);

}  // namespace lamer
