// SPDX-License-Identifier: Apache-2.0
#pragma once

// Measurements over trained models: routing heatmaps and their depth-wise
// divergence, forgetting, a linear language-ID probe and parameter accounting.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lamer/data.hpp"
#include "lamer/encoder.hpp"

namespace lamer {

enum class ActivationStat {
    Weights,        ///< renormalized Top-K weights (zero outside the selected set)
    Probabilities,  ///< full router softmax
};

struct ActivationProfile {
    ActivationStat stat = ActivationStat::Weights;
    std::vector<std::size_t> layers;     ///< 0-based indices of Lamer layers
    std::vector<std::size_t> languages;  ///< ascending language ids
    /// mean[i][j]: expert distribution of layers[i] for languages[j].
    std::vector<std::vector<std::vector<double>>> mean;
    std::vector<std::vector<std::size_t>> tokens;  ///< same indexing as `mean`
};

/// Unmasked forward over every sequence; groups per-token vectors by language.
/// Throws StateError on an empty corpus or a model without Lamer layers.
ActivationProfile activation_profile(const EncoderModel& model, const std::vector<const Sequence*>& corpus,
                                     ActivationStat stat = ActivationStat::Weights);

/// Jensen-Shannon divergence in nats, with 0 log 0 = 0.
double jensen_shannon(std::span<const double> p, std::span<const double> q);

struct DivergenceEntry {
    std::size_t layer = 0;
    std::size_t language_a = 0;
    std::size_t language_b = 0;
    double jsd = 0.0;
};

struct DepthSpecialization {
    std::vector<DivergenceEntry> pairs;
    std::vector<double> mean_per_layer;  ///< aligned with ActivationProfile::layers
};

/// Throws ConfigError for fewer than two languages.
DepthSpecialization depth_specialization(const ActivationProfile& profile);

/// Mean of `mean_per_layer` over each allocation group (groups without Lamer
/// layers are NaN).
std::vector<double> group_mean_divergence(const DepthSpecialization& spec, const ActivationProfile& profile,
                                          const AllocationPlan& plan);

struct LanguageAccuracy {
    std::size_t language = 0;
    double before = 0.0;
    double after = 0.0;
    double delta = 0.0;  ///< after - before
};

struct ForgettingReport {
    std::uint64_t cluster_fingerprint = 0;
    std::uint64_t eval_seed = 0;
    std::vector<LanguageAccuracy> languages;

    const LanguageAccuracy& language(std::size_t id) const;
    nlohmann::json to_json() const;
};

/// Masked accuracy of both models on each language's held-out set, with
/// identical masks. Throws ConfigError when the fingerprints of the cluster
/// models that labeled the two training runs differ.
ForgettingReport forgetting_report(const EncoderModel& before, std::uint64_t before_clusters,
                                   const EncoderModel& after, std::uint64_t after_clusters,
                                   const std::map<std::size_t, std::vector<const Sequence*>>& heldout,
                                   std::uint64_t eval_seed);

struct LinearProbe {
    Matrix weights;  ///< classes × features
    Matrix bias;     ///< 1 × classes
    std::vector<double> feature_mean;
    std::vector<double> feature_scale;

    std::vector<std::size_t> predict(const Matrix& features) const;
};

/// Multinomial logistic regression on z-scored features, zero init, Adam.
LinearProbe train_linear_probe(const Matrix& features, const std::vector<std::size_t>& labels,
                               std::size_t num_classes, std::size_t steps = 500, double lr = 1e-2);
double probe_accuracy(const LinearProbe& probe, const Matrix& features, const std::vector<std::size_t>& labels);

struct LidProbeOptions {
    std::optional<std::size_t> layer;  ///< 1-based block output; default num_layers - 2
    std::size_t steps = 500;
    double lr = 1e-2;
};

struct LidProbeResult {
    std::size_t layer = 0;
    std::vector<std::size_t> languages;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;

    nlohmann::json to_json() const;
};

/// Mean-pooled block outputs per sequence. Throws ConfigError with fewer than
/// two training languages.
Matrix pooled_features(const EncoderModel& model, const std::vector<const Sequence*>& seqs, std::size_t layer);
LidProbeResult lid_probe(const EncoderModel& model, const std::vector<const Sequence*>& train,
                         const std::vector<const Sequence*>& test, const LidProbeOptions& options = {});

// ---------------------------------------------------------------- parameters

enum class Injection {
    BothSharedRouter,         ///< experts on up and down, one router on the FFN input
    BothRouterPerProjection,  ///< experts on up and down, a router in front of each
    UpOnly,                   ///< experts on the first projection only
    DownOnly,                 ///< experts on the second projection only
};

std::string injection_name(Injection inj);
std::vector<Injection> all_injections();

struct ArchitectureDescriptor {
    std::string name;
    std::size_t model_dim = 0;
    std::size_t ffn_dim = 0;
    std::size_t num_layers = 0;
    std::vector<std::size_t> experts;  ///< per layer
    std::size_t rank = 0;
    std::uint64_t frozen = 0;          ///< every backbone parameter outside the trainable set
    std::uint64_t extra_trainable = 0; ///< e.g. a trainable prediction head
};

ArchitectureDescriptor toy_descriptor(const EncoderConfig& cfg);
/// d=1024, d_ff=4096, L=24, 2/4/6/8 per six layers, r=12; frozen count
/// enumerated from the HuBERT-Large module list.
ArchitectureDescriptor hubert_large_descriptor();

struct TensorShape {
    std::string name;
    std::uint64_t rows = 0;
    std::uint64_t cols = 0;
};

/// The trainable tensors one hypothesis adds, listed one by one.
std::vector<TensorShape> hypothesis_tensors(const ArchitectureDescriptor& arch, Injection inj);

struct HypothesisCount {
    Injection injection = Injection::BothSharedRouter;
    std::uint64_t trainable = 0;
    std::uint64_t frozen = 0;
    double ratio = 0.0;  ///< trainable / (trainable + frozen)
};

/// Closed-form count; equal to the sum over hypothesis_tensors().
HypothesisCount count_hypothesis(const ArchitectureDescriptor& arch, Injection inj);

struct ParamReport {
    ArchitectureDescriptor arch;
    std::vector<HypothesisCount> hypotheses;
    double target_ratio = 0.0214;
    std::size_t best = 0;  ///< index of the hypothesis nearest the target
    double best_gap = 0.0; ///< |ratio - target|, as a fraction

    nlohmann::json to_json() const;
};

ParamReport param_report(const ArchitectureDescriptor& arch, double target_ratio = 0.0214);

// ---------------------------------------------------------------- exports

std::string heatmap_csv(const ActivationProfile& profile);
std::string divergence_csv(const DepthSpecialization& spec);
/// Shortest round-trip decimal form, stable across runs.
std::string format_real(double v);

}  // namespace lamer
