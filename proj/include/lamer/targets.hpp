// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pseudo-label generation: k-means++ seeding, mini-batch k-means with
// per-centroid 1/count learning rates, and nearest-centroid assignment.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lamer/matrix.hpp"
#include "lamer/rng.hpp"

namespace lamer {

struct ClusterModel {
    Matrix centroids;                 ///< C × d_feat
    std::vector<std::uint64_t> counts;  ///< points absorbed per centroid
    std::size_t batch_size = 10000;
    std::uint64_t seed = 0;

    std::size_t num_clusters() const { return centroids.rows(); }
    std::size_t dim() const { return centroids.cols(); }
    /// FNV-1a of the centroid bytes; identifies the label space.
    std::uint64_t fingerprint() const;
};

/// First centroid uniform, then D²-weighted sampling. Each chosen centroid
/// starts with count 1. Throws DataError if there are fewer than `clusters`
/// distinct points.
ClusterModel kmeanspp_init(const Matrix& points, std::size_t clusters, Rng& rng);

/// Sculley's update: assign the whole batch first, then move each centroid
/// towards its points with rate 1/count.
void minibatch_update(ClusterModel& model, const Matrix& batch);

/// Nearest centroid per row; ties resolve to the lowest index.
std::vector<std::size_t> assign(const ClusterModel& model, const Matrix& frames);

/// Sum of squared distances to the nearest centroid.
double inertia(const ClusterModel& model, const Matrix& points);

struct MiniBatchOptions {
    std::size_t clusters = 32;
    std::size_t batch_size = 10000;
    std::size_t iterations = 200;  ///< mini-batch updates
};

/// k-means++ seeding followed by `iterations` mini-batch updates, batches
/// drawn with replacement from `points` (the whole set when batch_size >= rows).
ClusterModel fit_minibatch(const Matrix& points, const MiniBatchOptions& options, std::uint64_t seed);

/// Runs fit_minibatch once per seed and keeps the model with the lowest
/// inertia on `heldout` (first seed wins ties).
struct SeedSelection {
    ClusterModel best;
    std::uint64_t best_seed = 0;
    std::vector<double> heldout_inertia;  ///< one per seed, in input order
};
SeedSelection fit_best_of_seeds(const Matrix& points, const Matrix& heldout, const MiniBatchOptions& options,
                                std::span<const std::uint64_t> seeds);

/// Full-batch Lloyd iterations from `init`; returns the inertia after each
/// iteration (index 0 = before any update). Empty clusters keep their centroid.
std::vector<double> lloyd(ClusterModel& model, const Matrix& points, std::size_t iterations);

/// Cluster model persisted in the shared checkpoint format.
void save_cluster_model(const ClusterModel& model, const nlohmann::json& source, const std::filesystem::path& path);
ClusterModel load_cluster_model(const std::filesystem::path& path);

/// Label file: one u32 little-endian per frame; a `<path>.json` sidecar
/// records the cluster count and the source config.
void save_labels(const std::vector<std::uint32_t>& labels, std::size_t clusters, const nlohmann::json& source,
                 const std::filesystem::path& path);
std::vector<std::uint32_t> load_labels(const std::filesystem::path& path);

}  // namespace lamer
