// SPDX-License-Identifier: Apache-2.0
#include "lamer/targets.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>

#include "lamer/checkpoint.hpp"
#include "lamer/errors.hpp"

namespace lamer {

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        s += diff * diff;
    }
    return s;
}

std::size_t count_distinct_rows(const Matrix& points) {
    std::vector<std::size_t> order(points.rows());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto less = [&](std::size_t a, std::size_t b) {
        auto ra = points.row(a);
        auto rb = points.row(b);
        return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
    };
    std::sort(order.begin(), order.end(), less);
    std::size_t distinct = order.empty() ? 0 : 1;
    for (std::size_t i = 1; i < order.size(); ++i)
        if (less(order[i - 1], order[i])) ++distinct;
    return distinct;
}

std::size_t nearest(const Matrix& centroids, std::span<const double> x, double* dist = nullptr) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        const double dd = squared_distance(centroids.row(c), x);
        if (dd < best_d) {
            best_d = dd;
            best = c;
        }
    }
    if (dist != nullptr) *dist = best_d;
    return best;
}

void check_dim(const ClusterModel& model, const Matrix& m, const char* op) {
    if (m.cols() != model.dim())
        throw DimensionError(std::string(op) + ": data " + shape_str(m) + " for centroids " +
                             shape_str(model.centroids));
}

std::uint64_t fnv1a(const Matrix& m) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data().data());
    for (std::size_t i = 0; i < m.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

std::uint64_t ClusterModel::fingerprint() const { return fnv1a(centroids); }

ClusterModel kmeanspp_init(const Matrix& points, std::size_t clusters, Rng& rng) {
    if (clusters == 0) throw ConfigError("kmeanspp_init: need at least one cluster");
    const std::size_t distinct = count_distinct_rows(points);
    if (distinct < clusters)
        throw DataError("kmeanspp_init: " + std::to_string(distinct) + " distinct points cannot seed " +
                        std::to_string(clusters) + " clusters");
    ClusterModel model;
    model.centroids = Matrix(clusters, points.cols());
    model.counts.assign(clusters, 1);

    std::size_t first = rng.uniform_index(points.rows());
    std::copy(points.row(first).begin(), points.row(first).end(), model.centroids.row(0).begin());
    std::vector<double> d2(points.rows());
    for (std::size_t i = 0; i < points.rows(); ++i) d2[i] = squared_distance(points.row(i), model.centroids.row(0));

    for (std::size_t c = 1; c < clusters; ++c) {
        const std::size_t pick = rng.categorical(d2);
        std::copy(points.row(pick).begin(), points.row(pick).end(), model.centroids.row(c).begin());
        for (std::size_t i = 0; i < points.rows(); ++i)
            d2[i] = std::min(d2[i], squared_distance(points.row(i), model.centroids.row(c)));
    }
    return model;
}

std::vector<std::size_t> assign(const ClusterModel& model, const Matrix& frames) {
    check_dim(model, frames, "assign");
    std::vector<std::size_t> labels(frames.rows());
    for (std::size_t t = 0; t < frames.rows(); ++t) labels[t] = nearest(model.centroids, frames.row(t));
    return labels;
}

double inertia(const ClusterModel& model, const Matrix& points) {
    check_dim(model, points, "inertia");
    double total = 0.0;
    for (std::size_t t = 0; t < points.rows(); ++t) {
        double dd = 0.0;
        nearest(model.centroids, points.row(t), &dd);
        total += dd;
    }
    return total;
}

void minibatch_update(ClusterModel& model, const Matrix& batch) {
    check_dim(model, batch, "minibatch_update");
    const auto labels = assign(model, batch);
    for (std::size_t t = 0; t < batch.rows(); ++t) {
        const std::size_t c = labels[t];
        const double eta = 1.0 / static_cast<double>(++model.counts[c]);
        auto centroid = model.centroids.row(c);
        auto x = batch.row(t);
        for (std::size_t j = 0; j < centroid.size(); ++j) centroid[j] += eta * (x[j] - centroid[j]);
    }
}

ClusterModel fit_minibatch(const Matrix& points, const MiniBatchOptions& options, std::uint64_t seed) {
    if (options.clusters < 2) throw ConfigError("fit_minibatch: need at least 2 clusters");
    if (options.batch_size == 0) throw ConfigError("fit_minibatch: batch_size must be positive");
    Rng rng(seed);
    ClusterModel model = kmeanspp_init(points, options.clusters, rng);
    model.batch_size = options.batch_size;
    model.seed = seed;

    const bool full = options.batch_size >= points.rows();
    Matrix batch(full ? points.rows() : options.batch_size, points.cols());
    for (std::size_t it = 0; it < options.iterations; ++it) {
        if (full) {
            minibatch_update(model, points);
            continue;
        }
        for (std::size_t b = 0; b < batch.rows(); ++b) {
            const std::size_t i = rng.uniform_index(points.rows());
            std::copy(points.row(i).begin(), points.row(i).end(), batch.row(b).begin());
        }
        minibatch_update(model, batch);
    }
    return model;
}

SeedSelection fit_best_of_seeds(const Matrix& points, const Matrix& heldout, const MiniBatchOptions& options,
                                std::span<const std::uint64_t> seeds) {
    if (seeds.empty()) throw ConfigError("fit_best_of_seeds: no seeds given");
    SeedSelection sel;
    double best = std::numeric_limits<double>::infinity();
    for (std::uint64_t seed : seeds) {
        ClusterModel m = fit_minibatch(points, options, seed);
        const double score = inertia(m, heldout);
        sel.heldout_inertia.push_back(score);
        if (score < best) {
            best = score;
            sel.best = std::move(m);
            sel.best_seed = seed;
        }
    }
    return sel;
}

std::vector<double> lloyd(ClusterModel& model, const Matrix& points, std::size_t iterations) {
    check_dim(model, points, "lloyd");
    std::vector<double> history{inertia(model, points)};
    const std::size_t C = model.num_clusters();
    for (std::size_t it = 0; it < iterations; ++it) {
        const auto labels = assign(model, points);
        Matrix sums(C, model.dim());
        std::vector<std::size_t> n(C, 0);
        for (std::size_t t = 0; t < points.rows(); ++t) {
            ++n[labels[t]];
            auto s = sums.row(labels[t]);
            auto x = points.row(t);
            for (std::size_t j = 0; j < s.size(); ++j) s[j] += x[j];
        }
        for (std::size_t c = 0; c < C; ++c) {
            if (n[c] == 0) continue;
            auto centroid = model.centroids.row(c);
            auto s = sums.row(c);
            for (std::size_t j = 0; j < s.size(); ++j) centroid[j] = s[j] / static_cast<double>(n[c]);
        }
        history.push_back(inertia(model, points));
    }
    return history;
}

void save_cluster_model(const ClusterModel& model, const nlohmann::json& source, const std::filesystem::path& path) {
    Checkpoint ckpt;
    ckpt.config = {{"kind", "cluster_model"},
                   {"clusters", model.num_clusters()},
                   {"dim", model.dim()},
                   {"batch_size", model.batch_size},
                   {"seed", model.seed},
                   {"source", source}};
    ckpt.tensors.push_back(Tensor::from_matrix("centroids", model.centroids));
    Tensor counts;
    counts.name = "counts";
    counts.dims = {model.counts.size()};
    counts.values.assign(model.counts.begin(), model.counts.end());
    ckpt.tensors.push_back(std::move(counts));
    ckpt.rng_state = model.seed;
    save_checkpoint(ckpt, path);
}

ClusterModel load_cluster_model(const std::filesystem::path& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.config.value("kind", "") != "cluster_model")
        throw FormatError(path.string() + " is not a cluster model checkpoint");
    ClusterModel model;
    model.centroids = ckpt.tensor("centroids").to_matrix();
    for (double v : ckpt.tensor("counts").values) model.counts.push_back(static_cast<std::uint64_t>(v));
    model.batch_size = ckpt.config.at("batch_size").get<std::size_t>();
    model.seed = ckpt.config.at("seed").get<std::uint64_t>();
    if (model.counts.size() != model.num_clusters())
        throw FormatError("cluster model counts do not match its centroids");
    return model;
}

void save_labels(const std::vector<std::uint32_t>& labels, std::size_t clusters, const nlohmann::json& source,
                 const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes(labels.size() * 4);
    for (std::size_t i = 0; i < labels.size(); ++i)
        for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<std::uint8_t>(labels[i] >> (8 * b));
    write_file_atomic(path, bytes);
    nlohmann::json sidecar = {{"clusters", clusters}, {"frames", labels.size()}, {"source", source}};
    auto side = path;
    side += ".json";
    write_text_atomic(side, sidecar.dump(2) + "\n");
}

std::vector<std::uint32_t> load_labels(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() % 4 != 0) throw IoError("label file " + path.string() + " is truncated");
    std::vector<std::uint32_t> labels(bytes.size() / 4);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
        labels[i] = v;
    }
    return labels;
}

}  // namespace lamer
