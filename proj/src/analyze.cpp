// SPDX-License-Identifier: Apache-2.0
#include "lamer/analyze.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <sstream>

#include "lamer/errors.hpp"
#include "lamer/numerics.hpp"
#include "lamer/optim.hpp"
#include "lamer/train.hpp"

namespace lamer {

// ---------------------------------------------------------------- activation

ActivationProfile activation_profile(const EncoderModel& model, const std::vector<const Sequence*>& corpus,
                                     ActivationStat stat) {
    if (corpus.empty()) throw StateError("activation_profile: empty corpus");
    if (!model.config.has_lamer()) throw StateError("activation_profile: model has no Lamer layers");

    ActivationProfile profile;
    profile.stat = stat;
    const auto experts = model.config.experts_per_layer();
    for (std::size_t l = 0; l < experts.size(); ++l)
        if (experts[l] > 0) profile.layers.push_back(l);
    for (const auto* s : corpus) profile.languages.push_back(s->language);
    std::sort(profile.languages.begin(), profile.languages.end());
    profile.languages.erase(std::unique(profile.languages.begin(), profile.languages.end()), profile.languages.end());

    profile.mean.resize(profile.layers.size());
    profile.tokens.resize(profile.layers.size());
    for (std::size_t i = 0; i < profile.layers.size(); ++i) {
        profile.mean[i].assign(profile.languages.size(), std::vector<double>(experts[profile.layers[i]], 0.0));
        profile.tokens[i].assign(profile.languages.size(), 0);
    }

    const MaskSpec no_mask;
    for (const auto* s : corpus) {
        const std::size_t j = static_cast<std::size_t>(
            std::lower_bound(profile.languages.begin(), profile.languages.end(), s->language) -
            profile.languages.begin());
        const auto out = encoder_forward(s->frames, no_mask, model);
        for (std::size_t i = 0; i < profile.layers.size(); ++i) {
            auto& acc = profile.mean[i][j];
            for (const auto& d : out.routing[profile.layers[i]]) {
                const auto& v = stat == ActivationStat::Weights ? d.weights : d.probs;
                for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += v[k];
            }
            profile.tokens[i][j] += out.routing[profile.layers[i]].size();
        }
    }
    for (std::size_t i = 0; i < profile.layers.size(); ++i)
        for (std::size_t j = 0; j < profile.languages.size(); ++j)
            if (profile.tokens[i][j] > 0)
                for (double& v : profile.mean[i][j]) v /= static_cast<double>(profile.tokens[i][j]);
    return profile;
}

double jensen_shannon(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size())
        throw DimensionError("jensen_shannon: lengths " + std::to_string(p.size()) + " and " +
                             std::to_string(q.size()));
    double a = 0.0;
    double b = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) a += p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) b += q[i] * std::log(q[i] / m);
    }
    const double jsd = 0.5 * (a + b);
    return std::clamp(jsd, 0.0, std::log(2.0));
}

DepthSpecialization depth_specialization(const ActivationProfile& profile) {
    const std::size_t n = profile.languages.size();
    if (n < 2) throw ConfigError("depth_specialization: needs at least two languages, got " + std::to_string(n));
    DepthSpecialization out;
    for (std::size_t i = 0; i < profile.layers.size(); ++i) {
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = a + 1; b < n; ++b) {
                const double jsd = jensen_shannon(profile.mean[i][a], profile.mean[i][b]);
                out.pairs.push_back({profile.layers[i], profile.languages[a], profile.languages[b], jsd});
                sum += jsd;
                ++count;
            }
        out.mean_per_layer.push_back(sum / static_cast<double>(count));
    }
    return out;
}

std::vector<double> group_mean_divergence(const DepthSpecialization& spec, const ActivationProfile& profile,
                                          const AllocationPlan& plan) {
    std::vector<double> sums(plan.counts.size(), 0.0);
    std::vector<std::size_t> n(plan.counts.size(), 0);
    for (std::size_t i = 0; i < profile.layers.size(); ++i) {
        const std::size_t g = profile.layers[i] / plan.group_size;
        if (g >= sums.size()) throw DimensionError("group_mean_divergence: layer outside the allocation plan");
        sums[g] += spec.mean_per_layer.at(i);
        ++n[g];
    }
    for (std::size_t g = 0; g < sums.size(); ++g)
        sums[g] = n[g] > 0 ? sums[g] / static_cast<double>(n[g]) : std::numeric_limits<double>::quiet_NaN();
    return sums;
}

// ---------------------------------------------------------------- forgetting

const LanguageAccuracy& ForgettingReport::language(std::size_t id) const {
    for (const auto& l : languages)
        if (l.language == id) return l;
    throw IndexError("forgetting report has no language " + std::to_string(id));
}

nlohmann::json ForgettingReport::to_json() const {
    nlohmann::json langs = nlohmann::json::array();
    for (const auto& l : languages)
        langs.push_back({{"language", l.language}, {"before", l.before}, {"after", l.after}, {"delta", l.delta}});
    return {{"cluster_fingerprint", cluster_fingerprint}, {"eval_seed", eval_seed}, {"languages", langs}};
}

ForgettingReport forgetting_report(const EncoderModel& before, std::uint64_t before_clusters,
                                   const EncoderModel& after, std::uint64_t after_clusters,
                                   const std::map<std::size_t, std::vector<const Sequence*>>& heldout,
                                   std::uint64_t eval_seed) {
    if (before_clusters != after_clusters)
        throw ConfigError("forgetting_report: models were trained against different cluster models");
    if (before.config.num_clusters != after.config.num_clusters)
        throw ConfigError("forgetting_report: models predict different cluster counts");
    ForgettingReport report;
    report.cluster_fingerprint = before_clusters;
    report.eval_seed = eval_seed;
    for (const auto& [lang, seqs] : heldout) {
        LanguageAccuracy acc;
        acc.language = lang;
        acc.before = masked_accuracy(before, seqs, eval_seed);
        acc.after = masked_accuracy(after, seqs, eval_seed);
        acc.delta = acc.after - acc.before;
        report.languages.push_back(acc);
    }
    return report;
}

// ---------------------------------------------------------------- language-ID probe

std::vector<std::size_t> LinearProbe::predict(const Matrix& features) const {
    Matrix x = features;
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) = (x(r, c) - feature_mean[c]) / feature_scale[c];
    Matrix logits = matmul_nt(x, weights);
    add_row_bias(logits, bias);
    std::vector<std::size_t> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) out[r] = argmax(logits.row(r));
    return out;
}

LinearProbe train_linear_probe(const Matrix& features, const std::vector<std::size_t>& labels,
                               std::size_t num_classes, std::size_t steps, double lr) {
    if (features.rows() == 0) throw StateError("train_linear_probe: no training examples");
    if (labels.size() != features.rows())
        throw DimensionError("train_linear_probe: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(features.rows()) + " rows");
    LinearProbe probe;
    const std::size_t n = features.rows();
    const std::size_t d = features.cols();
    probe.feature_mean.assign(d, 0.0);
    probe.feature_scale.assign(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) probe.feature_mean[c] += features(r, c);
    for (double& m : probe.feature_mean) m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) {
            const double diff = features(r, c) - probe.feature_mean[c];
            probe.feature_scale[c] += diff * diff;
        }
    for (double& s : probe.feature_scale) {
        s = std::sqrt(s / static_cast<double>(n));
        if (s < 1e-12) s = 1.0;
    }
    Matrix x = features;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) x(r, c) = (x(r, c) - probe.feature_mean[c]) / probe.feature_scale[c];

    probe.weights = Matrix(num_classes, d);
    probe.bias = Matrix(1, num_classes);
    Matrix gw(num_classes, d);
    Matrix gb(1, num_classes);
    OptimState opt(LrSchedule{lr, 0, std::max<std::size_t>(steps, 1)});
    Matrix* params[] = {&probe.weights, &probe.bias};
    const Matrix* grads[] = {&gw, &gb};
    for (std::size_t s = 0; s < steps; ++s) {
        Matrix logits = matmul_nt(x, probe.weights);
        add_row_bias(logits, probe.bias);
        const auto ce = cross_entropy(logits, labels);
        gw = matmul_tn(ce.grad, x);
        gb.set_zero();
        accumulate_column_sums(gb, ce.grad);
        optim_step(opt, params, grads);
    }
    return probe;
}

double probe_accuracy(const LinearProbe& probe, const Matrix& features, const std::vector<std::size_t>& labels) {
    if (labels.empty()) throw StateError("probe_accuracy: empty evaluation set");
    const auto pred = probe.predict(features);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

Matrix pooled_features(const EncoderModel& model, const std::vector<const Sequence*>& seqs, std::size_t layer) {
    Matrix out(seqs.size(), model.config.model_dim);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        const Matrix h = encoder_features(model, seqs[i]->frames, layer);
        auto row = out.row(i);
        for (std::size_t t = 0; t < h.rows(); ++t)
            for (std::size_t c = 0; c < h.cols(); ++c) row[c] += h(t, c);
        for (double& v : row) v /= static_cast<double>(h.rows());
    }
    return out;
}

nlohmann::json LidProbeResult::to_json() const {
    return {{"layer", layer},
            {"languages", languages},
            {"train_accuracy", train_accuracy},
            {"test_accuracy", test_accuracy}};
}

LidProbeResult lid_probe(const EncoderModel& model, const std::vector<const Sequence*>& train,
                         const std::vector<const Sequence*>& test, const LidProbeOptions& options) {
    LidProbeResult result;
    const std::size_t L = model.config.num_layers;
    result.layer = options.layer.value_or(L >= 2 ? L - 2 : 0);
    if (result.layer > L) throw ConfigError("lid_probe: layer " + std::to_string(result.layer) + " exceeds depth");
    for (const auto* s : train) result.languages.push_back(s->language);
    std::sort(result.languages.begin(), result.languages.end());
    result.languages.erase(std::unique(result.languages.begin(), result.languages.end()), result.languages.end());
    if (result.languages.size() < 2)
        throw ConfigError("lid_probe: needs at least two training languages, got " +
                          std::to_string(result.languages.size()));
    auto class_of = [&](const Sequence* s) {
        auto it = std::lower_bound(result.languages.begin(), result.languages.end(), s->language);
        if (it == result.languages.end() || *it != s->language)
            throw DataError("lid_probe: test language " + std::to_string(s->language) + " unseen in training");
        return static_cast<std::size_t>(it - result.languages.begin());
    };
    std::vector<std::size_t> ytrain, ytest;
    for (const auto* s : train) ytrain.push_back(class_of(s));
    for (const auto* s : test) ytest.push_back(class_of(s));

    const Matrix xtrain = pooled_features(model, train, result.layer);
    const LinearProbe probe = train_linear_probe(xtrain, ytrain, result.languages.size(), options.steps, options.lr);
    result.train_accuracy = probe_accuracy(probe, xtrain, ytrain);
    result.test_accuracy = probe_accuracy(probe, pooled_features(model, test, result.layer), ytest);
    return result;
}

// ---------------------------------------------------------------- parameters

std::string injection_name(Injection inj) {
    switch (inj) {
        case Injection::BothSharedRouter: return "both_projections_shared_router";
        case Injection::BothRouterPerProjection: return "both_projections_router_per_projection";
        case Injection::UpOnly: return "up_projection_only";
        case Injection::DownOnly: return "down_projection_only";
    }
    throw InternalError("unknown injection hypothesis");
}

std::vector<Injection> all_injections() {
    return {Injection::BothSharedRouter, Injection::BothRouterPerProjection, Injection::UpOnly, Injection::DownOnly};
}

ArchitectureDescriptor toy_descriptor(const EncoderConfig& cfg) {
    const std::uint64_t d = cfg.model_dim;
    const std::uint64_t f = cfg.ffn_dim;
    ArchitectureDescriptor a;
    a.name = "toy";
    a.model_dim = cfg.model_dim;
    a.ffn_dim = cfg.ffn_dim;
    a.num_layers = cfg.num_layers;
    a.experts = cfg.experts_per_layer();
    a.rank = cfg.lora_rank;
    const std::uint64_t per_layer = 4 * d + 4 * (d * d + d) + (f * d + f) + (d * f + d);
    a.frozen = (d * cfg.input_dim + d) + d + cfg.num_layers * per_layer + 2 * d;
    const std::uint64_t head = cfg.num_clusters * d + cfg.num_clusters;
    (cfg.train_head_in_continual ? a.extra_trainable : a.frozen) += head;
    return a;
}

ArchitectureDescriptor hubert_large_descriptor() {
    constexpr std::uint64_t c = 512;
    constexpr std::uint64_t d = 1024;
    constexpr std::uint64_t f = 4096;
    constexpr std::uint64_t L = 24;
    // Waveform feature extractor: 7 bias-free convs (kernels 10,3,3,3,3,2,2), each with LayerNorm.
    const std::uint64_t conv = c * 1 * 10 + 4 * (c * c * 3) + 2 * (c * c * 2) + 7 * 2 * c;
    const std::uint64_t projection = 2 * c + (c * d + d);
    // Weight-normalized grouped positional conv: kernel 128, 16 groups.
    const std::uint64_t pos_conv = d * (d / 16) * 128 + 128 + d;
    const std::uint64_t encoder_ln = 2 * d;
    const std::uint64_t layer = 4 * (d * d + d) + 2 * (2 * d) + (f * d + f) + (d * f + d);
    const std::uint64_t mask_emb = d;

    ArchitectureDescriptor a;
    a.name = "hubert_large";
    a.model_dim = d;
    a.ffn_dim = f;
    a.num_layers = L;
    a.experts = allocate_experts(L, 6, {2, 4, 6, 8});
    a.rank = 12;
    a.frozen = conv + projection + pos_conv + encoder_ln + L * layer + mask_emb;
    return a;
}

std::vector<TensorShape> hypothesis_tensors(const ArchitectureDescriptor& arch, Injection inj) {
    const bool up = inj != Injection::DownOnly;
    const bool down = inj != Injection::UpOnly;
    const std::uint64_t d = arch.model_dim;
    const std::uint64_t f = arch.ffn_dim;
    const std::uint64_t r = arch.rank;
    std::vector<TensorShape> out;
    for (std::size_t l = 0; l < arch.experts.size(); ++l) {
        const std::size_t n = arch.experts[l];
        if (n == 0) continue;
        const std::string p = "layers." + std::to_string(l) + ".ffn.";
        switch (inj) {
            case Injection::BothSharedRouter:
            case Injection::UpOnly: out.push_back({p + "router", n, d}); break;
            case Injection::DownOnly: out.push_back({p + "router", n, f}); break;
            case Injection::BothRouterPerProjection:
                out.push_back({p + "router.up", n, d});
                out.push_back({p + "router.down", n, f});
                break;
        }
        for (std::size_t k = 0; k < n; ++k) {
            const std::string e = p + "experts." + std::to_string(k);
            if (up) {
                out.push_back({e + ".up.a", r, d});
                out.push_back({e + ".up.b", f, r});
            }
            if (down) {
                out.push_back({e + ".down.a", r, f});
                out.push_back({e + ".down.b", d, r});
            }
        }
    }
    return out;
}

HypothesisCount count_hypothesis(const ArchitectureDescriptor& arch, Injection inj) {
    const std::uint64_t d = arch.model_dim;
    const std::uint64_t f = arch.ffn_dim;
    const std::uint64_t r = arch.rank;
    std::uint64_t n = 0;
    for (std::size_t e : arch.experts) n += e;
    std::uint64_t per_expert = 0;
    std::uint64_t router = 0;
    switch (inj) {
        case Injection::BothSharedRouter: per_expert = 2 * r * (d + f), router = d; break;
        case Injection::BothRouterPerProjection: per_expert = 2 * r * (d + f), router = d + f; break;
        case Injection::UpOnly: per_expert = r * (d + f), router = d; break;
        case Injection::DownOnly: per_expert = r * (d + f), router = f; break;
    }
    HypothesisCount h;
    h.injection = inj;
    h.trainable = n * (per_expert + router) + arch.extra_trainable;
    h.frozen = arch.frozen;
    h.ratio = static_cast<double>(h.trainable) / static_cast<double>(h.trainable + h.frozen);
    return h;
}

nlohmann::json ParamReport::to_json() const {
    nlohmann::json hyps = nlohmann::json::array();
    for (const auto& h : hypotheses)
        hyps.push_back({{"injection", injection_name(h.injection)},
                        {"trainable", h.trainable},
                        {"frozen", h.frozen},
                        {"total", h.trainable + h.frozen},
                        {"ratio", h.ratio},
                        {"ratio_percent", format_real(100.0 * h.ratio)}});
    return {{"architecture",
             {{"name", arch.name},
              {"model_dim", arch.model_dim},
              {"ffn_dim", arch.ffn_dim},
              {"num_layers", arch.num_layers},
              {"experts_per_layer", arch.experts},
              {"rank", arch.rank},
              {"frozen_backbone", arch.frozen},
              {"extra_trainable", arch.extra_trainable}}},
            {"hypotheses", hyps},
            {"target_ratio", target_ratio},
            {"best", injection_name(hypotheses.at(best).injection)},
            {"best_gap_percentage_points", 100.0 * best_gap}};
}

ParamReport param_report(const ArchitectureDescriptor& arch, double target_ratio) {
    ParamReport report;
    report.arch = arch;
    report.target_ratio = target_ratio;
    report.best_gap = std::numeric_limits<double>::infinity();
    for (Injection inj : all_injections()) {
        report.hypotheses.push_back(count_hypothesis(arch, inj));
        const double gap = std::abs(report.hypotheses.back().ratio - target_ratio);
        if (gap < report.best_gap) {
            report.best_gap = gap;
            report.best = report.hypotheses.size() - 1;
        }
    }
    return report;
}

// ---------------------------------------------------------------- exports

std::string format_real(double v) {
    char buf[64];
    for (int precision = 1; precision <= 17; ++precision) {
        std::snprintf(buf, sizeof buf, "%.*g", precision, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

std::string heatmap_csv(const ActivationProfile& profile) {
    std::ostringstream os;
    os << "layer,language,expert," << (profile.stat == ActivationStat::Weights ? "mean_weight" : "mean_prob")
       << "\n";
    for (std::size_t i = 0; i < profile.layers.size(); ++i)
        for (std::size_t j = 0; j < profile.languages.size(); ++j)
            for (std::size_t k = 0; k < profile.mean[i][j].size(); ++k)
                os << profile.layers[i] << ',' << profile.languages[j] << ',' << k << ','
                   << format_real(profile.mean[i][j][k]) << '\n';
    return os.str();
}

std::string divergence_csv(const DepthSpecialization& spec) {
    std::ostringstream os;
    os << "layer,language_a,language_b,jsd\n";
    for (const auto& p : spec.pairs)
        os << p.layer << ',' << p.language_a << ',' << p.language_b << ',' << format_real(p.jsd) << '\n';
    return os.str();
}

}  // namespace lamer
