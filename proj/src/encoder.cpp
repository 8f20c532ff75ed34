// SPDX-License-Identifier: Apache-2.0
#include "lamer/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <set>
#include <sstream>

#include "lamer/errors.hpp"
#include "lamer/numerics.hpp"

namespace lamer {

// ---------------------------------------------------------------- configuration

void AllocationPlan::validate(std::size_t num_layers) const {
    if (group_size == 0) throw ConfigError("allocation: group_size must be positive");
    if (counts.empty()) throw ConfigError("allocation: counts must not be empty");
    for (std::size_t c : counts)
        if (c < 1) throw ConfigError("allocation: every expert count must be at least 1");
    if (group_size * counts.size() != num_layers) {
        throw ConfigError("allocation: " + std::to_string(counts.size()) + " groups of " +
                          std::to_string(group_size) + " layers do not cover " + std::to_string(num_layers) +
                          " layers");
    }
}

std::string AllocationPlan::describe() const {
    std::string s;
    for (std::size_t i = 0; i < counts.size(); ++i) s += (i ? "/" : "") + std::to_string(counts[i]);
    return s;
}

std::vector<std::size_t> allocate_experts(std::size_t num_layers, std::size_t group_size,
                                          const std::vector<std::size_t>& counts) {
    if (group_size == 0 || num_layers % group_size != 0) {
        throw ConfigError("allocation: " + std::to_string(num_layers) + " layers are not divisible into groups of " +
                          std::to_string(group_size));
    }
    AllocationPlan{group_size, counts}.validate(num_layers);
    std::vector<std::size_t> per_layer(num_layers);
    for (std::size_t l = 0; l < num_layers; ++l) per_layer[l] = counts[l / group_size];
    return per_layer;
}

void EncoderConfig::validate() const {
    if (input_dim == 0 || num_layers == 0 || model_dim == 0 || ffn_dim == 0 || heads == 0)
        throw ConfigError("encoder: dimensions, layer count and head count must be positive");
    if (model_dim % heads != 0)
        throw ConfigError("encoder: model_dim " + std::to_string(model_dim) + " is not divisible by " +
                          std::to_string(heads) + " heads");
    if (num_clusters < 2) throw ConfigError("encoder: num_clusters must be at least 2");
    if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw ConfigError("encoder: mask_prob must lie in [0, 1]");
    if (mask_span < 1) throw ConfigError("encoder: mask_span must be at least 1");
    if (allocation) {
        allocation->validate(num_layers);
        const std::size_t smallest = *std::min_element(allocation->counts.begin(), allocation->counts.end());
        LamerConfig{model_dim, ffn_dim, lora_rank, smallest, top_k}.validate();
    }
}

std::vector<std::size_t> EncoderConfig::experts_per_layer() const {
    if (!allocation) return std::vector<std::size_t>(num_layers, 0);
    return allocate_experts(num_layers, allocation->group_size, allocation->counts);
}

nlohmann::json to_json(const EncoderConfig& cfg) {
    nlohmann::json j = {
        {"input_dim", cfg.input_dim},       {"num_layers", cfg.num_layers},
        {"model_dim", cfg.model_dim},       {"ffn_dim", cfg.ffn_dim},
        {"heads", cfg.heads},               {"num_clusters", cfg.num_clusters},
        {"lora_rank", cfg.lora_rank},       {"top_k", cfg.top_k},
        {"mask_prob", cfg.mask_prob},       {"mask_span", cfg.mask_span},
        {"train_head_in_continual", cfg.train_head_in_continual},
    };
    if (cfg.allocation) {
        j["allocation"] = {{"group_size", cfg.allocation->group_size}, {"counts", cfg.allocation->counts}};
    } else {
        j["allocation"] = nullptr;
    }
    return j;
}

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("encoder config: field '") + key + "': " + e.what());
    }
}

}  // namespace

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("encoder config: expected a JSON object");
    static const std::set<std::string> known = {"input_dim", "num_layers", "model_dim", "ffn_dim",
                                                "heads",     "num_clusters", "lora_rank", "top_k",
                                                "mask_prob", "mask_span",    "allocation",
                                                "train_head_in_continual"};
    for (const auto& [key, _] : j.items())
        if (!known.contains(key)) throw ConfigError("encoder config: unknown field '" + key + "'");

    EncoderConfig cfg;
    read_field(j, "input_dim", cfg.input_dim);
    read_field(j, "num_layers", cfg.num_layers);
    read_field(j, "model_dim", cfg.model_dim);
    read_field(j, "ffn_dim", cfg.ffn_dim);
    read_field(j, "heads", cfg.heads);
    read_field(j, "num_clusters", cfg.num_clusters);
    read_field(j, "lora_rank", cfg.lora_rank);
    read_field(j, "top_k", cfg.top_k);
    read_field(j, "mask_prob", cfg.mask_prob);
    read_field(j, "mask_span", cfg.mask_span);
    read_field(j, "train_head_in_continual", cfg.train_head_in_continual);
    if (j.contains("allocation") && !j.at("allocation").is_null()) {
        const auto& a = j.at("allocation");
        AllocationPlan plan;
        read_field(a, "group_size", plan.group_size);
        read_field(a, "counts", plan.counts);
        cfg.allocation = plan;
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------- construction

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = rng.normal(0.0, stddev);
    return m;
}

double inv_sqrt(std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

LayerNormParams make_norm(std::size_t d) { return {Matrix(1, d, 1.0), Matrix(1, d, 0.0)}; }

}  // namespace

EncoderModel EncoderModel::create_backbone(EncoderConfig config, Rng& rng) {
    config.allocation.reset();
    config.validate();
    const std::size_t d = config.model_dim;
    const std::size_t ff = config.ffn_dim;

    EncoderModel m;
    m.config = config;
    m.proj_w = gaussian(d, config.input_dim, inv_sqrt(config.input_dim), rng);
    m.proj_b = Matrix(1, d);
    m.mask_emb = gaussian(1, d, 1.0, rng);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        EncoderLayer layer;
        layer.ln1 = make_norm(d);
        layer.ln2 = make_norm(d);
        auto& a = layer.attn;
        a.wq = gaussian(d, d, inv_sqrt(d), rng);
        a.wk = gaussian(d, d, inv_sqrt(d), rng);
        a.wv = gaussian(d, d, inv_sqrt(d), rng);
        a.wo = gaussian(d, d, inv_sqrt(d), rng);
        a.bq = a.bk = a.bv = a.bo = Matrix(1, d);
        auto& f = layer.ffn;
        f.w1 = gaussian(ff, d, inv_sqrt(d), rng);
        f.b1 = Matrix(1, ff);
        f.w2 = gaussian(d, ff, inv_sqrt(ff), rng);
        f.b2 = Matrix(1, d);
        f.router = Matrix(0, d);
        m.layers.push_back(std::move(layer));
    }
    m.final_ln = make_norm(d);
    m.head_w = gaussian(config.num_clusters, d, inv_sqrt(d), rng);
    m.head_b = Matrix(1, config.num_clusters);
    return m;
}

EncoderModel EncoderModel::zeros_like() const {
    EncoderModel z = *this;
    for (auto& p : named_params(z)) p.value->set_zero();
    return z;
}

EncoderModel lamerify(const EncoderModel& backbone, const AllocationPlan& plan, std::size_t rank,
                      std::size_t top_k, Rng& init_rng, Rng& router_rng) {
    if (backbone.config.has_lamer()) throw ConfigError("lamerify: model already has Lamer experts");
    EncoderModel m = backbone;
    m.config.allocation = plan;
    m.config.lora_rank = rank;
    m.config.top_k = top_k;
    m.config.validate();
    const std::size_t d = m.config.model_dim;
    const std::size_t ff = m.config.ffn_dim;
    const auto counts = m.config.experts_per_layer();
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        auto& f = m.layers[l].ffn;
        const std::size_t n = counts[l];
        LamerConfig{d, ff, rank, n, top_k}.validate();
        f.up.clear();
        f.down.clear();
        for (std::size_t k = 0; k < n; ++k) {
            f.up.push_back({gaussian(rank, d, inv_sqrt(d), init_rng), Matrix(ff, rank)});
            f.down.push_back({gaussian(rank, ff, inv_sqrt(ff), init_rng), Matrix(d, rank)});
        }
        f.router = gaussian(n, d, 0.02, router_rng);
    }
    return m;
}

// ---------------------------------------------------------------- parameters

namespace {

template <typename Model, typename Out>
void collect_params(Model& m, Out& out) {
    auto add = [&](std::string name, auto& matrix, ParamGroup g) { out.push_back({std::move(name), &matrix, g}); };
    add("proj.w", m.proj_w, ParamGroup::Projector);
    add("proj.b", m.proj_b, ParamGroup::Projector);
    add("mask_emb", m.mask_emb, ParamGroup::MaskEmbedding);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        auto& layer = m.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        add(p + "ln1.gain", layer.ln1.gain, ParamGroup::Norm);
        add(p + "ln1.bias", layer.ln1.bias, ParamGroup::Norm);
        add(p + "attn.wq", layer.attn.wq, ParamGroup::Attention);
        add(p + "attn.bq", layer.attn.bq, ParamGroup::Attention);
        add(p + "attn.wk", layer.attn.wk, ParamGroup::Attention);
        add(p + "attn.bk", layer.attn.bk, ParamGroup::Attention);
        add(p + "attn.wv", layer.attn.wv, ParamGroup::Attention);
        add(p + "attn.bv", layer.attn.bv, ParamGroup::Attention);
        add(p + "attn.wo", layer.attn.wo, ParamGroup::Attention);
        add(p + "attn.bo", layer.attn.bo, ParamGroup::Attention);
        add(p + "ln2.gain", layer.ln2.gain, ParamGroup::Norm);
        add(p + "ln2.bias", layer.ln2.bias, ParamGroup::Norm);
        add(p + "ffn.w1", layer.ffn.w1, ParamGroup::FfnBase);
        add(p + "ffn.b1", layer.ffn.b1, ParamGroup::FfnBase);
        add(p + "ffn.w2", layer.ffn.w2, ParamGroup::FfnBase);
        add(p + "ffn.b2", layer.ffn.b2, ParamGroup::FfnBase);
        if (layer.ffn.num_experts() > 0) {
            add(p + "ffn.router", layer.ffn.router, ParamGroup::Router);
            for (std::size_t k = 0; k < layer.ffn.num_experts(); ++k) {
                const std::string e = p + "ffn.experts." + std::to_string(k) + ".";
                add(e + "up.a", layer.ffn.up[k].a, ParamGroup::Expert);
                add(e + "up.b", layer.ffn.up[k].b, ParamGroup::Expert);
                add(e + "down.a", layer.ffn.down[k].a, ParamGroup::Expert);
                add(e + "down.b", layer.ffn.down[k].b, ParamGroup::Expert);
            }
        }
    }
    add("final_ln.gain", m.final_ln.gain, ParamGroup::Norm);
    add("final_ln.bias", m.final_ln.bias, ParamGroup::Norm);
    add("head.w", m.head_w, ParamGroup::Head);
    add("head.b", m.head_b, ParamGroup::Head);
}

std::uint64_t fnv1a(std::uint64_t h, const Matrix& m) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data().data());
    for (std::size_t i = 0; i < m.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

std::vector<NamedParam> named_params(EncoderModel& model) {
    std::vector<NamedParam> out;
    collect_params(model, out);
    return out;
}

std::vector<ConstNamedParam> named_params(const EncoderModel& model) {
    std::vector<ConstNamedParam> out;
    collect_params(model, out);
    return out;
}

bool is_trainable(ParamGroup group, Phase phase, const EncoderConfig& cfg) {
    if (phase == Phase::Pretrain) return true;
    switch (group) {
        case ParamGroup::Expert:
        case ParamGroup::Router: return true;
        case ParamGroup::Head: return cfg.train_head_in_continual;
        default: return false;
    }
}

std::vector<NamedParam> trainable_parameters(EncoderModel& model, Phase phase) {
    std::vector<NamedParam> out;
    for (auto& p : named_params(model))
        if (is_trainable(p.group, phase, model.config)) out.push_back(p);
    return out;
}

std::size_t count_parameters(const EncoderModel& model, std::optional<Phase> trainable_in) {
    std::size_t n = 0;
    for (const auto& p : named_params(model))
        if (!trainable_in || is_trainable(p.group, *trainable_in, model.config)) n += p.value->size();
    return n;
}

std::uint64_t frozen_checksum(const EncoderModel& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : named_params(model))
        if (!is_trainable(p.group, Phase::Continual, model.config)) h = fnv1a(h, *p.value);
    return h;
}

std::uint64_t model_checksum(const EncoderModel& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : named_params(model)) h = fnv1a(h, *p.value);
    return h;
}

// ---------------------------------------------------------------- masking

bool MaskSpec::contains(std::size_t t) const { return std::binary_search(indices.begin(), indices.end(), t); }

MaskSpec sample_mask(std::size_t frames, double mask_prob, std::size_t mask_span, Rng& rng) {
    if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw ConfigError("sample_mask: mask_prob must lie in [0, 1]");
    if (mask_span < 1) throw ConfigError("sample_mask: mask_span must be at least 1");
    std::vector<char> masked(frames, 0);
    for (std::size_t t = 0; t < frames; ++t) {
        if (!rng.bernoulli(mask_prob)) continue;
        for (std::size_t s = t; s < std::min(frames, t + mask_span); ++s) masked[s] = 1;
    }
    MaskSpec spec;
    for (std::size_t t = 0; t < frames; ++t)
        if (masked[t]) spec.indices.push_back(t);
    return spec;
}

// ---------------------------------------------------------------- forward

namespace {

constexpr double kNormEps = 1e-5;

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, LayerNormCache& cache) {
    const std::size_t d = x.cols();
    Matrix y(x.rows(), d);
    cache.normalized = Matrix(x.rows(), d);
    cache.inv_std.assign(x.rows(), 0.0);
    for (std::size_t t = 0; t < x.rows(); ++t) {
        auto xr = x.row(t);
        double mean = 0.0;
        for (double v : xr) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : xr) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kNormEps);
        cache.inv_std[t] = inv;
        auto nr = cache.normalized.row(t);
        auto yr = y.row(t);
        for (std::size_t j = 0; j < d; ++j) {
            nr[j] = (xr[j] - mean) * inv;
            yr[j] = nr[j] * p.gain(0, j) + p.bias(0, j);
        }
    }
    return y;
}

// Accumulates into dx; norm parameter gradients only when `dp` is non-null.
void layer_norm_backward(const Matrix& dy, const LayerNormParams& p, const LayerNormCache& cache, Matrix& dx,
                         LayerNormParams* dp) {
    const std::size_t d = dy.cols();
    std::vector<double> dxhat(d);
    for (std::size_t t = 0; t < dy.rows(); ++t) {
        auto dyr = dy.row(t);
        auto nr = cache.normalized.row(t);
        double mean_d = 0.0;
        double mean_dn = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = dyr[j] * p.gain(0, j);
            mean_d += dxhat[j];
            mean_dn += dxhat[j] * nr[j];
            if (dp != nullptr) {
                dp->gain(0, j) += dyr[j] * nr[j];
                dp->bias(0, j) += dyr[j];
            }
        }
        mean_d /= static_cast<double>(d);
        mean_dn /= static_cast<double>(d);
        auto dxr = dx.row(t);
        for (std::size_t j = 0; j < d; ++j) dxr[j] += cache.inv_std[t] * (dxhat[j] - mean_d - nr[j] * mean_dn);
    }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y = matmul_nt(x, w);
    add_row_bias(y, b);
    return y;
}

void add_positions(Matrix& x) {
    const std::size_t d = x.cols();
    for (std::size_t t = 0; t < x.rows(); ++t) {
        for (std::size_t j = 0; j < d; ++j) {
            const double freq = std::pow(10000.0, -static_cast<double>(j - j % 2) / static_cast<double>(d));
            const double angle = static_cast<double>(t) * freq;
            x(t, j) += (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
}

Matrix embed(const Matrix& frames, const MaskSpec& mask, const EncoderModel& model) {
    Matrix x = linear(frames, model.proj_w, model.proj_b);
    for (std::size_t t : mask.indices) {
        if (t >= x.rows()) throw IndexError("mask index " + std::to_string(t) + " beyond " +
                                            std::to_string(x.rows()) + " frames");
        std::copy(model.mask_emb.row(0).begin(), model.mask_emb.row(0).end(), x.row(t).begin());
    }
    add_positions(x);
    return x;
}

// out[s] = sum_j x[j] * mt(off + j, s), summed in ascending j like dot().
void row_times_columns(std::span<const double> x, const Matrix& mt, std::size_t off, std::vector<double>& out) {
    std::fill(out.begin(), out.end(), 0.0);
    const std::size_t n = out.size();
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double xj = x[j];
        const double* m = mt.row(off + j).data();
        for (std::size_t s = 0; s < n; ++s) out[s] += xj * m[s];
    }
}

Matrix attention_forward(const AttentionParams& a, std::size_t heads, LayerTrace& tr) {
    const std::size_t T = tr.n1.rows();
    const std::size_t d = tr.n1.cols();
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    tr.q = linear(tr.n1, a.wq, a.bq);
    tr.k = linear(tr.n1, a.wk, a.bk);
    tr.v = linear(tr.n1, a.wv, a.bv);
    tr.attn_concat = Matrix(T, d);
    tr.attn_probs.assign(heads, Matrix(T, T));
    std::vector<double> scores(T);
    const Matrix kt = tr.k.transposed();
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        Matrix& probs = tr.attn_probs[h];
        for (std::size_t t = 0; t < T; ++t) {
            row_times_columns(tr.q.row(t).subspan(off, dh), kt, off, scores);
            for (double& v : scores) v *= scale;
            auto p = softmax(scores);
            std::copy(p.begin(), p.end(), probs.row(t).begin());
            auto out = tr.attn_concat.row(t).subspan(off, dh);
            for (std::size_t s = 0; s < T; ++s) {
                auto vs = tr.v.row(s).subspan(off, dh);
                for (std::size_t j = 0; j < dh; ++j) out[j] += p[s] * vs[j];
            }
        }
    }
    return linear(tr.attn_concat, a.wo, a.bo);
}

Matrix ffn_forward(const FfnParams& f, std::size_t top_k, LayerTrace& tr, LoadStats& stats) {
    const std::size_t T = tr.n2.rows();
    const bool routed = f.num_experts() > 0;
    tr.decisions.clear();
    if (routed) {
        stats = LoadStats(f.num_experts(), top_k);
        tr.decisions.reserve(T);
        for (std::size_t t = 0; t < T; ++t) {
            tr.decisions.push_back(route(tr.n2.row(t), f.router, top_k));
            stats.add(tr.decisions.back());
        }
    } else {
        tr.decisions.assign(T, RouterDecision{});
    }
    tr.pre_act = experts_forward(tr.n2, f.w1, f.up, tr.decisions, &tr.up_cache);
    add_row_bias(tr.pre_act, f.b1);
    tr.act = Matrix(T, tr.pre_act.cols());
    for (std::size_t i = 0; i < tr.act.size(); ++i) tr.act.data()[i] = gelu(tr.pre_act.data()[i]);
    Matrix y = experts_forward(tr.act, f.w2, f.down, tr.decisions, &tr.down_cache);
    add_row_bias(y, f.b2);
    if (!routed) tr.decisions.clear();
    return y;
}

}  // namespace

const Matrix& EncoderOutput::hidden(std::size_t l) const {
    if (l > trace.layers.size()) throw IndexError("hidden: layer " + std::to_string(l) + " of " +
                                                  std::to_string(trace.layers.size()));
    return l < trace.layers.size() ? trace.layers[l].input : trace.final_input;
}

EncoderOutput encoder_forward(const Matrix& frames, const MaskSpec& mask, const EncoderModel& model) {
    const auto& cfg = model.config;
    if (frames.cols() != cfg.input_dim)
        throw DimensionError("encoder_forward: frames " + shape_str(frames) + " for input_dim " +
                             std::to_string(cfg.input_dim));
    EncoderOutput out;
    auto& tr = out.trace;
    tr.frames = frames;
    tr.mask = mask;
    Matrix x = embed(frames, mask, model);
    tr.layers.resize(model.layers.size());
    out.stats.resize(model.layers.size());
    out.routing.resize(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const auto& layer = model.layers[l];
        auto& lt = tr.layers[l];
        lt.input = x;
        lt.n1 = layer_norm(x, layer.ln1, lt.ln1);
        x += attention_forward(layer.attn, cfg.heads, lt);
        lt.mid = x;
        lt.n2 = layer_norm(x, layer.ln2, lt.ln2);
        x += ffn_forward(layer.ffn, cfg.top_k, lt, out.stats[l]);
        out.routing[l] = lt.decisions;
    }
    tr.final_input = x;
    tr.final_norm = layer_norm(x, model.final_ln, tr.final_ln);
    out.logits = linear(tr.final_norm, model.head_w, model.head_b);
    tr.valid = true;
    return out;
}

Matrix encoder_features(const EncoderModel& model, const Matrix& frames, std::size_t layer) {
    if (layer > model.layers.size())
        throw IndexError("encoder_features: layer " + std::to_string(layer) + " of " +
                         std::to_string(model.layers.size()));
    return encoder_forward(frames, MaskSpec{}, model).hidden(layer);
}

// ---------------------------------------------------------------- backward

GradRequest grad_request_for(Phase phase, const EncoderConfig& cfg) {
    if (phase == Phase::Pretrain) return {true, true, true};
    return {false, true, cfg.train_head_in_continual};
}

namespace {

void linear_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix& dx, Matrix* dw, Matrix* db) {
    dx += matmul(dy, w);
    if (dw != nullptr) matmul_tn_acc(*dw, dy, x);
    if (db != nullptr) accumulate_column_sums(*db, dy);
}

// d(attention output) -> d(n1)
Matrix attention_backward(const AttentionParams& a, std::size_t heads, const LayerTrace& tr, const Matrix& dout,
                          AttentionParams* da) {
    const std::size_t T = tr.n1.rows();
    const std::size_t d = tr.n1.cols();
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix dconcat(T, d);
    linear_backward(tr.attn_concat, a.wo, dout, dconcat, da ? &da->wo : nullptr, da ? &da->bo : nullptr);

    Matrix dq(T, d), dk(T, d), dv(T, d);
    std::vector<double> dp(T);
    const Matrix vt = tr.v.transposed();
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        const Matrix& probs = tr.attn_probs[h];
        for (std::size_t t = 0; t < T; ++t) {
            auto go = dconcat.row(t).subspan(off, dh);
            auto p = probs.row(t);
            row_times_columns(go, vt, off, dp);
            double pdp = 0.0;
            for (std::size_t s = 0; s < T; ++s) {
                pdp += p[s] * dp[s];
                auto dvs = dv.row(s).subspan(off, dh);
                for (std::size_t j = 0; j < dh; ++j) dvs[j] += p[s] * go[j];
            }
            auto qt = tr.q.row(t).subspan(off, dh);
            auto dqt = dq.row(t).subspan(off, dh);
            for (std::size_t s = 0; s < T; ++s) {
                const double ds = p[s] * (dp[s] - pdp) * scale;
                if (ds == 0.0) continue;
                auto ks = tr.k.row(s).subspan(off, dh);
                auto dks = dk.row(s).subspan(off, dh);
                for (std::size_t j = 0; j < dh; ++j) {
                    dqt[j] += ds * ks[j];
                    dks[j] += ds * qt[j];
                }
            }
        }
    }
    Matrix dn1(T, d);
    linear_backward(tr.n1, a.wq, dq, dn1, da ? &da->wq : nullptr, da ? &da->bq : nullptr);
    linear_backward(tr.n1, a.wk, dk, dn1, da ? &da->wk : nullptr, da ? &da->bk : nullptr);
    linear_backward(tr.n1, a.wv, dv, dn1, da ? &da->wv : nullptr, da ? &da->bv : nullptr);
    return dn1;
}

// d(ffn output) -> d(n2)
Matrix ffn_backward(const FfnParams& f, const LayerTrace& tr, const Matrix& dout,
                    std::span<const double> grad_mean_prob, std::size_t stat_tokens, const GradRequest& req,
                    FfnParams& df) {
    const std::size_t T = tr.n2.rows();
    const bool routed = f.num_experts() > 0;
    std::vector<RouterDecision> plain;
    std::span<const RouterDecision> decisions = tr.decisions;
    if (!routed) {
        plain.assign(T, RouterDecision{});
        decisions = plain;
    }
    Matrix dweights(T, f.num_experts());

    if (req.backbone) accumulate_column_sums(df.b2, dout);
    Matrix dact(T, f.w2.cols());
    std::span<LoraExpert> ddown = req.lamer ? std::span<LoraExpert>(df.down) : std::span<LoraExpert>();
    std::vector<LoraExpert> scratch_down, scratch_up;
    if (!req.lamer && routed) {
        scratch_down = f.down;
        for (auto& e : scratch_down) e.a.set_zero(), e.b.set_zero();
        ddown = scratch_down;
    }
    experts_backward(tr.act, dout, f.w2, f.down, decisions, tr.down_cache, ddown, req.backbone ? &df.w2 : nullptr,
                     dact, dweights);

    Matrix dpre(T, dact.cols());
    for (std::size_t i = 0; i < dpre.size(); ++i) dpre.data()[i] = dact.data()[i] * gelu_grad(tr.pre_act.data()[i]);
    if (req.backbone) accumulate_column_sums(df.b1, dpre);

    Matrix dn2(T, tr.n2.cols());
    std::span<LoraExpert> dup = req.lamer ? std::span<LoraExpert>(df.up) : std::span<LoraExpert>();
    if (!req.lamer && routed) {
        scratch_up = f.up;
        for (auto& e : scratch_up) e.a.set_zero(), e.b.set_zero();
        dup = scratch_up;
    }
    experts_backward(tr.n2, dpre, f.w1, f.up, decisions, tr.up_cache, dup, req.backbone ? &df.w1 : nullptr, dn2,
                     dweights);

    if (routed) {
        Matrix scratch_router;
        Matrix* drouter = &df.router;
        if (!req.lamer) {
            scratch_router = Matrix(f.router.rows(), f.router.cols());
            drouter = &scratch_router;
        }
        router_backward(tr.n2, f.router, decisions, dweights, grad_mean_prob, stat_tokens, *drouter, dn2);
    }
    return dn2;
}

}  // namespace

void encoder_backward(const EncoderModel& model, const EncoderTrace& trace, const Matrix& grad_logits,
                      const std::vector<std::vector<double>>& grad_mean_prob,
                      const std::vector<std::size_t>& stat_tokens, const GradRequest& request,
                      EncoderModel& grads) {
    if (!trace.valid) throw StateError("encoder_backward: no forward trace");
    if (grad_logits.rows() != trace.final_norm.rows() || grad_logits.cols() != model.config.num_clusters)
        throw DimensionError("encoder_backward: logit gradient " + shape_str(grad_logits));
    const std::size_t T = grad_logits.rows();
    const std::size_t d = model.config.model_dim;

    Matrix dnorm(T, d);
    linear_backward(trace.final_norm, model.head_w, grad_logits, dnorm, request.head ? &grads.head_w : nullptr,
                    request.head ? &grads.head_b : nullptr);
    Matrix dx(T, d);
    layer_norm_backward(dnorm, model.final_ln, trace.final_ln, dx, request.backbone ? &grads.final_ln : nullptr);

    for (std::size_t l = model.layers.size(); l-- > 0;) {
        const auto& layer = model.layers[l];
        const auto& lt = trace.layers[l];
        auto& gl = grads.layers[l];
        const std::span<const double> lb =
            l < grad_mean_prob.size() ? std::span<const double>(grad_mean_prob[l]) : std::span<const double>();
        const std::size_t tokens = l < stat_tokens.size() ? stat_tokens[l] : 0;

        // x_out = mid + ffn(ln2(mid))
        Matrix dn2 = ffn_backward(layer.ffn, lt, dx, lb, tokens, request, gl.ffn);
        Matrix dmid = dx;
        layer_norm_backward(dn2, layer.ln2, lt.ln2, dmid, request.backbone ? &gl.ln2 : nullptr);

        // mid = input + attn(ln1(input))
        Matrix dn1 = attention_backward(layer.attn, model.config.heads, lt, dmid,
                                        request.backbone ? &gl.attn : nullptr);
        dx = dmid;
        layer_norm_backward(dn1, layer.ln1, lt.ln1, dx, request.backbone ? &gl.ln1 : nullptr);
    }

    if (!request.backbone) return;
    // Positions are constant; masked rows came from the mask embedding.
    Matrix dproj_out = dx;
    for (std::size_t t : trace.mask.indices) {
        for (std::size_t j = 0; j < d; ++j) {
            grads.mask_emb(0, j) += dx(t, j);
            dproj_out(t, j) = 0.0;
        }
    }
    matmul_tn_acc(grads.proj_w, dproj_out, trace.frames);
    accumulate_column_sums(grads.proj_b, dproj_out);
}

}  // namespace lamer
