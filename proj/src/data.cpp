// SPDX-License-Identifier: Apache-2.0
#include "lamer/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

#include "lamer/checkpoint.hpp"
#include "lamer/errors.hpp"

namespace lamer {

void SynthLanguageSpec::validate() const {
    const std::size_t s = num_states();
    if (s == 0 || dim() == 0) throw ConfigError("language '" + name + "': needs at least one state and dimension");
    if (!variances.same_shape(means))
        throw ConfigError("language '" + name + "': variances " + shape_str(variances) + " vs means " +
                          shape_str(means));
    if (transitions.rows() != s || transitions.cols() != s)
        throw ConfigError("language '" + name + "': transition matrix must be " + std::to_string(s) + "x" +
                          std::to_string(s));
    for (double v : variances.data())
        if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("language '" + name + "': variances must be >= 0");
    for (std::size_t r = 0; r < s; ++r) {
        double total = 0.0;
        for (double p : transitions.row(r)) {
            if (!(p >= 0.0)) throw ConfigError("language '" + name + "': negative transition probability");
            total += p;
        }
        if (std::abs(total - 1.0) > 1e-9)
            throw ConfigError("language '" + name + "': transition row " + std::to_string(r) + " sums to " +
                              std::to_string(total));
    }
    if (min_length < 1 || max_length < min_length)
        throw ConfigError("language '" + name + "': invalid length range");
}

namespace {

nlohmann::json matrix_json(const Matrix& m) {
    auto j = nlohmann::json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) j.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
    return j;
}

Matrix matrix_from_json(const nlohmann::json& j, const std::string& what) {
    if (!j.is_array() || j.empty()) throw ConfigError(what + ": expected a non-empty array of rows");
    const auto rows = j.get<std::vector<std::vector<double>>>();
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != m.cols()) throw ConfigError(what + ": ragged rows");
        std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
}

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

nlohmann::json to_json(const SynthLanguageSpec& spec) {
    return {{"id", spec.id},
            {"name", spec.name},
            {"means", matrix_json(spec.means)},
            {"variances", matrix_json(spec.variances)},
            {"transitions", matrix_json(spec.transitions)},
            {"length_range", {spec.min_length, spec.max_length}}};
}

SynthLanguageSpec language_from_json(const nlohmann::json& j) {
    SynthLanguageSpec s;
    try {
        s.id = j.at("id").get<std::size_t>();
        s.name = j.value("name", std::to_string(s.id));
        s.means = matrix_from_json(j.at("means"), "means");
        s.variances = matrix_from_json(j.at("variances"), "variances");
        s.transitions = matrix_from_json(j.at("transitions"), "transitions");
        if (j.contains("length_range")) {
            const auto range = j.at("length_range").get<std::vector<std::size_t>>();
            if (range.size() != 2) throw ConfigError("length_range must have two entries");
            s.min_length = range[0];
            s.max_length = range[1];
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("language spec: ") + e.what());
    }
    s.validate();
    return s;
}

std::vector<SynthLanguageSpec> default_languages(std::size_t d_input, std::uint64_t seed) {
    constexpr std::size_t kPool = 8;
    constexpr std::size_t kStates = 5;
    Rng rng(seed);
    Matrix pool(kPool, d_input);
    for (double& v : pool.data()) v = rng.normal(0.0, 1.5);

    struct Layout {
        const char* name;
        std::size_t states[kStates];
        double stay;
        std::size_t stride;  // successor of state i is (i + stride) mod kStates
    };
    const Layout layouts[] = {
        {"A", {0, 1, 2, 3, 4}, 0.88, 1},
        {"B", {2, 3, 4, 5, 6}, 0.80, 4},
        {"C", {4, 5, 6, 7, 0}, 0.84, 2},
    };

    std::vector<SynthLanguageSpec> langs;
    for (std::size_t id = 0; id < 3; ++id) {
        const auto& lay = layouts[id];
        SynthLanguageSpec s;
        s.id = id;
        s.name = lay.name;
        s.means = Matrix(kStates, d_input);
        s.variances = Matrix(kStates, d_input, 0.35);
        for (std::size_t i = 0; i < kStates; ++i)
            for (std::size_t j = 0; j < d_input; ++j) s.means(i, j) = pool(lay.states[i], j) + rng.normal(0.0, 0.3);
        s.transitions = Matrix(kStates, kStates);
        const double leak = 0.02;
        for (std::size_t i = 0; i < kStates; ++i) {
            const std::size_t next = (i + lay.stride) % kStates;
            for (std::size_t k = 0; k < kStates; ++k) s.transitions(i, k) = leak / 3.0;
            s.transitions(i, i) = lay.stay;
            s.transitions(i, next) = 1.0 - lay.stay - leak;
            // keep rows stochastic: the three remaining states share `leak`
        }
        s.validate();
        langs.push_back(std::move(s));
    }
    return langs;
}

std::vector<Sequence> synth_corpus(const SynthLanguageSpec& spec, std::size_t num_sequences, Rng& rng) {
    spec.validate();
    std::vector<Sequence> out;
    out.reserve(num_sequences);
    const std::size_t S = spec.num_states();
    for (std::size_t n = 0; n < num_sequences; ++n) {
        Sequence seq;
        seq.id = n;
        seq.language = spec.id;
        const auto length = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(spec.min_length), static_cast<std::int64_t>(spec.max_length)));
        seq.frames = Matrix(length, spec.dim());
        seq.states.resize(length);
        std::size_t state = rng.uniform_index(S);
        for (std::size_t t = 0; t < length; ++t) {
            if (t > 0) state = rng.categorical(spec.transitions.row(state));
            seq.states[t] = state;
            for (std::size_t j = 0; j < spec.dim(); ++j) {
                const double sd = std::sqrt(spec.variances(state, j));
                seq.frames(t, j) = to_f32(spec.means(state, j) + sd * rng.normal());
            }
        }
        out.push_back(std::move(seq));
    }
    return out;
}

Matrix stack_frames(const std::vector<const Sequence*>& sequences) {
    std::size_t rows = 0;
    std::size_t cols = 0;
    for (const auto* s : sequences) {
        rows += s->frames.rows();
        cols = s->frames.cols();
    }
    Matrix out(rows, cols);
    std::size_t r = 0;
    for (const auto* s : sequences) {
        if (s->frames.cols() != cols) throw DimensionError("stack_frames: sequences differ in frame dimension");
        std::copy(s->frames.data().begin(), s->frames.data().end(), out.row(r).begin());
        r += s->frames.rows();
    }
    return out;
}

namespace {

std::string frame_file(std::size_t id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "seq_%06zu.f32", id);
    return buf;
}

}  // namespace

void save_corpus(const std::filesystem::path& dir, const CorpusManifest& info, const std::vector<Sequence>& seqs) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    auto entries = nlohmann::json::array();
    for (const auto& s : seqs) {
        std::vector<std::uint8_t> bytes(s.frames.size() * sizeof(float));
        for (std::size_t i = 0; i < s.frames.size(); ++i) {
            const float f = static_cast<float>(s.frames.data()[i]);
            std::memcpy(bytes.data() + i * sizeof(float), &f, sizeof(float));
        }
        write_file_atomic(dir / frame_file(s.id), bytes);
        entries.push_back({{"id", s.id},
                           {"language", s.language},
                           {"length", s.frames.rows()},
                           {"split", s.split},
                           {"file", frame_file(s.id)}});
    }
    nlohmann::json manifest = {
        {"language", info.language}, {"name", info.name}, {"dim", info.dim}, {"sequences", entries}};
    write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<Sequence> load_corpus(const std::filesystem::path& dir, CorpusManifest* info) {
    const auto path = dir / "manifest.json";
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus manifest " + path.string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("corpus manifest " + path.string() + ": " + e.what());
    }
    CorpusManifest m;
    m.language = manifest.at("language").get<std::size_t>();
    m.name = manifest.value("name", "");
    m.dim = manifest.at("dim").get<std::size_t>();
    if (info != nullptr) *info = m;

    std::vector<Sequence> seqs;
    for (const auto& e : manifest.at("sequences")) {
        Sequence s;
        s.id = e.at("id").get<std::size_t>();
        s.language = e.at("language").get<std::size_t>();
        s.split = e.at("split").get<std::string>();
        const auto length = e.at("length").get<std::size_t>();
        const auto bytes = read_file_bytes(dir / e.at("file").get<std::string>());
        if (bytes.size() != length * m.dim * sizeof(float))
            throw IoError("frame file for sequence " + std::to_string(s.id) + " has " +
                          std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(length * m.dim * sizeof(float)));
        s.frames = Matrix(length, m.dim);
        for (std::size_t i = 0; i < s.frames.size(); ++i) {
            float f;
            std::memcpy(&f, bytes.data() + i * sizeof(float), sizeof(float));
            s.frames.data()[i] = f;
        }
        seqs.push_back(std::move(s));
    }
    return seqs;
}

std::vector<const Sequence*> select_split(const std::vector<Sequence>& seqs, const std::string& split) {
    std::vector<const Sequence*> out;
    for (const auto& s : seqs)
        if (s.split == split) out.push_back(&s);
    return out;
}

ReplayMixer::ReplayMixer(double ratio, std::vector<Sequence> reservoir, std::vector<const Sequence*> stream, Rng rng)
    : ratio_(ratio), reservoir_(std::move(reservoir)), stream_(std::move(stream)), rng_(rng) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("replay ratio must lie in [0, 1]");
    if (ratio > 0.0 && reservoir_.empty()) throw ConfigError("replay ratio > 0 requires a non-empty reservoir");
    if (ratio < 1.0 && stream_.empty()) throw ConfigError("replay mixer has no new-language data");
    order_.resize(stream_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    cursor_ = order_.size();
}

const Sequence* ReplayMixer::next_new() {
    if (cursor_ >= order_.size()) {
        for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.uniform_index(i)]);
        cursor_ = 0;
    }
    return stream_[order_[cursor_++]];
}

std::vector<BatchItem> ReplayMixer::next_batch(std::size_t batch_size) {
    std::vector<BatchItem> batch;
    batch.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
        if (rng_.bernoulli(ratio_)) {
            const Sequence& s = reservoir_[rng_.uniform_index(reservoir_.size())];
            batch.push_back({&s, s.language, true});
        } else {
            const Sequence* s = next_new();
            batch.push_back({s, s->language, false});
        }
    }
    return batch;
}

std::uint64_t ReplayMixer::reservoir_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& s : reservoir_) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(s.frames.data().data());
        for (std::size_t i = 0; i < s.frames.size() * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
        for (std::size_t label : s.labels) {
            h ^= label;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

std::vector<Sequence> draw_reservoir(const std::vector<const Sequence*>& pool, std::size_t count, Rng& rng) {
    if (count > pool.size())
        throw ConfigError("reservoir of " + std::to_string(count) + " from a pool of " + std::to_string(pool.size()));
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.uniform_index(pool.size() - i)]);
    std::vector<Sequence> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(*pool[idx[i]]);
    return out;
}

}  // namespace lamer
