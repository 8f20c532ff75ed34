// SPDX-License-Identifier: Apache-2.0
#include "lamer/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "lamer/analyze.hpp"
#include "lamer/checkpoint.hpp"
#include "lamer/data.hpp"
#include "lamer/encoder.hpp"
#include "lamer/errors.hpp"
#include "lamer/log.hpp"
#include "lamer/targets.hpp"
#include "lamer/train.hpp"

#ifndef LAMER_BUILD_ID
#define LAMER_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;

namespace lamer::cli {

namespace {

// ---------------------------------------------------------------- helpers

nlohmann::json read_json_file(const fs::path& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + what + " " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        // e.what() carries "at line L, column C".
        throw ConfigError(what + " " + path.string() + ": " + e.what());
    }
}

void require_exists(const fs::path& path, const std::string& what) {
    if (!fs::exists(path)) throw ConfigError(what + " " + path.string() + " does not exist");
}

fs::path manifest_path_for(const fs::path& out) {
    if (fs::is_directory(out)) return out / "run_manifest.json";
    fs::path p = out;
    p += ".manifest.json";
    return p;
}

/// Collects the RunManifest as a command runs; written once at the end.
class Recorder {
public:
    Recorder(std::string command, std::vector<std::string> args)
        : start_(std::chrono::steady_clock::now()) {
        doc_["command"] = std::move(command);
        doc_["args"] = std::move(args);
        doc_["build_id"] = LAMER_BUILD_ID;
        doc_["inputs"] = nlohmann::json::array();
        doc_["outputs"] = nlohmann::json::array();
        doc_["seeds"] = nlohmann::json::object();
        doc_["started_unix"] = static_cast<std::int64_t>(std::time(nullptr));
    }

    void config(const nlohmann::json& cfg) { doc_["config"] = cfg; }
    void input(const fs::path& p) { doc_["inputs"].push_back(p.string()); }
    void output(const fs::path& p) { doc_["outputs"].push_back(p.string()); }
    void seeds(std::uint64_t root, std::initializer_list<const char*> names) {
        doc_["seeds"]["root"] = root;
        for (const char* n : names) doc_["seeds"][n] = derive_seed(root, n);
    }
    void extra(const std::string& key, const nlohmann::json& v) { doc_[key] = v; }

    void write(const fs::path& out) {
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        doc_["wall_seconds"] = secs;
        const fs::path p = manifest_path_for(out);
        write_text_atomic(p, doc_.dump(2) + "\n");
        log().info("run manifest written to {}", p.string());
    }

private:
    nlohmann::json doc_;
    std::chrono::steady_clock::time_point start_;
};

struct Corpus {
    std::vector<Sequence> sequences;
    std::vector<CorpusManifest> manifests;

    std::vector<const Sequence*> split(const std::string& name) const { return select_split(sequences, name); }
};

Corpus load_corpora(const std::vector<std::string>& dirs, Recorder* rec) {
    Corpus c;
    for (const auto& d : dirs) {
        require_exists(fs::path(d) / "manifest.json", "corpus manifest");
        CorpusManifest info;
        auto seqs = load_corpus(d, &info);
        for (auto& s : seqs) c.sequences.push_back(std::move(s));
        c.manifests.push_back(info);
        if (rec) rec->input(d);
    }
    if (c.sequences.empty()) throw ConfigError("no sequences in the given corpora");
    return c;
}

struct ClusterFile {
    ClusterModel model;
    nlohmann::json source;
    std::optional<EncoderModel> feature_model;
    std::size_t feature_layer = 0;
};

ClusterFile load_cluster_file(const fs::path& path) {
    require_exists(path, "cluster model");
    ClusterFile cf;
    const Checkpoint ckpt = load_checkpoint(path);
    cf.model = load_cluster_model(path);
    cf.source = ckpt.config.value("source", nlohmann::json::object());
    if (cf.source.value("features", "raw") == "encoder") {
        fs::path fm = cf.source.at("model").get<std::string>();
        if (fm.is_relative()) fm = path.parent_path() / fm;
        require_exists(fm, "feature model");
        cf.feature_model = model_from_checkpoint(load_checkpoint(fm));
        cf.feature_layer = cf.source.at("layer").get<std::size_t>();
    }
    return cf;
}

void label(const ClusterFile& cf, std::vector<Sequence>& seqs) {
    assign_labels(cf.model, seqs, cf.feature_model ? &*cf.feature_model : nullptr, cf.feature_layer);
}

std::vector<std::size_t> parse_counts(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t pos = 0;
            const unsigned long v = std::stoul(item, &pos);
            if (pos != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("bad expert count list '" + text + "'");
        }
    }
    if (out.empty()) throw ConfigError("empty expert count list");
    return out;
}

/// Model + training settings resolved from an optional config file; flags
/// applied afterwards take precedence.
struct Setup {
    EncoderConfig encoder;
    TrainConfig train;
    LamerLayout layout;
};

Setup load_setup(const std::string& path) {
    Setup s;
    if (path.empty()) return s;
    const auto j = read_json_file(path, "config file");
    if (!j.is_object()) throw ConfigError("config file " + path + ": expected a JSON object");
    for (const auto& [key, _] : j.items())
        if (key != "encoder" && key != "train" && key != "layout")
            throw ConfigError("config file " + path + ": unknown section '" + key + "'");
    if (j.contains("encoder")) s.encoder = encoder_config_from_json(j.at("encoder"));
    if (j.contains("train")) s.train = train_config_from_json(j.at("train"));
    if (j.contains("layout")) {
        const auto& l = j.at("layout");
        try {
            s.layout.plan.group_size = l.value("group_size", s.layout.plan.group_size);
            s.layout.plan.counts = l.value("counts", s.layout.plan.counts);
            s.layout.rank = l.value("rank", s.layout.rank);
            s.layout.top_k = l.value("top_k", s.layout.top_k);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config file " + path + ": layout: " + e.what());
        }
    }
    return s;
}

nlohmann::json layout_json(const LamerLayout& l) {
    return {{"group_size", l.plan.group_size}, {"counts", l.plan.counts}, {"rank", l.rank}, {"top_k", l.top_k}};
}

EncoderModel load_model(const fs::path& path, Recorder& rec, nlohmann::json* meta = nullptr) {
    require_exists(path, "model checkpoint");
    rec.input(path);
    const Checkpoint ckpt = load_checkpoint(path);
    if (meta) *meta = ckpt.config;
    return model_from_checkpoint(ckpt);
}

std::map<std::size_t, std::vector<const Sequence*>> by_language(const std::vector<const Sequence*>& seqs) {
    std::map<std::size_t, std::vector<const Sequence*>> out;
    for (const auto* s : seqs) out[s->language].push_back(s);
    return out;
}

/// Training loop wrapper shared by train and continue: JSONL step log,
/// periodic checkpoints, last-good retention on divergence.
struct TrainOutputs {
    fs::path out;
    nlohmann::json extra;
    std::size_t interval = 0;
    Dtype dtype = Dtype::F64;
};

fs::path sibling(const fs::path& out, const std::string& suffix) {
    fs::path p = out;
    p += suffix;
    return p;
}

TrainHooks make_hooks(const TrainOutputs& o, std::ofstream& log_file, std::optional<fs::path>& last_good) {
    TrainHooks hooks;
    hooks.on_step = [&o, &log_file, &last_good](const StepLog& entry, const EncoderModel& model) {
        log_file << entry.to_json().dump() << '\n';
        if (o.interval > 0 && (entry.step + 1) % o.interval == 0) {
            nlohmann::json extra = o.extra;
            extra["step"] = entry.step + 1;
            const fs::path p = sibling(o.out, ".last");
            save_checkpoint(model_to_checkpoint(model, extra, 0, o.dtype), p);
            last_good = p;
        }
    };
    return hooks;
}

void finish_training(const TrainOutputs& o, const TrainResult& result, Recorder& rec) {
    nlohmann::json extra = o.extra;
    extra["step"] = result.log.size();
    save_checkpoint(model_to_checkpoint(result.model, extra, result.rng_state, o.dtype), o.out);
    rec.output(o.out);
    rec.output(sibling(o.out, ".log.jsonl"));
    if (!result.log.empty()) {
        const auto& last = result.log.back();
        log().info("finished {} steps: L={:.6f} L_mask={:.6f}", result.log.size(), last.loss, last.loss_mask);
    }
}

Dtype parse_dtype(const std::string& s) {
    if (s == "f64") return Dtype::F64;
    if (s == "f32") return Dtype::F32;
    throw ConfigError("unknown dtype '" + s + "' (expected f64 or f32)");
}

// ---------------------------------------------------------------- commands

struct Common {
    std::string out;
    std::uint64_t seed = 0;
    std::string config;
};

int cmd_synth_data(const Common& c, const std::string& spec_path, std::optional<std::size_t> train_n,
                   std::optional<std::size_t> heldout_n, Recorder& rec) {
    nlohmann::json spec = spec_path.empty() ? default_synth_spec() : read_json_file(spec_path, "spec file");
    if (!spec.is_object()) throw ConfigError("spec file " + spec_path + ": expected a JSON object");
    if (!spec_path.empty()) rec.input(spec_path);
    for (const auto& [key, _] : spec.items())
        if (key != "dim" && key != "language_seed" && key != "languages" && key != "train_sequences" &&
            key != "heldout_sequences")
            throw ConfigError("spec file " + spec_path + ": unknown field '" + key + "'");
    const auto defaults = default_synth_spec();
    for (const auto& [key, value] : defaults.items())
        if (!spec.contains(key)) spec[key] = value;
    if (train_n) spec["train_sequences"] = *train_n;
    if (heldout_n) spec["heldout_sequences"] = *heldout_n;

    std::vector<SynthLanguageSpec> langs;
    std::size_t n_train = 0, n_heldout = 0;
    try {
        n_train = spec.at("train_sequences").get<std::size_t>();
        n_heldout = spec.at("heldout_sequences").get<std::size_t>();
        if (spec.contains("languages")) {
            for (const auto& l : spec.at("languages")) langs.push_back(language_from_json(l));
        } else {
            langs = default_languages(spec.at("dim").get<std::size_t>(), spec.at("language_seed").get<std::uint64_t>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("spec file: ") + e.what());
    }
    if (langs.empty()) throw ConfigError("spec file: no languages");
    for (const auto& l : langs) l.validate();

    nlohmann::json resolved = spec;
    resolved["languages"] = nlohmann::json::array();
    for (const auto& l : langs) resolved["languages"].push_back(to_json(l));
    rec.config(resolved);
    rec.seeds(c.seed, {});

    const fs::path out = c.out;
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
    for (const auto& l : langs) {
        Rng rng(derive_seed(c.seed, "data-" + l.name));
        auto seqs = synth_corpus(l, n_train + n_heldout, rng);
        for (std::size_t i = 0; i < seqs.size(); ++i) seqs[i].split = i < n_train ? "train" : "heldout";
        const fs::path dir = out / l.name;
        save_corpus(dir, {l.id, l.name, l.dim()}, seqs);
        rec.output(dir);
        log().info("language {} ({}): {} sequences written to {}", l.name, l.id, seqs.size(), dir.string());
    }
    rec.write(out);
    return kExitOk;
}

int cmd_cluster(const Common& c, const std::vector<std::string>& corpora, const MiniBatchOptions& opts,
                std::size_t restarts, const std::string& features, const std::string& feature_model,
                std::optional<std::size_t> feature_layer, const std::string& labels_dir, Recorder& rec) {
    if (restarts == 0) throw ConfigError("--restarts must be at least 1");
    Corpus corpus = load_corpora(corpora, &rec);
    std::optional<EncoderModel> fm;
    nlohmann::json source = {{"features", features}};
    std::size_t layer = 0;
    if (features == "encoder") {
        if (feature_model.empty()) throw ConfigError("--features encoder requires --feature-model");
        fm = load_model(feature_model, rec);
        layer = feature_layer.value_or(fm->config.num_layers / 2 + 1);
        if (layer > fm->config.num_layers) throw ConfigError("--feature-layer exceeds the model depth");
        // Relative to the cluster checkpoint, so a relocated tree reproduces the same bytes.
        const fs::path base = fs::absolute(fs::path(c.out)).parent_path();
        source["model"] = fs::absolute(feature_model).lexically_normal().lexically_relative(base).generic_string();
        source["layer"] = layer;
    } else if (features != "raw") {
        throw ConfigError("unknown --features '" + features + "' (expected raw or encoder)");
    }
    // Corpora by identity, not location.
    source["corpora"] = nlohmann::json::array();
    for (const auto& m : corpus.manifests) source["corpora"].push_back({{"name", m.name}, {"language", m.language}});

    const EncoderModel* fmp = fm ? &*fm : nullptr;
    const Matrix train = cluster_features(corpus.split("train"), fmp, layer);
    auto heldout_seqs = corpus.split("heldout");
    const Matrix heldout = heldout_seqs.empty() ? train : cluster_features(heldout_seqs, fmp, layer);
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < restarts; ++i) seeds.push_back(derive_seed(c.seed, "cluster-" + std::to_string(i)));

    rec.config({{"clusters", opts.clusters},
                {"batch_size", opts.batch_size},
                {"iterations", opts.iterations},
                {"restarts", restarts},
                {"source", source}});
    rec.seeds(c.seed, {});
    rec.extra("restart_seeds", seeds);

    const SeedSelection sel = fit_best_of_seeds(train, heldout, opts, seeds);
    source["heldout_inertia"] = sel.heldout_inertia;
    save_cluster_model(sel.best, source, c.out);
    rec.output(c.out);
    log().info("kept restart seed {} with held-out inertia {:.6g}", sel.best_seed,
               *std::min_element(sel.heldout_inertia.begin(), sel.heldout_inertia.end()));

    if (!labels_dir.empty()) {
        ClusterFile cf{sel.best, source, fm, layer};
        label(cf, corpus.sequences);
        for (std::size_t i = 0; i < corpus.manifests.size(); ++i) {
            std::vector<std::uint32_t> labels;
            for (const auto& s : corpus.sequences)
                if (s.language == corpus.manifests[i].language)
                    for (std::size_t z : s.labels) labels.push_back(static_cast<std::uint32_t>(z));
            const fs::path p = fs::path(labels_dir) / (corpus.manifests[i].name + ".u32");
            fs::create_directories(p.parent_path());
            save_labels(labels, opts.clusters, source, p);
            rec.output(p);
        }
    }
    rec.write(c.out);
    return kExitOk;
}

int train_with_recovery(const std::function<TrainResult(const TrainHooks&)>& body, const TrainOutputs& o,
                        Recorder& rec) {
    const fs::path log_path = sibling(o.out, ".log.jsonl");
    if (!o.out.parent_path().empty()) fs::create_directories(o.out.parent_path());
    std::ofstream log_file(log_path, std::ios::trunc);
    if (!log_file) throw IoError("cannot write " + log_path.string());
    std::optional<fs::path> last_good;
    try {
        const TrainResult result = body(make_hooks(o, log_file, last_good));
        log_file.close();
        finish_training(o, result, rec);
    } catch (const DivergenceError& e) {
        log_file.close();
        if (last_good) log().error("last good checkpoint retained at {}", last_good->string());
        rec.extra("failure", e.what());
        rec.write(o.out);
        throw;
    }
    rec.write(o.out);
    return kExitOk;
}

int cmd_train(const Common& c, Setup setup, const std::vector<std::string>& corpora, const std::string& clusters,
              const TrainOutputs& outputs, Recorder& rec) {
    setup.train.phase = Phase::Pretrain;
    setup.train.seed = c.seed;
    setup.train.validate();
    setup.encoder.allocation.reset();
    Corpus corpus = load_corpora(corpora, &rec);
    rec.input(clusters);
    const ClusterFile cf = load_cluster_file(clusters);
    setup.encoder.num_clusters = cf.model.num_clusters();
    setup.encoder.input_dim = corpus.manifests.front().dim;
    setup.encoder.validate();
    label(cf, corpus.sequences);

    rec.config({{"encoder", to_json(setup.encoder)}, {"train", to_json(setup.train)}});
    rec.seeds(c.seed, {"data", "mask", "init"});

    Rng init(derive_seed(c.seed, "init"));
    EncoderModel backbone = EncoderModel::create_backbone(setup.encoder, init);
    TrainOutputs o = outputs;
    o.extra = {{"phase", "pretrain"},
               {"train", to_json(setup.train)},
               {"cluster_fingerprint", cf.model.fingerprint()}};
    const auto data = corpus.split("train");
    return train_with_recovery(
        [&](const TrainHooks& hooks) { return pretrain(setup.train, std::move(backbone), data, hooks); }, o, rec);
}

int cmd_continue(const Common& c, Setup setup, const std::string& model_path, const std::vector<std::string>& corpora,
                 const std::vector<std::string>& reservoir_dirs, std::size_t reservoir_size,
                 const std::string& clusters, const TrainOutputs& outputs, Recorder& rec) {
    setup.train.phase = Phase::Continual;
    setup.train.seed = c.seed;
    setup.train.validate();
    setup.layout.plan.validate(setup.encoder.num_layers);

    nlohmann::json meta;
    EncoderModel model = load_model(model_path, rec, &meta);
    setup.layout.plan.validate(model.config.num_layers);
    model.config.train_head_in_continual = setup.encoder.train_head_in_continual;
    rec.input(clusters);
    const ClusterFile cf = load_cluster_file(clusters);
    if (meta.contains("cluster_fingerprint") && meta.at("cluster_fingerprint").get<std::uint64_t>() != cf.model.fingerprint())
        log().warn("backbone was trained against a different cluster model");
    if (cf.model.num_clusters() != model.config.num_clusters)
        throw ConfigError("cluster model has " + std::to_string(cf.model.num_clusters()) +
                          " clusters, model head predicts " + std::to_string(model.config.num_clusters));

    Corpus corpus = load_corpora(corpora, &rec);
    label(cf, corpus.sequences);
    Corpus old = load_corpora(reservoir_dirs, &rec);
    Rng reservoir_rng(derive_seed(c.seed, "reservoir"));
    std::vector<Sequence> reservoir = draw_reservoir(old.split("train"), reservoir_size, reservoir_rng);
    label(cf, reservoir);
    old.sequences.clear();

    rec.config({{"encoder", to_json(model.config)},
                {"train", to_json(setup.train)},
                {"layout", layout_json(setup.layout)},
                {"reservoir_size", reservoir_size}});
    rec.seeds(c.seed, {"data", "mask", "init", "router", "reservoir"});

    TrainOutputs o = outputs;
    o.extra = {{"phase", "continual"},
               {"train", to_json(setup.train)},
               {"layout", layout_json(setup.layout)},
               {"cluster_fingerprint", cf.model.fingerprint()},
               {"backbone", meta.value("train", nlohmann::json::object())}};
    const auto data = corpus.split("train");
    return train_with_recovery(
        [&](const TrainHooks& hooks) {
            return continual_train(setup.train, std::move(model), setup.layout, data, std::move(reservoir), hooks);
        },
        o, rec);
}

int cmd_eval(const Common& c, const std::string& model_path, const std::vector<std::string>& corpora,
             const std::string& clusters, const std::string& split, Recorder& rec) {
    nlohmann::json meta;
    const EncoderModel model = load_model(model_path, rec, &meta);
    rec.input(clusters);
    const ClusterFile cf = load_cluster_file(clusters);
    Corpus corpus = load_corpora(corpora, &rec);
    label(cf, corpus.sequences);
    rec.config({{"split", split}});
    rec.seeds(c.seed, {});
    nlohmann::json report = {{"split", split}, {"eval_seed", c.seed}, {"languages", nlohmann::json::array()}};
    for (const auto& [lang, seqs] : by_language(corpus.split(split)))
        report["languages"].push_back({{"language", lang}, {"accuracy", masked_accuracy(model, seqs, c.seed)}});
    write_text_atomic(c.out, report.dump(2) + "\n");
    rec.output(c.out);
    rec.write(c.out);
    return kExitOk;
}

struct AnalyzeArgs {
    std::string mode;
    std::string model;
    std::string before;
    std::vector<std::string> corpora;
    std::string clusters;
    std::string split = "heldout";
    std::string stat = "weights";
    std::optional<std::size_t> layer;
    std::size_t probe_steps = 500;
    double probe_lr = 1e-2;
};

int cmd_analyze(const Common& c, const AnalyzeArgs& a, Recorder& rec) {
    nlohmann::json meta;
    const EncoderModel model = load_model(a.model, rec, &meta);
    Corpus corpus = load_corpora(a.corpora, &rec);
    rec.seeds(c.seed, {});
    std::string text;
    if (a.mode == "heatmap" || a.mode == "divergence") {
        ActivationStat stat;
        if (a.stat == "weights") stat = ActivationStat::Weights;
        else if (a.stat == "probs") stat = ActivationStat::Probabilities;
        else throw ConfigError("unknown --stat '" + a.stat + "' (expected weights or probs)");
        rec.config({{"mode", a.mode}, {"split", a.split}, {"stat", a.stat}});
        const auto profile = activation_profile(model, corpus.split(a.split), stat);
        text = a.mode == "heatmap" ? heatmap_csv(profile) : divergence_csv(depth_specialization(profile));
    } else if (a.mode == "forgetting") {
        if (a.before.empty()) throw ConfigError("analyze forgetting requires --before");
        if (a.clusters.empty()) throw ConfigError("analyze forgetting requires --clusters");
        nlohmann::json before_meta;
        const EncoderModel before = load_model(a.before, rec, &before_meta);
        rec.input(a.clusters);
        const ClusterFile cf = load_cluster_file(a.clusters);
        const std::uint64_t fp = cf.model.fingerprint();
        for (const auto* m : {&meta, &before_meta})
            if (m->value("cluster_fingerprint", fp) != fp)
                throw ConfigError("analyze forgetting: a model was trained against a different cluster model");
        label(cf, corpus.sequences);
        rec.config({{"mode", a.mode}, {"split", a.split}});
        const auto report = forgetting_report(before, before_meta.value("cluster_fingerprint", fp), model,
                                              meta.value("cluster_fingerprint", fp), by_language(corpus.split(a.split)),
                                              c.seed);
        text = report.to_json().dump(2) + "\n";
    } else if (a.mode == "lid") {
        LidProbeOptions opts;
        opts.layer = a.layer;
        opts.steps = a.probe_steps;
        opts.lr = a.probe_lr;
        rec.config({{"mode", a.mode}, {"steps", opts.steps}, {"lr", opts.lr}, {"layer", a.layer ? nlohmann::json(*a.layer) : nlohmann::json()}});
        const auto result = lid_probe(model, corpus.split("train"), corpus.split(a.split), opts);
        text = result.to_json().dump(2) + "\n";
    } else {
        throw ConfigError("unknown analysis '" + a.mode + "' (expected heatmap, divergence, forgetting or lid)");
    }
    write_text_atomic(c.out, text);
    rec.output(c.out);
    rec.write(c.out);
    return kExitOk;
}

int cmd_params(const Common& c, const Setup& setup, Recorder& rec) {
    EncoderConfig toy = setup.encoder;
    if (!toy.allocation) toy.allocation = setup.layout.plan;
    toy.lora_rank = setup.layout.rank;
    toy.top_k = setup.layout.top_k;
    toy.validate();
    rec.config({{"encoder", to_json(toy)}});
    const ParamReport large = param_report(hubert_large_descriptor());
    const ParamReport small = param_report(toy_descriptor(toy));
    nlohmann::json doc = {{"hubert_large", large.to_json()}, {"toy", small.to_json()}};
    doc["toy"]["implemented_hypothesis"] = injection_name(Injection::BothSharedRouter);
    write_text_atomic(c.out, doc.dump(2) + "\n");
    rec.output(c.out);
    rec.write(c.out);
    const auto& best = large.hypotheses[large.best];
    log().info("closest hypothesis: {} at {:.4f}% (gap {:.4f} points)", injection_name(best.injection),
               100.0 * best.ratio, 100.0 * large.best_gap);
    return kExitOk;
}

std::string rebase(const std::string& arg, const std::vector<std::pair<std::string, std::string>>& rules) {
    for (const auto& [from, to] : rules)
        if (arg.compare(0, from.size(), from) == 0) return to + arg.substr(from.size());
    return arg;
}

int dispatch(const std::vector<std::string>& args);

int cmd_rerun(const std::string& manifest, const std::vector<std::string>& rebase_rules) {
    const auto doc = read_json_file(manifest, "run manifest");
    std::vector<std::pair<std::string, std::string>> rules;
    for (const auto& r : rebase_rules) {
        const auto eq = r.find('=');
        if (eq == std::string::npos) throw ConfigError("--rebase expects FROM=TO, got '" + r + "'");
        rules.emplace_back(r.substr(0, eq), r.substr(eq + 1));
    }
    std::vector<std::string> args;
    try {
        for (const auto& a : doc.at("args")) args.push_back(rebase(a.get<std::string>(), rules));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("run manifest " + manifest + ": " + e.what());
    }
    if (!args.empty() && args.front() == "rerun") throw ConfigError("run manifest records a rerun");
    return dispatch(args);
}

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"Layer-aware mixture of LoRA experts laboratory"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    Common common;
    auto add_common = [&common](CLI::App* sub, bool with_config) {
        sub->add_option("--out", common.out, "output path")->required();
        sub->add_option("--seed", common.seed, "root seed");
        if (with_config) sub->add_option("--config", common.config, "JSON config file")->check(CLI::ExistingFile);
    };

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "generate synthetic language corpora");
    std::string spec_path;
    std::optional<std::size_t> train_n, heldout_n;
    synth->add_option("--spec", spec_path, "language spec JSON (default: three built-in languages)");
    synth->add_option("--train-sequences", train_n, "training sequences per language");
    synth->add_option("--heldout-sequences", heldout_n, "held-out sequences per language");
    add_common(synth, false);

    // cluster
    auto* cluster = app.add_subcommand("cluster", "fit the k-means pseudo-label model");
    std::vector<std::string> corpora;
    MiniBatchOptions mb;
    std::size_t restarts = 3;
    std::string features = "raw", feature_model, labels_dir;
    std::optional<std::size_t> feature_layer;
    cluster->add_option("--corpus", corpora, "corpus directory (repeatable)")->required();
    cluster->add_option("--clusters", mb.clusters, "number of clusters");
    cluster->add_option("--batch-size", mb.batch_size, "frames per mini-batch");
    cluster->add_option("--iterations", mb.iterations, "mini-batch iterations");
    cluster->add_option("--restarts", restarts, "k-means++ seeds; best held-out inertia is kept");
    cluster->add_option("--features", features, "raw or encoder");
    cluster->add_option("--feature-model", feature_model, "checkpoint providing encoder features");
    cluster->add_option("--feature-layer", feature_layer, "block output used as features (default L/2+1)");
    cluster->add_option("--labels-out", labels_dir, "also write per-corpus label files here");
    add_common(cluster, false);

    // train / continue share training flags
    std::string clusters_path, model_path;
    std::optional<std::size_t> steps, batch_size, interval;
    std::optional<double> lr, lb_coef, replay_ratio;
    std::string dtype = "f64";
    auto add_train_flags = [&](CLI::App* sub) {
        sub->add_option("--corpus", corpora, "corpus directory (repeatable)")->required();
        sub->add_option("--clusters", clusters_path, "cluster model checkpoint")->required();
        sub->add_option("--steps", steps, "optimizer steps");
        sub->add_option("--batch-size", batch_size, "sequences per batch");
        sub->add_option("--lr", lr, "peak learning rate");
        sub->add_option("--checkpoint-interval", interval, "steps between <out>.last checkpoints");
        sub->add_option("--dtype", dtype, "checkpoint payload: f64 or f32");
        add_common(sub, true);
    };
    auto* train = app.add_subcommand("train", "pretrain a backbone with masked cluster prediction");
    add_train_flags(train);

    auto* cont = app.add_subcommand("continue", "continual training of Lamer experts with replay");
    std::vector<std::string> reservoir_dirs;
    std::size_t reservoir_size = 24;
    std::optional<std::string> plan_text;
    std::optional<std::size_t> rank, top_k;
    std::optional<bool> train_head;
    add_train_flags(cont);
    cont->add_option("--model", model_path, "backbone checkpoint")->required();
    cont->add_option("--replay-reservoir", reservoir_dirs, "old-language corpus directory (repeatable)")->required();
    cont->add_option("--replay-ratio", replay_ratio, "probability that a batch slot is replayed")->required();
    cont->add_option("--reservoir-size", reservoir_size, "sequences drawn once into the reservoir");
    cont->add_option("--lb-coef", lb_coef, "load-balance coefficient");
    cont->add_option("--plan", plan_text, "experts per layer group, e.g. 2,4,6,8");
    cont->add_option("--rank", rank, "LoRA rank");
    cont->add_option("--top-k", top_k, "experts per token");
    cont->add_option("--train-head", train_head, "update the prediction head");

    // eval
    auto* eval = app.add_subcommand("eval", "masked-prediction accuracy per language");
    std::string split = "heldout";
    eval->add_option("--model", model_path, "checkpoint")->required();
    eval->add_option("--corpus", corpora, "corpus directory (repeatable)")->required();
    eval->add_option("--clusters", clusters_path, "cluster model checkpoint")->required();
    eval->add_option("--split", split, "train or heldout");
    add_common(eval, false);

    // analyze
    auto* analyze = app.add_subcommand("analyze", "routing, forgetting and probe analyses");
    AnalyzeArgs aa;
    analyze->add_option("mode", aa.mode, "heatmap | divergence | forgetting | lid")
        ->required()
        ->check(CLI::IsMember({"heatmap", "divergence", "forgetting", "lid"}));
    analyze->add_option("--model", aa.model, "checkpoint")->required();
    analyze->add_option("--corpus", aa.corpora, "corpus directory (repeatable)")->required();
    analyze->add_option("--before", aa.before, "earlier checkpoint (forgetting)");
    analyze->add_option("--clusters", aa.clusters, "cluster model checkpoint (forgetting)");
    analyze->add_option("--split", aa.split, "evaluation split");
    analyze->add_option("--stat", aa.stat, "weights or probs (heatmap, divergence)");
    analyze->add_option("--layer", aa.layer, "probe layer (lid); default L-2");
    analyze->add_option("--probe-steps", aa.probe_steps, "probe optimizer steps (lid)");
    analyze->add_option("--probe-lr", aa.probe_lr, "probe learning rate (lid)");
    add_common(analyze, false);

    // params
    auto* params = app.add_subcommand("params", "trainable-parameter accounting");
    add_common(params, true);

    // rerun
    auto* rerun = app.add_subcommand("rerun", "repeat a run from its manifest");
    std::string manifest;
    std::vector<std::string> rebase_rules;
    rerun->add_option("--manifest", manifest, "run manifest JSON")->required()->check(CLI::ExistingFile);
    rerun->add_option("--rebase", rebase_rules, "FROM=TO path prefix rewrite (repeatable)");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    if (rerun->parsed()) return cmd_rerun(manifest, rebase_rules);

    CLI::App* sub = app.get_subcommands().front();
    Recorder rec(sub->get_name(), args);
    if (synth->parsed()) return cmd_synth_data(common, spec_path, train_n, heldout_n, rec);
    if (cluster->parsed())
        return cmd_cluster(common, corpora, mb, restarts, features, feature_model, feature_layer, labels_dir, rec);
    if (eval->parsed()) return cmd_eval(common, model_path, corpora, clusters_path, split, rec);
    if (analyze->parsed()) {
        if (!common.config.empty()) rec.input(common.config);
        return cmd_analyze(common, aa, rec);
    }

    Setup setup = load_setup(common.config);
    if (!common.config.empty()) rec.input(common.config);
    if (steps) setup.train.steps = *steps;
    if (batch_size) setup.train.batch_size = *batch_size;
    if (lr) setup.train.peak_lr = *lr;
    if (interval) setup.train.checkpoint_interval = *interval;
    if (lb_coef) setup.train.lb_coef = *lb_coef;
    if (replay_ratio) setup.train.replay_ratio = *replay_ratio;
    if (plan_text) setup.layout.plan.counts = parse_counts(*plan_text);
    if (rank) setup.layout.rank = *rank;
    if (top_k) setup.layout.top_k = *top_k;
    if (train_head) setup.encoder.train_head_in_continual = *train_head;
    if (params->parsed()) return cmd_params(common, setup, rec);

    TrainOutputs o;
    o.out = common.out;
    o.interval = setup.train.checkpoint_interval;
    o.dtype = parse_dtype(dtype);
    if (train->parsed()) return cmd_train(common, setup, corpora, clusters_path, o, rec);
    return cmd_continue(common, setup, model_path, corpora, reservoir_dirs, reservoir_size, clusters_path, o, rec);
}

}  // namespace

nlohmann::json default_synth_spec() {
    return {{"dim", 16}, {"language_seed", 7}, {"train_sequences", 160}, {"heldout_sequences", 40}};
}

int run(const std::vector<std::string>& args) {
    configure_log_from_env();
    try {
        return dispatch(args);
    } catch (const ConfigError& e) {
        log().error("{}", e.what());
        return kExitUsage;
    } catch (const FormatError& e) {
        log().error("{}", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        log().error("{}", e.what());
        return kExitRuntime;
    }
}

}  // namespace lamer::cli
