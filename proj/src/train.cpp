// SPDX-License-Identifier: Apache-2.0
#include "lamer/train.hpp"

#include <cmath>

#include "lamer/errors.hpp"
#include "lamer/log.hpp"
#include "lamer/numerics.hpp"
#include "lamer/optim.hpp"

namespace lamer {

void TrainConfig::validate() const {
    if (steps < 1 && phase == Phase::Continual) throw ConfigError("train: continual phase needs steps >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
    if (!(lb_coef >= 0.0)) throw ConfigError("train: load-balance coefficient must be >= 0");
    if (!(peak_lr >= 0.0)) throw ConfigError("train: peak_lr must be >= 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0))
        throw ConfigError("train: warmup_fraction must lie in [0, 1]");
    if (!(replay_ratio >= 0.0 && replay_ratio <= 1.0)) throw ConfigError("train: replay_ratio must lie in [0, 1]");
}

std::string phase_name(Phase phase) { return phase == Phase::Pretrain ? "pretrain" : "continual"; }

Phase phase_from_name(const std::string& name) {
    if (name == "pretrain") return Phase::Pretrain;
    if (name == "continual") return Phase::Continual;
    throw ConfigError("unknown phase '" + name + "' (expected pretrain or continual)");
}

nlohmann::json to_json(const TrainConfig& cfg) {
    return {{"phase", phase_name(cfg.phase)},
            {"steps", cfg.steps},
            {"batch_size", cfg.batch_size},
            {"peak_lr", cfg.peak_lr},
            {"warmup_fraction", cfg.warmup_fraction},
            {"lb_coef", cfg.lb_coef},
            {"replay_ratio", cfg.replay_ratio},
            {"seed", cfg.seed},
            {"checkpoint_interval", cfg.checkpoint_interval}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    try {
        if (j.contains("phase")) cfg.phase = phase_from_name(j.at("phase").get<std::string>());
        cfg.steps = j.value("steps", cfg.steps);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.peak_lr = j.value("peak_lr", cfg.peak_lr);
        cfg.warmup_fraction = j.value("warmup_fraction", cfg.warmup_fraction);
        cfg.lb_coef = j.value("lb_coef", cfg.lb_coef);
        cfg.replay_ratio = j.value("replay_ratio", cfg.replay_ratio);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.checkpoint_interval = j.value("checkpoint_interval", cfg.checkpoint_interval);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------- loss

CompositeLoss composite_loss(const std::vector<LossInput>& batch, const std::vector<LoadStats>& layer_stats,
                             double lb_coef) {
    CompositeLoss out;
    for (const auto& item : batch) {
        if (item.labels->size() != item.logits->rows())
            throw DimensionError("composite_loss: " + std::to_string(item.labels->size()) + " labels for " +
                                 std::to_string(item.logits->rows()) + " frames");
        out.masked_frames += item.mask->indices.size();
    }

    const std::size_t layers = layer_stats.size();
    out.lb_per_layer.assign(layers, 0.0);
    out.grad_mean_prob.assign(layers, {});
    out.stat_tokens.assign(layers, 0);
    std::vector<LoadBalance> lbs(layers);
    std::size_t lamer_layers = 0;
    for (std::size_t l = 0; l < layers; ++l) {
        if (layer_stats[l].num_experts() == 0 || layer_stats[l].tokens == 0) continue;
        lbs[l] = load_balance_loss(layer_stats[l]);
        out.lb_per_layer[l] = lbs[l].loss;
        out.stat_tokens[l] = layer_stats[l].tokens;
        out.lb_mean += lbs[l].loss;
        ++lamer_layers;
    }
    if (lamer_layers > 0) out.lb_mean /= static_cast<double>(lamer_layers);
    if (lamer_layers > 0 && lb_coef > 0.0) {
        const double scale = lb_coef / static_cast<double>(lamer_layers);
        for (std::size_t l = 0; l < layers; ++l) {
            if (lbs[l].grad_mean_prob.empty()) continue;
            out.grad_mean_prob[l] = lbs[l].grad_mean_prob;
            for (double& g : out.grad_mean_prob[l]) g *= scale;
        }
    }

    if (out.masked_frames == 0) {
        out.skipped = true;
        return out;
    }

    const double inv = 1.0 / static_cast<double>(out.masked_frames);
    double total_nll = 0.0;
    for (const auto& item : batch) {
        const Matrix& logits = *item.logits;
        Matrix grad(logits.rows(), logits.cols());
        for (std::size_t t : item.mask->indices) {
            const std::size_t y = (*item.labels)[t];
            if (y >= logits.cols())
                throw IndexError("composite_loss: label " + std::to_string(y) + " outside [0, " +
                                 std::to_string(logits.cols()) + ")");
            const auto p = softmax(logits.row(t));
            total_nll -= std::log(p[y]);
            auto g = grad.row(t);
            for (std::size_t c = 0; c < p.size(); ++c) g[c] = p[c] * inv;
            g[y] -= inv;
        }
        out.grad_logits.push_back(std::move(grad));
    }
    out.masked = total_nll * inv;
    out.total = out.masked + lb_coef * out.lb_mean;
    return out;
}

CompositeLoss composite_loss(const Matrix& logits, const std::vector<std::size_t>& labels, const MaskSpec& mask,
                             const std::vector<LoadStats>& layer_stats, double lb_coef) {
    return composite_loss(std::vector<LossInput>{{&logits, &labels, &mask}}, layer_stats, lb_coef);
}

nlohmann::json StepLog::to_json() const {
    nlohmann::json j = {{"step", step},       {"skipped", skipped},   {"L", loss},
                        {"L_mask", loss_mask}, {"L_lb", lb_per_layer}, {"L_lb_mean", loss_lb},
                        {"lr", lr},            {"replay_fraction", replay_fraction}};
    if (!dispatch.empty()) j["dispatch"] = dispatch;
    return j;
}

// ---------------------------------------------------------------- loops

namespace {

TrainResult run_loop(const TrainConfig& cfg, EncoderModel model, Phase phase, ReplayMixer& mixer,
                     const TrainHooks& hooks) {
    TrainResult result;
    const GradRequest request = grad_request_for(phase, model.config);
    const std::uint64_t frozen = frozen_checksum(model);
    const std::uint64_t reservoir = mixer.reservoir_checksum();

    EncoderModel grads = model.zeros_like();
    auto params = trainable_parameters(model, phase);
    auto grad_params = trainable_parameters(grads, phase);
    std::vector<Matrix*> param_ptrs, grad_ptrs;
    for (auto& p : params) param_ptrs.push_back(p.value);
    for (auto& g : grad_params) grad_ptrs.push_back(g.value);
    std::vector<const Matrix*> grad_cptrs(grad_ptrs.begin(), grad_ptrs.end());

    OptimState opt(LrSchedule::with_warmup_fraction(cfg.peak_lr, cfg.warmup_fraction, cfg.steps));
    Rng mask_rng(derive_seed(cfg.seed, "mask"));

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto batch = mixer.next_batch(cfg.batch_size);
        std::vector<EncoderOutput> outputs;
        std::vector<MaskSpec> masks;
        outputs.reserve(batch.size());
        masks.reserve(batch.size());
        std::vector<LoadStats> layer_stats(model.layers.size());
        std::size_t replayed = 0;
        for (const auto& item : batch) {
            const Sequence& seq = *item.sequence;
            if (seq.labels.size() != seq.frames.rows())
                throw StateError("training sequence " + std::to_string(seq.id) + " has no cluster labels");
            masks.push_back(sample_mask(seq.frames.rows(), model.config.mask_prob, model.config.mask_span, mask_rng));
            outputs.push_back(encoder_forward(seq.frames, masks.back(), model));
            for (std::size_t l = 0; l < layer_stats.size(); ++l) {
                const auto& s = outputs.back().stats[l];
                if (s.num_experts() == 0) continue;
                if (layer_stats[l].num_experts() == 0) layer_stats[l] = LoadStats(s.num_experts(), s.top_k);
                layer_stats[l].merge(s);
            }
            replayed += item.is_replay ? 1 : 0;
        }
        std::vector<LossInput> inputs;
        for (std::size_t i = 0; i < batch.size(); ++i)
            inputs.push_back({&outputs[i].logits, &batch[i].sequence->labels, &masks[i]});
        const CompositeLoss loss = composite_loss(inputs, layer_stats, phase == Phase::Continual ? cfg.lb_coef : 0.0);

        StepLog entry;
        entry.step = step;
        entry.skipped = loss.skipped;
        entry.loss = loss.total;
        entry.loss_mask = loss.masked;
        entry.loss_lb = loss.lb_mean;
        entry.lr = opt.current_lr();
        entry.replay_fraction = static_cast<double>(replayed) / static_cast<double>(batch.size());
        for (const auto& s : layer_stats)
            if (s.num_experts() > 0) entry.dispatch.push_back(s.dispatch_fraction());
        for (std::size_t l = 0; l < layer_stats.size(); ++l)
            if (layer_stats[l].num_experts() > 0) entry.lb_per_layer.push_back(loss.lb_per_layer[l]);

        if (loss.skipped) {
            log().warn("step {}: batch has no masked frames, skipped", step);
        } else {
            if (!std::isfinite(loss.total))
                throw DivergenceError("non-finite loss at step " + std::to_string(step) +
                                      " (L_mask=" + std::to_string(loss.masked) + ")");
            for (Matrix* g : grad_ptrs) g->set_zero();
            for (std::size_t i = 0; i < batch.size(); ++i)
                encoder_backward(model, outputs[i].trace, loss.grad_logits[i], loss.grad_mean_prob, loss.stat_tokens,
                                 request, grads);
            optim_step(opt, param_ptrs, grad_cptrs);
        }

        if (hooks.after_update) hooks.after_update(model);
        if (phase == Phase::Continual && frozen_checksum(model) != frozen)
            throw InternalError("frozen backbone tensor changed at step " + std::to_string(step));
        if (mixer.reservoir_checksum() != reservoir)
            throw InternalError("replay reservoir changed at step " + std::to_string(step));
        log().debug("step {} L={:.6f} L_mask={:.6f} L_lb={:.6f} lr={:.3e}", step, entry.loss, entry.loss_mask,
                    entry.loss_lb, entry.lr);
        if (hooks.on_step) hooks.on_step(entry, model);
        result.log.push_back(std::move(entry));
    }
    result.rng_state = mask_rng.state();
    result.model = std::move(model);
    return result;
}

}  // namespace

TrainResult pretrain(const TrainConfig& cfg, EncoderModel backbone, const std::vector<const Sequence*>& corpus,
                     const TrainHooks& hooks) {
    cfg.validate();
    if (cfg.phase != Phase::Pretrain) throw ConfigError("pretrain: config phase must be pretrain");
    if (backbone.config.has_lamer()) throw ConfigError("pretrain: expects a backbone without Lamer experts");
    if (cfg.steps > 0 && corpus.empty()) throw StateError("pretrain: empty corpus");
    if (cfg.steps == 0) return {std::move(backbone), {}, derive_seed(cfg.seed, "mask")};
    ReplayMixer mixer(0.0, {}, corpus, Rng(derive_seed(cfg.seed, "data")));
    return run_loop(cfg, std::move(backbone), Phase::Pretrain, mixer, hooks);
}

TrainResult continual_train(const TrainConfig& cfg, EncoderModel model, const LamerLayout& layout,
                            const std::vector<const Sequence*>& new_data, std::vector<Sequence> reservoir,
                            const TrainHooks& hooks) {
    cfg.validate();
    if (cfg.phase != Phase::Continual) throw ConfigError("continual_train: config phase must be continual");
    if (!model.config.has_lamer()) {
        Rng init_rng(derive_seed(cfg.seed, "init"));
        Rng router_rng(derive_seed(cfg.seed, "router"));
        model = lamerify(model, layout.plan, layout.rank, layout.top_k, init_rng, router_rng);
    }
    ReplayMixer mixer(cfg.replay_ratio, std::move(reservoir), new_data, Rng(derive_seed(cfg.seed, "data")));
    return run_loop(cfg, std::move(model), Phase::Continual, mixer, hooks);
}

// ---------------------------------------------------------------- labels and evaluation

Matrix cluster_features(const std::vector<const Sequence*>& sequences, const EncoderModel* feature_model,
                        std::size_t feature_layer) {
    if (feature_model == nullptr) return stack_frames(sequences);
    std::vector<Sequence> feats;
    feats.reserve(sequences.size());
    for (const auto* s : sequences) {
        Sequence f;
        f.frames = encoder_features(*feature_model, s->frames, feature_layer);
        feats.push_back(std::move(f));
    }
    std::vector<const Sequence*> ptrs;
    for (const auto& f : feats) ptrs.push_back(&f);
    return stack_frames(ptrs);
}

void assign_labels(const ClusterModel& clusters, std::vector<Sequence>& sequences, const EncoderModel* feature_model,
                   std::size_t feature_layer) {
    for (auto& s : sequences) {
        const Matrix feats =
            feature_model == nullptr ? s.frames : encoder_features(*feature_model, s.frames, feature_layer);
        s.labels = assign(clusters, feats);
    }
}

double masked_accuracy(const EncoderModel& model, const std::vector<const Sequence*>& sequences, std::uint64_t seed) {
    std::size_t correct = 0;
    std::size_t total = 0;
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        const Sequence& s = *sequences[i];
        if (s.labels.size() != s.frames.rows())
            throw StateError("masked_accuracy: sequence " + std::to_string(s.id) + " has no labels");
        Rng rng(derive_seed(seed, "eval-mask-" + std::to_string(i)));
        const MaskSpec mask = sample_mask(s.frames.rows(), model.config.mask_prob, model.config.mask_span, rng);
        if (mask.indices.empty()) continue;
        const auto out = encoder_forward(s.frames, mask, model);
        for (std::size_t t : mask.indices) {
            correct += argmax(out.logits.row(t)) == s.labels[t] ? 1 : 0;
            ++total;
        }
    }
    if (total == 0) throw StateError("masked_accuracy: no masked frames to evaluate");
    return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------- checkpoints

Checkpoint model_to_checkpoint(const EncoderModel& model, const nlohmann::json& extra, std::uint64_t rng_state,
                               Dtype dtype) {
    Checkpoint ckpt;
    ckpt.config = extra.is_object() ? extra : nlohmann::json::object();
    ckpt.config["kind"] = "encoder";
    ckpt.config["encoder"] = to_json(model.config);
    for (const auto& p : named_params(model)) ckpt.tensors.push_back(Tensor::from_matrix(p.name, *p.value, dtype));
    ckpt.rng_state = rng_state;
    return ckpt;
}

EncoderModel model_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.config.value("kind", "") != "encoder") throw FormatError("checkpoint does not hold an encoder model");
    const EncoderConfig cfg = encoder_config_from_json(ckpt.config.at("encoder"));
    Rng scratch(0);
    EncoderModel model = EncoderModel::create_backbone(cfg, scratch);
    if (cfg.allocation) model = lamerify(model, *cfg.allocation, cfg.lora_rank, cfg.top_k, scratch, scratch);
    model.config = cfg;
    auto params = named_params(model);
    if (params.size() != ckpt.tensors.size())
        throw FormatError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                          std::to_string(params.size()));
    for (auto& p : params) {
        Matrix m = ckpt.tensor(p.name).to_matrix();
        if (!m.same_shape(*p.value))
            throw FormatError("tensor '" + p.name + "' has shape " + shape_str(m) + ", expected " +
                              shape_str(*p.value));
        *p.value = std::move(m);
    }
    return model;
}

}  // namespace lamer
