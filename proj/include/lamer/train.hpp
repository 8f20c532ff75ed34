// SPDX-License-Identifier: Apache-2.0
#pragma once

// Two-phase protocol: backbone pretraining with masked cluster prediction, then
// continual training of Lamer experts and routers on new languages with
// replay. Objective: L = L_mask + lambda * mean over Lamer layers of L_lb.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lamer/checkpoint.hpp"
#include "lamer/data.hpp"
#include "lamer/encoder.hpp"
#include "lamer/targets.hpp"

namespace lamer {

struct TrainConfig {
    Phase phase = Phase::Pretrain;
    std::size_t steps = 3000;
    std::size_t batch_size = 8;
    double peak_lr = 1.5e-3;
    double warmup_fraction = 0.08;
    double lb_coef = 1e-3;  ///< lambda
    double replay_ratio = 0.18;
    std::uint64_t seed = 0;  ///< root seed; split into data/mask/init/router streams
    std::size_t checkpoint_interval = 0;  ///< 0 disables periodic checkpoints

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);
std::string phase_name(Phase phase);
Phase phase_from_name(const std::string& name);

/// Where the Lamer experts go when a backbone enters the continual phase.
struct LamerLayout {
    AllocationPlan plan;
    std::size_t rank = 4;
    std::size_t top_k = 2;
};

/// One sequence's contribution to the loss.
struct LossInput {
    const Matrix* logits = nullptr;
    const std::vector<std::size_t>* labels = nullptr;
    const MaskSpec* mask = nullptr;
};

struct CompositeLoss {
    bool skipped = false;  ///< no masked frames in the batch
    double total = 0.0;
    double masked = 0.0;
    double lb_mean = 0.0;
    std::vector<double> lb_per_layer;  ///< one entry per layer; 0 for plain layers
    std::size_t masked_frames = 0;
    std::vector<Matrix> grad_logits;                  ///< per sequence
    std::vector<std::vector<double>> grad_mean_prob;  ///< per layer, already scaled by lambda / #Lamer layers
    std::vector<std::size_t> stat_tokens;             ///< per layer
};

/// L_mask averages cross-entropy over all masked frames of the batch; the
/// load-balance term uses `layer_stats` accumulated over every token.
CompositeLoss composite_loss(const std::vector<LossInput>& batch, const std::vector<LoadStats>& layer_stats,
                             double lb_coef);
/// Single-sequence form.
CompositeLoss composite_loss(const Matrix& logits, const std::vector<std::size_t>& labels, const MaskSpec& mask,
                             const std::vector<LoadStats>& layer_stats, double lb_coef);

struct StepLog {
    std::size_t step = 0;
    bool skipped = false;
    double loss = 0.0;
    double loss_mask = 0.0;
    double loss_lb = 0.0;  ///< mean over Lamer layers
    std::vector<double> lb_per_layer;
    double lr = 0.0;
    double replay_fraction = 0.0;
    std::vector<std::vector<double>> dispatch;  ///< f per Lamer layer

    nlohmann::json to_json() const;
};

struct TrainHooks {
    std::function<void(const StepLog&, const EncoderModel&)> on_step;
    /// Runs after each optimizer update; tests use it to tamper with the model.
    std::function<void(EncoderModel&)> after_update;
};

struct TrainResult {
    EncoderModel model;
    std::vector<StepLog> log;
    std::uint64_t rng_state = 0;
};

/// Phase 1: all parameters, masked loss only. `corpus` sequences need labels.
/// Throws DivergenceError on a non-finite loss.
TrainResult pretrain(const TrainConfig& cfg, EncoderModel backbone, const std::vector<const Sequence*>& corpus,
                     const TrainHooks& hooks = {});

/// Phase 2: attaches zero-delta experts (unless the model already has them),
/// freezes the backbone and trains experts, routers and optionally the head on
/// `new_data` mixed with `reservoir`. Throws InternalError if a frozen tensor
/// changes.
TrainResult continual_train(const TrainConfig& cfg, EncoderModel model, const LamerLayout& layout,
                            const std::vector<const Sequence*>& new_data, std::vector<Sequence> reservoir,
                            const TrainHooks& hooks = {});

/// Fills `labels` of each sequence from the cluster model. Features are the
/// raw frames, or the output of `feature_layer` of `feature_model` when given.
void assign_labels(const ClusterModel& clusters, std::vector<Sequence>& sequences,
                   const EncoderModel* feature_model = nullptr, std::size_t feature_layer = 0);
Matrix cluster_features(const std::vector<const Sequence*>& sequences, const EncoderModel* feature_model,
                        std::size_t feature_layer);

/// Masked-prediction accuracy over `sequences` with masks drawn from `seed`
/// (identical masks for every model evaluated with the same seed).
double masked_accuracy(const EncoderModel& model, const std::vector<const Sequence*>& sequences, std::uint64_t seed);

Checkpoint model_to_checkpoint(const EncoderModel& model, const nlohmann::json& extra, std::uint64_t rng_state,
                               Dtype dtype = Dtype::F64);
EncoderModel model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace lamer
