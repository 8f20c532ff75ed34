// SPDX-License-Identifier: Apache-2.0
#pragma once

// Toy Transformer encoder with Lamer feed-forward blocks.
//
// frames -> linear projector -> (mask embedding at masked frames) -> + sinusoidal
// positions -> L pre-norm blocks [x += MHSA(LN(x)); x += FFN(LN(x))] -> LN ->
// linear cluster head.
//
// A "backbone" has plain FFNs. lamerify() attaches, per layer, one router
// shared by LoRA experts on both FFN projections (up: d -> d_ff, down:
// d_ff -> d). Experts start with B = 0, so the result is functionally
// identical to the backbone.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lamer/lamer_module.hpp"
#include "lamer/matrix.hpp"
#include "lamer/rng.hpp"

namespace lamer {

/// Layer-aware expert schedule: consecutive groups of `group_size` layers
/// share one expert count.
struct AllocationPlan {
    std::size_t group_size = 2;
    std::vector<std::size_t> counts{2, 4, 6, 8};

    /// Throws ConfigError unless group_size * counts.size() == num_layers and all counts >= 1.
    void validate(std::size_t num_layers) const;
    std::string describe() const;  ///< e.g. "2/4/6/8"
};

/// Per-layer expert counts; layer l gets counts[l / group_size].
std::vector<std::size_t> allocate_experts(std::size_t num_layers, std::size_t group_size,
                                          const std::vector<std::size_t>& counts);

struct EncoderConfig {
    std::size_t input_dim = 16;
    std::size_t num_layers = 8;
    std::size_t model_dim = 32;
    std::size_t ffn_dim = 64;
    std::size_t heads = 4;
    std::size_t num_clusters = 32;
    std::optional<AllocationPlan> allocation;  ///< absent for a plain backbone
    std::size_t lora_rank = 4;
    std::size_t top_k = 2;
    double mask_prob = 0.08;
    std::size_t mask_span = 10;
    bool train_head_in_continual = true;

    void validate() const;
    bool has_lamer() const { return allocation.has_value(); }
    /// Expert count per layer (all zero for a backbone).
    std::vector<std::size_t> experts_per_layer() const;
};

nlohmann::json to_json(const EncoderConfig& cfg);
/// Validating parse; unknown keys and bad values raise ConfigError.
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

struct LayerNormParams {
    Matrix gain;  ///< 1 × d
    Matrix bias;  ///< 1 × d
};

struct AttentionParams {
    Matrix wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FfnParams {
    Matrix w1, b1;  ///< d_ff × d, 1 × d_ff
    Matrix w2, b2;  ///< d × d_ff, 1 × d
    Matrix router;  ///< N × d; 0 × d for a plain FFN
    std::vector<LoraExpert> up;    ///< experts on w1
    std::vector<LoraExpert> down;  ///< experts on w2

    std::size_t num_experts() const { return up.size(); }
};

struct EncoderLayer {
    LayerNormParams ln1;
    AttentionParams attn;
    LayerNormParams ln2;
    FfnParams ffn;
};

struct EncoderModel {
    EncoderConfig config;
    Matrix proj_w, proj_b;  ///< d × input_dim, 1 × d
    Matrix mask_emb;        ///< 1 × d
    std::vector<EncoderLayer> layers;
    LayerNormParams final_ln;
    Matrix head_w, head_b;  ///< C × d, 1 × C

    /// Randomly initialized plain backbone. `config.allocation` is ignored.
    static EncoderModel create_backbone(EncoderConfig config, Rng& rng);
    /// Same structure, every tensor zero. Used as a gradient accumulator.
    EncoderModel zeros_like() const;
};

/// Attaches zero-delta Lamer experts and routers to a backbone.
EncoderModel lamerify(const EncoderModel& backbone, const AllocationPlan& plan, std::size_t rank,
                      std::size_t top_k, Rng& init_rng, Rng& router_rng);

enum class ParamGroup { Projector, MaskEmbedding, Norm, Attention, FfnBase, Expert, Router, Head };
enum class Phase { Pretrain, Continual };

struct NamedParam {
    std::string name;
    Matrix* value = nullptr;
    ParamGroup group = ParamGroup::Projector;
};

struct ConstNamedParam {
    std::string name;
    const Matrix* value = nullptr;
    ParamGroup group = ParamGroup::Projector;
};

/// Every tensor in a fixed order (the checkpoint and optimizer order).
std::vector<NamedParam> named_params(EncoderModel& model);
std::vector<ConstNamedParam> named_params(const EncoderModel& model);

bool is_trainable(ParamGroup group, Phase phase, const EncoderConfig& cfg);

/// Pretrain: all tensors. Continual: experts, routers, and the head when
/// `train_head_in_continual` is set.
std::vector<NamedParam> trainable_parameters(EncoderModel& model, Phase phase);
std::size_t count_parameters(const EncoderModel& model, std::optional<Phase> trainable_in = std::nullopt);

/// FNV-1a over the bytes of every tensor frozen in the continual phase.
std::uint64_t frozen_checksum(const EncoderModel& model);
/// FNV-1a over the bytes of every tensor.
std::uint64_t model_checksum(const EncoderModel& model);

struct MaskSpec {
    std::vector<std::size_t> indices;  ///< sorted, unique
    bool contains(std::size_t t) const;
};

/// Each frame starts a span with probability `mask_prob`; spans of
/// `mask_span` frames are truncated at the sequence end.
MaskSpec sample_mask(std::size_t frames, double mask_prob, std::size_t mask_span, Rng& rng);

struct LayerNormCache {
    Matrix normalized;  ///< x-hat
    std::vector<double> inv_std;
};

struct LayerTrace {
    Matrix input;  ///< residual stream entering the block
    LayerNormCache ln1;
    Matrix n1, q, k, v;
    std::vector<Matrix> attn_probs;  ///< one T × T matrix per head
    Matrix attn_concat;
    Matrix mid;  ///< residual stream after attention
    LayerNormCache ln2;
    Matrix n2;
    std::vector<RouterDecision> decisions;
    ExpertCache up_cache, down_cache;
    Matrix pre_act, act;
};

struct EncoderTrace {
    bool valid = false;
    Matrix frames;
    MaskSpec mask;
    std::vector<LayerTrace> layers;
    Matrix final_input;
    LayerNormCache final_ln;
    Matrix final_norm;
};

struct EncoderOutput {
    Matrix logits;                                     ///< T × C
    std::vector<std::vector<RouterDecision>> routing;  ///< per layer, per token (empty for plain layers)
    std::vector<LoadStats> stats;                      ///< per layer
    EncoderTrace trace;
    /// Residual stream after layer l (1-based); hidden(0) is the embedded input.
    const Matrix& hidden(std::size_t l) const;
};

EncoderOutput encoder_forward(const Matrix& frames, const MaskSpec& mask, const EncoderModel& model);

/// Which gradients to produce. Input gradients always flow through frozen
/// operators; weight gradients of groups not requested are left untouched.
struct GradRequest {
    bool backbone = true;  ///< projector, mask embedding, norms, attention, FFN base
    bool lamer = true;     ///< experts and routers
    bool head = true;
};

GradRequest grad_request_for(Phase phase, const EncoderConfig& cfg);

/// Backward pass for one sequence, accumulating into `grads` (shaped like
/// the model). `grad_mean_prob[l]` is the optional load-balance gradient
/// d loss / d m for layer l, spread over `stat_tokens[l]` tokens.
void encoder_backward(const EncoderModel& model, const EncoderTrace& trace, const Matrix& grad_logits,
                      const std::vector<std::vector<double>>& grad_mean_prob,
                      const std::vector<std::size_t>& stat_tokens, const GradRequest& request,
                      EncoderModel& grads);

/// Output of block `layer` (1-based; 0 = embeddings) without masking.
Matrix encoder_features(const EncoderModel& model, const Matrix& frames, std::size_t layer);

}  // namespace lamer
