// Copyright (c) 2026 The prefmoe authors
// SPDX-License-Identifier: Apache-2.0
//
// PrefMoE reward model: modality embeddings with a shared learned positional
// table, a shared causal intra-modal encoder per stream, a trajectory-level
// soft router, K expert inter-modal cross-attention encoders with per-step
// reward heads, and a convex mixture of expert rewards. Also the per-step
// Markovian MLP baseline.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "prefmoe/rng.hpp"
#include "prefmoe/tensor.hpp"

namespace prefmoe {

struct ModelConfig {
    int state_dim = 0;
    int action_dim = 0;
    int segment_len = 0;   // T: training segment length and positional capacity
    int model_dim = 0;     // d
    int routing_dim = 128; // d_r
    int num_experts = 4;   // K
    int num_heads = 4;
    int intra_layers = 1;
    int router_hidden = 0; // 0 -> routing_dim
    int ff_mult = 4;
    bool tanh_reward_head = false;

    int head_dim() const { return model_dim / num_heads; }
    int router_hidden_dim() const {
        return router_hidden > 0 ? router_hidden : routing_dim;
    }
    void validate() const;
};

struct LinearParams {
    num::Tensor weight;  // [in, out]
    num::Tensor bias;    // [out]
};

struct LayerNormParams {
    num::Tensor gain;
    num::Tensor bias;
};

struct AttentionParams {
    LinearParams query;
    LinearParams key;
    LinearParams value;
    LinearParams out;
};

/// Pre-LN causal block: x + attn(ln(x)), then x + ff(ln(x)).
struct EncoderBlockParams {
    LayerNormParams ln_attn;
    AttentionParams attn;
    LayerNormParams ln_ff;
    LinearParams ff_in;
    LinearParams ff_out;
};

/// One inter-modal expert: two causal cross-attention pathways (state
/// queries attend to actions and vice versa), each with a residual
/// feed-forward block, plus the per-step reward head on the concatenated
/// pathway outputs.
struct ExpertParams {
    LayerNormParams ln_state;
    LayerNormParams ln_action;
    AttentionParams state_from_action;
    AttentionParams action_from_state;
    LayerNormParams ln_ff_state;
    LinearParams ff_state_in;
    LinearParams ff_state_out;
    LayerNormParams ln_ff_action;
    LinearParams ff_action_in;
    LinearParams ff_action_out;
    LinearParams reward_head;  // [2d, 1]
};

struct RouterParams {
    LinearParams hidden;  // W_g1, b_g1
    LinearParams out;     // W_g2, b_g2 (zero-initialized: uniform routing at start)
};

struct ModelParams {
    LinearParams state_embed;
    LinearParams action_embed;
    num::Tensor positional;  // [T, d], shared by both streams
    std::vector<EncoderBlockParams> intra;
    num::Tensor context_weight;  // W_c: [d, d_r], no bias
    LayerNormParams context_norm;
    RouterParams router;
    std::vector<ExpertParams> experts;

    static ModelParams init(const ModelConfig& config, Rng& rng);
};

struct SegmentBatch {
    num::Tensor states;   // B x T x d_s
    num::Tensor actions;  // B x T x d_a

    int batch_size() const { return states.shape().dim(0); }
    int steps() const { return states.shape().dim(1); }
    void validate(const ModelConfig& config) const;
};

struct RewardOutput {
    num::Tensor step_rewards;                      // B x T, mixed
    std::vector<num::Tensor> expert_step_rewards;  // K tensors, each B x T
    num::Tensor routing;                           // B x K, rows on the simplex
    num::Tensor expert_scores;                     // B x K
    num::Tensor score;                             // B (mixture segment score)
};

using ParamVisitor = std::function<void(const std::string&, num::Tensor&)>;

/// Fixed-order traversal of every learnable tensor; the order defines the
/// checkpoint layout and the optimizer slot alignment.
void visit_params(ModelParams& params, const ParamVisitor& fn);
std::vector<num::Tensor*> parameter_list(ModelParams& params);

struct StreamEmbeddings {
    num::Tensor state;   // B x T x d
    num::Tensor action;  // B x T x d
};

StreamEmbeddings embed_streams(const SegmentBatch& batch, const ModelParams& params,
                               const ModelConfig& config);

/// Shared causal self-attention stack; both streams pass through the same
/// weights.
num::Tensor intra_encode(const num::Tensor& x, const ModelParams& params,
                         const ModelConfig& config);

/// c = LayerNorm(W_c * mean_t(xs_t + xa_t)) in R^{d_r}.
num::Tensor pool_context(const num::Tensor& xs, const num::Tensor& xa,
                         const ModelParams& params, const ModelConfig& config);

/// Two-layer MLP + softmax over K experts.
num::Tensor route(const num::Tensor& context, const ModelParams& params,
                  const ModelConfig& config);

struct ExpertStreams {
    num::Tensor state;   // B x T x d
    num::Tensor action;  // B x T x d
};

ExpertStreams expert_cross_attention(const num::Tensor& xs, const num::Tensor& xa,
                                     int expert, const ModelParams& params,
                                     const ModelConfig& config);

num::Tensor expert_reward_head(const num::Tensor& zs, const num::Tensor& za,
                               int expert, const ModelParams& params,
                               const ModelConfig& config);

/// rho = sum_t r_t, per batch row.
num::Tensor segment_score(const num::Tensor& step_rewards);

RewardOutput forward(const SegmentBatch& batch, const ModelParams& params,
                     const ModelConfig& config);

/// Single inter-modal encoder with no router mixing (implicit weight 1).
/// With K=1 and identical parameters, forward() reproduces this bit for bit.
RewardOutput forward_single_expert(const SegmentBatch& batch,
                                   const ModelParams& params,
                                   const ModelConfig& config, int expert = 0);

// --- Markovian per-step baseline ---------------------------------------

struct MarkovConfig {
    int state_dim = 0;
    int action_dim = 0;
    std::vector<int> hidden{64, 64};
    bool tanh_out = false;
    void validate() const;
};

struct MarkovParams {
    std::vector<LinearParams> layers;

    static MarkovParams init(const MarkovConfig& config, Rng& rng);
};

void visit_params(MarkovParams& params, const ParamVisitor& fn);
std::vector<num::Tensor*> parameter_list(MarkovParams& params);

/// Scores each (s_t, a_t) independently; permuting time permutes outputs.
num::Tensor markov_reward(const SegmentBatch& batch, const MarkovParams& params,
                          const MarkovConfig& config);

struct PrefMoeModel {
    ModelConfig config;
    ModelParams params;
};

struct MarkovModel {
    MarkovConfig config;
    MarkovParams params;
};

}  // namespace prefmoe
