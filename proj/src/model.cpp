// Copyright (c) 2026 The prefmoe authors
// SPDX-License-Identifier: Apache-2.0

#include "prefmoe/model.hpp"

#include <cmath>

namespace prefmoe {

using num::Shape;
using num::Tensor;

void ModelConfig::validate() const {
    if (state_dim < 1 || action_dim < 1) {
        throw ShapeError("ModelConfig: state_dim and action_dim must be >= 1");
    }
    if (segment_len < 1) {
        throw ShapeError("ModelConfig: segment_len must be >= 1");
    }
    if (num_experts < 1) {
        throw ShapeError("ModelConfig: num_experts must be >= 1");
    }
    if (model_dim < 2 || num_heads < 1 || model_dim % num_heads != 0) {
        throw ShapeError("ModelConfig: model_dim must be a positive multiple of num_heads");
    }
    if (routing_dim < 2) {
        throw ShapeError("ModelConfig: routing_dim must be >= 2");
    }
    if (intra_layers < 1 || ff_mult < 1) {
        throw ShapeError("ModelConfig: intra_layers and ff_mult must be >= 1");
    }
}

void SegmentBatch::validate(const ModelConfig& config) const {
    if (states.shape().rank() != 3 || actions.shape().rank() != 3) {
        throw ShapeError("SegmentBatch: streams must be rank 3 (B x T x feature)");
    }
    if (states.shape().dim(0) != actions.shape().dim(0) ||
        states.shape().dim(1) != actions.shape().dim(1)) {
        throw ShapeError("SegmentBatch: state and action streams are not aligned");
    }
    if (states.shape().dim(2) != config.state_dim ||
        actions.shape().dim(2) != config.action_dim) {
        throw ShapeError("SegmentBatch: feature extents do not match the config");
    }
    if (steps() > config.segment_len) {
        throw ShapeError("SegmentBatch: segment length " + std::to_string(steps()) +
                         " exceeds positional table length " +
                         std::to_string(config.segment_len));
    }
}

namespace {

LinearParams linear_init(int in, int out, Rng& rng) {
    LinearParams p;
    p.weight = Tensor::randn(Shape{in, out}, rng, 1.0 / std::sqrt(in));
    p.weight.set_requires_grad(true);
    p.bias = Tensor::zeros(Shape{out});
    p.bias.set_requires_grad(true);
    return p;
}

LayerNormParams norm_init(int d) {
    LayerNormParams p;
    p.gain = Tensor::full(Shape{d}, 1.0);
    p.gain.set_requires_grad(true);
    p.bias = Tensor::zeros(Shape{d});
    p.bias.set_requires_grad(true);
    return p;
}

AttentionParams attention_init(int d, Rng& rng) {
    AttentionParams p;
    p.query = linear_init(d, d, rng);
    p.key = linear_init(d, d, rng);
    p.value = linear_init(d, d, rng);
    p.out = linear_init(d, d, rng);
    return p;
}

EncoderBlockParams block_init(int d, int ff_mult, Rng& rng) {
    EncoderBlockParams p;
    p.ln_attn = norm_init(d);
    p.attn = attention_init(d, rng);
    p.ln_ff = norm_init(d);
    p.ff_in = linear_init(d, d * ff_mult, rng);
    p.ff_out = linear_init(d * ff_mult, d, rng);
    return p;
}

ExpertParams expert_init(int d, int ff_mult, Rng& rng) {
    ExpertParams p;
    p.ln_state = norm_init(d);
    p.ln_action = norm_init(d);
    p.state_from_action = attention_init(d, rng);
    p.action_from_state = attention_init(d, rng);
    p.ln_ff_state = norm_init(d);
    p.ff_state_in = linear_init(d, d * ff_mult, rng);
    p.ff_state_out = linear_init(d * ff_mult, d, rng);
    p.ln_ff_action = norm_init(d);
    p.ff_action_in = linear_init(d, d * ff_mult, rng);
    p.ff_action_out = linear_init(d * ff_mult, d, rng);
    p.reward_head = linear_init(2 * d, 1, rng);
    return p;
}

Tensor linear(const Tensor& x, const LinearParams& p) {
    return num::add(num::matmul(x, p.weight), p.bias);
}

/// Multi-head scaled dot-product attention with an additive causal mask.
/// Heads live in contiguous feature slices, so rank never exceeds 3.
Tensor attention(const Tensor& q_in, const Tensor& kv_in, const AttentionParams& p,
                 int n_heads, const Tensor& mask) {
    const Tensor q = linear(q_in, p.query);
    const Tensor k = linear(kv_in, p.key);
    const Tensor v = linear(kv_in, p.value);
    const int d = q.shape().dim(2);
    const int dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor merged;
    for (int h = 0; h < n_heads; ++h) {
        const Tensor qh = num::slice_last(q, h * dh, dh);
        const Tensor kh = num::slice_last(k, h * dh, dh);
        const Tensor vh = num::slice_last(v, h * dh, dh);
        Tensor scores = num::scalar_mul(num::matmul(qh, num::transpose_last2(kh)), scale);
        scores = num::add(scores, mask);
        const Tensor weights = num::softmax_stable(scores, 2);
        const Tensor zh = num::matmul(weights, vh);
        merged = h == 0 ? zh : num::concat(merged, zh, 2);
    }
    return linear(merged, p.out);
}

Tensor feed_forward(const Tensor& x, const LinearParams& in, const LinearParams& out) {
    return linear(num::relu(linear(x, in)), out);
}

void visit_linear(const std::string& prefix, LinearParams& p, const ParamVisitor& fn) {
    fn(prefix + ".weight", p.weight);
    fn(prefix + ".bias", p.bias);
}

void visit_norm(const std::string& prefix, LayerNormParams& p, const ParamVisitor& fn) {
    fn(prefix + ".gain", p.gain);
    fn(prefix + ".bias", p.bias);
}

void visit_attention(const std::string& prefix, AttentionParams& p,
                     const ParamVisitor& fn) {
    visit_linear(prefix + ".query", p.query, fn);
    visit_linear(prefix + ".key", p.key, fn);
    visit_linear(prefix + ".value", p.value, fn);
    visit_linear(prefix + ".out", p.out, fn);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, Rng& rng) {
    config.validate();
    ModelParams p;
    p.state_embed = linear_init(config.state_dim, config.model_dim, rng);
    p.action_embed = linear_init(config.action_dim, config.model_dim, rng);
    p.positional =
        Tensor::randn(Shape{config.segment_len, config.model_dim}, rng, 0.02);
    p.positional.set_requires_grad(true);
    for (int l = 0; l < config.intra_layers; ++l) {
        p.intra.push_back(block_init(config.model_dim, config.ff_mult, rng));
    }
    p.context_weight = Tensor::randn(Shape{config.model_dim, config.routing_dim},
                                     rng, 1.0 / std::sqrt(config.model_dim));
    p.context_weight.set_requires_grad(true);
    p.context_norm = norm_init(config.routing_dim);
    p.router.hidden = linear_init(config.routing_dim, config.router_hidden_dim(), rng);
    // Zero output layer: training starts at uniform routing.
    p.router.out.weight =
        Tensor::zeros(Shape{config.router_hidden_dim(), config.num_experts});
    p.router.out.weight.set_requires_grad(true);
    p.router.out.bias = Tensor::zeros(Shape{config.num_experts});
    p.router.out.bias.set_requires_grad(true);
    for (int k = 0; k < config.num_experts; ++k) {
        p.experts.push_back(expert_init(config.model_dim, config.ff_mult, rng));
    }
    return p;
}

void visit_params(ModelParams& p, const ParamVisitor& fn) {
    visit_linear("state_embed", p.state_embed, fn);
    visit_linear("action_embed", p.action_embed, fn);
    fn("positional", p.positional);
    for (std::size_t l = 0; l < p.intra.size(); ++l) {
        const std::string prefix = "intra." + std::to_string(l);
        visit_norm(prefix + ".ln_attn", p.intra[l].ln_attn, fn);
        visit_attention(prefix + ".attn", p.intra[l].attn, fn);
        visit_norm(prefix + ".ln_ff", p.intra[l].ln_ff, fn);
        visit_linear(prefix + ".ff_in", p.intra[l].ff_in, fn);
        visit_linear(prefix + ".ff_out", p.intra[l].ff_out, fn);
    }
    fn("context_weight", p.context_weight);
    visit_norm("context_norm", p.context_norm, fn);
    visit_linear("router.hidden", p.router.hidden, fn);
    visit_linear("router.out", p.router.out, fn);
    for (std::size_t k = 0; k < p.experts.size(); ++k) {
        const std::string prefix = "experts." + std::to_string(k);
        ExpertParams& e = p.experts[k];
        visit_norm(prefix + ".ln_state", e.ln_state, fn);
        visit_norm(prefix + ".ln_action", e.ln_action, fn);
        visit_attention(prefix + ".state_from_action", e.state_from_action, fn);
        visit_attention(prefix + ".action_from_state", e.action_from_state, fn);
        visit_norm(prefix + ".ln_ff_state", e.ln_ff_state, fn);
        visit_linear(prefix + ".ff_state_in", e.ff_state_in, fn);
        visit_linear(prefix + ".ff_state_out", e.ff_state_out, fn);
        visit_norm(prefix + ".ln_ff_action", e.ln_ff_action, fn);
        visit_linear(prefix + ".ff_action_in", e.ff_action_in, fn);
        visit_linear(prefix + ".ff_action_out", e.ff_action_out, fn);
        visit_linear(prefix + ".reward_head", e.reward_head, fn);
    }
}

std::vector<num::Tensor*> parameter_list(ModelParams& p) {
    std::vector<num::Tensor*> out;
    visit_params(p, [&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
}

StreamEmbeddings embed_streams(const SegmentBatch& batch, const ModelParams& params,
                               const ModelConfig& config) {
    batch.validate(config);
    const int steps = batch.steps();
    const Tensor table = steps == config.segment_len
                             ? params.positional
                             : num::slice_rows(params.positional, 0, steps);
    StreamEmbeddings e;
    e.state = num::add(linear(batch.states, params.state_embed), table);
    e.action = num::add(linear(batch.actions, params.action_embed), table);
    return e;
}

Tensor intra_encode(const Tensor& x, const ModelParams& params,
                    const ModelConfig& config) {
    const Tensor mask = num::causal_mask(x.shape().dim(1));
    Tensor h = x;
    for (const EncoderBlockParams& block : params.intra) {
        const Tensor normed = num::layer_norm(h, block.ln_attn.gain, block.ln_attn.bias);
        h = num::add(h, attention(normed, normed, block.attn, config.num_heads, mask));
        const Tensor normed2 = num::layer_norm(h, block.ln_ff.gain, block.ln_ff.bias);
        h = num::add(h, feed_forward(normed2, block.ff_in, block.ff_out));
    }
    return h;
}

Tensor pool_context(const Tensor& xs, const Tensor& xa, const ModelParams& params,
                    const ModelConfig& config) {
    (void)config;
    const Tensor pooled = num::mean_axis(num::add(xs, xa), 1);  // B x d
    const Tensor projected = num::matmul(pooled, params.context_weight);
    return num::layer_norm(projected, params.context_norm.gain,
                           params.context_norm.bias);
}

Tensor route(const Tensor& context, const ModelParams& params,
             const ModelConfig& config) {
    (void)config;
    const Tensor hidden = num::relu(linear(context, params.router.hidden));
    const Tensor logits = linear(hidden, params.router.out);
    return num::softmax_stable(logits, 1);
}

ExpertStreams expert_cross_attention(const Tensor& xs, const Tensor& xa, int expert,
                                     const ModelParams& params,
                                     const ModelConfig& config) {
    if (expert < 0 || expert >= static_cast<int>(params.experts.size())) {
        throw ShapeError("expert_cross_attention: expert index out of range");
    }
    const ExpertParams& e = params.experts[static_cast<std::size_t>(expert)];
    const Tensor mask = num::causal_mask(xs.shape().dim(1));
    const Tensor s_norm = num::layer_norm(xs, e.ln_state.gain, e.ln_state.bias);
    const Tensor a_norm = num::layer_norm(xa, e.ln_action.gain, e.ln_action.bias);

    ExpertStreams z;
    z.state = num::add(
        xs, attention(s_norm, a_norm, e.state_from_action, config.num_heads, mask));
    const Tensor zs_norm =
        num::layer_norm(z.state, e.ln_ff_state.gain, e.ln_ff_state.bias);
    z.state = num::add(z.state, feed_forward(zs_norm, e.ff_state_in, e.ff_state_out));

    z.action = num::add(
        xa, attention(a_norm, s_norm, e.action_from_state, config.num_heads, mask));
    const Tensor za_norm =
        num::layer_norm(z.action, e.ln_ff_action.gain, e.ln_ff_action.bias);
    z.action =
        num::add(z.action, feed_forward(za_norm, e.ff_action_in, e.ff_action_out));
    return z;
}

Tensor expert_reward_head(const Tensor& zs, const Tensor& za, int expert,
                          const ModelParams& params, const ModelConfig& config) {
    const ExpertParams& e = params.experts.at(static_cast<std::size_t>(expert));
    const Tensor joint = num::concat(zs, za, 2);  // B x T x 2d
    Tensor r = linear(joint, e.reward_head);      // B x T x 1
    r = num::reshape(r, Shape{zs.shape().dim(0), zs.shape().dim(1)});
    if (config.tanh_reward_head) {
        r = num::tanh(r);
    }
    return r;
}

Tensor segment_score(const Tensor& step_rewards) {
    return num::sum_axis(step_rewards, 1);
}

namespace {

RewardOutput forward_impl(const SegmentBatch& batch, const ModelParams& params,
                          const ModelConfig& config, bool mixture, int only_expert) {
    const StreamEmbeddings embedded = embed_streams(batch, params, config);
    const Tensor xs = intra_encode(embedded.state, params, config);
    const Tensor xa = intra_encode(embedded.action, params, config);
    const int batch_size = batch.batch_size();

    RewardOutput out;
    if (mixture) {
        const Tensor context = pool_context(xs, xa, params, config);
        out.routing = route(context, params, config);
    } else {
        out.routing = Tensor::full(Shape{batch_size, 1}, 1.0);
    }

    const int first = mixture ? 0 : only_expert;
    const int last = mixture ? config.num_experts : only_expert + 1;
    std::vector<Tensor> scores;
    for (int k = first; k < last; ++k) {
        const ExpertStreams z = expert_cross_attention(xs, xa, k, params, config);
        const Tensor rk = expert_reward_head(z.state, z.action, k, params, config);
        out.expert_step_rewards.push_back(rk);
        scores.push_back(num::reshape(segment_score(rk), Shape{batch_size, 1}));
    }
    out.expert_scores = scores[0];
    for (std::size_t i = 1; i < scores.size(); ++i) {
        out.expert_scores = num::concat(out.expert_scores, scores[i], 1);
    }

    // r_t = sum_k g_k * r^k_t ; rho = sum_k g_k * rho^k.
    for (std::size_t i = 0; i < out.expert_step_rewards.size(); ++i) {
        const Tensor gk =
            num::slice_last(out.routing, static_cast<int>(i), 1);  // B x 1
        const Tensor term = num::mul(out.expert_step_rewards[i], gk);
        out.step_rewards = i == 0 ? term : num::add(out.step_rewards, term);
    }
    out.score = num::sum_axis(num::mul(out.routing, out.expert_scores), 1);
    return out;
}

}  // namespace

RewardOutput forward(const SegmentBatch& batch, const ModelParams& params,
                     const ModelConfig& config) {
    return forward_impl(batch, params, config, true, 0);
}

RewardOutput forward_single_expert(const SegmentBatch& batch,
                                   const ModelParams& params,
                                   const ModelConfig& config, int expert) {
    return forward_impl(batch, params, config, false, expert);
}

// --- Markovian baseline -------------------------------------------------

void MarkovConfig::validate() const {
    if (state_dim < 1 || action_dim < 1) {
        throw ShapeError("MarkovConfig: state_dim and action_dim must be >= 1");
    }
    for (int h : hidden) {
        if (h < 1) {
            throw ShapeError("MarkovConfig: hidden extents must be >= 1");
        }
    }
}

MarkovParams MarkovParams::init(const MarkovConfig& config, Rng& rng) {
    config.validate();
    MarkovParams p;
    int in = config.state_dim + config.action_dim;
    for (int h : config.hidden) {
        p.layers.push_back(linear_init(in, h, rng));
        in = h;
    }
    p.layers.push_back(linear_init(in, 1, rng));
    return p;
}

void visit_params(MarkovParams& p, const ParamVisitor& fn) {
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        visit_linear("layers." + std::to_string(l), p.layers[l], fn);
    }
}

std::vector<num::Tensor*> parameter_list(MarkovParams& p) {
    std::vector<num::Tensor*> out;
    visit_params(p, [&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
}

num::Tensor markov_reward(const SegmentBatch& batch, const MarkovParams& params,
                          const MarkovConfig& config) {
    if (batch.states.shape().dim(2) != config.state_dim ||
        batch.actions.shape().dim(2) != config.action_dim) {
        throw ShapeError("markov_reward: feature extents do not match the config");
    }
    Tensor h = num::concat(batch.states, batch.actions, 2);
    for (std::size_t l = 0; l + 1 < params.layers.size(); ++l) {
        h = num::relu(linear(h, params.layers[l]));
    }
    h = linear(h, params.layers.back());
    h = num::reshape(h, Shape{batch.batch_size(), batch.steps()});
    if (config.tanh_out) {
        h = num::tanh(h);
    }
    return h;
}

}  // namespace prefmoe
