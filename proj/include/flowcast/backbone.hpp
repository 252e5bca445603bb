// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flowcast/autograd.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

enum class PositionalMode { none, learned };

struct BackboneConfig {
    size_t n_layers = 2;
    size_t n_heads = 4;
    size_t width = 64;       // D
    size_t ffn_width = 256;  // 4 * D
    size_t max_tokens = 512;
    ag::AttnMask attention_mask = ag::AttnMask::causal;
    PositionalMode positional = PositionalMode::none;

    static BackboneConfig tiny() { return BackboneConfig{}; }

    static BackboneConfig gpt2_small() {
        BackboneConfig c;
        c.n_layers = 12;
        c.n_heads = 12;
        c.width = 768;
        c.ffn_width = 4 * 768;
        c.max_tokens = 1024;
        return c;
    }

    void validate() const {
        if (n_heads == 0 || width == 0 || ffn_width == 0 || max_tokens == 0)
            throw ConfigError("backbone: heads, width, ffn width, max tokens must be >= 1");
        if (width % n_heads != 0)
            throw ConfigError("backbone: width " + std::to_string(width) +
                              " not divisible by " + std::to_string(n_heads) + " heads");
    }
};

// Rank-r adapter beside a frozen projection: the extra path is
// (alpha / r) * dropout(h0) . down . up, with `down` zero-initialized and
// `up` Gaussian-initialized so the adapter starts as an exact no-op.
template <typename S>
struct LoRAAdapterT {
    ParameterT<S> down;  // [d x r], zeros
    ParameterT<S> up;    // [r x k], Gaussian std 0.02
    size_t rank = 0;
    S alpha = S(32);
    double dropout_p = 0.1;

    static LoRAAdapterT init(const std::string& name_prefix, size_t d, size_t k, size_t rank,
                             S alpha, double dropout_p, RngStream& rng) {
        if (rank == 0) throw ConfigError("lora: rank must be >= 1");
        if (rank > std::min(d, k))
            throw ConfigError("lora: rank " + std::to_string(rank) + " exceeds min(d, k) = " +
                              std::to_string(std::min(d, k)));
        if (dropout_p < 0.0 || dropout_p >= 1.0)
            throw ConfigError("lora: dropout must be in [0, 1)");
        LoRAAdapterT a;
        a.rank = rank;
        a.alpha = alpha;
        a.dropout_p = dropout_p;
        a.down = ParameterT<S>(name_prefix + ".down", TensorT<S>::zeros({d, rank}));
        a.up = ParameterT<S>(name_prefix + ".up",
                             TensorT<S>::gaussian({rank, k}, rng, static_cast<S>(0.02)));
        return a;
    }
};

// h0 . W0 + b, plus the scaled adapter path when one is attached.
template <typename S>
ag::VarT<S> lora_projection(ag::TapeT<S>& tape, ag::VarT<S> h0, ParameterT<S>& weight,
                            ParameterT<S>& bias, std::optional<LoRAAdapterT<S>>& adapter,
                            bool training, RngStream* rng) {
    ag::VarT<S> base = ag::linear(h0, tape.param(weight), tape.param(bias));
    if (!adapter.has_value()) return base;
    LoRAAdapterT<S>& a = *adapter;
    ag::VarT<S> dropped = ag::dropout(h0, a.dropout_p, training, rng);
    ag::VarT<S> low = ag::matmul(dropped, tape.param(a.down));
    ag::VarT<S> path = ag::matmul(low, tape.param(a.up));
    return ag::add(base, ag::scale(path, a.alpha / static_cast<S>(a.rank)));
}

template <typename S>
struct AttentionT {
    ParameterT<S> q_weight, q_bias, k_weight, k_bias, v_weight, v_bias, out_weight, out_bias;
    std::optional<LoRAAdapterT<S>> q_adapter, k_adapter;
};

template <typename S>
struct TransformerBlockT {
    ParameterT<S> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    AttentionT<S> attn;
    ParameterT<S> fc_in_weight, fc_in_bias, fc_out_weight, fc_out_bias;
};

// Decoder-only transformer with pre-norm blocks. All base weights are frozen
// at construction; only attached adapters are trainable inside the backbone.
template <typename S>
class BackboneT {
public:
    BackboneConfig config;
    std::vector<TransformerBlockT<S>> blocks;
    ParameterT<S> final_gamma, final_beta;
    std::optional<ParameterT<S>> positional;  // [max_tokens x width]

    static BackboneT init(const BackboneConfig& cfg, RngStream& rng) {
        cfg.validate();
        BackboneT b;
        b.config = cfg;
        const size_t d = cfg.width;
        const auto frozen_gauss = [&](const std::string& name, std::vector<size_t> shape,
                                      RngStream& r) {
            ParameterT<S> p(name, TensorT<S>::gaussian(std::move(shape), r, static_cast<S>(0.02)));
            p.trainable = false;
            return p;
        };
        const auto frozen_const = [](const std::string& name, std::vector<size_t> shape, S v) {
            ParameterT<S> p(name, TensorT<S>::full(std::move(shape), v));
            p.trainable = false;
            return p;
        };
        for (size_t i = 0; i < cfg.n_layers; ++i) {
            RngStream lr = rng.fork("block" + std::to_string(i));
            const std::string px = "block." + std::to_string(i) + ".";
            TransformerBlockT<S> blk;
            blk.ln1_gamma = frozen_const(px + "ln1.gamma", {d}, S(1));
            blk.ln1_beta = frozen_const(px + "ln1.beta", {d}, S(0));
            blk.ln2_gamma = frozen_const(px + "ln2.gamma", {d}, S(1));
            blk.ln2_beta = frozen_const(px + "ln2.beta", {d}, S(0));
            blk.attn.q_weight = frozen_gauss(px + "attn.q_proj.weight", {d, d}, lr);
            blk.attn.q_bias = frozen_const(px + "attn.q_proj.bias", {d}, S(0));
            blk.attn.k_weight = frozen_gauss(px + "attn.k_proj.weight", {d, d}, lr);
            blk.attn.k_bias = frozen_const(px + "attn.k_proj.bias", {d}, S(0));
            blk.attn.v_weight = frozen_gauss(px + "attn.v_proj.weight", {d, d}, lr);
            blk.attn.v_bias = frozen_const(px + "attn.v_proj.bias", {d}, S(0));
            blk.attn.out_weight = frozen_gauss(px + "attn.out_proj.weight", {d, d}, lr);
            blk.attn.out_bias = frozen_const(px + "attn.out_proj.bias", {d}, S(0));
            blk.fc_in_weight = frozen_gauss(px + "ffn.fc_in.weight", {d, cfg.ffn_width}, lr);
            blk.fc_in_bias = frozen_const(px + "ffn.fc_in.bias", {cfg.ffn_width}, S(0));
            blk.fc_out_weight = frozen_gauss(px + "ffn.fc_out.weight", {cfg.ffn_width, d}, lr);
            blk.fc_out_bias = frozen_const(px + "ffn.fc_out.bias", {d}, S(0));
            b.blocks.push_back(std::move(blk));
        }
        b.final_gamma = frozen_const("final_norm.gamma", {d}, S(1));
        b.final_beta = frozen_const("final_norm.beta", {d}, S(0));
        if (cfg.positional == PositionalMode::learned) {
            RngStream pr = rng.fork("positional");
            b.positional = frozen_gauss("positional.weight", {cfg.max_tokens, d}, pr);
        }
        return b;
    }

    bool has_lora() const {
        for (const auto& blk : blocks)
            if (blk.attn.q_adapter.has_value() || blk.attn.k_adapter.has_value()) return true;
        return false;
    }

    // Adds one adapter pair (query and key projections) per block.
    void attach_lora(size_t rank, S alpha, double dropout_p, RngStream& rng) {
        if (has_lora()) throw ConfigError("lora adapters already attached");
        const size_t d = config.width;
        for (size_t i = 0; i < blocks.size(); ++i) {
            const std::string px = "block." + std::to_string(i) + ".attn.";
            RngStream qr = rng.fork(px + "q_lora");
            RngStream kr = rng.fork(px + "k_lora");
            blocks[i].attn.q_adapter =
                LoRAAdapterT<S>::init(px + "q_lora", d, d, rank, alpha, dropout_p, qr);
            blocks[i].attn.k_adapter =
                LoRAAdapterT<S>::init(px + "k_lora", d, d, rank, alpha, dropout_p, kr);
        }
    }

    // tokens: [n x width] -> [n x width]
    ag::VarT<S> forward(ag::TapeT<S>& tape, ag::VarT<S> tokens, bool training = false,
                        RngStream* dropout_rng = nullptr) {
        const TensorT<S>& tv = tokens.val();
        if (tv.rank() != 2 || tv.dim(1) != config.width)
            throw ShapeError("backbone: expected [n x " + std::to_string(config.width) +
                             "] tokens, got " + tv.shape_string());
        const size_t n = tv.dim(0);
        if (n > config.max_tokens)
            throw CapacityError("backbone: " + std::to_string(n) + " tokens exceed capacity " +
                                std::to_string(config.max_tokens));
        constexpr S eps = static_cast<S>(1e-5);
        ag::VarT<S> x = tokens;
        if (positional.has_value())
            x = ag::add(x, ag::take_rows(tape.param(*positional), n));
        for (TransformerBlockT<S>& blk : blocks) {
            ag::VarT<S> a = ag::layer_norm(x, tape.param(blk.ln1_gamma), tape.param(blk.ln1_beta),
                                           eps);
            ag::VarT<S> q = lora_projection(tape, a, blk.attn.q_weight, blk.attn.q_bias,
                                            blk.attn.q_adapter, training, dropout_rng);
            ag::VarT<S> k = lora_projection(tape, a, blk.attn.k_weight, blk.attn.k_bias,
                                            blk.attn.k_adapter, training, dropout_rng);
            ag::VarT<S> v = ag::linear(a, tape.param(blk.attn.v_weight),
                                       tape.param(blk.attn.v_bias));
            ag::VarT<S> attn = ag::softmax_attention(
                ag::split_heads(q, config.n_heads), ag::split_heads(k, config.n_heads),
                ag::split_heads(v, config.n_heads), config.attention_mask);
            ag::VarT<S> attn_out = ag::linear(ag::merge_heads(attn), tape.param(blk.attn.out_weight),
                                              tape.param(blk.attn.out_bias));
            x = ag::add(x, attn_out);
            ag::VarT<S> f = ag::layer_norm(x, tape.param(blk.ln2_gamma), tape.param(blk.ln2_beta),
                                           eps);
            ag::VarT<S> hidden = ag::gelu(
                ag::linear(f, tape.param(blk.fc_in_weight), tape.param(blk.fc_in_bias)));
            ag::VarT<S> ffn_out = ag::linear(hidden, tape.param(blk.fc_out_weight),
                                             tape.param(blk.fc_out_bias));
            x = ag::add(x, ffn_out);
        }
        return ag::layer_norm(x, tape.param(final_gamma), tape.param(final_beta), eps);
    }

    std::vector<ParameterT<S>*> parameters() {
        std::vector<ParameterT<S>*> out;
        for (auto& blk : blocks) {
            out.push_back(&blk.ln1_gamma);
            out.push_back(&blk.ln1_beta);
            out.push_back(&blk.ln2_gamma);
            out.push_back(&blk.ln2_beta);
            out.push_back(&blk.attn.q_weight);
            out.push_back(&blk.attn.q_bias);
            out.push_back(&blk.attn.k_weight);
            out.push_back(&blk.attn.k_bias);
            out.push_back(&blk.attn.v_weight);
            out.push_back(&blk.attn.v_bias);
            out.push_back(&blk.attn.out_weight);
            out.push_back(&blk.attn.out_bias);
            if (blk.attn.q_adapter) {
                out.push_back(&blk.attn.q_adapter->down);
                out.push_back(&blk.attn.q_adapter->up);
            }
            if (blk.attn.k_adapter) {
                out.push_back(&blk.attn.k_adapter->down);
                out.push_back(&blk.attn.k_adapter->up);
            }
            out.push_back(&blk.fc_in_weight);
            out.push_back(&blk.fc_in_bias);
            out.push_back(&blk.fc_out_weight);
            out.push_back(&blk.fc_out_bias);
        }
        out.push_back(&final_gamma);
        out.push_back(&final_beta);
        if (positional) out.push_back(&*positional);
        return out;
    }
};

using Backbone = BackboneT<float>;

struct TrainableReport {
    size_t trainable_count = 0;
    size_t total_count = 0;
    double fraction = 0.0;
};

template <typename S>
TrainableReport trainable_report(const std::vector<ParameterT<S>*>& params) {
    TrainableReport r;
    for (const ParameterT<S>* p : params) {
        r.total_count += p->value.numel();
        if (p->trainable) r.trainable_count += p->value.numel();
    }
    r.fraction = r.total_count == 0
                     ? 0.0
                     : static_cast<double>(r.trainable_count) / static_cast<double>(r.total_count);
    return r;
}

}  // namespace flowcast
