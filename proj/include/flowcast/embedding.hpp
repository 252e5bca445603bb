// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "flowcast/autograd.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/graph.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

enum class ChannelReduce { last, mean };

struct EmbeddingConfig {
    size_t channels = 64;      // F
    size_t input_steps = 12;   // T
    size_t width = 64;         // D, backbone token width
    size_t kernel_size = 3;    // K, odd
    ChannelReduce reduce = ChannelReduce::last;

    void validate() const {
        if (channels == 0) throw ConfigError("embedding: channels must be >= 1");
        if (kernel_size % 2 == 0) throw ConfigError("embedding: kernel size must be odd");
        if (input_steps == 0 || width == 0)
            throw ConfigError("embedding: input_steps and width must be >= 1");
    }
};

// Trainable pieces of the input embedding. The graph and sequence branches
// are optional so ablations can drop either one.
template <typename S>
struct EmbeddingLayersT {
    bool has_graph = true;
    bool has_sequence = true;
    GCNLayerT<S> gcn;
    ParameterT<S> conv_kernels;  // [channels x 1 x kernel_size]
    ParameterT<S> conv_bias;     // [channels]
    ParameterT<S> norm_gamma;    // [input_steps]
    ParameterT<S> norm_beta;     // [input_steps]
    ParameterT<S> proj_weight;   // [input_steps x width]
    ParameterT<S> proj_bias;     // [width]

    static EmbeddingLayersT init(const EmbeddingConfig& cfg, RngStream& rng, bool with_graph,
                                 bool with_sequence) {
        cfg.validate();
        if (!with_graph && !with_sequence)
            throw ConfigError("embedding: at least one of the graph/sequence branches required");
        EmbeddingLayersT e;
        e.has_graph = with_graph;
        e.has_sequence = with_sequence;
        if (with_graph) {
            RngStream r = rng.fork("embedding.gcn");
            e.gcn = GCNLayerT<S>::init(cfg.channels, r);
            e.gcn.weight.name = "embedding.gcn.weight";
            e.gcn.bias.name = "embedding.gcn.bias";
        }
        if (with_sequence) {
            RngStream r = rng.fork("embedding.conv");
            e.conv_kernels = ParameterT<S>(
                "embedding.conv.kernels",
                TensorT<S>::glorot({cfg.channels, 1, cfg.kernel_size}, r, cfg.kernel_size,
                                   cfg.kernel_size * cfg.channels));
            e.conv_bias = ParameterT<S>("embedding.conv.bias", TensorT<S>::zeros({cfg.channels}));
        }
        e.norm_gamma =
            ParameterT<S>("embedding.norm.gamma", TensorT<S>::full({cfg.input_steps}, S(1)));
        e.norm_beta = ParameterT<S>("embedding.norm.beta", TensorT<S>::zeros({cfg.input_steps}));
        RngStream rp = rng.fork("embedding.proj");
        e.proj_weight = ParameterT<S>(
            "embedding.proj.weight",
            TensorT<S>::glorot({cfg.input_steps, cfg.width}, rp, cfg.input_steps, cfg.width));
        e.proj_bias = ParameterT<S>("embedding.proj.bias", TensorT<S>::zeros({cfg.width}));
        return e;
    }

    std::vector<ParameterT<S>*> parameters() {
        std::vector<ParameterT<S>*> out;
        if (has_graph) {
            out.push_back(&gcn.weight);
            out.push_back(&gcn.bias);
        }
        if (has_sequence) {
            out.push_back(&conv_kernels);
            out.push_back(&conv_bias);
        }
        out.push_back(&norm_gamma);
        out.push_back(&norm_beta);
        out.push_back(&proj_weight);
        out.push_back(&proj_bias);
        return out;
    }
};

using EmbeddingLayers = EmbeddingLayersT<float>;

// x: [nodes x time] treated as single-channel sequences -> [nodes x F x time]
template <typename S>
ag::VarT<S> sequence_embed(ag::TapeT<S>& tape, ag::VarT<S> x, EmbeddingLayersT<S>& layers) {
    const size_t nodes = x.val().dim(0), time = x.val().dim(1);
    ag::VarT<S> as_channels = ag::reshape(x, {nodes, size_t(1), time});
    return ag::conv1d_same(as_channels, tape.param(layers.conv_kernels),
                           tape.param(layers.conv_bias));
}

// ReLU(ge + se), layer-norm over the time axis, then a time -> width linear
// map: [nodes x F x time] -> [nodes x F x width].
template <typename S>
ag::VarT<S> fuse(ag::TapeT<S>& tape, ag::VarT<S> fused_sum, EmbeddingLayersT<S>& layers,
                 S ln_eps = static_cast<S>(1e-5)) {
    ag::VarT<S> rectified = ag::relu(fused_sum);
    ag::VarT<S> normed = ag::layer_norm(rectified, tape.param(layers.norm_gamma),
                                        tape.param(layers.norm_beta), ln_eps);
    return ag::linear(normed, tape.param(layers.proj_weight), tape.param(layers.proj_bias));
}

template <typename S>
ag::VarT<S> select_tokens(ag::VarT<S> m, const EmbeddingConfig& cfg) {
    if (cfg.reduce == ChannelReduce::mean) return ag::mean_channels(m);
    return ag::select_channel(m, cfg.channels - 1);
}

// Full input embedding: [nodes x time] -> [nodes x width] token matrix.
template <typename S>
ag::VarT<S> embed_tokens(ag::TapeT<S>& tape, ag::VarT<S> x, const TensorT<S>& norm_adj,
                         EmbeddingLayersT<S>& layers, const EmbeddingConfig& cfg) {
    ag::VarT<S> branch_sum;
    bool have = false;
    if (layers.has_graph) {
        branch_sum = gcn_forward(tape, x, norm_adj, layers.gcn);
        have = true;
    }
    if (layers.has_sequence) {
        ag::VarT<S> se = sequence_embed(tape, x, layers);
        branch_sum = have ? ag::add(branch_sum, se) : se;
        have = true;
    }
    if (!have) throw ConfigError("embedding: no active branch");
    ag::VarT<S> m = fuse(tape, branch_sum, layers);
    return select_tokens(m, cfg);
}

}  // namespace flowcast
