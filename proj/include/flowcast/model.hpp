// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "flowcast/autograd.hpp"
#include "flowcast/backbone.hpp"
#include "flowcast/dataio.hpp"
#include "flowcast/embedding.hpp"
#include "flowcast/errors.hpp"

namespace flowcast {

struct ForecastConfig {
    size_t input_steps = 12;  // T
    size_t horizon = 12;      // T'
    EmbeddingConfig embedding;
    BackboneConfig backbone;
    bool use_lora = true;
    size_t lora_rank = 16;
    double lora_alpha = 32.0;
    double lora_dropout = 0.1;
    bool use_graph_embedding = true;
    bool use_sequence_embedding = true;

    // Embedding geometry follows the task geometry; keep them in lock step.
    ForecastConfig resolved() const {
        ForecastConfig c = *this;
        c.embedding.input_steps = c.input_steps;
        c.embedding.width = c.backbone.width;
        return c;
    }

    void validate() const {
        if (input_steps == 0 || horizon == 0)
            throw ConfigError("forecast: input_steps and horizon must be >= 1");
        embedding.validate();
        backbone.validate();
    }
};

// Embedding -> frozen backbone (plus adapters) -> linear head, with the
// prediction clamped from below at the normalized value of zero flow.
template <typename S>
class ForecasterT {
public:
    ForecastConfig config;
    EmbeddingLayersT<S> embedding;
    BackboneT<S> backbone;
    ParameterT<S> head_weight;  // [width x horizon]
    ParameterT<S> head_bias;    // [horizon]
    S zero_flow_level = S(0);

    static ForecasterT init(const ForecastConfig& raw_config, uint64_t seed) {
        const ForecastConfig cfg = raw_config.resolved();
        cfg.validate();
        ForecasterT m;
        m.config = cfg;
        RngStream rng(seed);
        RngStream er = rng.fork("embedding");
        m.embedding = EmbeddingLayersT<S>::init(cfg.embedding, er, cfg.use_graph_embedding,
                                                cfg.use_sequence_embedding);
        RngStream br = rng.fork("backbone");
        m.backbone = BackboneT<S>::init(cfg.backbone, br);
        if (cfg.use_lora) {
            RngStream lr = rng.fork("lora");
            m.backbone.attach_lora(cfg.lora_rank, static_cast<S>(cfg.lora_alpha),
                                   cfg.lora_dropout, lr);
        }
        RngStream hr = rng.fork("head");
        m.head_weight = ParameterT<S>(
            "head.weight", TensorT<S>::glorot({cfg.backbone.width, cfg.horizon}, hr,
                                              cfg.backbone.width, cfg.horizon));
        m.head_bias = ParameterT<S>("head.bias", TensorT<S>::zeros({cfg.horizon}));
        return m;
    }

    void set_norm_stats(NormStats stats) {
        zero_flow_level = static_cast<S>((0.0f - stats.mean) / stats.std_dev);
    }

    // x: [nodes x input_steps], normalized -> [nodes x horizon], normalized
    ag::VarT<S> forward(ag::TapeT<S>& tape, const TensorT<S>& x, const TensorT<S>& norm_adj,
                        bool training = false, RngStream* dropout_rng = nullptr) {
        ag::VarT<S> input = tape.leaf(x);
        ag::VarT<S> tokens = embed_tokens(tape, input, norm_adj, embedding, config.embedding);
        ag::VarT<S> hidden = backbone.forward(tape, tokens, training, dropout_rng);
        ag::VarT<S> pred = ag::linear(hidden, tape.param(head_weight), tape.param(head_bias));
        return ag::clamp_floor(pred, zero_flow_level);
    }

    TensorT<S> predict(const TensorT<S>& x, const TensorT<S>& norm_adj) {
        ag::TapeT<S> tape;
        return forward(tape, x, norm_adj).val();
    }

    std::vector<ParameterT<S>*> parameters() {
        std::vector<ParameterT<S>*> out = embedding.parameters();
        for (ParameterT<S>* p : backbone.parameters()) out.push_back(p);
        out.push_back(&head_weight);
        out.push_back(&head_bias);
        return out;
    }

    std::vector<ParameterT<S>*> trainable_parameters() {
        std::vector<ParameterT<S>*> out;
        for (ParameterT<S>* p : parameters())
            if (p->trainable) out.push_back(p);
        return out;
    }
};

using Forecaster = ForecasterT<float>;

template <typename S>
ag::VarT<S> loss_mae(ag::VarT<S> pred, const TensorT<S>& target) {
    return ag::mean_abs_error(pred, target);
}

}  // namespace flowcast
