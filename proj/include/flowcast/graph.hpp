// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>

#include "flowcast/autograd.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

// Symmetric degree normalization with self-loops: with A' = A + I and
// D[i] = sum_j A'[i,j], returns D^(-1/2) A' D^(-1/2).
template <typename S>
TensorT<S> normalize_adjacency(const TensorT<S>& adjacency) {
    if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1))
        throw ShapeError("normalize_adjacency: expected square matrix, got " +
                         adjacency.shape_string());
    const size_t n = adjacency.dim(0);
    for (size_t i = 0; i < n; ++i) {
        if (adjacency.at2(i, i) != S(0))
            throw DataError("normalize_adjacency: nonzero diagonal at node " + std::to_string(i));
        for (size_t j = 0; j < n; ++j) {
            if (adjacency.at2(i, j) < S(0))
                throw DataError("normalize_adjacency: negative weight at (" + std::to_string(i) +
                                ", " + std::to_string(j) + ")");
            if (adjacency.at2(i, j) != adjacency.at2(j, i))
                throw DataError("normalize_adjacency: asymmetric at (" + std::to_string(i) + ", " +
                                std::to_string(j) + ")");
        }
    }
    std::vector<S> inv_sqrt_degree(n);
    for (size_t i = 0; i < n; ++i) {
        S degree = S(1);  // self-loop
        for (size_t j = 0; j < n; ++j) degree += adjacency.at2(i, j);
        inv_sqrt_degree[i] = S(1) / static_cast<S>(std::sqrt(static_cast<double>(degree)));
    }
    TensorT<S> out({n, n});
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            const S a = adjacency.at2(i, j) + (i == j ? S(1) : S(0));
            out.at2(i, j) = inv_sqrt_degree[i] * a * inv_sqrt_degree[j];
        }
    return out;
}

// Graph embedding layer: spatial aggregation through the normalized
// adjacency, then a pointwise 1 -> F channel expansion shared across time.
template <typename S>
struct GCNLayerT {
    ParameterT<S> weight;  // [1 x channels]
    ParameterT<S> bias;    // [channels]

    static GCNLayerT init(size_t channels, RngStream& rng) {
        GCNLayerT layer;
        layer.weight = ParameterT<S>("gcn.weight",
                                     TensorT<S>::glorot({1, channels}, rng, 1, channels));
        layer.bias = ParameterT<S>("gcn.bias", TensorT<S>::zeros({channels}));
        return layer;
    }
};

using GCNLayer = GCNLayerT<float>;

// x: [nodes x time] -> ReLU(expand(norm_adj . x)): [nodes x channels x time]
template <typename S>
ag::VarT<S> gcn_forward(ag::TapeT<S>& tape, ag::VarT<S> x, const TensorT<S>& norm_adj,
                        GCNLayerT<S>& layer) {
    if (x.val().rank() != 2 || norm_adj.dim(0) != x.val().dim(0))
        throw ShapeError("gcn_forward: node count mismatch, x=" + x.val().shape_string() +
                         " adj=" + norm_adj.shape_string());
    ag::VarT<S> adj = tape.leaf(norm_adj);
    ag::VarT<S> aggregated = ag::matmul(adj, x);
    ag::VarT<S> expanded =
        ag::expand_channels(aggregated, tape.param(layer.weight), tape.param(layer.bias));
    return ag::relu(expanded);
}

}  // namespace flowcast
