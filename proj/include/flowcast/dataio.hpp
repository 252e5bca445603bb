// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flowcast/tensor.hpp"

namespace flowcast {

// Sensor flow matrix, one row per sampling step, one column per node.
struct TrafficSeries {
    Tensor values;  // [steps x nodes]
    int interval_seconds = 300;
    std::vector<std::string> node_ids;

    size_t steps() const { return values.dim(0); }
    size_t nodes() const { return values.dim(1); }
};

struct RoadNetwork {
    size_t n_nodes = 0;
    Tensor adjacency;  // [n_nodes x n_nodes], symmetric, zero diagonal
};

enum class AdjacencyMode { binary, gaussian };

struct AdjacencyLoad {
    RoadNetwork network;
    size_t self_edges_ignored = 0;
};

struct WindowedSample {
    Tensor x;  // [nodes x input_steps]
    Tensor y;  // [nodes x horizon]
    size_t start_index = 0;
};

// Global scalar z-score statistics fitted on the training slice.
struct NormStats {
    float mean = 0.0f;
    float std_dev = 1.0f;
};

struct SplitSpec {
    double train_fraction = 0.6;
    double val_fraction = 0.2;
    double test_fraction = 0.2;
    bool few_shot = false;

    static SplitSpec full_sample() { return SplitSpec{}; }
    static SplitSpec few_shot_spec() {
        SplitSpec s;
        s.few_shot = true;
        return s;
    }
};

struct IndexRange {
    size_t begin = 0;
    size_t end = 0;  // exclusive
    size_t size() const { return end - begin; }
};

struct SplitRanges {
    IndexRange train, val, test;
    // Stable fingerprint of the six indices, logged so controlled experiments
    // can assert they saw identical splits.
    uint64_t hash() const;
};

// CSV: header row of node ids, then one row of flows per sampling step.
// Container files must hold a rank-2 tensor named "flow" of shape
// [steps x nodes]. Dispatch is by extension: ".csv" vs anything else.
TrafficSeries load_series(const std::string& path);
TrafficSeries load_series_csv(const std::string& path);
TrafficSeries load_series_container(const std::string& path);
void write_series_csv(const std::string& path, const TrafficSeries& series);

// Edge-list CSV with rows "from,to,cost". Binary mode sets both directions
// to 1; gaussian mode sets exp(-cost^2/sigma^2), zeroing entries below 0.1.
// When sigma is not given it defaults to the population std of the costs.
AdjacencyLoad load_adjacency(const std::string& path, size_t n_nodes, AdjacencyMode mode,
                             std::optional<double> sigma = std::nullopt);

NormStats fit_normalizer(const TrafficSeries& series, IndexRange step_range);
Tensor apply_normalizer(const Tensor& values, NormStats stats);
Tensor invert_normalizer(const Tensor& values, NormStats stats);

size_t window_count(size_t steps, size_t input_steps, size_t horizon);
std::vector<WindowedSample> make_windows(const TrafficSeries& series, size_t input_steps,
                                         size_t horizon);

// Chronological split over the window index space. Sizes are
// floor(n * fraction) for each split; trailing windows beyond the three
// splits are left unused. Few-shot mode trains on the first tenth of the
// full-sample train range and keeps val/test ranges identical.
SplitRanges chronological_split(size_t n_windows, const SplitSpec& spec);

// Steps of the raw series that training windows may touch (inputs and
// targets); this is the slice normalization statistics are fitted on.
IndexRange train_step_range(const SplitRanges& splits, size_t input_steps, size_t horizon);

// Synthetic fixture: nodes on a ring, each carrying a daily sinusoid
// (period 288 steps) phase-shifted per node, plus Gaussian noise.
TrafficSeries synthetic_ring_series(size_t n_nodes, size_t steps, uint64_t seed);
void write_ring_adjacency_csv(const std::string& path, size_t n_nodes);

}  // namespace flowcast
