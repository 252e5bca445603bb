// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowcast/dataio.hpp"
#include "flowcast/model.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

struct OptimizerConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double initial_lr = 0.001;
    double decay_factor = 0.5;
    size_t decay_every = 100;  // epochs per decay step
    size_t batch_size = 16;
    size_t epochs = 500;
    double clip_norm = 0.0;  // 0 disables gradient clipping
};

double lr_at(const OptimizerConfig& cfg, size_t epoch);

// Adam with bias correction over an explicit parameter list; frozen
// parameters are never accepted.
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<Parameter*> params, OptimizerConfig cfg);
    void zero_grad();
    void step(double lr);

private:
    std::vector<Parameter*> params_;
    OptimizerConfig cfg_;
    std::vector<Tensor> m_, v_;
    size_t t_ = 0;
};

// Normalized windows plus everything evaluation needs to undo the scaling.
struct Dataset {
    std::vector<WindowedSample> windows;  // normalized values
    SplitRanges splits;
    NormStats stats;
    Tensor norm_adj;
    std::vector<float> node_train_mean;  // de-normalized per-node training means
};

Dataset prepare_dataset(const TrafficSeries& series, const RoadNetwork& network,
                        size_t input_steps, size_t horizon, const SplitSpec& spec);

struct HistoryRow {
    size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_mae = 0.0;
    double lr = 0.0;
};

struct TrainState {
    double initial_val_mae = 0.0;
    double best_val_mae = 0.0;
    size_t best_epoch = 0;  // 0 = untrained weights were best
    std::vector<HistoryRow> history;
};

// Mini-batch training with per-epoch validation; the model is left holding
// the best-validation weights. Deterministic for a fixed seed.
TrainState train(Forecaster& model, const Dataset& data, const OptimizerConfig& cfg,
                 uint64_t seed);

struct MetricsRow {
    std::string label;  // "step_3", ..., "average"
    size_t step = 0;    // 1-based horizon step; 0 for the average row
    double mae = 0.0;
    double rmse = 0.0;
    double mape = 0.0;  // percent, masked to entries with true value > 1.0
};

struct MetricsReport {
    std::vector<MetricsRow> rows;
    const MetricsRow& average() const;
};

// pred/truth: one [nodes x horizon] de-normalized matrix per window. Rows
// are emitted for horizon steps 3, 6, 12 (those that fit) plus the average
// over every step.
MetricsReport compute_metrics(const std::vector<Tensor>& pred, const std::vector<Tensor>& truth);

MetricsReport evaluate(Forecaster& model, const Dataset& data, IndexRange range);
MetricsReport evaluate_persistence(const Dataset& data, IndexRange range);
MetricsReport evaluate_historical_average(const Dataset& data, IndexRange range);

void write_history_csv(const std::string& path, const TrainState& state);

}  // namespace flowcast
