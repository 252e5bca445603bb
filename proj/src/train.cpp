// SPDX-License-Identifier: Apache-2.0

#include "flowcast/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "flowcast/errors.hpp"
#include "flowcast/graph.hpp"
#include "flowcast/rng.hpp"

namespace flowcast {

double lr_at(const OptimizerConfig& cfg, size_t epoch) {
    return cfg.initial_lr * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every));
}

AdamOptimizer::AdamOptimizer(std::vector<Parameter*> params, OptimizerConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    for (const Parameter* p : params_)
        if (!p->trainable) throw ConfigError("optimizer: frozen parameter '" + p->name + "'");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Parameter* p : params_) {
        m_.push_back(Tensor::zeros(p->value.shape()));
        v_.push_back(Tensor::zeros(p->value.shape()));
    }
}

void AdamOptimizer::zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
}

void AdamOptimizer::step(double lr) {
    ++t_;
    if (cfg_.clip_norm > 0.0) {
        double total_sq = 0.0;
        for (const Parameter* p : params_) {
            if (p->grad.empty()) continue;
            for (size_t i = 0; i < p->grad.numel(); ++i)
                total_sq += static_cast<double>(p->grad[i]) * static_cast<double>(p->grad[i]);
        }
        const double norm = std::sqrt(total_sq);
        if (norm > cfg_.clip_norm) {
            const float scale = static_cast<float>(cfg_.clip_norm / norm);
            for (Parameter* p : params_)
                if (!p->grad.empty()) p->grad.scale_inplace(scale);
        }
    }
    const double bias1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bias2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Parameter& p = *params_[pi];
        Tensor& m = m_[pi];
        Tensor& v = v_[pi];
        for (size_t i = 0; i < p.value.numel(); ++i) {
            const double g = p.grad.empty() ? 0.0 : static_cast<double>(p.grad[i]);
            const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * g;
            const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * g * g;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double m_hat = mi / bias1;
            const double v_hat = vi / bias2;
            p.value[i] -= static_cast<float>(lr * m_hat / (std::sqrt(v_hat) + cfg_.epsilon));
        }
    }
}

Dataset prepare_dataset(const TrafficSeries& series, const RoadNetwork& network,
                        size_t input_steps, size_t horizon, const SplitSpec& spec) {
    if (network.n_nodes != series.nodes())
        throw ConfigError("adjacency is for " + std::to_string(network.n_nodes) +
                          " nodes but series has " + std::to_string(series.nodes()));
    Dataset data;
    const size_t count = window_count(series.steps(), input_steps, horizon);
    data.splits = chronological_split(count, spec);
    const IndexRange fit_range = train_step_range(data.splits, input_steps, horizon);
    data.stats = fit_normalizer(series, fit_range);

    TrafficSeries normalized = series;
    normalized.values = apply_normalizer(series.values, data.stats);
    data.windows = make_windows(normalized, input_steps, horizon);

    data.norm_adj = normalize_adjacency(network.adjacency);

    data.node_train_mean.assign(series.nodes(), 0.0f);
    for (size_t n = 0; n < series.nodes(); ++n) {
        double acc = 0.0;
        for (size_t s = fit_range.begin; s < fit_range.end; ++s)
            acc += static_cast<double>(series.values.at2(s, n));
        data.node_train_mean[n] = static_cast<float>(acc / static_cast<double>(fit_range.size()));
    }
    return data;
}

namespace {

// Shared metric accumulation for the model and the reference predictors.
template <typename PredictFn>
MetricsReport metrics_over_range(const Dataset& data, IndexRange range, PredictFn&& predict) {
    if (range.size() == 0 || range.end > data.windows.size())
        throw ConfigError("evaluation range [" + std::to_string(range.begin) + ", " +
                          std::to_string(range.end) + ") is empty or out of bounds");
    std::vector<Tensor> pred, truth;
    pred.reserve(range.size());
    truth.reserve(range.size());
    for (size_t k = range.begin; k < range.end; ++k) {
        const WindowedSample& w = data.windows[k];
        pred.push_back(predict(w));
        truth.push_back(invert_normalizer(w.y, data.stats));
    }
    return compute_metrics(pred, truth);
}

}  // namespace

const MetricsRow& MetricsReport::average() const {
    for (const MetricsRow& r : rows)
        if (r.step == 0) return r;
    throw ConfigError("metrics report has no average row");
}

MetricsReport compute_metrics(const std::vector<Tensor>& pred, const std::vector<Tensor>& truth) {
    if (pred.empty() || pred.size() != truth.size())
        throw ConfigError("compute_metrics: need equally many prediction and truth windows");
    const size_t horizon = pred[0].dim(1);
    std::vector<double> abs_sum(horizon, 0.0), sq_sum(horizon, 0.0), ape_sum(horizon, 0.0);
    std::vector<size_t> count(horizon, 0), masked_count(horizon, 0);
    for (size_t k = 0; k < pred.size(); ++k) {
        pred[k].require_same_shape(truth[k], "compute_metrics");
        const size_t nodes = pred[k].dim(0);
        for (size_t n = 0; n < nodes; ++n)
            for (size_t s = 0; s < horizon; ++s) {
                const double p = pred[k].at2(n, s);
                const double t = truth[k].at2(n, s);
                const double err = p - t;
                abs_sum[s] += std::abs(err);
                sq_sum[s] += err * err;
                ++count[s];
                if (t > 1.0) {
                    ape_sum[s] += std::abs(err) / t;
                    ++masked_count[s];
                }
            }
    }
    std::vector<double> mae(horizon), rmse(horizon), mape(horizon);
    for (size_t s = 0; s < horizon; ++s) {
        mae[s] = abs_sum[s] / static_cast<double>(count[s]);
        rmse[s] = std::sqrt(sq_sum[s] / static_cast<double>(count[s]));
        mape[s] = masked_count[s] == 0
                      ? 0.0
                      : 100.0 * ape_sum[s] / static_cast<double>(masked_count[s]);
    }
    MetricsReport report;
    for (size_t s : {size_t(3), size_t(6), size_t(12)}) {
        if (s > horizon) continue;
        report.rows.push_back(
            MetricsRow{"step_" + std::to_string(s), s, mae[s - 1], rmse[s - 1], mape[s - 1]});
    }
    MetricsRow avg{"average", 0, 0.0, 0.0, 0.0};
    for (size_t s = 0; s < horizon; ++s) {
        avg.mae += mae[s];
        avg.rmse += rmse[s];
        avg.mape += mape[s];
    }
    avg.mae /= static_cast<double>(horizon);
    avg.rmse /= static_cast<double>(horizon);
    avg.mape /= static_cast<double>(horizon);
    report.rows.push_back(avg);
    for (const MetricsRow& r : report.rows)
        if (r.rmse + 1e-12 < r.mae)
            throw NumericError("metrics row '" + r.label + "': RMSE " + std::to_string(r.rmse) +
                               " below MAE " + std::to_string(r.mae));
    return report;
}

MetricsReport evaluate(Forecaster& model, const Dataset& data, IndexRange range) {
    return metrics_over_range(data, range, [&](const WindowedSample& w) {
        return invert_normalizer(model.predict(w.x, data.norm_adj), data.stats);
    });
}

MetricsReport evaluate_persistence(const Dataset& data, IndexRange range) {
    return metrics_over_range(data, range, [&](const WindowedSample& w) {
        const size_t nodes = w.x.dim(0), last = w.x.dim(1) - 1, horizon = w.y.dim(1);
        Tensor p({nodes, horizon});
        for (size_t n = 0; n < nodes; ++n)
            for (size_t s = 0; s < horizon; ++s) p.at2(n, s) = w.x.at2(n, last);
        return invert_normalizer(p, data.stats);
    });
}

MetricsReport evaluate_historical_average(const Dataset& data, IndexRange range) {
    return metrics_over_range(data, range, [&](const WindowedSample& w) {
        const size_t nodes = w.x.dim(0), horizon = w.y.dim(1);
        Tensor p({nodes, horizon});
        for (size_t n = 0; n < nodes; ++n)
            for (size_t s = 0; s < horizon; ++s) p.at2(n, s) = data.node_train_mean[n];
        return p;  // already in de-normalized units
    });
}

TrainState train(Forecaster& model, const Dataset& data, const OptimizerConfig& cfg,
                 uint64_t seed) {
    std::vector<Parameter*> trainable = model.trainable_parameters();
    AdamOptimizer optimizer(trainable, cfg);
    RngStream root(seed);
    RngStream shuffle_rng = root.fork("shuffle");
    RngStream dropout_rng = root.fork("dropout");

    TrainState state;
    state.initial_val_mae = evaluate(model, data, data.splits.val).average().mae;
    state.best_val_mae = state.initial_val_mae;
    state.best_epoch = 0;
    std::vector<Tensor> best_values;
    best_values.reserve(trainable.size());
    for (const Parameter* p : trainable) best_values.push_back(p->value);

    std::vector<size_t> order(data.splits.train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = data.splits.train.begin + i;

    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(cfg, epoch);
        RngStream epoch_shuffle = shuffle_rng.fork(epoch);
        RngStream epoch_dropout = dropout_rng.fork(epoch);
        epoch_shuffle.shuffle(order);

        double epoch_loss = 0.0;
        size_t n_batches = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t batch_end = std::min(start + cfg.batch_size, order.size());
            const float inv_batch = 1.0f / static_cast<float>(batch_end - start);
            optimizer.zero_grad();
            double batch_loss = 0.0;
            for (size_t i = start; i < batch_end; ++i) {
                const WindowedSample& w = data.windows[order[i]];
                ag::TapeT<float> tape;
                ag::VarT<float> pred = model.forward(tape, w.x, data.norm_adj, true,
                                                     &epoch_dropout);
                ag::VarT<float> loss = loss_mae(pred, w.y);
                const double loss_value = static_cast<double>(loss.val()[0]);
                if (!std::isfinite(loss_value))
                    throw NumericError("training diverged: non-finite loss at epoch " +
                                       std::to_string(epoch + 1) + ", batch " +
                                       std::to_string(n_batches + 1) + ", lr " +
                                       std::to_string(lr));
                batch_loss += loss_value;
                tape.backward(loss);
                for (Parameter* p : trainable) {
                    const Tensor& g = tape.param_grad(*p);
                    if (!g.empty()) p->accumulate_grad_scaled(g, inv_batch);
                }
            }
            optimizer.step(lr);
            epoch_loss += batch_loss / static_cast<double>(batch_end - start);
            ++n_batches;
        }

        const double val_mae = evaluate(model, data, data.splits.val).average().mae;
        state.history.push_back(HistoryRow{epoch + 1,
                                           n_batches ? epoch_loss / static_cast<double>(n_batches)
                                                     : 0.0,
                                           val_mae, lr});
        if (val_mae < state.best_val_mae) {
            state.best_val_mae = val_mae;
            state.best_epoch = epoch + 1;
            for (size_t pi = 0; pi < trainable.size(); ++pi) best_values[pi] = trainable[pi]->value;
        }
    }

    for (size_t pi = 0; pi < trainable.size(); ++pi) trainable[pi]->value = best_values[pi];
    return state;
}

void write_history_csv(const std::string& path, const TrainState& state) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << "epoch,train_loss,val_mae,lr\n";
    char buf[128];
    for (const HistoryRow& r : state.history) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g\n", r.epoch, r.train_loss, r.val_mae,
                      r.lr);
        out << buf;
    }
    if (!out) throw DataError("short write to '" + path + "'");
}

}  // namespace flowcast
