// SPDX-License-Identifier: Apache-2.0

#include "flowcast/dataio.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "flowcast/container.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/rng.hpp"

namespace flowcast {

uint64_t SplitRanges::hash() const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](size_t v) {
        h ^= static_cast<uint64_t>(v);
        h *= 1099511628211ull;
    };
    mix(train.begin);
    mix(train.end);
    mix(val.begin);
    mix(val.end);
    mix(test.begin);
    mix(test.end);
    return h;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    return fields;
}

float parse_flow(const std::string& text, size_t row, size_t col) {
    size_t consumed = 0;
    float v = 0.0f;
    try {
        v = std::stof(text, &consumed);
    } catch (const std::exception&) {
        throw ParseError("series row " + std::to_string(row) + " col " + std::to_string(col) +
                         ": not a number: '" + text + "'");
    }
    while (consumed < text.size() && std::isspace(static_cast<unsigned char>(text[consumed])))
        ++consumed;
    if (consumed != text.size())
        throw ParseError("series row " + std::to_string(row) + " col " + std::to_string(col) +
                         ": not a number: '" + text + "'");
    if (std::isnan(v))
        throw DataError("series row " + std::to_string(row) + " col " + std::to_string(col) +
                        ": NaN entry");
    if (v < 0.0f)
        throw DataError("series row " + std::to_string(row) + " col " + std::to_string(col) +
                        ": negative flow " + text);
    return v;
}

void validate_series(const Tensor& values) {
    for (size_t i = 0; i < values.numel(); ++i) {
        const float v = values[i];
        const size_t row = i / values.dim(1), col = i % values.dim(1);
        if (std::isnan(v))
            throw DataError("series row " + std::to_string(row) + " col " + std::to_string(col) +
                            ": NaN entry");
        if (v < 0.0f)
            throw DataError("series row " + std::to_string(row) + " col " + std::to_string(col) +
                            ": negative flow");
    }
}

}  // namespace

TrafficSeries load_series(const std::string& path) {
    if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0)
        return load_series_csv(path);
    return load_series_container(path);
}

TrafficSeries load_series_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open series file '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw ParseError("'" + path + "': empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();

    TrafficSeries series;
    series.node_ids = split_csv_line(line);
    const size_t n_nodes = series.node_ids.size();
    if (n_nodes == 0) throw ParseError("'" + path + "': empty header");

    std::vector<float> data;
    size_t rows = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != n_nodes)
            throw ParseError("'" + path + "': row " + std::to_string(rows) + " has " +
                             std::to_string(fields.size()) + " fields, expected " +
                             std::to_string(n_nodes));
        for (size_t c = 0; c < n_nodes; ++c) data.push_back(parse_flow(fields[c], rows, c));
        ++rows;
    }
    if (rows == 0) throw ParseError("'" + path + "': no data rows");
    series.values = Tensor({rows, n_nodes}, std::move(data));
    return series;
}

TrafficSeries load_series_container(const std::string& path) {
    auto tensors = container::read_tensors(path);
    auto it = tensors.find("flow");
    if (it == tensors.end()) throw DataError("'" + path + "': no tensor named 'flow'");
    if (it->second.rank() != 2)
        throw DataError("'" + path + "': 'flow' must be rank 2, got " +
                        it->second.shape_string());
    TrafficSeries series;
    series.values = std::move(it->second);
    validate_series(series.values);
    series.node_ids.resize(series.values.dim(1));
    for (size_t n = 0; n < series.node_ids.size(); ++n) series.node_ids[n] = std::to_string(n);
    return series;
}

void write_series_csv(const std::string& path, const TrafficSeries& series) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    for (size_t n = 0; n < series.nodes(); ++n) {
        if (n) out << ',';
        out << series.node_ids[n];
    }
    out << '\n';
    char buf[32];
    for (size_t s = 0; s < series.steps(); ++s) {
        for (size_t n = 0; n < series.nodes(); ++n) {
            if (n) out << ',';
            std::snprintf(buf, sizeof(buf), "%.4f", static_cast<double>(series.values.at2(s, n)));
            out << buf;
        }
        out << '\n';
    }
    if (!out) throw DataError("short write to '" + path + "'");
}

AdjacencyLoad load_adjacency(const std::string& path, size_t n_nodes, AdjacencyMode mode,
                             std::optional<double> sigma) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open adjacency file '" + path + "'");

    struct Edge {
        size_t from, to;
        double cost;
    };
    std::vector<Edge> edges;
    size_t self_ignored = 0;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line_no == 1 && line.find_first_not_of("0123456789.,- \t") != std::string::npos)
            continue;  // header row
        const std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != 3)
            throw ParseError("'" + path + "' line " + std::to_string(line_no) +
                             ": expected from,to,cost");
        long long from = 0, to = 0;
        double cost = 0.0;
        try {
            from = std::stoll(fields[0]);
            to = std::stoll(fields[1]);
            cost = std::stod(fields[2]);
        } catch (const std::exception&) {
            throw ParseError("'" + path + "' line " + std::to_string(line_no) +
                             ": bad edge row '" + line + "'");
        }
        if (from < 0 || to < 0 || from >= static_cast<long long>(n_nodes) ||
            to >= static_cast<long long>(n_nodes))
            throw DataError("'" + path + "' line " + std::to_string(line_no) +
                            ": node id out of range [0, " + std::to_string(n_nodes) + ")");
        if (from == to) {
            ++self_ignored;
            continue;
        }
        edges.push_back(Edge{static_cast<size_t>(from), static_cast<size_t>(to), cost});
    }

    double sig = sigma.value_or(0.0);
    if (mode == AdjacencyMode::gaussian && !sigma.has_value()) {
        // Default sigma: population std of the edge costs.
        double mean = 0.0;
        for (const Edge& e : edges) mean += e.cost;
        mean /= edges.empty() ? 1.0 : static_cast<double>(edges.size());
        double var = 0.0;
        for (const Edge& e : edges) var += (e.cost - mean) * (e.cost - mean);
        var /= edges.empty() ? 1.0 : static_cast<double>(edges.size());
        sig = std::sqrt(var);
        if (sig == 0.0) sig = mean != 0.0 ? mean : 1.0;
    }
    if (mode == AdjacencyMode::gaussian && sig <= 0.0)
        throw ConfigError("gaussian adjacency requires sigma > 0");

    AdjacencyLoad result;
    result.network.n_nodes = n_nodes;
    result.network.adjacency = Tensor::zeros({n_nodes, n_nodes});
    result.self_edges_ignored = self_ignored;
    Tensor& a = result.network.adjacency;
    for (const Edge& e : edges) {
        float w = 1.0f;
        if (mode == AdjacencyMode::gaussian) {
            const double g = std::exp(-(e.cost * e.cost) / (sig * sig));
            w = g >= 0.1 ? static_cast<float>(g) : 0.0f;
        }
        a.at2(e.from, e.to) = w;
        a.at2(e.to, e.from) = w;
    }
    return result;
}

NormStats fit_normalizer(const TrafficSeries& series, IndexRange step_range) {
    if (step_range.end > series.steps() || step_range.size() == 0)
        throw ConfigError("normalizer range [" + std::to_string(step_range.begin) + ", " +
                          std::to_string(step_range.end) + ") out of bounds");
    const size_t n = series.nodes();
    double mean = 0.0;
    const size_t count = step_range.size() * n;
    for (size_t s = step_range.begin; s < step_range.end; ++s)
        for (size_t c = 0; c < n; ++c) mean += static_cast<double>(series.values.at2(s, c));
    mean /= static_cast<double>(count);
    double var = 0.0;
    for (size_t s = step_range.begin; s < step_range.end; ++s)
        for (size_t c = 0; c < n; ++c) {
            const double d = static_cast<double>(series.values.at2(s, c)) - mean;
            var += d * d;
        }
    var /= static_cast<double>(count);
    if (var == 0.0) throw DataError("constant training slice: cannot normalize (std = 0)");
    return NormStats{static_cast<float>(mean), static_cast<float>(std::sqrt(var))};
}

Tensor apply_normalizer(const Tensor& values, NormStats stats) {
    Tensor out = values;
    for (size_t i = 0; i < out.numel(); ++i) out[i] = (out[i] - stats.mean) / stats.std_dev;
    return out;
}

Tensor invert_normalizer(const Tensor& values, NormStats stats) {
    Tensor out = values;
    for (size_t i = 0; i < out.numel(); ++i) out[i] = out[i] * stats.std_dev + stats.mean;
    return out;
}

size_t window_count(size_t steps, size_t input_steps, size_t horizon) {
    if (input_steps == 0 || horizon == 0) throw ConfigError("window lengths must be >= 1");
    if (steps < input_steps + horizon)
        throw DataError("series too short: " + std::to_string(steps) + " steps < " +
                        std::to_string(input_steps + horizon));
    return steps - input_steps - horizon + 1;
}

std::vector<WindowedSample> make_windows(const TrafficSeries& series, size_t input_steps,
                                         size_t horizon) {
    const size_t count = window_count(series.steps(), input_steps, horizon);
    const size_t n = series.nodes();
    std::vector<WindowedSample> windows;
    windows.reserve(count);
    for (size_t k = 0; k < count; ++k) {
        WindowedSample w;
        w.start_index = k;
        w.x = Tensor({n, input_steps});
        w.y = Tensor({n, horizon});
        for (size_t c = 0; c < n; ++c) {
            for (size_t t = 0; t < input_steps; ++t) w.x.at2(c, t) = series.values.at2(k + t, c);
            for (size_t t = 0; t < horizon; ++t)
                w.y.at2(c, t) = series.values.at2(k + input_steps + t, c);
        }
        windows.push_back(std::move(w));
    }
    return windows;
}

SplitRanges chronological_split(size_t n_windows, const SplitSpec& spec) {
    if (spec.train_fraction <= 0.0 || spec.val_fraction <= 0.0 || spec.test_fraction <= 0.0 ||
        spec.train_fraction + spec.val_fraction + spec.test_fraction > 1.0 + 1e-12)
        throw ConfigError("split fractions must be positive and sum to at most 1");
    const auto sized = [n_windows](double f) {
        return static_cast<size_t>(std::floor(static_cast<double>(n_windows) * f));
    };
    const size_t n_train = sized(spec.train_fraction);
    const size_t n_val = sized(spec.val_fraction);
    const size_t n_test = sized(spec.test_fraction);
    SplitRanges r;
    r.train = IndexRange{0, n_train};
    r.val = IndexRange{n_train, n_train + n_val};
    r.test = IndexRange{n_train + n_val, n_train + n_val + n_test};
    if (spec.few_shot) r.train.end = r.train.begin + n_train / 10;
    if (r.train.size() == 0 || r.val.size() == 0 || r.test.size() == 0)
        throw ConfigError("split produced an empty range for " + std::to_string(n_windows) +
                          " windows");
    return r;
}

IndexRange train_step_range(const SplitRanges& splits, size_t input_steps, size_t horizon) {
    return IndexRange{0, splits.train.end - 1 + input_steps + horizon};
}

TrafficSeries synthetic_ring_series(size_t n_nodes, size_t steps, uint64_t seed) {
    if (n_nodes == 0 || steps == 0) throw ConfigError("synthetic series needs nodes and steps");
    RngStream rng(seed);
    RngStream noise = rng.fork("synthetic-noise");
    constexpr double kBase = 200.0;
    constexpr double kAmplitude = 100.0;
    constexpr double kNoiseStd = 5.0;
    constexpr double kPeriod = 288.0;  // one day of 5-minute steps
    constexpr double kTwoPi = 6.283185307179586;

    TrafficSeries series;
    series.values = Tensor({steps, n_nodes});
    series.node_ids.resize(n_nodes);
    for (size_t n = 0; n < n_nodes; ++n) series.node_ids[n] = "node" + std::to_string(n);
    for (size_t s = 0; s < steps; ++s)
        for (size_t n = 0; n < n_nodes; ++n) {
            const double phase = static_cast<double>(s) / kPeriod +
                                 static_cast<double>(n) / static_cast<double>(n_nodes);
            double v = kBase + kAmplitude * std::sin(kTwoPi * phase) + kNoiseStd * noise.gaussian();
            if (v < 0.0) v = 0.0;
            series.values.at2(s, n) = static_cast<float>(v);
        }
    return series;
}

void write_ring_adjacency_csv(const std::string& path, size_t n_nodes) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << "from,to,cost\n";
    for (size_t n = 0; n < n_nodes; ++n) out << n << ',' << (n + 1) % n_nodes << ",1\n";
    if (!out) throw DataError("short write to '" + path + "'");
}

}  // namespace flowcast
