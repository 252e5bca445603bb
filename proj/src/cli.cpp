// SPDX-License-Identifier: Apache-2.0

#include "flowcast/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flowcast/checkpoint.hpp"
#include "flowcast/dataio.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/model.hpp"
#include "flowcast/train.hpp"

namespace flowcast {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct CliOptions {
    std::string series;
    std::string adjacency;
    std::string adjacency_mode = "binary";
    double sigma = 0.0;  // 0 = derive from edge costs
    bool few_shot = false;
    size_t horizon = 12;
    size_t input_steps = 12;
    size_t channels = 64;
    std::string channel_reduce = "last";
    std::string backbone = "tiny";
    bool no_lora = false;
    bool no_graph = false;
    bool no_sequence = false;
    size_t rank = 16;
    double alpha = 32.0;
    double lora_dropout = 0.1;
    uint64_t seed = 42;
    std::string checkpoint;
    std::string out = "run";
    bool with_baselines = false;
    size_t epochs = 500;
    size_t batch_size = 16;
    double initial_lr = 0.001;
    double decay_factor = 0.5;
    size_t decay_every = 100;
    double clip_norm = 0.0;
    // prepare
    size_t nodes = 8;
    size_t steps = 2000;
    // sweep-rank
    std::vector<size_t> ranks = {4, 8, 16, 32, 48, 64};
};

std::string hex_hash(uint64_t h) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw DataError("short write to '" + path + "'");
}

void resolve_data_paths(CliOptions& o) {
    const char* dir = std::getenv("FLOWCAST_DATA_DIR");
    if (o.series.empty() && dir) o.series = (fs::path(dir) / "series.csv").string();
    if (o.adjacency.empty() && dir) o.adjacency = (fs::path(dir) / "adjacency.csv").string();
    if (o.series.empty())
        throw ConfigError("no series file: pass --series or set FLOWCAST_DATA_DIR");
    if (o.adjacency.empty())
        throw ConfigError("no adjacency file: pass --adjacency or set FLOWCAST_DATA_DIR");
    if (!fs::exists(o.series)) throw DataError("series not found: '" + o.series + "'");
    if (!fs::exists(o.adjacency)) throw DataError("adjacency not found: '" + o.adjacency + "'");
}

ForecastConfig model_config(const CliOptions& o) {
    ForecastConfig c;
    c.input_steps = o.input_steps;
    c.horizon = o.horizon;
    c.embedding.channels = o.channels;
    c.embedding.reduce = o.channel_reduce == "mean" ? ChannelReduce::mean : ChannelReduce::last;
    c.backbone = o.backbone == "gpt2-small" ? BackboneConfig::gpt2_small()
                                            : BackboneConfig::tiny();
    c.use_lora = !o.no_lora;
    c.lora_rank = o.rank;
    c.lora_alpha = o.alpha;
    c.lora_dropout = o.lora_dropout;
    c.use_graph_embedding = !o.no_graph;
    c.use_sequence_embedding = !o.no_sequence;
    return c;
}

OptimizerConfig optimizer_config(const CliOptions& o) {
    OptimizerConfig c;
    c.epochs = o.epochs;
    c.batch_size = o.batch_size;
    c.initial_lr = o.initial_lr;
    c.decay_factor = o.decay_factor;
    c.decay_every = o.decay_every;
    c.clip_norm = o.clip_norm;
    return c;
}

Dataset load_dataset(CliOptions& o) {
    resolve_data_paths(o);
    const TrafficSeries series = load_series(o.series);
    const AdjacencyMode mode =
        o.adjacency_mode == "gaussian" ? AdjacencyMode::gaussian : AdjacencyMode::binary;
    std::optional<double> sigma;
    if (o.sigma > 0.0) sigma = o.sigma;
    const AdjacencyLoad adj = load_adjacency(o.adjacency, series.nodes(), mode, sigma);
    if (adj.self_edges_ignored > 0)
        std::cerr << "warning: ignored " << adj.self_edges_ignored << " self edges\n";
    SplitSpec spec = o.few_shot ? SplitSpec::few_shot_spec() : SplitSpec::full_sample();
    return prepare_dataset(series, adj.network, o.input_steps, o.horizon, spec);
}

json config_json(const CliOptions& o, const std::string& command, const Dataset& data) {
    json j;
    j["command"] = command;
    j["seed"] = o.seed;
    j["series"] = o.series;
    j["adjacency"] = o.adjacency;
    j["split"] = o.few_shot ? "few-shot" : "full";
    j["split_hash"] = hex_hash(data.splits.hash());
    j["horizon"] = o.horizon;
    j["input_steps"] = o.input_steps;
    j["channels"] = o.channels;
    j["channel_reduce"] = o.channel_reduce;
    j["backbone"] = o.backbone;
    j["use_lora"] = !o.no_lora;
    if (!o.no_lora) {
        j["rank"] = o.rank;
        j["alpha"] = o.alpha;
        j["lora_dropout"] = o.lora_dropout;
    }
    j["use_graph_embedding"] = !o.no_graph;
    j["use_sequence_embedding"] = !o.no_sequence;
    j["epochs"] = o.epochs;
    j["batch_size"] = o.batch_size;
    j["initial_lr"] = o.initial_lr;
    j["decay_factor"] = o.decay_factor;
    j["decay_every"] = o.decay_every;
    return j;
}

json rows_json(const MetricsReport& report) {
    json rows = json::array();
    for (const MetricsRow& r : report.rows)
        rows.push_back(json{{"label", r.label},
                            {"step", r.step},
                            {"minutes", r.step * 5},
                            {"mae", r.mae},
                            {"rmse", r.rmse},
                            {"mape", r.mape}});
    return rows;
}

json metrics_json(const CliOptions& o, const Dataset& data, const TrainableReport& params,
                  const MetricsReport& report,
                  const std::optional<MetricsReport>& persistence,
                  const std::optional<MetricsReport>& historical) {
    json j;
    j["seed"] = o.seed;
    j["horizon"] = o.horizon;
    j["split"] = o.few_shot ? "few-shot" : "full";
    j["split_hash"] = hex_hash(data.splits.hash());
    j["trainable_parameters"] = params.trainable_count;
    j["total_parameters"] = params.total_count;
    j["trainable_fraction"] = params.fraction;
    j["normalization"] = {{"mean", data.stats.mean}, {"std", data.stats.std_dev}};
    j["rows"] = rows_json(report);
    if (persistence || historical) {
        json b = json::object();
        if (persistence) b["persistence"] = rows_json(*persistence);
        if (historical) b["historical_average"] = rows_json(*historical);
        j["baselines"] = b;
    }
    return j;
}

std::vector<std::pair<std::string, const Tensor*>> checkpoint_tensors(Forecaster& model,
                                                                      const Tensor& norm_mean,
                                                                      const Tensor& norm_std) {
    std::vector<std::pair<std::string, const Tensor*>> named;
    for (Parameter* p : model.parameters()) named.emplace_back(p->name, &p->value);
    named.emplace_back("norm.mean", &norm_mean);
    named.emplace_back("norm.std", &norm_std);
    return named;
}

void save_model(Forecaster& model, const Dataset& data, const std::string& path) {
    const Tensor mean({1}, {data.stats.mean});
    const Tensor stddev({1}, {data.stats.std_dev});
    save_checkpoint(path, checkpoint_tensors(model, mean, stddev));
}

void load_model(Forecaster& model, const Dataset& data, const std::string& path) {
    Tensor mean({1});
    Tensor stddev({1});
    std::vector<std::pair<std::string, Tensor*>> named;
    for (Parameter* p : model.parameters()) named.emplace_back(p->name, &p->value);
    named.emplace_back("norm.mean", &mean);
    named.emplace_back("norm.std", &stddev);
    load_checkpoint(path, named);
    const float rel = std::abs(mean[0] - data.stats.mean) +
                      std::abs(stddev[0] - data.stats.std_dev);
    if (rel > 1e-3f * (1.0f + std::abs(data.stats.mean) + data.stats.std_dev))
        throw CheckpointError("checkpoint normalization (" + std::to_string(mean[0]) + ", " +
                              std::to_string(stddev[0]) + ") does not match this dataset (" +
                              std::to_string(data.stats.mean) + ", " +
                              std::to_string(data.stats.std_dev) + ")");
    model.set_norm_stats(data.stats);
}

void print_report(const std::string& name, const MetricsReport& report) {
    std::cout << name << ":\n";
    for (const MetricsRow& r : report.rows) {
        std::printf("  %-10s mae %9.4f  rmse %9.4f  mape %8.3f%%\n", r.label.c_str(), r.mae,
                    r.rmse, r.mape);
    }
}

int cmd_prepare(const CliOptions& o) {
    fs::create_directories(o.out);
    const TrafficSeries series = synthetic_ring_series(o.nodes, o.steps, o.seed);
    const std::string series_path = (fs::path(o.out) / "series.csv").string();
    const std::string adj_path = (fs::path(o.out) / "adjacency.csv").string();
    write_series_csv(series_path, series);
    write_ring_adjacency_csv(adj_path, o.nodes);
    std::cout << "prepare: wrote " << series_path << " (" << o.steps << " steps, " << o.nodes
              << " nodes) and " << adj_path << "\n";
    return 0;
}

int cmd_train(CliOptions& o) {
    Dataset data = load_dataset(o);
    Forecaster model = Forecaster::init(model_config(o), o.seed);
    model.set_norm_stats(data.stats);
    const TrainState state = train(model, data, optimizer_config(o), o.seed);

    const MetricsReport report = evaluate(model, data, data.splits.test);
    std::optional<MetricsReport> persistence, historical;
    if (o.with_baselines) {
        persistence = evaluate_persistence(data, data.splits.test);
        historical = evaluate_historical_average(data, data.splits.test);
    }

    fs::create_directories(o.out);
    const fs::path out(o.out);
    write_text((out / "config.json").string(), config_json(o, "train", data).dump(2) + "\n");
    write_history_csv((out / "history.csv").string(), state);
    save_model(model, data, (out / "checkpoint.bin").string());
    const TrainableReport params = trainable_report(model.parameters());
    write_text((out / "metrics.json").string(),
               metrics_json(o, data, params, report, persistence, historical).dump(2) + "\n");

    std::printf("train: %zu epochs, initial val mae %.4f, best val mae %.4f (epoch %zu)\n",
                o.epochs, state.initial_val_mae, state.best_val_mae, state.best_epoch);
    print_report("test", report);
    if (persistence) print_report("persistence", *persistence);
    if (historical) print_report("historical_average", *historical);
    std::cout << "artifacts in " << o.out << "\n";
    return 0;
}

int cmd_evaluate(CliOptions& o) {
    if (o.checkpoint.empty()) throw ConfigError("evaluate requires --checkpoint");
    Dataset data = load_dataset(o);
    Forecaster model = Forecaster::init(model_config(o), o.seed);
    load_model(model, data, o.checkpoint);

    const MetricsReport report = evaluate(model, data, data.splits.test);
    std::optional<MetricsReport> persistence, historical;
    if (o.with_baselines) {
        persistence = evaluate_persistence(data, data.splits.test);
        historical = evaluate_historical_average(data, data.splits.test);
    }
    fs::create_directories(o.out);
    const TrainableReport params = trainable_report(model.parameters());
    write_text((fs::path(o.out) / "metrics.json").string(),
               metrics_json(o, data, params, report, persistence, historical).dump(2) + "\n");
    print_report("test", report);
    if (persistence) print_report("persistence", *persistence);
    if (historical) print_report("historical_average", *historical);
    return 0;
}

int cmd_predict(CliOptions& o) {
    if (o.checkpoint.empty()) throw ConfigError("predict requires --checkpoint");
    Dataset data = load_dataset(o);
    Forecaster model = Forecaster::init(model_config(o), o.seed);
    load_model(model, data, o.checkpoint);

    fs::create_directories(o.out);
    const std::string path = (fs::path(o.out) / "predictions.csv").string();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << "node,timestamp,true,predicted\n";
    const int interval = 300;
    char buf[128];
    for (size_t k = data.splits.test.begin; k < data.splits.test.end; ++k) {
        const WindowedSample& w = data.windows[k];
        const Tensor pred = invert_normalizer(model.predict(w.x, data.norm_adj), data.stats);
        const Tensor truth = invert_normalizer(w.y, data.stats);
        const long timestamp = static_cast<long>(w.start_index + o.input_steps) * interval;
        for (size_t n = 0; n < pred.dim(0); ++n) {
            std::snprintf(buf, sizeof(buf), "%zu,%ld,%.4f,%.4f\n", n, timestamp,
                          static_cast<double>(truth.at2(n, 0)),
                          static_cast<double>(pred.at2(n, 0)));
            out << buf;
        }
    }
    if (!out) throw DataError("short write to '" + path + "'");
    std::cout << "predict: wrote first-step forecasts for " << data.splits.test.size()
              << " test windows to " << path << "\n";
    return 0;
}

struct VariantOutcome {
    std::string name;
    size_t trainable = 0;
    MetricsRow average;
    uint64_t split_hash = 0;
};

VariantOutcome run_variant(const CliOptions& o, const Dataset& data, const std::string& name) {
    CliOptions vo = o;
    vo.no_sequence = name == "no-sequence-embedding";
    vo.no_graph = name == "no-graph-embedding";
    vo.no_lora = name == "no-lora";
    Forecaster model = Forecaster::init(model_config(vo), vo.seed);
    model.set_norm_stats(data.stats);
    train(model, data, optimizer_config(vo), vo.seed);
    const MetricsReport report = evaluate(model, data, data.splits.test);
    VariantOutcome v;
    v.name = name;
    v.trainable = trainable_report(model.trainable_parameters()).trainable_count;
    v.average = report.average();
    v.split_hash = data.splits.hash();
    return v;
}

int cmd_ablate(CliOptions& o) {
    Dataset data = load_dataset(o);
    json out_json;
    out_json["seed"] = o.seed;
    out_json["horizon"] = o.horizon;
    out_json["split_hash"] = hex_hash(data.splits.hash());
    json variants = json::array();
    for (const std::string name :
         {"full", "no-sequence-embedding", "no-graph-embedding", "no-lora"}) {
        const VariantOutcome v = run_variant(o, data, name);
        variants.push_back(json{{"name", v.name},
                                {"split_hash", hex_hash(v.split_hash)},
                                {"trainable_parameters", v.trainable},
                                {"average_mae", v.average.mae},
                                {"average_rmse", v.average.rmse},
                                {"average_mape", v.average.mape}});
        std::printf("ablate: %-24s trainable %8zu  avg mae %9.4f\n", v.name.c_str(), v.trainable,
                    v.average.mae);
    }
    out_json["variants"] = variants;
    fs::create_directories(o.out);
    write_text((fs::path(o.out) / "ablation.json").string(), out_json.dump(2) + "\n");
    std::cout << "artifacts in " << o.out << "\n";
    return 0;
}

int cmd_sweep_rank(CliOptions& o) {
    if (o.ranks.empty()) throw ConfigError("sweep-rank needs at least one rank");
    Dataset data = load_dataset(o);
    json out_json;
    out_json["seed"] = o.seed;
    out_json["horizon"] = o.horizon;
    out_json["split_hash"] = hex_hash(data.splits.hash());
    json rows = json::array();
    std::string csv = "rank,mae,rmse,mape\n";
    for (const size_t rank : o.ranks) {
        CliOptions ro = o;
        ro.rank = rank;
        ro.no_lora = false;
        Forecaster model = Forecaster::init(model_config(ro), ro.seed);
        model.set_norm_stats(data.stats);
        train(model, data, optimizer_config(ro), ro.seed);
        const MetricsReport report = evaluate(model, data, data.splits.test);
        const MetricsRow& avg = report.average();
        const size_t trainable = trainable_report(model.trainable_parameters()).trainable_count;
        rows.push_back(json{{"rank", rank},
                            {"trainable_parameters", trainable},
                            {"average_mae", avg.mae},
                            {"average_rmse", avg.rmse},
                            {"average_mape", avg.mape}});
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g\n", rank, avg.mae, avg.rmse, avg.mape);
        csv += buf;
        std::printf("sweep-rank: r=%-3zu trainable %8zu  avg mae %9.4f\n", rank, trainable,
                    avg.mae);
    }
    out_json["rows"] = rows;
    fs::create_directories(o.out);
    write_text((fs::path(o.out) / "sweep.json").string(), out_json.dump(2) + "\n");
    write_text((fs::path(o.out) / "sweep.csv").string(), csv);
    std::cout << "artifacts in " << o.out << "\n";
    return 0;
}

void add_data_options(CLI::App* cmd, CliOptions& o) {
    cmd->add_option("--series", o.series, "Series file (.csv or tensor container)");
    cmd->add_option("--adjacency", o.adjacency, "Edge-list CSV (from,to,cost)");
    cmd->add_option("--adjacency-mode", o.adjacency_mode, "Edge weighting")
        ->check(CLI::IsMember({"binary", "gaussian"}));
    cmd->add_option("--sigma", o.sigma, "Gaussian adjacency width (0 = from edge costs)");
    cmd->add_flag("--few-shot", o.few_shot, "Train on the first tenth of the train range");
    cmd->add_option("--horizon", o.horizon, "Prediction steps")
        ->check(CLI::IsMember({"3", "6", "12"}));
    cmd->add_option("--input-steps", o.input_steps, "History steps per window");
}

void add_model_options(CLI::App* cmd, CliOptions& o) {
    cmd->add_option("--channels", o.channels, "Embedding channels F");
    cmd->add_option("--channel-reduce", o.channel_reduce, "Token reduction over channels")
        ->check(CLI::IsMember({"last", "mean"}));
    cmd->add_option("--backbone", o.backbone, "Backbone preset")
        ->check(CLI::IsMember({"tiny", "gpt2-small"}));
    cmd->add_option("--rank", o.rank, "LoRA rank");
    cmd->add_option("--alpha", o.alpha, "LoRA scale numerator");
    cmd->add_option("--lora-dropout", o.lora_dropout, "LoRA path dropout");
    cmd->add_flag("--no-lora", o.no_lora, "Freeze the backbone entirely");
    cmd->add_flag("--no-graph-embedding", o.no_graph, "Drop the graph branch");
    cmd->add_flag("--no-sequence-embedding", o.no_sequence, "Drop the 1-D conv branch");
}

void add_train_options(CLI::App* cmd, CliOptions& o) {
    cmd->add_option("--epochs", o.epochs, "Training epochs");
    cmd->add_option("--batch-size", o.batch_size, "Windows per batch");
    cmd->add_option("--lr", o.initial_lr, "Initial learning rate");
    cmd->add_option("--decay-factor", o.decay_factor, "Learning-rate decay factor");
    cmd->add_option("--decay-every", o.decay_every, "Epochs between decays");
    cmd->add_option("--clip-norm", o.clip_norm, "Global gradient clip (0 = off)");
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CliOptions o;
    CLI::App app{"Traffic forecasting with a frozen transformer and low-rank adapters"};
    app.require_subcommand(1);
    app.fallthrough();  // let --seed/--out/--config appear after the subcommand
    app.set_config("--config", "", "Read options from an INI/TOML file");
    app.add_option("--seed", o.seed, "Run seed (recorded in artifacts)");
    app.add_option("--out", o.out, "Output directory");

    CLI::App* prepare = app.add_subcommand("prepare", "Write a synthetic ring-road fixture");
    prepare->add_option("--nodes", o.nodes, "Sensor count");
    prepare->add_option("--steps", o.steps, "Sampling steps");

    CLI::App* train_cmd = app.add_subcommand("train", "Train and evaluate on the test range");
    add_data_options(train_cmd, o);
    add_model_options(train_cmd, o);
    add_train_options(train_cmd, o);
    train_cmd->add_flag("--with-baselines", o.with_baselines,
                        "Also report reference predictors");

    CLI::App* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint on the test range");
    add_data_options(eval_cmd, o);
    add_model_options(eval_cmd, o);
    eval_cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint file");
    eval_cmd->add_flag("--with-baselines", o.with_baselines,
                       "Also report reference predictors");

    CLI::App* predict_cmd = app.add_subcommand("predict", "Emit per-node forecast CSV");
    add_data_options(predict_cmd, o);
    add_model_options(predict_cmd, o);
    predict_cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint file");

    CLI::App* ablate_cmd = app.add_subcommand("ablate", "Train the full model and each ablation");
    add_data_options(ablate_cmd, o);
    add_model_options(ablate_cmd, o);
    add_train_options(ablate_cmd, o);

    CLI::App* sweep_cmd = app.add_subcommand("sweep-rank", "Train once per adapter rank");
    add_data_options(sweep_cmd, o);
    add_model_options(sweep_cmd, o);
    add_train_options(sweep_cmd, o);
    sweep_cmd->add_option("--ranks", o.ranks, "Ranks to sweep")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (prepare->parsed()) return cmd_prepare(o);
        if (train_cmd->parsed()) return cmd_train(o);
        if (eval_cmd->parsed()) return cmd_evaluate(o);
        if (predict_cmd->parsed()) return cmd_predict(o);
        if (ablate_cmd->parsed()) return cmd_ablate(o);
        if (sweep_cmd->parsed()) return cmd_sweep_rank(o);
        std::cerr << "error: no command\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace flowcast
