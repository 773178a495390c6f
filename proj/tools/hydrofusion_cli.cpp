// Command-line front end: generate, train, evaluate, ablate, forecast.

#include "hydrofusion/config.hpp"
#include "hydrofusion/evaluation.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace hydrofusion;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
};

RunConfig resolve(const Globals& g) {
    RunConfig c = g.config.empty() ? RunConfig{} : RunConfig::load(g.config);
    if (g.seed) c.apply_seed(*g.seed);
    c.validate();
    return c;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
    if (text.empty() || text.back() != '\n') os << '\n';
}

fs::path prepare_out(const Globals& g, const RunConfig& c, const std::string& command) {
    const fs::path out(g.out);
    fs::create_directories(out);
    write_text(out / ("manifest_" + command + ".json"), run_manifest(c, command));
    write_text(out / "config.ini", c.to_ini());
    return out;
}

std::string resolved_checkpoint(const std::string& flag, const fs::path& out) {
    return flag.empty() ? (out / "checkpoint.json").string() : flag;
}

std::unique_ptr<HydroFusionModel> load_model(const RunConfig& c, const std::string& path) {
    auto model = std::make_unique<HydroFusionModel>(c.model);
    const CheckpointInfo info = load_checkpoint(path, *model, nullptr);
    if (info.config_hash != c.hash()) {
        std::cerr << "warning: checkpoint config hash " << info.config_hash << " differs from " << c.hash() << '\n';
    }
    return model;
}

nlohmann::json report_json(MetricReport r, const Dataset& data, bool physical) {
    if (physical) add_physical_units(r, data.runoff_scaler);
    return nlohmann::json::parse(r.to_json());
}

int cmd_generate(const Globals& g) {
    const RunConfig c = resolve(g);
    const fs::path out = prepare_out(g, c, "generate");
    SyntheticConfig s = c.synthetic;
    s.train_fraction = c.train_fraction;
    const SeriesRecord r = generate_synthetic(s, c.seed);
    write_csv(r, out / "series.csv");
    write_components_csv(r, out / "components.csv");
    std::cout << "wrote " << r.size() << " days to " << (out / "series.csv").string() << '\n';
    return kOk;
}

int cmd_train(const Globals& g) {
    const RunConfig c = resolve(g);
    const fs::path out = prepare_out(g, c, "train");
    const Dataset data = build_dataset(c);
    HydroFusionModel model(c.model);
    Trainer trainer(model, data, c.train);
    const TrainHistory h = trainer.fit([](const EpochRecord& e) {
        std::fprintf(stderr, "epoch %3zu  train %.5f  val_sup %.5f  val_mse %.5f  Q %.1f\n", e.epoch, e.train.total,
                     e.val_sup, e.val_mse, e.q_percentile);
    });
    save_checkpoint(out / "checkpoint.json", model, &trainer.optimizer(), c.hash(), h.best_epoch);
    write_history(out / "history.jsonl", h);
    nlohmann::json j = {{"best_epoch", h.best_epoch},
                        {"stopped_early", h.stopped_early},
                        {"validation", report_json(evaluate(model, data, data.windows.validation), data, c.physical_units)}};
    write_text(out / "train_metrics.json", j.dump(2));
    std::cout << "best epoch " << h.best_epoch << ", validation loss " << h.best_val << '\n';
    return kOk;
}

int cmd_evaluate(const Globals& g, const std::string& checkpoint) {
    const RunConfig c = resolve(g);
    const fs::path out = prepare_out(g, c, "evaluate");
    const Dataset data = build_dataset(c);
    const auto model = load_model(c, resolved_checkpoint(checkpoint, out));
    const double q = data.stats.flood_threshold;
    nlohmann::json j = {
        {"validation", report_json(evaluate(*model, data, data.windows.validation), data, c.physical_units)},
        {"test", report_json(evaluate(*model, data, data.windows.test), data, c.physical_units)},
        {"baselines",
         {{"persistence", report_json(score(persistence_forecast(data, data.windows.test), q), data, c.physical_units)},
          {"seasonal_naive",
           report_json(score(seasonal_naive_forecast(data, data.windows.test), q), data, c.physical_units)}}},
    };
    write_text(out / "metrics.json", j.dump(2));
    std::cout << j.dump(2) << '\n';
    return kOk;
}

int cmd_ablate(const Globals& g) {
    const RunConfig c = resolve(g);
    const fs::path out = prepare_out(g, c, "ablate");
    const Dataset data = build_dataset(c);
    const auto rows = run_ablations(data, c.model, c.train, [](const VariantResult& r) {
        std::fprintf(stderr, "%-28s mse %.6f mae %.6f\n", r.name.c_str(), r.test.mse, r.test.mae);
    });
    write_text(out / "ablation.md", ablation_markdown(rows));
    write_text(out / "ablation.csv", ablation_csv(rows));
    const VariantResult tsr = run_variant(data, c.model, c.train, tsr_only_variant());
    const double q = data.stats.flood_threshold;
    nlohmann::json refs = {
        {"persistence", report_json(score(persistence_forecast(data, data.windows.test), q), data, c.physical_units)},
        {"seasonal_naive", report_json(score(seasonal_naive_forecast(data, data.windows.test), q), data, c.physical_units)},
        {"tsr_only", report_json(tsr.test, data, c.physical_units)},
    };
    write_text(out / "baselines.json", refs.dump(2));
    std::cout << ablation_markdown(rows);
    return kOk;
}

int cmd_forecast(const Globals& g, const std::string& checkpoint, const std::string& anchor_date) {
    const RunConfig c = resolve(g);
    const fs::path out = prepare_out(g, c, "forecast");
    const Dataset data = build_dataset(c);
    const auto model = load_model(c, resolved_checkpoint(checkpoint, out));
    std::size_t anchor = data.record.size() - 1;
    if (!anchor_date.empty()) {
        const auto d = parse_date(anchor_date);
        if (!d) throw CLI::ValidationError("--anchor", "expected YYYY-MM-DD, got " + anchor_date);
        const auto it = std::find(data.record.dates.begin(), data.record.dates.end(), *d);
        if (it == data.record.dates.end()) throw DataError(0, "anchor date " + anchor_date + " is not in the series");
        anchor = static_cast<std::size_t>(it - data.record.dates.begin());
    }
    write_forecast_csv(out / "forecast.csv", *model, data, anchor);
    write_window_components_csv(out / "components.csv", *model, data, anchor);
    write_gate_trace_csv(out / "gate_trace.csv", *model, data, data.windows.test);
    std::cout << "forecast from " << format_date(data.record.dates[anchor]) << " written to "
              << (out / "forecast.csv").string() << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Daily runoff forecasting with decomposition and gated experts"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "INI run configuration")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Override the run seed");
    app.add_option("--out", g.out, "Output directory")->capture_default_str();

    std::string checkpoint, anchor;
    auto* generate = app.add_subcommand("generate", "Write a synthetic series and its components");
    auto* train = app.add_subcommand("train", "Train and write the best checkpoint");
    auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a checkpoint on validation and test windows");
    auto* ablate = app.add_subcommand("ablate", "Train and score the nine ablation variants");
    auto* forecast = app.add_subcommand("forecast", "Write an H-step forecast, components and gate trace");
    for (auto* sub : {evaluate_cmd, forecast}) {
        sub->add_option("--checkpoint", checkpoint, "Checkpoint path (default OUT/checkpoint.json)");
    }
    forecast->add_option("--anchor", anchor, "Last observed day, YYYY-MM-DD (default: last day)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }
    try {
        if (*generate) return cmd_generate(g);
        if (*train) return cmd_train(g);
        if (*evaluate_cmd) return cmd_evaluate(g, checkpoint);
        if (*ablate) return cmd_ablate(g);
        if (*forecast) return cmd_forecast(g, checkpoint, anchor);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const CLI::Error& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid input: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    }
    return kUsage;
}
