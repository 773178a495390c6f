#include "hydrofusion/evaluation.hpp"
#include "test_util.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

using namespace hydrofusion;
namespace fs = std::filesystem;

namespace {

const Dataset& shared_data() {
    static const Dataset d = [] {
        SyntheticConfig s;
        s.years = 3;
        const SeriesRecord r = generate_synthetic(s, 33);
        WindowConfig w;
        w.window = 60;
        w.horizon = 7;
        return prepare_dataset(r, SplitSpec::chronological(r.size()), w);
    }();
    return d;
}

ModelConfig model_config() {
    ModelConfig c;
    c.window = 60;
    c.horizon = 7;
    c.seed = 8;
    return c;
}

Forecasts toy() {
    Forecasts f;
    f.horizon = 3;
    f.anchors = {10, 11};
    f.observed = {1, 2, 3, 2, 2, 4};
    f.predicted = {1.5, 2, 2, 2, 3, 4};
    return f;
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream is(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(is, line);) out.push_back(line);
    return out;
}

}  // namespace

TEST(Score, ToyWindows) {
    const MetricReport r = score(toy(), 100.0);
    EXPECT_NEAR(r.mse, 0.375, 1e-15);  // frozen oracle
    EXPECT_NEAR(r.mae, 0.4166666666666667, 1e-15);
    EXPECT_NEAR(r.nse, 0.5, 1e-15);
    EXPECT_NEAR(r.kge, 0.5221997538079178, 1e-12);
    EXPECT_EQ(r.windows, 2u);
    EXPECT_EQ(r.pairs, 6u);
    EXPECT_EQ(r.extremes.events, 0u);
    EXPECT_FALSE(r.extremes.high_flow_f1.has_value());
}

TEST(Score, PerfectForecast) {
    Forecasts f = toy();
    f.predicted = f.observed;
    const MetricReport r = score(f, 1.5);  // lead-1 series is {1, 2}
    EXPECT_EQ(r.mse, 0.0);
    EXPECT_EQ(r.mae, 0.0);
    EXPECT_DOUBLE_EQ(r.nse, 1.0);
    EXPECT_DOUBLE_EQ(r.kge, 1.0);
    EXPECT_EQ(*r.extremes.high_flow_f1, 1.0);
    EXPECT_EQ(*r.extremes.peak_discharge_error, 0.0);
}

TEST(Score, WindowMeanPredictorHasZeroNse) {
    Forecasts f = toy();
    for (std::size_t w = 0; w < 2; ++w) {
        const double m = (f.observed[3 * w] + f.observed[3 * w + 1] + f.observed[3 * w + 2]) / 3.0;
        for (std::size_t h = 0; h < 3; ++h) f.predicted[3 * w + h] = m;
    }
    EXPECT_NEAR(score(f, 100.0).nse, 0.0, 1e-15);
}

TEST(Score, FlatWindowsAreSkipped) {
    Forecasts f = toy();
    f.observed = {1, 1, 1, 2, 2, 4};
    const MetricReport r = score(f, 100.0);
    EXPECT_EQ(r.nse_skipped, 1u);
    EXPECT_EQ(r.kge_skipped, 1u);
}

TEST(Score, InconsistentInputThrows) {
    Forecasts f = toy();
    f.predicted.pop_back();
    EXPECT_THROW(score(f, 0.0), std::invalid_argument);
    EXPECT_THROW(score(Forecasts{}, 0.0), std::invalid_argument);
}

TEST(Score, PhysicalUnits) {
    MetricReport r = score(toy(), 100.0);
    add_physical_units(r, Scaler{10.0, 3.0});
    EXPECT_NEAR(*r.mse_physical, 0.375 * 9.0, 1e-12);
    EXPECT_NEAR(*r.mae_physical, 0.4166666666666667 * 3.0, 1e-12);
    EXPECT_FALSE(r.peak_discharge_error_physical.has_value());
    EXPECT_NE(r.to_json().find("\"physical\""), std::string::npos);
}

TEST(F1, Example) {
    const std::vector<unsigned char> obs = {1, 0, 0, 1}, pred = {1, 0, 0, 0};
    EXPECT_NEAR(*exceedance_f1(obs, pred), 2.0 / 3.0, 1e-15);  // frozen oracle
}

TEST(F1, NoObservedPositives) {
    const std::vector<unsigned char> obs = {0, 0, 0}, pred = {1, 0, 0};
    EXPECT_FALSE(exceedance_f1(obs, pred).has_value());
    const std::vector<unsigned char> shorter = {0, 0};
    EXPECT_THROW(exceedance_f1(obs, shorter), std::invalid_argument);
}

TEST(Extremes, TwoEvents) {
    const std::vector<double> obs = {0, 0, 5, 7, 3, 0, 0, 0, 6, 0};
    const std::vector<double> pred = {0, 0, 4, 5, 6, 2, 0, 0, 0, 7};
    const ExtremeMetrics m = extreme_event_metrics(obs, pred, 1.0);
    EXPECT_EQ(m.events, 2u);
    // peaks: |7-6| and |6-0|; timing: day 3 vs 4 and day 8 vs 9 (inside the margin)
    EXPECT_DOUBLE_EQ(*m.peak_discharge_error, 3.5);
    EXPECT_DOUBLE_EQ(*m.peak_timing_error_days, 1.0);
    // tp 3, fp 2, fn 1
    EXPECT_DOUBLE_EQ(*m.high_flow_f1, 6.0 / 9.0);
}

TEST(Extremes, TimingMarginLimitsSearch) {
    const std::vector<double> obs = {0, 0, 0, 5, 0, 0, 0, 0};
    const std::vector<double> pred = {0, 0, 0, 1, 0, 0, 0, 9};
    EXPECT_DOUBLE_EQ(*extreme_event_metrics(obs, pred, 1.0, 2).peak_timing_error_days, 0.0);
    EXPECT_DOUBLE_EQ(*extreme_event_metrics(obs, pred, 1.0, 4).peak_timing_error_days, 4.0);
}

TEST(Extremes, NoEventsGivesAbsentMetrics) {
    const std::vector<double> obs = {0, 0.5, 1.0}, pred = {3, 3, 3};
    const ExtremeMetrics m = extreme_event_metrics(obs, pred, 1.0);
    EXPECT_EQ(m.events, 0u);
    EXPECT_FALSE(m.peak_discharge_error.has_value());
    EXPECT_FALSE(m.peak_timing_error_days.has_value());
    EXPECT_FALSE(m.high_flow_f1.has_value());
}

TEST(Baselines, PersistenceExactOnConstantSeries) {
    Dataset d = shared_data();
    std::fill(d.runoff.begin(), d.runoff.end(), 0.7);
    const Forecasts f = persistence_forecast(d, d.windows.test);
    ASSERT_EQ(f.windows(), d.windows.test.size());
    EXPECT_EQ(score(f, d.stats.flood_threshold).mse, 0.0);
}

TEST(Baselines, PersistenceRepeatsAnchorValue) {
    const Dataset& d = shared_data();
    const Forecasts f = persistence_forecast(d, d.windows.validation);
    for (std::size_t w = 0; w < f.windows(); ++w) {
        for (std::size_t h = 0; h < f.horizon; ++h) {
            EXPECT_EQ(f.predicted[w * f.horizon + h], d.runoff[f.anchors[w]]);
            EXPECT_EQ(f.observed[w * f.horizon + h], d.runoff[f.anchors[w] + h + 1]);
        }
    }
}

TEST(Baselines, SeasonalNaiveExactOnPeriodicSeries) {
    Dataset d = shared_data();
    for (std::size_t t = 0; t < d.runoff.size(); ++t) {
        d.runoff[t] = std::sin(2.0 * std::numbers::pi * static_cast<double>(t % 365) / 365.0);
    }
    const MetricReport r = score(seasonal_naive_forecast(d, d.windows.test), d.stats.flood_threshold);
    EXPECT_EQ(r.mse, 0.0);
    EXPECT_THROW(seasonal_naive_forecast(d, d.windows.test, 5), std::invalid_argument);
}

TEST(Predict, MatchesForwardPass) {
    const Dataset& d = shared_data();
    const HydroFusionModel m(model_config());
    const std::vector<WindowSample> ws(d.windows.test.begin(), d.windows.test.begin() + 3);
    const Forecasts f = predict(m, d, ws);
    const Batch b = make_batch(d, ws, true);
    const Tensor y = m.forward(b.input).forecast;
    ASSERT_EQ(f.predicted.size(), y.numel());
    for (std::size_t i = 0; i < y.numel(); ++i) {
        EXPECT_EQ(f.predicted[i], y[i]);
        EXPECT_EQ(f.observed[i], b.target[i]);
    }
}

TEST(Ablation, NineRowsWithDistinctNames) {
    const auto v = ablation_variants();
    ASSERT_EQ(v.size(), 9u);
    EXPECT_EQ(v[0].name, "full");
    std::set<std::string> names;
    for (const auto& a : v) names.insert(a.name);
    EXPECT_EQ(names.size(), 9u);
    for (std::size_t k = 0; k < kExpertCount; ++k) {
        ModelConfig m;
        TrainConfig t;
        v[4 + k].apply(m, t);
        EXPECT_EQ(m.experts.count(), 1u);
        EXPECT_TRUE(m.experts.test(k));
    }
    ModelConfig m;
    TrainConfig t;
    v[3].apply(m, t);
    EXPECT_EQ(t.weights.mask + t.weights.ctr + t.weights.cons + t.weights.pl, 0.0);
}

TEST(Ablation, TsrOnlyForcesResidualToZero) {
    ModelConfig c = model_config();
    TrainConfig t;
    tsr_only_variant().apply(c, t);
    EXPECT_FALSE(c.residual);
    const HydroFusionModel m(c);
    const Dataset& d = shared_data();
    const Batch b = make_batch(d, std::span<const WindowSample>(d.windows.test.data(), 4), false);
    const ModelOutput out = m.forward(b.input);
    for (std::size_t i = 0; i < out.forecast.numel(); ++i) {
        EXPECT_EQ(out.residual_hat[i], 0.0);
        EXPECT_DOUBLE_EQ(out.forecast[i], out.trend_hat[i] + out.seasonal_hat[i]);
    }
}

TEST(Ablation, MarkdownAndCsvRows) {
    VariantResult r;
    r.name = "full";
    r.label = "Full model";
    r.test = score(toy(), 100.0);
    const std::string md = ablation_markdown({r, r});
    EXPECT_NE(md.find("| Full model | 0.375000"), std::string::npos);
    EXPECT_NE(md.find("n/a"), std::string::npos);
    const std::string csv = ablation_csv({r});
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
}

TEST(Output, ForecastAndGateTraceFiles) {
    const Dataset& d = shared_data();
    const HydroFusionModel m(model_config());
    const fs::path dir = fs::temp_directory_path() / "hf_eval_test";
    fs::create_directories(dir);
    const std::size_t anchor = d.windows.test.front().anchor;
    write_forecast_csv(dir / "f.csv", m, d, anchor);
    const auto f = read_lines(dir / "f.csv");
    ASSERT_EQ(f.size(), 1 + d.config.horizon);
    EXPECT_EQ(f[0], "date,forecast,trend_component,seasonal_component,residual_component");
    // components sum to the forecast in physical units
    for (std::size_t i = 1; i < f.size(); ++i) {
        std::stringstream ss(f[i]);
        std::string date, cell;
        std::getline(ss, date, ',');
        std::vector<double> v;
        while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
        ASSERT_EQ(v.size(), 4u);
        EXPECT_NEAR(v[0], v[1] + v[2] + v[3], 1e-6 * (1.0 + std::abs(v[0])));
    }
    write_gate_trace_csv(dir / "g.csv", m, d, d.windows.validation);
    const auto g = read_lines(dir / "g.csv");
    ASSERT_EQ(g.size(), 1 + d.windows.validation.size());
    EXPECT_EQ(g[0], "date,linear,frequency,patch_transformer,lstm,dyn_norm_attention,entropy");
    write_window_components_csv(dir / "w.csv", m, d, anchor);
    EXPECT_EQ(read_lines(dir / "w.csv").size(), 1 + d.config.window);
    EXPECT_THROW(write_forecast_csv(dir / "x.csv", m, d, 3), std::invalid_argument);
    fs::remove_all(dir);
}
