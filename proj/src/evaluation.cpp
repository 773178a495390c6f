#include "hydrofusion/evaluation.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace hydrofusion {

using nlohmann::json;

namespace {

constexpr std::size_t kChunk = 128;

Forecasts empty_forecasts(const Dataset& data, const std::vector<WindowSample>& windows) {
    Forecasts f;
    f.horizon = data.config.horizon;
    f.anchors.reserve(windows.size());
    f.observed.reserve(windows.size() * f.horizon);
    for (const auto& w : windows) {
        if (w.anchor + f.horizon >= data.runoff.size()) {
            throw std::invalid_argument("forecast window at " + std::to_string(w.anchor) + " runs past the record");
        }
        f.anchors.push_back(w.anchor);
        for (std::size_t h = 1; h <= f.horizon; ++h) f.observed.push_back(data.runoff[w.anchor + h]);
    }
    return f;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string fixed(double v, int digits = 6) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

std::string fixed(const std::optional<double>& v, int digits = 6) { return v ? fixed(*v, digits) : "n/a"; }

std::string day_after(const Dataset& data, std::size_t anchor, std::size_t h) {
    const std::chrono::sys_days d = std::chrono::sys_days(data.record.dates[anchor]) + std::chrono::days(h);
    return format_date(Date(d));
}

void check_anchor(const Dataset& data, std::size_t anchor) {
    if (anchor >= data.runoff.size() || anchor + 1 < data.config.window) {
        throw std::invalid_argument("anchor " + std::to_string(anchor) + " has no complete input window");
    }
}

}  // namespace

Forecasts predict(const HydroFusionModel& model, const Dataset& data, const std::vector<WindowSample>& windows) {
    Forecasts f = empty_forecasts(data, windows);
    f.predicted.reserve(f.observed.size());
    for (std::size_t first = 0; first < windows.size(); first += kChunk) {
        const std::size_t n = std::min(kChunk, windows.size() - first);
        const Batch b = make_batch(data, std::span<const WindowSample>(windows.data() + first, n), false);
        const Tensor y = model.forward(b.input).forecast;
        const auto out = y.data();
        f.predicted.insert(f.predicted.end(), out.begin(), out.end());
    }
    return f;
}

Forecasts persistence_forecast(const Dataset& data, const std::vector<WindowSample>& windows) {
    Forecasts f = empty_forecasts(data, windows);
    for (std::size_t t : f.anchors) f.predicted.insert(f.predicted.end(), f.horizon, data.runoff[t]);
    return f;
}

Forecasts seasonal_naive_forecast(const Dataset& data, const std::vector<WindowSample>& windows, std::size_t period) {
    if (period <= data.config.horizon) throw std::invalid_argument("seasonal naive: period must exceed the horizon");
    Forecasts f = empty_forecasts(data, windows);
    for (std::size_t t : f.anchors) {
        if (t + 1 < period) throw std::invalid_argument("seasonal naive: less than one period of history at " + std::to_string(t));
        for (std::size_t h = 1; h <= f.horizon; ++h) f.predicted.push_back(data.runoff[t + h - period]);
    }
    return f;
}

std::optional<double> exceedance_f1(std::span<const unsigned char> observed, std::span<const unsigned char> predicted) {
    if (observed.size() != predicted.size()) throw std::invalid_argument("f1: flag sequences differ in length");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < observed.size(); ++i) {
        if (observed[i] && predicted[i]) ++tp;
        else if (predicted[i]) ++fp;
        else if (observed[i]) ++fn;
    }
    if (tp + fn == 0) return std::nullopt;
    return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

ExtremeMetrics extreme_event_metrics(std::span<const double> observed, std::span<const double> predicted,
                                     double threshold, std::size_t margin) {
    if (observed.size() != predicted.size()) throw std::invalid_argument("extremes: series differ in length");
    const std::size_t n = observed.size();
    ExtremeMetrics m;
    std::vector<unsigned char> obs_flag(n), pred_flag(n);
    for (std::size_t i = 0; i < n; ++i) {
        obs_flag[i] = observed[i] > threshold;
        pred_flag[i] = predicted[i] > threshold;
    }
    double peak_sum = 0.0, timing_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
        if (!obs_flag[i]) {
            ++i;
            continue;
        }
        std::size_t end = i;
        while (end < n && obs_flag[end]) ++end;
        const auto obs_it = std::max_element(observed.begin() + static_cast<std::ptrdiff_t>(i),
                                             observed.begin() + static_cast<std::ptrdiff_t>(end));
        const double pred_peak = *std::max_element(predicted.begin() + static_cast<std::ptrdiff_t>(i),
                                                   predicted.begin() + static_cast<std::ptrdiff_t>(end));
        const std::size_t lo = i >= margin ? i - margin : 0;
        const std::size_t hi = std::min(n, end + margin);
        const auto pred_it = std::max_element(predicted.begin() + static_cast<std::ptrdiff_t>(lo),
                                              predicted.begin() + static_cast<std::ptrdiff_t>(hi));
        peak_sum += std::abs(*obs_it - pred_peak);
        const auto obs_day = std::distance(observed.begin(), obs_it);
        const auto pred_day = std::distance(predicted.begin(), pred_it);
        timing_sum += static_cast<double>(std::abs(obs_day - pred_day));
        ++m.events;
        i = end;
    }
    if (m.events > 0) {
        m.peak_discharge_error = peak_sum / static_cast<double>(m.events);
        m.peak_timing_error_days = timing_sum / static_cast<double>(m.events);
        m.high_flow_f1 = exceedance_f1(obs_flag, pred_flag);
    }
    return m;
}

MetricReport score(const Forecasts& f, double flood_threshold) {
    const std::size_t H = f.horizon, W = f.windows();
    if (W == 0 || f.predicted.size() != W * H || f.observed.size() != W * H) {
        throw std::invalid_argument("score: empty or inconsistent forecast set");
    }
    MetricReport r;
    r.windows = W;
    r.pairs = W * H;
    double se = 0.0, ae = 0.0, nse_sum = 0.0, kge_sum = 0.0;
    for (std::size_t i = 0; i < r.pairs; ++i) {
        const double e = f.predicted[i] - f.observed[i];
        se += e * e;
        ae += std::abs(e);
    }
    r.mse = se / static_cast<double>(r.pairs);
    r.mae = ae / static_cast<double>(r.pairs);
    for (std::size_t w = 0; w < W; ++w) {
        const std::span<const double> obs(f.observed.data() + w * H, H);
        const std::span<const double> pred(f.predicted.data() + w * H, H);
        if (const auto v = nse(obs, pred)) nse_sum += *v;
        else ++r.nse_skipped;
        if (const auto v = kge(obs, pred)) kge_sum += *v;
        else ++r.kge_skipped;
    }
    if (r.nse_skipped < W) r.nse = nse_sum / static_cast<double>(W - r.nse_skipped);
    if (r.kge_skipped < W) r.kge = kge_sum / static_cast<double>(W - r.kge_skipped);
    std::vector<double> obs1(W), pred1(W);
    for (std::size_t w = 0; w < W; ++w) {
        obs1[w] = f.observed[w * H];
        pred1[w] = f.predicted[w * H];
    }
    r.extremes = extreme_event_metrics(obs1, pred1, flood_threshold);
    return r;
}

void add_physical_units(MetricReport& r, const Scaler& s) {
    r.mse_physical = r.mse * s.std * s.std;
    r.mae_physical = r.mae * s.std;
    if (r.extremes.peak_discharge_error) r.peak_discharge_error_physical = *r.extremes.peak_discharge_error * s.std;
}

MetricReport evaluate(const HydroFusionModel& model, const Dataset& data, const std::vector<WindowSample>& windows) {
    return score(predict(model, data, windows), data.stats.flood_threshold);
}

std::string MetricReport::to_json() const {
    json j = {{"mse", mse},
              {"mae", mae},
              {"nse", nse},
              {"kge", kge},
              {"windows", windows},
              {"pairs", pairs},
              {"nse_skipped", nse_skipped},
              {"kge_skipped", kge_skipped},
              {"events", extremes.events},
              {"peak_discharge_error", optional_json(extremes.peak_discharge_error)},
              {"peak_timing_error_days", optional_json(extremes.peak_timing_error_days)},
              {"high_flow_f1", optional_json(extremes.high_flow_f1)}};
    if (mse_physical) {
        j["physical"] = {{"mse", *mse_physical},
                         {"mae", *mae_physical},
                         {"peak_discharge_error", optional_json(peak_discharge_error_physical)}};
    }
    return j.dump(2);
}

std::vector<AblationVariant> ablation_variants() {
    std::vector<AblationVariant> v = {
        {"full", "Full model", [](ModelConfig&, TrainConfig&) {}},
        {"no_tsr", "w/o trend-seasonal decomposition", [](ModelConfig& m, TrainConfig&) { m.decomposition = false; }},
        {"no_gating", "w/o gating (uniform fusion)", [](ModelConfig& m, TrainConfig&) { m.learned_gate = false; }},
        {"no_semi", "w/o semi-supervised losses",
         [](ModelConfig&, TrainConfig& t) { t.weights.mask = t.weights.ctr = t.weights.cons = t.weights.pl = 0.0; }},
    };
    const char* labels[kExpertCount] = {"Only linear expert", "Only frequency expert", "Only patch transformer expert",
                                        "Only LSTM expert", "Only dynamic-normalisation attention expert"};
    for (std::size_t k = 0; k < kExpertCount; ++k) {
        v.push_back({"only_" + std::string(kExpertNames[k]), labels[k], [k](ModelConfig& m, TrainConfig&) {
                         m.experts.reset();
                         m.experts.set(k);
                     }});
    }
    return v;
}

AblationVariant tsr_only_variant() {
    return {"tsr_only", "Trend + seasonal only", [](ModelConfig& m, TrainConfig&) { m.residual = false; }};
}

VariantResult run_variant(const Dataset& data, const ModelConfig& model_config, const TrainConfig& train_config,
                          const AblationVariant& variant, std::unique_ptr<HydroFusionModel>* trained) {
    ModelConfig mc = model_config;
    TrainConfig tc = train_config;
    variant.apply(mc, tc);
    auto model = std::make_unique<HydroFusionModel>(mc);
    Trainer trainer(*model, data, tc);
    VariantResult r;
    r.name = variant.name;
    r.label = variant.label;
    r.history = trainer.fit();
    r.test = evaluate(*model, data, data.windows.test);
    if (trained != nullptr) *trained = std::move(model);
    return r;
}

std::vector<VariantResult> run_ablations(const Dataset& data, const ModelConfig& model_config,
                                         const TrainConfig& train_config,
                                         const std::function<void(const VariantResult&)>& on_variant) {
    std::vector<VariantResult> rows;
    for (const auto& v : ablation_variants()) {
        rows.push_back(run_variant(data, model_config, train_config, v));
        if (on_variant) on_variant(rows.back());
    }
    return rows;
}

std::string ablation_markdown(const std::vector<VariantResult>& rows) {
    std::ostringstream os;
    os << "| Variant | MSE | MAE | NSE | KGE | Peak error | Peak timing (days) | High-flow F1 | Best epoch |\n";
    os << "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
        os << "| " << r.label << " | " << fixed(r.test.mse) << " | " << fixed(r.test.mae) << " | " << fixed(r.test.nse, 4)
           << " | " << fixed(r.test.kge, 4) << " | " << fixed(r.test.extremes.peak_discharge_error, 4) << " | "
           << fixed(r.test.extremes.peak_timing_error_days, 2) << " | " << fixed(r.test.extremes.high_flow_f1, 4)
           << " | " << r.history.best_epoch << " |\n";
    }
    os << "\nErrors are in standardised runoff units. Events are maximal runs of test days above the training "
          "0.9 quantile; peak timing searches the forecast within 2 days of the event; extreme metrics use lead-1 "
          "forecasts. The standardised peak error is not comparable with MSE magnitudes in physical units.\n";
    return os.str();
}

std::string ablation_csv(const std::vector<VariantResult>& rows) {
    std::ostringstream os;
    os << "variant,mse,mae,nse,kge,peak_discharge_error,peak_timing_error_days,high_flow_f1,events,best_epoch\n";
    auto opt = [](const std::optional<double>& v) { return v ? fixed(*v, 9) : std::string(); };
    for (const auto& r : rows) {
        os << r.name << ',' << fixed(r.test.mse, 9) << ',' << fixed(r.test.mae, 9) << ',' << fixed(r.test.nse, 9) << ','
           << fixed(r.test.kge, 9) << ',' << opt(r.test.extremes.peak_discharge_error) << ','
           << opt(r.test.extremes.peak_timing_error_days) << ',' << opt(r.test.extremes.high_flow_f1) << ','
           << r.test.extremes.events << ',' << r.history.best_epoch << '\n';
    }
    return os.str();
}

void write_forecast_csv(const std::filesystem::path& path, const HydroFusionModel& model, const Dataset& data,
                        std::size_t anchor) {
    check_anchor(data, anchor);
    const WindowSample w{anchor, false};
    const Batch b = make_batch(data, std::span<const WindowSample>(&w, 1), false);
    const ModelOutput out = model.forward(b.input);
    const auto f = out.forecast.data();
    const auto th = out.trend_hat.data();
    const auto sh = out.seasonal_hat.data();
    const auto rh = out.residual_hat.data();
    const Scaler& s = data.runoff_scaler;
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "date,forecast,trend_component,seasonal_component,residual_component\n" << std::setprecision(10);
    for (std::size_t h = 0; h < f.size(); ++h) {
        // the mean goes with the trend so the three components sum to the forecast
        os << day_after(data, anchor, h + 1) << ',' << s.invert(f[h]) << ',' << s.invert(th[h]) << ','
           << sh[h] * s.std << ',' << rh[h] * s.std << '\n';
    }
}

void write_window_components_csv(const std::filesystem::path& path, const HydroFusionModel& model,
                                  const Dataset& data, std::size_t anchor) {
    check_anchor(data, anchor);
    const WindowSample w{anchor, false};
    const Batch b = make_batch(data, std::span<const WindowSample>(&w, 1), false);
    const ModelOutput out = model.forward(b.input);
    const auto T = out.trend.data();
    const auto S = out.seasonal.data();
    const auto R = out.residual.data();
    const Scaler& s = data.runoff_scaler;
    const std::size_t L = data.config.window, first = anchor + 1 - L;
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "date,observed,trend,seasonal,residual\n" << std::setprecision(10);
    for (std::size_t i = 0; i < L; ++i) {
        os << format_date(data.record.dates[first + i]) << ',' << data.record.runoff[first + i] << ','
           << s.invert(T[i]) << ',' << S[i] * s.std << ',' << R[i] * s.std << '\n';
    }
}

void write_gate_trace_csv(const std::filesystem::path& path, const HydroFusionModel& model, const Dataset& data,
                          const std::vector<WindowSample>& windows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "date";
    for (auto name : kExpertNames) os << ',' << name;
    os << ",entropy\n" << std::setprecision(10);
    for (std::size_t first = 0; first < windows.size(); first += kChunk) {
        const std::size_t n = std::min(kChunk, windows.size() - first);
        const Batch b = make_batch(data, std::span<const WindowSample>(windows.data() + first, n), false);
        const Tensor gate = model.forward(b.input).gate;
        const Tensor entropy = gate_entropy(gate);
        const auto g = gate.data();
        for (std::size_t i = 0; i < n; ++i) {
            os << format_date(data.record.dates[windows[first + i].anchor]);
            for (std::size_t k = 0; k < kExpertCount; ++k) os << ',' << g[i * kExpertCount + k];
            os << ',' << entropy[i] << '\n';
        }
    }
}

}  // namespace hydrofusion
