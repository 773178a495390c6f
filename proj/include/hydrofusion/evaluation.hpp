#pragma once

// Test metrics, reference forecasters, the ablation runner and CSV/JSON dumps.

#include "hydrofusion/training.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace hydrofusion {

// Window forecasts in standardised units, row-major [windows, H].
struct Forecasts {
    std::size_t horizon = 0;
    std::vector<std::size_t> anchors;
    std::vector<double> predicted;
    std::vector<double> observed;

    std::size_t windows() const { return anchors.size(); }
};

Forecasts predict(const HydroFusionModel& model, const Dataset& data, const std::vector<WindowSample>& windows);
// x̂(t+h) = x(t)
Forecasts persistence_forecast(const Dataset& data, const std::vector<WindowSample>& windows);
// x̂(t+h) = x(t+h-period) from the full history.
Forecasts seasonal_naive_forecast(const Dataset& data, const std::vector<WindowSample>& windows,
                                  std::size_t period = 365);

struct ExtremeMetrics {
    std::size_t events = 0;
    std::optional<double> peak_discharge_error;
    std::optional<double> peak_timing_error_days;
    std::optional<double> high_flow_f1;
};

// Events are maximal runs of observed > threshold. Peak timing searches the
// prediction within the event span widened by `margin` days on both sides.
ExtremeMetrics extreme_event_metrics(std::span<const double> observed, std::span<const double> predicted,
                                     double threshold, std::size_t margin = 2);

// 2·tp / (2·tp + fp + fn) over per-day exceedance flags; nullopt without observed positives.
std::optional<double> exceedance_f1(std::span<const unsigned char> observed, std::span<const unsigned char> predicted);

struct MetricReport {
    double mse = 0.0;
    double mae = 0.0;
    double nse = 0.0;  // per-window mean over non-degenerate windows
    double kge = 0.0;
    std::size_t windows = 0;
    std::size_t pairs = 0;
    std::size_t nse_skipped = 0;
    std::size_t kge_skipped = 0;
    ExtremeMetrics extremes;
    // filled when physical units are requested
    std::optional<double> mse_physical;
    std::optional<double> mae_physical;
    std::optional<double> peak_discharge_error_physical;

    std::string to_json() const;
};

// Pointwise and per-window scores of a forecast set. Extreme-event metrics use
// the lead-1 forecasts, which cover consecutive days when anchors do.
MetricReport score(const Forecasts& f, double flood_threshold);
void add_physical_units(MetricReport& report, const Scaler& runoff_scaler);

MetricReport evaluate(const HydroFusionModel& model, const Dataset& data, const std::vector<WindowSample>& windows);

struct AblationVariant {
    std::string name;
    std::string label;
    std::function<void(ModelConfig&, TrainConfig&)> apply;
};

// The nine table rows: full, no_tsr, no_gating, no_semi and one per expert.
std::vector<AblationVariant> ablation_variants();
// Trend plus seasonal extrapolation with a zero residual forecast.
AblationVariant tsr_only_variant();

struct VariantResult {
    std::string name;
    std::string label;
    MetricReport test;
    TrainHistory history;
};

VariantResult run_variant(const Dataset& data, const ModelConfig& model_config, const TrainConfig& train_config,
                          const AblationVariant& variant, std::unique_ptr<HydroFusionModel>* trained = nullptr);

std::vector<VariantResult> run_ablations(const Dataset& data, const ModelConfig& model_config,
                                         const TrainConfig& train_config,
                                         const std::function<void(const VariantResult&)>& on_variant = {});

std::string ablation_markdown(const std::vector<VariantResult>& rows);
std::string ablation_csv(const std::vector<VariantResult>& rows);

// date,forecast,trend_component,seasonal_component,residual_component in m³/s
// for the H days after `anchor`.
void write_forecast_csv(const std::filesystem::path& path, const HydroFusionModel& model, const Dataset& data,
                        std::size_t anchor);
// date,observed,trend,seasonal,residual over the input window ending at `anchor` (m³/s).
void write_window_components_csv(const std::filesystem::path& path, const HydroFusionModel& model,
                                  const Dataset& data, std::size_t anchor);
// date,<one column per expert>,entropy for every window anchor.
void write_gate_trace_csv(const std::filesystem::path& path, const HydroFusionModel& model, const Dataset& data,
                          const std::vector<WindowSample>& windows);

}  // namespace hydrofusion
