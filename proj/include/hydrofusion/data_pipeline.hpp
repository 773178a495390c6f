#pragma once

// Daily series records, the synthetic hydrograph generator, CSV I/O,
// chronological splits, windowing and batch assembly.

#include "hydrofusion/context_gating.hpp"
#include "hydrofusion/model.hpp"

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hydrofusion {

using Date = std::chrono::year_month_day;

std::string format_date(const Date& d);
// Strict YYYY-MM-DD; nullopt when malformed or not a calendar day.
std::optional<Date> parse_date(std::string_view text);

struct SeriesComponents {
    std::vector<double> trend, seasonal, residual;
};

struct SeriesRecord {
    std::vector<Date> dates;
    std::vector<double> runoff;   // m³/s
    std::vector<double> precip;   // mm/day
    std::vector<double> temp;     // °C
    std::vector<unsigned char> labeled;
    std::vector<std::string> extra_names;
    std::vector<std::vector<double>> extra;  // one column per name
    std::array<double, kStaticDescriptors> static_desc{};
    std::optional<SeriesComponents> truth;

    std::size_t size() const { return dates.size(); }
    // Throws DataError on unequal lengths, non-consecutive dates, negative or
    // non-finite runoff.
    void validate() const;
};

// Data problem with the offending (1-based) row, 0 when not row specific.
class DataError : public std::runtime_error {
public:
    DataError(std::size_t row, const std::string& message);
    std::size_t row() const { return row_; }

private:
    std::size_t row_;
};

struct SyntheticConfig {
    int years = 10;
    int start_year = 2000;
    double base_flow = 30.0;
    double trend_slope_std = 0.004;    // per-day slope spread of each linear piece
    std::size_t trend_knot_days = 730;
    double seasonal_amplitude = 12.0;
    double event_rate = 0.06;          // mean storms per day
    double storm_depth = 25.0;         // mean storm precipitation (mm)
    double runoff_coefficient = 0.6;
    double recession_days = 6.0;
    double noise_scale = 0.8;          // AR(1) innovation std
    double noise_ar = 0.7;
    double regulation_amplitude = 1.5; // dry-season weekly release cycle
    double unlabeled_fraction = 0.3;   // share of training days in unlabeled blocks
    double train_fraction = 0.7;
    std::array<double, kStaticDescriptors> static_desc{0.8, -0.2, 0.4, 0.1};

    void validate() const;
};

// Deterministic in (config, seed).
SeriesRecord generate_synthetic(const SyntheticConfig& config, std::uint64_t seed);

SeriesRecord load_csv(const std::filesystem::path& path);
void write_csv(const SeriesRecord& record, const std::filesystem::path& path);
// date,trend,seasonal,residual; requires record.truth.
void write_components_csv(const SeriesRecord& record, const std::filesystem::path& path);

// Day index boundaries: train [0, train_end), validation [train_end, val_end),
// test [val_end, n).
struct SplitSpec {
    std::size_t train_end = 0;
    std::size_t val_end = 0;
    std::size_t total = 0;

    static SplitSpec chronological(std::size_t n, double train = 0.7, double validation = 0.15);
    void validate() const;
};

enum class Split { Train, Validation, Test };

// Last-day indices t of every stride-1 window whose L inputs and H targets lie
// in [begin, end): t = begin+L-1 .. end-H-1.
std::vector<std::size_t> candidate_anchors(std::size_t begin, std::size_t end, std::size_t window, std::size_t horizon);

struct WindowSample {
    std::size_t anchor = 0;  // index of the last input day
    bool labeled = false;    // all H targets carry labels
};

struct WindowStreams {
    std::vector<WindowSample> train_labeled, train_unlabeled, validation, test;
};

struct WindowConfig {
    std::size_t window = 180;
    std::size_t horizon = 30;
    ContextConfig context;
};

// Windows without the context history are dropped; validation and test keep
// only labeled windows.
WindowStreams make_windows(const SeriesRecord& record, const SplitSpec& split, const WindowConfig& config);

struct Scaler {
    double mean = 0.0;
    double std = 1.0;
    double apply(double v) const { return (v - mean) / std; }
    double invert(double v) const { return v * std + mean; }
};

Scaler fit_scaler(std::span<const double> values);

// Record plus everything frozen from the training split.
struct Dataset {
    SeriesRecord record;
    SplitSpec split;
    WindowConfig config;
    Scaler runoff_scaler;
    std::array<Scaler, 2> covariate_scalers;  // precip, temp
    std::vector<double> runoff;                // standardised, all days
    std::vector<double> covariates;            // [N, 2] standardised
    ContextStatistics stats;
    WindowStreams windows;

    std::size_t covariate_count() const { return 2; }
    std::array<double, kContextFeatures> context_features(std::size_t t) const;
};

Dataset prepare_dataset(SeriesRecord record, const SplitSpec& split, const WindowConfig& config);

struct Batch {
    ModelInput input;
    Tensor target;  // [B, H] standardised; empty for unlabeled batches
    std::vector<std::size_t> anchors;
};

Batch make_batch(const Dataset& data, std::span<const WindowSample> windows, bool with_target);

// Windows replaced by an augmented copy (runoff noise, shared crop on
// runoff and covariates); the seed of window i is seed + i.
Batch augment_batch(const Batch& batch, std::uint64_t seed, const AugmentOptions& options = {});

// Each index masked independently with probability p; an empty draw is
// redrawn once, then falls back to one uniformly chosen index.
std::vector<unsigned char> sample_mask(std::size_t length, double p, std::uint64_t seed);

struct ScaleViews {
    std::vector<double> daily, weekly, monthly;
};

// 7- and 30-day non-overlapping means, aligned to the window end.
ScaleViews aggregate_scales(std::span<const double> x);

}  // namespace hydrofusion
