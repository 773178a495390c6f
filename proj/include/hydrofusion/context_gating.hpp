#pragma once

// Hydrologic context features, the softmax gate over experts, convex fusion
// of expert forecasts and final forecast assembly.

#include "hydrofusion/experts.hpp"
#include "hydrofusion/nn.hpp"

#include <array>
#include <span>
#include <vector>

namespace hydrofusion {

struct ContextConfig {
    std::size_t variance_window = 14;  // Δ
    std::size_t api_lags = 30;         // n_p
    double api_decay = 0.9;            // γ
};

// Statistics frozen from the training split only.
struct ContextStatistics {
    double flood_threshold = 0.0;          // q_0.9 of (standardised) training runoff
    std::vector<double> sorted_precip;     // training precipitation, ascending
    double api_mean = 0.0;
    double api_std = 1.0;
};

constexpr std::size_t kStaticDescriptors = 4;
constexpr std::size_t kContextFeatures = 6 + kStaticDescriptors;

struct ContextVector {
    double doy_sin = 0.0;
    double doy_cos = 1.0;
    double api = 0.0;
    double local_var = 0.0;
    double rain_pct = 0.0;
    double flood_flag = 0.0;
    std::array<double, kStaticDescriptors> static_desc{};

    // Gate input: api standardised with the training statistics.
    std::array<double, kContextFeatures> features(const ContextStatistics& stats) const;
};

// API = Σ_{i=1..n_p} γ^{i-1} p_{t-i}; `history` ends with p_{t-1}.
// Throws std::invalid_argument for γ ∉ (0,1), n_p = 0 or short history.
double compute_api(std::span<const double> history, double gamma, std::size_t lags);

// Fraction of training values ≤ value (empirical CDF), in [0, 1].
double empirical_percentile(const std::vector<double>& sorted, double value);

// Linear-interpolated quantile of an unsorted sample, q in [0,1].
double quantile(std::vector<double> values, double q);

// Encodes day-of-year phase as (sin, cos) of 2π·doy/365.25; doy is 0-based.
std::pair<double, double> doy_phase(unsigned day_of_year);

struct ContextInputs {
    std::span<const double> runoff;   // standardised runoff, index t inclusive
    std::span<const double> precip;   // raw precipitation (mm)
    unsigned day_of_year = 0;         // 0-based
    std::array<double, kStaticDescriptors> static_desc{};
};

// Builds h_t from the series up to and including index t. Throws
// std::out_of_range when t lacks the Δ / n_p history.
ContextVector compute_context(const ContextInputs& in, std::size_t t, const ContextConfig& config,
                              const ContextStatistics& stats);

// Two dense layers (hidden 32, tanh) producing K scores.
struct GateNetwork {
    static constexpr std::size_t kHidden = 32;
    nn::Dense hidden;
    nn::Dense scores;

    GateNetwork() = default;
    GateNetwork(std::size_t features, nn::Rng& rng);

    Tensor logits(const Tensor& context) const;   // [B, F] -> [B, K]
    Tensor forward(const Tensor& context) const;  // softmax of logits
    void collect(nn::ParamList& out, const std::string& prefix) const;
};

// r̂[b,h] = Σ_k g[b,k] · Y[b,k,h]
Tensor fuse(const Tensor& expert_outputs, const Tensor& gate);

Tensor assemble_forecast(const Tensor& trend_hat, const Tensor& seasonal_hat, const Tensor& residual_hat);

// Shannon entropy per row of a [B, K] simplex tensor (0·ln 0 := 0) -> [B].
Tensor gate_entropy(const Tensor& gate);

}  // namespace hydrofusion
