#pragma once

// Learnable trend / seasonal / residual split of an input window and the
// horizon extrapolation of the trend and seasonal parts.

#include "hydrofusion/nn.hpp"

#include <cstdint>
#include <vector>

namespace hydrofusion {

using ad::Tensor;

// T_t = w·x_{t-L+1..t} + b. Lag i of w multiplies x_{t-L+1+i}, so the last
// entry weights the most recent day.
struct TrendModel {
    Tensor weight;  // [L]
    Tensor bias;    // [1]

    TrendModel() = default;
    explicit TrendModel(std::size_t window);  // moving-average initialisation
    TrendModel(std::vector<double> weights, double bias_value);

    std::size_t window() const { return weight.numel(); }
    void collect(nn::ParamList& out, const std::string& prefix) const;
};

struct TrendOutput {
    Tensor end_value;  // [B]
    Tensor curve;      // [B, L]; causal sub-windows, left edge padded with x_0
};

// x: [B, L]. Throws ShapeError when L differs from the model's window.
TrendOutput trend_forward(const Tensor& x, const TrendModel& model);

// Rolls the projection forward: each step drops the oldest lag and appends the
// previous trend value (the first appended value is the in-window T_t).
Tensor trend_extrapolate(const Tensor& x, const TrendModel& model, std::size_t steps);

// Two tanh convolutions (kernel 7, 8 then 16 channels). The feature map is
// shared with the self-supervised heads.
struct SpectralEncoder {
    nn::Conv1d conv1;
    nn::Conv1d conv2;
    nn::Dense head;  // 16 -> 2 * harmonics

    SpectralEncoder() = default;
    SpectralEncoder(std::size_t harmonics, nn::Rng& rng);

    static constexpr std::size_t kChannels = 16;

    // x: [B, L] -> [B, 16, L]
    Tensor features(const Tensor& x) const;
    // x: [B, L] -> [B, 2 * harmonics], anchor-relative coefficients
    Tensor coefficients(const Tensor& x) const;
    void collect(nn::ParamList& out, const std::string& prefix) const;
};

struct SeasonalCoefficients {
    Tensor alpha;  // [B, M], cosine weights in absolute time
    Tensor beta;   // [B, M], sine weights in absolute time
};

struct SeasonalModel {
    static constexpr double kMinPeriod = 300.0;
    static constexpr double kMaxPeriod = 430.0;

    Tensor period;  // [1], trainable base period in days
    std::size_t harmonics = 4;
    SpectralEncoder encoder;
    Tensor global_coefficients;  // [2M], used when global_mode is set
    bool global_mode = false;

    SeasonalModel() = default;
    SeasonalModel(std::size_t harmonics, nn::Rng& rng, bool global_mode = false);

    // Emits coefficients for every window. The encoder works in a frame
    // anchored at the window end; the result is rotated into absolute time.
    SeasonalCoefficients coefficients(const Tensor& x, const std::vector<std::int64_t>& anchors) const;
    void clamp_period();
    void collect(nn::ParamList& out, const std::string& prefix) const;
};

// S(t) = Σ_m α_m cos(2πmt/τ) + β_m sin(2πmt/τ).
// alpha/beta: [B, M]; period: [1]; times: B rows of absolute day indices.
Tensor seasonal_basis(const SeasonalCoefficients& coefs, const Tensor& period,
                      const std::vector<std::vector<double>>& times);

struct SeasonalOutput {
    SeasonalCoefficients coefficients;
    Tensor curve;  // [B, L]
};

// anchors: absolute index of each window's last day (t_index ≥ 0).
SeasonalOutput seasonal_forward(const Tensor& x, const std::vector<std::int64_t>& anchors,
                                const SeasonalModel& model);

struct DecompositionResult {
    Tensor trend;          // [B, L]
    Tensor seasonal;       // [B, L]
    Tensor residual;       // [B, L]
    Tensor trend_hat;      // [B, H]
    Tensor seasonal_hat;   // [B, H]
    SeasonalCoefficients coefficients;
};

struct Decomposition {
    TrendModel trend;
    SeasonalModel seasonal;
    std::size_t horizon = 0;

    Decomposition() = default;
    Decomposition(std::size_t window, std::size_t horizon, std::size_t harmonics, nn::Rng& rng,
                  bool global_seasonal = false);

    DecompositionResult decompose(const Tensor& x, const std::vector<std::int64_t>& anchors) const;

    // Trend and seasonal extrapolation for steps 1..steps (1 ≤ steps ≤ horizon).
    std::pair<Tensor, Tensor> extrapolate(const Tensor& x, const std::vector<std::int64_t>& anchors,
                                          const SeasonalCoefficients& coefs, std::size_t steps) const;

    void collect(nn::ParamList& out, const std::string& prefix) const;
};

}  // namespace hydrofusion
