#include "hydrofusion/decomposition.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace hydrofusion {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void require_window(const Tensor& x, std::size_t window, const char* op) {
    if (x.dim() != 2 || x.shape()[1] != window) {
        throw ad::ShapeError(std::string(op) + ": expected window [B," + std::to_string(window) + "], got " +
                             ad::shape_str(x.shape()));
    }
}

}  // namespace

// ---------------------------------------------------------------- trend

TrendModel::TrendModel(std::size_t window)
    : weight(Tensor::full({window}, 1.0 / static_cast<double>(window), true)),
      bias(Tensor::zeros({1}, true)) {}

TrendModel::TrendModel(std::vector<double> weights, double bias_value)
    : weight(Tensor::vector(std::move(weights), true)), bias(Tensor::full({1}, bias_value, true)) {}

void TrendModel::collect(nn::ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

TrendOutput trend_forward(const Tensor& x, const TrendModel& model) {
    const std::size_t L = model.window();
    require_window(x, L, "trend_forward");
    const std::size_t B = x.shape()[0];
    Tensor padded = x;
    if (L > 1) {
        const Tensor edge = ad::broadcast_to(ad::slice(x, 1, 0, 1), {B, L - 1});
        padded = ad::concat({edge, x}, 1);
    }
    padded = ad::reshape(padded, {B, 1, 2 * L - 1});
    const Tensor kernel = ad::reshape(model.weight, {1, 1, L});
    Tensor curve = ad::conv1d(padded, kernel, model.bias, 0, 0);
    curve = ad::reshape(curve, {B, L});
    Tensor end_value = ad::reshape(ad::slice(curve, 1, L - 1, L), {B});
    return {end_value, curve};
}

Tensor trend_extrapolate(const Tensor& x, const TrendModel& model, std::size_t steps) {
    const std::size_t L = model.window();
    require_window(x, L, "trend_extrapolate");
    const std::size_t B = x.shape()[0];
    const Tensor w = ad::reshape(model.weight, {L, 1});
    Tensor window = x;
    Tensor previous = ad::matmul(window, w) + model.bias;  // T_t, [B,1]
    std::vector<Tensor> out;
    out.reserve(steps);
    for (std::size_t h = 0; h < steps; ++h) {
        window = L > 1 ? ad::concat({ad::slice(window, 1, 1, L), previous}, 1) : previous;
        previous = ad::matmul(window, w) + model.bias;
        out.push_back(previous);
    }
    if (out.empty()) return Tensor::zeros({B, 0});
    return ad::concat(out, 1);
}

// ---------------------------------------------------------------- seasonal

SpectralEncoder::SpectralEncoder(std::size_t harmonics, nn::Rng& rng)
    : conv1(1, 8, 7, rng), conv2(8, kChannels, 7, rng), head(kChannels, 2 * harmonics, rng, 0.1) {
    // edge padding keeps a constant input constant at every length
    conv1.replicate = true;
    conv2.replicate = true;
}

Tensor SpectralEncoder::features(const Tensor& x) const {
    const std::size_t B = x.shape()[0], L = x.shape()[1];
    const Tensor h1 = ad::tanh(conv1(ad::reshape(x, {B, 1, L})));
    return ad::tanh(conv2(h1));
}

Tensor SpectralEncoder::coefficients(const Tensor& x) const {
    return head(ad::mean(features(x), 2));
}

void SpectralEncoder::collect(nn::ParamList& out, const std::string& prefix) const {
    conv1.collect(out, prefix + ".conv1");
    conv2.collect(out, prefix + ".conv2");
    head.collect(out, prefix + ".head");
}

SeasonalModel::SeasonalModel(std::size_t m, nn::Rng& rng, bool global)
    : period(Tensor::full({1}, 365.25, true)),
      harmonics(m),
      encoder(m, rng),
      global_coefficients(Tensor::zeros({2 * m}, true)),
      global_mode(global) {
    if (m == 0) throw std::invalid_argument("SeasonalModel: harmonic count must be positive");
}

SeasonalCoefficients SeasonalModel::coefficients(const Tensor& x, const std::vector<std::int64_t>& anchors) const {
    const std::size_t B = x.shape()[0];
    const std::size_t M = harmonics;
    if (anchors.size() != B) throw ad::ShapeError("seasonal: one anchor per window required");
    if (global_mode) {
        const Tensor g = ad::reshape(global_coefficients, {1, 2 * M});
        return {ad::broadcast_to(ad::slice(g, 1, 0, M), {B, M}), ad::broadcast_to(ad::slice(g, 1, M, 2 * M), {B, M})};
    }
    const Tensor rel = encoder.coefficients(x);
    const Tensor a = ad::slice(rel, 1, 0, M);
    const Tensor b = ad::slice(rel, 1, M, 2 * M);
    // rotate anchor-relative coefficients by the anchor phase 2πm t_a / τ
    std::vector<double> raw(B * M);
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t m = 0; m < M; ++m) {
            raw[i * M + m] = kTwoPi * static_cast<double>(m + 1) * static_cast<double>(anchors[i]);
        }
    }
    const Tensor theta = Tensor({B, M}, std::move(raw)) / period;
    const Tensor c = ad::cos(theta);
    const Tensor s = ad::sin(theta);
    return {a * c - b * s, a * s + b * c};
}

void SeasonalModel::clamp_period() {
    auto v = period.mutable_data();
    v[0] = std::min(std::max(v[0], kMinPeriod), kMaxPeriod);
}

void SeasonalModel::collect(nn::ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".period", period});
    // the encoder trunk is shared with the self-supervised heads, so it stays
    // trainable in global mode too
    encoder.collect(out, prefix + ".encoder");
    if (global_mode) out.push_back({prefix + ".global_coefficients", global_coefficients});
}

Tensor seasonal_basis(const SeasonalCoefficients& coefs, const Tensor& period,
                      const std::vector<std::vector<double>>& times) {
    const std::size_t B = coefs.alpha.shape()[0];
    const std::size_t M = coefs.alpha.shape()[1];
    if (times.size() != B) throw ad::ShapeError("seasonal_basis: one time row per batch entry required");
    const std::size_t T = B ? times.front().size() : 0;
    std::vector<double> raw(B * T * M);
    for (std::size_t i = 0; i < B; ++i) {
        if (times[i].size() != T) throw ad::ShapeError("seasonal_basis: ragged time rows");
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t m = 0; m < M; ++m) {
                raw[(i * T + t) * M + m] = kTwoPi * static_cast<double>(m + 1) * times[i][t];
            }
        }
    }
    const Tensor angle = Tensor({B, T, M}, std::move(raw)) / period;
    const Tensor alpha = ad::reshape(coefs.alpha, {B, 1, M});
    const Tensor beta = ad::reshape(coefs.beta, {B, 1, M});
    return ad::sum(ad::cos(angle) * alpha + ad::sin(angle) * beta, 2);
}

namespace {

std::vector<std::vector<double>> day_indices(const std::vector<std::int64_t>& anchors, std::int64_t first,
                                             std::size_t count) {
    std::vector<std::vector<double>> times(anchors.size(), std::vector<double>(count));
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        for (std::size_t j = 0; j < count; ++j) {
            times[i][j] = static_cast<double>(anchors[i] + first + static_cast<std::int64_t>(j));
        }
    }
    return times;
}

}  // namespace

SeasonalOutput seasonal_forward(const Tensor& x, const std::vector<std::int64_t>& anchors,
                                const SeasonalModel& model) {
    for (std::int64_t a : anchors) {
        if (a < 0) throw std::invalid_argument("seasonal_forward: negative day index");
    }
    const std::size_t L = x.shape()[1];
    SeasonalOutput out;
    out.coefficients = model.coefficients(x, anchors);
    out.curve = seasonal_basis(out.coefficients, model.period,
                               day_indices(anchors, -static_cast<std::int64_t>(L) + 1, L));
    return out;
}

// ---------------------------------------------------------------- decomposition

Decomposition::Decomposition(std::size_t window, std::size_t h, std::size_t harmonics, nn::Rng& rng,
                             bool global_seasonal)
    : trend(window), seasonal(harmonics, rng, global_seasonal), horizon(h) {}

DecompositionResult Decomposition::decompose(const Tensor& x, const std::vector<std::int64_t>& anchors) const {
    DecompositionResult r;
    const TrendOutput t = trend_forward(x, trend);
    const SeasonalOutput s = seasonal_forward(x, anchors, seasonal);
    r.trend = t.curve;
    r.seasonal = s.curve;
    r.residual = x - r.trend - r.seasonal;
    r.coefficients = s.coefficients;
    std::tie(r.trend_hat, r.seasonal_hat) = extrapolate(x, anchors, r.coefficients, horizon);
    return r;
}

std::pair<Tensor, Tensor> Decomposition::extrapolate(const Tensor& x, const std::vector<std::int64_t>& anchors,
                                                     const SeasonalCoefficients& coefs, std::size_t steps) const {
    if (steps < 1 || steps > horizon) {
        throw std::out_of_range("extrapolate: steps " + std::to_string(steps) + " outside [1, " +
                                std::to_string(horizon) + "]");
    }
    Tensor t_hat = trend_extrapolate(x, trend, steps);
    Tensor s_hat = seasonal_basis(coefs, seasonal.period, day_indices(anchors, 1, steps));
    return {t_hat, s_hat};
}

void Decomposition::collect(nn::ParamList& out, const std::string& prefix) const {
    trend.collect(out, prefix + ".trend");
    seasonal.collect(out, prefix + ".seasonal");
}

}  // namespace hydrofusion
