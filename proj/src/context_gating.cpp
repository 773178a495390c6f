#include "hydrofusion/context_gating.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace hydrofusion {

std::array<double, kContextFeatures> ContextVector::features(const ContextStatistics& stats) const {
    std::array<double, kContextFeatures> f{};
    f[0] = doy_sin;
    f[1] = doy_cos;
    f[2] = (api - stats.api_mean) / (stats.api_std > 0 ? stats.api_std : 1.0);
    f[3] = local_var;
    f[4] = rain_pct;
    f[5] = flood_flag;
    std::copy(static_desc.begin(), static_desc.end(), f.begin() + 6);
    return f;
}

double compute_api(std::span<const double> history, double gamma, std::size_t lags) {
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("compute_api: decay must lie in (0,1)");
    if (lags == 0) throw std::invalid_argument("compute_api: lag count must be at least 1");
    if (history.size() < lags) throw std::invalid_argument("compute_api: history shorter than lag count");
    double api = 0.0;
    double w = 1.0;
    for (std::size_t i = 1; i <= lags; ++i) {
        api += w * history[history.size() - i];
        w *= gamma;
    }
    return api;
}

double empirical_percentile(const std::vector<double>& sorted, double value) {
    if (sorted.empty()) return 0.0;
    const auto it = std::upper_bound(sorted.begin(), sorted.end(), value);
    return static_cast<double>(it - sorted.begin()) / static_cast<double>(sorted.size());
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("quantile: empty sample");
    std::sort(values.begin(), values.end());
    const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

std::pair<double, double> doy_phase(unsigned day_of_year) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(day_of_year) / 365.25;
    return {std::sin(angle), std::cos(angle)};
}

ContextVector compute_context(const ContextInputs& in, std::size_t t, const ContextConfig& config,
                              const ContextStatistics& stats) {
    const std::size_t need = std::max(config.variance_window, config.api_lags);
    if (t < need || t >= in.runoff.size() || t >= in.precip.size()) {
        throw std::out_of_range("compute_context: index " + std::to_string(t) + " lacks " + std::to_string(need) +
                                " days of history; drop this window");
    }
    ContextVector h;
    std::tie(h.doy_sin, h.doy_cos) = doy_phase(in.day_of_year);
    h.api = compute_api(in.precip.subspan(t - config.api_lags, config.api_lags), config.api_decay,
                        config.api_lags);
    const std::size_t d = config.variance_window;
    double mean = 0.0;
    for (std::size_t i = t + 1 - d; i <= t; ++i) mean += in.runoff[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = t + 1 - d; i <= t; ++i) var += (in.runoff[i] - mean) * (in.runoff[i] - mean);
    h.local_var = var / static_cast<double>(d);
    h.rain_pct = empirical_percentile(stats.sorted_precip, in.precip[t]);
    h.flood_flag = in.runoff[t] > stats.flood_threshold ? 1.0 : 0.0;
    h.static_desc = in.static_desc;
    return h;
}

GateNetwork::GateNetwork(std::size_t features, nn::Rng& rng)
    : hidden(features, kHidden, rng), scores(kHidden, kExpertCount, rng, 0.1) {}

Tensor GateNetwork::logits(const Tensor& context) const { return scores(ad::tanh(hidden(context))); }

Tensor GateNetwork::forward(const Tensor& context) const { return ad::softmax(logits(context), 1); }

void GateNetwork::collect(nn::ParamList& out, const std::string& prefix) const {
    hidden.collect(out, prefix + ".hidden");
    scores.collect(out, prefix + ".scores");
}

Tensor fuse(const Tensor& expert_outputs, const Tensor& gate) {
    if (expert_outputs.dim() != 3 || gate.dim() != 2 || gate.shape()[0] != expert_outputs.shape()[0] ||
        gate.shape()[1] != expert_outputs.shape()[1]) {
        throw ad::ShapeError("fuse: expert outputs " + ad::shape_str(expert_outputs.shape()) + " vs gate " +
                             ad::shape_str(gate.shape()));
    }
    const std::size_t B = gate.shape()[0], K = gate.shape()[1];
    return ad::sum(expert_outputs * ad::reshape(gate, {B, K, 1}), 1);
}

Tensor assemble_forecast(const Tensor& trend_hat, const Tensor& seasonal_hat, const Tensor& residual_hat) {
    if (trend_hat.shape() != seasonal_hat.shape() || trend_hat.shape() != residual_hat.shape()) {
        throw ad::ShapeError("assemble_forecast: component shapes " + ad::shape_str(trend_hat.shape()) + ", " +
                             ad::shape_str(seasonal_hat.shape()) + ", " + ad::shape_str(residual_hat.shape()));
    }
    return trend_hat + seasonal_hat + residual_hat;
}

Tensor gate_entropy(const Tensor& gate) {
    // exact zeros get a log argument of 1 so that 0 · ln(·) vanishes
    std::vector<double> pad(gate.numel(), 0.0);
    const auto g = gate.data();
    for (std::size_t i = 0; i < pad.size(); ++i) {
        if (g[i] <= 0.0) pad[i] = 1.0;
    }
    const Tensor safe = gate + Tensor(gate.shape(), std::move(pad));
    return -ad::sum(gate * ad::log(safe), -1);
}

}  // namespace hydrofusion
