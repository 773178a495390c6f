#include "hydrofusion/objectives.hpp"

#include "hydrofusion/context_gating.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace hydrofusion {

namespace {

constexpr double kEps = 1e-8;
constexpr double kMasked = -1e30;

void require_same(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ad::ShapeError(std::string(what) + ": truth " + ad::shape_str(a.shape()) + " vs forecast " +
                             ad::shape_str(b.shape()));
    }
}

// [B, H] view of any forecast-space tensor; a 1-D input is one window.
std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t) {
    if (t.dim() == 1) return {1, t.shape()[0]};
    if (t.dim() == 2) return {t.shape()[0], t.shape()[1]};
    throw ad::ShapeError("expected [H] or [B,H], got " + ad::shape_str(t.shape()));
}

struct Moments {
    double mean = 0.0;
    double var = 0.0;
};

Moments moments(std::span<const double> v) {
    Moments m;
    for (double x : v) m.mean += x;
    m.mean /= static_cast<double>(v.size());
    for (double x : v) m.var += (x - m.mean) * (x - m.mean);
    m.var /= static_cast<double>(v.size());
    return m;
}

// Rows of a [B, H] tensor whose flag is set, as [n, H].
Tensor take_rows(const Tensor& t, std::size_t rows, std::size_t cols, const std::vector<unsigned char>& keep) {
    std::vector<unsigned char> mask(rows * cols, 0);
    std::size_t n = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!keep[r]) continue;
        ++n;
        std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(r * cols), cols, 1);
    }
    return ad::reshape(ad::masked_select(t, mask), {n, cols});
}

}  // namespace

void LossWeights::validate() const {
    const std::pair<const char*, double> non_negative[] = {
        {"lambda_sup", sup},         {"lambda_mask", mask},   {"lambda_ctr", ctr},       {"lambda_cons", cons},
        {"lambda_pl", pl},           {"lambda_reg", reg},     {"gamma_mse_mae", gamma_mse_mae},
        {"gamma_ext", gamma_ext},    {"gamma_nse", gamma_nse}, {"gamma_kge", gamma_kge}, {"alpha", alpha},
        {"beta", beta},              {"lambda_ent", entropy}, {"lambda_l2", l2}};
    for (const auto& [name, v] : non_negative) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw std::invalid_argument(std::string("loss weight ") + name + " must be finite and non-negative");
        }
    }
    if (!(eta > 1.0)) throw std::invalid_argument("loss weight eta must exceed 1");
    if (!(tau_ctr > 0.0)) throw std::invalid_argument("loss weight tau_ctr must be positive");
    if (!(mask_ratio > 0.0 && mask_ratio <= 1.0)) throw std::invalid_argument("mask_ratio must lie in (0,1]");
}

std::optional<double> nse(std::span<const double> truth, std::span<const double> forecast) {
    if (truth.size() != forecast.size()) throw ad::ShapeError("nse: length mismatch");
    if (truth.size() < 2) return std::nullopt;
    const Moments m = moments(truth);
    const double den = m.var * static_cast<double>(truth.size());
    if (den < kEps) return std::nullopt;
    double num = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) num += (truth[i] - forecast[i]) * (truth[i] - forecast[i]);
    return 1.0 - num / den;
}

std::optional<double> kge(std::span<const double> truth, std::span<const double> forecast) {
    if (truth.size() != forecast.size()) throw ad::ShapeError("kge: length mismatch");
    if (truth.size() < 2) return std::nullopt;
    const Moments mx = moments(truth);
    const Moments mf = moments(forecast);
    if (mx.var < kEps || mf.var < kEps || std::abs(mx.mean) < kEps) return std::nullopt;
    double cov = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) cov += (truth[i] - mx.mean) * (forecast[i] - mf.mean);
    cov /= static_cast<double>(truth.size());
    const double sx = std::sqrt(mx.var), sf = std::sqrt(mf.var);
    const double r = cov / (sx * sf);
    const double a = sf / sx;
    const double b = mf.mean / mx.mean;
    return 1.0 - std::sqrt((r - 1) * (r - 1) + (a - 1) * (a - 1) + (b - 1) * (b - 1));
}

Tensor loss_mse_mae(const Tensor& truth, const Tensor& forecast, double alpha, double beta) {
    require_same(truth, forecast, "loss_mse_mae");
    const Tensor e = truth - forecast;
    return ad::mean(alpha * ad::square(e) + beta * ad::abs(e));
}

Tensor loss_mse(const Tensor& truth, const Tensor& forecast) {
    require_same(truth, forecast, "loss_mse");
    return ad::mean(ad::square(truth - forecast));
}

Tensor loss_extreme(const Tensor& truth, const Tensor& forecast, double threshold, double eta) {
    require_same(truth, forecast, "loss_extreme");
    std::vector<double> w(truth.numel());
    const auto x = truth.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = x[i] > threshold ? eta : 1.0;
    return ad::mean(Tensor(truth.shape(), std::move(w)) * ad::square(truth - forecast));
}

EfficiencyLoss loss_nse(const Tensor& truth, const Tensor& forecast) {
    require_same(truth, forecast, "loss_nse");
    const auto [B, H] = rows_cols(truth);
    if (H < 2) throw ad::ShapeError("loss_nse: horizon must be at least 2");
    const auto x = truth.data();
    std::vector<unsigned char> keep(B, 0);
    std::vector<double> den;
    EfficiencyLoss out;
    for (std::size_t b = 0; b < B; ++b) {
        const Moments m = moments(x.subspan(b * H, H));
        const double d = m.var * static_cast<double>(H);
        if (d < kEps) {
            ++out.skipped;
            continue;
        }
        keep[b] = 1;
        den.push_back(d);
    }
    if (den.empty()) {
        out.value = Tensor::scalar(0.0);
        return out;
    }
    const std::size_t n = den.size();
    const Tensor xt = take_rows(truth, B, H, keep);
    const Tensor ft = take_rows(forecast, B, H, keep);
    const Tensor ratio = ad::sum(ad::square(xt - ft), 1) / Tensor({n}, std::move(den));
    out.value = ad::mean(ratio);
    return out;
}

EfficiencyLoss loss_kge(const Tensor& truth, const Tensor& forecast) {
    require_same(truth, forecast, "loss_kge");
    const auto [B, H] = rows_cols(truth);
    if (H < 2) throw ad::ShapeError("loss_kge: horizon must be at least 2");
    const auto x = truth.data();
    const auto f = forecast.data();
    std::vector<unsigned char> keep(B, 0);
    std::vector<double> mx, sx;
    EfficiencyLoss out;
    for (std::size_t b = 0; b < B; ++b) {
        const Moments m = moments(x.subspan(b * H, H));
        const Moments mf = moments(f.subspan(b * H, H));
        if (m.var < kEps || mf.var < kEps || std::abs(m.mean) < kEps) {
            ++out.skipped;
            continue;
        }
        keep[b] = 1;
        mx.push_back(m.mean);
        sx.push_back(std::sqrt(m.var));
    }
    if (mx.empty()) {
        out.value = Tensor::scalar(0.0);
        return out;
    }
    const std::size_t n = mx.size();
    const Tensor xt = take_rows(truth, B, H, keep);
    const Tensor ft = take_rows(forecast, B, H, keep);
    const Tensor mean_x({n, 1}, mx);
    const Tensor std_x({n}, sx);
    const Tensor mean_f = ad::mean(ft, 1, true);
    const Tensor fc = ft - mean_f;
    const Tensor std_f = ad::sqrt(ad::mean(ad::square(fc), 1));
    const Tensor cov = ad::mean((xt - mean_x) * fc, 1);
    const Tensor r = cov / (std_x * std_f);
    const Tensor a = std_f / std_x;
    const Tensor b = ad::reshape(mean_f / mean_x, {n});
    const Tensor dist = ad::sqrt(ad::square(r - 1.0) + ad::square(a - 1.0) + ad::square(b - 1.0));
    out.value = ad::mean(dist);
    return out;
}

SupervisedTerms loss_supervised(const Tensor& truth, const Tensor& forecast, const LossWeights& w,
                                double flood_threshold, const UnitScale& scale) {
    SupervisedTerms t;
    t.mse_mae = loss_mse_mae(truth, forecast, w.alpha, w.beta);
    t.ext = loss_extreme(truth, forecast, flood_threshold, w.eta);
    EfficiencyLoss n = loss_nse(truth, forecast);
    t.nse = n.value;
    t.nse_skipped = n.skipped;
    // the bias ratio needs a non-degenerate mean, so KGE runs in physical units
    const Tensor truth_phys = truth * scale.std + scale.mean;
    const Tensor forecast_phys = forecast * scale.std + scale.mean;
    EfficiencyLoss k = loss_kge(truth_phys, forecast_phys);
    t.kge = k.value;
    t.kge_skipped = k.skipped;
    t.total = w.gamma_mse_mae * t.mse_mae + w.gamma_ext * t.ext + w.gamma_nse * t.nse + w.gamma_kge * t.kge;
    return t;
}

Tensor loss_masked_reconstruction(const Tensor& truth, const Tensor& reconstruction,
                                  const std::vector<unsigned char>& mask) {
    require_same(truth, reconstruction, "loss_masked_reconstruction");
    const auto [B, L] = rows_cols(truth);
    if (mask.size() != B * L) throw ad::ShapeError("loss_masked_reconstruction: mask size mismatch");
    std::vector<double> w(B * L, 0.0);
    std::size_t windows = 0;
    for (std::size_t b = 0; b < B; ++b) {
        const auto first = mask.begin() + static_cast<std::ptrdiff_t>(b * L);
        const auto count = static_cast<std::size_t>(std::count_if(first, first + static_cast<std::ptrdiff_t>(L),
                                                                  [](unsigned char m) { return m != 0; }));
        if (count == 0) continue;
        ++windows;
        for (std::size_t i = 0; i < L; ++i) {
            if (mask[b * L + i]) w[b * L + i] = 1.0 / static_cast<double>(count);
        }
    }
    if (windows == 0) return Tensor::scalar(0.0);
    return ad::sum(Tensor(truth.shape(), std::move(w)) * ad::square(truth - reconstruction)) /
           static_cast<double>(windows);
}

Tensor block_means(const Tensor& x, std::size_t block) {
    if (block == 0 || x.dim() == 0) throw ad::ShapeError("block_means: bad block or rank");
    const std::size_t L = x.shape().back();
    const std::size_t n = L / block;
    if (n == 0) throw ad::ShapeError("block_means: series of length " + std::to_string(L) + " shorter than block");
    ad::Shape s = x.shape();
    s.back() = n;
    s.push_back(block);
    const Tensor kept = n * block == L ? x : ad::slice(x, -1, L - n * block, L);
    return ad::mean(ad::reshape(kept, s), -1);
}

Tensor info_nce(const Tensor& anchors, const Tensor& candidates, const std::vector<std::size_t>& positive,
                const std::vector<unsigned char>& allowed, double temperature) {
    if (anchors.dim() != 2 || candidates.dim() != 2 || anchors.shape()[1] != candidates.shape()[1]) {
        throw ad::ShapeError("info_nce: anchors " + ad::shape_str(anchors.shape()) + " vs candidates " +
                             ad::shape_str(candidates.shape()));
    }
    if (!(temperature > 0.0)) throw std::invalid_argument("info_nce: temperature must be positive");
    const std::size_t N = anchors.shape()[0], M = candidates.shape()[0];
    if (positive.size() != N || allowed.size() != N * M) throw ad::ShapeError("info_nce: index sizes mismatch");
    std::vector<double> bias(N * M, 0.0);
    std::vector<unsigned char> pick(N * M, 0);
    for (std::size_t i = 0; i < N; ++i) {
        if (positive[i] >= M || !allowed[i * M + positive[i]]) {
            throw std::invalid_argument("info_nce: positive for anchor " + std::to_string(i) + " is not a candidate");
        }
        pick[i * M + positive[i]] = 1;
        for (std::size_t j = 0; j < M; ++j) {
            if (!allowed[i * M + j]) bias[i * M + j] = kMasked;
        }
    }
    const Tensor logits = ad::matmul(anchors, ad::permute(candidates, {1, 0})) / temperature;
    const Tensor lse = ad::logsumexp(logits + Tensor({N, M}, std::move(bias)), 1);
    return ad::mean(lse - ad::masked_select(logits, pick));
}

Tensor loss_contrastive(const ScaleEmbeddings& z, double temperature) {
    if (z.daily.shape() != z.weekly.shape() || z.daily.shape() != z.monthly.shape() || z.daily.dim() != 2) {
        throw ad::ShapeError("loss_contrastive: scale embeddings disagree in shape");
    }
    const std::size_t B = z.daily.shape()[0];
    // candidates: [daily; weekly; monthly], one row per (scale, endpoint)
    const Tensor candidates = ad::concat({z.daily, z.weekly, z.monthly}, 0);
    const Tensor anchors = ad::concat({z.daily, z.daily}, 0);
    const std::size_t N = 2 * B, M = 3 * B;
    std::vector<std::size_t> positive(N);
    std::vector<unsigned char> allowed(N * M, 0);
    for (std::size_t s = 0; s < 2; ++s) {
        for (std::size_t i = 0; i < B; ++i) {
            const std::size_t row = s * B + i;
            positive[row] = (s + 1) * B + i;
            for (std::size_t j = 0; j < M; ++j) {
                if (j % B != i || j == positive[row]) allowed[row * M + j] = 1;
            }
        }
    }
    return info_nce(anchors, candidates, positive, allowed, temperature);
}

Augmentation draw_augmentation(std::span<const double> window, std::uint64_t seed, const AugmentOptions& options) {
    if (window.empty()) throw std::invalid_argument("augment: empty window");
    if (!(options.crop_fraction > 0.0 && options.crop_fraction <= 1.0) || options.noise_multiplier < 0.0) {
        throw std::invalid_argument("augment: crop fraction must lie in (0,1] and noise multiplier be >= 0");
    }
    std::mt19937_64 rng(seed);
    const std::size_t L = window.size();
    Augmentation aug;
    aug.noise.assign(L, 0.0);
    const double sigma = options.noise_multiplier * std::sqrt(moments(window).var);
    if (sigma > 0.0) {
        std::normal_distribution<double> dist(0.0, sigma);
        for (double& v : aug.noise) v = dist(rng);
    }
    aug.crop_length = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(options.crop_fraction * static_cast<double>(L))), std::min<std::size_t>(2, L), L);
    std::uniform_int_distribution<std::size_t> start(0, L - aug.crop_length);
    aug.crop_start = start(rng);
    return aug;
}

std::vector<double> apply_crop(std::span<const double> series, const Augmentation& aug) {
    const std::size_t L = series.size();
    if (aug.crop_start + aug.crop_length > L || aug.crop_length == 0) {
        throw std::invalid_argument("apply_crop: crop exceeds series length");
    }
    std::vector<double> out(L);
    if (L == 1) {
        out[0] = series[0];
        return out;
    }
    const double step = static_cast<double>(aug.crop_length - 1) / static_cast<double>(L - 1);
    for (std::size_t j = 0; j < L; ++j) {
        const double pos = static_cast<double>(aug.crop_start) + step * static_cast<double>(j);
        const std::size_t lo = std::min(static_cast<std::size_t>(pos), L - 1);
        const std::size_t hi = std::min(lo + 1, L - 1);
        const double frac = pos - static_cast<double>(lo);
        out[j] = series[lo] + frac * (series[hi] - series[lo]);
    }
    return out;
}

std::vector<double> augment(std::span<const double> window, std::uint64_t seed, const AugmentOptions& options) {
    const Augmentation aug = draw_augmentation(window, seed, options);
    std::vector<double> noisy(window.begin(), window.end());
    for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] += aug.noise[i];
    return apply_crop(noisy, aug);
}

Tensor loss_consistency(const Tensor& forecast_a, const Tensor& forecast_b) {
    require_same(forecast_a, forecast_b, "loss_consistency");
    return ad::mean(ad::square(forecast_a - forecast_b));
}

double percentile(std::vector<double> values, double pct) { return quantile(std::move(values), pct / 100.0); }

PseudoLabels ensemble_statistics(const Tensor& expert_outputs, const std::vector<std::size_t>& experts) {
    if (expert_outputs.dim() != 3) {
        throw ad::ShapeError("pseudo_label_filter: expected [B,K,H], got " + ad::shape_str(expert_outputs.shape()));
    }
    const std::size_t B = expert_outputs.shape()[0], K = expert_outputs.shape()[1], H = expert_outputs.shape()[2];
    std::vector<std::size_t> use = experts;
    if (use.empty()) {
        use.resize(K);
        std::iota(use.begin(), use.end(), std::size_t{0});
    }
    for (std::size_t k : use) {
        if (k >= K) throw std::out_of_range("pseudo_label_filter: expert index " + std::to_string(k));
    }
    const auto y = expert_outputs.data();
    PseudoLabels p;
    p.labels.assign(B * H, 0.0);
    p.variance.assign(B * H, 0.0);
    p.accepted.assign(B * H, 0);
    const double n = static_cast<double>(use.size());
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            double mean = 0.0;
            for (std::size_t k : use) mean += y[(b * K + k) * H + h];
            mean /= n;
            double var = 0.0;
            for (std::size_t k : use) {
                const double d = y[(b * K + k) * H + h] - mean;
                var += d * d;
            }
            p.labels[b * H + h] = mean;
            p.variance[b * H + h] = var / n;
        }
    }
    return p;
}

namespace {

void apply_threshold(PseudoLabels& p, double threshold) {
    p.threshold = threshold;
    std::size_t kept = 0;
    for (std::size_t i = 0; i < p.variance.size(); ++i) {
        p.accepted[i] = p.variance[i] < threshold ? 1 : 0;
        kept += p.accepted[i];
    }
    p.accepted_fraction = p.variance.empty() ? 0.0 : static_cast<double>(kept) / static_cast<double>(p.variance.size());
}

}  // namespace

PseudoLabels pseudo_label_filter(const Tensor& expert_outputs, double threshold, const std::vector<std::size_t>& experts) {
    PseudoLabels p = ensemble_statistics(expert_outputs, experts);
    apply_threshold(p, threshold);
    return p;
}

PseudoLabels pseudo_label_filter_percentile(const Tensor& expert_outputs, double pct,
                                            const std::vector<std::size_t>& experts) {
    PseudoLabels p = ensemble_statistics(expert_outputs, experts);
    apply_threshold(p, p.variance.empty() ? 0.0 : percentile(p.variance, pct));
    return p;
}

Tensor loss_pseudo(const std::vector<unsigned char>& accepted, const Tensor& labels, const Tensor& forecast) {
    require_same(labels, forecast, "loss_pseudo");
    if (accepted.size() != forecast.numel()) throw ad::ShapeError("loss_pseudo: acceptance mask size mismatch");
    const auto n = static_cast<std::size_t>(std::count_if(accepted.begin(), accepted.end(), [](unsigned char a) { return a != 0; }));
    if (n == 0) return Tensor::scalar(0.0);
    std::vector<double> w(accepted.begin(), accepted.end());
    return ad::sum(Tensor(forecast.shape(), std::move(w)) * ad::square(forecast - labels.detach())) /
           static_cast<double>(n);
}

Tensor loss_regularization(const Tensor& gate, const nn::ParamList& params, double lambda_ent, double lambda_l2) {
    Tensor total = Tensor::scalar(0.0);
    if (lambda_ent != 0.0 && gate.numel() > 0) total = total + lambda_ent * ad::mean(gate_entropy(gate));
    if (lambda_l2 != 0.0) {
        for (const auto& p : params) {
            if (!p.tensor.requires_grad()) continue;
            total = total + lambda_l2 * ad::sum(ad::square(p.tensor));
        }
    }
    return total;
}

double LossReport::recompose(const LossWeights& w) const {
    return w.sup * sup + w.mask * mask + w.ctr * ctr + w.cons * cons + w.pl * pl + w.reg * reg;
}

std::string LossReport::to_json() const {
    nlohmann::json j = {{"sup", sup},
                        {"mse_mae", mse_mae},
                        {"ext", ext},
                        {"nse", nse},
                        {"kge", kge},
                        {"mask", mask},
                        {"ctr", ctr},
                        {"cons", cons},
                        {"pl", pl},
                        {"reg", reg},
                        {"total", total},
                        {"nse_skipped", nse_skipped},
                        {"kge_skipped", kge_skipped},
                        {"pl_threshold", pl_threshold},
                        {"pl_accepted", pl_accepted},
                        {"pl_percentile", pl_percentile}};
    return j.dump();
}

Tensor loss_total(const LossTerms& terms, const LossWeights& w, LossReport& report) {
    const std::pair<const Tensor*, std::pair<double*, double>> parts[] = {
        {&terms.sup, {&report.sup, w.sup}},    {&terms.mask, {&report.mask, w.mask}},
        {&terms.ctr, {&report.ctr, w.ctr}},    {&terms.cons, {&report.cons, w.cons}},
        {&terms.pl, {&report.pl, w.pl}},       {&terms.reg, {&report.reg, w.reg}}};
    Tensor total = Tensor::scalar(0.0);
    for (const auto& [term, slot] : parts) {
        const bool present = term->numel() > 0;
        *slot.first = present ? term->item() : 0.0;
        if (present && slot.second != 0.0) total = total + slot.second * *term;
    }
    report.total = total.item();
    return total;
}

}  // namespace hydrofusion
