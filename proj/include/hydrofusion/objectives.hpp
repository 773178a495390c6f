#pragma once

// Loss terms of the semi-supervised multi-task objective and their weighted
// total. Forecast-space tensors are [B, H] unless stated otherwise.

#include "hydrofusion/autodiff.hpp"
#include "hydrofusion/nn.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hydrofusion {

using ad::Tensor;

struct LossWeights {
    double sup = 1.0;
    double mask = 0.3;
    double ctr = 0.1;
    double cons = 0.1;
    double pl = 0.2;
    double reg = 1.0;
    double gamma_mse_mae = 1.0;
    double gamma_ext = 0.5;
    double gamma_nse = 0.25;
    double gamma_kge = 0.25;
    double alpha = 0.5;          // squared-error share of the mixed base
    double beta = 0.5;           // absolute-error share of the mixed base
    double eta = 4.0;            // extreme-flow multiplier
    double tau_ctr = 0.1;        // contrastive temperature
    double entropy = 0.01;       // λ_ent
    double l2 = 1e-5;            // λ_ℓ2
    double mask_ratio = 0.15;    // p

    // Throws std::invalid_argument naming the first violated constraint.
    void validate() const;
};

// ---- numeric efficiencies (evaluation) ----

// nullopt when the truth is (near) constant or the slice has < 2 points.
std::optional<double> nse(std::span<const double> truth, std::span<const double> forecast);
// nullopt when truth or forecast is (near) constant, or mean(truth) ≈ 0.
std::optional<double> kge(std::span<const double> truth, std::span<const double> forecast);

// ---- differentiable terms ----

Tensor loss_mse_mae(const Tensor& truth, const Tensor& forecast, double alpha, double beta);
Tensor loss_extreme(const Tensor& truth, const Tensor& forecast, double threshold, double eta);
Tensor loss_mse(const Tensor& truth, const Tensor& forecast);

struct EfficiencyLoss {
    Tensor value;             // mean of (1 - efficiency) over valid windows; 0 if none
    std::size_t skipped = 0;  // degenerate windows left out
};

EfficiencyLoss loss_nse(const Tensor& truth, const Tensor& forecast);
EfficiencyLoss loss_kge(const Tensor& truth, const Tensor& forecast);

// Affine map back to physical units, used for the KGE bias ratio.
struct UnitScale {
    double mean = 0.0;
    double std = 1.0;
};

struct SupervisedTerms {
    Tensor total;
    Tensor mse_mae, ext, nse, kge;
    std::size_t nse_skipped = 0, kge_skipped = 0;
};

SupervisedTerms loss_supervised(const Tensor& truth, const Tensor& forecast, const LossWeights& w,
                                double flood_threshold, const UnitScale& scale = {});

// mask: [B*L] flags. Windows without masked positions are skipped; the result
// is the mean over windows of the per-window masked MSE (0 if none remain).
Tensor loss_masked_reconstruction(const Tensor& truth, const Tensor& reconstruction,
                                  const std::vector<unsigned char>& mask);

// ---- multi-scale contrastive ----

// Non-overlapping block means along the last axis, aligned to the end; a
// partial block at the start is dropped.
Tensor block_means(const Tensor& x, std::size_t block);

struct ScaleEmbeddings {
    Tensor daily, weekly, monthly;  // each [B, d], unit norm rows
};

// Generic InfoNCE: for each anchor row i, -log softmax over the allowed
// candidates evaluated at positive[i]. allowed: [N*M] flags.
Tensor info_nce(const Tensor& anchors, const Tensor& candidates, const std::vector<std::size_t>& positive,
                const std::vector<unsigned char>& allowed, double temperature);

// Daily embeddings anchor; weekly and monthly embeddings of the same endpoint
// are positives; every embedding of another endpoint is a negative.
Tensor loss_contrastive(const ScaleEmbeddings& z, double temperature);

// ---- augmentation consistency ----

struct AugmentOptions {
    double noise_multiplier = 0.02;  // noise σ = multiplier · std(window)
    double crop_fraction = 0.9;
};

struct Augmentation {
    std::vector<double> noise;     // per position, added before cropping
    std::size_t crop_start = 0;
    std::size_t crop_length = 0;
};

Augmentation draw_augmentation(std::span<const double> window, std::uint64_t seed, const AugmentOptions& options = {});
// Crops [start, start+length) and linearly re-interpolates to the input length.
std::vector<double> apply_crop(std::span<const double> series, const Augmentation& aug);
std::vector<double> augment(std::span<const double> window, std::uint64_t seed, const AugmentOptions& options = {});

Tensor loss_consistency(const Tensor& forecast_a, const Tensor& forecast_b);

// ---- pseudo labels ----

struct PseudoLabels {
    std::vector<unsigned char> accepted;  // [B*H]
    std::vector<double> labels;           // ensemble mean per (b,h)
    std::vector<double> variance;         // population variance per (b,h)
    double threshold = 0.0;
    double accepted_fraction = 0.0;
};

// Ensemble mean and population variance over the listed experts (all when
// empty) of a [B, K, H] tensor; nothing accepted yet.
PseudoLabels ensemble_statistics(const Tensor& expert_outputs, const std::vector<std::size_t>& experts = {});
// Accepts (b,h) iff variance < threshold.
PseudoLabels pseudo_label_filter(const Tensor& expert_outputs, double threshold,
                                 const std::vector<std::size_t>& experts = {});
// Threshold taken as the pct-th percentile of the batch variances.
PseudoLabels pseudo_label_filter_percentile(const Tensor& expert_outputs, double pct,
                                            const std::vector<std::size_t>& experts = {});

// Linear-interpolated percentile (0..100) of a sample.
double percentile(std::vector<double> values, double pct);

// Mean squared gap between forecast and (detached) labels over accepted pairs.
Tensor loss_pseudo(const std::vector<unsigned char>& accepted, const Tensor& labels, const Tensor& forecast);

// λ_ent · mean_t H(g_t) + λ_ℓ2 · ‖θ‖²
Tensor loss_regularization(const Tensor& gate, const nn::ParamList& params, double lambda_ent, double lambda_l2);

// ---- total ----

struct LossReport {
    double sup = 0, mse_mae = 0, ext = 0, nse = 0, kge = 0;
    double mask = 0, ctr = 0, cons = 0, pl = 0, reg = 0;
    double total = 0;
    std::size_t nse_skipped = 0, kge_skipped = 0;
    double pl_threshold = 0, pl_accepted = 0, pl_percentile = 0;

    // Weighted recomposition from the stored unweighted terms.
    double recompose(const LossWeights& w) const;
    std::string to_json() const;
};

struct LossTerms {
    Tensor sup, mask, ctr, cons, pl, reg;
};

// Missing (empty) terms count as zero.
Tensor loss_total(const LossTerms& terms, const LossWeights& w, LossReport& report);

}  // namespace hydrofusion
