#pragma once

// AdamW, the pseudo-label curriculum, the per-iteration objective, epoch loop,
// early-stopping fit and checkpoints.

#include "hydrofusion/data_pipeline.hpp"
#include "hydrofusion/model.hpp"
#include "hydrofusion/objectives.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hydrofusion {

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamWConfig {
    double lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

// Parameters left out of weight decay and the explicit L2 penalty.
bool decay_exempt(const std::string& name);

struct OptimizerState {
    std::vector<std::vector<double>> m, v;
    std::size_t step = 0;
};

// One decoupled-decay update of a single tensor.
void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::size_t step, const AdamWConfig& config, double decay);

class AdamW {
public:
    AdamW(nn::ParamList params, const AdamWConfig& config);

    // Applies one step with the tensors' current gradients (absent = zero).
    void step();
    const OptimizerState& state() const { return state_; }
    OptimizerState& state() { return state_; }
    const AdamWConfig& config() const { return config_; }
    const nn::ParamList& params() const { return params_; }

private:
    nn::ParamList params_;
    AdamWConfig config_;
    OptimizerState state_;
};

// Scales gradients so their global norm is at most max_norm; returns the norm
// before scaling.
double clip_grad_norm(const nn::ParamList& params, double max_norm);

struct CurriculumSchedule {
    double start = 20.0;
    double end = 60.0;
    std::size_t ramp_epochs = 30;

    void validate() const;
    // Q percentile for a 0-based epoch: linear ramp, then flat.
    double percentile(std::size_t epoch) const;
};

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch = 64;
    std::size_t patience = 15;
    std::size_t max_iterations = 0;  // per epoch; 0 = one pass over the labeled windows
    AdamWConfig optimizer;
    double clip_norm = 5.0;
    LossWeights weights;
    CurriculumSchedule curriculum;
    AugmentOptions augment;
    std::uint64_t seed = 7;

    void validate() const;
    bool semi_supervised() const;
};

// Plain-value pseudo-labels T̂ + Ŝ + ensemble mean of the listed experts,
// accepted below the pct-th percentile of the ensemble variance.
PseudoLabels forecast_pseudo_labels(const ModelOutput& out, double pct, const std::vector<std::size_t>& experts);

struct IterationRecord {
    std::size_t epoch = 0;
    std::size_t iteration = 0;
    LossReport report;
    double grad_norm = 0.0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t iterations = 0;
    LossReport train;     // iteration mean
    double val_sup = 0.0;
    double val_mse = 0.0;
    double q_percentile = 0.0;
    double accepted_fraction = 0.0;
    std::string to_json() const;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::vector<IterationRecord> iterations;
    std::size_t best_epoch = 0;
    double best_val = 0.0;
    bool stopped_early = false;
};

struct ValidationResult {
    double sup = 0.0;
    double mse = 0.0;
    std::size_t windows = 0;
};

// Supervised loss and MSE over a window set, evaluated in fixed-size chunks.
ValidationResult validation_loss(const HydroFusionModel& model, const Dataset& data,
                                 const std::vector<WindowSample>& windows, const LossWeights& weights);

class Trainer {
public:
    Trainer(HydroFusionModel& model, const Dataset& data, const TrainConfig& config);

    // One optimizer step on a labeled batch and, when enabled, an unlabeled batch.
    IterationRecord step(const Batch& labeled, const Batch* unlabeled, std::size_t epoch, std::size_t iteration);
    std::vector<IterationRecord> train_epoch(std::size_t epoch);
    TrainHistory fit(const std::function<void(const EpochRecord&)>& on_epoch = {});

    AdamW& optimizer() { return optimizer_; }
    const AdamW& optimizer() const { return optimizer_; }

private:
    const Batch& next_unlabeled_batch(std::size_t size, Batch& storage);

    HydroFusionModel& model_;
    const Dataset& data_;
    TrainConfig config_;
    AdamW optimizer_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> unlabeled_order_;
    std::size_t unlabeled_cursor_ = 0;
};

std::vector<std::vector<double>> snapshot(const nn::ParamList& params);
void restore(const nn::ParamList& params, const std::vector<std::vector<double>>& values);

// JSON checkpoint with parameters, optimizer state and a config hash.
void save_checkpoint(const std::filesystem::path& path, const HydroFusionModel& model, const AdamW* optimizer,
                     const std::string& config_hash, std::size_t epoch);
struct CheckpointInfo {
    std::string config_hash;
    std::size_t epoch = 0;
};
CheckpointInfo load_checkpoint(const std::filesystem::path& path, HydroFusionModel& model, AdamW* optimizer);

void write_history(const std::filesystem::path& path, const TrainHistory& history);

}  // namespace hydrofusion
