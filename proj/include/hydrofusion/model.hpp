#pragma once

// Full forecaster: decomposition, residual experts, context gate, optional
// frozen encoder with adapter, and the heads used by the self-supervised terms.

#include "hydrofusion/context_gating.hpp"
#include "hydrofusion/decomposition.hpp"
#include "hydrofusion/experts.hpp"
#include "hydrofusion/foundation_adapter.hpp"
#include "hydrofusion/objectives.hpp"

#include <bitset>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace hydrofusion {

struct ModelConfig {
    std::size_t window = 180;
    std::size_t horizon = 30;
    std::size_t covariates = 2;
    std::size_t harmonics = 4;
    std::size_t lstm_span = 0;
    bool decomposition = true;   // off: experts see the raw window and T̂ = Ŝ = 0
    bool residual = true;        // off: the fused residual forecast is forced to 0
    bool learned_gate = true;    // off: uniform weights over the active experts
    bool use_covariates = true;
    bool global_seasonal = false;
    bool foundation = false;
    std::uint64_t foundation_seed = 2024;
    std::bitset<kExpertCount> experts{0b11111};
    std::uint64_t seed = 1;

    void validate() const;
    std::vector<std::size_t> active_experts() const;
};

struct ModelInput {
    Tensor x;                          // [B, L] standardised runoff
    Tensor covariates;                 // [B, L, C]
    Tensor context;                    // [B, kContextFeatures]
    std::vector<std::int64_t> anchors; // absolute index of each window's last day
};

struct ModelOutput {
    Tensor trend, seasonal, residual;  // [B, L]
    Tensor trend_hat, seasonal_hat;    // [B, H]
    Tensor expert_outputs;             // [B, K, H]
    Tensor gate;                       // [B, K]
    Tensor residual_hat;               // [B, H]
    Tensor forecast;                   // [B, H]
};

class HydroFusionModel {
public:
    static constexpr std::size_t kProjection = 32;

    explicit HydroFusionModel(const ModelConfig& config);
    HydroFusionModel(const HydroFusionModel&) = delete;
    HydroFusionModel& operator=(const HydroFusionModel&) = delete;

    ModelOutput forward(const ModelInput& in) const;

    // Reconstruction of x after masked positions are replaced by the mask token.
    Tensor reconstruct(const Tensor& x, const std::vector<unsigned char>& mask) const;
    // Unit-norm embedding of any [B, n] series through the shared trunk.
    Tensor embed(const Tensor& series) const;
    ScaleEmbeddings embed_scales(const Tensor& x) const;

    nn::ParamList parameters() const;         // trainable, stable order
    nn::ParamList frozen_parameters() const;  // frozen encoder, empty when disabled
    // Parameters of inactive experts; they never receive gradient.
    nn::ParamList inactive_parameters() const;
    void after_step();                        // projects τ back into its bounds

    const ModelConfig& config() const { return config_; }
    const FrozenEncoder* frozen_encoder() const { return frozen_ ? &*frozen_ : nullptr; }
    const Decomposition& decomposition() const { return decomposition_; }
    const ExpertSet& experts() const { return *experts_; }

private:
    Tensor gate_weights(const Tensor& context, std::size_t batch) const;

    ModelConfig config_;
    Decomposition decomposition_;
    std::unique_ptr<ExpertSet> experts_;
    GateNetwork gate_;
    Tensor mask_token_;     // [1]
    nn::Conv1d recon_head_; // 16 -> 1, kernel 1
    nn::Dense projection_;  // 16 -> 32
    std::optional<FrozenEncoder> frozen_;
    std::optional<Adapter> adapter_;
};

}  // namespace hydrofusion
