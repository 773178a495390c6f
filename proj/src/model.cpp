#include "hydrofusion/model.hpp"

#include <stdexcept>

namespace hydrofusion {

void ModelConfig::validate() const {
    if (window < 2 || horizon < 2) throw std::invalid_argument("model: window and horizon must be at least 2");
    if (harmonics == 0) throw std::invalid_argument("model: harmonics must be positive");
    if (experts.none()) throw std::invalid_argument("model: at least one expert must be active");
    if (lstm_span > window) throw std::invalid_argument("model: lstm_span exceeds window");
    if (window < 30) throw std::invalid_argument("model: window must cover one 30-day block");
}

std::vector<std::size_t> ModelConfig::active_experts() const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < kExpertCount; ++k) {
        if (experts.test(k)) out.push_back(k);
    }
    return out;
}

HydroFusionModel::HydroFusionModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    nn::Rng rng(config_.seed);
    decomposition_ = Decomposition(config_.window, config_.horizon, config_.harmonics, rng, config_.global_seasonal);
    ExpertDims dims;
    dims.window = config_.window;
    dims.horizon = config_.horizon;
    dims.covariates = config_.use_covariates ? config_.covariates : 0;
    dims.embedding = config_.foundation ? FrozenEncoder::kEmbedding : 0;
    dims.lstm_span = config_.lstm_span;
    experts_ = std::make_unique<ExpertSet>(dims, rng, config_.experts);
    gate_ = GateNetwork(kContextFeatures, rng);
    mask_token_ = Tensor::zeros({1}, true);
    recon_head_ = nn::Conv1d(SpectralEncoder::kChannels, 1, 1, rng);
    projection_ = nn::Dense(SpectralEncoder::kChannels, kProjection, rng);
    // drawn last so that a disabled foundation path leaves every other draw unchanged
    if (config_.foundation) {
        frozen_.emplace(config_.window, config_.foundation_seed);
        adapter_.emplace(rng);
    }
}

Tensor HydroFusionModel::gate_weights(const Tensor& context, std::size_t batch) const {
    const auto active = config_.active_experts();
    if (!config_.learned_gate || active.size() == 1) {
        std::vector<double> g(batch * kExpertCount, 0.0);
        const double w = 1.0 / static_cast<double>(active.size());
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t k : active) g[b * kExpertCount + k] = w;
        }
        return Tensor({batch, kExpertCount}, std::move(g));
    }
    if (context.dim() != 2 || context.shape()[0] != batch || context.shape()[1] != kContextFeatures) {
        throw ad::ShapeError("model: context " + ad::shape_str(context.shape()) + " for batch " + std::to_string(batch));
    }
    Tensor logits = gate_.logits(context);
    if (active.size() < kExpertCount) {
        std::vector<double> off(batch * kExpertCount, 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t k = 0; k < kExpertCount; ++k) {
                if (!config_.experts.test(k)) off[b * kExpertCount + k] = -1e30;
            }
        }
        logits = logits + Tensor({batch, kExpertCount}, std::move(off));
    }
    return ad::softmax(logits, 1);
}

ModelOutput HydroFusionModel::forward(const ModelInput& in) const {
    if (in.x.dim() != 2 || in.x.shape()[1] != config_.window) {
        throw ad::ShapeError("model: input window " + ad::shape_str(in.x.shape()) + ", expected [B," +
                             std::to_string(config_.window) + "]");
    }
    const std::size_t B = in.x.shape()[0], H = config_.horizon;
    if (in.anchors.size() != B) throw ad::ShapeError("model: anchor count does not match batch");
    ModelOutput out;
    if (config_.decomposition) {
        DecompositionResult d = decomposition_.decompose(in.x, in.anchors);
        out.trend = d.trend;
        out.seasonal = d.seasonal;
        out.residual = d.residual;
        out.trend_hat = d.trend_hat;
        out.seasonal_hat = d.seasonal_hat;
    } else {
        out.trend = Tensor::zeros({B, config_.window});
        out.seasonal = Tensor::zeros({B, config_.window});
        out.residual = in.x;
        out.trend_hat = Tensor::zeros({B, H});
        out.seasonal_hat = Tensor::zeros({B, H});
    }
    out.gate = gate_weights(in.context, B);
    if (config_.residual) {
        ExpertInput ein;
        ein.residual = out.residual;
        if (config_.use_covariates) ein.covariates = in.covariates;
        if (frozen_) ein.embedding = adapter_->adapt(frozen_->encode(in.x));
        out.expert_outputs = experts_->run_all(ein);
        out.residual_hat = fuse(out.expert_outputs, out.gate);
    } else {
        out.expert_outputs = Tensor::zeros({B, kExpertCount, H});
        out.residual_hat = Tensor::zeros({B, H});
    }
    out.forecast = assemble_forecast(out.trend_hat, out.seasonal_hat, out.residual_hat);
    return out;
}

Tensor HydroFusionModel::reconstruct(const Tensor& x, const std::vector<unsigned char>& mask) const {
    if (x.dim() != 2 || mask.size() != x.numel()) throw ad::ShapeError("reconstruct: mask does not match window");
    const std::size_t B = x.shape()[0], L = x.shape()[1];
    std::vector<double> keep(mask.size()), fill(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        keep[i] = mask[i] ? 0.0 : 1.0;
        fill[i] = mask[i] ? 1.0 : 0.0;
    }
    const Tensor masked = x * Tensor(x.shape(), std::move(keep)) + Tensor(x.shape(), std::move(fill)) * mask_token_;
    const Tensor features = decomposition_.seasonal.encoder.features(masked);
    return ad::reshape(recon_head_(features), {B, L});
}

Tensor HydroFusionModel::embed(const Tensor& series) const {
    const Tensor pooled = ad::mean(decomposition_.seasonal.encoder.features(series), 2);
    return nn::l2_normalize(projection_(pooled));
}

ScaleEmbeddings HydroFusionModel::embed_scales(const Tensor& x) const {
    return {embed(x), embed(block_means(x, 7)), embed(block_means(x, 30))};
}

nn::ParamList HydroFusionModel::parameters() const {
    nn::ParamList out;
    if (config_.decomposition) {
        decomposition_.collect(out, "decomposition");
    } else {
        // the trunk still serves the self-supervised heads
        decomposition_.seasonal.encoder.collect(out, "decomposition.seasonal.encoder");
    }
    if (config_.residual) {
        experts_->collect(out, "experts");
        if (config_.learned_gate && config_.experts.count() > 1) gate_.collect(out, "gate");
        if (adapter_) adapter_->collect(out, "adapter");
    }
    out.push_back({"mask_token", mask_token_});
    recon_head_.collect(out, "reconstruction");
    projection_.collect(out, "projection");
    return out;
}

nn::ParamList HydroFusionModel::frozen_parameters() const {
    nn::ParamList out;
    if (frozen_) frozen_->collect(out, "frozen");
    return out;
}

nn::ParamList HydroFusionModel::inactive_parameters() const {
    nn::ParamList all, active;
    experts_->collect(all, "experts", true);
    experts_->collect(active, "experts");
    nn::ParamList out;
    for (const auto& p : all) {
        bool used = false;
        for (const auto& a : active) used = used || a.tensor.same_storage(p.tensor);
        if (!used) out.push_back(p);
    }
    return out;
}

void HydroFusionModel::after_step() { decomposition_.seasonal.clamp_period(); }

}  // namespace hydrofusion
