#pragma once

// The five residual forecasters. Each maps a residual window plus exogenous
// covariates (and optionally a foundation embedding) to an H-step forecast.

#include "hydrofusion/nn.hpp"

#include <array>
#include <bitset>
#include <string_view>

namespace hydrofusion {

using ad::Tensor;

struct ExpertInput {
    Tensor residual;    // [B, L]
    Tensor covariates;  // [B, L, C]; C may be 0
    Tensor embedding;   // [B, E] or empty

    std::size_t batch() const { return residual.shape()[0]; }
    std::size_t window() const { return residual.shape()[1]; }
    std::size_t covariate_count() const { return covariates.dim() == 3 ? covariates.shape()[2] : 0; }
    std::size_t embedding_dim() const { return embedding.dim() == 2 ? embedding.shape()[1] : 0; }
};

struct ExpertDims {
    std::size_t window = 180;
    std::size_t horizon = 30;
    std::size_t covariates = 2;
    std::size_t embedding = 0;
    std::size_t lstm_span = 0;  // trailing days fed to the recurrent cell; 0 = whole window
};

constexpr std::size_t kExpertCount = 5;
constexpr std::size_t kMaxExpertParams = 60000;

enum class ExpertKind : std::size_t { Linear = 0, Frequency, PatchTransformer, Lstm, DynNormAttention };

constexpr std::array<std::string_view, kExpertCount> kExpertNames = {
    "linear", "frequency", "patch_transformer", "lstm", "dyn_norm_attention"};

class Expert {
public:
    virtual ~Expert() = default;
    virtual Tensor forward(const ExpertInput& in) const = 0;
    virtual void collect(nn::ParamList& out, const std::string& prefix) const = 0;
    std::size_t parameter_count() const;

protected:
    // Throws std::length_error when the expert exceeds kMaxExpertParams.
    void enforce_budget(std::string_view name) const;
};

// Dense map of (residual window ⊕ mean-pooled covariates ⊕ embedding) to H.
class LinearExpert final : public Expert {
public:
    LinearExpert(const ExpertDims& dims, nn::Rng& rng);
    Tensor forward(const ExpertInput& in) const override;
    void collect(nn::ParamList& out, const std::string& prefix) const override;

    nn::Dense head;
};

// Sin/cos projections on a fixed period grid plus a three-layer convolution
// summary (kernels 7/15/31).
class FrequencyExpert final : public Expert {
public:
    static constexpr std::array<double, 5> kPeriods = {7.0, 14.0, 30.0, 91.0, 182.0};
    static constexpr std::size_t kChannels = 4;

    FrequencyExpert(const ExpertDims& dims, nn::Rng& rng);
    Tensor forward(const ExpertInput& in) const override;
    void collect(nn::ParamList& out, const std::string& prefix) const override;

    // [B, 2 * periods] projections of the residual window
    Tensor projections(const Tensor& residual) const;

    Tensor basis;  // [L, 10], constant
    nn::Conv1d conv1, conv2, conv3;
    nn::Dense head;
};

// Patches of 16 days with stride 8, aligned to the window end, embedded to
// d=32, one two-head attention block, mean-pooled.
class PatchTransformerExpert final : public Expert {
public:
    static constexpr std::size_t kPatch = 16;
    static constexpr std::size_t kStride = 8;
    static constexpr std::size_t kModel = 32;
    static constexpr std::size_t kHeads = 2;

    static std::size_t patch_count(std::size_t window);

    PatchTransformerExpert(const ExpertDims& dims, nn::Rng& rng);
    Tensor forward(const ExpertInput& in) const override;
    void collect(nn::ParamList& out, const std::string& prefix) const override;

    // [B, n_patches, kPatch]
    Tensor patches(const Tensor& residual) const;
    // token block: attention + feed-forward with residual connections
    Tensor encode(const Tensor& tokens) const;

    std::size_t n_patches;
    nn::Dense embed;
    Tensor positional;  // [n_patches, kModel]
    nn::SelfAttention attention;
    nn::Dense ff1, ff2;
    nn::Dense head;
};

// Single-layer LSTM (hidden 32) over (r_t, u_t); final hidden state to H.
class LstmExpert final : public Expert {
public:
    static constexpr std::size_t kHidden = 32;

    LstmExpert(const ExpertDims& dims, nn::Rng& rng);
    Tensor forward(const ExpertInput& in) const override;
    void collect(nn::ParamList& out, const std::string& prefix) const override;

    struct State {
        Tensor h, c;  // [B, hidden]
    };
    // One cell update; gates are laid out i, f, g, o.
    State step(const Tensor& input_projection, const State& state) const;
    // Runs the cell step by step over [B, S, 1 + C] inputs from zero state.
    State run(const Tensor& inputs) const;
    // Same recurrence through the fused sequence op; used by forward.
    Tensor final_hidden(const Tensor& inputs) const;

    std::size_t span;
    Tensor input_weight;      // [1 + C, 4h]
    Tensor recurrent_weight;  // [h, 4h]
    Tensor gate_bias;         // [4h]
    nn::Dense head;
};

// Tokens normalised by the window's own mean and std, day-level attention
// (d=16, 2 heads), output de-normalised with the same statistics.
class DynNormAttentionExpert final : public Expert {
public:
    static constexpr std::size_t kModel = 16;
    static constexpr std::size_t kHeads = 2;
    static constexpr double kEps = 1e-6;

    DynNormAttentionExpert(const ExpertDims& dims, nn::Rng& rng);
    Tensor forward(const ExpertInput& in) const override;
    void collect(nn::ParamList& out, const std::string& prefix) const override;

    nn::Dense embed;
    Tensor positional;  // [L, kModel]
    nn::SelfAttention attention;
    nn::Dense head;
};

// Owns the five experts; inactive experts are skipped and contribute zeros.
class ExpertSet {
public:
    ExpertSet(const ExpertDims& dims, nn::Rng& rng, std::bitset<kExpertCount> active = {0b11111});

    const Expert& expert(ExpertKind kind) const { return *experts_[static_cast<std::size_t>(kind)]; }
    Expert& expert(ExpertKind kind) { return *experts_[static_cast<std::size_t>(kind)]; }
    const std::bitset<kExpertCount>& active() const { return active_; }

    // [B, K, H] stacked in the fixed order linear, frequency, patch, lstm, dyn-norm.
    Tensor run_all(const ExpertInput& in) const;
    const ExpertDims& dims() const { return dims_; }
    // Inactive experts are left out unless include_inactive is set.
    void collect(nn::ParamList& out, const std::string& prefix, bool include_inactive = false) const;

private:
    std::array<std::unique_ptr<Expert>, kExpertCount> experts_;
    std::bitset<kExpertCount> active_;
    ExpertDims dims_;
};

}  // namespace hydrofusion
