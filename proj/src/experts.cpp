#include "hydrofusion/experts.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace hydrofusion {

namespace {

// Mean over the window axis of [B, L, C] covariates, appended with the
// embedding; returns an empty list when neither is present.
std::vector<Tensor> side_features(const ExpertInput& in) {
    std::vector<Tensor> out;
    if (in.covariate_count() > 0) out.push_back(ad::mean(in.covariates, 1));
    if (in.embedding_dim() > 0) out.push_back(in.embedding);
    return out;
}

Tensor with_side_features(const Tensor& pooled, const ExpertInput& in) {
    std::vector<Tensor> parts{pooled};
    for (Tensor& t : side_features(in)) parts.push_back(std::move(t));
    return parts.size() == 1 ? pooled : ad::concat(parts, 1);
}

void check_input(const ExpertInput& in, const ExpertDims& dims, const char* name) {
    if (in.residual.dim() != 2 || in.window() != dims.window) {
        throw ad::ShapeError(std::string(name) + ": residual window must be [B," + std::to_string(dims.window) +
                             "], got " + ad::shape_str(in.residual.shape()));
    }
    if (in.covariate_count() != dims.covariates ||
        (dims.covariates > 0 && (in.covariates.shape()[0] != in.batch() || in.covariates.shape()[1] != dims.window))) {
        throw ad::ShapeError(std::string(name) + ": covariates must be [B,L," + std::to_string(dims.covariates) +
                             "], got " + ad::shape_str(in.covariates.shape()));
    }
    if (in.embedding_dim() != dims.embedding) {
        throw ad::ShapeError(std::string(name) + ": embedding width " + std::to_string(in.embedding_dim()) +
                             " != " + std::to_string(dims.embedding));
    }
}

}  // namespace

std::size_t Expert::parameter_count() const {
    nn::ParamList ps;
    collect(ps, "");
    return nn::count_params(ps);
}

void Expert::enforce_budget(std::string_view name) const {
    const std::size_t n = parameter_count();
    if (n >= kMaxExpertParams) {
        throw std::length_error(std::string(name) + " expert has " + std::to_string(n) + " parameters (limit " +
                                std::to_string(kMaxExpertParams) + ")");
    }
}

// ---------------------------------------------------------------- linear

LinearExpert::LinearExpert(const ExpertDims& dims, nn::Rng& rng)
    : head(dims.window + dims.covariates + dims.embedding, dims.horizon, rng, 0.5) {
    enforce_budget("linear");
}

Tensor LinearExpert::forward(const ExpertInput& in) const {
    return head(with_side_features(in.residual, in));
}

void LinearExpert::collect(nn::ParamList& out, const std::string& prefix) const { head.collect(out, prefix + ".head"); }

// ---------------------------------------------------------------- frequency

FrequencyExpert::FrequencyExpert(const ExpertDims& dims, nn::Rng& rng)
    : conv1(1, kChannels, 7, rng),
      conv2(kChannels, kChannels, 15, rng),
      conv3(kChannels, kChannels, 31, rng),
      head(2 * kPeriods.size() + 2 * kChannels + dims.covariates + dims.embedding, dims.horizon, rng, 0.5) {
    const std::size_t L = dims.window;
    const std::size_t P = kPeriods.size();
    std::vector<double> b(L * 2 * P);
    const double scale = 2.0 / static_cast<double>(L);
    for (std::size_t j = 0; j < L; ++j) {
        // phase measured from the window end
        const double lag = static_cast<double>(j) - static_cast<double>(L - 1);
        for (std::size_t p = 0; p < P; ++p) {
            const double w = 2.0 * std::numbers::pi * lag / kPeriods[p];
            b[j * 2 * P + p] = scale * std::cos(w);
            b[j * 2 * P + P + p] = scale * std::sin(w);
        }
    }
    basis = Tensor({L, 2 * P}, std::move(b));
    enforce_budget("frequency");
}

Tensor FrequencyExpert::projections(const Tensor& residual) const { return ad::matmul(residual, basis); }

Tensor FrequencyExpert::forward(const ExpertInput& in) const {
    const std::size_t B = in.batch(), L = in.window();
    const Tensor proj = projections(in.residual);
    Tensor h = ad::reshape(in.residual, {B, 1, L});
    h = ad::tanh(conv1(h));
    h = ad::tanh(conv2(h));
    h = ad::tanh(conv3(h));
    const Tensor pooled = ad::mean(h, 2);
    const Tensor last = ad::reshape(ad::slice(h, 2, L - 1, L), {B, kChannels});
    return head(with_side_features(ad::concat({proj, pooled, last}, 1), in));
}

void FrequencyExpert::collect(nn::ParamList& out, const std::string& prefix) const {
    conv1.collect(out, prefix + ".conv1");
    conv2.collect(out, prefix + ".conv2");
    conv3.collect(out, prefix + ".conv3");
    head.collect(out, prefix + ".head");
}

// ---------------------------------------------------------------- patch transformer

std::size_t PatchTransformerExpert::patch_count(std::size_t window) {
    if (window <= kPatch) return 1;
    return (window - kPatch) / kStride + 1;
}

PatchTransformerExpert::PatchTransformerExpert(const ExpertDims& dims, nn::Rng& rng)
    : n_patches(patch_count(dims.window)),
      embed(kPatch, kModel, rng),
      positional(nn::init_normal({n_patches, kModel}, 0.1, rng)),
      attention(kModel, kHeads, rng),
      ff1(kModel, 2 * kModel, rng),
      ff2(2 * kModel, kModel, rng, 0.5),
      head(kModel + dims.covariates + dims.embedding, dims.horizon, rng, 0.5) {
    enforce_budget("patch_transformer");
}

Tensor PatchTransformerExpert::patches(const Tensor& residual) const {
    const std::size_t B = residual.shape()[0], L = residual.shape()[1];
    Tensor r = residual;
    if (L < kPatch) {
        // right-pad short windows with the last value
        r = ad::concat({r, ad::broadcast_to(ad::slice(r, 1, L - 1, L), {B, kPatch - L})}, 1);
        return ad::reshape(r, {B, 1, kPatch});
    }
    // the patches end exactly at the last day; leading days that do not fill
    // a stride step are left out
    const std::size_t offset = L - ((n_patches - 1) * kStride + kPatch);
    std::vector<Tensor> parts;
    parts.reserve(n_patches);
    for (std::size_t p = 0; p < n_patches; ++p) {
        const std::size_t begin = offset + p * kStride;
        parts.push_back(ad::reshape(ad::slice(r, 1, begin, begin + kPatch), {B, 1, kPatch}));
    }
    return ad::concat(parts, 1);
}

Tensor PatchTransformerExpert::encode(const Tensor& tokens) const {
    const Tensor z = tokens + attention(tokens);
    return z + ff2(ad::tanh(ff1(z)));
}

Tensor PatchTransformerExpert::forward(const ExpertInput& in) const {
    const Tensor tokens = embed(patches(in.residual)) + positional;
    const Tensor pooled = ad::mean(encode(tokens), 1);
    return head(with_side_features(pooled, in));
}

void PatchTransformerExpert::collect(nn::ParamList& out, const std::string& prefix) const {
    embed.collect(out, prefix + ".embed");
    out.push_back({prefix + ".positional", positional});
    attention.collect(out, prefix + ".attention");
    ff1.collect(out, prefix + ".ff1");
    ff2.collect(out, prefix + ".ff2");
    head.collect(out, prefix + ".head");
}

// ---------------------------------------------------------------- lstm

LstmExpert::LstmExpert(const ExpertDims& dims, nn::Rng& rng)
    : span(dims.lstm_span == 0 ? dims.window : std::min(dims.lstm_span, dims.window)),
      input_weight(nn::init_normal({1 + dims.covariates, 4 * kHidden},
                                   1.0 / std::sqrt(static_cast<double>(1 + dims.covariates)), rng)),
      recurrent_weight(nn::init_normal({kHidden, 4 * kHidden}, 1.0 / std::sqrt(static_cast<double>(kHidden)), rng)),
      gate_bias(Tensor::zeros({4 * kHidden}, true)),
      head(kHidden + dims.embedding, dims.horizon, rng, 0.5) {
    // forget gate opens at initialisation
    auto b = gate_bias.mutable_data();
    for (std::size_t k = kHidden; k < 2 * kHidden; ++k) b[k] = 1.0;
    enforce_budget("lstm");
}

LstmExpert::State LstmExpert::step(const Tensor& input_projection, const State& state) const {
    const Tensor gates = input_projection + ad::matmul(state.h, recurrent_weight);
    const Tensor i = ad::sigmoid(ad::slice(gates, 1, 0, kHidden));
    const Tensor f = ad::sigmoid(ad::slice(gates, 1, kHidden, 2 * kHidden));
    const Tensor g = ad::tanh(ad::slice(gates, 1, 2 * kHidden, 3 * kHidden));
    const Tensor o = ad::sigmoid(ad::slice(gates, 1, 3 * kHidden, 4 * kHidden));
    State next;
    next.c = f * state.c + i * g;
    next.h = o * ad::tanh(next.c);
    return next;
}

LstmExpert::State LstmExpert::run(const Tensor& inputs) const {
    const std::size_t B = inputs.shape()[0], S = inputs.shape()[1];
    const Tensor projected = ad::matmul(inputs, input_weight) + gate_bias;  // [B, S, 4h]
    State s{Tensor::zeros({B, kHidden}), Tensor::zeros({B, kHidden})};
    for (std::size_t t = 0; t < S; ++t) {
        s = step(ad::reshape(ad::slice(projected, 1, t, t + 1), {B, 4 * kHidden}), s);
    }
    return s;
}

Tensor LstmExpert::final_hidden(const Tensor& inputs) const {
    const Tensor projected = ad::matmul(inputs, input_weight) + gate_bias;
    return ad::lstm_sequence(projected, recurrent_weight);
}

Tensor LstmExpert::forward(const ExpertInput& in) const {
    const std::size_t B = in.batch(), L = in.window();
    const std::size_t first = L - span;
    Tensor seq = ad::reshape(ad::slice(in.residual, 1, first, L), {B, span, 1});
    if (in.covariate_count() > 0) seq = ad::concat({seq, ad::slice(in.covariates, 1, first, L)}, 2);
    Tensor features = final_hidden(seq);
    if (in.embedding_dim() > 0) features = ad::concat({features, in.embedding}, 1);
    return head(features);
}

void LstmExpert::collect(nn::ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".input_weight", input_weight});
    out.push_back({prefix + ".recurrent_weight", recurrent_weight});
    out.push_back({prefix + ".gate_bias", gate_bias});
    head.collect(out, prefix + ".head");
}

// ---------------------------------------------------------------- dyn-norm attention

DynNormAttentionExpert::DynNormAttentionExpert(const ExpertDims& dims, nn::Rng& rng)
    : embed(1 + dims.covariates, kModel, rng),
      positional(nn::init_normal({dims.window, kModel}, 0.1, rng)),
      attention(kModel, kHeads, rng),
      head(kModel + dims.embedding, dims.horizon, rng, 0.5) {
    enforce_budget("dyn_norm_attention");
}

Tensor DynNormAttentionExpert::forward(const ExpertInput& in) const {
    const std::size_t B = in.batch(), L = in.window();
    const Tensor mu = ad::mean(in.residual, 1, true);                      // [B,1]
    const Tensor sigma = ad::sqrt(ad::variance(in.residual, 1, true));     // [B,1]
    const Tensor normed = (in.residual - mu) / (sigma + kEps);
    Tensor tokens = ad::reshape(normed, {B, L, 1});
    if (in.covariate_count() > 0) tokens = ad::concat({tokens, in.covariates}, 2);
    Tensor z = embed(tokens) + positional;
    z = z + attention(z);
    Tensor features = ad::mean(z, 1);
    if (in.embedding_dim() > 0) features = ad::concat({features, in.embedding}, 1);
    return head(features) * sigma + mu;
}

void DynNormAttentionExpert::collect(nn::ParamList& out, const std::string& prefix) const {
    embed.collect(out, prefix + ".embed");
    out.push_back({prefix + ".positional", positional});
    attention.collect(out, prefix + ".attention");
    head.collect(out, prefix + ".head");
}

// ---------------------------------------------------------------- set

ExpertSet::ExpertSet(const ExpertDims& dims, nn::Rng& rng, std::bitset<kExpertCount> active)
    : active_(active), dims_(dims) {
    if (active.none()) throw std::invalid_argument("ExpertSet: at least one expert must be active");
    experts_[0] = std::make_unique<LinearExpert>(dims, rng);
    experts_[1] = std::make_unique<FrequencyExpert>(dims, rng);
    experts_[2] = std::make_unique<PatchTransformerExpert>(dims, rng);
    experts_[3] = std::make_unique<LstmExpert>(dims, rng);
    experts_[4] = std::make_unique<DynNormAttentionExpert>(dims, rng);
}

Tensor ExpertSet::run_all(const ExpertInput& in) const {
    check_input(in, dims_, "run_all_experts");
    const std::size_t B = in.batch();
    std::vector<Tensor> rows;
    rows.reserve(kExpertCount);
    for (std::size_t k = 0; k < kExpertCount; ++k) {
        Tensor y = active_[k] ? experts_[k]->forward(in) : Tensor::zeros({B, dims_.horizon});
        rows.push_back(ad::reshape(y, {B, 1, dims_.horizon}));
    }
    return ad::concat(rows, 1);
}

void ExpertSet::collect(nn::ParamList& out, const std::string& prefix, bool include_inactive) const {
    for (std::size_t k = 0; k < kExpertCount; ++k) {
        if (!active_[k] && !include_inactive) continue;
        experts_[k]->collect(out, prefix + "." + std::string(kExpertNames[k]));
    }
}

}  // namespace hydrofusion
