#pragma once

// Small layer toolkit shared by the model components.

#include "hydrofusion/autodiff.hpp"

#include <random>
#include <string>
#include <vector>

namespace hydrofusion::nn {

using ad::Tensor;
using Rng = std::mt19937_64;

struct NamedParam {
    std::string name;
    Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

std::size_t count_params(const ParamList& params);

// Gaussian init scaled by 1/sqrt(fan_in) times `gain`.
Tensor init_normal(ad::Shape shape, double stddev, Rng& rng);

struct Dense {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]

    Dense() = default;
    Dense(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0);
    static Dense zeros(std::size_t in, std::size_t out);

    std::size_t in_features() const { return weight.shape()[0]; }
    std::size_t out_features() const { return weight.shape()[1]; }

    // x: [..., in] -> [..., out]
    Tensor operator()(const Tensor& x) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

// 'same'-padded stride-1 convolution over [B, C, L]. Zero padding unless
// `replicate` is set, in which case edge values are repeated.
struct Conv1d {
    Tensor weight;  // [out, in, kernel]
    Tensor bias;    // [out]
    bool replicate = false;

    Conv1d() = default;
    Conv1d(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng);

    Tensor operator()(const Tensor& x) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

// Multi-head self-attention with a fused QKV projection.
struct SelfAttention {
    Dense qkv;  // d -> 3d
    Dense proj; // d -> d
    std::size_t heads = 1;

    SelfAttention() = default;
    SelfAttention(std::size_t d_model, std::size_t heads, Rng& rng);

    // x: [B, T, d] -> [B, T, d]
    Tensor operator()(const Tensor& x) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

// Row-wise L2 normalisation of the last axis.
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);

}  // namespace hydrofusion::nn
