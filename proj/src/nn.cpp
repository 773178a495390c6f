#include "hydrofusion/nn.hpp"

#include <cmath>

namespace hydrofusion::nn {

std::size_t count_params(const ParamList& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

Tensor init_normal(ad::Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    const std::size_t n = ad::shape_numel(shape);
    std::vector<double> v(n);
    for (double& x : v) x = stddev * dist(rng);
    return Tensor(std::move(shape), std::move(v), true);
}

Dense::Dense(std::size_t in, std::size_t out, Rng& rng, double gain)
    : weight(init_normal({in, out}, gain / std::sqrt(static_cast<double>(in)), rng)),
      bias(Tensor::zeros({out}, true)) {}

Dense Dense::zeros(std::size_t in, std::size_t out) {
    Dense d;
    d.weight = Tensor::zeros({in, out}, true);
    d.bias = Tensor::zeros({out}, true);
    return d;
}

Tensor Dense::operator()(const Tensor& x) const { return ad::matmul(x, weight) + bias; }

void Dense::collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

Conv1d::Conv1d(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng)
    : weight(init_normal({out, in, kernel}, 1.0 / std::sqrt(static_cast<double>(in * kernel)), rng)),
      bias(Tensor::zeros({out}, true)) {}

Tensor Conv1d::operator()(const Tensor& x) const {
    const std::size_t k = weight.shape()[2];
    const std::size_t left = (k - 1) / 2;
    if (replicate) return ad::conv1d(ad::pad_edge(x, left, k - 1 - left), weight, bias, 0, 0);
    return ad::conv1d(x, weight, bias, left, k - 1 - left);
}

void Conv1d::collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

SelfAttention::SelfAttention(std::size_t d_model, std::size_t h, Rng& rng)
    : qkv(d_model, 3 * d_model, rng), proj(d_model, d_model, rng), heads(h) {
    if (d_model % h != 0) throw std::invalid_argument("SelfAttention: d_model not divisible by heads");
}

Tensor SelfAttention::operator()(const Tensor& x) const {
    const std::size_t B = x.shape()[0], T = x.shape()[1], d = x.shape()[2];
    const std::size_t dh = d / heads;
    const Tensor fused = qkv(x);
    auto split_heads = [&](std::size_t part) {
        Tensor t = ad::slice(fused, 2, part * d, (part + 1) * d);
        t = ad::reshape(t, {B, T, heads, dh});
        t = ad::permute(t, {0, 2, 1, 3});
        return ad::reshape(t, {B * heads, T, dh});
    };
    const Tensor q = split_heads(0);
    const Tensor k = split_heads(1);
    const Tensor v = split_heads(2);
    Tensor ctx = ad::attention(q, k, v, 1.0 / std::sqrt(static_cast<double>(dh)));  // [B*h, T, dh]
    ctx = ad::reshape(ctx, {B, heads, T, dh});
    ctx = ad::permute(ctx, {0, 2, 1, 3});
    ctx = ad::reshape(ctx, {B, T, d});
    return proj(ctx);
}

void SelfAttention::collect(ParamList& out, const std::string& prefix) const {
    qkv.collect(out, prefix + ".qkv");
    proj.collect(out, prefix + ".proj");
}

Tensor l2_normalize(const Tensor& x, double eps) {
    const Tensor norm = ad::sqrt(ad::sum(ad::square(x), -1, true) + eps);
    return x / norm;
}

}  // namespace hydrofusion::nn
