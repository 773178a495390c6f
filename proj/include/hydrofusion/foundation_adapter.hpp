#pragma once

// Frozen temporal encoder with a trainable bottleneck adapter: h' = h + A(h).

#include "hydrofusion/nn.hpp"

#include <cstdint>
#include <string>

namespace hydrofusion {

using ad::Tensor;

// Seeded stand-in for a pre-trained encoder. Its parameters never require a
// gradient, so no tape ever records an edge into them.
class FrozenEncoder {
public:
    static constexpr std::size_t kHidden = 128;
    static constexpr std::size_t kEmbedding = 64;

    FrozenEncoder() = default;
    FrozenEncoder(std::size_t window, std::uint64_t seed);

    Tensor encode(const Tensor& x) const;  // [B, L] -> [B, 64]
    std::uint64_t seed() const { return seed_; }
    std::size_t parameter_count() const;
    // FNV-1a over the raw parameter bytes.
    std::string hash() const;
    void collect(nn::ParamList& out, const std::string& prefix) const;

private:
    std::uint64_t seed_ = 0;
    nn::Dense l1, l2, l3;
};

// 64 -> 8 -> 64 bottleneck; the output layer starts at zero so h' = h initially.
struct Adapter {
    static constexpr std::size_t kBottleneck = 8;
    nn::Dense down;
    nn::Dense up;

    Adapter() = default;
    explicit Adapter(nn::Rng& rng);

    Tensor delta(const Tensor& h) const;   // A(h)
    Tensor adapt(const Tensor& h) const;   // h + A(h)
    std::size_t parameter_count() const;
    void collect(nn::ParamList& out, const std::string& prefix) const;
};

}  // namespace hydrofusion
