#include "hydrofusion/foundation_adapter.hpp"

#include <cstring>
#include <iomanip>
#include <sstream>

namespace hydrofusion {

namespace {

nn::Dense frozen_dense(std::size_t in, std::size_t out, nn::Rng& rng) {
    nn::Dense d(in, out, rng);
    d.weight.set_requires_grad(false);
    d.bias.set_requires_grad(false);
    // small random bias so the stack is not odd-symmetric
    std::normal_distribution<double> dist(0.0, 0.1);
    for (double& b : d.bias.mutable_data()) b = dist(rng);
    return d;
}

}  // namespace

FrozenEncoder::FrozenEncoder(std::size_t window, std::uint64_t seed) : seed_(seed) {
    nn::Rng rng(seed);
    l1 = frozen_dense(window, kHidden, rng);
    l2 = frozen_dense(kHidden, kHidden, rng);
    l3 = frozen_dense(kHidden, kEmbedding, rng);
}

Tensor FrozenEncoder::encode(const Tensor& x) const { return ad::tanh(l3(ad::tanh(l2(ad::tanh(l1(x)))))); }

std::size_t FrozenEncoder::parameter_count() const {
    nn::ParamList ps;
    collect(ps, "");
    return nn::count_params(ps);
}

std::string FrozenEncoder::hash() const {
    nn::ParamList ps;
    collect(ps, "");
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : ps) {
        for (double v : p.tensor.data()) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof(double));
            for (unsigned char c : bytes) {
                h ^= c;
                h *= 1099511628211ULL;
            }
        }
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

void FrozenEncoder::collect(nn::ParamList& out, const std::string& prefix) const {
    l1.collect(out, prefix + ".l1");
    l2.collect(out, prefix + ".l2");
    l3.collect(out, prefix + ".l3");
}

Adapter::Adapter(nn::Rng& rng)
    : down(FrozenEncoder::kEmbedding, kBottleneck, rng), up(nn::Dense::zeros(kBottleneck, FrozenEncoder::kEmbedding)) {}

Tensor Adapter::delta(const Tensor& h) const { return up(ad::tanh(down(h))); }

Tensor Adapter::adapt(const Tensor& h) const { return h + delta(h); }

std::size_t Adapter::parameter_count() const {
    nn::ParamList ps;
    collect(ps, "");
    return nn::count_params(ps);
}

void Adapter::collect(nn::ParamList& out, const std::string& prefix) const {
    down.collect(out, prefix + ".down");
    up.collect(out, prefix + ".up");
}

}  // namespace hydrofusion
