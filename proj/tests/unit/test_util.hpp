#pragma once

#include "hydrofusion/gradcheck.hpp"

#include <gtest/gtest.h>

#include <random>
#include <vector>

namespace hf_test {

using hydrofusion::ad::Tensor;

inline Tensor random_tensor(hydrofusion::ad::Shape shape, std::uint64_t seed, double scale = 1.0,
                            bool requires_grad = false) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    std::vector<double> v(hydrofusion::ad::shape_numel(shape));
    for (double& x : v) x = n(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Gradient check over named tensors; failures report the worst coordinate.
inline void expect_gradients(const std::function<Tensor()>& loss, const std::vector<Tensor>& params,
                             const std::vector<std::string>& names = {}, std::size_t max_coords = 0) {
    hydrofusion::ad::GradCheckOptions opt;
    opt.max_coords_per_tensor = max_coords;
    const auto r = hydrofusion::ad::finite_difference_check(loss, params, opt, names);
    EXPECT_TRUE(r.passed) << r.worst << " rel=" << r.max_relative_error << " abs=" << r.max_absolute_error;
    EXPECT_GT(r.coordinates_checked, 0u);
}

}  // namespace hf_test
