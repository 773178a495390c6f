#pragma once

#include "hydrofusion/autodiff.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace hydrofusion::ad {

struct GradCheckOptions {
    double epsilon = 1e-6;
    double tolerance = 1e-4;
    // Coordinates whose analytic and numeric gradients are both below this
    // magnitude are compared absolutely against small_tolerance.
    double small_gradient = 1e-8;
    double small_tolerance = 1e-6;
    // 0 checks every coordinate; otherwise a seeded random subset per tensor.
    std::size_t max_coords_per_tensor = 0;
    std::uint64_t seed = 7;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    double max_absolute_error = 0.0;  // over the small-gradient coordinates
    std::size_t coordinates_checked = 0;
    std::string worst;                // "<tensor>[<index>]: analytic=.. numeric=.."
    bool passed = true;
};

// Compares the reverse-mode gradient of `loss` against central differences
// (f(θ+ε) − f(θ−ε)) / 2ε for every coordinate of every tensor in `params`.
// `loss` must be deterministic and must rebuild its graph on every call; it
// is evaluated once under a fresh tape and then repeatedly without one.
GradCheckReport finite_difference_check(const std::function<Tensor()>& loss,
                                        const std::vector<Tensor>& params,
                                        const GradCheckOptions& options = {},
                                        const std::vector<std::string>& names = {});

}  // namespace hydrofusion::ad
