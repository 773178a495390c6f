#include "hydrofusion/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace hydrofusion::ad {

namespace {

double evaluate(const std::function<Tensor()>& loss) {
    const double v = loss().item();
    if (!std::isfinite(v)) throw DomainError("finite_difference_check: loss is not finite");
    return v;
}

}  // namespace

GradCheckReport finite_difference_check(const std::function<Tensor()>& loss,
                                        const std::vector<Tensor>& params,
                                        const GradCheckOptions& options,
                                        const std::vector<std::string>& names) {
    if (!(options.epsilon >= 1e-7 && options.epsilon <= 1e-3)) {
        throw std::invalid_argument("finite_difference_check: epsilon must lie in [1e-7, 1e-3]");
    }
    std::vector<Tensor> ps = params;
    for (Tensor& p : ps) p.zero_grad();
    {
        Tape tape;
        TapeScope scope(tape);
        const Tensor l = loss();
        if (!std::isfinite(l.item())) throw DomainError("finite_difference_check: loss is not finite");
        tape.backward(l);
    }

    GradCheckReport report;
    std::mt19937_64 rng(options.seed);
    double worst_score = -1.0;
    for (std::size_t pi = 0; pi < ps.size(); ++pi) {
        Tensor& p = ps[pi];
        const std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                          : std::vector<double>(p.numel(), 0.0);
        std::vector<std::size_t> coords(p.numel());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (options.max_coords_per_tensor > 0 && coords.size() > options.max_coords_per_tensor) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(options.max_coords_per_tensor);
            std::sort(coords.begin(), coords.end());
        }
        auto values = p.mutable_data();
        for (std::size_t idx : coords) {
            const double saved = values[idx];
            values[idx] = saved + options.epsilon;
            const double up = evaluate(loss);
            values[idx] = saved - options.epsilon;
            const double down = evaluate(loss);
            values[idx] = saved;
            const double numeric = (up - down) / (2.0 * options.epsilon);
            const double a = analytic[idx];
            const double diff = std::fabs(a - numeric);
            const double scale = std::max(std::fabs(a), std::fabs(numeric));
            double score;
            if (scale < options.small_gradient) {
                report.max_absolute_error = std::max(report.max_absolute_error, diff);
                score = diff / options.small_tolerance * options.tolerance;
            } else {
                const double rel = diff / scale;
                report.max_relative_error = std::max(report.max_relative_error, rel);
                score = rel;
            }
            if (score > worst_score) {
                worst_score = score;
                std::ostringstream os;
                os << (pi < names.size() ? names[pi] : "param" + std::to_string(pi)) << '[' << idx
                   << "]: analytic=" << a << " numeric=" << numeric;
                report.worst = os.str();
            }
            ++report.coordinates_checked;
        }
    }
    report.passed = report.max_relative_error < options.tolerance &&
                    report.max_absolute_error < options.small_tolerance;
    return report;
}

}  // namespace hydrofusion::ad
