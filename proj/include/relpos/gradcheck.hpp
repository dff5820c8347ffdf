#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "relpos/rng.hpp"
#include "relpos/tensor.hpp"

namespace relpos {

struct FdOptions {
    // Coordinates sampled per parameter tensor; <= 0 checks every coordinate.
    int max_coords_per_param = 24;
    std::uint64_t seed = 0x5eedc0de;
    // Multiplies the analytic gradient before comparison. 1.0 in normal use;
    // any other value injects a fault to exercise the detector itself.
    double grad_scale = 1.0;
};

// Central-difference verification of reverse-mode gradients, 64-bit only.
// `loss_fn` must rebuild the graph from the current parameter values on every
// call and be deterministic (dropout disabled). Returns the max over sampled
// coordinates of |analytic - fd| / (|analytic| + |fd| + 1e-12).
inline double finite_diff_check(const std::function<Tensor<double>()>& loss_fn,
                                std::vector<Tensor<double>> params, double epsilon,
                                FdOptions opts = {}) {
    for (auto& p : params) p.zero_grad();
    Tensor<double> loss = loss_fn();
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        if (p.has_grad()) {
            analytic.push_back(p.grad());
        } else {
            analytic.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
        }
        for (auto& a : analytic.back()) a *= opts.grad_scale;
    }

    Rng rng(opts.seed);
    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& vals = params[pi].mutable_values();
        const auto n = static_cast<std::int64_t>(vals.size());
        std::vector<std::int64_t> coords;
        if (opts.max_coords_per_param <= 0 || n <= opts.max_coords_per_param) {
            for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (const int c : rng.sample_indices(static_cast<int>(n), opts.max_coords_per_param)) {
                coords.push_back(c);
            }
        }
        for (const auto c : coords) {
            const double saved = vals[static_cast<std::size_t>(c)];
            vals[static_cast<std::size_t>(c)] = saved + epsilon;
            const double f_plus = loss_fn().item();
            vals[static_cast<std::size_t>(c)] = saved - epsilon;
            const double f_minus = loss_fn().item();
            vals[static_cast<std::size_t>(c)] = saved;
            const double fd = (f_plus - f_minus) / (2.0 * epsilon);
            const double a = analytic[pi][static_cast<std::size_t>(c)];
            const double rel = std::fabs(a - fd) / (std::fabs(a) + std::fabs(fd) + 1e-12);
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace relpos
