#pragma once

#include "mrham/rng.hpp"
#include "mrham/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mrham {

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0;
    int checked = 0;  // scalar entries compared
    bool passed = true;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
double gradient_error(double analytic, double numeric, double floor = 1e-4);

/// Compares reverse-mode gradients of `loss` (a scalar built from `inputs`) with
/// central differences. Tensors with more than `max_per_tensor` entries are
/// spot-checked at random positions. When `reference` is given, the finite
/// differences are taken on it instead of on `loss`.
GradCheckResult check_gradients(const std::string& name, const std::vector<Tensor<double>>& inputs,
                                const std::function<Tensor<double>()>& loss, Rng& rng, int max_per_tensor = 48,
                                double eps = 1e-6, double tolerance = 1e-3,
                                const std::function<double()>& reference = {});

/// Every differentiable primitive plus the composed attention blocks, detection
/// loss and network units, on fresh random data drawn from `seed`.
std::vector<GradCheckResult> gradient_suite(std::uint64_t seed, double tolerance = 1e-3);

/// Worst case per check across seeds 0..num_seeds-1.
std::vector<GradCheckResult> run_gradient_suite(int num_seeds, double tolerance = 1e-3);

}  // namespace mrham
