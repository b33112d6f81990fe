#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rcc/tensor.hpp"

namespace rcc {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::size_t n_checked = 0;
};

// Central-difference gradient verification of a scalar-valued function of the
// given parameters. Intended for 64-bit mode; finite differences in 32-bit
// are numerically meaningless. The numeric route evaluates loss_fn forward
// only, independently of the analytic backward pass it is checking.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                                  std::vector<Parameter<double>>& params,
                                  double h = 1e-5) {
    if (!(h >= 1e-7 && h <= 1e-4))
        throw ParamError("grad_check: h must lie in [1e-7, 1e-4]");

    for (auto& p : params) p.tensor.zero_grad();
    Tensor<double> loss = loss_fn();
    if (!std::isfinite(loss.item()))
        throw NumericError("grad_check: loss is not finite");
    if (loss.requires_grad()) loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params)
        analytic.push_back(p.tensor.has_grad() ? p.tensor.grad()
                                               : std::vector<double>(
                                                     static_cast<std::size_t>(p.tensor.numel()), 0.0));

    GradCheckReport report;
    NoGradGuard ng;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        if (!p.trainable) continue;
        auto& theta = p.tensor.value();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double orig = theta[i];
            theta[i] = orig + h;
            const double f1 = loss_fn().item();
            theta[i] = orig - h;
            const double f2 = loss_fn().item();
            theta[i] = orig;
            if (!std::isfinite(f1) || !std::isfinite(f2))
                throw NumericError("grad_check: perturbed loss is not finite at " +
                                   p.name + "[" + std::to_string(i) + "]");
            const double numeric = (f1 - f2) / (2.0 * h);
            const double rel = std::abs(analytic[pi][i] - numeric) /
                               std::max(1.0, std::abs(numeric));
            ++report.n_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = p.name;
                report.worst_index = i;
            }
        }
    }
    return report;
}

}  // namespace rcc
