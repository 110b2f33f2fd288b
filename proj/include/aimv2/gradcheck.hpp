#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "aimv2/nn.hpp"

namespace aimv2 {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> per_param;
    double max_rel_err = 0.0;
    std::string worst_param;
    double tol = 0.0;
    int64_t elements_checked = 0;

    bool pass() const { return max_rel_err <= tol; }
};

// Central finite differences against analytic gradients.
//
//   loss_fn     pure forward evaluation (used for differencing)
//   analytic_fn fills parameter gradients and returns the same loss; when
//               omitted, loss_fn is assumed to fill gradients itself
//
// Per element: rel = |analytic - numeric| / max(denom_floor, |analytic|,
// |numeric|). Differencing a 64-bit loss of scale s carries roundoff noise
// of roughly s * 1e-11/eps absolute, so the floor makes the reported error
// meaningful instead of measuring that noise on near-zero gradients; with
// the defaults the check is sensitive to absolute defects down to ~1e-7.
inline GradCheckReport grad_check(const std::function<double()>& loss_fn, ParamSet& params,
                                  double eps = 1e-5, double tol = 1e-5,
                                  double denom_floor = 1e-2,
                                  const std::function<double()>& analytic_fn = nullptr) {
    if (eps <= 0.0) {
        throw std::invalid_argument("grad_check: eps must be positive");
    }
    params.zero_grads();
    const double base = analytic_fn ? analytic_fn() : loss_fn();
    if (!std::isfinite(base)) {
        throw std::runtime_error("grad_check: loss is not finite");
    }

    // Snapshot analytic gradients before the differencing loop runs.
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& e : params.entries()) {
        analytic.push_back(e.param->g);
    }

    GradCheckReport report;
    report.tol = tol;
    for (size_t pi = 0; pi < params.entries().size(); ++pi) {
        const auto& entry = params.entries()[pi];
        Tensor& w = entry.param->w;
        GradCheckEntry ge;
        ge.name = entry.name;
        for (int64_t i = 0; i < w.numel(); ++i) {
            const real saved = w[i];
            w[i] = saved + eps;
            const double up = loss_fn();
            w[i] = saved - eps;
            const double down = loss_fn();
            w[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw std::runtime_error("grad_check: loss not finite while perturbing " +
                                         entry.name);
            }
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double denom = std::max({denom_floor, std::abs(a), std::abs(numeric)});
            const double rel = std::abs(a - numeric) / denom;
            ++report.elements_checked;
            if (rel > ge.max_rel_err) {
                ge.max_rel_err = rel;
                ge.worst_index = i;
                ge.analytic = a;
                ge.numeric = numeric;
            }
        }
        if (ge.max_rel_err > report.max_rel_err) {
            report.max_rel_err = ge.max_rel_err;
            report.worst_param = ge.name;
        }
        report.per_param.push_back(std::move(ge));
    }
    return report;
}

} // namespace aimv2
