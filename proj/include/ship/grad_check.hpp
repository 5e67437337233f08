#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ship/ops.hpp"

namespace ship {

// ---------------------------------------------------------------------------
// Central finite-difference gradient checker. The forward callable must
// return a scalar tensor and must read its parameters through the same
// handles passed in `params`, so that perturbing a value here is visible to
// the next evaluation.
//
// Relative error per element: |analytic - numeric| / max(|analytic|, |numeric|),
// taken as 0 when the absolute difference is below `abs_floor` (both sides
// numerically zero).
// ---------------------------------------------------------------------------

struct GradCheckParam {
    std::string name;
    Tensor tensor;
};

struct GradCheckReport {
    struct Entry {
        std::string name;
        double max_rel_err = 0.0;
        double max_abs_err = 0.0;
        std::size_t worst_index = 0;
        double analytic_at_worst = 0.0;
        double numeric_at_worst = 0.0;
        std::size_t checked = 0;
    };
    std::vector<Entry> entries;
    double max_rel_err = 0.0;

    bool passed(double tol) const { return max_rel_err <= tol; }
};

inline GradCheckReport grad_check(const std::function<Tensor()>& forward,
                                  std::vector<GradCheckParam> params, double eps = 1e-5,
                                  std::size_t max_checks_per_param = 0,
                                  double abs_floor = 1e-8) {
    for (auto& p : params) {
        p.tensor.set_requires_grad(true);
        p.tensor.zero_grad();
    }

    // Analytic pass.
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor y = forward();
        if (y.size() != 1) throw ShapeError("grad_check: forward must return a scalar");
        if (!std::isfinite(y.item())) throw NumericError("grad_check: forward value is not finite");
        tape.backward(y);
    }
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(p.tensor.grad());

    // Numeric pass: central differences, evaluated with recording suppressed.
    GradCheckReport report;
    NoGradGuard no_grad;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& t = params[pi].tensor;
        GradCheckReport::Entry entry;
        entry.name = params[pi].name;

        const std::size_t n = t.size();
        std::size_t checks = n;
        std::size_t stride = 1;
        if (max_checks_per_param > 0 && n > max_checks_per_param) {
            checks = max_checks_per_param;
            stride = n / max_checks_per_param;
        }
        for (std::size_t c = 0; c < checks; ++c) {
            const std::size_t i = c * stride;
            const double saved = t.at(i);
            t.at(i) = saved + eps;
            const double up = forward().item();
            t.at(i) = saved - eps;
            const double down = forward().item();
            t.at(i) = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw NumericError("grad_check: perturbed forward value is not finite at " +
                                   entry.name + "[" + std::to_string(i) + "]");
            }
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double abs_err = std::abs(a - numeric);
            double rel = 0.0;
            if (abs_err > abs_floor) rel = abs_err / std::max(std::abs(a), std::abs(numeric));
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.analytic_at_worst = a;
                entry.numeric_at_worst = numeric;
            }
            entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
            ++entry.checked;
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace ship
