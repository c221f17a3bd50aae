// Central finite-difference verification of analytic gradients.
//
// Only instantiated for double: comparing float gradients against h=1e-5
// differences is noise. Coordinates that evaluate close to a relu kink are
// skipped and reported rather than failed.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mtdnn/tensor.hpp"

namespace mtdnn {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    int checked = 0;
    int skipped = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    int total_checked = 0;
    int total_skipped = 0;

    bool pass(double tolerance) const { return max_rel_err < tolerance; }
};

struct GradCheckOptions {
    double h = 1e-5;
    int coords_per_tensor = 32;  // sampled; all coords when the tensor is smaller
    uint64_t seed = 0;
};

// RAII toggle for the per-thread gradcheck watch.
class GradCheckScope {
  public:
    GradCheckScope() { GradCheckWatch::active() = true; }
    ~GradCheckScope() {
        GradCheckWatch::active() = false;
        GradCheckWatch::sink() = nullptr;
    }
    GradCheckScope(const GradCheckScope&) = delete;
    GradCheckScope& operator=(const GradCheckScope&) = delete;
};

namespace detail {

// A coordinate is unreliable when its perturbation moved some relu input
// across (or into the 10h neighbourhood of) the kink.
inline bool kink_crossed(const std::vector<double>& plus, const std::vector<double>& minus,
                         double h) {
    if (plus.size() != minus.size()) return true;
    const double near = 10.0 * h;
    for (size_t i = 0; i < plus.size(); ++i) {
        const double a = plus[i], b = minus[i];
        if (a == b) continue;  // input does not depend on this coordinate
        if ((a > 0) != (b > 0)) return true;
        if (std::min(std::abs(a), std::abs(b)) < near) return true;
    }
    return false;
}

}  // namespace detail

// analytic_fn: runs forward + backward and leaves gradients in param.grad.
// forward_fn: pure forward returning the loss value. Both must be
// deterministic; dropout must be disabled (the dropout op enforces this
// while the scope is active).
inline GradCheckReport gradient_check(const std::vector<Param<double>*>& params,
                                      const std::function<double()>& analytic_fn,
                                      const std::function<double()>& forward_fn,
                                      GradCheckOptions opt = {}) {
    GradCheckReport report;
    GradCheckScope scope;

    for (Param<double>* p : params) p->zero_grad();
    analytic_fn();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Param<double>* p : params) analytic.push_back(p->grad);

    Rng rng = Rng::stream(opt.seed, "gradcheck");
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Param<double>& p = *params[pi];
        GradCheckEntry entry;
        entry.name = p.name;

        std::vector<int64_t> coords;
        const int64_t n = p.size();
        if (n <= opt.coords_per_tensor) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            // sample distinct coordinates
            std::vector<int64_t> all;
            all.resize(size_t(n));
            for (int64_t i = 0; i < n; ++i) all[size_t(i)] = i;
            rng.shuffle(all);
            coords.assign(all.begin(), all.begin() + opt.coords_per_tensor);
            std::sort(coords.begin(), coords.end());
        }

        std::vector<double> relu_plus, relu_minus;
        for (int64_t c : coords) {
            const double orig = p.value[size_t(c)];
            relu_plus.clear();
            relu_minus.clear();
            GradCheckWatch::sink() = &relu_plus;
            p.value[size_t(c)] = orig + opt.h;
            const double fp = forward_fn();
            GradCheckWatch::sink() = &relu_minus;
            p.value[size_t(c)] = orig - opt.h;
            const double fm = forward_fn();
            GradCheckWatch::sink() = nullptr;
            p.value[size_t(c)] = orig;
            if (detail::kink_crossed(relu_plus, relu_minus, opt.h)) {
                ++entry.skipped;
                continue;
            }
            const double numeric = (fp - fm) / (2.0 * opt.h);
            const double a = analytic[pi][size_t(c)];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double rel = std::abs(a - numeric) / denom;
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
            ++entry.checked;
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.total_checked += entry.checked;
        report.total_skipped += entry.skipped;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace mtdnn
