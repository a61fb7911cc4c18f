#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <vector>

#include "adm/tensor.hpp"

namespace adm {

struct GradCheckReport {
    struct Entry {
        double max_rel_err = 0.0;
        double max_abs_err = 0.0;
        std::size_t worst_index = 0;
        std::size_t checked = 0;
        std::size_t skipped = 0;  // central difference straddled a kink
    };
    std::vector<Entry> per_input;
    double tol = 0.0;

    double max_rel_err() const {
        double m = 0.0;
        for (const auto& e : per_input) m = std::max(m, e.max_rel_err);
        return m;
    }
    std::size_t checked() const {
        std::size_t n = 0;
        for (const auto& e : per_input) n += e.checked;
        return n;
    }
    std::size_t skipped() const {
        std::size_t n = 0;
        for (const auto& e : per_input) n += e.skipped;
        return n;
    }
    bool passed() const { return max_rel_err() < tol; }
};

namespace detail {

/// Sign pattern of every relu/abs input in the graph below `root`. Two
/// evaluations with equal patterns lie on the same smooth piece.
template <class T>
std::vector<bool> kink_pattern(const Tensor<T>& root) {
    std::vector<bool> bits;
    const Graph<T> g(root);
    for (const auto* n : g.nodes()) {
        if (std::strcmp(n->op, "relu") != 0 && std::strcmp(n->op, "abs") != 0) continue;
        for (const T v : n->parents.at(0)->data) bits.push_back(v > T(0));
        for (const T v : n->parents.at(0)->data) bits.push_back(v < T(0));
    }
    return bits;
}

}  // namespace detail

/// Compares the analytic gradient of a scalar closure against central
/// differences for every element of every input. Inputs are leaf tensors the
/// closure reads; they are perturbed in place and restored.
///
/// Relative error is |a - n| / max(|a|, |n|, floor) with floor =
/// max(1e-6, 1e-3 * max|a| over that input), so gradients that are zero up to
/// roundoff do not blow up the ratio.
///
/// With `skip_kinks`, an element whose +h and -h evaluations switch any
/// relu/abs input sign relative to the unperturbed point is counted as skipped
/// instead of compared: the difference quotient there is not a derivative.
template <class T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& closure, std::vector<Tensor<T>> inputs,
                           double h = 1e-3, double tol = 1e-3, bool skip_kinks = false) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }
    std::vector<bool> base_pattern;
    {
        const auto y = closure();
        if (skip_kinks) base_pattern = detail::kink_pattern(y);
        y.backward();
    }
    std::vector<std::vector<T>> analytic;
    for (auto& in : inputs) {
        const auto g = in.grad();
        analytic.emplace_back(g.begin(), g.end());
    }

    GradCheckReport report;
    report.tol = tol;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto data = inputs[t].data();
        double gmax = 0.0;
        for (const T a : analytic[t]) gmax = std::max(gmax, std::abs(static_cast<double>(a)));
        const double floor = std::max(1e-6, 1e-3 * gmax);
        GradCheckReport::Entry e;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const T orig = data[i];
            bool smooth = true;
            auto eval = [&](T v) {
                data[i] = v;
                const auto y = closure();
                if (skip_kinks && smooth) smooth = detail::kink_pattern(y) == base_pattern;
                return static_cast<double>(y.item());
            };
            const double fp = eval(static_cast<T>(orig + h));
            const double fm = eval(static_cast<T>(orig - h));
            data[i] = orig;
            if (!smooth) {
                ++e.skipped;
                continue;
            }
            ++e.checked;
            const double num = (fp - fm) / (2.0 * h);
            const double a = analytic[t][i];
            const double abs_err = std::abs(a - num);
            const double rel = abs_err / std::max({std::abs(a), std::abs(num), floor});
            e.max_abs_err = std::max(e.max_abs_err, abs_err);
            if (rel > e.max_rel_err) {
                e.max_rel_err = rel;
                e.worst_index = i;
            }
        }
        report.per_input.push_back(e);
    }
    for (auto& in : inputs) in.zero_grad();
    return report;
}

}  // namespace adm
