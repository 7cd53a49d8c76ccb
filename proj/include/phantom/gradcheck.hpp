#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "phantom/errors.hpp"
#include "phantom/rng.hpp"
#include "phantom/tensor.hpp"

namespace phantom {

struct GradCheckEntry {
    std::string name;
    std::size_t elements_checked = 0;
    double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
    double max_abs_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_relative_error = 0.0;
    std::size_t evaluations = 0;
};

struct GradCheckOptions {
    double step = 1e-5;
    std::size_t max_elements_per_param = 0;  // 0 checks every element
    std::uint64_t seed = 0;                  // picks the subset when subsampling
};

/// Compares reverse-mode gradients of a scalar function with central
/// differences. The function is re-evaluated with each parameter element
/// perturbed in place, so it must read the parameters on every call.
template <class T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& function,
                           std::vector<std::pair<std::string, Tensor<T>>> params, const GradCheckOptions& options = {})
{
    if (!(options.step > 0)) throw ContractError("grad_check step must be positive");

    GradCheckReport report;
    auto evaluate = [&]() {
        NoGradGuard guard;
        ++report.evaluations;
        return function().item();
    };

    const T base_a = evaluate();
    const T base_b = evaluate();
    if (std::memcmp(&base_a, &base_b, sizeof(T)) != 0) {
        throw ContractError("grad_check: function is not deterministic across repeated evaluations");
    }

    for (auto& [name, p] : params) {
        p.zero_grad();
        p.set_requires_grad(true);
    }
    {
        auto loss = function();
        backward(loss);
        ++report.evaluations;
    }

    Rng rng(options.seed);
    const T h = static_cast<T>(options.step);
    for (auto& [name, p] : params) {
        GradCheckEntry entry;
        entry.name = name;
        std::vector<T> analytic(p.numel(), T(0));
        if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

        std::vector<std::size_t> indices(p.numel());
        for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
        if (options.max_elements_per_param && indices.size() > options.max_elements_per_param) {
            for (std::size_t i = 0; i < options.max_elements_per_param; ++i) {
                std::size_t j = i + rng.below(indices.size() - i);
                std::swap(indices[i], indices[j]);
            }
            indices.resize(options.max_elements_per_param);
        }

        double diff_sq = 0, a_sq = 0, n_sq = 0;
        auto values = p.mutable_data();
        for (auto i : indices) {
            const T original = values[i];
            values[i] = original + h;
            const T plus = evaluate();
            values[i] = original - h;
            const T minus = evaluate();
            values[i] = original;
            const double numeric = (static_cast<double>(plus) - static_cast<double>(minus)) / (2.0 * options.step);
            const double a = analytic[i];
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            entry.max_abs_error = std::max(entry.max_abs_error, std::abs(a - numeric));
        }
        entry.elements_checked = indices.size();
        const double denom = std::max(std::sqrt(a_sq), std::sqrt(n_sq));
        entry.relative_error = denom > 0 ? std::sqrt(diff_sq) / denom : 0.0;
        report.max_relative_error = std::max(report.max_relative_error, entry.relative_error);
        report.entries.push_back(entry);
    }
    return report;
}

}  // namespace phantom
