#pragma once

// Weight-space mergers. Every entry (weights, biases, LayerNorm gamma/beta)
// is merged by the same rule.

#include "featcal/model.hpp"

#include <vector>

namespace featcal {

namespace detail {

inline void check_compatible(const ParameterSet& ref, const ParameterSet& other, const std::string& what) {
    if (other.entries.size() != ref.entries.size()) throw ShapeError("parameter sets differ in entry count", what);
    for (const auto& [k, v] : ref.entries) {
        auto it = other.entries.find(k);
        if (it == other.entries.end()) throw ShapeError("missing entry in " + what, k);
        require_same_shape(v, it->second, k);
    }
}

} // namespace detail

/// Entry-wise arithmetic mean of the experts.
inline ParameterSet simple_average(const std::vector<ParameterSet>& experts) {
    if (experts.empty()) throw ConfigError("simple_average needs at least one expert");
    for (std::size_t i = 1; i < experts.size(); ++i)
        detail::check_compatible(experts.front(), experts[i], "expert " + std::to_string(i));
    ParameterSet out;
    out.role = Role::Merged;
    const double inv = 1.0 / static_cast<double>(experts.size());
    for (const auto& [k, v] : experts.front().entries) {
        Matrix sum = v;
        for (std::size_t i = 1; i < experts.size(); ++i) sum += experts[i].entries.at(k);
        out.entries[k] = sum * inv;
    }
    return out;
}

/// W_base + scale * sum_i (W_i - W_base).
inline ParameterSet task_arithmetic(const ParameterSet& base, const std::vector<ParameterSet>& experts,
                                    double scale = 0.3) {
    for (std::size_t i = 0; i < experts.size(); ++i)
        detail::check_compatible(base, experts[i], "expert " + std::to_string(i));
    ParameterSet out;
    out.role = Role::Merged;
    for (const auto& [k, b] : base.entries) {
        Matrix task_sum = Matrix::Zero(b.rows(), b.cols());
        for (const auto& e : experts) task_sum += e.entries.at(k) - b;
        out.entries[k] = b + scale * task_sum;
    }
    return out;
}

} // namespace featcal
