#pragma once

// Averages of a function over t in [0, 1]: fixed-node composite trapezoid, and
// node-doubling trapezoid with Richardson (Romberg) extrapolation.

#include "featcal/core.hpp"

#include <vector>

namespace featcal {

namespace detail {
inline double quad_norm(double v) { return std::abs(v); }
template <class Derived>
double quad_norm(const Eigen::MatrixBase<Derived>& m) {
    return m.norm();
}
} // namespace detail

/// Composite trapezoid average of f over [0, 1] with `nodes` equispaced nodes.
template <class F>
auto trapezoid_average(F&& f, int nodes) {
    if (nodes < 2) throw ConfigError("trapezoid needs at least 2 nodes", "quadrature");
    using T = std::decay_t<decltype(f(0.0))>;
    const double h = 1.0 / static_cast<double>(nodes - 1);
    T sum = 0.5 * (f(0.0) + f(1.0));
    for (int k = 1; k < nodes - 1; ++k) sum = sum + f(static_cast<double>(k) * h);
    return T(sum * h);
}

template <class T>
struct ConvergedAverage {
    T value;
    int nodes = 0;
    double achieved = 0.0; // difference between the last two estimates
    bool converged = false;
};

struct QuadratureOptions {
    int initial_nodes = 33;
    int max_nodes = 1025;
    double tolerance = 1e-8;
    bool richardson = true;
};

/// Doubles the trapezoid node count (33 -> 65 -> ...) until successive
/// estimates differ by less than the tolerance in Frobenius norm, or the cap is
/// reached. With `richardson`, estimates are the diagonal of the Romberg table.
template <class F>
auto converged_average(F&& f, const QuadratureOptions& opt = {}) {
    using T = std::decay_t<decltype(f(0.0))>;
    if (opt.initial_nodes < 2 || ((opt.initial_nodes - 1) & (opt.initial_nodes - 2)) != 0)
        throw ConfigError("initial node count must be 2^k + 1", "quadrature");

    int nodes = opt.initial_nodes;
    T trap = trapezoid_average(f, nodes);
    std::vector<T> row{trap};
    ConvergedAverage<T> out{trap, nodes, 0.0, false};
    while (2 * (nodes - 1) + 1 <= opt.max_nodes) {
        const int next = 2 * (nodes - 1) + 1;
        const double h = 1.0 / static_cast<double>(next - 1);
        T odd = f(h);
        for (int k = 3; k < next; k += 2) odd = odd + f(static_cast<double>(k) * h);
        trap = T(0.5 * trap + h * odd);
        nodes = next;

        std::vector<T> new_row{trap};
        if (opt.richardson) {
            double factor = 4.0;
            for (std::size_t j = 0; j < row.size(); ++j, factor *= 4.0)
                new_row.push_back(T(new_row[j] + (new_row[j] - row[j]) / (factor - 1.0)));
        }
        const T& estimate = new_row.back();
        out.achieved = detail::quad_norm(estimate - out.value);
        out.value = estimate;
        out.nodes = nodes;
        row = std::move(new_row);
        if (out.achieved < opt.tolerance) {
            out.converged = true;
            break;
        }
    }
    return out;
}

} // namespace featcal
