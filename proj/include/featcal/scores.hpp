#pragma once

// Softmax, cross-entropy and top-1 decisions over class-score columns.

#include "featcal/core.hpp"

#include <vector>

namespace featcal {

inline Vector softmax(const Vector& z) {
    const double mx = z.maxCoeff();
    Vector p = (z.array() - mx).exp();
    return p / p.sum();
}

/// diag(p) - p p^T at logits z.
inline Matrix softmax_jacobian(const Vector& z) {
    const Vector p = softmax(z);
    Matrix j = -p * p.transpose();
    j.diagonal() += p;
    return j;
}

inline double log_sum_exp(const Vector& z) {
    const double mx = z.maxCoeff();
    return mx + std::log((z.array() - mx).exp().sum());
}

inline double cross_entropy(const Vector& z, int label) { return log_sum_exp(z) - z(label); }

/// Gradient of cross_entropy with respect to the logits: p(z) - u_y.
inline Vector cross_entropy_gradient(const Vector& z, int label) {
    Vector g = softmax(z);
    g(label) -= 1.0;
    return g;
}

/// Lowest index wins ties.
inline int argmax(const Vector& z) {
    int best = 0;
    for (Eigen::Index k = 1; k < z.size(); ++k)
        if (z(k) > z(best)) best = static_cast<int>(k);
    return best;
}

/// Mean cross-entropy over the columns of `scores`.
inline double mean_cross_entropy(const Matrix& scores, const std::vector<int>& labels) {
    if (static_cast<std::size_t>(scores.cols()) != labels.size()) throw ShapeError("label count mismatch", "loss");
    double total = 0.0;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) total += cross_entropy(scores.col(j), labels[j]);
    return scores.cols() ? total / static_cast<double>(scores.cols()) : 0.0;
}

} // namespace featcal
