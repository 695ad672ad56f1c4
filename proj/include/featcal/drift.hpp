#pragma once

// Feature-drift diagnostics between an expert and a merged model evaluated on
// the same batch: layer drift, local-mismatch / propagation split, path
// averaged Jacobians, final-drift reconstruction, residual growth conditions,
// and the feature-to-output bridge.

#include "featcal/model.hpp"
#include "featcal/quadrature.hpp"
#include "featcal/scores.hpp"

#include <limits>
#include <optional>
#include <vector>

namespace featcal {

/// e_l = h_l^mer - h_l^exp for l = 0..L (e_0 is zero for a shared input).
inline std::vector<Matrix> layer_drift(const FeatureTrace& expert, const FeatureTrace& merged) {
    if (expert.per_layer.size() != merged.per_layer.size()) throw ShapeError("traces differ in depth", "layer_drift");
    std::vector<Matrix> e;
    e.reserve(expert.per_layer.size());
    for (std::size_t l = 0; l < expert.per_layer.size(); ++l) {
        require_same_shape(expert.per_layer[l], merged.per_layer[l], "layer_drift: layer " + std::to_string(l));
        e.push_back(merged.per_layer[l] - expert.per_layer[l]);
    }
    return e;
}

/// Per-sample cosine between columns; 1 when both columns vanish, 0 when only one does.
inline Vector column_cosines(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "cosine");
    Vector out(a.cols());
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
        const double na = a.col(j).norm();
        const double nb = b.col(j).norm();
        if (na == 0.0 || nb == 0.0) out(j) = (na == 0.0 && nb == 0.0) ? 1.0 : 0.0;
        else out(j) = a.col(j).dot(b.col(j)) / (na * nb);
    }
    return out;
}

struct DriftRecord {
    int layer = 0;
    Matrix e;                // drift at this layer
    Matrix m;                // local mismatch
    Matrix p;                // propagated upstream drift
    std::optional<Matrix> r; // residual-branch propagation (ResidualBlock layers)
    Matrix e_prev;
    Vector e_norm, m_norm, p_norm;
    Vector cosine_to_expert;
    double decomposition_residual = 0.0;                // max |e - (m + p)|
    std::optional<double> residual_identity_residual;   // max |e - (e_prev + r + m)|
};

/// Splits the drift of one layer. On a ResidualBlock f = id + g the local
/// mismatch is taken through the branch, m = g^mer(h^exp) - g^exp(h^exp), and
/// r = g^mer(h^mer) - g^mer(h^exp).
inline DriftRecord decompose_layer(const ParameterSet& merged, const ParameterSet& expert, const ModelSpec& spec,
                                   int layer, const FeatureTrace& trace_exp, const FeatureTrace& trace_mer) {
    if (layer < 1 || layer > spec.num_layers()) throw ShapeError("layer index out of range", "decompose_layer");
    if (trace_exp.per_layer.size() != static_cast<std::size_t>(spec.num_layers() + 1) ||
        trace_mer.per_layer.size() != trace_exp.per_layer.size())
        throw ShapeError("trace depth does not match spec", "decompose_layer");
    const Matrix& h_exp_prev = trace_exp.per_layer[layer - 1];
    const Matrix& h_mer_prev = trace_mer.per_layer[layer - 1];
    require_same_shape(h_exp_prev, h_mer_prev, "decompose_layer");

    DriftRecord rec;
    rec.layer = layer;
    rec.e = trace_mer.per_layer[layer] - trace_exp.per_layer[layer];
    rec.e_prev = h_mer_prev - h_exp_prev;

    const Matrix mer_at_exp = apply_layer(merged, spec, layer, h_exp_prev);
    rec.p = trace_mer.per_layer[layer] - mer_at_exp;
    if (spec.layers[layer - 1].is_residual()) {
        const Matrix g_mer_at_exp = apply_residual_branch(merged, spec, layer, h_exp_prev);
        rec.m = g_mer_at_exp - apply_residual_branch(expert, spec, layer, h_exp_prev);
        rec.r = apply_residual_branch(merged, spec, layer, h_mer_prev) - g_mer_at_exp;
        rec.residual_identity_residual = (rec.e - (rec.e_prev + *rec.r + rec.m)).cwiseAbs().maxCoeff();
    } else {
        rec.m = mer_at_exp - apply_layer(expert, spec, layer, h_exp_prev);
    }
    rec.decomposition_residual = rec.e.size() ? (rec.e - (rec.m + rec.p)).cwiseAbs().maxCoeff() : 0.0;
    rec.e_norm = column_norms(rec.e);
    rec.m_norm = column_norms(rec.m);
    rec.p_norm = column_norms(rec.p);
    rec.cosine_to_expert = column_cosines(trace_mer.per_layer[layer], trace_exp.per_layer[layer]);
    return rec;
}

// ---------------------------------------------------------------------------
// Path-averaged Jacobians

struct AveragedJacobian {
    Matrix A;
    bool non_smooth = false;
    int nodes = 0;
    double achieved = 0.0; // last successive difference (0 for exact cases)
    bool converged = true;
};

/// Trapezoid average of `jac(h_start + t * direction)` over t in [0, 1]. `jac`
/// may be any callable returning a matrix; this is the building block behind
/// the layer versions below.
template <class Jac>
Matrix segment_average_jacobian(Jac&& jac, const Vector& h_start, const Vector& direction, int nodes) {
    return trapezoid_average([&](double t) -> Matrix { return jac(Vector(h_start + t * direction)); }, nodes);
}

namespace detail {

inline bool is_pure_linear(const LayerSpec& s) {
    if (std::holds_alternative<LinearSpec>(s.kind)) return true;
    if (const auto* a = std::get_if<ActivationSpec>(&s.kind)) return a->function == Activation::Identity;
    return false;
}

// Jacobian along the segment, flagging relu pattern changes between nodes.
template <class JacAt>
AveragedJacobian average_along_segment(JacAt&& jac_at, bool has_relu, const Vector& h_start, const Vector& e_prev,
                                       std::optional<int> fixed_nodes, const QuadratureOptions& opt) {
    AveragedJacobian out;
    std::optional<std::vector<bool>> first_pattern;
    auto f = [&](double t) -> Matrix {
        ReluPattern pattern;
        Matrix j = jac_at(Vector(h_start + t * e_prev), has_relu ? &pattern : nullptr);
        if (has_relu) {
            if (pattern.at_kink) out.non_smooth = true;
            if (!first_pattern) first_pattern = pattern.active;
            else if (*first_pattern != pattern.active) out.non_smooth = true;
        }
        return j;
    };
    if (fixed_nodes) {
        out.A = trapezoid_average(f, *fixed_nodes);
        out.nodes = *fixed_nodes;
    } else {
        auto c = converged_average(f, opt);
        out.A = std::move(c.value);
        out.nodes = c.nodes;
        out.achieved = c.achieved;
        out.converged = c.converged;
    }
    return out;
}

inline AveragedJacobian averaged_jacobian_impl(const ParameterSet& merged, const ModelSpec& spec, int layer,
                                               const Vector& h_start, const Vector& e_prev,
                                               std::optional<int> fixed_nodes, const QuadratureOptions& opt) {
    const LayerSpec& s = detail::layer_at(spec, layer);
    if (h_start.size() != e_prev.size()) throw ShapeError("segment endpoints differ in dimension", "averaged_jacobian");
    if (is_pure_linear(s)) {
        AveragedJacobian out;
        out.A = layer_jacobian(merged, spec, layer, h_start);
        out.nodes = fixed_nodes.value_or(0);
        return out;
    }
    return average_along_segment(
        [&](const Vector& x, ReluPattern* rp) { return layer_jacobian(merged, spec, layer, x, rp); }, contains_relu(s),
        h_start, e_prev, fixed_nodes, opt);
}

} // namespace detail

/// A = int_0^1 J f^mer(h_start + t e_prev) dt by composite trapezoid with
/// `nodes` nodes. Linear (and identity) layers return their exact Jacobian.
inline AveragedJacobian averaged_jacobian(const ParameterSet& merged, const ModelSpec& spec, int layer,
                                          const Vector& h_start, const Vector& e_prev, int nodes) {
    if (nodes < 2) throw ConfigError("nodes must be at least 2", "averaged_jacobian");
    return detail::averaged_jacobian_impl(merged, spec, layer, h_start, e_prev, nodes, {});
}

/// Node-doubling version of averaged_jacobian.
inline AveragedJacobian averaged_jacobian_converged(const ParameterSet& merged, const ModelSpec& spec, int layer,
                                                    const Vector& h_start, const Vector& e_prev,
                                                    const QuadratureOptions& opt = {}) {
    return detail::averaged_jacobian_impl(merged, spec, layer, h_start, e_prev, std::nullopt, opt);
}

/// R = int_0^1 J g^mer(h_start + t e_prev) dt for a ResidualBlock layer.
inline AveragedJacobian averaged_residual_jacobian(const ParameterSet& merged, const ModelSpec& spec, int layer,
                                                   const Vector& h_start, const Vector& e_prev,
                                                   const QuadratureOptions& opt = {}) {
    const LayerSpec& s = detail::layer_at(spec, layer);
    return detail::average_along_segment(
        [&](const Vector& x, ReluPattern* rp) { return residual_branch_jacobian(merged, spec, layer, x, rp); },
        contains_relu(s), h_start, e_prev, std::nullopt, opt);
}

// ---------------------------------------------------------------------------
// Final-drift reconstruction

struct PropagationReport {
    std::vector<std::vector<Matrix>> A; // [layer - 1][sample]
    std::vector<Matrix> m;              // local mismatch per layer
    Matrix reconstructed_eL;
    Matrix actual_eL;
    double relative_error = 0.0;
    int quadrature_nodes = 0;                // largest node count used
    std::vector<double> recursion_residual;  // per layer, max_sample |e_l - (A e_{l-1} + m_l)|_2 / max(|e_l|, eps)
    bool non_smooth = false;
    bool converged = true;
};

/// e_L = sum_l P_{l->L} m_l with P_{l->L} = A_L ... A_{l+1}. Uses node-doubling
/// quadrature per layer and sample.
inline PropagationReport final_drift_expansion(const ParameterSet& merged, const ParameterSet& expert,
                                               const ModelSpec& spec, const FeatureTrace& trace_exp,
                                               const FeatureTrace& trace_mer, const QuadratureOptions& opt = {}) {
    const int L = spec.num_layers();
    const Eigen::Index M = trace_exp.samples();
    constexpr double tiny = std::numeric_limits<double>::min();
    PropagationReport rep;
    rep.A.resize(L);
    std::vector<Matrix> e(L + 1);
    for (int l = 0; l <= L; ++l) e[l] = trace_mer.per_layer[l] - trace_exp.per_layer[l];

    for (int l = 1; l <= L; ++l) {
        // Local mismatch through the full layer maps, for every layer kind.
        rep.m.push_back(apply_layer(merged, spec, l, trace_exp.per_layer[l - 1]) -
                        apply_layer(expert, spec, l, trace_exp.per_layer[l - 1]));
        double worst = 0.0;
        for (Eigen::Index j = 0; j < M; ++j) {
            auto aj = averaged_jacobian_converged(merged, spec, l, trace_exp.per_layer[l - 1].col(j),
                                                  e[l - 1].col(j), opt);
            rep.non_smooth = rep.non_smooth || aj.non_smooth;
            rep.converged = rep.converged && aj.converged;
            rep.quadrature_nodes = std::max(rep.quadrature_nodes, aj.nodes);
            const Vector predicted = aj.A * e[l - 1].col(j) + rep.m.back().col(j);
            worst = std::max(worst, (e[l].col(j) - predicted).norm() / std::max(e[l].col(j).norm(), tiny));
            rep.A[l - 1].push_back(std::move(aj.A));
        }
        rep.recursion_residual.push_back(worst);
    }

    rep.actual_eL = e[L];
    rep.reconstructed_eL = Matrix::Zero(e[L].rows(), M);
    for (Eigen::Index j = 0; j < M; ++j) {
        Matrix P = Matrix::Identity(e[L].rows(), e[L].rows());
        Vector acc = rep.m[L - 1].col(j);
        for (int l = L - 1; l >= 1; --l) {
            P = P * rep.A[l][j]; // P_{l->L} = P_{l+1->L} A_{l+1}
            acc += P * rep.m[l - 1].col(j);
        }
        rep.reconstructed_eL.col(j) = acc;
    }
    rep.relative_error = (rep.reconstructed_eL - rep.actual_eL).norm() / std::max(rep.actual_eL.norm(), tiny);
    return rep;
}

// ---------------------------------------------------------------------------
// Residual growth

struct GrowthCheck {
    bool zero_drift = false; // e_{l-1} == 0: nothing else is meaningful
    double gamma = 0.0;
    double eta = 0.0;
    bool condition_holds = false;
    bool growth_observed = false;
    double lower_bound = 0.0; // (1 + gamma - eta) |e_{l-1}|
    bool bound_holds = true;  // only asserted when condition_holds
};

/// gamma = |(I + R) v| / |v| - 1 and eta = |m| / |v| with v = e_{l-1}. When
/// eta < gamma and gamma > 0, checks |e_l| >= (1 + gamma - eta)|v| up to a
/// relative rounding tolerance.
inline GrowthCheck growth_check(const Vector& e_prev, const Vector& e, const Vector& m, const Matrix& R,
                                double rel_tolerance = 1e-10) {
    GrowthCheck g;
    const double v = e_prev.norm();
    if (v == 0.0) {
        g.zero_drift = true;
        return g;
    }
    const Vector expanded = e_prev + R * e_prev;
    g.gamma = expanded.norm() / v - 1.0;
    g.eta = m.norm() / v;
    g.condition_holds = g.eta < g.gamma && g.gamma > 0.0;
    g.growth_observed = e.norm() > v;
    g.lower_bound = (1.0 + g.gamma - g.eta) * v;
    if (g.condition_holds) g.bound_holds = e.norm() >= g.lower_bound - rel_tolerance * v * (1.0 + g.gamma + g.eta);
    return g;
}

inline GrowthCheck growth_check(const DriftRecord& rec, Eigen::Index sample, const Matrix& R,
                                double rel_tolerance = 1e-10) {
    if (!rec.r) throw ShapeError("growth check needs a residual block layer", "growth_check");
    return growth_check(rec.e_prev.col(sample), rec.e.col(sample), rec.m.col(sample), R, rel_tolerance);
}

/// Product bound over a consecutive run of qualifying layers:
/// |e_end| >= prod (1 + gamma - eta) |e_start|.
struct CumulativeGrowth {
    double factor = 1.0;
    double lower_bound = 0.0;
    bool holds = true;
};

inline CumulativeGrowth cumulative_growth(const std::vector<GrowthCheck>& run, double e_start_norm, double e_end_norm,
                                          double rel_tolerance = 1e-10) {
    CumulativeGrowth c;
    for (const auto& g : run) {
        if (!g.condition_holds) throw ConfigError("cumulative bound needs qualifying layers only", "growth");
        c.factor *= 1.0 + g.gamma - g.eta;
    }
    c.lower_bound = c.factor * e_start_norm;
    c.holds = e_end_norm >= c.lower_bound * (1.0 - rel_tolerance * static_cast<double>(run.size() + 1));
    return c;
}

// ---------------------------------------------------------------------------
// Output drift

struct LinearHead {
    Matrix weight; // K x d
    Vector bias;   // K

    Matrix operator()(const Matrix& h) const {
        Matrix z = weight * h;
        z.colwise() += bias;
        return z;
    }
};

inline LinearHead head_of(const ParameterSet& params, const ModelSpec& spec) {
    if (!spec.head) throw ShapeError("model has no head", "head");
    LinearHead h{params.at("head.weight"), Vector::Zero(spec.head->out_dim)};
    if (spec.head->has_bias) h.bias = params.at("head.bias").col(0);
    return h;
}

/// Largest singular value via the symmetric eigen-decomposition of the smaller Gram matrix.
inline double spectral_norm(const Matrix& w) {
    if (w.size() == 0) return 0.0;
    const Matrix gram = w.rows() <= w.cols() ? Matrix(w * w.transpose()) : Matrix(w.transpose() * w);
    Eigen::SelfAdjointEigenSolver<Matrix> es(gram, Eigen::EigenvaluesOnly);
    return std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
}

struct OutputDriftReport {
    Matrix delta_z;
    double B = 0.0;
    Vector delta_psi;
    Vector bound;                           // B |e_L| + delta_psi
    Vector delta_z_norm;
    std::vector<bool> bound_holds;
    std::vector<std::optional<double>> min_margin; // empty when the expert winner is not unique
    std::vector<bool> margin_condition;     // |dz|_inf < mu / 2
    std::vector<bool> top1_agrees;          // merged argmax == expert argmax
    Vector loss_drift;                      // CE(z_mer) - CE(z_exp)
    Vector loss_bound;                      // |g_bar| |dz|
    Vector loss_identity_residual;          // |loss_drift - g_bar . dz|
    int loss_quadrature_nodes = 0;

    double margin_preservation_rate() const {
        if (top1_agrees.empty()) return 1.0;
        std::size_t agree = 0;
        for (bool b : top1_agrees) agree += b;
        return static_cast<double>(agree) / static_cast<double>(top1_agrees.size());
    }
};

/// Expert top-1 margin; nullopt when the maximum is not unique.
inline std::optional<double> top1_margin(const Vector& z) {
    if (z.size() < 2) return std::numeric_limits<double>::infinity();
    const int k = argmax(z);
    double runner_up = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < z.size(); ++c)
        if (c != k) runner_up = std::max(runner_up, z(c));
    const double mu = z(k) - runner_up;
    if (!(mu > 0.0)) return std::nullopt;
    return mu;
}

/// g_bar = int_0^1 grad CE(y, z_exp + t dz) dt by node-doubling quadrature.
inline ConvergedAverage<Vector> averaged_loss_gradient(const Vector& z_exp, const Vector& dz, int label,
                                                       const QuadratureOptions& opt) {
    return converged_average([&](double t) -> Vector { return cross_entropy_gradient(Vector(z_exp + t * dz), label); },
                             opt);
}

inline OutputDriftReport output_drift_report(const LinearHead& head_mer, const LinearHead& head_exp,
                                             const Matrix& h_exp_L, const Matrix& h_mer_L,
                                             const std::vector<int>& labels, const QuadratureOptions& loss_opt = {
                                                 33, 4097, 1e-13, true}) {
    require_same_shape(h_exp_L, h_mer_L, "output_drift_report");
    const Eigen::Index M = h_exp_L.cols();
    if (!labels.empty() && static_cast<Eigen::Index>(labels.size()) != M)
        throw ShapeError("label count mismatch", "output_drift_report");
    OutputDriftReport rep;
    const Matrix z_exp = head_exp(h_exp_L);
    const Matrix z_mer = head_mer(h_mer_L);
    rep.delta_z = z_mer - z_exp;
    rep.B = spectral_norm(head_mer.weight);
    rep.delta_psi = column_norms(head_mer(h_exp_L) - z_exp);
    const Vector e_norm = column_norms(h_mer_L - h_exp_L);
    rep.bound = rep.B * e_norm + rep.delta_psi;
    rep.delta_z_norm = column_norms(rep.delta_z);
    rep.loss_drift = Vector::Zero(M);
    rep.loss_bound = Vector::Zero(M);
    rep.loss_identity_residual = Vector::Zero(M);
    for (Eigen::Index j = 0; j < M; ++j) {
        // Rounding slack scaled by the magnitudes entering the bound.
        const double slack = 1e-12 * (1.0 + rep.bound(j) + z_exp.col(j).norm());
        rep.bound_holds.push_back(rep.delta_z_norm(j) <= rep.bound(j) + slack);
        const auto mu = top1_margin(z_exp.col(j));
        rep.min_margin.push_back(mu);
        const double inf_norm = rep.delta_z.col(j).cwiseAbs().maxCoeff();
        rep.margin_condition.push_back(mu.has_value() && inf_norm < *mu / 2.0);
        rep.top1_agrees.push_back(argmax(z_mer.col(j)) == argmax(z_exp.col(j)));
        if (!labels.empty()) {
            const int y = labels[j];
            rep.loss_drift(j) = cross_entropy(z_mer.col(j), y) - cross_entropy(z_exp.col(j), y);
            const auto g = averaged_loss_gradient(z_exp.col(j), rep.delta_z.col(j), y, loss_opt);
            rep.loss_quadrature_nodes = std::max(rep.loss_quadrature_nodes, g.nodes);
            rep.loss_bound(j) = g.value.norm() * rep.delta_z_norm(j);
            rep.loss_identity_residual(j) = std::abs(rep.loss_drift(j) - g.value.dot(rep.delta_z.col(j)));
        }
    }
    return rep;
}

} // namespace featcal
