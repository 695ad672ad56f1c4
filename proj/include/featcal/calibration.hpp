#pragma once

// Forward-order, closed-form calibration of a merged model against its task
// experts. For each layer the current calibrated-model and expert input
// features are captured once; every selected module in the layer is then solved
// from that shared snapshot and the results are loaded together.

#include "featcal/model.hpp"

#include <fnmatch.h>

#include <chrono>
#include <limits>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace featcal {

struct CalibConfig {
    double lambda = 0.05;
    double rho = 2.0;
    double alpha = 0.3;
    double epsilon = 1e-8;
    int n = 256; // per-task calibration sample budget
    bool calibrate_bias = true;
    bool calibrate_layernorm = true;
    std::string modules = "*"; // glob over module paths

    void validate() const {
        if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0", "calib");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]", "calib");
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0", "calib");
        if (n < 1) throw ConfigError("n must be >= 1", "calib");
        if (!std::isfinite(rho)) throw ConfigError("rho must be finite", "calib");
    }

    bool selects(const std::string& path) const { return fnmatch(modules.c_str(), path.c_str(), 0) == 0; }
};

// ---------------------------------------------------------------------------
// Closed-form pieces

/// alpha X_exp + (1 - alpha) X_cal.
inline Matrix interpolate_target(const Matrix& x_exp, const Matrix& x_cal, double alpha) {
    require_same_shape(x_exp, x_cal, "interpolate_target");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]", "interpolate_target");
    return alpha * x_exp + (1.0 - alpha) * x_cal;
}

struct TaskStats {
    Matrix G;            // (1/n) X_cal X_cal^T, symmetrized
    Matrix C;            // (1/n) X_tgt X_cal^T
    double omega = 0.0;  // 1 / max(|G|_F, eps)
    Eigen::Index n = 0;  // columns used; 0 marks a skipped task
};

/// G = X_cal X_cal^T / n and C = X_tgt X_cal^T / n with n the column count.
/// Zero columns give zero statistics.
inline TaskStats module_stats(const Matrix& x_cal, const Matrix& x_tgt) {
    require_same_shape(x_cal, x_tgt, "module_stats");
    TaskStats s;
    s.n = x_cal.cols();
    const Eigen::Index d = x_cal.rows();
    if (s.n == 0) {
        s.G = Matrix::Zero(d, d);
        s.C = Matrix::Zero(d, d);
        return s;
    }
    const double inv_n = 1.0 / static_cast<double>(s.n);
    s.G = (x_cal * x_cal.transpose()) * inv_n;
    s.G = 0.5 * (s.G + s.G.transpose()).eval();
    s.C = (x_tgt * x_cal.transpose()) * inv_n;
    return s;
}

inline double task_weight(const Matrix& G, double epsilon) { return 1.0 / std::max(G.norm(), epsilon); }

/// rho P_mer + (1 - rho) P_base, for weights, biases and LayerNorm affines.
inline Matrix anchor(const Matrix& p_merged, const Matrix& p_base, double rho) {
    require_same_shape(p_merged, p_base, "anchor");
    return rho * p_merged + (1.0 - rho) * p_base;
}

struct WeightSolve {
    Matrix W;
    double solve_residual = 0.0;      // relative residual of the stabilized system actually solved
    double stationary_residual = 0.0; // relative residual of the unstabilized stationary condition
};

/// Weighted data term sum_i (omega_i / n_i) |W X_cal_i - W_i X_tgt_i|_F^2.
inline double data_term(const Matrix& W, const std::vector<Matrix>& x_cal, const std::vector<Matrix>& x_tgt,
                        const std::vector<Matrix>& expert_w, const std::vector<double>& omega) {
    double total = 0.0;
    for (std::size_t i = 0; i < x_cal.size(); ++i) {
        if (x_cal[i].cols() == 0) continue;
        total += omega[i] / static_cast<double>(x_cal[i].cols()) *
                 (W * x_cal[i] - expert_w[i] * x_tgt[i]).squaredNorm();
    }
    return total;
}

/// Solves W (sum omega_i G_i + (lambda + eps) I) = sum omega_i W_i C_i + lambda W_anc
/// by Cholesky factorization of the symmetric positive-definite left factor.
/// Tasks with n = 0 are dropped from the sums.
inline WeightSolve solve_weight(const std::vector<TaskStats>& stats, const std::vector<Matrix>& expert_w,
                                const Matrix& w_anchor, double lambda, double epsilon) {
    if (stats.size() != expert_w.size()) throw ShapeError("one expert weight per task required", "solve_weight");
    if (!(lambda >= 0.0) || !(epsilon > 0.0)) throw ConfigError("need lambda >= 0 and epsilon > 0", "solve_weight");
    const Eigen::Index d = w_anchor.cols();
    const Eigen::Index m = w_anchor.rows();
    Matrix gram = Matrix::Zero(d, d);
    Matrix rhs = lambda * w_anchor;
    for (std::size_t i = 0; i < stats.size(); ++i) {
        if (stats[i].n == 0) continue;
        require_shape(stats[i].G, d, d, "solve_weight: G");
        require_shape(expert_w[i], m, d, "solve_weight: expert weight");
        gram += stats[i].omega * stats[i].G;
        rhs += stats[i].omega * expert_w[i] * stats[i].C;
    }
    if (!gram.allFinite() || !rhs.allFinite()) throw NumericalError("non-finite solve inputs", "solve_weight");

    Matrix lhs = gram;
    lhs.diagonal().array() += lambda + epsilon;
    Eigen::LLT<Matrix> llt(lhs);
    if (llt.info() != Eigen::Success) throw NumericalError("Cholesky factorization failed", "solve_weight");

    WeightSolve out;
    // lhs is symmetric, so W lhs = rhs  <=>  lhs W^T = rhs^T.
    out.W = llt.solve(rhs.transpose()).transpose();
    if (!out.W.allFinite()) throw NumericalError("non-finite solution", "solve_weight");

    const double scale = std::max(rhs.norm(), std::numeric_limits<double>::min());
    out.solve_residual = (out.W * lhs - rhs).norm() / scale;
    Matrix unstabilized = gram;
    unstabilized.diagonal().array() += lambda;
    out.stationary_residual = (out.W * unstabilized - rhs).norm() / scale;
    return out;
}

/// Second-stage bias with W* fixed:
/// b* = (sum omega_i (b_i + W_i mu_tgt_i - W* mu_cal_i) + lambda b_anc) / (sum omega_i + lambda).
inline Vector solve_bias(const Matrix& w_star, const std::vector<double>& omega, const std::vector<Vector>& mu_cal,
                         const std::vector<Vector>& mu_tgt, const std::vector<Matrix>& expert_w,
                         const std::vector<Vector>& expert_b, const Vector& b_anchor, double lambda) {
    const std::size_t N = omega.size();
    if (mu_cal.size() != N || mu_tgt.size() != N || expert_w.size() != N || expert_b.size() != N)
        throw ShapeError("per-task inputs differ in length", "solve_bias");
    Vector num = lambda * b_anchor;
    double den = lambda;
    for (std::size_t i = 0; i < N; ++i) {
        num += omega[i] * (expert_b[i] + expert_w[i] * mu_tgt[i] - w_star * mu_cal[i]);
        den += omega[i];
    }
    if (den == 0.0) return b_anchor;
    Vector b = num / den;
    if (!b.allFinite()) throw NumericalError("non-finite bias", "solve_bias");
    return b;
}

struct AffineSolve {
    Vector gamma;
    Vector beta;
};

/// Coordinate-wise 2x2 normal equations for a shared LayerNorm affine map
/// fitted to the expert affine maps on the current normalized features, with
/// equal task weights. The determinant is clamped below by `epsilon`.
inline AffineSolve solve_layernorm(const std::vector<Matrix>& z_cal, const std::vector<Vector>& expert_gamma,
                                   const std::vector<Vector>& expert_beta, const Vector& gamma_anchor,
                                   const Vector& beta_anchor, double lambda, double epsilon) {
    const Eigen::Index d = gamma_anchor.size();
    Vector a11 = Vector::Constant(d, lambda);
    Vector a12 = Vector::Zero(d);
    double a22 = lambda;
    Vector r_gamma = lambda * gamma_anchor;
    Vector r_beta = lambda * beta_anchor;
    for (std::size_t i = 0; i < z_cal.size(); ++i) {
        const Matrix& z = z_cal[i];
        if (z.cols() == 0) continue;
        require_shape(z, d, z.cols(), "solve_layernorm");
        const double inv_n = 1.0 / static_cast<double>(z.cols());
        const Vector zbar = z.rowwise().sum() * inv_n;
        const Vector q = z.array().square().rowwise().sum().matrix() * inv_n;
        a11 += q;
        a12 += zbar;
        a22 += 1.0;
        r_gamma += q.cwiseProduct(expert_gamma[i]) + zbar.cwiseProduct(expert_beta[i]);
        r_beta += zbar.cwiseProduct(expert_gamma[i]) + expert_beta[i];
    }
    AffineSolve out{Vector(d), Vector(d)};
    for (Eigen::Index k = 0; k < d; ++k) {
        const double det = std::max(a22 * a11(k) - a12(k) * a12(k), epsilon);
        out.gamma(k) = (a22 * r_gamma(k) - a12(k) * r_beta(k)) / det;
        out.beta(k) = (a11(k) * r_beta(k) - a12(k) * r_gamma(k)) / det;
    }
    if (!out.gamma.allFinite() || !out.beta.allFinite()) throw NumericalError("non-finite affine", "solve_layernorm");
    return out;
}

// ---------------------------------------------------------------------------
// Snapshots

struct ModuleSnapshot {
    std::string module_path;
    int layer_index = 0;
    std::vector<Matrix> x_cal; // per task, d x n
    std::vector<Matrix> x_exp; // per task, same shape and sample order as x_cal
    std::vector<Eigen::Index> n_effective;
};

struct LayerSnapshot {
    int layer_index = 0;                // L + 1 denotes the head
    std::vector<Matrix> layer_input;    // per task: calibrated-model input to this layer
    std::vector<ModuleSnapshot> modules;
    std::vector<std::string> warnings;
};

/// Modules of `layer` that the configuration calibrates.
inline std::vector<ModuleInfo> selected_modules(const ModelSpec& spec, int layer, const CalibConfig& config) {
    std::vector<ModuleInfo> out;
    for (const auto& m : modules(spec)) {
        if (m.layer != layer || !config.selects(m.path)) continue;
        if (m.kind == ModuleKind::LayerNorm && !config.calibrate_layernorm) continue;
        out.push_back(m);
    }
    return out;
}

namespace detail {

// Input of every selected module when running `layer` on `input`.
inline std::map<std::string, Matrix> module_inputs(const ParameterSet& params, const ModelSpec& spec, int layer,
                                                   const Matrix& input, const std::vector<ModuleInfo>& wanted) {
    std::map<std::string, Matrix> out;
    if (layer == spec.num_layers() + 1) {
        for (const auto& m : wanted) out[m.path] = input;
        return out;
    }
    PrimitiveVisitor grab = [&](const std::string& path, const LayerSpec&, const Matrix& x) {
        for (const auto& m : wanted)
            if (m.path == path) out[path] = x;
    };
    apply_layer(params, spec, layer, input, &grab);
    return out;
}

inline Matrix layer_input(const ParameterSet& params, const ModelSpec& spec, int layer, const Matrix& batch) {
    const auto trace = forward_trace(params, spec, batch);
    return trace.per_layer[layer - 1];
}

} // namespace detail

/// Captures, once for the whole layer, the calibrated-model and expert input
/// features of every selected module on each task's calibration samples.
/// `calibrated` must already hold the calibrated parameters of all earlier layers.
inline LayerSnapshot collect_layer_snapshot(const ParameterSet& calibrated, const std::vector<ParameterSet>& experts,
                                            const ModelSpec& spec, const std::vector<Matrix>& calib_data, int layer,
                                            const CalibConfig& config) {
    if (experts.size() != calib_data.size()) throw ShapeError("one calibration batch per expert", "snapshot");
    if (layer < 1 || layer > spec.num_layers() + (spec.head ? 1 : 0))
        throw ShapeError("layer index out of range", "snapshot");
    const auto wanted = selected_modules(spec, layer, config);
    LayerSnapshot snap;
    snap.layer_index = layer;
    for (const auto& m : wanted) snap.modules.push_back({m.path, layer, {}, {}, {}});

    for (std::size_t i = 0; i < experts.size(); ++i) {
        const Eigen::Index n = std::min<Eigen::Index>(config.n, calib_data[i].cols());
        if (n == 0) snap.warnings.push_back("task " + std::to_string(i) + " has no calibration samples; skipped");
        const Matrix batch = calib_data[i].leftCols(n);
        const Matrix in_cal = detail::layer_input(calibrated, spec, layer, batch);
        const Matrix in_exp = detail::layer_input(experts[i], spec, layer, batch);
        auto cal = detail::module_inputs(calibrated, spec, layer, in_cal, wanted);
        auto exp = detail::module_inputs(experts[i], spec, layer, in_exp, wanted);
        snap.layer_input.push_back(in_cal);
        for (auto& ms : snap.modules) {
            ms.x_cal.push_back(std::move(cal.at(ms.module_path)));
            ms.x_exp.push_back(std::move(exp.at(ms.module_path)));
            ms.n_effective.push_back(n);
        }
    }
    return snap;
}

// ---------------------------------------------------------------------------
// Calibration driver

struct ModuleLog {
    std::string path;
    int layer = 0;
    std::string kind; // "linear" or "layernorm"
    double anchor_norm = 0.0;
    double solve_residual = 0.0;
    double stationary_residual = 0.0;
    double data_term_before = 0.0; // at the merged weight
    double data_term_after = 0.0;  // at W*
    double distance = 0.0;         // |P* - P_mer|_F over all updated entries
    int tasks_used = 0;
    bool bias_updated = false;
};

struct CalibrationLog {
    std::vector<ModuleLog> modules;
    std::vector<std::pair<int, double>> layer_seconds;
    std::vector<std::string> warnings;
};

/// Parameter updates for one layer, keyed by entry name.
using StagedUpdates = std::map<std::string, Matrix>;

/// Solves every module of `snap` independently from the shared snapshot.
/// `order` fixes the visiting order; results do not depend on it.
inline StagedUpdates solve_layer(const LayerSnapshot& snap, const std::vector<ModuleInfo>& order,
                                 const ParameterSet& merged, const ParameterSet& base,
                                 const std::vector<ParameterSet>& experts, const CalibConfig& config,
                                 std::vector<ModuleLog>* logs = nullptr) {
    StagedUpdates staged;
    for (const auto& info : order) {
        const ModuleSnapshot* ms = nullptr;
        for (const auto& s : snap.modules)
            if (s.module_path == info.path) ms = &s;
        if (!ms) throw ConfigError("module not captured in snapshot", info.path);
        try {
            ModuleLog log;
            log.path = info.path;
            log.layer = info.layer;
            std::vector<std::size_t> used;
            for (std::size_t i = 0; i < experts.size(); ++i)
                if (ms->n_effective[i] > 0) used.push_back(i);
            log.tasks_used = static_cast<int>(used.size());

            if (info.kind == ModuleKind::Linear) {
                log.kind = "linear";
                const std::string wkey = info.path + ".weight";
                const Matrix w_anc = anchor(merged.at(wkey), base.at(wkey), config.rho);
                std::vector<TaskStats> stats;
                std::vector<Matrix> expert_w, x_cal, x_tgt;
                std::vector<double> omega;
                for (std::size_t i = 0; i < experts.size(); ++i) {
                    Matrix tgt = interpolate_target(ms->x_exp[i], ms->x_cal[i], config.alpha);
                    TaskStats st = module_stats(ms->x_cal[i], tgt);
                    st.omega = st.n ? task_weight(st.G, config.epsilon) : 0.0;
                    omega.push_back(st.omega);
                    stats.push_back(std::move(st));
                    expert_w.push_back(experts[i].at(wkey));
                    x_cal.push_back(ms->x_cal[i]);
                    x_tgt.push_back(std::move(tgt));
                }
                const WeightSolve ws = solve_weight(stats, expert_w, w_anc, config.lambda, config.epsilon);
                log.anchor_norm = w_anc.norm();
                log.solve_residual = ws.solve_residual;
                log.stationary_residual = ws.stationary_residual;
                log.data_term_before = data_term(merged.at(wkey), x_cal, x_tgt, expert_w, omega);
                log.data_term_after = data_term(ws.W, x_cal, x_tgt, expert_w, omega);
                double dist2 = (ws.W - merged.at(wkey)).squaredNorm();
                staged[wkey] = ws.W;

                if (config.calibrate_bias && info.has_bias) {
                    const std::string bkey = info.path + ".bias";
                    std::vector<double> om;
                    std::vector<Vector> mu_cal, mu_tgt, eb;
                    std::vector<Matrix> ew;
                    for (std::size_t i : used) {
                        const double inv_n = 1.0 / static_cast<double>(x_cal[i].cols());
                        om.push_back(omega[i]);
                        mu_cal.push_back(x_cal[i].rowwise().sum() * inv_n);
                        mu_tgt.push_back(x_tgt[i].rowwise().sum() * inv_n);
                        ew.push_back(expert_w[i]);
                        eb.push_back(experts[i].at(bkey).col(0));
                    }
                    const Vector b_anc = anchor(merged.at(bkey), base.at(bkey), config.rho).col(0);
                    const Vector b = solve_bias(ws.W, om, mu_cal, mu_tgt, ew, eb, b_anc, config.lambda);
                    dist2 += (b - merged.at(bkey).col(0)).squaredNorm();
                    staged[bkey] = b;
                    log.bias_updated = true;
                }
                log.distance = std::sqrt(dist2);
            } else {
                log.kind = "layernorm";
                const std::string gkey = info.path + ".gamma";
                const std::string bkey = info.path + ".beta";
                std::vector<Matrix> z;
                std::vector<Vector> eg, eb;
                for (std::size_t i : used) {
                    z.push_back(layernorm_normalize(ms->x_cal[i], info.eps));
                    eg.push_back(experts[i].at(gkey).col(0));
                    eb.push_back(experts[i].at(bkey).col(0));
                }
                const Vector g_anc = anchor(merged.at(gkey), base.at(gkey), config.rho).col(0);
                const Vector b_anc = anchor(merged.at(bkey), base.at(bkey), config.rho).col(0);
                const AffineSolve as = solve_layernorm(z, eg, eb, g_anc, b_anc, config.lambda, config.epsilon);
                log.anchor_norm = std::sqrt(g_anc.squaredNorm() + b_anc.squaredNorm());
                log.distance = std::sqrt((as.gamma - merged.at(gkey).col(0)).squaredNorm() +
                                         (as.beta - merged.at(bkey).col(0)).squaredNorm());
                staged[gkey] = as.gamma;
                staged[bkey] = as.beta;
            }
            if (logs) logs->push_back(std::move(log));
        } catch (const Error& e) {
            throw Error(e.what(), info.path);
        }
    }
    return staged;
}

struct CalibrationResult {
    ParameterSet calibrated;
    CalibrationLog log;
    std::vector<LayerSnapshot> snapshots; // kept when requested
};

/// Forward-order calibration: layers 1..L, then the head. Each layer reads one
/// snapshot from the partially calibrated model, solves its modules, and loads
/// all updates at once before the next layer is visited.
inline CalibrationResult calibrate(const ParameterSet& merged, const ParameterSet& base,
                                   const std::vector<ParameterSet>& experts, const ModelSpec& spec,
                                   const std::vector<Matrix>& calib_data, const CalibConfig& config,
                                   bool keep_snapshots = false) {
    config.validate();
    check_parameters(merged, spec);
    check_parameters(base, spec);
    for (const auto& e : experts) check_parameters(e, spec);
    if (experts.size() != calib_data.size()) throw ShapeError("one calibration batch per expert", "calibrate");

    CalibrationResult res;
    res.calibrated = merged;
    res.calibrated.role = Role::Calibrated;
    res.calibrated.task_index = -1;
    const int last = spec.num_layers() + (spec.head ? 1 : 0);
    for (int layer = 1; layer <= last; ++layer) {
        const auto order = selected_modules(spec, layer, config);
        if (order.empty()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        LayerSnapshot snap = collect_layer_snapshot(res.calibrated, experts, spec, calib_data, layer, config);
        for (auto& w : snap.warnings) res.log.warnings.push_back("layer " + std::to_string(layer) + ": " + w);
        const StagedUpdates staged = solve_layer(snap, order, merged, base, experts, config, &res.log.modules);
        for (const auto& [key, value] : staged) res.calibrated.at(key) = value;
        const auto t1 = std::chrono::steady_clock::now();
        res.log.layer_seconds.emplace_back(layer, std::chrono::duration<double>(t1 - t0).count());
        if (keep_snapshots) res.snapshots.push_back(std::move(snap));
    }
    return res;
}

} // namespace featcal
