#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace featcal;
using featcal::testing::random_matrix;
using featcal::testing::random_vector;
using featcal::testing::relative_frobenius;

namespace {

struct RandomModule {
    featcal::testing::RidgeProblem problem;
    std::vector<TaskStats> stats;
    Matrix w_merged;
};

RandomModule random_module(std::mt19937_64& rng, int out, int in, int tasks, int n, double lambda, double alpha = 0.3,
                           double epsilon = 1e-8) {
    RandomModule m;
    m.problem.lambda = lambda;
    m.problem.w_anchor = random_matrix(rng, out, in);
    m.w_merged = random_matrix(rng, out, in);
    for (int i = 0; i < tasks; ++i) {
        const Matrix x_cal = random_matrix(rng, in, n) + random_vector(rng, in).replicate(1, n);
        const Matrix x_exp = x_cal + random_matrix(rng, in, n, 0.3);
        const Matrix x_tgt = interpolate_target(x_exp, x_cal, alpha);
        TaskStats s = module_stats(x_cal, x_tgt);
        s.omega = task_weight(s.G, epsilon);
        m.problem.x_cal.push_back(x_cal);
        m.problem.x_tgt.push_back(x_tgt);
        m.problem.expert_w.push_back(random_matrix(rng, out, in));
        m.problem.omega.push_back(s.omega);
        m.stats.push_back(std::move(s));
    }
    return m;
}

ModelSpec block_spec() {
    ModelSpec s;
    s.input_dim = 4;
    s.layers = {LayerSpec::linear(4, 5), LayerSpec::activation(Activation::Tanh),
                LayerSpec::residual({LayerSpec::layernorm(5), LayerSpec::linear(5, 6),
                                     LayerSpec::activation(Activation::Tanh), LayerSpec::linear(6, 5)}),
                LayerSpec::layernorm(5)};
    s.head = LinearSpec{5, 3, true};
    return s;
}

struct Setup {
    ModelSpec spec;
    ParameterSet base, merged;
    std::vector<ParameterSet> experts;
    std::vector<Matrix> calib;
};

Setup make_setup(std::uint64_t seed, int tasks = 3, int n = 40) {
    std::mt19937_64 rng(seed);
    Setup s;
    s.spec = block_spec();
    s.base = featcal::testing::random_params(s.spec, rng, 0.5);
    for (int i = 0; i < tasks; ++i) {
        auto e = featcal::testing::perturbed(s.base, rng, 0.3);
        e.role = Role::Expert;
        e.task_index = i;
        s.experts.push_back(std::move(e));
        s.calib.push_back(random_matrix(rng, 4, n));
    }
    s.merged = task_arithmetic(s.base, s.experts, 0.3);
    return s;
}

} // namespace

TEST(Target, Interpolation) {
    const Matrix one = Matrix::Ones(1, 1), zero = Matrix::Zero(1, 1);
    EXPECT_EQ(interpolate_target(one, zero, 1.0), one);
    EXPECT_EQ(interpolate_target(one, zero, 0.0), zero);
    EXPECT_EQ(interpolate_target(one, zero, 0.3)(0, 0), 0.3);
    EXPECT_THROW(interpolate_target(one, zero, 1.5), ConfigError);
}

TEST(Stats, MatchTripleLoop) {
    std::mt19937_64 rng(1);
    const Matrix x = random_matrix(rng, 4, 7), t = random_matrix(rng, 4, 7);
    const auto s = module_stats(x, t);
    const auto [G, C] = featcal::testing::stats_by_loops(x, t);
    EXPECT_LE((s.G - G).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LE((s.C - C).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_EQ(s.G, s.G.transpose());
    const auto same = module_stats(x, x);
    EXPECT_LE((same.G - same.C).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Stats, SingleColumnIsRankOne) {
    Matrix x(3, 1);
    x << 1.0, 2.0, -1.0;
    const auto s = module_stats(x, x);
    EXPECT_EQ(s.G, x * x.transpose());
    Eigen::FullPivLU<Matrix> lu(s.G);
    EXPECT_EQ(lu.rank(), 1);
}

TEST(Weights, Examples) {
    EXPECT_EQ(task_weight(Matrix::Zero(3, 3), 1e-8), 1e8);
    EXPECT_EQ(task_weight(Matrix::Identity(4, 4), 1e-8), 0.5);
    std::mt19937_64 rng(2);
    for (int k = 0; k < 20; ++k) {
        const Matrix a = random_matrix(rng, 3, 3);
        const Matrix G = a * a.transpose();
        EXPECT_NEAR(task_weight(G, 1e-8) * std::max(G.norm(), 1e-8), 1.0, 1e-15);
    }
}

TEST(Anchor, BlendEndpoints) {
    std::mt19937_64 rng(3);
    const Matrix m = random_matrix(rng, 2, 3), b = random_matrix(rng, 2, 3);
    EXPECT_EQ(anchor(m, b, 1.0), m);
    EXPECT_EQ(anchor(m, b, 0.0), b);
    EXPECT_LE((anchor(m, b, 2.0) - (2.0 * m - b)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(SolveWeight, SingleTaskExactFit) {
    std::mt19937_64 rng(4);
    const Matrix x = random_matrix(rng, 3, 12);
    auto st = module_stats(x, x);
    st.omega = task_weight(st.G, 1e-15);
    const Matrix w1 = random_matrix(rng, 2, 3);
    const auto ws = solve_weight({st}, {w1}, Matrix::Zero(2, 3), 0.0, 1e-15);
    EXPECT_LE(relative_frobenius(ws.W, w1), 1e-10);
}

TEST(SolveWeight, HugeLambdaReturnsAnchor) {
    std::mt19937_64 rng(5);
    auto m = random_module(rng, 4, 3, 2, 5, 1e12);
    const auto ws = solve_weight(m.stats, m.problem.expert_w, m.problem.w_anchor, 1e12, 1e-8);
    EXPECT_LE(relative_frobenius(ws.W, m.problem.w_anchor), 1e-6);
}

TEST(SolveWeight, MatchesIterativeOracle) {
    std::mt19937_64 rng(6);
    auto m = random_module(rng, 4, 3, 2, 5, 0.05);
    const auto ws = solve_weight(m.stats, m.problem.expert_w, m.problem.w_anchor, 0.05, 1e-8);
    const Matrix oracle = featcal::testing::ridge_oracle(m.problem, m.w_merged);
    EXPECT_LE(relative_frobenius(ws.W, oracle), 1e-6);
    EXPECT_LE(ws.solve_residual, 1e-12);
    EXPECT_LE(m.problem.objective(oracle), m.problem.objective(ws.W) + 1e-12);
    const double scale = m.problem.gradient(Matrix::Zero(4, 3)).norm();
    // Stationary for the objective plus the epsilon * |W|^2 stabilizer.
    EXPECT_LE((m.problem.gradient(ws.W) + 2.0 * 1e-8 * ws.W).norm(), 1e-12 * scale);
}

TEST(SolveWeight, OracleRecoversSingleExpert) {
    std::mt19937_64 rng(7);
    auto m = random_module(rng, 2, 3, 1, 8, 0.0, 0.0);
    const Matrix w = featcal::testing::ridge_oracle(m.problem, m.w_merged);
    EXPECT_LE(relative_frobenius(w, m.problem.expert_w[0]), 1e-9);
}

TEST(SolveWeight, EmptyTasksAreDropped) {
    std::mt19937_64 rng(8);
    auto m = random_module(rng, 2, 3, 2, 6, 0.05);
    const auto both = solve_weight(m.stats, m.problem.expert_w, m.problem.w_anchor, 0.05, 1e-8);
    TaskStats empty;
    empty.n = 0;
    auto stats = m.stats;
    auto ew = m.problem.expert_w;
    stats.push_back(empty);
    ew.push_back(random_matrix(rng, 2, 3));
    const auto with_empty = solve_weight(stats, ew, m.problem.w_anchor, 0.05, 1e-8);
    EXPECT_EQ(with_empty.W, both.W);
    const auto none = solve_weight({empty}, {ew.back()}, m.problem.w_anchor, 0.05, 1e-8);
    EXPECT_LE(relative_frobenius(none.W, m.problem.w_anchor), 1e-6);
}

TEST(SolveWeight, RejectsBadInputs) {
    std::mt19937_64 rng(9);
    auto m = random_module(rng, 2, 3, 1, 6, 0.05);
    EXPECT_THROW(solve_weight(m.stats, m.problem.expert_w, m.problem.w_anchor, -1.0, 1e-8), ConfigError);
    EXPECT_THROW(solve_weight(m.stats, m.problem.expert_w, m.problem.w_anchor, 0.05, 0.0), ConfigError);
    EXPECT_THROW(solve_weight(m.stats, {}, m.problem.w_anchor, 0.05, 1e-8), ShapeError);
}

TEST(SolveBias, SingleTaskFormula) {
    std::mt19937_64 rng(10);
    const Matrix ws = random_matrix(rng, 3, 2), w1 = random_matrix(rng, 3, 2);
    const Vector mc = random_vector(rng, 2), mt = random_vector(rng, 2), b1 = random_vector(rng, 3);
    const Vector b = solve_bias(ws, {1.0}, {mc}, {mt}, {w1}, {b1}, Vector::Zero(3), 0.0);
    EXPECT_LE((b - (b1 + w1 * mt - ws * mc)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(SolveBias, HugeLambdaReturnsAnchor) {
    std::mt19937_64 rng(11);
    const Matrix ws = random_matrix(rng, 3, 2);
    const Vector anc = random_vector(rng, 3);
    const Vector b = solve_bias(ws, {0.7, 0.2}, {random_vector(rng, 2), random_vector(rng, 2)},
                                {random_vector(rng, 2), random_vector(rng, 2)},
                                {random_matrix(rng, 3, 2), random_matrix(rng, 3, 2)},
                                {random_vector(rng, 3), random_vector(rng, 3)}, anc, 1e12);
    EXPECT_LE((b - anc).norm() / anc.norm(), 1e-10);
}

TEST(SolveBias, MatchesLeastSquaresOracle) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix ws = random_matrix(rng, 3, 4);
        std::vector<double> om{0.3, 1.7};
        std::vector<Vector> mc, mt, eb;
        std::vector<Matrix> ew;
        for (int i = 0; i < 2; ++i) {
            mc.push_back(random_vector(rng, 4));
            mt.push_back(random_vector(rng, 4));
            ew.push_back(random_matrix(rng, 3, 4));
            eb.push_back(random_vector(rng, 3));
        }
        const Vector anc = random_vector(rng, 3);
        const Vector b = solve_bias(ws, om, mc, mt, ew, eb, anc, 0.05);
        const Vector o = featcal::testing::bias_oracle(ws, om, mc, mt, ew, eb, anc, 0.05);
        EXPECT_LE((b - o).norm() / o.norm(), 1e-8);
    }
}

TEST(SolveLayerNorm, SingleTaskExactRecovery) {
    std::mt19937_64 rng(13);
    const Matrix z = layernorm_normalize(random_matrix(rng, 4, 9), 1e-5);
    const Vector g = random_vector(rng, 4), b = random_vector(rng, 4);
    const auto out = solve_layernorm({z}, {g}, {b}, Vector::Zero(4), Vector::Zero(4), 0.0, 1e-8);
    EXPECT_LE((out.gamma - g).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((out.beta - b).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SolveLayerNorm, HugeLambdaReturnsAnchor) {
    std::mt19937_64 rng(14);
    const Vector ga = random_vector(rng, 3), ba = random_vector(rng, 3);
    const auto out = solve_layernorm({random_matrix(rng, 3, 6)}, {random_vector(rng, 3)}, {random_vector(rng, 3)}, ga,
                                     ba, 1e12, 1e-8);
    EXPECT_LE((out.gamma - ga).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE((out.beta - ba).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SolveLayerNorm, MatchesLeastSquaresOracle) {
    std::mt19937_64 rng(15);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<Matrix> z;
        std::vector<Vector> g, b;
        for (int i = 0; i < 3; ++i) {
            z.push_back(layernorm_normalize(random_matrix(rng, 5, 4 + i), 1e-5));
            g.push_back(random_vector(rng, 5));
            b.push_back(random_vector(rng, 5));
        }
        const Vector ga = random_vector(rng, 5), ba = random_vector(rng, 5);
        const auto out = solve_layernorm(z, g, b, ga, ba, 0.05, 1e-8);
        const auto [og, ob] = featcal::testing::layernorm_oracle(z, g, b, ga, ba, 0.05);
        EXPECT_LE((out.gamma - og).norm() / og.norm(), 1e-8);
        EXPECT_LE((out.beta - ob).norm() / ob.norm(), 1e-8);
    }
}

TEST(Config, Validation) {
    CalibConfig c;
    EXPECT_NO_THROW(c.validate());
    c.alpha = 1.2;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.epsilon = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.lambda = -0.1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.n = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.rho = -3.0; // any real blend is allowed
    EXPECT_NO_THROW(c.validate());
}

TEST(Config, ModuleGlob) {
    CalibConfig c;
    c.modules = "layers.3.*";
    const auto spec = block_spec();
    EXPECT_EQ(selected_modules(spec, 3, c).size(), 3u);
    EXPECT_TRUE(selected_modules(spec, 1, c).empty());
    c.calibrate_layernorm = false;
    EXPECT_EQ(selected_modules(spec, 3, c).size(), 2u);
}

TEST(Snapshot, FirstLayerSeesMergedTrace) {
    auto s = make_setup(20);
    CalibConfig c;
    c.n = 25;
    const auto snap = collect_layer_snapshot(s.merged, s.experts, s.spec, s.calib, 1, c);
    ASSERT_EQ(snap.modules.size(), 1u);
    for (std::size_t i = 0; i < s.experts.size(); ++i) {
        EXPECT_EQ(snap.modules[0].x_cal[i], s.calib[i].leftCols(25));
        EXPECT_EQ(snap.modules[0].n_effective[i], 25);
    }
}

TEST(Calibrate, HugeLambdaKeepsMerged) {
    auto s = make_setup(21);
    CalibConfig c;
    c.lambda = 1e12;
    c.rho = 1.0;
    const auto res = calibrate(s.merged, s.base, s.experts, s.spec, s.calib, c);
    EXPECT_EQ(res.calibrated.role, Role::Calibrated);
    for (const auto& [k, v] : s.merged.entries) EXPECT_LE(relative_frobenius(res.calibrated.at(k), v), 1e-6) << k;
}

TEST(Calibrate, ExpertsEqualMergedIsFixedPoint) {
    auto s = make_setup(22);
    std::vector<ParameterSet> same(s.experts.size(), s.merged);
    CalibConfig c;
    c.rho = 1.0;
    c.epsilon = 1e-14;
    const auto res = calibrate(s.merged, s.base, same, s.spec, s.calib, c);
    for (const auto& [k, v] : s.merged.entries) EXPECT_LE(relative_frobenius(res.calibrated.at(k), v), 1e-10) << k;
}

TEST(Calibrate, DeployedPrefixIdentity) {
    auto s = make_setup(23);
    const CalibConfig c;
    const auto res = calibrate(s.merged, s.base, s.experts, s.spec, s.calib, c, true);
    ASSERT_EQ(res.snapshots.size(), 4u); // layers 1 and 3, layer 4 and the head
    for (const auto& snap : res.snapshots) {
        for (std::size_t i = 0; i < s.experts.size(); ++i) {
            const auto t = forward_trace(res.calibrated, s.spec, s.calib[i]);
            EXPECT_EQ(snap.layer_input[i], t.per_layer[snap.layer_index - 1]) << "layer " << snap.layer_index;
        }
        for (const auto& ms : snap.modules) {
            for (std::size_t i = 0; i < s.experts.size(); ++i) {
                Matrix seen;
                if (snap.layer_index == s.spec.num_layers() + 1) {
                    seen = snap.layer_input[i];
                } else {
                    PrimitiveVisitor grab = [&](const std::string& p, const LayerSpec&, const Matrix& x) {
                        if (p == ms.module_path) seen = x;
                    };
                    apply_layer(s.merged, s.spec, snap.layer_index, snap.layer_input[i], &grab);
                }
                EXPECT_EQ(ms.x_cal[i], seen) << ms.module_path;
            }
        }
    }
}

TEST(Calibrate, ModuleOrderWithinLayerDoesNotMatter) {
    auto s = make_setup(24);
    const CalibConfig c;
    const auto snap = collect_layer_snapshot(s.merged, s.experts, s.spec, s.calib, 3, c);
    auto order = selected_modules(s.spec, 3, c);
    ASSERT_EQ(order.size(), 3u);
    const auto forward = solve_layer(snap, order, s.merged, s.base, s.experts, c);
    std::reverse(order.begin(), order.end());
    const auto backward = solve_layer(snap, order, s.merged, s.base, s.experts, c);
    std::rotate(order.begin(), order.begin() + 1, order.end());
    const auto rotated = solve_layer(snap, order, s.merged, s.base, s.experts, c);
    EXPECT_EQ(forward, backward);
    EXPECT_EQ(forward, rotated);
}

TEST(Calibrate, EmptyTaskIsSkippedWithWarning) {
    auto s = make_setup(25);
    const CalibConfig c;
    auto calib = s.calib;
    calib.push_back(Matrix(4, 0));
    auto experts = s.experts;
    std::mt19937_64 rng(3);
    experts.push_back(featcal::testing::perturbed(s.base, rng, 0.3));
    const auto with_empty = calibrate(s.merged, s.base, experts, s.spec, calib, c);
    const auto without = calibrate(s.merged, s.base, s.experts, s.spec, s.calib, c);
    ASSERT_FALSE(with_empty.log.warnings.empty());
    EXPECT_NE(with_empty.log.warnings.front().find("task 3"), std::string::npos);
    for (const auto& [k, v] : without.calibrated.entries)
        EXPECT_LE(relative_frobenius(with_empty.calibrated.at(k), v), 1e-14) << k;
}

TEST(Calibrate, FlagsLeaveParametersAlone) {
    auto s = make_setup(26);
    CalibConfig c;
    c.calibrate_bias = false;
    c.calibrate_layernorm = false;
    const auto res = calibrate(s.merged, s.base, s.experts, s.spec, s.calib, c);
    EXPECT_EQ(res.calibrated.at("layers.1.linear.bias"), s.merged.at("layers.1.linear.bias"));
    EXPECT_EQ(res.calibrated.at("layers.4.norm.gamma"), s.merged.at("layers.4.norm.gamma"));
    EXPECT_NE(res.calibrated.at("layers.1.linear.weight"), s.merged.at("layers.1.linear.weight"));
    c.modules = "head";
    const auto head_only = calibrate(s.merged, s.base, s.experts, s.spec, s.calib, c);
    for (const auto& [k, v] : s.merged.entries)
        if (k.rfind("head", 0) != 0) EXPECT_EQ(head_only.calibrated.at(k), v) << k;
}

TEST(Calibrate, DeterministicAndLogged) {
    auto s = make_setup(27);
    const CalibConfig c;
    const auto a = calibrate(s.merged, s.base, s.experts, s.spec, s.calib, c);
    const auto b = calibrate(s.merged, s.base, s.experts, s.spec, s.calib, c);
    EXPECT_EQ(a.calibrated, b.calibrated);
    EXPECT_EQ(a.log.modules.size(), modules(s.spec).size());
    for (const auto& m : a.log.modules) {
        EXPECT_EQ(m.tasks_used, 3);
        if (m.kind == "linear") EXPECT_LE(m.solve_residual, 1e-10) << m.path;
    }
}

TEST(Calibrate, RejectsMismatchedInputs) {
    auto s = make_setup(28);
    auto calib = s.calib;
    calib.pop_back();
    EXPECT_THROW(calibrate(s.merged, s.base, s.experts, s.spec, calib, CalibConfig{}), ShapeError);
    CalibConfig bad;
    bad.alpha = -0.1;
    EXPECT_THROW(calibrate(s.merged, s.base, s.experts, s.spec, s.calib, bad), ConfigError);
}
