#pragma once

// Hand-written backprop for the four layer kinds, cross-entropy through the
// head, and plain (momentum) gradient descent.

#include "featcal/model.hpp"
#include "featcal/scores.hpp"
#include "featcal/tasks.hpp"

#include <algorithm>
#include <numeric>

namespace featcal {

struct TrainConfig {
    int epochs = 100;
    double lr = 0.1;
    double momentum = 0.0;
    int batch_size = 0; // 0 = full batch
    std::uint64_t seed = 0;
};

struct LossAndGradient {
    double loss = 0.0;
    ParameterSet gradient; // same keys as the parameters
};

namespace detail {

using InputCache = std::map<std::string, Matrix>;

inline Matrix backward_item(const ParameterSet& params, const LayerSpec& s, const std::string& prefix,
                            const Matrix& dy, const InputCache& cache, ParameterSet& grads) {
    const std::string path = item_path(prefix, s);
    return std::visit(
        [&](const auto& k) -> Matrix {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, ResidualSpec>) {
                Matrix d = dy;
                for (std::size_t j = k.inner.size(); j-- > 0;)
                    d = backward_item(params, k.inner[j], path + ".inner." + std::to_string(j), d, cache, grads);
                return dy + d;
            } else {
                const Matrix& x = cache.at(path);
                if constexpr (std::is_same_v<T, LinearSpec>) {
                    const Matrix& w = params.at(path + ".weight");
                    grads.at(path + ".weight") += dy * x.transpose();
                    if (k.has_bias) grads.at(path + ".bias") += dy.rowwise().sum();
                    return w.transpose() * dy;
                } else if constexpr (std::is_same_v<T, LayerNormSpec>) {
                    const Vector gamma = params.at(path + ".gamma").col(0);
                    const double d = static_cast<double>(x.rows());
                    Matrix dx(x.rows(), x.cols());
                    Vector dgamma = Vector::Zero(x.rows());
                    Vector dbeta = Vector::Zero(x.rows());
                    for (Eigen::Index c = 0; c < x.cols(); ++c) {
                        const double mean = x.col(c).sum() / d;
                        const Vector centered = x.col(c).array() - mean;
                        const double sigma = std::sqrt(centered.squaredNorm() / d + k.eps);
                        const Vector xhat = centered / sigma;
                        dgamma += dy.col(c).cwiseProduct(xhat);
                        dbeta += dy.col(c);
                        const Vector dxhat = dy.col(c).cwiseProduct(gamma);
                        const double m1 = dxhat.sum() / d;
                        const double m2 = dxhat.dot(xhat) / d;
                        dx.col(c) = (dxhat.array() - m1 - xhat.array() * m2) / sigma;
                    }
                    grads.at(path + ".gamma") += dgamma;
                    grads.at(path + ".beta") += dbeta;
                    return dx;
                } else {
                    return dy.cwiseProduct(x.unaryExpr([f = k.function](double v) { return activate_derivative(f, v); }));
                }
            }
        },
        s.kind);
}

} // namespace detail

/// Mean cross-entropy of the head scores and its exact gradient.
inline LossAndGradient loss_and_gradient(const ParameterSet& params, const ModelSpec& spec, const Matrix& batch,
                                         const std::vector<int>& labels) {
    if (!spec.head) throw ShapeError("training needs a head", "train");
    if (static_cast<std::size_t>(batch.cols()) != labels.size()) throw ShapeError("label count mismatch", "train");
    detail::InputCache cache;
    PrimitiveVisitor record = [&cache](const std::string& path, const LayerSpec&, const Matrix& x) { cache[path] = x; };

    std::vector<Matrix> h{batch};
    for (int l = 1; l <= spec.num_layers(); ++l) h.push_back(apply_layer(params, spec, l, h.back(), &record));
    const Matrix z = apply_head(params, spec, h.back());

    LossAndGradient out;
    out.gradient.role = params.role;
    out.gradient.task_index = params.task_index;
    for (const auto& [k, v] : params.entries) out.gradient.entries[k] = Matrix::Zero(v.rows(), v.cols());

    const double inv_m = 1.0 / static_cast<double>(batch.cols());
    Matrix dz(z.rows(), z.cols());
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
        out.loss += cross_entropy(z.col(j), labels[j]);
        dz.col(j) = cross_entropy_gradient(z.col(j), labels[j]) * inv_m;
    }
    out.loss *= inv_m;
    if (!std::isfinite(out.loss)) throw NumericalError("non-finite loss", "train");

    out.gradient.at("head.weight") += dz * h.back().transpose();
    if (spec.head->has_bias) out.gradient.at("head.bias") += dz.rowwise().sum();
    Matrix dh = params.at("head.weight").transpose() * dz;
    for (int l = spec.num_layers(); l >= 1; --l)
        dh = detail::backward_item(params, spec.layers[l - 1], detail::layer_prefix(l), dh, cache, out.gradient);
    return out;
}

/// Gradient descent from `start`. Returns a new parameter set with the same
/// role; deterministic in `config.seed`.
inline ParameterSet train_model(const ParameterSet& start, const ModelSpec& spec, const TaskDataset& data,
                                const TrainConfig& config) {
    check_parameters(start, spec);
    if (data.size() == 0) throw ConfigError("training data is empty", "train");
    if (config.epochs < 0) throw ConfigError("epochs must be non-negative", "train");
    ParameterSet params = start;
    std::map<std::string, Matrix> velocity;
    for (const auto& [k, v] : params.entries) velocity[k] = Matrix::Zero(v.rows(), v.cols());

    const Eigen::Index m = data.size();
    const Eigen::Index bs = config.batch_size > 0 ? std::min<Eigen::Index>(config.batch_size, m) : m;
    std::vector<Eigen::Index> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(config.seed);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        if (bs < m) std::shuffle(order.begin(), order.end(), rng);
        for (Eigen::Index at = 0; at < m; at += bs) {
            const Eigen::Index n = std::min(bs, m - at);
            Matrix x(data.features.rows(), n);
            std::vector<int> y(n);
            for (Eigen::Index j = 0; j < n; ++j) {
                x.col(j) = data.features.col(order[at + j]);
                y[j] = data.labels[order[at + j]];
            }
            const auto lg = loss_and_gradient(params, spec, x, y);
            for (auto& [k, v] : params.entries) {
                Matrix& vel = velocity[k];
                vel = config.momentum * vel - config.lr * lg.gradient.entries.at(k);
                v += vel;
                if (!v.allFinite()) throw NumericalError("training diverged", k);
            }
        }
    }
    return params;
}

struct Evaluation {
    double accuracy = 0.0;
    double mean_loss = 0.0;
};

inline Evaluation evaluate_scores(const Matrix& scores, const std::vector<int>& labels) {
    Evaluation e;
    if (scores.cols() == 0) return e;
    int correct = 0;
    for (Eigen::Index j = 0; j < scores.cols(); ++j)
        if (argmax(scores.col(j)) == labels[j]) ++correct;
    e.accuracy = static_cast<double>(correct) / static_cast<double>(scores.cols());
    e.mean_loss = mean_cross_entropy(scores, labels);
    return e;
}

inline Evaluation evaluate(const ParameterSet& params, const ModelSpec& spec, const TaskDataset& data) {
    const auto trace = forward_trace(params, spec, data.features);
    if (!trace.head_scores) throw ShapeError("evaluation needs a head", "eval");
    return evaluate_scores(*trace.head_scores, data.labels);
}

} // namespace featcal
