#pragma once

// Layered network description, parameter storage and deterministic forward
// evaluation. Feature matrices are column-per-sample (d x M). Layers are
// indexed 1..L so that FeatureTrace::per_layer[l] is the output of layer l and
// per_layer[0] is the raw input.

#include "featcal/core.hpp"

#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

namespace featcal {

enum class Activation { Tanh, Relu, Identity };

inline std::string to_string(Activation a) {
    switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Identity: return "identity";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::Relu;
    if (s == "identity") return Activation::Identity;
    throw ConfigError("unknown activation '" + s + "'");
}

struct LinearSpec {
    int in_dim = 0;
    int out_dim = 0;
    bool has_bias = true;
};

struct LayerNormSpec {
    int dim = 0;
    double eps = 1e-5;
};

struct ActivationSpec {
    Activation function = Activation::Tanh;
};

struct LayerSpec;

/// h + g(h), where g is the ordered composition of `inner`.
struct ResidualSpec {
    std::vector<LayerSpec> inner;
};

struct LayerSpec {
    std::variant<LinearSpec, LayerNormSpec, ActivationSpec, ResidualSpec> kind;

    static LayerSpec linear(int in, int out, bool bias = true) { return {LinearSpec{in, out, bias}}; }
    static LayerSpec layernorm(int dim, double eps = 1e-5) { return {LayerNormSpec{dim, eps}}; }
    static LayerSpec activation(Activation f) { return {ActivationSpec{f}}; }
    static LayerSpec residual(std::vector<LayerSpec> inner) { return {ResidualSpec{std::move(inner)}}; }

    bool is_residual() const { return std::holds_alternative<ResidualSpec>(kind); }
};

struct ModelSpec {
    int input_dim = 0;
    std::vector<LayerSpec> layers;
    std::optional<LinearSpec> head;
    int schema_version = 1;

    int num_layers() const { return static_cast<int>(layers.size()); }
};

enum class ModuleKind { Linear, LayerNorm };

/// A parameterized module (Linear or LayerNorm) located by its path.
/// `layer` is the 1-based layer index, or L+1 for the head.
struct ModuleInfo {
    std::string path;
    ModuleKind kind;
    int layer = 0;
    int in_dim = 0;
    int out_dim = 0;
    bool has_bias = false;
    double eps = 0.0;
};

namespace detail {

inline std::string layer_prefix(int layer) { return "layers." + std::to_string(layer); }

inline std::string primitive_name(const LayerSpec& s) {
    return std::visit(
        [](const auto& k) -> std::string {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, LinearSpec>) return "linear";
            else if constexpr (std::is_same_v<T, LayerNormSpec>) return "norm";
            else if constexpr (std::is_same_v<T, ActivationSpec>) return "act";
            else return "residual";
        },
        s.kind);
}

/// Path of a layer item. Residual blocks own no parameters; their inner items
/// live under "<prefix>.inner.<j>".
inline std::string item_path(const std::string& prefix, const LayerSpec& s) {
    return s.is_residual() ? prefix : prefix + "." + primitive_name(s);
}

// Returns the output dimension or throws naming `where`.
inline int check_item(const LayerSpec& s, int in_dim, const std::string& where) {
    return std::visit(
        [&](const auto& k) -> int {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, LinearSpec>) {
                if (k.in_dim <= 0 || k.out_dim <= 0) throw ShapeError("non-positive linear dimension", where);
                if (k.in_dim != in_dim)
                    throw ShapeError("linear expects in_dim " + std::to_string(k.in_dim) + " but receives " +
                                         std::to_string(in_dim),
                                     where);
                return k.out_dim;
            } else if constexpr (std::is_same_v<T, LayerNormSpec>) {
                if (k.dim != in_dim)
                    throw ShapeError("layernorm dim " + std::to_string(k.dim) + " but receives " +
                                         std::to_string(in_dim),
                                     where);
                if (!(k.eps > 0.0)) throw ShapeError("layernorm eps must be positive", where);
                return k.dim;
            } else if constexpr (std::is_same_v<T, ActivationSpec>) {
                return in_dim;
            } else {
                if (k.inner.empty()) throw ShapeError("residual block has no inner layers", where);
                int d = in_dim;
                for (std::size_t j = 0; j < k.inner.size(); ++j)
                    d = check_item(k.inner[j], d, where + ".inner." + std::to_string(j));
                if (d != in_dim) throw ShapeError("residual inner map does not preserve dimension", where);
                return d;
            }
        },
        s.kind);
}

inline void collect_modules(const LayerSpec& s, const std::string& prefix, int layer, std::vector<ModuleInfo>& out) {
    std::visit(
        [&](const auto& k) {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, LinearSpec>) {
                out.push_back({prefix + ".linear", ModuleKind::Linear, layer, k.in_dim, k.out_dim, k.has_bias, 0.0});
            } else if constexpr (std::is_same_v<T, LayerNormSpec>) {
                out.push_back({prefix + ".norm", ModuleKind::LayerNorm, layer, k.dim, k.dim, true, k.eps});
            } else if constexpr (std::is_same_v<T, ResidualSpec>) {
                for (std::size_t j = 0; j < k.inner.size(); ++j)
                    collect_modules(k.inner[j], prefix + ".inner." + std::to_string(j), layer, out);
            }
        },
        s.kind);
}

} // namespace detail

/// Validates dimension compatibility; throws ShapeError naming the offending
/// layer ("layers.<l>") on failure. Returns the final feature dimension.
inline int validate(const ModelSpec& spec) {
    if (spec.input_dim <= 0) throw ShapeError("input_dim must be positive", "spec");
    if (spec.layers.empty()) throw ShapeError("model needs at least one layer", "spec");
    int d = spec.input_dim;
    for (int l = 1; l <= spec.num_layers(); ++l) d = detail::check_item(spec.layers[l - 1], d, detail::layer_prefix(l));
    if (spec.head) {
        if (spec.head->in_dim != d)
            throw ShapeError("head expects " + std::to_string(spec.head->in_dim) + " features, final layer has " +
                                 std::to_string(d),
                             "head");
        if (spec.head->out_dim <= 0) throw ShapeError("head needs at least one class", "head");
    }
    return d;
}

inline int layer_in_dim(const ModelSpec& spec, int layer) {
    int d = spec.input_dim;
    for (int l = 1; l < layer; ++l) d = detail::check_item(spec.layers[l - 1], d, detail::layer_prefix(l));
    return d;
}

inline int layer_out_dim(const ModelSpec& spec, int layer) {
    return detail::check_item(spec.layers[layer - 1], layer_in_dim(spec, layer), detail::layer_prefix(layer));
}

/// All Linear/LayerNorm modules in forward order, head last.
inline std::vector<ModuleInfo> modules(const ModelSpec& spec) {
    std::vector<ModuleInfo> out;
    for (int l = 1; l <= spec.num_layers(); ++l)
        detail::collect_modules(spec.layers[l - 1], detail::layer_prefix(l), l, out);
    if (spec.head)
        out.push_back({"head", ModuleKind::Linear, spec.num_layers() + 1, spec.head->in_dim, spec.head->out_dim,
                       spec.head->has_bias, 0.0});
    return out;
}

// ---------------------------------------------------------------------------
// Parameters

enum class Role { Base, Expert, Merged, Calibrated };

struct ParameterSet {
    Role role = Role::Base;
    int task_index = -1; // meaningful for Role::Expert only
    /// "<module path>.weight" (out x in), ".bias" (out x 1), ".gamma"/".beta" (dim x 1).
    std::map<std::string, Matrix> entries;

    const Matrix& at(const std::string& key) const {
        auto it = entries.find(key);
        if (it == entries.end()) throw ShapeError("missing parameter", key);
        return it->second;
    }
    Matrix& at(const std::string& key) {
        auto it = entries.find(key);
        if (it == entries.end()) throw ShapeError("missing parameter", key);
        return it->second;
    }
    bool contains(const std::string& key) const { return entries.count(key) != 0; }

    bool operator==(const ParameterSet& o) const {
        if (role != o.role || task_index != o.task_index || entries.size() != o.entries.size()) return false;
        for (const auto& [k, v] : entries) {
            auto it = o.entries.find(k);
            if (it == o.entries.end() || it->second.rows() != v.rows() || it->second.cols() != v.cols() ||
                it->second != v)
                return false;
        }
        return true;
    }
};

inline std::string role_name(const ParameterSet& p) {
    switch (p.role) {
    case Role::Base: return "base";
    case Role::Expert: return "expert:" + std::to_string(p.task_index);
    case Role::Merged: return "merged";
    case Role::Calibrated: return "calibrated";
    }
    return "?";
}

inline void parse_role(const std::string& s, ParameterSet& p) {
    p.task_index = -1;
    if (s == "base") p.role = Role::Base;
    else if (s == "merged") p.role = Role::Merged;
    else if (s == "calibrated") p.role = Role::Calibrated;
    else if (s.rfind("expert:", 0) == 0) {
        p.role = Role::Expert;
        p.task_index = std::stoi(s.substr(7));
    } else
        throw ConfigError("unknown role '" + s + "'");
}

/// Names of the parameter entries owned by a module.
inline std::vector<std::string> entry_keys(const ModuleInfo& m) {
    if (m.kind == ModuleKind::LayerNorm) return {m.path + ".gamma", m.path + ".beta"};
    if (m.has_bias) return {m.path + ".weight", m.path + ".bias"};
    return {m.path + ".weight"};
}

/// Checks that `params` holds exactly the entries required by `spec`, with
/// matching shapes and finite values.
inline void check_parameters(const ParameterSet& params, const ModelSpec& spec) {
    validate(spec);
    std::size_t expected = 0;
    for (const auto& m : modules(spec)) {
        if (m.kind == ModuleKind::LayerNorm) {
            require_shape(params.at(m.path + ".gamma"), m.in_dim, 1, m.path + ".gamma");
            require_shape(params.at(m.path + ".beta"), m.in_dim, 1, m.path + ".beta");
            expected += 2;
        } else {
            require_shape(params.at(m.path + ".weight"), m.out_dim, m.in_dim, m.path + ".weight");
            ++expected;
            if (m.has_bias) {
                require_shape(params.at(m.path + ".bias"), m.out_dim, 1, m.path + ".bias");
                ++expected;
            }
        }
    }
    if (params.entries.size() != expected) throw ShapeError("unexpected extra parameter entries", "parameters");
    for (const auto& [k, v] : params.entries)
        if (!v.allFinite()) throw NumericalError("non-finite parameter values", k);
}

/// Seeded initialization: weights ~ U(-1/sqrt(in), 1/sqrt(in)), zero biases,
/// LayerNorm gamma = 1 and beta = 0. Same seed gives bit-identical output.
inline ParameterSet build_model(const ModelSpec& spec, std::uint64_t seed) {
    validate(spec);
    ParameterSet p;
    p.role = Role::Base;
    std::mt19937_64 rng(seed);
    for (const auto& m : modules(spec)) {
        if (m.kind == ModuleKind::LayerNorm) {
            p.entries[m.path + ".gamma"] = Matrix::Ones(m.in_dim, 1);
            p.entries[m.path + ".beta"] = Matrix::Zero(m.in_dim, 1);
            continue;
        }
        const double bound = 1.0 / std::sqrt(static_cast<double>(m.in_dim));
        std::uniform_real_distribution<double> u(-bound, bound);
        Matrix w(m.out_dim, m.in_dim);
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = u(rng);
        p.entries[m.path + ".weight"] = std::move(w);
        if (m.has_bias) p.entries[m.path + ".bias"] = Matrix::Zero(m.out_dim, 1);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Primitive maps

inline double activate(Activation f, double x) {
    switch (f) {
    case Activation::Tanh: return std::tanh(x);
    case Activation::Relu: return x > 0.0 ? x : 0.0;
    case Activation::Identity: return x;
    }
    return x;
}

inline double activate_derivative(Activation f, double x) {
    switch (f) {
    case Activation::Tanh: {
        const double t = std::tanh(x);
        return 1.0 - t * t;
    }
    case Activation::Relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::Identity: return 1.0;
    }
    return 1.0;
}

/// LayerNorm without affine parameters, per column, eps inside the root.
inline Matrix layernorm_normalize(const Matrix& x, double eps) {
    Matrix out(x.rows(), x.cols());
    const double d = static_cast<double>(x.rows());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const double mean = x.col(j).sum() / d;
        const Vector centered = x.col(j).array() - mean;
        const double var = centered.squaredNorm() / d;
        out.col(j) = centered / std::sqrt(var + eps);
    }
    return out;
}

/// Invoked with (primitive path, primitive spec, primitive input) before every
/// primitive is applied, in evaluation order.
using PrimitiveVisitor = std::function<void(const std::string&, const LayerSpec&, const Matrix&)>;

namespace detail {

inline Matrix apply_item(const ParameterSet& params, const LayerSpec& s, const std::string& prefix, const Matrix& x,
                         const PrimitiveVisitor* visit);

inline Matrix apply_inner(const ParameterSet& params, const ResidualSpec& r, const std::string& prefix,
                          const Matrix& x, const PrimitiveVisitor* visit) {
    Matrix h = x;
    for (std::size_t j = 0; j < r.inner.size(); ++j)
        h = apply_item(params, r.inner[j], prefix + ".inner." + std::to_string(j), h, visit);
    return h;
}

inline Matrix apply_item(const ParameterSet& params, const LayerSpec& s, const std::string& prefix, const Matrix& x,
                         const PrimitiveVisitor* visit) {
    const std::string path = item_path(prefix, s);
    if (visit && !s.is_residual()) (*visit)(path, s, x);
    return std::visit(
        [&](const auto& k) -> Matrix {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, LinearSpec>) {
                const Matrix& w = params.at(path + ".weight");
                if (x.rows() != w.cols()) throw ShapeError("input rows do not match weight columns", path);
                Matrix y = w * x;
                if (k.has_bias) y.colwise() += params.at(path + ".bias").col(0);
                return y;
            } else if constexpr (std::is_same_v<T, LayerNormSpec>) {
                if (x.rows() != k.dim) throw ShapeError("input rows do not match layernorm dim", path);
                Matrix y = layernorm_normalize(x, k.eps);
                y = (y.array().colwise() * params.at(path + ".gamma").col(0).array()).matrix();
                y.colwise() += params.at(path + ".beta").col(0);
                return y;
            } else if constexpr (std::is_same_v<T, ActivationSpec>) {
                return x.unaryExpr([f = k.function](double v) { return activate(f, v); });
            } else {
                return x + apply_inner(params, k, path, x, visit);
            }
        },
        s.kind);
}

inline const LayerSpec& layer_at(const ModelSpec& spec, int layer) {
    if (layer < 1 || layer > spec.num_layers())
        throw ShapeError("layer index " + std::to_string(layer) + " out of range 1.." +
                             std::to_string(spec.num_layers()),
                         "apply_layer");
    return spec.layers[layer - 1];
}

} // namespace detail

/// Applies exactly one layer map (1-based index) to `input`.
inline Matrix apply_layer(const ParameterSet& params, const ModelSpec& spec, int layer, const Matrix& input,
                          const PrimitiveVisitor* visit = nullptr) {
    const LayerSpec& s = detail::layer_at(spec, layer);
    const int in = layer_in_dim(spec, layer);
    if (input.rows() != in)
        throw ShapeError("input has " + std::to_string(input.rows()) + " rows, layer expects " + std::to_string(in),
                         detail::layer_prefix(layer));
    return detail::apply_item(params, s, detail::layer_prefix(layer), input, visit);
}

/// Residual-branch map g of a ResidualBlock layer (f = id + g).
inline Matrix apply_residual_branch(const ParameterSet& params, const ModelSpec& spec, int layer,
                                    const Matrix& input) {
    const LayerSpec& s = detail::layer_at(spec, layer);
    const auto* r = std::get_if<ResidualSpec>(&s.kind);
    if (!r) throw ShapeError("layer is not a residual block", detail::layer_prefix(layer));
    return detail::apply_inner(params, *r, detail::layer_prefix(layer), input, nullptr);
}

inline Matrix apply_head(const ParameterSet& params, const ModelSpec& spec, const Matrix& features) {
    if (!spec.head) throw ShapeError("model has no head", "head");
    const Matrix& w = params.at("head.weight");
    if (features.rows() != w.cols()) throw ShapeError("feature rows do not match head", "head");
    Matrix z = w * features;
    if (spec.head->has_bias) z.colwise() += params.at("head.bias").col(0);
    return z;
}

struct FeatureTrace {
    std::vector<Matrix> per_layer; // L+1 entries; [0] is the input batch
    std::optional<Matrix> head_scores;

    const Matrix& final_features() const { return per_layer.back(); }
    Eigen::Index samples() const { return per_layer.front().cols(); }
};

inline FeatureTrace forward_trace(const ParameterSet& params, const ModelSpec& spec, const Matrix& batch) {
    validate(spec);
    if (batch.rows() != spec.input_dim)
        throw ShapeError("batch has " + std::to_string(batch.rows()) + " rows, model expects " +
                             std::to_string(spec.input_dim),
                         "forward_trace");
    FeatureTrace t;
    t.per_layer.reserve(spec.layers.size() + 1);
    t.per_layer.push_back(batch);
    for (int l = 1; l <= spec.num_layers(); ++l) {
        Matrix h = apply_layer(params, spec, l, t.per_layer.back());
        if (!h.allFinite()) throw NumericalError("non-finite features", detail::layer_prefix(l));
        t.per_layer.push_back(std::move(h));
    }
    if (spec.head) t.head_scores = apply_head(params, spec, t.per_layer.back());
    return t;
}

// ---------------------------------------------------------------------------
// Jacobians at a single point (column vector)

/// Records whether any relu input sits at or crosses a kink; `pattern` holds
/// the sign pattern of all relu inputs in evaluation order.
struct ReluPattern {
    std::vector<bool> active;
    bool at_kink = false;
};

inline Matrix layernorm_jacobian(const Vector& x, const Vector& gamma, double eps) {
    const Eigen::Index d = x.size();
    const double mean = x.sum() / static_cast<double>(d);
    const Vector centered = x.array() - mean;
    const double sigma = std::sqrt(centered.squaredNorm() / static_cast<double>(d) + eps);
    const Vector xhat = centered / sigma;
    Matrix j = Matrix::Identity(d, d) - Matrix::Constant(d, d, 1.0 / static_cast<double>(d)) -
               xhat * xhat.transpose() / static_cast<double>(d);
    j /= sigma;
    return gamma.asDiagonal() * j;
}

namespace detail {

inline Matrix item_jacobian(const ParameterSet& params, const LayerSpec& s, const std::string& prefix,
                            const Vector& x, ReluPattern* relu, Vector* out);

inline Matrix inner_jacobian(const ParameterSet& params, const ResidualSpec& r, const std::string& prefix,
                             const Vector& x, ReluPattern* relu, Vector* out) {
    Matrix j = Matrix::Identity(x.size(), x.size());
    Vector h = x;
    for (std::size_t k = 0; k < r.inner.size(); ++k) {
        Vector next;
        j = item_jacobian(params, r.inner[k], prefix + ".inner." + std::to_string(k), h, relu, &next) * j;
        h = std::move(next);
    }
    if (out) *out = std::move(h);
    return j;
}

inline Matrix item_jacobian(const ParameterSet& params, const LayerSpec& s, const std::string& prefix,
                            const Vector& x, ReluPattern* relu, Vector* out) {
    const std::string path = item_path(prefix, s);
    return std::visit(
        [&](const auto& k) -> Matrix {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, LinearSpec>) {
                const Matrix& w = params.at(path + ".weight");
                if (out) {
                    *out = w * x;
                    if (k.has_bias) *out += params.at(path + ".bias").col(0);
                }
                return w;
            } else if constexpr (std::is_same_v<T, LayerNormSpec>) {
                const Vector gamma = params.at(path + ".gamma").col(0);
                if (out) {
                    Matrix y = layernorm_normalize(x, k.eps);
                    *out = y.col(0).cwiseProduct(gamma) + params.at(path + ".beta").col(0);
                }
                return layernorm_jacobian(x, gamma, k.eps);
            } else if constexpr (std::is_same_v<T, ActivationSpec>) {
                Vector diag(x.size());
                for (Eigen::Index i = 0; i < x.size(); ++i) {
                    diag(i) = activate_derivative(k.function, x(i));
                    if (k.function == Activation::Relu && relu) {
                        relu->active.push_back(x(i) > 0.0);
                        if (x(i) == 0.0) relu->at_kink = true;
                    }
                }
                if (out) *out = x.unaryExpr([f = k.function](double v) { return activate(f, v); });
                return diag.asDiagonal();
            } else {
                Vector g;
                Matrix jg = inner_jacobian(params, k, path, x, relu, out ? &g : nullptr);
                if (out) *out = x + g;
                return Matrix::Identity(x.size(), x.size()) + jg;
            }
        },
        s.kind);
}

} // namespace detail

/// Analytic Jacobian of layer `layer` at the point `x`.
inline Matrix layer_jacobian(const ParameterSet& params, const ModelSpec& spec, int layer, const Vector& x,
                             ReluPattern* relu = nullptr) {
    const LayerSpec& s = detail::layer_at(spec, layer);
    if (x.size() != layer_in_dim(spec, layer)) throw ShapeError("point has wrong dimension", detail::layer_prefix(layer));
    return detail::item_jacobian(params, s, detail::layer_prefix(layer), x, relu, nullptr);
}

/// Jacobian of the residual branch g of a ResidualBlock layer at `x`.
inline Matrix residual_branch_jacobian(const ParameterSet& params, const ModelSpec& spec, int layer, const Vector& x,
                                       ReluPattern* relu = nullptr) {
    const LayerSpec& s = detail::layer_at(spec, layer);
    const auto* r = std::get_if<ResidualSpec>(&s.kind);
    if (!r) throw ShapeError("layer is not a residual block", detail::layer_prefix(layer));
    return detail::inner_jacobian(params, *r, detail::layer_prefix(layer), x, relu, nullptr);
}

/// True when any layer (including inside residual blocks) uses relu.
inline bool contains_relu(const LayerSpec& s) {
    if (const auto* a = std::get_if<ActivationSpec>(&s.kind)) return a->function == Activation::Relu;
    if (const auto* r = std::get_if<ResidualSpec>(&s.kind)) {
        for (const auto& i : r->inner)
            if (contains_relu(i)) return true;
    }
    return false;
}

} // namespace featcal
