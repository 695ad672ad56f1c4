#pragma once

// JSON model and dataset files. Matrices are row-major nested arrays; column
// entries (bias, gamma, beta) are flat arrays. Doubles are written with the
// shortest representation that round-trips, so save/load is bit-exact.

#include "featcal/calibration.hpp"
#include "featcal/model.hpp"
#include "featcal/tasks.hpp"

#include "json.hpp"

#include <fstream>
#include <sstream>

namespace featcal {

using json = nlohmann::json;

inline json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline json column_to_json(const Matrix& m) {
    json v = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) v.push_back(m(r, 0));
    return v;
}

inline Matrix matrix_from_json(const json& j, const std::string& where) {
    if (!j.is_array()) throw ConfigError("expected nested array", where);
    const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
    const Eigen::Index cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        if (!j[r].is_array() || static_cast<Eigen::Index>(j[r].size()) != cols)
            throw ConfigError("ragged matrix rows", where);
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
    }
    return m;
}

inline Matrix column_from_json(const json& j, const std::string& where) {
    if (!j.is_array()) throw ConfigError("expected array", where);
    Matrix m(static_cast<Eigen::Index>(j.size()), 1);
    for (std::size_t r = 0; r < j.size(); ++r) m(static_cast<Eigen::Index>(r), 0) = j[r].get<double>();
    return m;
}

// ---------------------------------------------------------------------------
// Model spec

inline json layer_to_json(const LayerSpec& s) {
    return std::visit(
        [](const auto& k) -> json {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, LinearSpec>) {
                return {{"kind", "linear"}, {"in_dim", k.in_dim}, {"out_dim", k.out_dim}, {"has_bias", k.has_bias}};
            } else if constexpr (std::is_same_v<T, LayerNormSpec>) {
                return {{"kind", "layernorm"}, {"dim", k.dim}, {"eps", k.eps}};
            } else if constexpr (std::is_same_v<T, ActivationSpec>) {
                return {{"kind", "activation"}, {"function", to_string(k.function)}};
            } else {
                json inner = json::array();
                for (const auto& i : k.inner) inner.push_back(layer_to_json(i));
                return {{"kind", "residual"}, {"inner", inner}};
            }
        },
        s.kind);
}

inline LayerSpec layer_from_json(const json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "linear")
        return LayerSpec::linear(j.at("in_dim").get<int>(), j.at("out_dim").get<int>(), j.value("has_bias", true));
    if (kind == "layernorm") return LayerSpec::layernorm(j.at("dim").get<int>(), j.value("eps", 1e-5));
    if (kind == "activation") return LayerSpec::activation(activation_from_string(j.at("function").get<std::string>()));
    if (kind == "residual") {
        std::vector<LayerSpec> inner;
        for (const auto& i : j.at("inner")) inner.push_back(layer_from_json(i));
        return LayerSpec::residual(std::move(inner));
    }
    throw ConfigError("unknown layer kind '" + kind + "'", "spec");
}

inline json spec_to_json(const ModelSpec& spec) {
    json layers = json::array();
    for (const auto& l : spec.layers) layers.push_back(layer_to_json(l));
    json j = {{"schema_version", spec.schema_version}, {"input_dim", spec.input_dim}, {"layers", layers}};
    if (spec.head)
        j["head"] = {{"in_dim", spec.head->in_dim}, {"out_dim", spec.head->out_dim}, {"has_bias", spec.head->has_bias}};
    else
        j["head"] = nullptr;
    return j;
}

inline ModelSpec spec_from_json(const json& j) {
    ModelSpec spec;
    spec.schema_version = j.value("schema_version", 1);
    spec.input_dim = j.at("input_dim").get<int>();
    for (const auto& l : j.at("layers")) spec.layers.push_back(layer_from_json(l));
    if (j.contains("head") && !j.at("head").is_null()) {
        const auto& h = j.at("head");
        spec.head = LinearSpec{h.at("in_dim").get<int>(), h.at("out_dim").get<int>(), h.value("has_bias", true)};
    }
    validate(spec);
    return spec;
}

// ---------------------------------------------------------------------------
// Model files: {schema_version, spec, role, entries}

inline bool is_column_entry(const std::string& key) {
    auto ends = [&](const std::string& s) { return key.size() >= s.size() && key.compare(key.size() - s.size(), s.size(), s) == 0; };
    return ends(".bias") || ends(".gamma") || ends(".beta");
}

inline json model_to_json(const ModelSpec& spec, const ParameterSet& params) {
    json entries = json::object();
    for (const auto& [k, v] : params.entries) entries[k] = is_column_entry(k) ? column_to_json(v) : matrix_to_json(v);
    return {{"schema_version", spec.schema_version}, {"spec", spec_to_json(spec)}, {"role", role_name(params)},
            {"entries", entries}};
}

struct ModelFile {
    ModelSpec spec;
    ParameterSet params;
};

inline ModelFile model_from_json(const json& j) {
    ModelFile f;
    f.spec = spec_from_json(j.at("spec"));
    parse_role(j.at("role").get<std::string>(), f.params);
    for (const auto& [k, v] : j.at("entries").items())
        f.params.entries[k] = is_column_entry(k) ? column_from_json(v, k) : matrix_from_json(v, k);
    check_parameters(f.params, f.spec);
    return f;
}

// ---------------------------------------------------------------------------
// Dataset files: {task_index, split, num_classes, features, labels}

inline json dataset_to_json(const TaskDataset& d) {
    return {{"task_index", d.task_index}, {"split", to_string(d.split)}, {"num_classes", d.num_classes},
            {"features", matrix_to_json(d.features)}, {"labels", d.labels}};
}

inline TaskDataset dataset_from_json(const json& j) {
    TaskDataset d;
    d.task_index = j.at("task_index").get<int>();
    d.split = split_from_string(j.at("split").get<std::string>());
    d.features = matrix_from_json(j.at("features"), "features");
    d.labels = j.at("labels").get<std::vector<int>>();
    d.num_classes = j.value("num_classes", 0);
    if (static_cast<Eigen::Index>(d.labels.size()) != d.features.cols())
        throw ConfigError("label count does not match feature columns", "dataset");
    for (int y : d.labels)
        if (y < 0 || (d.num_classes > 0 && y >= d.num_classes)) throw ConfigError("label out of range", "dataset");
    return d;
}

// ---------------------------------------------------------------------------
// Configs and logs

inline json calib_config_to_json(const CalibConfig& c) {
    return {{"lambda", c.lambda}, {"rho", c.rho}, {"alpha", c.alpha}, {"epsilon", c.epsilon}, {"n", c.n},
            {"bias", c.calibrate_bias}, {"layernorm", c.calibrate_layernorm}, {"modules", c.modules}};
}

inline CalibConfig calib_config_from_json(const json& j, CalibConfig c = {}) {
    c.lambda = j.value("lambda", c.lambda);
    c.rho = j.value("rho", c.rho);
    c.alpha = j.value("alpha", c.alpha);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.n = j.value("n", c.n);
    c.calibrate_bias = j.value("bias", c.calibrate_bias);
    c.calibrate_layernorm = j.value("layernorm", c.calibrate_layernorm);
    c.modules = j.value("modules", c.modules);
    c.validate();
    return c;
}

inline json suite_config_to_json(const SuiteConfig& c) {
    return {{"num_tasks", c.num_tasks}, {"input_dim", c.input_dim}, {"classes", c.classes},
            {"train_samples", c.train_samples}, {"calibration_samples", c.calibration_samples},
            {"test_samples", c.test_samples}, {"shift", c.shift}, {"separation", c.separation},
            {"noise", c.noise}, {"seed", c.seed}};
}

inline SuiteConfig suite_config_from_json(const json& j, SuiteConfig c = {}) {
    c.num_tasks = j.value("num_tasks", c.num_tasks);
    c.input_dim = j.value("input_dim", c.input_dim);
    c.classes = j.value("classes", c.classes);
    c.train_samples = j.value("train_samples", c.train_samples);
    c.calibration_samples = j.value("calibration_samples", c.calibration_samples);
    c.test_samples = j.value("test_samples", c.test_samples);
    c.shift = j.value("shift", c.shift);
    c.separation = j.value("separation", c.separation);
    c.noise = j.value("noise", c.noise);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

inline json calibration_log_to_json(const CalibrationLog& log, bool include_timing = true) {
    json mods = json::array();
    for (const auto& m : log.modules)
        mods.push_back({{"path", m.path}, {"layer", m.layer}, {"kind", m.kind}, {"anchor_norm", m.anchor_norm},
                        {"solve_residual", m.solve_residual}, {"stationary_residual", m.stationary_residual},
                        {"data_term_before", m.data_term_before}, {"data_term_after", m.data_term_after},
                        {"distance", m.distance}, {"tasks_used", m.tasks_used}, {"bias_updated", m.bias_updated}});
    json j = {{"modules", mods}, {"warnings", log.warnings}};
    if (include_timing) {
        json t = json::array();
        for (const auto& [layer, sec] : log.layer_seconds) t.push_back({{"layer", layer}, {"seconds", sec}});
        j["layer_seconds"] = t;
    }
    return j;
}

// ---------------------------------------------------------------------------
// Files

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open for reading", path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(e.what(), path);
    }
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing", path);
    out << text;
    if (!out) throw Error("write failed", path);
}

inline void write_json_file(const std::string& path, const json& j) { write_text_file(path, j.dump(1) + "\n"); }

inline void save_model(const std::string& path, const ModelSpec& spec, const ParameterSet& params) {
    write_json_file(path, model_to_json(spec, params));
}

inline ModelFile load_model(const std::string& path) {
    try {
        return model_from_json(read_json_file(path));
    } catch (const json::exception& e) {
        throw ConfigError(e.what(), path);
    }
}

inline TaskDataset load_dataset(const std::string& path) {
    try {
        return dataset_from_json(read_json_file(path));
    } catch (const json::exception& e) {
        throw ConfigError(e.what(), path);
    }
}

/// Full-precision decimal rendering used by every CSV writer.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace featcal
