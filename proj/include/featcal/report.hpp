#pragma once

// Drift rows, drift summaries and the long-format metrics table.

#include "featcal/drift.hpp"
#include "featcal/io.hpp"

#include <sstream>
#include <string>
#include <vector>

namespace featcal {

struct DriftRow {
    int task = 0;
    int layer = 0;
    int sample = 0;
    double e_norm = 0.0;
    double m_norm = 0.0;
    double p_norm = 0.0;
    double cosine = 1.0;

    bool operator==(const DriftRow&) const = default;
};

inline const char* drift_csv_header() { return "task,layer,sample,e_norm,m_norm,p_norm,cosine"; }

inline std::string drift_csv(const std::vector<DriftRow>& rows) {
    std::ostringstream os;
    os << drift_csv_header() << "\n";
    for (const auto& r : rows)
        os << r.task << ',' << r.layer << ',' << r.sample << ',' << format_double(r.e_norm) << ','
           << format_double(r.m_norm) << ',' << format_double(r.p_norm) << ',' << format_double(r.cosine) << "\n";
    return os.str();
}

inline std::vector<DriftRow> parse_drift_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != drift_csv_header()) throw ConfigError("bad drift csv header", "drift csv");
    std::vector<DriftRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string f[7];
        for (auto& s : f)
            if (!std::getline(ls, s, ',')) throw ConfigError("short drift csv row", "drift csv");
        rows.push_back({std::stoi(f[0]), std::stoi(f[1]), std::stoi(f[2]), std::stod(f[3]), std::stod(f[4]),
                        std::stod(f[5]), std::stod(f[6])});
    }
    return rows;
}

/// Everything the drift report derives for one model against the experts.
struct DriftAnalysis {
    std::vector<DriftRow> rows;
    std::vector<double> layer_mean_e;      // index l-1, averaged over tasks and samples
    std::vector<double> layer_mean_cosine;
    std::vector<double> task_final_drift;  // mean final-layer |e_L| per task
    double mean_final_drift = 0.0;
    double reconstruction_error = 0.0;     // worst relative error over reconstructed tasks
    bool reconstruction_available = false;
    double margin_preservation = 1.0;      // fraction of samples whose top-1 matches the expert
};

/// Compares `model` against each expert on that expert's batch. The
/// reconstruction check runs on the first `reconstruction_samples` columns of
/// each task when every layer is smooth.
inline DriftAnalysis analyze_drift(const ParameterSet& model, const std::vector<ParameterSet>& experts,
                                   const ModelSpec& spec, const std::vector<TaskDataset>& data,
                                   int reconstruction_samples = 4) {
    if (experts.size() != data.size()) throw ShapeError("one dataset per expert", "drift");
    const int L = spec.num_layers();
    DriftAnalysis out;
    out.layer_mean_e.assign(L, 0.0);
    out.layer_mean_cosine.assign(L, 0.0);
    bool smooth = true;
    for (const auto& l : spec.layers) smooth = smooth && !contains_relu(l);
    out.reconstruction_available = smooth && reconstruction_samples > 0;

    double total_samples = 0.0;
    std::size_t agree = 0, decisions = 0;
    for (std::size_t i = 0; i < experts.size(); ++i) {
        const Matrix& x = data[i].features;
        const auto te = forward_trace(experts[i], spec, x);
        const auto tm = forward_trace(model, spec, x);
        total_samples += static_cast<double>(x.cols());
        for (int l = 1; l <= L; ++l) {
            const DriftRecord rec = decompose_layer(model, experts[i], spec, l, te, tm);
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                out.rows.push_back({static_cast<int>(i), l, static_cast<int>(j), rec.e_norm(j), rec.m_norm(j),
                                    rec.p_norm(j), rec.cosine_to_expert(j)});
                out.layer_mean_e[l - 1] += rec.e_norm(j);
                out.layer_mean_cosine[l - 1] += rec.cosine_to_expert(j);
            }
            if (l == L) out.task_final_drift.push_back(x.cols() ? rec.e_norm.mean() : 0.0);
        }
        if (spec.head) {
            const auto rep = output_drift_report(head_of(model, spec), head_of(experts[i], spec), te.final_features(),
                                                 tm.final_features(), {});
            for (bool b : rep.top1_agrees) agree += b;
            decisions += rep.top1_agrees.size();
        }
        if (out.reconstruction_available && x.cols() > 0) {
            const Eigen::Index k = std::min<Eigen::Index>(reconstruction_samples, x.cols());
            const Matrix xs = x.leftCols(k);
            const auto rep = final_drift_expansion(model, experts[i], spec, forward_trace(experts[i], spec, xs),
                                                   forward_trace(model, spec, xs));
            out.reconstruction_error = std::max(out.reconstruction_error, rep.relative_error);
        }
    }
    if (total_samples > 0)
        for (int l = 0; l < L; ++l) {
            out.layer_mean_e[l] /= total_samples;
            out.layer_mean_cosine[l] /= total_samples;
        }
    out.mean_final_drift = L > 0 ? out.layer_mean_e[L - 1] : 0.0;
    if (decisions) out.margin_preservation = static_cast<double>(agree) / static_cast<double>(decisions);
    return out;
}

inline json drift_summary_json(const DriftAnalysis& a) {
    json layers = json::array();
    for (std::size_t l = 0; l < a.layer_mean_e.size(); ++l)
        layers.push_back({{"layer", l + 1}, {"mean_e_norm", a.layer_mean_e[l]}, {"mean_cosine", a.layer_mean_cosine[l]}});
    json j = {{"per_layer", layers},
              {"task_final_drift", a.task_final_drift},
              {"mean_final_drift", a.mean_final_drift},
              {"margin_preservation_rate", a.margin_preservation}};
    j["reconstruction_relative_error"] = a.reconstruction_available ? json(a.reconstruction_error) : json(nullptr);
    return j;
}

// ---------------------------------------------------------------------------
// Long-format metrics: run_id, stage, task, layer, metric, value. Missing task
// or layer is written as an empty field.

struct MetricRow {
    std::string run_id;
    std::string stage;
    int task = -1;
    int layer = -1;
    std::string metric;
    double value = 0.0;
};

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::ostringstream os;
    os << "run_id,stage,task,layer,metric,value\n";
    for (const auto& r : rows) {
        os << r.run_id << ',' << r.stage << ',';
        if (r.task >= 0) os << r.task;
        os << ',';
        if (r.layer >= 0) os << r.layer;
        os << ',' << r.metric << ',' << format_double(r.value) << "\n";
    }
    return os.str();
}

inline void append_drift_metrics(std::vector<MetricRow>& out, const std::string& run_id, const std::string& model,
                                 const DriftAnalysis& a) {
    for (std::size_t l = 0; l < a.layer_mean_e.size(); ++l) {
        out.push_back({run_id, "drift", -1, static_cast<int>(l + 1), model + ".mean_e_norm", a.layer_mean_e[l]});
        out.push_back({run_id, "drift", -1, static_cast<int>(l + 1), model + ".mean_cosine", a.layer_mean_cosine[l]});
    }
    for (std::size_t i = 0; i < a.task_final_drift.size(); ++i)
        out.push_back({run_id, "drift", static_cast<int>(i), static_cast<int>(a.layer_mean_e.size()),
                       model + ".final_drift", a.task_final_drift[i]});
    out.push_back({run_id, "drift", -1, -1, model + ".margin_preservation_rate", a.margin_preservation});
}

} // namespace featcal
