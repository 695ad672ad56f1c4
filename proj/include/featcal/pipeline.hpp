#pragma once

// End-to-end driver: gen-tasks -> train -> merge -> calibrate -> drift-report
// -> eval. Every stage reads its inputs from and writes its artifacts to one
// run directory, so stages can run individually or in sequence. The whole run
// is a pure function of the configuration and seeds.

#include "featcal/calibration.hpp"
#include "featcal/io.hpp"
#include "featcal/merging.hpp"
#include "featcal/report.hpp"
#include "featcal/train.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <filesystem>

namespace featcal {

namespace fs = std::filesystem;

struct PipelineConfig {
    SuiteConfig suite;
    int hidden = 16;
    int blocks = 2;
    TrainConfig pretrain{8, 0.05, 0.9, 64, 0};
    TrainConfig finetune{40, 0.05, 0.9, 64, 0};
    std::string merge_method = "task-arithmetic";
    double merge_scale = 0.3;
    CalibConfig calib;
    std::uint64_t seed = 0;
};

/// Linear -> tanh -> `blocks` x Residual[LayerNorm, Linear, tanh, Linear] -> LayerNorm, linear head.
inline ModelSpec default_architecture(int input_dim, int hidden, int blocks, int classes) {
    ModelSpec spec;
    spec.input_dim = input_dim;
    spec.layers.push_back(LayerSpec::linear(input_dim, hidden));
    spec.layers.push_back(LayerSpec::activation(Activation::Tanh));
    for (int b = 0; b < blocks; ++b)
        spec.layers.push_back(LayerSpec::residual({LayerSpec::layernorm(hidden), LayerSpec::linear(hidden, hidden),
                                                   LayerSpec::activation(Activation::Tanh),
                                                   LayerSpec::linear(hidden, hidden)}));
    spec.layers.push_back(LayerSpec::layernorm(hidden));
    spec.head = LinearSpec{hidden, classes, true};
    validate(spec);
    return spec;
}

inline json train_config_to_json(const TrainConfig& t) {
    return {{"epochs", t.epochs}, {"lr", t.lr}, {"momentum", t.momentum}, {"batch_size", t.batch_size}};
}

inline TrainConfig train_config_from_json(const json& j, TrainConfig t) {
    t.epochs = j.value("epochs", t.epochs);
    t.lr = j.value("lr", t.lr);
    t.momentum = j.value("momentum", t.momentum);
    t.batch_size = j.value("batch_size", t.batch_size);
    return t;
}

inline json pipeline_config_to_json(const PipelineConfig& c) {
    return {{"seed", c.seed},
            {"suite", suite_config_to_json(c.suite)},
            {"model", {{"hidden", c.hidden}, {"blocks", c.blocks}}},
            {"pretrain", train_config_to_json(c.pretrain)},
            {"finetune", train_config_to_json(c.finetune)},
            {"merge", {{"method", c.merge_method}, {"scale", c.merge_scale}}},
            {"calibrate", calib_config_to_json(c.calib)}};
}

/// Overlays the keys present in `j` onto `c`.
inline PipelineConfig pipeline_config_from_json(const json& j, PipelineConfig c = {}) {
    c.seed = j.value("seed", c.seed);
    if (j.contains("suite")) c.suite = suite_config_from_json(j["suite"], c.suite);
    if (j.contains("model")) {
        c.hidden = j["model"].value("hidden", c.hidden);
        c.blocks = j["model"].value("blocks", c.blocks);
    }
    if (j.contains("pretrain")) c.pretrain = train_config_from_json(j["pretrain"], c.pretrain);
    if (j.contains("finetune")) c.finetune = train_config_from_json(j["finetune"], c.finetune);
    if (j.contains("merge")) {
        c.merge_method = j["merge"].value("method", c.merge_method);
        c.merge_scale = j["merge"].value("scale", c.merge_scale);
        if (c.merge_method != "average" && c.merge_method != "task-arithmetic")
            throw ConfigError("unknown merge method '" + c.merge_method + "'", "merge");
    }
    if (j.contains("calibrate")) c.calib = calib_config_from_json(j["calibrate"], c.calib);
    return c;
}

/// Error raised by a pipeline stage; `where()` is the stage name.
class StageError : public Error {
public:
    StageError(const std::string& stage, const std::exception& cause, int code)
        : Error(cause.what(), stage), code_(code) {}
    int code() const noexcept { return code_; }

private:
    int code_;
};

// ---------------------------------------------------------------------------
// Run-directory layout

struct RunLayout {
    fs::path root;

    fs::path suite() const { return root / "data" / "suite.json"; }
    fs::path dataset(int task, Split s) const {
        return root / "data" / ("task_" + std::to_string(task) + "_" + to_string(s) + ".json");
    }
    fs::path model(const std::string& name) const { return root / "models" / (name + ".json"); }
    fs::path expert(int task) const { return model("expert_" + std::to_string(task)); }
    fs::path calibration_log() const { return root / "calibration_log.json"; }
    fs::path drift_csv(const std::string& model) const { return root / ("drift_" + model + ".csv"); }
    fs::path drift_summary(const std::string& model) const { return root / ("drift_" + model + "_summary.json"); }
    fs::path metrics() const { return root / "metrics.csv"; }
    fs::path manifest() const { return root / "manifest.json"; }
};

inline std::string run_id(const PipelineConfig& c) { return "seed" + std::to_string(c.seed); }

inline SuiteConfig load_suite_config(const RunLayout& run) { return suite_config_from_json(read_json_file(run.suite())); }

inline std::vector<TaskDataset> load_split(const RunLayout& run, int num_tasks, Split s) {
    std::vector<TaskDataset> out;
    for (int i = 0; i < num_tasks; ++i) out.push_back(load_dataset(run.dataset(i, s).string()));
    return out;
}

inline std::vector<ParameterSet> load_experts(const RunLayout& run, int num_tasks, ModelSpec* spec = nullptr) {
    std::vector<ParameterSet> out;
    for (int i = 0; i < num_tasks; ++i) {
        auto f = load_model(run.expert(i).string());
        if (spec) *spec = f.spec;
        out.push_back(std::move(f.params));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stages

inline void stage_gen_tasks(const PipelineConfig& c, const RunLayout& run) {
    fs::create_directories(run.root / "data");
    SuiteConfig sc = c.suite;
    sc.seed = c.seed;
    const TaskSuite suite = make_task_suite(sc);
    write_json_file(run.suite().string(), suite_config_to_json(sc));
    for (const auto& d : suite.datasets) write_json_file(run.dataset(d.task_index, d.split).string(), dataset_to_json(d));
}

inline void stage_train(const PipelineConfig& c, const RunLayout& run) {
    fs::create_directories(run.root / "models");
    const SuiteConfig sc = load_suite_config(run);
    const auto train = load_split(run, sc.num_tasks, Split::Train);
    const ModelSpec spec = default_architecture(sc.input_dim, c.hidden, c.blocks, sc.classes);

    std::vector<const TaskDataset*> parts;
    for (const auto& d : train) parts.push_back(&d);
    const TaskDataset pooled = concatenate(parts);
    TrainConfig pre = c.pretrain;
    pre.seed = c.seed * 1000003ULL + 1;
    ParameterSet base = train_model(build_model(spec, c.seed), spec, pooled, pre);
    base.role = Role::Base;
    save_model(run.model("base").string(), spec, base);

    for (int i = 0; i < sc.num_tasks; ++i) {
        TrainConfig ft = c.finetune;
        ft.seed = c.seed * 1000003ULL + 100 + static_cast<std::uint64_t>(i);
        ParameterSet expert = train_model(base, spec, train[i], ft);
        expert.role = Role::Expert;
        expert.task_index = i;
        save_model(run.expert(i).string(), spec, expert);
    }
}

inline ParameterSet merge_models(const std::string& method, double scale, const ParameterSet& base,
                                 const std::vector<ParameterSet>& experts) {
    if (method == "average") return simple_average(experts);
    if (method == "task-arithmetic") return task_arithmetic(base, experts, scale);
    throw ConfigError("unknown merge method '" + method + "'", "merge");
}

inline void stage_merge(const PipelineConfig& c, const RunLayout& run) {
    const SuiteConfig sc = load_suite_config(run);
    const auto base = load_model(run.model("base").string());
    const auto experts = load_experts(run, sc.num_tasks);
    save_model(run.model("merged").string(), base.spec, merge_models(c.merge_method, c.merge_scale, base.params, experts));
}

inline void stage_calibrate(const PipelineConfig& c, const RunLayout& run) {
    const SuiteConfig sc = load_suite_config(run);
    const auto base = load_model(run.model("base").string());
    const auto merged = load_model(run.model("merged").string());
    const auto experts = load_experts(run, sc.num_tasks);
    std::vector<Matrix> calib;
    for (const auto& d : load_split(run, sc.num_tasks, Split::Calibration)) calib.push_back(d.features);
    const auto res = calibrate(merged.params, base.params, experts, merged.spec, calib, c.calib);
    save_model(run.model("calibrated").string(), merged.spec, res.calibrated);
    write_json_file(run.calibration_log().string(), calibration_log_to_json(res.log));
}

inline DriftAnalysis stage_drift_report(const RunLayout& run, const std::string& model_name) {
    const SuiteConfig sc = load_suite_config(run);
    const auto model = load_model(run.model(model_name).string());
    const auto experts = load_experts(run, sc.num_tasks);
    const auto test = load_split(run, sc.num_tasks, Split::Test);
    DriftAnalysis a = analyze_drift(model.params, experts, model.spec, test);
    write_text_file(run.drift_csv(model_name).string(), drift_csv(a.rows));
    write_json_file(run.drift_summary(model_name).string(), drift_summary_json(a));
    return a;
}

struct EvalSummary {
    std::vector<Evaluation> base, experts, merged, calibrated; // per task
    std::vector<MetricRow> rows;

    static double mean_accuracy(const std::vector<Evaluation>& v) {
        double s = 0.0;
        for (const auto& e : v) s += e.accuracy;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    }
    static double mean_loss(const std::vector<Evaluation>& v) {
        double s = 0.0;
        for (const auto& e : v) s += e.mean_loss;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    }
};

/// Evaluates every available model on each task's test split, appends drift
/// summaries of the merged and calibrated models, and writes metrics.csv.
inline EvalSummary stage_eval(const PipelineConfig& c, const RunLayout& run) {
    const SuiteConfig sc = load_suite_config(run);
    const auto test = load_split(run, sc.num_tasks, Split::Test);
    const auto base = load_model(run.model("base").string());
    const auto experts = load_experts(run, sc.num_tasks);
    const std::string rid = run_id(c);
    EvalSummary out;

    auto add = [&](const std::string& name, std::vector<Evaluation>& dst, auto&& params_for) {
        for (int i = 0; i < sc.num_tasks; ++i) {
            const Evaluation e = evaluate(params_for(i), base.spec, test[i]);
            dst.push_back(e);
            out.rows.push_back({rid, "eval", i, -1, name + ".accuracy", e.accuracy});
            out.rows.push_back({rid, "eval", i, -1, name + ".mean_loss", e.mean_loss});
        }
        out.rows.push_back({rid, "eval", -1, -1, name + ".mean_accuracy", EvalSummary::mean_accuracy(dst)});
        out.rows.push_back({rid, "eval", -1, -1, name + ".mean_loss", EvalSummary::mean_loss(dst)});
    };
    add("base", out.base, [&](int) -> const ParameterSet& { return base.params; });
    add("expert", out.experts, [&](int i) -> const ParameterSet& { return experts[i]; });
    for (const std::string name : {"merged", "calibrated"}) {
        if (!fs::exists(run.model(name))) continue;
        const auto m = load_model(run.model(name).string());
        add(name, name == "merged" ? out.merged : out.calibrated,
            [&](int) -> const ParameterSet& { return m.params; });
        append_drift_metrics(out.rows, rid, name, analyze_drift(m.params, experts, m.spec, test, 0));
    }
    if (fs::exists(run.calibration_log())) {
        const json log = read_json_file(run.calibration_log().string());
        for (const auto& m : log.at("modules")) {
            const std::string p = m.at("path").get<std::string>();
            const int layer = m.at("layer").get<int>();
            for (const char* key : {"data_term_before", "data_term_after", "distance", "solve_residual"})
                out.rows.push_back({rid, "calibrate", -1, layer, p + "." + key, m.at(key).get<double>()});
        }
    }
    write_text_file(run.metrics().string(), metrics_csv(out.rows));
    return out;
}

/// Git blob hash ("blob <size>\0" + contents) of a file, hex encoded.
inline std::string git_blob_sha1(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open for hashing", path.string());
    const std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string data = "blob " + std::to_string(body.size()) + std::string(1, '\0') + body;
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1)
        throw Error("sha1 failed", path.string());
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

inline json write_manifest(const PipelineConfig& c, const RunLayout& run) {
    json files = json::array();
    for (const auto& entry : fs::recursive_directory_iterator(run.root)) {
        if (!entry.is_regular_file() || entry.path() == run.manifest()) continue;
        files.push_back({{"path", fs::relative(entry.path(), run.root).string()},
                         {"git_sha1", git_blob_sha1(entry.path())}});
    }
    std::sort(files.begin(), files.end(),
              [](const json& a, const json& b) { return a["path"].get<std::string>() < b["path"].get<std::string>(); });
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    json m = {{"config", pipeline_config_to_json(c)}, {"files", files}, {"created_at", stamp}};
    write_json_file(run.manifest().string(), m);
    return m;
}

/// Exit statuses shared by the CLI.
enum ExitCode : int {
    kOk = 0,
    kUsage = 1,
    kConfig = 2,
    kIo = 3,
    kShape = 4,
    kNumerical = 5,
    kStage = 6,
};

inline int classify(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return kConfig;
    if (dynamic_cast<const ShapeError*>(&e)) return kShape;
    if (dynamic_cast<const NumericalError*>(&e)) return kNumerical;
    if (dynamic_cast<const fs::filesystem_error*>(&e)) return kIo;
    if (dynamic_cast<const Error*>(&e)) return kIo;
    return kStage;
}

/// Runs `fn`, rethrowing any failure as a StageError naming `stage`.
template <class Fn>
auto run_stage(const std::string& stage, Fn&& fn) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e, classify(e));
    }
}

struct PipelineResult {
    DriftAnalysis merged_drift, calibrated_drift;
    EvalSummary eval;
};

inline PipelineResult run_pipeline(const PipelineConfig& c, const fs::path& out_dir) {
    const RunLayout run{out_dir};
    fs::create_directories(out_dir);
    write_json_file((out_dir / "config.json").string(), pipeline_config_to_json(c));
    PipelineResult r;
    run_stage("gen-tasks", [&] { stage_gen_tasks(c, run); });
    run_stage("train", [&] { stage_train(c, run); });
    run_stage("merge", [&] { stage_merge(c, run); });
    run_stage("calibrate", [&] { stage_calibrate(c, run); });
    r.merged_drift = run_stage("drift-report", [&] { return stage_drift_report(run, "merged"); });
    r.calibrated_drift = run_stage("drift-report", [&] { return stage_drift_report(run, "calibrated"); });
    r.eval = run_stage("eval", [&] { return stage_eval(c, run); });
    run_stage("manifest", [&] { return write_manifest(c, run); });
    return r;
}

} // namespace featcal
