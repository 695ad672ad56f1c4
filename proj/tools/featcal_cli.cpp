// featcal: synthetic multi-task merge / calibrate / diagnose pipeline.

#include "featcal/pipeline.hpp"

#include "CLI11.hpp"

#include <iostream>

using namespace featcal;

namespace {

const char* kExitCodes =
    "Exit status:\n"
    "  0  success\n"
    "  1  usage error (bad or missing flags)\n"
    "  2  configuration error (invalid values, unreadable config)\n"
    "  3  I/O error (missing artifact, unwritable path)\n"
    "  4  shape error (incompatible models or data)\n"
    "  5  numerical error (divergence, non-finite values)\n"
    "  6  any other stage failure\n";

// Flags that may override the config file. Each value is applied only when
// its option was given on the command line.
struct Overrides {
    double lambda = 0, rho = 0, alpha = 0, epsilon = 0, scale = 0, shift = 0, lr = 0;
    int n = 0, tasks = 0, classes = 0, epochs = 0;
    std::string bias, layernorm, modules, method;
    std::vector<std::pair<CLI::Option*, std::function<void(PipelineConfig&)>>> setters;

    template <class T>
    void add(CLI::App* app, const std::string& flag, T& var, const std::string& help,
             std::function<void(PipelineConfig&)> apply) {
        setters.emplace_back(app->add_option(flag, var, help), std::move(apply));
    }

    void calibration(CLI::App* app) {
        add(app, "--lambda", lambda, "ridge strength (>= 0)", [this](PipelineConfig& c) { c.calib.lambda = lambda; });
        add(app, "--rho", rho, "anchor blend between merged and base", [this](PipelineConfig& c) { c.calib.rho = rho; });
        add(app, "--alpha", alpha, "target interpolation in [0, 1]", [this](PipelineConfig& c) { c.calib.alpha = alpha; });
        add(app, "--epsilon", epsilon, "numerical stabilizer (> 0)",
            [this](PipelineConfig& c) { c.calib.epsilon = epsilon; });
        add(app, "--n", n, "calibration samples per task", [this](PipelineConfig& c) { c.calib.n = n; });
        auto onoff = [](const std::string& v) { return v == "on"; };
        setters.emplace_back(app->add_option("--bias", bias, "calibrate linear biases")->check(CLI::IsMember({"on", "off"})),
                             [this, onoff](PipelineConfig& c) { c.calib.calibrate_bias = onoff(bias); });
        setters.emplace_back(
            app->add_option("--layernorm", layernorm, "calibrate LayerNorm affines")->check(CLI::IsMember({"on", "off"})),
            [this, onoff](PipelineConfig& c) { c.calib.calibrate_layernorm = onoff(layernorm); });
        add(app, "--modules", modules, "glob over module paths", [this](PipelineConfig& c) { c.calib.modules = modules; });
    }

    void merge(CLI::App* app) {
        setters.emplace_back(
            app->add_option("--method", method, "average | task-arithmetic")->check(CLI::IsMember({"average", "task-arithmetic"})),
            [this](PipelineConfig& c) { c.merge_method = method; });
        add(app, "--scale", scale, "task-arithmetic scale", [this](PipelineConfig& c) { c.merge_scale = scale; });
    }

    void suite(CLI::App* app) {
        add(app, "--tasks", tasks, "number of tasks", [this](PipelineConfig& c) { c.suite.num_tasks = tasks; });
        add(app, "--classes", classes, "classes per task", [this](PipelineConfig& c) { c.suite.classes = classes; });
        add(app, "--shift", shift, "task rotation/translation strength", [this](PipelineConfig& c) { c.suite.shift = shift; });
    }

    void training(CLI::App* app) {
        add(app, "--epochs", epochs, "fine-tuning epochs", [this](PipelineConfig& c) { c.finetune.epochs = epochs; });
        add(app, "--lr", lr, "fine-tuning learning rate", [this](PipelineConfig& c) { c.finetune.lr = lr; });
    }

    void apply(PipelineConfig& c) const {
        for (const auto& [opt, fn] : setters)
            if (opt->count() > 0) fn(c);
        c.calib.validate();
        c.suite.validate();
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Merge task experts, calibrate the merged model in closed form, and report feature drift."};
    app.footer(kExitCodes);
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, out_dir;
    std::uint64_t seed = 0;
    app.add_option("--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "seed for the whole run")->required();
    app.add_option("--out", out_dir, "run directory")->required();

    Overrides ov;
    auto* gen = app.add_subcommand("gen-tasks", "generate the synthetic task suite");
    ov.suite(gen);
    auto* train = app.add_subcommand("train", "pretrain the base and fine-tune one expert per task");
    ov.training(train);
    auto* merge = app.add_subcommand("merge", "merge the experts in weight space");
    ov.merge(merge);
    auto* cal = app.add_subcommand("calibrate", "forward-order closed-form calibration of the merged model");
    ov.calibration(cal);
    auto* drift = app.add_subcommand("drift-report", "per-layer drift CSV and JSON summary against the experts");
    std::string drift_model = "both";
    drift->add_option("--model", drift_model, "merged | calibrated | both")
        ->check(CLI::IsMember({"merged", "calibrated", "both"}));
    auto* eval = app.add_subcommand("eval", "evaluate all models and write metrics.csv");
    auto* pipe = app.add_subcommand("pipeline", "run every stage in order");
    ov.suite(pipe);
    ov.training(pipe);
    ov.merge(pipe);
    ov.calibration(pipe);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        PipelineConfig cfg;
        if (!config_path.empty()) cfg = pipeline_config_from_json(read_json_file(config_path));
        cfg.seed = seed;
        ov.apply(cfg);
        const RunLayout run{out_dir};
        fs::create_directories(run.root);

        if (gen->parsed()) run_stage("gen-tasks", [&] { stage_gen_tasks(cfg, run); });
        if (train->parsed()) run_stage("train", [&] { stage_train(cfg, run); });
        if (merge->parsed()) run_stage("merge", [&] { stage_merge(cfg, run); });
        if (cal->parsed()) run_stage("calibrate", [&] { stage_calibrate(cfg, run); });
        if (drift->parsed()) {
            for (const std::string m : {"merged", "calibrated"}) {
                if (drift_model != "both" && drift_model != m) continue;
                const auto a = run_stage("drift-report", [&] { return stage_drift_report(run, m); });
                std::cout << m << ": mean final-layer drift " << format_double(a.mean_final_drift) << "\n";
            }
        }
        if (eval->parsed()) {
            const auto s = run_stage("eval", [&] { return stage_eval(cfg, run); });
            std::cout << "mean accuracy  base " << EvalSummary::mean_accuracy(s.base) << "  merged "
                      << EvalSummary::mean_accuracy(s.merged) << "  calibrated "
                      << EvalSummary::mean_accuracy(s.calibrated) << "\n";
        }
        if (pipe->parsed()) {
            const auto r = run_pipeline(cfg, run.root);
            std::cout << "final-layer drift  merged " << format_double(r.merged_drift.mean_final_drift)
                      << "  calibrated " << format_double(r.calibrated_drift.mean_final_drift) << "\n"
                      << "mean accuracy      merged " << EvalSummary::mean_accuracy(r.eval.merged) << "  calibrated "
                      << EvalSummary::mean_accuracy(r.eval.calibrated) << "\n";
        }
    } catch (const StageError& e) {
        std::cerr << "stage " << e.where() << " failed: " << e.what() << "\n";
        return e.code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return classify(e);
    }
    return kOk;
}
