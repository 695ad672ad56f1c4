#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace featcal;
using featcal::testing::random_matrix;

TEST(ModelJson, RoundTripIsBitExact) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 25; ++trial) {
        const auto spec = featcal::testing::random_spec(rng);
        auto p = featcal::testing::random_params(spec, rng);
        p.role = Role::Expert;
        p.task_index = trial;
        const auto back = model_from_json(json::parse(model_to_json(spec, p).dump()));
        EXPECT_EQ(back.params, p);
        EXPECT_EQ(spec_to_json(back.spec), spec_to_json(spec));
    }
}

TEST(ModelJson, FileRoundTripAndErrors) {
    const auto dir = std::filesystem::temp_directory_path() / "featcal_io_test";
    std::filesystem::create_directories(dir);
    std::mt19937_64 rng(2);
    const auto spec = featcal::testing::random_spec(rng);
    const auto p = featcal::testing::random_params(spec, rng);
    save_model((dir / "m.json").string(), spec, p);
    EXPECT_EQ(load_model((dir / "m.json").string()).params, p);

    write_text_file((dir / "bad.json").string(), "{\"spec\": ");
    EXPECT_THROW(load_model((dir / "bad.json").string()), ConfigError);
    EXPECT_THROW(load_model((dir / "missing.json").string()), Error);

    auto j = model_to_json(spec, p);
    j["entries"].erase(j["entries"].begin());
    EXPECT_THROW(model_from_json(j), ShapeError);
    std::filesystem::remove_all(dir);
}

TEST(ModelJson, UnknownLayerKind) {
    json j = {{"input_dim", 2}, {"layers", json::array({{{"kind", "conv"}}})}};
    EXPECT_THROW(spec_from_json(j), ConfigError);
}

TEST(DatasetJson, RoundTrip) {
    SuiteConfig c;
    c.num_tasks = 1;
    c.train_samples = c.calibration_samples = c.test_samples = 10;
    const auto suite = make_task_suite(c);
    const auto& d = suite.get(0, Split::Calibration);
    const auto back = dataset_from_json(json::parse(dataset_to_json(d).dump()));
    EXPECT_EQ(back.features, d.features);
    EXPECT_EQ(back.labels, d.labels);
    EXPECT_EQ(back.split, Split::Calibration);
    auto bad = dataset_to_json(d);
    bad["labels"][0] = 99;
    EXPECT_THROW(dataset_from_json(bad), ConfigError);
}

TEST(ConfigJson, RoundTripAndValidation) {
    CalibConfig c;
    c.lambda = 3.0;
    c.modules = "layers.*";
    c.calibrate_layernorm = false;
    const auto back = calib_config_from_json(calib_config_to_json(c));
    EXPECT_EQ(back.lambda, 3.0);
    EXPECT_EQ(back.modules, "layers.*");
    EXPECT_FALSE(back.calibrate_layernorm);
    EXPECT_THROW(calib_config_from_json({{"epsilon", -1.0}}), ConfigError);
}

TEST(DriftCsv, EmptyIsHeaderOnly) {
    EXPECT_EQ(drift_csv({}), std::string(drift_csv_header()) + "\n");
    EXPECT_TRUE(parse_drift_csv(drift_csv({})).empty());
    EXPECT_THROW(parse_drift_csv("a,b\n"), ConfigError);
}

TEST(DriftCsv, IdenticalModelsGiveUnitCosineAndZeroDrift) {
    std::mt19937_64 rng(3);
    const auto spec = featcal::testing::random_spec(rng);
    const auto p = featcal::testing::random_params(spec, rng);
    TaskDataset d;
    d.features = random_matrix(rng, spec.input_dim, 5);
    d.labels.assign(5, 0);
    const auto a = analyze_drift(p, {p, p}, spec, {d, d});
    ASSERT_EQ(a.rows.size(), 2u * 5u * spec.layers.size());
    for (const auto& r : a.rows) {
        EXPECT_NEAR(r.cosine, 1.0, 1e-15);
        EXPECT_EQ(r.e_norm, 0.0);
        EXPECT_EQ(r.m_norm, 0.0);
        EXPECT_EQ(r.p_norm, 0.0);
    }
    EXPECT_EQ(a.mean_final_drift, 0.0);
    EXPECT_EQ(a.margin_preservation, 1.0);
}

TEST(DriftCsv, ParseReproducesRecords) {
    std::mt19937_64 rng(4);
    const auto spec = featcal::testing::random_spec(rng, false);
    const auto e = featcal::testing::random_params(spec, rng);
    const auto m = featcal::testing::perturbed(e, rng, 0.2);
    TaskDataset d;
    d.features = random_matrix(rng, spec.input_dim, 7);
    d.labels.assign(7, 0);
    const auto a = analyze_drift(m, {e}, spec, {d});
    EXPECT_EQ(parse_drift_csv(drift_csv(a.rows)), a.rows);
    // Independent recomputation of the final-layer norms.
    const auto te = forward_trace(e, spec, d.features), tm = forward_trace(m, spec, d.features);
    const Vector want = column_norms(tm.final_features() - te.final_features());
    const int L = spec.num_layers();
    for (const auto& r : a.rows)
        if (r.layer == L) EXPECT_EQ(r.e_norm, want(r.sample));
    EXPECT_TRUE(a.reconstruction_available);
    EXPECT_LE(a.reconstruction_error, 1e-6);
    const auto js = drift_summary_json(a);
    EXPECT_EQ(js.at("per_layer").size(), static_cast<std::size_t>(L));
}

TEST(MetricsCsv, EmptyFieldsAndFullPrecision) {
    const std::vector<MetricRow> rows{{"seed1", "eval", 2, -1, "merged.accuracy", 0.1},
                                      {"seed1", "drift", -1, 3, "merged.mean_e_norm", 1.0 / 3.0}};
    const std::string want = "run_id,stage,task,layer,metric,value\n"
                             "seed1,eval,2,,merged.accuracy,0.10000000000000001\n"
                             "seed1,drift,,3,merged.mean_e_norm,0.33333333333333331\n";
    EXPECT_EQ(metrics_csv(rows), want);
    EXPECT_EQ(std::stod(format_double(1.0 / 3.0)), 1.0 / 3.0);
}

TEST(CalibrationLogJson, TimingIsOptional) {
    CalibrationLog log;
    log.modules.push_back({"head", 3, "linear", 1.0, 0.0, 0.0, 2.0, 1.0, 0.5, 2, true});
    log.layer_seconds.emplace_back(3, 0.01);
    EXPECT_TRUE(calibration_log_to_json(log).contains("layer_seconds"));
    EXPECT_FALSE(calibration_log_to_json(log, false).contains("layer_seconds"));
}
