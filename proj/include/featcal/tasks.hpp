#pragma once

// Deterministic synthetic multi-task classification suites. Every task shares
// K Gaussian cluster prototypes; task i sees them through its own orthogonal
// rotation Q_i and translation t_i, both scaled by `shift`.

#include "featcal/core.hpp"

#include <random>
#include <string>
#include <vector>

namespace featcal {

enum class Split { Train = 0, Calibration = 1, Test = 2 };

inline std::string to_string(Split s) {
    switch (s) {
    case Split::Train: return "train";
    case Split::Calibration: return "calibration";
    case Split::Test: return "test";
    }
    return "?";
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "calibration") return Split::Calibration;
    if (s == "test") return Split::Test;
    throw ConfigError("unknown split '" + s + "'");
}

struct TaskDataset {
    int task_index = 0;
    Split split = Split::Train;
    int num_classes = 0;
    Matrix features;         // d0 x M
    std::vector<int> labels; // length M, values in [0, num_classes)

    Eigen::Index size() const { return features.cols(); }
};

struct SuiteConfig {
    int num_tasks = 8;
    int input_dim = 8;
    int classes = 4;
    int train_samples = 512;
    int calibration_samples = 256;
    int test_samples = 512;
    double shift = 1.0;          // rotation/translation strength
    double separation = 2.0;     // prototype scale
    double noise = 1.0;          // within-cluster standard deviation
    std::uint64_t seed = 0;

    void validate() const {
        if (num_tasks < 1 || input_dim < 1 || classes < 1)
            throw ConfigError("task, dimension and class counts must be positive", "suite");
        if (train_samples < 1 || calibration_samples < 1 || test_samples < 1)
            throw ConfigError("split sizes must be positive", "suite");
        if (shift < 0.0 || noise < 0.0 || separation < 0.0) throw ConfigError("scales must be non-negative", "suite");
    }
};

struct TaskSuite {
    SuiteConfig config;
    std::vector<TaskDataset> datasets; // ordered by task, then split

    const TaskDataset& get(int task, Split split) const {
        for (const auto& d : datasets)
            if (d.task_index == task && d.split == split) return d;
        throw ConfigError("no dataset for task " + std::to_string(task) + " split " + to_string(split), "suite");
    }
};

namespace detail {

inline std::mt19937_64 seeded(std::initializer_list<std::uint64_t> parts) {
    std::vector<std::uint32_t> words;
    for (auto p : parts) {
        words.push_back(static_cast<std::uint32_t>(p));
        words.push_back(static_cast<std::uint32_t>(p >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return std::mt19937_64(seq);
}

inline Matrix gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = n(rng);
    return m;
}

} // namespace detail

/// Cayley transform (I - S)^{-1}(I + S) of a skew-symmetric S; orthogonal,
/// and exactly the identity when S = 0.
inline Matrix cayley_rotation(const Matrix& skew) {
    const Matrix eye = Matrix::Identity(skew.rows(), skew.cols());
    return (eye - skew).partialPivLu().solve(eye + skew);
}

inline TaskSuite make_task_suite(const SuiteConfig& config) {
    config.validate();
    TaskSuite suite;
    suite.config = config;
    const int d = config.input_dim;

    auto proto_rng = detail::seeded({config.seed, 0x70726f746fULL});
    const Matrix prototypes = config.separation * detail::gaussian(proto_rng, d, config.classes);

    const int sizes[3] = {config.train_samples, config.calibration_samples, config.test_samples};
    for (int i = 0; i < config.num_tasks; ++i) {
        auto task_rng = detail::seeded({config.seed, 0x7461736bULL, static_cast<std::uint64_t>(i)});
        const Matrix a = detail::gaussian(task_rng, d, d);
        const Matrix skew = 0.5 * config.shift * (a - a.transpose()) / std::sqrt(static_cast<double>(d));
        const Matrix rotation = cayley_rotation(skew);
        const Vector translation = config.shift * detail::gaussian(task_rng, d, 1).col(0);

        for (int s = 0; s < 3; ++s) {
            auto rng = detail::seeded({config.seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(s + 1)});
            std::uniform_int_distribution<int> pick(0, config.classes - 1);
            TaskDataset ds;
            ds.task_index = i;
            ds.split = static_cast<Split>(s);
            ds.num_classes = config.classes;
            ds.features.resize(d, sizes[s]);
            ds.labels.resize(sizes[s]);
            for (int j = 0; j < sizes[s]; ++j) {
                const int k = pick(rng);
                const Vector z = detail::gaussian(rng, d, 1).col(0);
                ds.labels[j] = k;
                ds.features.col(j) = rotation * (prototypes.col(k) + config.noise * z) + translation;
            }
            suite.datasets.push_back(std::move(ds));
        }
    }
    return suite;
}

/// Concatenates datasets column-wise (used for pooled pretraining).
inline TaskDataset concatenate(const std::vector<const TaskDataset*>& parts) {
    if (parts.empty()) throw ConfigError("nothing to concatenate", "data");
    TaskDataset out = *parts.front();
    out.task_index = -1;
    Eigen::Index cols = 0;
    for (const auto* p : parts) cols += p->size();
    out.features.resize(parts.front()->features.rows(), cols);
    out.labels.clear();
    Eigen::Index at = 0;
    for (const auto* p : parts) {
        require_shape(p->features, out.features.rows(), p->size(), "concatenate");
        out.features.middleCols(at, p->size()) = p->features;
        out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
        at += p->size();
    }
    return out;
}

/// First `n` samples of a dataset (all of it when n exceeds its size).
inline TaskDataset head_samples(const TaskDataset& ds, Eigen::Index n) {
    TaskDataset out = ds;
    n = std::min(n, ds.size());
    out.features = ds.features.leftCols(n);
    out.labels.assign(ds.labels.begin(), ds.labels.begin() + n);
    return out;
}

} // namespace featcal
