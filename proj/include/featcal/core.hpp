#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace featcal {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Base error for every failure raised by the library. `where` names the
/// offending layer, module path or stage when one is known.
class Error : public std::runtime_error {
public:
    Error(const std::string& what, std::string where = {})
        : std::runtime_error(where.empty() ? what : where + ": " + what), where_(std::move(where)) {}

    const std::string& where() const noexcept { return where_; }

private:
    std::string where_;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const std::string& where) {
    if (m.rows() != rows || m.cols() != cols) {
        throw ShapeError("expected " + std::to_string(rows) + "x" + std::to_string(cols) + ", got " +
                             std::to_string(m.rows()) + "x" + std::to_string(m.cols()),
                         where);
    }
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const std::string& where) {
    require_shape(b, a.rows(), a.cols(), where);
}

/// Per-column Euclidean norms of a d x M feature matrix.
inline Vector column_norms(const Matrix& m) {
    Vector out(m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(j) = m.col(j).norm();
    return out;
}

} // namespace featcal
