#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfg {

/// Invalid user-supplied parameter (positivity, range, shape mismatches).
struct InvalidParameter : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Quadratic ansatz has no real root for the requested coefficients.
struct NoRealRoot : std::domain_error {
    using std::domain_error::domain_error;
};

struct UnsupportedOrder : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct OutOfRange : std::domain_error {
    using std::domain_error::domain_error;
};

/// Constants fail kappa > K/2, so no continuation step size exists.
struct InvalidConstants : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ZeroProbabilityAtom : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Least-squares design matrix unusable (non-finite entries or too few rows).
struct RegressionSingular : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Picard / continuation iteration exhausted max_iters.
/// Carries the residual history and, in continuation mode, the failing level.
struct NoConvergence : std::runtime_error {
    NoConvergence(const std::string& what, std::vector<double> history,
                  double lambda_level = 1.0)
        : std::runtime_error(what),
          residual_history(std::move(history)),
          lambda(lambda_level) {}
    std::vector<double> residual_history;
    double lambda;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dense row-major [rows x cols] array of doubles.
/// Rows index particles, columns index time nodes throughout.
class Array2D {
  public:
    Array2D() = default;
    Array2D(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), v_(rows * cols, fill) {}

    double& operator()(std::size_t i, std::size_t k) { return v_[i * cols_ + k]; }
    double operator()(std::size_t i, std::size_t k) const { return v_[i * cols_ + k]; }

    std::span<double> row(std::size_t i) { return {v_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const { return {v_.data() + i * cols_, cols_}; }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return v_.empty(); }

    std::vector<double> column(std::size_t k) const {
        std::vector<double> out(rows_);
        for (std::size_t i = 0; i < rows_; ++i) out[i] = v_[i * cols_ + k];
        return out;
    }

    void fill(double x) { v_.assign(v_.size(), x); }

    std::vector<double>& data() { return v_; }
    const std::vector<double>& data() const { return v_; }

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> v_;
};

}  // namespace mfg
