#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "mfg/common.hpp"

namespace mfg::detail {

// Symmetric positive-semidefinite solve via LDL^T with pivot dropping.
// Columns whose pivot falls below rel_tol * initial diagonal are treated as
// dependent and get a zero coefficient; fitted values stay well defined for
// rank-deficient designs (e.g. a constant state column).
inline std::vector<double> solve_psd_drop(std::vector<double> g, std::vector<double> rhs,
                                          std::size_t b, double rel_tol = 1e-11) {
    std::vector<double> diag0(b);
    for (std::size_t j = 0; j < b; ++j) {
        diag0[j] = g[j * b + j];
        if (!std::isfinite(diag0[j])) throw RegressionSingular("non-finite normal equations");
    }
    std::vector<char> dropped(b, 0);
    // In-place LDL^T: L stored below diagonal, D on diagonal.
    for (std::size_t j = 0; j < b; ++j) {
        double d = g[j * b + j];
        for (std::size_t m = 0; m < j; ++m)
            if (!dropped[m]) d -= g[j * b + m] * g[j * b + m] * g[m * b + m];
        if (!(d > rel_tol * std::max(diag0[j], 1e-300))) {
            dropped[j] = 1;
            continue;
        }
        g[j * b + j] = d;
        for (std::size_t i = j + 1; i < b; ++i) {
            double s = g[i * b + j];
            for (std::size_t m = 0; m < j; ++m)
                if (!dropped[m]) s -= g[i * b + m] * g[j * b + m] * g[m * b + m];
            g[i * b + j] = s / d;
        }
    }
    // Forward solve L z = rhs, scale by D, back solve L^T x = z.
    for (std::size_t j = 0; j < b; ++j) {
        if (dropped[j]) {
            rhs[j] = 0.0;
            continue;
        }
        for (std::size_t m = 0; m < j; ++m)
            if (!dropped[m]) rhs[j] -= g[j * b + m] * rhs[m];
    }
    for (std::size_t j = 0; j < b; ++j)
        if (!dropped[j]) rhs[j] /= g[j * b + j];
    for (std::size_t jj = b; jj-- > 0;) {
        if (dropped[jj]) continue;
        for (std::size_t i = jj + 1; i < b; ++i)
            if (!dropped[i]) rhs[jj] -= g[i * b + jj] * rhs[i];
    }
    return rhs;
}

/// Polynomial least-squares fit in a standardized variable z = (x-shift)/scale.
struct PolyFit {
    double shift = 0.0;
    double scale = 1.0;
    std::vector<double> coef;  // degree = coef.size() - 1, constant first
    double residual_rms = 0.0;

    double eval(double x) const {
        if (coef.empty()) return 0.0;
        const double z = (x - shift) / scale;
        double acc = 0.0, m = 1.0;
        for (double c : coef) {
            acc += c * m;
            m *= z;
        }
        return acc;
    }
    bool empty() const { return coef.empty(); }
};

// Shift/scale for standardized monomials of one node's state column.
inline void column_standardizer(std::span<const double> x, double& shift, double& scale) {
    double s = 0.0;
    for (double v : x) s += v;
    shift = x.empty() ? 0.0 : s / static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x) ss += (v - shift) * (v - shift);
    const double var = x.empty() ? 0.0 : ss / static_cast<double>(x.size());
    scale = var > 1e-24 ? std::sqrt(var) : 1.0;
}

// Accumulator for one node's normal equations with a shared Gram matrix and
// several right-hand sides (conditional expectation targets, field refit,
// martingale-increment targets).
class NodeLS {
  public:
    NodeLS(std::size_t b, std::size_t nrhs) : b_(b), g_(b * b, 0.0), rhs_(nrhs, std::vector<double>(b, 0.0)) {}

    void add(std::span<const double> cols, std::span<const double> targets) {
        for (std::size_t i = 0; i < b_; ++i) {
            for (std::size_t j = 0; j <= i; ++j) g_[i * b_ + j] += cols[i] * cols[j];
        }
        for (std::size_t t = 0; t < targets.size(); ++t) {
            auto& r = rhs_[t];
            for (std::size_t i = 0; i < b_; ++i) r[i] += cols[i] * targets[t];
        }
    }

    void add_rhs(std::size_t t, std::span<const double> cols, double target) {
        auto& r = rhs_[t];
        for (std::size_t i = 0; i < b_; ++i) r[i] += cols[i] * target;
    }

    std::vector<double> solve(std::size_t t) const {
        // symmetrize from the accumulated lower triangle
        std::vector<double> g(b_ * b_, 0.0);
        for (std::size_t i = 0; i < b_; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
                g[i * b_ + j] = g_[i * b_ + j];
                g[j * b_ + i] = g_[i * b_ + j];
            }
        return solve_psd_drop(std::move(g), rhs_[t], b_);
    }

    std::size_t basis_size() const { return b_; }

  private:
    std::size_t b_;
    std::vector<double> g_;
    std::vector<std::vector<double>> rhs_;
};

}  // namespace mfg::detail
