#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mfg/common.hpp"
#include "mfg/detail/parallel.hpp"
#include "mfg/detail/regression.hpp"
#include "mfg/measure.hpp"
#include "mfg/model.hpp"
#include "mfg/paths.hpp"

namespace mfg {

using detail::PolyFit;
using MeasureFlow = std::vector<EmpiricalMeasure>;

/// Knobs shared by every coupled solve. The particle count is taken from the
/// initial-sample array at solve time; `particles` here is what the harness
/// uses to draw those samples.
struct SolverConfig {
    TimeGrid grid;
    std::size_t particles = 1000;
    std::uint64_t seed = 1;
    int basis_degree = 3;       // polynomial degree of conditional-expectation fits
    double picard_tol = 1e-5;   // stopping threshold on discounted-norm deltas
    std::size_t max_iters = 60;
    double damping = 0.5;       // measure-flow relaxation, in (0, 1]
    std::vector<double> lambda_steps;  // optional explicit continuation ladder
    int threads = 1;            // worker count; results are worker-count invariant
    int state_basis_degree = 2; // x-part degree in variation-system regressions
    std::size_t mu_subsample = 0;  // 0 = full ensemble in cross-particle expectations
    bool terminal_bootstrap = false;
    bool extract_z = true;
    std::size_t increment_cache_limit = 50'000'000;  // doubles; above this, regenerate on the fly

    void validate(std::size_t n_particles) const {
        if (!(picard_tol > 0.0)) throw InvalidParameter("picard_tol must be positive");
        if (!(damping > 0.0) || damping > 1.0) throw InvalidParameter("damping must lie in (0, 1]");
        if (basis_degree < 0 || basis_degree > 8) throw InvalidParameter("basis_degree out of range");
        if (max_iters < 1) throw InvalidParameter("max_iters must be >= 1");
        if (n_particles < static_cast<std::size_t>(basis_degree) + 2)
            throw InvalidParameter("need at least basis_degree + 2 particles");
        if (grid.M < 1) throw InvalidParameter("empty time grid");
    }
};

/// Converged population system: paths, per-node law of X, and the per-node
/// polynomial decoupling field y = u(t_k, x) with its refit residual.
struct EquilibriumSolution {
    PathBundle bundle;
    MeasureFlow measure_flow;           // nodes() entries; law of each X column
    std::vector<PolyFit> field;         // y = u(t_k, x)
    std::vector<PolyFit> z_field;       // z = v(t_k, x) from martingale-increment fits
    std::vector<double> residual_history;
    std::size_t iterations = 0;
};

/// Tagged-player solve against a frozen population flow.
struct RepresentativeSolution {
    PathBundle bundle;
    std::vector<PolyFit> field;
    std::vector<PolyFit> z_field;
    std::vector<double> residual_history;
    std::size_t iterations = 0;
    double y0 = 0.0;  // start-point value of the backward component
};

namespace detail {

// Gather columns [k0, k1) of src into buf[(k - k0) * N + i]; sequential reads.
inline void gather_block(const Array2D& src, std::size_t k0, std::size_t k1, std::vector<double>& buf) {
    const std::size_t n = src.rows(), kb = k1 - k0;
    buf.resize(kb * n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = src.row(i);
        for (std::size_t k = k0; k < k1; ++k) buf[(k - k0) * n + i] = row[k];
    }
}

inline void scatter_block(Array2D& dst, std::size_t k0, std::size_t k1, const std::vector<double>& buf) {
    const std::size_t n = dst.rows();
    for (std::size_t i = 0; i < n; ++i) {
        auto row = dst.row(i);
        for (std::size_t k = k0; k < k1; ++k) row[k] = buf[(k - k0) * n + i];
    }
}

inline void gather_increments_block(const BrownianStream& s, std::size_t k0, std::size_t k1,
                                    std::vector<double>& buf) {
    const std::size_t n = s.particles(), kb = k1 - k0;
    buf.resize(kb * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = k0; k < k1; ++k) buf[(k - k0) * n + i] = s(i, k);
}

// Discounted trapezoid combination of per-node mean squares.
inline double combine_discounted(std::span<const double> node_ms, double K, const TimeGrid& g) {
    double acc = 0.0;
    for (std::size_t k = 0; k <= g.M; ++k) {
        const double w = (k == 0 || k == g.M) ? 0.5 : 1.0;
        acc += w * std::exp(-K * g.node(k)) * node_ms[k];
    }
    return acc * g.dt;
}

// One-node polynomial fit of targets on standardized monomials of x.
// Returns the conditional-expectation fit; `extra` rhs targets may be solved
// against the same Gram matrix afterwards.
class NodeFitter {
  public:
    NodeFitter(int degree) : b_(static_cast<std::size_t>(degree) + 1), g_(b_ * b_), rhs_(b_) {}

    void reset(std::span<const double> x) {
        column_standardizer(x, shift_, scale_);
        std::fill(g_.begin(), g_.end(), 0.0);
        std::fill(rhs_.begin(), rhs_.end(), 0.0);
        ssq_ = 0.0;
    }

    void add(double x, double target) {
        double cols[16];
        double z = (x - shift_) / scale_, m = 1.0;
        for (std::size_t j = 0; j < b_; ++j) {
            cols[j] = m;
            m *= z;
        }
        for (std::size_t i = 0; i < b_; ++i)
            for (std::size_t j = 0; j <= i; ++j) g_[i * b_ + j] += cols[i] * cols[j];
        for (std::size_t j = 0; j < b_; ++j) rhs_[j] += cols[j] * target;
        ssq_ += target * target;
    }

    PolyFit solve(std::size_t n) const {
        std::vector<double> g(b_ * b_, 0.0);
        for (std::size_t i = 0; i < b_; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
                g[i * b_ + j] = g_[i * b_ + j];
                g[j * b_ + i] = g_[i * b_ + j];
            }
        PolyFit fit;
        fit.shift = shift_;
        fit.scale = scale_;
        fit.coef = solve_psd_drop(std::move(g), rhs_, b_);
        double fitdot = 0.0;
        for (std::size_t j = 0; j < b_; ++j) fitdot += fit.coef[j] * rhs_[j];
        fit.residual_rms = std::sqrt(std::max(0.0, ssq_ - fitdot) / static_cast<double>(std::max<std::size_t>(n, 1)));
        return fit;
    }

    // Reuse the Gram matrix with a fresh rhs (same design, new targets).
    void clear_rhs() {
        std::fill(rhs_.begin(), rhs_.end(), 0.0);
        ssq_ = 0.0;
    }
    void add_rhs(double x, double target) {
        double z = (x - shift_) / scale_, m = 1.0;
        for (std::size_t j = 0; j < b_; ++j) {
            rhs_[j] += m * target;
            m *= z;
        }
        ssq_ += target * target;
    }

  private:
    std::size_t b_;
    std::vector<double> g_, rhs_;
    double shift_ = 0.0, scale_ = 1.0, ssq_ = 0.0;
};

struct PicardDiagnostics {
    std::vector<double> residuals;
    std::size_t iterations = 0;
};

// Forward-Euler / backward-regression Picard for the coupled system
//   dX =  dH_y(X, mu_t, Y) dt + dB,
//   dY = -[dH_x(X, mu_t, Y) - r Y] dt + Z dB,  X_0 given, Y_M = terminal,
// where mu_t is either self-consistent (own_flow, damped update on sorted
// atoms) or frozen (population flow of an already-solved system). Convergence
// is measured by discounted-norm deltas of successive (X, Y) at weight r.
inline PicardDiagnostics mfg_picard(const HamiltonianModel& model, std::span<const double> x0,
                                    const SolverConfig& cfg, PathBundle& bundle,
                                    MeasureFlow* own_flow, const MeasureFlow* frozen_flow,
                                    std::vector<PolyFit>& field, std::vector<PolyFit>& z_field,
                                    const PolyFit* terminal_map = nullptr) {
    const std::size_t n = bundle.particles;
    const TimeGrid& g = bundle.grid;
    const std::size_t m = g.M;
    const double dt = g.dt;
    const double r = model.r;
    const MeasureFlow& flow = own_flow ? *own_flow : *frozen_flow;

    if (static_cast<std::size_t>(n) * m <= cfg.increment_cache_limit) bundle.brownian.materialize();

    for (std::size_t i = 0; i < n; ++i) bundle.X(i, 0) = x0[i];

    field.assign(g.nodes(), PolyFit{});
    z_field.assign(g.nodes(), PolyFit{});

    std::vector<double> node_ms_x(g.nodes()), node_ms_y(g.nodes());
    std::vector<double> xbuf, ybuf, dbuf, sorted_col;
    const std::size_t kb = 48;  // nodes per gathered block

    PicardDiagnostics diag;
    NodeFitter fitter(cfg.basis_degree);

    for (std::size_t iter = 1; iter <= cfg.max_iters; ++iter) {
        // Forward sweep: previous field supplies Y; per-particle streams keep
        // this loop embarrassingly parallel over fixed particle chunks.
        std::fill(node_ms_x.begin(), node_ms_x.end(), 0.0);
        const std::size_t nchunks = chunk_count(n);
        std::vector<std::vector<double>> chunk_ms(nchunks);
        parallel_chunks(n, cfg.threads, [&](std::size_t c, std::size_t lo, std::size_t hi) {
            auto& ms = chunk_ms[c];
            ms.assign(g.nodes(), 0.0);
            for (std::size_t i = lo; i < hi; ++i) {
                double x = bundle.X(i, 0);
                for (std::size_t k = 0; k < m; ++k) {
                    const double y = field[k].empty() ? 0.0 : field[k].eval(x);
                    const double xn = x + model.dH_y(x, flow[k], y) * dt + bundle.brownian(i, k);
                    const double old = bundle.X(i, k + 1);
                    ms[k + 1] += (xn - old) * (xn - old);
                    bundle.X(i, k + 1) = xn;
                    x = xn;
                }
            }
        });
        for (std::size_t c = 0; c < nchunks; ++c)
            for (std::size_t k = 0; k <= m; ++k) node_ms_x[k] += chunk_ms[c][k];
        for (std::size_t k = 0; k <= m; ++k) node_ms_x[k] /= static_cast<double>(n);

        // Measure-flow update: relax toward the new empirical law along the
        // sorted-atom (co-monotone) coupling. Frozen-flow solves skip this.
        if (own_flow) {
            const double theta = cfg.damping;
            for (std::size_t k0 = 0; k0 <= m; k0 += kb) {
                const std::size_t k1 = std::min(m + 1, k0 + kb);
                gather_block(bundle.X, k0, k1, xbuf);
                for (std::size_t k = k0; k < k1; ++k) {
                    sorted_col.assign(xbuf.begin() + (k - k0) * n, xbuf.begin() + (k - k0 + 1) * n);
                    std::sort(sorted_col.begin(), sorted_col.end());
                    const auto& old_atoms = (*own_flow)[k].atoms();
                    double mean = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        sorted_col[i] = (1.0 - theta) * old_atoms[i] + theta * sorted_col[i];
                        mean += sorted_col[i];
                    }
                    (*own_flow)[k].assign(sorted_col, mean / static_cast<double>(n));
                }
            }
        }

        // Backward sweep in gathered blocks: project Y_{k+1} on the basis in
        // X_k, step the driver explicitly, refit the field on the same Gram.
        std::fill(node_ms_y.begin(), node_ms_y.end(), 0.0);
        std::vector<double> ycur(n);
        {
            double ms = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double yterm = terminal_map ? terminal_map->eval(bundle.X(i, m)) : 0.0;
                const double old = bundle.Y(i, m);
                ms += (yterm - old) * (yterm - old);
                bundle.Y(i, m) = yterm;
                ycur[i] = yterm;
            }
            node_ms_y[m] = ms / static_cast<double>(n);
        }
        if (terminal_map) field[m] = *terminal_map;

        std::size_t k0 = (m / kb) * kb;
        while (true) {
            const std::size_t k1 = std::min(m, k0 + kb);  // columns [k0, k1) of X needed
            if (k1 > k0) {
                gather_block(bundle.X, k0, k1, xbuf);
                gather_block(bundle.Y, k0, k1, ybuf);
                for (std::size_t k = k1; k-- > k0;) {
                    const double* xc = &xbuf[(k - k0) * n];
                    double* yc = &ybuf[(k - k0) * n];
                    fitter.reset(std::span<const double>(xc, n));
                    for (std::size_t i = 0; i < n; ++i) fitter.add(xc[i], ycur[i]);
                    PolyFit cond = fitter.solve(n);
                    fitter.clear_rhs();
                    double ms = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        const double yhat = cond.eval(xc[i]);
                        const double drv = model.dH_x(xc[i], flow[k], yhat) - r * yhat;
                        const double ynew = yhat + dt * drv;
                        ms += (ynew - yc[i]) * (ynew - yc[i]);
                        fitter.add_rhs(xc[i], ynew);
                        yc[i] = ynew;
                        ycur[i] = ynew;
                    }
                    node_ms_y[k] = ms / static_cast<double>(n);
                    field[k] = fitter.solve(n);
                }
                scatter_block(bundle.Y, k0, k1, ybuf);
            }
            if (k0 == 0) break;
            k0 -= kb;
        }

        const double res = std::sqrt(combine_discounted(node_ms_x, r, g) +
                                     combine_discounted(node_ms_y, r, g));
        diag.residuals.push_back(res);
        diag.iterations = iter;
        if (res < cfg.picard_tol && iter >= 2) break;
        if (iter == cfg.max_iters)
            throw NoConvergence("picard iteration exceeded max_iters", diag.residuals);
    }

    // Martingale-increment extraction: z = fit of the one-step backward
    // residual against dB / dt, as a function of X_k.
    if (cfg.extract_z) {
        bundle.Z = Array2D(n, g.nodes());
        std::vector<double> ynext(n);
        for (std::size_t i = 0; i < n; ++i) bundle.Z(i, m) = 0.0;
        std::size_t k0 = (m / kb) * kb;
        while (true) {
            const std::size_t k1 = std::min(m, k0 + kb);
            if (k1 > k0) {
                gather_block(bundle.X, k0, k1, xbuf);
                gather_block(bundle.Y, k0, k1 + 1, ybuf);  // k+1 targets live in the same block
                gather_increments_block(bundle.brownian, k0, k1, dbuf);
                for (std::size_t k = k1; k-- > k0;) {
                    const double* xc = &xbuf[(k - k0) * n];
                    const double* db = &dbuf[(k - k0) * n];
                    for (std::size_t i = 0; i < n; ++i) ynext[i] = ybuf[(k + 1 - k0) * n + i];
                    fitter.reset(std::span<const double>(xc, n));
                    for (std::size_t i = 0; i < n; ++i) fitter.add(xc[i], ynext[i]);
                    PolyFit cond = fitter.solve(n);
                    fitter.clear_rhs();
                    for (std::size_t i = 0; i < n; ++i) {
                        const double resid = ynext[i] - cond.eval(xc[i]);
                        fitter.add_rhs(xc[i], resid * db[i] / dt);
                    }
                    z_field[k] = fitter.solve(n);
                    for (std::size_t i = 0; i < n; ++i) bundle.Z(i, k) = z_field[k].eval(xc[i]);
                }
            }
            if (k0 == 0) break;
            k0 -= kb;
        }
    }
    return diag;
}

}  // namespace detail

/// Solve the coupled population system: outer damped measure-flow iteration
/// fused with forward-Euler / backward-regression sweeps. Converged when
/// successive (X, Y) move less than picard_tol in the discounted norm at
/// weight r.
inline EquilibriumSolution solve_equilibrium(const HamiltonianModel& model,
                                             std::span<const double> xi_samples,
                                             const SolverConfig& cfg) {
    const std::size_t n = xi_samples.size();
    if (n == 0) throw InvalidParameter("solve_equilibrium needs initial samples");
    cfg.validate(n);

    EquilibriumSolution sol;
    sol.bundle = PathBundle(cfg.grid, n, cfg.seed);

    // Initial flow: the law of xi at every node; initial field: zero.
    std::vector<double> xi_sorted(xi_samples.begin(), xi_samples.end());
    std::sort(xi_sorted.begin(), xi_sorted.end());
    double xi_mean = 0.0;
    for (double v : xi_sorted) xi_mean += v;
    xi_mean /= static_cast<double>(n);
    sol.measure_flow.assign(cfg.grid.nodes(), EmpiricalMeasure(xi_sorted));

    auto diag = detail::mfg_picard(model, xi_samples, cfg, sol.bundle, &sol.measure_flow, nullptr,
                                   sol.field, sol.z_field);

    if (cfg.terminal_bootstrap) {
        // One stationary bootstrap round: reuse the early-time decoupling
        // field as the terminal map and re-solve.
        const std::size_t kstar = cfg.grid.node_at(std::min(1.0, cfg.grid.T / 2.0));
        const PolyFit boot = sol.field[kstar];
        auto diag2 = detail::mfg_picard(model, xi_samples, cfg, sol.bundle, &sol.measure_flow,
                                        nullptr, sol.field, sol.z_field, &boot);
        diag.residuals.insert(diag.residuals.end(), diag2.residuals.begin(), diag2.residuals.end());
        diag.iterations += diag2.iterations;
    }

    // Final sync: the stored flow is exactly the empirical law of each column.
    std::vector<double> col(n);
    for (std::size_t k = 0; k <= cfg.grid.M; ++k) {
        for (std::size_t i = 0; i < n; ++i) col[i] = sol.bundle.X(i, k);
        std::sort(col.begin(), col.end());
        double mean = 0.0;
        for (double v : col) mean += v;
        sol.measure_flow[k].assign(col, mean / static_cast<double>(n));
    }

    sol.residual_history = std::move(diag.residuals);
    sol.iterations = diag.iterations;
    return sol;
}

/// Solve the tagged-player system at start state x against the frozen
/// population flow of `eq`, using the same Brownian streams. Returns the
/// start-point backward value Y_0 (constant across particles up to the
/// regression residual) as `y0`.
inline RepresentativeSolution solve_representative(const HamiltonianModel& model, double x,
                                                   const EquilibriumSolution& eq,
                                                   const SolverConfig& cfg) {
    const std::size_t n = eq.bundle.particles;
    cfg.validate(n);
    if (eq.measure_flow.size() != cfg.grid.nodes())
        throw InvalidParameter("equilibrium flow does not match the requested grid");

    RepresentativeSolution sol;
    sol.bundle = PathBundle(cfg.grid, n, cfg.seed);
    std::vector<double> x0(n, x);
    auto diag = detail::mfg_picard(model, x0, cfg, sol.bundle, nullptr, &eq.measure_flow,
                                   sol.field, sol.z_field);
    sol.residual_history = std::move(diag.residuals);
    sol.iterations = diag.iterations;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += sol.bundle.Y(i, 0);
    sol.y0 = acc / static_cast<double>(n);
    return sol;
}

/// Discounted quadrature of the optimized running cost F = H - y dH_y along
/// representative paths, with the truncation tail estimate reported.
struct ValueEstimate {
    double value = 0.0;
    double tail_bound = 0.0;
};

inline ValueEstimate value_v(const HamiltonianModel& model, double /*x*/,
                             const EquilibriumSolution& eq, const PathBundle& rep_bundle,
                             const SolverConfig& /*cfg*/) {
    const std::size_t n = rep_bundle.particles;
    const TimeGrid& g = rep_bundle.grid;
    const double r = model.r;
    double acc = 0.0;
    double f_last = 0.0;
    for (std::size_t k = 0; k <= g.M; ++k) {
        double fk = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            fk += model.running_cost_F(rep_bundle.X(i, k), eq.measure_flow[k], rep_bundle.Y(i, k));
        fk /= static_cast<double>(n);
        const double w = (k == 0 || k == g.M) ? 0.5 : 1.0;
        acc += w * std::exp(-r * g.node(k)) * fk;
        if (k == g.M) f_last = fk;
    }
    ValueEstimate out;
    out.value = acc * g.dt;
    out.tail_bound = std::exp(-r * g.T) * std::abs(f_last) / r;
    return out;
}

}  // namespace mfg
