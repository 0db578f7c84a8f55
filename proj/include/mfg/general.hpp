#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mfg/common.hpp"
#include "mfg/solver.hpp"

namespace mfg {

/// Joint sample law of (X_t, A_t) seen by general drivers. Drivers read it
/// through expectations of test functions; the first-moment shortcuts are
/// precomputed once per node.
struct PairLaw {
    std::span<const double> x_atoms;
    std::span<const double> a_atoms;  // empty = identically zero
    double x_mean = 0.0;
    double a_mean = 0.0;
};

using GeneralFn = std::function<double(double t, double x, double y, const PairLaw& law)>;

/// Monotone forward-backward problem data:
///   dX =  G(t, X, Y, L_{(X,A)}) dt + sigma dB
///   dY = -F(t, X, Y, L_{(X,A)}) dt + Z dB,  X_0 = xi,
/// with Lipschitz constant ell and monotonicity constant kappa > K/2 (checked
/// at construction), solved in the discounted norm of weight K.
struct GeneralFbsdeProblem {
    GeneralFn G;
    GeneralFn F_driver;
    double sigma = 1.0;
    Array2D A;  // exogenous adapted paths [N x (M+1)]; empty = zero process
    double K = 0.1;
    double ell = 1.0;
    double kappa = 1.0;
    std::vector<double> xi;

    GeneralFbsdeProblem(GeneralFn g, GeneralFn f, double sigma_, Array2D a, double k_norm,
                        double lipschitz, double monotone, std::vector<double> xi_)
        : G(std::move(g)),
          F_driver(std::move(f)),
          sigma(sigma_),
          A(std::move(a)),
          K(k_norm),
          ell(lipschitz),
          kappa(monotone),
          xi(std::move(xi_)) {
        if (!(K > 0.0)) throw InvalidParameter("norm weight K must be positive");
        if (!(ell > 0.0)) throw InvalidParameter("Lipschitz constant must be positive");
        if (!(kappa > K / 2.0)) throw InvalidConstants("monotonicity requires kappa > K/2");
        if (xi.empty()) throw InvalidParameter("general problem needs initial samples");
        if (!A.empty() && A.rows() != xi.size())
            throw InvalidParameter("exogenous paths must match the particle count");
    }
};

/// Continuation step bound (2 kappa - K) / (3 kappa + 11 ell); positive
/// exactly when kappa > K/2.
inline double delta0(double kappa, double K, double ell) {
    if (!(ell > 0.0)) throw InvalidConstants("delta0 needs ell > 0");
    if (!(kappa > K / 2.0)) throw InvalidConstants("delta0 needs kappa > K/2");
    return (2.0 * kappa - K) / (3.0 * kappa + 11.0 * ell);
}

/// Forward/backward path pair, the argument and value type of the frozen map.
struct PathPair {
    Array2D x, y;
};

/// Sum of discounted squared distances between two path pairs at weight K.
inline double pair_sq_distance(const PathPair& a, const PathPair& b, double K,
                               const TimeGrid& grid) {
    const std::size_t n = a.x.rows();
    Array2D dx(n, grid.nodes()), dy(n, grid.nodes());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k <= grid.M; ++k) {
            dx(i, k) = a.x(i, k) - b.x(i, k);
            dy(i, k) = a.y(i, k) - b.y(i, k);
        }
    return discounted_sq_norm(dx, K, grid).value + discounted_sq_norm(dy, K, grid).value;
}

namespace detail {

// Node-major scratch of an [N x nodes] array, index (k, i) -> k * n + i.
inline std::vector<double> to_node_major(const Array2D& a) {
    std::vector<double> out(a.rows() * a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) out[k * a.rows() + i] = a(i, k);
    return out;
}

// Picard solve of the level-lambda system with optional exogenous sources
// (node-major [nodes x N] layout):
//   dX = [lambda G(t,X,Y,L) - kappa(1-lambda) Y + sf_t] dt + sigma dB
//   dY = -[lambda F(t,X,Y,L) + kappa(1-lambda) X + sb_t] dt + Z dB.
// The pair law is evaluated on the current column during each sweep. Warm
// starts reuse whatever X/Y the bundle already holds.
inline PicardDiagnostics general_picard(const GeneralFbsdeProblem& pb, double lambda,
                                        const std::vector<double>* sf, const std::vector<double>* sb,
                                        const SolverConfig& cfg, PathBundle& bundle, bool warm,
                                        bool extract_z, std::vector<PolyFit>* field_out = nullptr,
                                        std::vector<PolyFit>* z_field_out = nullptr) {
    const std::size_t n = bundle.particles;
    const TimeGrid& g = bundle.grid;
    const std::size_t m = g.M;
    const double dt = g.dt;
    const double K = pb.K;
    const double kap = pb.kappa;

    if (static_cast<std::size_t>(n) * m <= cfg.increment_cache_limit) bundle.brownian.materialize();

    std::vector<double> a_nm;
    if (!pb.A.empty()) a_nm = to_node_major(pb.A);

    if (!warm) {
        for (std::size_t i = 0; i < n; ++i) bundle.X(i, 0) = pb.xi[i];
        bundle.Y.fill(0.0);
    }

    std::vector<double> node_ms_x(g.nodes()), node_ms_y(g.nodes());
    std::vector<double> xbuf, ybuf, dbuf, wbuf;
    std::vector<double> xcur(n), ycur(n);
    const std::size_t kb = 48;
    NodeFitter fitter(cfg.basis_degree);
    PicardDiagnostics diag;

    std::vector<PolyFit> field(g.nodes()), z_field(g.nodes());

    auto law_at = [&](std::size_t k, std::span<const double> xcol) {
        PairLaw law;
        law.x_atoms = xcol;
        double mx = 0.0;
        for (double v : xcol) mx += v;
        law.x_mean = mx / static_cast<double>(n);
        if (!a_nm.empty()) {
            law.a_atoms = std::span<const double>(&a_nm[k * n], n);
            double ma = 0.0;
            for (double v : law.a_atoms) ma += v;
            law.a_mean = ma / static_cast<double>(n);
        }
        return law;
    };

    for (std::size_t iter = 1; iter <= cfg.max_iters; ++iter) {
        // Forward sweep, node-outer so the pair law reads the current column.
        std::fill(node_ms_x.begin(), node_ms_x.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            bundle.X(i, 0) = pb.xi[i];
            xcur[i] = pb.xi[i];
        }
        for (std::size_t k0 = 0; k0 < m; k0 += kb) {
            const std::size_t k1 = std::min(m, k0 + kb);
            gather_block(bundle.Y, k0, k1, ybuf);
            gather_increments_block(bundle.brownian, k0, k1, dbuf);
            gather_block(bundle.X, k0 + 1, k1 + 1, xbuf);  // previous iterate, for deltas
            wbuf.resize((k1 - k0) * n);
            for (std::size_t k = k0; k < k1; ++k) {
                const auto law = law_at(k, xcur);
                const double t = g.node(k);
                const double* yprev = &ybuf[(k - k0) * n];
                const double* db = &dbuf[(k - k0) * n];
                const double* xold = &xbuf[(k - k0) * n];
                double* w = &wbuf[(k - k0) * n];
                double ms = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    double drift = -kap * (1.0 - lambda) * yprev[i];
                    if (lambda != 0.0) drift += lambda * pb.G(t, xcur[i], yprev[i], law);
                    if (sf) drift += (*sf)[k * n + i];
                    const double xn = xcur[i] + drift * dt + pb.sigma * db[i];
                    ms += (xn - xold[i]) * (xn - xold[i]);
                    w[i] = xn;
                    xcur[i] = xn;
                }
                node_ms_x[k + 1] = ms / static_cast<double>(n);
            }
            scatter_block(bundle.X, k0 + 1, k1 + 1, wbuf);
        }

        // Backward sweep: project, then step the driver with the fitted
        // conditional expectation; sources enter per particle.
        std::fill(node_ms_y.begin(), node_ms_y.end(), 0.0);
        {
            double ms = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                ms += bundle.Y(i, m) * bundle.Y(i, m);
                bundle.Y(i, m) = 0.0;
                ycur[i] = 0.0;
            }
            node_ms_y[m] = ms / static_cast<double>(n);
        }
        std::size_t k0 = (m / kb) * kb;
        while (true) {
            const std::size_t k1 = std::min(m, k0 + kb);
            if (k1 > k0) {
                gather_block(bundle.X, k0, k1, xbuf);
                gather_block(bundle.Y, k0, k1, ybuf);
                for (std::size_t k = k1; k-- > k0;) {
                    const double* xc = &xbuf[(k - k0) * n];
                    double* yc = &ybuf[(k - k0) * n];
                    const auto law = law_at(k, std::span<const double>(xc, n));
                    const double t = g.node(k);
                    fitter.reset(std::span<const double>(xc, n));
                    for (std::size_t i = 0; i < n; ++i) fitter.add(xc[i], ycur[i]);
                    PolyFit cond = fitter.solve(n);
                    double ms = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        const double yhat = cond.eval(xc[i]);
                        double drv = kap * (1.0 - lambda) * xc[i];
                        if (lambda != 0.0) drv += lambda * pb.F_driver(t, xc[i], yhat, law);
                        if (sb) drv += (*sb)[k * n + i];
                        const double yn = yhat + dt * drv;
                        ms += (yn - yc[i]) * (yn - yc[i]);
                        yc[i] = yn;
                        ycur[i] = yn;
                    }
                    node_ms_y[k] = ms / static_cast<double>(n);
                    field[k] = cond;
                }
                scatter_block(bundle.Y, k0, k1, ybuf);
            }
            if (k0 == 0) break;
            k0 -= kb;
        }

        const double res = std::sqrt(combine_discounted(node_ms_x, K, g) +
                                     combine_discounted(node_ms_y, K, g));
        diag.residuals.push_back(res);
        diag.iterations = iter;
        if (res < cfg.picard_tol && iter >= 2) break;
        if (iter == cfg.max_iters)
            throw NoConvergence("level solve exceeded max_iters", diag.residuals, lambda);
    }

    if (extract_z) {
        bundle.Z = Array2D(n, g.nodes());
        std::vector<double> ynext(n);
        std::size_t k0 = (m / kb) * kb;
        while (true) {
            const std::size_t k1 = std::min(m, k0 + kb);
            if (k1 > k0) {
                gather_block(bundle.X, k0, k1, xbuf);
                gather_block(bundle.Y, k0, k1 + 1, ybuf);
                gather_increments_block(bundle.brownian, k0, k1, dbuf);
                for (std::size_t k = k1; k-- > k0;) {
                    const double* xc = &xbuf[(k - k0) * n];
                    const double* db = &dbuf[(k - k0) * n];
                    for (std::size_t i = 0; i < n; ++i) ynext[i] = ybuf[(k + 1 - k0) * n + i];
                    fitter.reset(std::span<const double>(xc, n));
                    for (std::size_t i = 0; i < n; ++i) fitter.add(xc[i], ynext[i]);
                    PolyFit cond = fitter.solve(n);
                    fitter.clear_rhs();
                    for (std::size_t i = 0; i < n; ++i)
                        fitter.add_rhs(xc[i], (ynext[i] - cond.eval(xc[i])) * db[i] / dt);
                    z_field[k] = fitter.solve(n);
                    for (std::size_t i = 0; i < n; ++i) bundle.Z(i, k) = z_field[k].eval(xc[i]);
                }
            }
            if (k0 == 0) break;
            k0 -= kb;
        }
        for (std::size_t i = 0; i < n; ++i) bundle.Z(i, m) = 0.0;
    }

    if (field_out) *field_out = std::move(field);
    if (z_field_out) *z_field_out = std::move(z_field);
    return diag;
}

}  // namespace detail

/// One application of the frozen-coefficient contraction map: solve the
/// level-lambda0 system with the frozen pair's delta-scaled drivers added as
/// exogenous sources, warm-starting from the frozen pair itself.
struct FrozenMapResult {
    PathPair out;
    std::vector<double> residual_history;
    std::size_t iterations = 0;
};

inline FrozenMapResult frozen_map_phi(const GeneralFbsdeProblem& pb, const PathPair& frozen,
                                      double lambda0, double delta, const Array2D& phi,
                                      const Array2D& psi, const SolverConfig& cfg) {
    const std::size_t n = pb.xi.size();
    const TimeGrid& g = cfg.grid;
    if (!(lambda0 >= 0.0) || lambda0 >= 1.0) throw InvalidParameter("lambda0 must lie in [0, 1)");
    const double d0 = delta0(pb.kappa, pb.K, pb.ell);
    if (!(delta >= 0.0) || delta > d0 + 1e-12)
        throw InvalidParameter("delta must lie in [0, delta0]");
    if (frozen.x.rows() != n || frozen.x.cols() != g.nodes() || frozen.y.rows() != n ||
        frozen.y.cols() != g.nodes())
        throw InvalidParameter("frozen paths must match particles x nodes");

    std::vector<double> a_nm;
    if (!pb.A.empty()) a_nm = detail::to_node_major(pb.A);

    // Exogenous sources from the frozen pair (node-major).
    std::vector<double> sf(g.nodes() * n, 0.0), sb(g.nodes() * n, 0.0);
    std::vector<double> xcol(n);
    for (std::size_t k = 0; k <= g.M; ++k) {
        for (std::size_t i = 0; i < n; ++i) xcol[i] = frozen.x(i, k);
        PairLaw law;
        law.x_atoms = xcol;
        double mx = 0.0;
        for (double v : xcol) mx += v;
        law.x_mean = mx / static_cast<double>(n);
        if (!a_nm.empty()) {
            law.a_atoms = std::span<const double>(&a_nm[k * n], n);
            double ma = 0.0;
            for (double v : law.a_atoms) ma += v;
            law.a_mean = ma / static_cast<double>(n);
        }
        const double t = g.node(k);
        for (std::size_t i = 0; i < n; ++i) {
            const double fx = frozen.x(i, k), fy = frozen.y(i, k);
            if (delta != 0.0) {
                sf[k * n + i] = delta * (pb.G(t, fx, fy, law) + pb.kappa * fy);
                sb[k * n + i] = delta * (pb.F_driver(t, fx, fy, law) - pb.kappa * fx);
            }
            if (!phi.empty()) sf[k * n + i] += phi(i, k);
            if (!psi.empty()) sb[k * n + i] += psi(i, k);
        }
    }

    PathBundle bundle(g, n, cfg.seed);
    bundle.X = frozen.x;
    bundle.Y = frozen.y;
    auto diag = detail::general_picard(pb, lambda0, &sf, &sb, cfg, bundle, /*warm=*/true,
                                       /*extract_z=*/false);
    FrozenMapResult out;
    out.out.x = std::move(bundle.X);
    out.out.y = std::move(bundle.Y);
    out.residual_history = std::move(diag.residuals);
    out.iterations = diag.iterations;
    return out;
}

/// Homotopy solve of the full problem: start from the linear level-0 system,
/// advance lambda in steps bounded by delta0, iterating the frozen map to its
/// fixed point at each step, and polish at level 1.
struct ContinuationSolution {
    PathBundle bundle;
    std::vector<PolyFit> field, z_field;
    std::vector<double> lambda_levels;  // levels visited after 0
    std::vector<double> residual_history;
    std::size_t iterations = 0;
};

inline ContinuationSolution continuation_solve(const GeneralFbsdeProblem& pb,
                                               const SolverConfig& cfg) {
    const std::size_t n = pb.xi.size();
    cfg.validate(n);
    const TimeGrid& g = cfg.grid;
    const double d0 = delta0(pb.kappa, pb.K, pb.ell);

    std::vector<double> levels = cfg.lambda_steps;
    if (levels.empty()) {
        const auto nsteps = static_cast<std::size_t>(std::ceil(1.0 / d0 - 1e-12));
        for (std::size_t j = 1; j <= nsteps; ++j)
            levels.push_back(static_cast<double>(j) / static_cast<double>(nsteps));
    } else {
        double prev = 0.0;
        for (double l : levels) {
            if (!(l > prev) || l > 1.0 + 1e-12) throw InvalidParameter("lambda ladder must increase to 1");
            if (l - prev > d0 + 1e-12) throw InvalidParameter("lambda step exceeds delta0");
            prev = l;
        }
        if (std::abs(levels.back() - 1.0) > 1e-12) throw InvalidParameter("lambda ladder must end at 1");
    }

    ContinuationSolution sol;
    sol.bundle = PathBundle(g, n, cfg.seed);
    sol.lambda_levels = levels;

    // Level-0 base: the explicitly stabilized linear system.
    auto diag0 = detail::general_picard(pb, 0.0, nullptr, nullptr, cfg, sol.bundle,
                                        /*warm=*/false, /*extract_z=*/false);
    sol.residual_history = diag0.residuals;
    sol.iterations = diag0.iterations;

    PathPair cur{sol.bundle.X, sol.bundle.Y};
    Array2D no_source;
    // Inner solves run an order tighter than the outer fixed-point check so the
    // contraction iteration does not stall on inner noise.
    SolverConfig inner_cfg = cfg;
    inner_cfg.picard_tol = 0.1 * cfg.picard_tol;
    double lam_prev = 0.0;
    for (double lam : levels) {
        const double step = lam - lam_prev;
        double dist = 0.0;
        bool ok = false;
        for (std::size_t it = 0; it < cfg.max_iters; ++it) {
            auto mapped = frozen_map_phi(pb, cur, lam_prev, step, no_source, no_source, inner_cfg);
            dist = std::sqrt(pair_sq_distance(mapped.out, cur, pb.K, g));
            cur = std::move(mapped.out);
            sol.residual_history.push_back(dist);
            sol.iterations += mapped.iterations;
            if (dist < cfg.picard_tol) {
                ok = true;
                break;
            }
        }
        if (!ok)
            throw NoConvergence("continuation step failed to reach its fixed point",
                                sol.residual_history, lam);
        lam_prev = lam;
    }

    // Polish directly at level 1 and extract the martingale component.
    sol.bundle.X = std::move(cur.x);
    sol.bundle.Y = std::move(cur.y);
    auto diag1 = detail::general_picard(pb, 1.0, nullptr, nullptr, cfg, sol.bundle, /*warm=*/true,
                                        cfg.extract_z, &sol.field, &sol.z_field);
    for (double rv : diag1.residuals) sol.residual_history.push_back(rv);
    sol.iterations += diag1.iterations;
    return sol;
}

}  // namespace mfg
