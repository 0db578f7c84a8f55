#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mfg/common.hpp"
#include "mfg/solver.hpp"

namespace mfg {

namespace detail {

// Columns of the tracked external arrays for the node being processed.
struct BlockCols {
    std::array<const double*, 8> col{};
    const double* operator[](std::size_t s) const { return col[s]; }
};

// Linear forward-backward system along frozen base paths:
//   dU_c =  fdrift_c(U, V) dt                     U_c(0) given
//   dV_c = -[bdrift_c(U, V)] dt + dZ_c dB         V_c(M) = 0
// for c < dim (dim 1 or 2). Cross-particle expectations are handled by the
// caller through `prepare`, which runs once per node before the drifts and
// sees the current forward ensemble. Conditional expectations regress on
// standardized monomials of the component's base path times {1, U_0[, U_1]},
// optionally split into two groups (an initial-condition indicator).
struct LinearSpec {
    int dim = 1;
    std::size_t n = 0;
    const TimeGrid* grid = nullptr;
    double r = 0.0;
    int xdeg = 2;
    std::vector<const Array2D*> tracked;
    std::array<std::size_t, 2> reg_slot{0, 0};
    std::array<const std::vector<std::uint8_t>*, 2> split{{nullptr, nullptr}};
    std::function<void(std::size_t k, const BlockCols& view, const std::array<const double*, 2>& u)>
        prepare;
    std::function<double(int c, std::size_t k, std::size_t i, const BlockCols& view,
                         const double* u, const double* v)>
        fdrift;
    std::function<double(int c, std::size_t k, std::size_t i, const BlockCols& view,
                         const double* u, const double* vhat)>
        bdrift;
    std::function<double(int c, std::size_t i)> init;
};

struct LinearSolution {
    std::vector<Array2D> U, V, Z;  // dim entries each; Z filled only on request
    std::vector<double> residual_history;
    std::size_t iterations = 0;
};

// Least-squares fit with columns phi_j(z) * s_q, s = (1, u0[, u1]), grouped.
class AffineStateFitter {
  public:
    AffineStateFitter(int xdeg, int nstates, int ngroups)
        : nb_((static_cast<std::size_t>(xdeg) + 1) * (static_cast<std::size_t>(nstates) + 1)),
          nx_(static_cast<std::size_t>(xdeg) + 1),
          ns_(static_cast<std::size_t>(nstates) + 1),
          ngroups_(ngroups),
          gram_(ngroups, std::vector<double>(nb_ * nb_, 0.0)),
          rhs_(ngroups, std::vector<double>(nb_, 0.0)),
          coef_(ngroups) {}

    void reset(std::span<const double> x) {
        column_standardizer(x, shift_, scale_);
        for (auto& g : gram_) std::fill(g.begin(), g.end(), 0.0);
        for (auto& r : rhs_) std::fill(r.begin(), r.end(), 0.0);
    }

    void cols(double x, const double* u, double* out) const {
        const double z = (x - shift_) / scale_;
        double m = 1.0;
        for (std::size_t j = 0; j < nx_; ++j) {
            for (std::size_t q = 0; q < ns_; ++q) out[j * ns_ + q] = m * (q == 0 ? 1.0 : u[q - 1]);
            m *= z;
        }
    }

    void add(double x, const double* u, double target, int group) {
        double c[24];
        cols(x, u, c);
        auto& g = gram_[group];
        auto& r = rhs_[group];
        for (std::size_t i = 0; i < nb_; ++i) {
            for (std::size_t j = 0; j <= i; ++j) g[i * nb_ + j] += c[i] * c[j];
            r[i] += c[i] * target;
        }
    }

    void solve_all() {
        for (int gr = 0; gr < ngroups_; ++gr) {
            std::vector<double> g(nb_ * nb_, 0.0);
            for (std::size_t i = 0; i < nb_; ++i)
                for (std::size_t j = 0; j <= i; ++j) {
                    g[i * nb_ + j] = gram_[gr][i * nb_ + j];
                    g[j * nb_ + i] = gram_[gr][i * nb_ + j];
                }
            coef_[gr] = solve_psd_drop(std::move(g), rhs_[gr], nb_);
        }
    }

    double predict(double x, const double* u, int group) const {
        double c[24];
        cols(x, u, c);
        double acc = 0.0;
        for (std::size_t i = 0; i < nb_; ++i) acc += coef_[group][i] * c[i];
        return acc;
    }

  private:
    std::size_t nb_, nx_, ns_;
    int ngroups_;
    std::vector<std::vector<double>> gram_, rhs_;
    std::vector<std::vector<double>> coef_;
    double shift_ = 0.0, scale_ = 1.0;
};

inline LinearSolution solve_linear_fbsde(const LinearSpec& spec, const SolverConfig& cfg,
                                         bool extract_z = false,
                                         const BrownianStream* noise = nullptr) {
    const std::size_t n = spec.n;
    const TimeGrid& g = *spec.grid;
    const std::size_t m = g.M;
    const double dt = g.dt;
    const int dim = spec.dim;
    const std::size_t kb = 48;

    LinearSolution sol;
    sol.U.assign(dim, Array2D(n, g.nodes()));
    sol.V.assign(dim, Array2D(n, g.nodes()));
    for (int c = 0; c < dim; ++c)
        for (std::size_t i = 0; i < n; ++i) sol.U[c](i, 0) = spec.init(c, i);

    const std::size_t nt = spec.tracked.size();
    std::vector<std::vector<double>> tbuf(nt);
    std::vector<std::vector<double>> vbuf(dim), ubuf(dim), wbuf(dim);
    std::vector<std::vector<double>> ucur(dim, std::vector<double>(n)), vcur(dim, std::vector<double>(n));
    std::vector<double> node_ms(g.nodes());
    std::vector<std::vector<double>> vhat(dim, std::vector<double>(n));

    std::vector<AffineStateFitter> fitters;
    for (int c = 0; c < dim; ++c)
        fitters.emplace_back(spec.xdeg, dim, spec.split[c] ? 2 : 1);

    auto view_at = [&](std::size_t k, std::size_t k0) {
        BlockCols v;
        for (std::size_t s = 0; s < nt; ++s) v.col[s] = &tbuf[s][(k - k0) * n];
        return v;
    };

    std::vector<double> resid_hist;
    std::size_t iters = 0;
    for (std::size_t iter = 1; iter <= cfg.max_iters; ++iter) {
        double delta_sq = 0.0;

        // Forward sweep (node-outer; the prepare hook sees current columns).
        for (int c = 0; c < dim; ++c)
            for (std::size_t i = 0; i < n; ++i) ucur[c][i] = sol.U[c](i, 0);
        std::fill(node_ms.begin(), node_ms.end(), 0.0);
        for (std::size_t k0 = 0; k0 < m; k0 += kb) {
            const std::size_t k1 = std::min(m, k0 + kb);
            for (std::size_t s = 0; s < nt; ++s) gather_block(*spec.tracked[s], k0, k1, tbuf[s]);
            for (int c = 0; c < dim; ++c) {
                gather_block(sol.V[c], k0, k1, vbuf[c]);
                gather_block(sol.U[c], k0 + 1, k1 + 1, ubuf[c]);
                wbuf[c].resize((k1 - k0) * n);
            }
            for (std::size_t k = k0; k < k1; ++k) {
                const auto view = view_at(k, k0);
                std::array<const double*, 2> up{ucur[0].data(),
                                                dim > 1 ? ucur[1].data() : nullptr};
                if (spec.prepare) spec.prepare(k, view, up);
                for (std::size_t i = 0; i < n; ++i) {
                    double u[2] = {ucur[0][i], dim > 1 ? ucur[1][i] : 0.0};
                    double v[2] = {vbuf[0][(k - k0) * n + i],
                                   dim > 1 ? vbuf[1][(k - k0) * n + i] : 0.0};
                    for (int c = 0; c < dim; ++c) {
                        const double un = u[c] + dt * spec.fdrift(c, k, i, view, u, v);
                        const double old = ubuf[c][(k - k0) * n + i];
                        node_ms[k + 1] += (un - old) * (un - old);
                        wbuf[c][(k - k0) * n + i] = un;
                    }
                }
                for (int c = 0; c < dim; ++c)
                    for (std::size_t i = 0; i < n; ++i) ucur[c][i] = wbuf[c][(k - k0) * n + i];
            }
            for (int c = 0; c < dim; ++c) scatter_block(sol.U[c], k0 + 1, k1 + 1, wbuf[c]);
        }
        for (std::size_t k = 0; k <= m; ++k) node_ms[k] /= static_cast<double>(n);
        delta_sq += combine_discounted(node_ms, spec.r, g);

        // Backward sweep.
        std::fill(node_ms.begin(), node_ms.end(), 0.0);
        for (int c = 0; c < dim; ++c)
            for (std::size_t i = 0; i < n; ++i) {
                node_ms[m] += sol.V[c](i, m) * sol.V[c](i, m);
                sol.V[c](i, m) = 0.0;
                vcur[c][i] = 0.0;
            }
        std::size_t k0 = (m / kb) * kb;
        while (true) {
            const std::size_t k1 = std::min(m, k0 + kb);
            if (k1 > k0) {
                for (std::size_t s = 0; s < nt; ++s) gather_block(*spec.tracked[s], k0, k1, tbuf[s]);
                for (int c = 0; c < dim; ++c) {
                    gather_block(sol.U[c], k0, k1, ubuf[c]);
                    gather_block(sol.V[c], k0, k1, vbuf[c]);
                }
                for (std::size_t k = k1; k-- > k0;) {
                    const auto view = view_at(k, k0);
                    std::array<const double*, 2> up{&ubuf[0][(k - k0) * n],
                                                    dim > 1 ? &ubuf[1][(k - k0) * n] : nullptr};
                    if (spec.prepare) spec.prepare(k, view, up);
                    for (int c = 0; c < dim; ++c) {
                        auto& fit = fitters[c];
                        const double* xr = view[spec.reg_slot[c]];
                        fit.reset(std::span<const double>(xr, n));
                        for (std::size_t i = 0; i < n; ++i) {
                            double u[2] = {up[0][i], dim > 1 ? up[1][i] : 0.0};
                            const int grp = spec.split[c] ? (*spec.split[c])[i] : 0;
                            fit.add(xr[i], u, vcur[c][i], grp);
                        }
                        fit.solve_all();
                        for (std::size_t i = 0; i < n; ++i) {
                            double u[2] = {up[0][i], dim > 1 ? up[1][i] : 0.0};
                            const int grp = spec.split[c] ? (*spec.split[c])[i] : 0;
                            vhat[c][i] = fit.predict(xr[i], u, grp);
                        }
                    }
                    for (std::size_t i = 0; i < n; ++i) {
                        double u[2] = {up[0][i], dim > 1 ? up[1][i] : 0.0};
                        double vh[2] = {vhat[0][i], dim > 1 ? vhat[1][i] : 0.0};
                        for (int c = 0; c < dim; ++c) {
                            const double vn = vh[c] + dt * spec.bdrift(c, k, i, view, u, vh);
                            const double old = vbuf[c][(k - k0) * n + i];
                            node_ms[k] += (vn - old) * (vn - old);
                            vbuf[c][(k - k0) * n + i] = vn;
                            vcur[c][i] = vn;
                        }
                    }
                }
                for (int c = 0; c < dim; ++c) scatter_block(sol.V[c], k0, k1, vbuf[c]);
            }
            if (k0 == 0) break;
            k0 -= kb;
        }
        for (std::size_t k = 0; k <= m; ++k) node_ms[k] /= static_cast<double>(n);
        delta_sq += combine_discounted(node_ms, spec.r, g);

        const double res = std::sqrt(delta_sq);
        resid_hist.push_back(res);
        iters = iter;
        if (res < cfg.picard_tol && iter >= 2) break;
        if (iter == cfg.max_iters)
            throw NoConvergence("variation-system iteration exceeded max_iters", resid_hist);
    }
    sol.residual_history = std::move(resid_hist);
    sol.iterations = iters;

    // Martingale component per backward equation, from the one-step residual
    // against the driving increments.
    if (extract_z && noise) {
        sol.Z.assign(dim, Array2D(n, g.nodes()));
        std::vector<double> dbuf;
        std::vector<double> vnbuf;
        std::size_t k0 = (m / kb) * kb;
        while (true) {
            const std::size_t k1 = std::min(m, k0 + kb);
            if (k1 > k0) {
                for (std::size_t s = 0; s < nt; ++s) gather_block(*spec.tracked[s], k0, k1, tbuf[s]);
                gather_increments_block(*noise, k0, k1, dbuf);
                for (int c = 0; c < dim; ++c) {
                    gather_block(sol.U[c], k0, k1, ubuf[c]);
                    gather_block(sol.V[c], k0, k1 + 1, vbuf[c]);
                }
                for (std::size_t k = k1; k-- > k0;) {
                    const auto view = view_at(k, k0);
                    for (int c = 0; c < dim; ++c) {
                        auto& fit = fitters[c];
                        const double* xr = view[spec.reg_slot[c]];
                        fit.reset(std::span<const double>(xr, n));
                        vnbuf.assign(&vbuf[c][(k + 1 - k0) * n], &vbuf[c][(k + 1 - k0) * n] + n);
                        for (std::size_t i = 0; i < n; ++i) {
                            double u[2] = {ubuf[0][(k - k0) * n + i],
                                           dim > 1 ? ubuf[1][(k - k0) * n + i] : 0.0};
                            const int grp = spec.split[c] ? (*spec.split[c])[i] : 0;
                            fit.add(xr[i], u, vnbuf[i], grp);
                        }
                        fit.solve_all();
                        AffineStateFitter zfit(spec.xdeg, dim, spec.split[c] ? 2 : 1);
                        zfit.reset(std::span<const double>(xr, n));
                        for (std::size_t i = 0; i < n; ++i) {
                            double u[2] = {ubuf[0][(k - k0) * n + i],
                                           dim > 1 ? ubuf[1][(k - k0) * n + i] : 0.0};
                            const int grp = spec.split[c] ? (*spec.split[c])[i] : 0;
                            const double resid = vnbuf[i] - fit.predict(xr[i], u, grp);
                            zfit.add(xr[i], u, resid * dbuf[(k - k0) * n + i] / dt, grp);
                        }
                        zfit.solve_all();
                        for (std::size_t i = 0; i < n; ++i) {
                            double u[2] = {ubuf[0][(k - k0) * n + i],
                                           dim > 1 ? ubuf[1][(k - k0) * n + i] : 0.0};
                            const int grp = spec.split[c] ? (*spec.split[c])[i] : 0;
                            sol.Z[c](i, k) = zfit.predict(xr[i], u, grp);
                        }
                    }
                }
            }
            if (k0 == 0) break;
            k0 -= kb;
        }
        for (int c = 0; c < dim; ++c)
            for (std::size_t i = 0; i < n; ++i) sol.Z[c](i, m) = 0.0;
    }
    return sol;
}

// Per-node cross-particle coupling state shared by the system builders. For
// kernels that ignore the xtilde argument the expectation collapses to
// kernel(theta_i) * mean(values); otherwise per-particle kernel sums are
// computed over a fixed-stride subsample.
struct CouplingScratch {
    double mean1 = 0.0, mean2 = 0.0;
    std::vector<double> coupF0, coupB0, coupF1, coupB1;
};

inline double col_mean(const double* v, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v[i];
    return s / static_cast<double>(n);
}

}  // namespace detail

/// Directional variation of one system: dX starts at the direction samples
/// (population system) or at zero (tagged player), dY is the matching adjoint.
/// dZ is filled when the solve is asked to extract martingale components.
struct VariationalBundle {
    Array2D dX, dY, dZ;
    std::vector<double> eta;
    std::vector<double> residual_history;
    std::size_t iterations = 0;
};

namespace detail {

// Hooks shared by all variation systems over one model + population flow.
struct VarSystemContext {
    const HamiltonianModel* model;
    const MeasureFlow* flow;
    std::size_t n;
    std::size_t subsample;  // 0 = full ensemble

    double ker_y(double x, const EmpiricalMeasure& mu, double y, double xt) const {
        return model->dH_ymu(x, mu, y, xt);
    }
    double ker_x(double x, const EmpiricalMeasure& mu, double y, double xt) const {
        return model->dH_xmu(x, mu, y, xt);
    }

    // Generic-path sums: coupF/coupB[i] = mean_j K(theta_i, atoms_j) values_j
    // for the y- and x-kernels; two optional (atoms, values) terms.
    void fill_generic(std::size_t k, const double* tx, const double* ty, const double* atoms1,
                      const double* vals1, const double* atoms2, const double* vals2,
                      std::vector<double>& coupF, std::vector<double>& coupB) const {
        const auto& mu = (*flow)[k];
        coupF.assign(n, 0.0);
        coupB.assign(n, 0.0);
        const std::size_t step = subsample == 0 || subsample >= n ? 1 : n / subsample;
        for (std::size_t i = 0; i < n; ++i) {
            double fy = 0.0, fx = 0.0;
            std::size_t cnt = 0;
            for (std::size_t j = 0; j < n; j += step) {
                fy += ker_y(tx[i], mu, ty[i], atoms1[j]) * vals1[j];
                fx += ker_x(tx[i], mu, ty[i], atoms1[j]) * vals1[j];
                if (atoms2) {
                    fy += ker_y(tx[i], mu, ty[i], atoms2[j]) * vals2[j];
                    fx += ker_x(tx[i], mu, ty[i], atoms2[j]) * vals2[j];
                }
                ++cnt;
            }
            coupF[i] = fy / static_cast<double>(cnt);
            coupB[i] = fx / static_cast<double>(cnt);
        }
    }
};

}  // namespace detail

/// Variation of the population system along direction samples eta (aligned
/// with the equilibrium particles: same index, same noise realization).
inline VariationalBundle solve_delta_equilibrium(const HamiltonianModel& model,
                                                 const EquilibriumSolution& eq,
                                                 std::span<const double> eta,
                                                 const SolverConfig& cfg) {
    const std::size_t n = eq.bundle.particles;
    if (eta.size() != n) throw InvalidParameter("eta must align with the equilibrium particles");
    const bool sep = model.mu_kernel_constant_in_xtilde;

    detail::VarSystemContext ctx{&model, &eq.measure_flow, n, cfg.mu_subsample};
    detail::CouplingScratch scratch;
    const auto& flow = eq.measure_flow;

    detail::LinearSpec spec;
    spec.dim = 1;
    spec.n = n;
    spec.grid = &cfg.grid;
    spec.r = model.r;
    spec.xdeg = cfg.state_basis_degree;
    spec.tracked = {&eq.bundle.X, &eq.bundle.Y};
    spec.reg_slot = {0, 0};
    spec.prepare = [&, sep](std::size_t k, const detail::BlockCols& view,
                            const std::array<const double*, 2>& u) {
        if (sep) {
            scratch.mean1 = detail::col_mean(u[0], n);
        } else {
            ctx.fill_generic(k, view[0], view[1], view[0], u[0], nullptr, nullptr, scratch.coupF0,
                             scratch.coupB0);
        }
    };
    spec.fdrift = [&, sep](int, std::size_t k, std::size_t i, const detail::BlockCols& view,
                           const double* u, const double* v) {
        const auto& mu = flow[k];
        const double x = view[0][i], y = view[1][i];
        const double coup = sep ? model.dH_ymu(x, mu, y, 0.0) * scratch.mean1 : scratch.coupF0[i];
        return u[0] * model.dH_xy(x, mu, y) + v[0] * model.dH_yy(x, mu, y) + coup;
    };
    spec.bdrift = [&, sep](int, std::size_t k, std::size_t i, const detail::BlockCols& view,
                           const double* u, const double* vh) {
        const auto& mu = flow[k];
        const double x = view[0][i], y = view[1][i];
        const double coup = sep ? model.dH_xmu(x, mu, y, 0.0) * scratch.mean1 : scratch.coupB0[i];
        return u[0] * model.dH_xx(x, mu, y) + vh[0] * model.dH_xy(x, mu, y) - model.r * vh[0] + coup;
    };
    std::vector<double> eta_copy(eta.begin(), eta.end());
    spec.init = [&eta_copy](int, std::size_t i) { return eta_copy[i]; };

    auto lin = detail::solve_linear_fbsde(spec, cfg, cfg.extract_z, &eq.bundle.brownian);
    VariationalBundle out;
    out.dX = std::move(lin.U[0]);
    out.dY = std::move(lin.V[0]);
    if (!lin.Z.empty()) out.dZ = std::move(lin.Z[0]);
    out.eta = std::move(eta_copy);
    out.residual_history = std::move(lin.residual_history);
    out.iterations = lin.iterations;
    return out;
}

namespace detail {

// Tagged-player variation against a frozen population variation; used by the
// public op below and by the finite-difference experiments that already hold
// a representative solve.
inline VariationalBundle delta_representative_impl(const HamiltonianModel& model,
                                                   const EquilibriumSolution& eq,
                                                   const RepresentativeSolution& rep,
                                                   const VariationalBundle& delta_eq,
                                                   const SolverConfig& cfg) {
    const std::size_t n = eq.bundle.particles;
    const bool sep = model.mu_kernel_constant_in_xtilde;
    VarSystemContext ctx{&model, &eq.measure_flow, n, cfg.mu_subsample};
    CouplingScratch scratch;
    const auto& flow = eq.measure_flow;

    LinearSpec spec;
    spec.dim = 1;
    spec.n = n;
    spec.grid = &cfg.grid;
    spec.r = model.r;
    spec.xdeg = cfg.state_basis_degree;
    spec.tracked = {&rep.bundle.X, &rep.bundle.Y, &eq.bundle.X, &delta_eq.dX};
    spec.reg_slot = {0, 0};
    spec.prepare = [&, sep](std::size_t k, const BlockCols& view,
                            const std::array<const double*, 2>&) {
        if (sep) {
            scratch.mean1 = col_mean(view[3], n);
        } else {
            ctx.fill_generic(k, view[0], view[1], view[2], view[3], nullptr, nullptr,
                             scratch.coupF0, scratch.coupB0);
        }
    };
    spec.fdrift = [&, sep](int, std::size_t k, std::size_t i, const BlockCols& view,
                           const double* u, const double* v) {
        const auto& mu = flow[k];
        const double x = view[0][i], y = view[1][i];
        const double coup = sep ? model.dH_ymu(x, mu, y, 0.0) * scratch.mean1 : scratch.coupF0[i];
        return u[0] * model.dH_xy(x, mu, y) + v[0] * model.dH_yy(x, mu, y) + coup;
    };
    spec.bdrift = [&, sep](int, std::size_t k, std::size_t i, const BlockCols& view,
                           const double* u, const double* vh) {
        const auto& mu = flow[k];
        const double x = view[0][i], y = view[1][i];
        const double coup = sep ? model.dH_xmu(x, mu, y, 0.0) * scratch.mean1 : scratch.coupB0[i];
        return u[0] * model.dH_xx(x, mu, y) + vh[0] * model.dH_xy(x, mu, y) - model.r * vh[0] + coup;
    };
    spec.init = [](int, std::size_t) { return 0.0; };

    auto lin = solve_linear_fbsde(spec, cfg, cfg.extract_z, &eq.bundle.brownian);
    VariationalBundle out;
    out.dX = std::move(lin.U[0]);
    out.dY = std::move(lin.V[0]);
    if (!lin.Z.empty()) out.dZ = std::move(lin.Z[0]);
    out.eta = delta_eq.eta;
    out.residual_history = std::move(lin.residual_history);
    out.iterations = lin.iterations;
    return out;
}

}  // namespace detail

/// Tagged-player directional variation at start state x. Returns the bundle
/// and the start-point derivative dY0 (the directional derivative of the
/// start-point value in direction eta).
struct DeltaRepresentativeResult {
    VariationalBundle bundle;
    double dY0 = 0.0;
};

inline DeltaRepresentativeResult solve_delta_representative(const HamiltonianModel& model, double x,
                                                            const EquilibriumSolution& eq,
                                                            const VariationalBundle& delta_eq,
                                                            const SolverConfig& cfg) {
    SolverConfig inner = cfg;
    inner.extract_z = false;
    RepresentativeSolution rep = solve_representative(model, x, eq, inner);
    DeltaRepresentativeResult out;
    out.bundle = detail::delta_representative_impl(model, eq, rep, delta_eq, cfg);
    const std::size_t n = eq.bundle.particles;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += out.bundle.dY(i, 0);
    out.dY0 = acc / static_cast<double>(n);
    return out;
}

namespace detail {

// Own-state sensitivity along a tagged-player base: unit initial condition,
// no cross-particle coupling.
inline LinearSolution solve_own_state_system(const HamiltonianModel& model, const MeasureFlow& flow,
                                             const RepresentativeSolution& rep,
                                             const SolverConfig& cfg) {
    const std::size_t n = rep.bundle.particles;
    LinearSpec spec;
    spec.dim = 1;
    spec.n = n;
    spec.grid = &cfg.grid;
    spec.r = model.r;
    spec.xdeg = cfg.state_basis_degree;
    spec.tracked = {&rep.bundle.X, &rep.bundle.Y};
    spec.reg_slot = {0, 0};
    spec.fdrift = [&model, &flow](int, std::size_t k, std::size_t i, const BlockCols& view,
                                  const double* u, const double* v) {
        const double x = view[0][i], y = view[1][i];
        return u[0] * model.dH_xy(x, flow[k], y) + v[0] * model.dH_yy(x, flow[k], y);
    };
    spec.bdrift = [&model, &flow](int, std::size_t k, std::size_t i, const BlockCols& view,
                                  const double* u, const double* vh) {
        const double x = view[0][i], y = view[1][i];
        return u[0] * model.dH_xx(x, flow[k], y) + vh[0] * model.dH_xy(x, flow[k], y) -
               model.r * vh[0];
    };
    spec.init = [](int, std::size_t) { return 1.0; };
    return solve_linear_fbsde(spec, cfg);
}

// Population sensitivity along the equilibrium base: coupled to a frozen
// own-state solution (tilde copies along the tagged-at-xtilde paths) and to
// itself (tilde copies along the equilibrium paths).
inline LinearSolution solve_population_system(const HamiltonianModel& model,
                                              const MeasureFlow& flow,
                                              const EquilibriumSolution& eq,
                                              const Array2D& rep_pt_x, const Array2D& own_u,
                                              const SolverConfig& cfg) {
    const std::size_t n = eq.bundle.particles;
    const bool sep = model.mu_kernel_constant_in_xtilde;
    VarSystemContext ctx{&model, &flow, n, cfg.mu_subsample};
    CouplingScratch scratch;

    LinearSpec spec;
    spec.dim = 1;
    spec.n = n;
    spec.grid = &cfg.grid;
    spec.r = model.r;
    spec.xdeg = cfg.state_basis_degree;
    spec.tracked = {&eq.bundle.X, &eq.bundle.Y, &rep_pt_x, &own_u};
    spec.reg_slot = {0, 0};
    spec.prepare = [&, sep](std::size_t k, const BlockCols& view,
                            const std::array<const double*, 2>& u) {
        if (sep) {
            scratch.mean1 = col_mean(view[3], n);  // frozen own-state ensemble
            scratch.mean2 = col_mean(u[0], n);     // this system's ensemble
        } else {
            ctx.fill_generic(k, view[0], view[1], view[2], view[3], view[0], u[0], scratch.coupF0,
                             scratch.coupB0);
        }
    };
    spec.fdrift = [&, sep](int, std::size_t k, std::size_t i, const BlockCols& view,
                           const double* u, const double* v) {
        const auto& mu = flow[k];
        const double x = view[0][i], y = view[1][i];
        const double coup = sep ? model.dH_ymu(x, mu, y, 0.0) * (scratch.mean1 + scratch.mean2)
                                : scratch.coupF0[i];
        return u[0] * model.dH_xy(x, mu, y) + v[0] * model.dH_yy(x, mu, y) + coup;
    };
    spec.bdrift = [&, sep](int, std::size_t k, std::size_t i, const BlockCols& view,
                           const double* u, const double* vh) {
        const auto& mu = flow[k];
        const double x = view[0][i], y = view[1][i];
        const double coup = sep ? model.dH_xmu(x, mu, y, 0.0) * (scratch.mean1 + scratch.mean2)
                                : scratch.coupB0[i];
        return u[0] * model.dH_xx(x, mu, y) + vh[0] * model.dH_xy(x, mu, y) - model.r * vh[0] + coup;
    };
    spec.init = [](int, std::size_t) { return 0.0; };
    return solve_linear_fbsde(spec, cfg);
}

// Composite measure sensitivity along a tagged-player base, driven by two
// frozen ensembles (own-state values on their tilde paths, population values
// on the equilibrium tilde paths).
inline LinearSolution solve_composite_system(const HamiltonianModel& model,
                                             const MeasureFlow& flow,
                                             const RepresentativeSolution& rep_at_x,
                                             const Array2D& atoms1, const Array2D& vals1,
                                             const Array2D& atoms2, const Array2D& vals2,
                                             const SolverConfig& cfg) {
    const std::size_t n = rep_at_x.bundle.particles;
    const bool sep = model.mu_kernel_constant_in_xtilde;
    VarSystemContext ctx{&model, &flow, n, cfg.mu_subsample};
    CouplingScratch scratch;

    LinearSpec spec;
    spec.dim = 1;
    spec.n = n;
    spec.grid = &cfg.grid;
    spec.r = model.r;
    spec.xdeg = cfg.state_basis_degree;
    spec.tracked = {&rep_at_x.bundle.X, &rep_at_x.bundle.Y, &atoms1, &vals1, &atoms2, &vals2};
    spec.reg_slot = {0, 0};
    spec.prepare = [&, sep](std::size_t k, const BlockCols& view,
                            const std::array<const double*, 2>&) {
        if (sep) {
            scratch.mean1 = col_mean(view[3], n);
            scratch.mean2 = col_mean(view[5], n);
        } else {
            ctx.fill_generic(k, view[0], view[1], view[2], view[3], view[4], view[5],
                             scratch.coupF0, scratch.coupB0);
        }
    };
    spec.fdrift = [&, sep](int, std::size_t k, std::size_t i, const BlockCols& view,
                           const double* u, const double* v) {
        const auto& mu = flow[k];
        const double x = view[0][i], y = view[1][i];
        const double coup = sep ? model.dH_ymu(x, mu, y, 0.0) * (scratch.mean1 + scratch.mean2)
                                : scratch.coupF0[i];
        return u[0] * model.dH_xy(x, mu, y) + v[0] * model.dH_yy(x, mu, y) + coup;
    };
    spec.bdrift = [&, sep](int, std::size_t k, std::size_t i, const BlockCols& view,
                           const double* u, const double* vh) {
        const auto& mu = flow[k];
        const double x = view[0][i], y = view[1][i];
        const double coup = sep ? model.dH_xmu(x, mu, y, 0.0) * (scratch.mean1 + scratch.mean2)
                                : scratch.coupB0[i];
        return u[0] * model.dH_xx(x, mu, y) + vh[0] * model.dH_xy(x, mu, y) - model.r * vh[0] + coup;
    };
    spec.init = [](int, std::size_t) { return 0.0; };
    return solve_linear_fbsde(spec, cfg);
}

// Coupled pair for a discrete atom: the atom-seeded response (coefficients on
// the tagged-at-atom base, scaled by the atom probability) and the starred
// population response (equilibrium base, gated off on the atom's own
// particles). Regressions for the starred component split on the indicator.
inline LinearSolution solve_atom_pair_system(const HamiltonianModel& model,
                                             const MeasureFlow& flow,
                                             const EquilibriumSolution& eq,
                                             const RepresentativeSolution& rep_at_atom,
                                             double prob,
                                             const std::vector<std::uint8_t>& is_atom,
                                             const SolverConfig& cfg) {
    const std::size_t n = eq.bundle.particles;
    const bool sep = model.mu_kernel_constant_in_xtilde;
    VarSystemContext ctx{&model, &flow, n, cfg.mu_subsample};
    CouplingScratch scratch;

    LinearSpec spec;
    spec.dim = 2;
    spec.n = n;
    spec.grid = &cfg.grid;
    spec.r = model.r;
    spec.xdeg = cfg.state_basis_degree;
    spec.tracked = {&rep_at_atom.bundle.X, &rep_at_atom.bundle.Y, &eq.bundle.X, &eq.bundle.Y};
    spec.reg_slot = {0, 2};
    spec.split = {nullptr, &is_atom};
    spec.prepare = [&, sep](std::size_t k, const BlockCols& view,
                            const std::array<const double*, 2>& u) {
        if (sep) {
            scratch.mean1 = col_mean(u[0], n);
            scratch.mean2 = col_mean(u[1], n);
        } else {
            // component 0 couples with theta on the tagged-at-atom base,
            // component 1 with theta on the equilibrium base
            ctx.fill_generic(k, view[0], view[1], view[0], u[0], view[2], u[1], scratch.coupF0,
                             scratch.coupB0);
            ctx.fill_generic(k, view[2], view[3], view[0], u[0], view[2], u[1], scratch.coupF1,
                             scratch.coupB1);
        }
    };
    spec.fdrift = [&, sep, prob](int c, std::size_t k, std::size_t i, const BlockCols& view,
                                 const double* u, const double* v) {
        const auto& mu = flow[k];
        const double x = c == 0 ? view[0][i] : view[2][i];
        const double y = c == 0 ? view[1][i] : view[3][i];
        double coup;
        if (sep)
            coup = model.dH_ymu(x, mu, y, 0.0) * (scratch.mean1 + scratch.mean2);
        else
            coup = c == 0 ? scratch.coupF0[i] : scratch.coupF1[i];
        const double gate = c == 0 ? prob : (is_atom[i] ? 0.0 : 1.0);
        return u[c] * model.dH_xy(x, mu, y) + v[c] * model.dH_yy(x, mu, y) + gate * coup;
    };
    spec.bdrift = [&, sep, prob](int c, std::size_t k, std::size_t i, const BlockCols& view,
                                 const double* u, const double* vh) {
        const auto& mu = flow[k];
        const double x = c == 0 ? view[0][i] : view[2][i];
        const double y = c == 0 ? view[1][i] : view[3][i];
        double coup;
        if (sep)
            coup = model.dH_xmu(x, mu, y, 0.0) * (scratch.mean1 + scratch.mean2);
        else
            coup = c == 0 ? scratch.coupB0[i] : scratch.coupB1[i];
        const double gate = c == 0 ? prob : (is_atom[i] ? 0.0 : 1.0);
        return u[c] * model.dH_xx(x, mu, y) + vh[c] * model.dH_xy(x, mu, y) - model.r * vh[c] +
               gate * coup;
    };
    spec.init = [](int c, std::size_t) { return c == 0 ? 1.0 : 0.0; };
    return solve_linear_fbsde(spec, cfg);
}

}  // namespace detail

/// Solutions of the measure-sensitivity systems at one perturbation point,
/// either a discrete atom (with its probability) or a grid point xtilde.
struct NablaBundle {
    Array2D own_x, own_y;    // point-seeded response
    Array2D star_x, star_y;  // population response (discrete case only)
    Array2D comp_x, comp_y;  // composite sensitivity
    bool discrete = false;
    double point = 0.0;
    double prob = 0.0;
};

/// Distinct initial atoms of an equilibrium solved from discrete samples.
struct DiscreteLaw {
    std::vector<double> atoms;
    std::vector<double> probs;
};

inline DiscreteLaw discrete_law(const EquilibriumSolution& eq) {
    const std::size_t n = eq.bundle.particles;
    std::vector<double> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = eq.bundle.X(i, 0);
    std::sort(vals.begin(), vals.end());
    DiscreteLaw law;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && vals[j] == vals[i]) ++j;
        law.atoms.push_back(vals[i]);
        law.probs.push_back(static_cast<double>(j - i) / static_cast<double>(n));
        i = j;
    }
    return law;
}

struct NablaDiscreteResult {
    NablaBundle nabla;
    double dmu_at_atom = 0.0;   // measure derivative of the start-point value at the atom
    double prob = 0.0;
    double delta_route_dY0 = 0.0;  // indicator-direction value via the variation route
    double relation_gap = 0.0;     // |delta_route - prob * dmu|
};

/// Measure derivative at one atom of a discrete initial law, via the coupled
/// atom-pair system and the composite sensitivity; the indicator-direction
/// variation is recomputed independently and the scaling relation reported.
inline NablaDiscreteResult solve_nabla_discrete(const HamiltonianModel& model, double x,
                                                const EquilibriumSolution& eq,
                                                std::size_t atom_index, const SolverConfig& cfg) {
    const DiscreteLaw law = discrete_law(eq);
    if (atom_index >= law.atoms.size()) throw InvalidParameter("atom_index out of range");
    const double atom = law.atoms[atom_index];
    const double prob = law.probs[atom_index];
    if (!(prob > 0.0)) throw ZeroProbabilityAtom("atom has zero probability");

    const std::size_t n = eq.bundle.particles;
    std::vector<std::uint8_t> is_atom(n, 0);
    for (std::size_t i = 0; i < n; ++i) is_atom[i] = eq.bundle.X(i, 0) == atom ? 1 : 0;

    SolverConfig inner = cfg;
    inner.extract_z = false;

    RepresentativeSolution rep_at_atom = solve_representative(model, atom, eq, inner);
    auto pair = detail::solve_atom_pair_system(model, eq.measure_flow, eq, rep_at_atom, prob,
                                               is_atom, inner);

    RepresentativeSolution rep_at_x = solve_representative(model, x, eq, inner);
    auto comp = detail::solve_composite_system(model, eq.measure_flow, rep_at_x,
                                               rep_at_atom.bundle.X, pair.U[0], eq.bundle.X,
                                               pair.U[1], inner);

    NablaDiscreteResult out;
    out.nabla.own_x = std::move(pair.U[0]);
    out.nabla.own_y = std::move(pair.V[0]);
    out.nabla.star_x = std::move(pair.U[1]);
    out.nabla.star_y = std::move(pair.V[1]);
    out.nabla.comp_x = std::move(comp.U[0]);
    out.nabla.comp_y = std::move(comp.V[0]);
    out.nabla.discrete = true;
    out.nabla.point = atom;
    out.nabla.prob = prob;
    out.prob = prob;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += out.nabla.comp_y(i, 0);
    out.dmu_at_atom = acc / static_cast<double>(n);

    // Independent route: indicator direction through the variation systems.
    std::vector<double> eta(n);
    for (std::size_t i = 0; i < n; ++i) eta[i] = is_atom[i] ? 1.0 : 0.0;
    auto d_eq = solve_delta_equilibrium(model, eq, eta, inner);
    auto d_rep = detail::delta_representative_impl(model, eq, rep_at_x, d_eq, inner);
    double dy0 = 0.0;
    for (std::size_t i = 0; i < n; ++i) dy0 += d_rep.dY(i, 0);
    out.delta_route_dY0 = dy0 / static_cast<double>(n);
    out.relation_gap = std::abs(out.delta_route_dY0 - prob * out.dmu_at_atom);
    return out;
}

/// Measure-derivative field psi(x, law, xtilde) over a grid of xtilde values:
/// per point, solve the point-seeded system on its own tagged base, the
/// population response, and the composite sensitivity at x.
struct LionsFieldResult {
    std::vector<double> xtilde;
    std::vector<double> psi;
    std::vector<double> se;  // per-particle scatter of the start values / sqrt(N)
};

inline LionsFieldResult lions_field(const HamiltonianModel& model, double x,
                                    const EquilibriumSolution& eq,
                                    std::span<const double> xtilde_grid, const SolverConfig& cfg) {
    const std::size_t n = eq.bundle.particles;
    SolverConfig inner = cfg;
    inner.extract_z = false;

    RepresentativeSolution rep_at_x = solve_representative(model, x, eq, inner);

    LionsFieldResult out;
    out.xtilde.assign(xtilde_grid.begin(), xtilde_grid.end());
    for (double xt : xtilde_grid) {
        RepresentativeSolution rep_pt = solve_representative(model, xt, eq, inner);
        auto own = detail::solve_own_state_system(model, eq.measure_flow, rep_pt, inner);
        auto pop = detail::solve_population_system(model, eq.measure_flow, eq, rep_pt.bundle.X,
                                                   own.U[0], inner);
        auto comp = detail::solve_composite_system(model, eq.measure_flow, rep_at_x,
                                                   rep_pt.bundle.X, own.U[0], eq.bundle.X,
                                                   pop.U[0], inner);
        double acc = 0.0, acc2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double v = comp.V[0](i, 0);
            acc += v;
            acc2 += v * v;
        }
        const double mean = acc / static_cast<double>(n);
        const double var = std::max(0.0, acc2 / static_cast<double>(n) - mean * mean);
        out.psi.push_back(mean);
        out.se.push_back(std::sqrt(var / static_cast<double>(n)));
    }
    return out;
}

/// E[psi(x, law, xi) eta] by piecewise-linear interpolation of a computed
/// field over its grid (clamped at the ends).
inline double expect_psi_eta(const LionsFieldResult& field, std::span<const double> xi,
                             std::span<const double> eta) {
    if (field.xtilde.size() < 2) throw InvalidParameter("field needs at least two grid points");
    double acc = 0.0;
    for (std::size_t i = 0; i < xi.size(); ++i) {
        const double v = xi[i];
        double p;
        if (v <= field.xtilde.front()) {
            p = field.psi.front();
        } else if (v >= field.xtilde.back()) {
            p = field.psi.back();
        } else {
            auto it = std::upper_bound(field.xtilde.begin(), field.xtilde.end(), v);
            const std::size_t j = static_cast<std::size_t>(it - field.xtilde.begin());
            const double w = (v - field.xtilde[j - 1]) / (field.xtilde[j] - field.xtilde[j - 1]);
            p = (1.0 - w) * field.psi[j - 1] + w * field.psi[j];
        }
        acc += p * eta[i];
    }
    return acc / static_cast<double>(xi.size());
}

/// Finite-difference check of the measure directional derivative: re-solve the
/// full system at xi + delta*eta under common random numbers for each delta
/// and compare the quotient against the variation-route value.
struct FdCheckRow {
    double delta = 0.0;
    double quotient = 0.0;
    double gap = 0.0;
};

struct FdCheckReport {
    double base_value = 0.0;   // start-point value at the unperturbed law
    double e_psi_eta = 0.0;    // variation-route directional derivative
    std::vector<FdCheckRow> rows;
    double trend_slope = 0.0;  // least-squares slope of gap against delta
    bool common_random_numbers = true;
};

inline FdCheckReport fd_check(const HamiltonianModel& model, double x,
                              std::span<const double> xi, std::span<const double> eta,
                              std::span<const double> deltas, const SolverConfig& cfg) {
    if (deltas.empty()) throw InvalidParameter("fd_check needs at least one delta");
    for (std::size_t j = 1; j < deltas.size(); ++j)
        if (!(deltas[j] < deltas[j - 1]) || !(deltas[j] > 0.0))
            throw InvalidParameter("deltas must be positive and decreasing");

    SolverConfig inner = cfg;
    inner.extract_z = false;

    EquilibriumSolution eq = solve_equilibrium(model, xi, inner);
    RepresentativeSolution rep = solve_representative(model, x, eq, inner);
    auto d_eq = solve_delta_equilibrium(model, eq, eta, inner);
    auto d_rep = detail::delta_representative_impl(model, eq, rep, d_eq, inner);
    const std::size_t n = xi.size();
    double dy0 = 0.0;
    for (std::size_t i = 0; i < n; ++i) dy0 += d_rep.dY(i, 0);
    dy0 /= static_cast<double>(n);

    FdCheckReport rep_out;
    rep_out.base_value = rep.y0;
    rep_out.e_psi_eta = dy0;

    std::vector<double> xi_shift(n);
    for (double d : deltas) {
        for (std::size_t i = 0; i < n; ++i) xi_shift[i] = xi[i] + d * eta[i];
        EquilibriumSolution eq_d = solve_equilibrium(model, xi_shift, inner);
        RepresentativeSolution rep_d = solve_representative(model, x, eq_d, inner);
        FdCheckRow row;
        row.delta = d;
        row.quotient = (rep_d.y0 - rep.y0) / d;
        row.gap = std::abs(row.quotient - dy0);
        rep_out.rows.push_back(row);
    }

    // Linear trend of the gap in delta.
    const auto nd = static_cast<double>(rep_out.rows.size());
    double sd = 0.0, sg = 0.0, sdd = 0.0, sdg = 0.0;
    for (const auto& row : rep_out.rows) {
        sd += row.delta;
        sg += row.gap;
        sdd += row.delta * row.delta;
        sdg += row.delta * row.gap;
    }
    const double denom = nd * sdd - sd * sd;
    rep_out.trend_slope = denom > 1e-300 ? (nd * sdg - sd * sg) / denom : 0.0;
    return rep_out;
}

/// Directional derivative of the discounted running-cost value in direction
/// eta: quadrature of dF/dx * dX + dF/dy * dY plus the cross-particle measure
/// term, along the tagged-player base paths.
inline double value_directional(const HamiltonianModel& model, double /*x*/,
                                const EquilibriumSolution& eq, const RepresentativeSolution& rep,
                                const VariationalBundle& delta_eq,
                                const VariationalBundle& delta_rep, const SolverConfig& cfg) {
    const std::size_t n = eq.bundle.particles;
    const TimeGrid& g = cfg.grid;
    const double r = model.r;
    const bool sep = model.mu_kernel_constant_in_xtilde;
    const std::size_t step =
        cfg.mu_subsample == 0 || cfg.mu_subsample >= n ? 1 : n / cfg.mu_subsample;

    double acc = 0.0;
    for (std::size_t k = 0; k <= g.M; ++k) {
        const auto& mu = eq.measure_flow[k];
        double mean_dx = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean_dx += delta_eq.dX(i, k);
        mean_dx /= static_cast<double>(n);

        double fk = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double xv = rep.bundle.X(i, k), yv = rep.bundle.Y(i, k);
            const double dfx = model.dH_x(xv, mu, yv) - yv * model.dH_xy(xv, mu, yv);
            const double dfy = -yv * model.dH_yy(xv, mu, yv);
            double mu_term;
            if (sep) {
                mu_term = (model.dH_mu(xv, mu, yv, 0.0) - yv * model.dH_ymu(xv, mu, yv, 0.0)) *
                          mean_dx;
            } else {
                double s = 0.0;
                std::size_t cnt = 0;
                for (std::size_t j = 0; j < n; j += step) {
                    const double xt = eq.bundle.X(j, k);
                    s += (model.dH_mu(xv, mu, yv, xt) - yv * model.dH_ymu(xv, mu, yv, xt)) *
                         delta_eq.dX(j, k);
                    ++cnt;
                }
                mu_term = s / static_cast<double>(cnt);
            }
            fk += dfx * delta_rep.dX(i, k) + dfy * delta_rep.dY(i, k) + mu_term;
        }
        fk /= static_cast<double>(n);
        const double w = (k == 0 || k == g.M) ? 0.5 : 1.0;
        acc += w * std::exp(-r * g.node(k)) * fk;
    }
    return acc * g.dt;
}

}  // namespace mfg
