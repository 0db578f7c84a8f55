#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mfg/common.hpp"
#include "mfg/detail/rng.hpp"

namespace mfg {

/// Uniform grid on the truncated horizon [0, T] with M = round(T/dt) steps.
struct TimeGrid {
    double T = 0.0;
    double dt = 0.0;
    std::size_t M = 0;

    TimeGrid() = default;
    TimeGrid(double horizon, double step) : T(horizon), dt(step) {
        if (!(T > 0.0) || !(dt > 0.0)) throw InvalidParameter("TimeGrid needs T > 0 and dt > 0");
        M = static_cast<std::size_t>(std::llround(T / dt));
        if (M < 1) throw InvalidParameter("TimeGrid needs at least one step");
        if (std::abs(static_cast<double>(M) * dt - T) > 1e-12 * std::max(1.0, T))
            throw InvalidParameter("dt must divide T");
    }

    double node(std::size_t k) const { return static_cast<double>(k) * dt; }
    std::size_t nodes() const { return M + 1; }

    /// Largest node index k with node(k) <= t.
    std::size_t node_at(double t) const {
        auto k = static_cast<std::size_t>(std::floor(t / dt + 1e-9));
        return std::min(k, M);
    }
};

/// Keyed Brownian increment source: increment (i, k) is a pure function of
/// (seed, i, k), so particle i's stream never depends on the particle count,
/// the worker count, or the order of evaluation. Increments are N(0, dt).
class BrownianStream {
  public:
    BrownianStream() = default;
    BrownianStream(TimeGrid grid, std::size_t particles, std::uint64_t seed)
        : grid_(grid), particles_(particles), seed_(seed), sqrt_dt_(std::sqrt(grid.dt)) {}

    double operator()(std::size_t i, std::size_t k) const {
        if (cached_) return cache_[i * grid_.M + k];
        return generate(i, k);
    }

    /// Cache all increments in memory (trades ~8*N*M bytes for sweep speed).
    void materialize() {
        if (cached_) return;
        cache_.resize(particles_ * grid_.M);
        for (std::size_t i = 0; i < particles_; ++i)
            for (std::size_t k = 0; k < grid_.M; ++k) cache_[i * grid_.M + k] = generate(i, k);
        cached_ = true;
    }

    const TimeGrid& grid() const { return grid_; }
    std::size_t particles() const { return particles_; }
    std::uint64_t seed() const { return seed_; }

  private:
    double generate(std::size_t i, std::size_t k) const {
        const std::uint64_t key = detail::stream_key(seed_, detail::StreamKind::brownian, i);
        return sqrt_dt_ * detail::normal_at(key, k);
    }

    TimeGrid grid_;
    std::size_t particles_ = 0;
    std::uint64_t seed_ = 0;
    double sqrt_dt_ = 0.0;
    bool cached_ = false;
    std::vector<double> cache_;
};

/// Materialized increments [N x M]; deterministic in (grid, N, seed) with
/// per-particle keying (prefixes agree across different N).
inline Array2D sample_brownian(const TimeGrid& grid, std::size_t particles, std::uint64_t seed) {
    if (particles < 1) throw InvalidParameter("sample_brownian needs N >= 1");
    BrownianStream s(grid, particles, seed);
    Array2D out(particles, grid.M);
    for (std::size_t i = 0; i < particles; ++i)
        for (std::size_t k = 0; k < grid.M; ++k) out(i, k) = s(i, k);
    return out;
}

/// Particle path storage for one coupled forward-backward system.
/// X and Y are dense [N x (M+1)]; Z is materialized only when the solver is
/// asked to extract it, and Brownian increments live behind the keyed stream.
struct PathBundle {
    TimeGrid grid;
    std::size_t particles = 0;
    std::uint64_t seed = 0;
    Array2D X, Y, Z;
    BrownianStream brownian;

    PathBundle() = default;
    PathBundle(TimeGrid g, std::size_t n, std::uint64_t s)
        : grid(g), particles(n), seed(s), X(n, g.M + 1), Y(n, g.M + 1), brownian(g, n, s) {}

    bool has_z() const { return !Z.empty(); }
};

/// Discounted squared norm of a process v: quadrature of e^{-Kt} |v_t|^2 over
/// [0, T] plus an additive tail estimate e^{-KT} * sup_k mean|v_k|^2 / K for
/// the truncated [T, infinity) part.
struct DiscountedNorm {
    double value = 0.0;
    double tail_bound = 0.0;
};

inline DiscountedNorm discounted_sq_norm(std::span<const double> path, double K, const TimeGrid& grid) {
    if (!(K > 0.0)) throw InvalidParameter("norm weight K must be positive");
    if (path.size() != grid.nodes()) throw InvalidParameter("path length must match grid nodes");
    double acc = 0.0, sup = 0.0;
    for (std::size_t k = 0; k <= grid.M; ++k) {
        const double w = (k == 0 || k == grid.M) ? 0.5 : 1.0;
        const double term = std::exp(-K * grid.node(k)) * path[k] * path[k];
        acc += w * term;
        sup = std::max(sup, path[k] * path[k]);
    }
    return {acc * grid.dt, std::exp(-K * grid.T) * sup / K};
}

/// Monte Carlo version: expectation over particle rows of |v_t|^2.
inline DiscountedNorm discounted_sq_norm(const Array2D& paths, double K, const TimeGrid& grid) {
    if (!(K > 0.0)) throw InvalidParameter("norm weight K must be positive");
    if (paths.cols() != grid.nodes()) throw InvalidParameter("path length must match grid nodes");
    const auto n = static_cast<double>(paths.rows());
    double acc = 0.0, sup = 0.0;
    for (std::size_t k = 0; k <= grid.M; ++k) {
        double ms = 0.0;
        for (std::size_t i = 0; i < paths.rows(); ++i) ms += paths(i, k) * paths(i, k);
        ms /= n;
        const double w = (k == 0 || k == grid.M) ? 0.5 : 1.0;
        acc += w * std::exp(-K * grid.node(k)) * ms;
        sup = std::max(sup, ms);
    }
    return {acc * grid.dt, std::exp(-K * grid.T) * sup / K};
}

}  // namespace mfg
