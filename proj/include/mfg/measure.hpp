#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <vector>

#include "mfg/common.hpp"

namespace mfg {

/// Finite atomic probability measure on the real line.
///
/// Weights are optional; an empty weight vector means uniform 1/n. The mean is
/// cached at construction because solvers query it once per model call.
class EmpiricalMeasure {
  public:
    EmpiricalMeasure() = default;

    explicit EmpiricalMeasure(std::vector<double> atoms)
        : atoms_(std::move(atoms)) {
        check_atoms();
        mean_ = weighted_moment(1);
    }

    EmpiricalMeasure(std::vector<double> atoms, std::vector<double> weights)
        : atoms_(std::move(atoms)), weights_(std::move(weights)) {
        check_atoms();
        if (weights_.size() != atoms_.size())
            throw InvalidParameter("weights/atoms size mismatch");
        double s = 0.0;
        for (double w : weights_) {
            if (!(w >= 0.0) || !std::isfinite(w))
                throw InvalidParameter("weights must be nonnegative and finite");
            s += w;
        }
        if (std::abs(s - 1.0) > 1e-12)
            throw InvalidParameter("weights must sum to 1 within 1e-12");
        mean_ = weighted_moment(1);
    }

    static EmpiricalMeasure dirac(double c) { return EmpiricalMeasure(std::vector<double>{c}); }

    const std::vector<double>& atoms() const { return atoms_; }
    const std::vector<double>& weights() const { return weights_; }  // empty = uniform
    bool uniform() const { return weights_.empty(); }
    std::size_t size() const { return atoms_.size(); }
    bool empty() const { return atoms_.empty(); }

    double weight(std::size_t i) const {
        return weights_.empty() ? 1.0 / static_cast<double>(atoms_.size()) : weights_[i];
    }

    double mean() const { return mean_; }

    /// Weighted k-th raw moment, k >= 1.
    double moment(int k) const {
        if (k < 1) throw InvalidParameter("moment order must be >= 1");
        return weighted_moment(k);
    }

    double variance() const {
        double m2 = weighted_moment(2);
        return std::max(0.0, m2 - mean_ * mean_);
    }

    std::vector<double> sorted_atoms() const {
        std::vector<double> s = atoms_;
        std::sort(s.begin(), s.end());
        return s;
    }

    /// Overwrite atoms in place with uniform weights, reusing capacity.
    /// Solver hot path: the caller supplies the already-computed mean.
    void assign(std::span<const double> atoms, double mean_hint) {
        atoms_.assign(atoms.begin(), atoms.end());
        weights_.clear();
        mean_ = mean_hint;
    }

  private:
    void check_atoms() const {
        if (atoms_.empty()) throw InvalidParameter("measure needs at least one atom");
        for (double a : atoms_)
            if (!std::isfinite(a)) throw InvalidParameter("atoms must be finite");
    }

    double weighted_moment(int k) const {
        double s = 0.0;
        if (weights_.empty()) {
            for (double a : atoms_) s += std::pow(a, k);
            return s / static_cast<double>(atoms_.size());
        }
        for (std::size_t i = 0; i < atoms_.size(); ++i) s += weights_[i] * std::pow(atoms_[i], k);
        return s;
    }

    std::vector<double> atoms_;
    std::vector<double> weights_;
    double mean_ = 0.0;
};

namespace detail {

// Common refinement of two weighted quantile functions: walks both sorted atom
// lists once, pairing quantile mass co-monotonically.
template <typename F>
inline void quantile_coupling(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, F&& visit) {
    std::vector<std::size_t> im(mu.size()), in(nu.size());
    std::iota(im.begin(), im.end(), 0);
    std::iota(in.begin(), in.end(), 0);
    std::sort(im.begin(), im.end(), [&](auto a, auto b) { return mu.atoms()[a] < mu.atoms()[b]; });
    std::sort(in.begin(), in.end(), [&](auto a, auto b) { return nu.atoms()[a] < nu.atoms()[b]; });
    std::size_t a = 0, b = 0;
    double ra = mu.weight(im[0]), rb = nu.weight(in[0]);
    while (true) {
        const double m = std::min(ra, rb);
        if (m > 0.0) visit(mu.atoms()[im[a]], nu.atoms()[in[b]], m);
        ra -= m;
        rb -= m;
        if (ra <= 1e-15) {
            if (++a >= mu.size()) break;
            ra = mu.weight(im[a]);
        }
        if (rb <= 1e-15) {
            if (++b >= nu.size()) break;
            rb = nu.weight(in[b]);
        }
    }
}

}  // namespace detail

/// Exact W_p between atomic measures on R via the sorted (co-monotone) coupling.
/// Supported orders: p = 1, 2.
inline double wasserstein_1d(int order, const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
    if (order != 1 && order != 2) throw UnsupportedOrder("wasserstein_1d supports order 1 or 2");
    if (mu.empty() || nu.empty()) throw InvalidParameter("wasserstein_1d needs nonempty measures");
    double acc = 0.0;
    detail::quantile_coupling(mu, nu, [&](double x, double y, double w) {
        const double d = std::abs(x - y);
        acc += w * (order == 1 ? d : d * d);
    });
    return order == 1 ? acc : std::sqrt(acc);
}

/// Left-closed grid cells of width 1/n indexed by i in [-n^2, n^2 - 1]; the
/// cells cover [-n, n) and the grid point of cell i is its left endpoint i/n.
struct DiscretizationSpec {
    int n;

    explicit DiscretizationSpec(int n_) : n(n_) {
        if (n < 1) throw InvalidParameter("grid resolution must be >= 1");
    }
    double grid_point(long long i) const { return static_cast<double>(i) / n; }
    double cell_left(long long i) const { return grid_point(i); }
    double cell_right(long long i) const { return static_cast<double>(i + 1) / n; }
};

/// Index i of the cell [i/n, (i+1)/n) containing x. Defined on [-n, n).
inline long long cell_index(double x, int n) {
    if (n < 1) throw InvalidParameter("grid resolution must be >= 1");
    if (!(x >= -static_cast<double>(n)) || !(x < static_cast<double>(n)))
        throw OutOfRange("cell_index requires x in [-n, n)");
    return static_cast<long long>(std::floor(x * n));
}

/// Project samples on the discretization grid: left cell endpoint on [-n, n),
/// clamped to -n^2 below -n^2 and to +n^2 above, and 0 on the uncovered bands
/// between n and n^2 in absolute value. The uncovered-band behaviour is the
/// projection formula taken literally; see README notes.
inline std::vector<double> discretize_grid(std::span<const double> samples, int n) {
    if (n < 1) throw InvalidParameter("grid resolution must be >= 1");
    const double nn = static_cast<double>(n) * n;
    std::vector<double> out(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const double x = samples[i];
        double y;
        if (x < -nn) {
            y = -nn;
        } else if (x >= nn) {
            y = nn;
        } else if (x >= -static_cast<double>(n) && x < static_cast<double>(n)) {
            y = static_cast<double>(std::floor(x * n)) / n;
        } else {
            y = 0.0;
        }
        out[i] = y;
    }
    return out;
}

/// Weighted k-th moment of a measure (free-function form).
inline double moment(const EmpiricalMeasure& mu, int k) { return mu.moment(k); }

/// Plain-text serialization: one atom per line, or "atom,weight" pairs.
inline void write_measure(std::ostream& os, const EmpiricalMeasure& mu) {
    if (mu.uniform()) {
        for (double a : mu.atoms()) os << a << '\n';
    } else {
        for (std::size_t i = 0; i < mu.size(); ++i) os << mu.atoms()[i] << ',' << mu.weights()[i] << '\n';
    }
}

inline EmpiricalMeasure read_measure(std::istream& is) {
    std::vector<double> atoms, weights;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        double a;
        char comma;
        if (!(ls >> a)) throw InvalidParameter("unparsable measure line: " + line);
        if (ls >> comma) {
            double w;
            if (comma != ',' || !(ls >> w)) throw InvalidParameter("unparsable measure line: " + line);
            weights.push_back(w);
        }
        atoms.push_back(a);
    }
    if (weights.empty()) return EmpiricalMeasure(std::move(atoms));
    if (weights.size() != atoms.size())
        throw InvalidParameter("mixed weighted/unweighted measure rows");
    return EmpiricalMeasure(std::move(atoms), std::move(weights));
}

}  // namespace mfg
