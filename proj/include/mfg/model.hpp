#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mfg/common.hpp"
#include "mfg/detail/rng.hpp"
#include "mfg/measure.hpp"

namespace mfg {

using StateFn = std::function<double(double x, const EmpiricalMeasure& mu, double y)>;
using MeasureFn =
    std::function<double(double x, const EmpiricalMeasure& mu, double y, double xtilde)>;
using ControlCostFn = std::function<double(double x, const EmpiricalMeasure& mu, double a)>;

/// Hamiltonian model contract: H together with every derivative the coupled
/// systems consume. Measure arguments are empirical measures and models read
/// them through expectations of test functions (the mean, for the built-in
/// quadratic family). All callables must be reentrant; they carry no state.
struct HamiltonianModel {
    double r = 0.0;  // discount factor, positive

    StateFn H;
    StateFn dH_x, dH_y, dH_xx, dH_xy, dH_yy;
    MeasureFn dH_mu, dH_xmu, dH_ymu;

    std::optional<StateFn> alpha_hat;        // feedback minimizer, when known
    std::optional<ControlCostFn> control_cost_f;  // instantaneous cost f(x, mu, a)

    /// True when the measure-derivative kernels do not depend on the xtilde
    /// argument; lets the cross-particle expectation collapse to one ensemble
    /// mean instead of an N^2 kernel sum.
    bool mu_kernel_constant_in_xtilde = false;

    /// Optimized running cost F = H - y * dH_y.
    double running_cost_F(double x, const EmpiricalMeasure& mu, double y) const {
        return H(x, mu, y) - y * dH_y(x, mu, y);
    }
};

/// Linear-quadratic model: drift equals the control, cost
/// f = a^2/2 + (alpha/2) x^2 + beta x E[mu], which minimizes to
/// H(x, mu, y) = -y^2/2 + (alpha/2) x^2 + beta x E[mu] at a = -y.
inline HamiltonianModel make_lq_model(double alpha, double beta, double r) {
    if (!(alpha > 0.0)) throw InvalidParameter("lq model needs alpha > 0");
    if (!(r > 0.0)) throw InvalidParameter("lq model needs r > 0");
    HamiltonianModel m;
    m.r = r;
    m.H = [alpha, beta](double x, const EmpiricalMeasure& mu, double y) {
        return -0.5 * y * y + 0.5 * alpha * x * x + beta * x * mu.mean();
    };
    m.dH_x = [alpha, beta](double x, const EmpiricalMeasure& mu, double) {
        return alpha * x + beta * mu.mean();
    };
    m.dH_y = [](double, const EmpiricalMeasure&, double y) { return -y; };
    m.dH_xx = [alpha](double, const EmpiricalMeasure&, double) { return alpha; };
    m.dH_xy = [](double, const EmpiricalMeasure&, double) { return 0.0; };
    m.dH_yy = [](double, const EmpiricalMeasure&, double) { return -1.0; };
    m.dH_mu = [beta](double x, const EmpiricalMeasure&, double, double) { return beta * x; };
    m.dH_xmu = [beta](double, const EmpiricalMeasure&, double, double) { return beta; };
    m.dH_ymu = [](double, const EmpiricalMeasure&, double, double) { return 0.0; };
    m.alpha_hat = [](double, const EmpiricalMeasure&, double y) { return -y; };
    m.control_cost_f = [alpha, beta](double x, const EmpiricalMeasure& mu, double a) {
        return 0.5 * a * a + 0.5 * alpha * x * x + beta * x * mu.mean();
    };
    m.mu_kernel_constant_in_xtilde = true;
    return m;
}

/// Quadratic model plus a smooth cubic state-cost term eps * x^3. Keeps the
/// quadratic minimizer in the control but makes the state coupling genuinely
/// nonlinear, so measure sensitivities acquire a second-order term.
inline HamiltonianModel make_lq_cubic_model(double alpha, double beta, double r, double eps) {
    HamiltonianModel m = make_lq_model(alpha, beta, r);
    auto base_h = m.H;
    auto base_dx = m.dH_x;
    auto base_dxx = m.dH_xx;
    auto base_f = *m.control_cost_f;
    m.H = [base_h, eps](double x, const EmpiricalMeasure& mu, double y) {
        return base_h(x, mu, y) + eps * x * x * x;
    };
    m.dH_x = [base_dx, eps](double x, const EmpiricalMeasure& mu, double y) {
        return base_dx(x, mu, y) + 3.0 * eps * x * x;
    };
    m.dH_xx = [base_dxx, eps](double x, const EmpiricalMeasure& mu, double y) {
        return base_dxx(x, mu, y) + 6.0 * eps * x;
    };
    m.control_cost_f = [base_f, eps](double x, const EmpiricalMeasure& mu, double a) {
        return base_f(x, mu, a) + eps * x * x * x;
    };
    return m;
}

/// Stationary affine ansatz coefficients for the quadratic model:
/// Y_t = p X_t + q E[X_t] with
///   p^2 + r p - alpha = 0            (positive root)
///   q^2 + sqrt(r^2 + 4 alpha) q - beta = 0   (root of smaller magnitude).
/// The start-point value function is then p x + q E[mu], with measure
/// derivative identically q.
struct RiccatiCoefficients {
    double p = 0.0;
    double q = 0.0;
};

inline RiccatiCoefficients lq_riccati(double alpha, double beta, double r) {
    if (!(alpha > 0.0)) throw InvalidParameter("lq_riccati needs alpha > 0");
    if (!(r > 0.0)) throw InvalidParameter("lq_riccati needs r > 0");
    const double s = std::sqrt(r * r + 4.0 * alpha);
    const double disc = s * s + 4.0 * beta;  // = r^2 + 4 alpha + 4 beta
    if (disc < 0.0) throw NoRealRoot("lq_riccati: r^2 + 4 alpha + 4 beta < 0");
    const double p = 0.5 * (-r + s);
    const double q = 0.5 * (-s + std::sqrt(disc));
    return {p, q};
}

/// One offending sample of the structural bounds check.
struct AssumptionViolation {
    double x = 0.0;
    double y = 0.0;
    double xtilde = 0.0;
    std::size_t measure_index = 0;
    std::string condition;
};

/// Empirical bounds certified over a sample box. lambda1 is the tightest
/// concavity/convexity constant observed, lambda2 the largest measure-coupling
/// magnitude, lambda3 the largest second-derivative magnitude. The pass flag
/// requires every sampled point to respect the sign conditions and the margin
/// -lambda1 + 2 lambda2 < -r/2 to be strictly negative.
struct AssumptionReport {
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    double lambda3 = 0.0;
    double margin = 0.0;
    bool passed = false;
    std::vector<AssumptionViolation> violations;
    // certification domain, recorded for provenance
    double x_min = 0.0, x_max = 0.0;
    double y_min = 0.0, y_max = 0.0;
    double xt_min = 0.0, xt_max = 0.0;
    std::size_t samples = 0;
};

/// Domain over which structural bounds are sampled. The measure family
/// defaults to point masses at the box corners/centre plus one spread-out
/// uniform measure.
struct SampleBox {
    double x_min = -2.0, x_max = 2.0;
    double y_min = -2.0, y_max = 2.0;
    double xt_min = -2.0, xt_max = 2.0;
    std::vector<EmpiricalMeasure> measures;
    std::uint64_t seed = 0xB0C5;

    std::vector<EmpiricalMeasure> family() const {
        if (!measures.empty()) return measures;
        std::vector<EmpiricalMeasure> fam;
        fam.push_back(EmpiricalMeasure::dirac(x_min));
        fam.push_back(EmpiricalMeasure::dirac(0.5 * (x_min + x_max)));
        fam.push_back(EmpiricalMeasure::dirac(x_max));
        std::vector<double> atoms;
        for (int j = 0; j < 9; ++j)
            atoms.push_back(x_min + (x_max - x_min) * static_cast<double>(j) / 8.0);
        fam.push_back(EmpiricalMeasure(std::move(atoms)));
        return fam;
    }
};

/// Sampling-based verification of the structural bounds on a box. The report
/// carries the tightest constants observed; enlarging the box can only shrink
/// lambda1 and grow lambda2/lambda3, so a failing report never turns passing.
inline AssumptionReport verify_assumptions(const HamiltonianModel& model, const SampleBox& box,
                                           std::size_t samples) {
    if (samples < 1) throw InvalidParameter("verify_assumptions needs samples >= 1");
    if (!(box.x_max >= box.x_min) || !(box.y_max >= box.y_min) || !(box.xt_max >= box.xt_min))
        throw InvalidParameter("verify_assumptions needs a nonempty box");

    const auto fam = box.family();
    AssumptionReport rep;
    rep.x_min = box.x_min;
    rep.x_max = box.x_max;
    rep.y_min = box.y_min;
    rep.y_max = box.y_max;
    rep.xt_min = box.xt_min;
    rep.xt_max = box.xt_max;
    rep.samples = samples;

    const std::uint64_t key = detail::stream_key(box.seed, detail::StreamKind::aux, 17);
    double lam1 = std::numeric_limits<double>::infinity();
    double lam2 = 0.0, lam3 = 0.0;

    auto lerp = [](double a, double b, double u) { return a + (b - a) * u; };
    for (std::size_t s = 0; s < samples; ++s) {
        const double x = lerp(box.x_min, box.x_max, detail::u01(detail::bits_at(key, 4 * s)));
        const double y = lerp(box.y_min, box.y_max, detail::u01(detail::bits_at(key, 4 * s + 1)));
        const double xt = lerp(box.xt_min, box.xt_max, detail::u01(detail::bits_at(key, 4 * s + 2)));
        const auto& mu = fam[detail::bits_at(key, 4 * s + 3) % fam.size()];

        const double hyy = model.dH_yy(x, mu, y);
        const double hxx = model.dH_xx(x, mu, y);
        const double hxy = model.dH_xy(x, mu, y);
        const double hxm = model.dH_xmu(x, mu, y, xt);
        const double hym = model.dH_ymu(x, mu, y, xt);

        if (!(hyy < 0.0))
            rep.violations.push_back({x, y, xt, detail::bits_at(key, 4 * s + 3) % fam.size(),
                                      "dH_yy not strictly negative"});
        if (!(hxx > 0.0))
            rep.violations.push_back({x, y, xt, detail::bits_at(key, 4 * s + 3) % fam.size(),
                                      "dH_xx not strictly positive"});

        lam1 = std::min(lam1, std::min(-hyy, hxx));
        lam2 = std::max(lam2, std::max(std::abs(hxm), std::abs(hym)));
        lam3 = std::max(lam3, std::max(std::abs(hxx), std::max(std::abs(hyy), std::abs(hxy))));
    }

    rep.lambda1 = std::max(0.0, lam1);
    rep.lambda2 = lam2;
    rep.lambda3 = lam3;
    rep.margin = (-rep.lambda1 + 2.0 * rep.lambda2) - (-model.r / 2.0);
    const bool pointwise_ok = rep.violations.empty();
    if (!(rep.margin < 0.0))
        rep.violations.push_back({0.0, 0.0, 0.0, 0, "-lambda1 + 2 lambda2 >= -r/2"});
    rep.passed = pointwise_ok && rep.margin < 0.0;
    return rep;
}

}  // namespace mfg
