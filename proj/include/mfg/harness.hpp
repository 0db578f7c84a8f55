#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfg/common.hpp"
#include "mfg/general.hpp"
#include "mfg/lions.hpp"
#include "mfg/measure.hpp"
#include "mfg/model.hpp"
#include "mfg/solver.hpp"

namespace mfg::harness {

using json = nlohmann::ordered_json;

inline constexpr const char* kVersion = "0.1.0";

// Exit codes of the command-line front end.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNoConvergence = 3;
inline constexpr int kExitValidationFailed = 4;

/// Initial-sample specification: a standard family plus explicit atom lists.
struct XiSpec {
    std::string kind = "normal";  // normal | constant | atoms
    double mean = 0.0;
    double stddev = 1.0;
    double value = 0.0;
    std::vector<double> atoms;
    std::vector<double> probs;
};

struct EtaSpec {
    std::string kind = "ones";  // ones | constant | normal
    double value = 1.0;
    double mean = 0.0;
    double stddev = 1.0;
};

/// One config file drives every subcommand; sections mirror the solver knobs.
struct RunConfig {
    // model
    std::string model_kind = "lq";  // lq | lq_cubic
    double alpha = 1.0;
    double beta = 0.25;
    double r = 0.1;
    double epsilon = 0.02;
    // grid (T <= 0 resolves to max(40, 8/r))
    double T = 0.0;
    double dt = 0.01;
    // mc
    std::size_t particles = 10000;
    std::uint64_t seed = 1234;
    int threads = 1;
    // solver
    double picard_tol = 1e-5;
    std::size_t max_iters = 60;
    double damping = 0.5;
    int basis_degree = 3;
    int state_basis_degree = 2;
    std::string mode = "mfg";  // mfg | continuation
    bool terminal_bootstrap = false;
    std::size_t mu_subsample = 0;
    // norm (K <= 0 resolves to r)
    double K = 0.0;
    // experiment
    std::vector<double> x_values{1.0};
    std::vector<double> xtilde_grid;
    std::vector<double> deltas{0.2, 0.1, 0.05};
    std::vector<int> n_list{4, 8, 16};
    std::vector<double> checkpoints{1.0, 5.0, 10.0};
    XiSpec xi;
    EtaSpec eta;
    std::uint64_t seed_b = 0;  // 0 resolves to seed + 1

    double horizon() const { return T > 0.0 ? T : std::max(40.0, 8.0 / r); }
    double norm_weight() const { return K > 0.0 ? K : r; }
};

inline void to_json(json& j, const XiSpec& s) {
    j = json{{"kind", s.kind},   {"mean", s.mean},   {"stddev", s.stddev},
             {"value", s.value}, {"atoms", s.atoms}, {"probs", s.probs}};
}
inline void from_json(const json& j, XiSpec& s) {
    s.kind = j.value("kind", s.kind);
    s.mean = j.value("mean", s.mean);
    s.stddev = j.value("stddev", s.stddev);
    s.value = j.value("value", s.value);
    s.atoms = j.value("atoms", s.atoms);
    s.probs = j.value("probs", s.probs);
}
inline void to_json(json& j, const EtaSpec& s) {
    j = json{{"kind", s.kind}, {"value", s.value}, {"mean", s.mean}, {"stddev", s.stddev}};
}
inline void from_json(const json& j, EtaSpec& s) {
    s.kind = j.value("kind", s.kind);
    s.value = j.value("value", s.value);
    s.mean = j.value("mean", s.mean);
    s.stddev = j.value("stddev", s.stddev);
}

inline void to_json(json& j, const RunConfig& c) {
    j = json{
        {"model",
         {{"kind", c.model_kind},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"r", c.r},
          {"epsilon", c.epsilon}}},
        {"grid", {{"T", c.T}, {"dt", c.dt}}},
        {"mc", {{"particles", c.particles}, {"seed", c.seed}, {"threads", c.threads}}},
        {"solver",
         {{"picard_tol", c.picard_tol},
          {"max_iters", c.max_iters},
          {"damping", c.damping},
          {"basis_degree", c.basis_degree},
          {"state_basis_degree", c.state_basis_degree},
          {"mode", c.mode},
          {"terminal_bootstrap", c.terminal_bootstrap},
          {"mu_subsample", c.mu_subsample}}},
        {"norm", {{"K", c.K}}},
        {"experiment",
         {{"x_values", c.x_values},
          {"xtilde_grid", c.xtilde_grid},
          {"deltas", c.deltas},
          {"n_list", c.n_list},
          {"checkpoints", c.checkpoints},
          {"xi", c.xi},
          {"eta", c.eta},
          {"seed_b", c.seed_b}}},
    };
}

inline void from_json(const json& j, RunConfig& c) {
    if (j.contains("model")) {
        const auto& m = j.at("model");
        c.model_kind = m.value("kind", c.model_kind);
        c.alpha = m.value("alpha", c.alpha);
        c.beta = m.value("beta", c.beta);
        c.r = m.value("r", c.r);
        c.epsilon = m.value("epsilon", c.epsilon);
    }
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        c.T = g.value("T", c.T);
        c.dt = g.value("dt", c.dt);
    }
    if (j.contains("mc")) {
        const auto& m = j.at("mc");
        c.particles = m.value("particles", c.particles);
        c.seed = m.value("seed", c.seed);
        c.threads = m.value("threads", c.threads);
    }
    if (j.contains("solver")) {
        const auto& s = j.at("solver");
        c.picard_tol = s.value("picard_tol", c.picard_tol);
        c.max_iters = s.value("max_iters", c.max_iters);
        c.damping = s.value("damping", c.damping);
        c.basis_degree = s.value("basis_degree", c.basis_degree);
        c.state_basis_degree = s.value("state_basis_degree", c.state_basis_degree);
        c.mode = s.value("mode", c.mode);
        c.terminal_bootstrap = s.value("terminal_bootstrap", c.terminal_bootstrap);
        c.mu_subsample = s.value("mu_subsample", c.mu_subsample);
    }
    if (j.contains("norm")) c.K = j.at("norm").value("K", c.K);
    if (j.contains("experiment")) {
        const auto& e = j.at("experiment");
        c.x_values = e.value("x_values", c.x_values);
        c.xtilde_grid = e.value("xtilde_grid", c.xtilde_grid);
        c.deltas = e.value("deltas", c.deltas);
        c.n_list = e.value("n_list", c.n_list);
        c.checkpoints = e.value("checkpoints", c.checkpoints);
        if (e.contains("xi")) e.at("xi").get_to(c.xi);
        if (e.contains("eta")) e.at("eta").get_to(c.eta);
        c.seed_b = e.value("seed_b", c.seed_b);
    }
}

inline void validate(const RunConfig& c) {
    if (c.model_kind != "lq" && c.model_kind != "lq_cubic")
        throw ConfigError("unknown model kind: " + c.model_kind);
    if (!(c.alpha > 0.0)) throw ConfigError("model.alpha must be positive");
    if (!(c.r > 0.0)) throw ConfigError("model.r must be positive");
    if (!(c.dt > 0.0)) throw ConfigError("grid.dt must be positive");
    if (!(c.horizon() > 0.0)) throw ConfigError("grid.T must be positive");
    if (c.particles < static_cast<std::size_t>(c.basis_degree) + 2)
        throw ConfigError("mc.particles must be at least basis_degree + 2");
    if (!(c.picard_tol > 0.0)) throw ConfigError("solver.picard_tol must be positive");
    if (!(c.damping > 0.0) || c.damping > 1.0) throw ConfigError("solver.damping must lie in (0,1]");
    if (c.mode != "mfg" && c.mode != "continuation")
        throw ConfigError("unknown solver mode: " + c.mode);
    if (c.xi.kind != "normal" && c.xi.kind != "constant" && c.xi.kind != "atoms")
        throw ConfigError("unknown xi kind: " + c.xi.kind);
    if (c.eta.kind != "ones" && c.eta.kind != "constant" && c.eta.kind != "normal")
        throw ConfigError("unknown eta kind: " + c.eta.kind);
    if (c.xi.kind == "atoms") {
        if (c.xi.atoms.empty() || c.xi.atoms.size() != c.xi.probs.size())
            throw ConfigError("xi atoms/probs must be nonempty and aligned");
        double s = 0.0;
        for (double p : c.xi.probs) s += p;
        if (std::abs(s - 1.0) > 1e-9) throw ConfigError("xi probs must sum to 1");
    }
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    RunConfig c = j.get<RunConfig>();
    validate(c);
    return c;
}

/// FNV-1a hash of the canonical serialized config, stamped into artifacts.
inline std::string config_hash(const RunConfig& c) {
    const std::string dump = json(c).dump();
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char ch : dump) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline HamiltonianModel make_model(const RunConfig& c) {
    if (c.model_kind == "lq") return make_lq_model(c.alpha, c.beta, c.r);
    return make_lq_cubic_model(c.alpha, c.beta, c.r, c.epsilon);
}

inline SolverConfig make_solver_config(const RunConfig& c) {
    SolverConfig s;
    s.grid = TimeGrid(c.horizon(), c.dt);
    s.particles = c.particles;
    s.seed = c.seed;
    s.basis_degree = c.basis_degree;
    s.state_basis_degree = c.state_basis_degree;
    s.picard_tol = c.picard_tol;
    s.max_iters = c.max_iters;
    s.damping = c.damping;
    s.threads = c.threads;
    s.mu_subsample = c.mu_subsample;
    s.terminal_bootstrap = c.terminal_bootstrap;
    return s;
}

inline std::vector<double> draw_xi(const RunConfig& c, std::uint64_t seed) {
    std::vector<double> xi(c.particles);
    if (c.xi.kind == "normal") {
        for (std::size_t i = 0; i < xi.size(); ++i) {
            const auto key = detail::stream_key(seed, detail::StreamKind::initial, i);
            xi[i] = c.xi.mean + c.xi.stddev * detail::normal_at(key, 0);
        }
    } else if (c.xi.kind == "constant") {
        std::fill(xi.begin(), xi.end(), c.xi.value);
    } else {
        // stratified atom fill: exact frequencies, deterministic in the index
        std::size_t lo = 0;
        double cum = 0.0;
        for (std::size_t a = 0; a < c.xi.atoms.size(); ++a) {
            cum += c.xi.probs[a];
            const std::size_t hi = a + 1 == c.xi.atoms.size()
                                       ? xi.size()
                                       : static_cast<std::size_t>(std::llround(
                                             cum * static_cast<double>(xi.size())));
            for (std::size_t i = lo; i < hi && i < xi.size(); ++i) xi[i] = c.xi.atoms[a];
            lo = hi;
        }
    }
    return xi;
}

inline std::vector<double> draw_eta(const RunConfig& c, std::uint64_t seed) {
    std::vector<double> eta(c.particles);
    if (c.eta.kind == "ones") {
        std::fill(eta.begin(), eta.end(), 1.0);
    } else if (c.eta.kind == "constant") {
        std::fill(eta.begin(), eta.end(), c.eta.value);
    } else {
        for (std::size_t i = 0; i < eta.size(); ++i) {
            const auto key = detail::stream_key(seed, detail::StreamKind::direction, i);
            eta[i] = c.eta.mean + c.eta.stddev * detail::normal_at(key, 0);
        }
    }
    return eta;
}

namespace io {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ConfigError("cannot write artifact: " + p.string());
    out << text;
}

inline void write_json(const std::filesystem::path& p, const json& j) {
    write_text(p, j.dump(2) + "\n");
}

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace io

/// Two-set-up statistical comparison: same law of the initial samples, two
/// independent noise streams; empirical laws of X, Y and the running integral
/// of Z compared in W1 at the checkpoints against a 3/sqrt(N) band.
struct UniquenessReport {
    std::vector<double> checkpoints;
    std::vector<double> w1_x, w1_y, w1_iz;
    double tolerance = 0.0;
    bool passed = false;
};

inline UniquenessReport weak_uniqueness_test(const RunConfig& cfg, std::uint64_t seed_a,
                                             std::uint64_t seed_b) {
    const HamiltonianModel model = make_model(cfg);
    SolverConfig sc = make_solver_config(cfg);
    sc.extract_z = true;

    auto solve_one = [&](std::uint64_t seed) {
        SolverConfig s = sc;
        s.seed = seed;
        std::vector<double> xi = draw_xi(cfg, seed);
        EquilibriumSolution eq = solve_equilibrium(model, xi, s);
        struct Snapshot {
            std::vector<std::vector<double>> x, y, iz;
        } snap;
        const std::size_t n = eq.bundle.particles;
        std::vector<double> iz(n, 0.0);
        std::size_t prev_node = 0;
        for (double t : cfg.checkpoints) {
            const std::size_t kc = sc.grid.node_at(t);
            for (std::size_t k = prev_node; k < kc; ++k)
                for (std::size_t i = 0; i < n; ++i) iz[i] += eq.bundle.Z(i, k) * sc.grid.dt;
            prev_node = kc;
            snap.x.push_back(eq.bundle.X.column(kc));
            snap.y.push_back(eq.bundle.Y.column(kc));
            snap.iz.push_back(iz);
        }
        return snap;
    };

    auto a = solve_one(seed_a);
    auto b = solve_one(seed_b);

    UniquenessReport rep;
    rep.checkpoints = cfg.checkpoints;
    rep.tolerance = 3.0 / std::sqrt(static_cast<double>(cfg.particles));
    rep.passed = true;
    for (std::size_t c = 0; c < cfg.checkpoints.size(); ++c) {
        const double wx = wasserstein_1d(1, EmpiricalMeasure(a.x[c]), EmpiricalMeasure(b.x[c]));
        const double wy = wasserstein_1d(1, EmpiricalMeasure(a.y[c]), EmpiricalMeasure(b.y[c]));
        const double wz = wasserstein_1d(1, EmpiricalMeasure(a.iz[c]), EmpiricalMeasure(b.iz[c]));
        rep.w1_x.push_back(wx);
        rep.w1_y.push_back(wy);
        rep.w1_iz.push_back(wz);
        if (wx > rep.tolerance || wy > rep.tolerance || wz > rep.tolerance) rep.passed = false;
    }
    return rep;
}

/// Grid-discretization sweep: for each resolution n the initial samples are
/// projected on the grid, the measure derivative is recomputed at the atoms
/// containing the probe points, and the sup-gap against the continuous-law
/// field is tabulated.
struct ConvergenceRow {
    int n = 0;
    double sup_gap = 0.0;
    std::vector<double> psi_n;
};

struct ConvergenceReport {
    std::vector<double> xtilde;
    std::vector<double> psi_ref;
    std::vector<ConvergenceRow> rows;
};

inline ConvergenceReport discretization_convergence(const RunConfig& cfg,
                                                    const std::vector<int>& n_list) {
    if (n_list.empty()) throw ConfigError("convergence needs a nonempty n list");
    for (std::size_t i = 1; i < n_list.size(); ++i)
        if (n_list[i] <= n_list[i - 1]) throw ConfigError("n list must increase");

    const HamiltonianModel model = make_model(cfg);
    SolverConfig sc = make_solver_config(cfg);
    sc.extract_z = false;
    const double x = cfg.x_values.empty() ? 1.0 : cfg.x_values[0];
    std::vector<double> grid = cfg.xtilde_grid;
    if (grid.empty()) grid = {-0.6, 0.1, 0.8};

    std::vector<double> xi = draw_xi(cfg, cfg.seed);

    ConvergenceReport rep;
    rep.xtilde = grid;
    {
        EquilibriumSolution eq = solve_equilibrium(model, xi, sc);
        auto field = lions_field(model, x, eq, grid, sc);
        rep.psi_ref = field.psi;
    }

    for (int n : n_list) {
        std::vector<double> xi_n = discretize_grid(xi, n);
        EquilibriumSolution eq_n = solve_equilibrium(model, xi_n, sc);
        const DiscreteLaw law = discrete_law(eq_n);
        ConvergenceRow row;
        row.n = n;
        for (std::size_t gpt = 0; gpt < grid.size(); ++gpt) {
            const double atom = static_cast<double>(cell_index(grid[gpt], n)) / n;
            std::size_t idx = law.atoms.size();
            for (std::size_t a = 0; a < law.atoms.size(); ++a)
                if (law.atoms[a] == atom) {
                    idx = a;
                    break;
                }
            if (idx == law.atoms.size())
                throw ZeroProbabilityAtom("no samples fell in the probe cell");
            auto res = solve_nabla_discrete(model, x, eq_n, idx, sc);
            row.psi_n.push_back(res.dmu_at_atom);
            row.sup_gap = std::max(row.sup_gap, std::abs(res.dmu_at_atom - rep.psi_ref[gpt]));
        }
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

/// Oracle battery for the quadratic model: affine-ansatz coefficients against
/// the solved systems, the gradient identity, the measure-derivative field,
/// the finite-difference quotient, and the discrete-atom scaling relation.
struct ValidationRow {
    std::string name;
    double value = 0.0;
    double target = 0.0;
    double tol = 0.0;
    bool passed = false;
};

struct LqValidationReport {
    std::vector<ValidationRow> rows;
    bool passed = true;

    void add(const std::string& name, double value, double target, double tol) {
        const bool ok = std::abs(value - target) <= tol;
        rows.push_back({name, value, target, tol, ok});
        passed = passed && ok;
    }
};

inline LqValidationReport validate_lq(const RunConfig& cfg) {
    if (cfg.model_kind != "lq") throw ConfigError("validate-lq requires the lq model");
    const HamiltonianModel model = make_model(cfg);
    const RiccatiCoefficients rc = lq_riccati(cfg.alpha, cfg.beta, cfg.r);
    SolverConfig sc = make_solver_config(cfg);
    sc.extract_z = false;

    LqValidationReport rep;

    // Population solve from the configured law; slope of Y0 on X0.
    std::vector<double> xi = draw_xi(cfg, cfg.seed);
    EquilibriumSolution eq = solve_equilibrium(model, xi, sc);
    {
        const std::size_t n = eq.bundle.particles;
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double xv = eq.bundle.X(i, 0), yv = eq.bundle.Y(i, 0);
            sx += xv;
            sy += yv;
            sxx += xv * xv;
            sxy += xv * yv;
        }
        const auto dn = static_cast<double>(n);
        const double slope = (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
        rep.add("slope_y0_on_x0_vs_p", slope, rc.p, 0.02 * std::abs(rc.p));
    }

    // Start-point values against point-mass laws.
    {
        RunConfig c0 = cfg;
        c0.xi.kind = "constant";
        c0.xi.value = 0.0;
        std::vector<double> xi0 = draw_xi(c0, cfg.seed);
        EquilibriumSolution eq0 = solve_equilibrium(model, xi0, sc);
        RepresentativeSolution rep0 = solve_representative(model, 1.0, eq0, sc);
        rep.add("value_v_at_1_dirac0_vs_p", rep0.y0, rc.p, 0.02 * std::abs(rc.p));

        c0.xi.value = 1.0;
        std::vector<double> xi1 = draw_xi(c0, cfg.seed);
        EquilibriumSolution eq1 = solve_equilibrium(model, xi1, sc);
        RepresentativeSolution rep1 = solve_representative(model, 1.0, eq1, sc);
        rep.add("value_v_at_1_dirac1_vs_p_plus_q", rep1.y0, rc.p + rc.q,
                0.02 * std::abs(rc.p + rc.q));

        // Gradient identity: central difference of the discounted cost in x.
        const double h = 0.05;
        RepresentativeSolution rp = solve_representative(model, 1.0 + h, eq0, sc);
        RepresentativeSolution rm = solve_representative(model, 1.0 - h, eq0, sc);
        const double vp = value_v(model, 1.0 + h, eq0, rp.bundle, sc).value;
        const double vm = value_v(model, 1.0 - h, eq0, rm.bundle, sc).value;
        const double fd = (vp - vm) / (2.0 * h);
        rep.add("dV_dx_fd_vs_value", fd, rep0.y0, 0.03 * std::abs(rep0.y0));
    }

    // Measure-derivative field on a probe grid.
    {
        std::vector<double> grid = cfg.xtilde_grid;
        if (grid.empty())
            for (int j = 0; j < 9; ++j) grid.push_back(-2.0 + 0.5 * j);
        auto field = lions_field(model, 1.0, eq, grid, sc);
        double worst = 0.0, band = 0.0;
        for (std::size_t j = 0; j < field.psi.size(); ++j) {
            worst = std::max(worst, std::abs(field.psi[j] - rc.q));
            band = std::max(band, 3.0 * field.se[j]);
        }
        rep.add("psi_field_max_gap_vs_q", worst, 0.0, 0.02 * std::abs(rc.q) + band);

        // Directional derivative against the finite-difference quotient.
        std::vector<double> eta(cfg.particles, 1.0);
        std::vector<double> one_delta{0.1};
        auto fd = fd_check(model, 1.0, xi, eta, one_delta, sc);
        rep.add("fd_quotient_vs_variation", fd.rows[0].quotient, fd.e_psi_eta,
                0.03 * std::abs(fd.e_psi_eta));
    }

    // Discrete-atom scaling relation on a two-atom law.
    {
        RunConfig c2 = cfg;
        c2.xi.kind = "atoms";
        c2.xi.atoms = {0.0, 1.0};
        c2.xi.probs = {0.5, 0.5};
        std::vector<double> xi2 = draw_xi(c2, cfg.seed);
        EquilibriumSolution eq2 = solve_equilibrium(model, xi2, sc);
        auto nd = solve_nabla_discrete(model, 1.0, eq2, 0, sc);
        rep.add("atom_relation_gap", nd.relation_gap, 0.0,
                0.02 * std::abs(nd.delta_route_dY0) + 1e-12);
        rep.add("dmu_at_atom_vs_q", nd.dmu_at_atom, rc.q, 0.02 * std::abs(rc.q));
    }

    return rep;
}

// ---------------------------------------------------------------------------
// Subcommand runners: each writes its artifacts and returns a metrics object.

namespace detail_run {

inline json stamp(const RunConfig& cfg, const std::string& subcommand) {
    json j;
    j["subcommand"] = subcommand;
    j["version"] = kVersion;
    j["seed"] = cfg.seed;
    j["config_hash"] = config_hash(cfg);
    j["config"] = cfg;
    return j;
}

inline void write_series_csv(const std::filesystem::path& p, const EquilibriumSolution& eq) {
    const std::size_t n = eq.bundle.particles;
    std::ostringstream os;
    os << "t,mean_x,var_x,mean_y,mean_z\n";
    for (std::size_t k = 0; k <= eq.bundle.grid.M; ++k) {
        double mx = 0, vx = 0, my = 0, mz = 0;
        for (std::size_t i = 0; i < n; ++i) {
            mx += eq.bundle.X(i, k);
            my += eq.bundle.Y(i, k);
            if (eq.bundle.has_z()) mz += eq.bundle.Z(i, k);
        }
        mx /= static_cast<double>(n);
        my /= static_cast<double>(n);
        mz /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = eq.bundle.X(i, k) - mx;
            vx += d * d;
        }
        vx /= static_cast<double>(n);
        os << io::fmt(eq.bundle.grid.node(k)) << ',' << io::fmt(mx) << ',' << io::fmt(vx) << ','
           << io::fmt(my) << ',' << io::fmt(mz) << '\n';
    }
    io::write_text(p, os.str());
}

inline json run_solve(const RunConfig& cfg, const std::filesystem::path& out) {
    const HamiltonianModel model = make_model(cfg);
    SolverConfig sc = make_solver_config(cfg);
    std::vector<double> xi = draw_xi(cfg, cfg.seed);

    json metrics;
    if (cfg.mode == "continuation") {
        // Cast the model to the general monotone form and run the homotopy.
        const double kappa = std::min(cfg.alpha, 1.0);
        const double ell = std::max({cfg.alpha, 1.0 + cfg.r, std::abs(cfg.beta)});
        GeneralFn G = [&model](double, double x, double y, const PairLaw& law) {
            (void)x;
            (void)law;
            (void)model;
            return -y;
        };
        const double alpha = cfg.alpha, beta = cfg.beta, r = cfg.r;
        GeneralFn F = [alpha, beta, r](double, double x, double y, const PairLaw& law) {
            return alpha * x + beta * law.x_mean - r * y;
        };
        GeneralFbsdeProblem pb(G, F, 1.0, Array2D{}, cfg.norm_weight(), ell, kappa, xi);
        ContinuationSolution sol = continuation_solve(pb, sc);
        const std::size_t n = sol.bundle.particles;
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double xv = sol.bundle.X(i, 0), yv = sol.bundle.Y(i, 0);
            sx += xv;
            sy += yv;
            sxx += xv * xv;
            sxy += xv * yv;
        }
        const auto dn = static_cast<double>(n);
        const double denom = dn * sxx - sx * sx;
        metrics["y0_slope"] = denom > 1e-12 ? (dn * sxy - sx * sy) / denom : 0.0;
        metrics["y0_mean"] = sy / dn;
        metrics["iterations"] = sol.iterations;
        metrics["lambda_levels"] = sol.lambda_levels;
        metrics["residuals"] = sol.residual_history;
        json ratios = json::array();
        for (std::size_t i = 1; i < sol.residual_history.size(); ++i)
            if (sol.residual_history[i - 1] > 0.0)
                ratios.push_back(sol.residual_history[i] / sol.residual_history[i - 1]);
        metrics["contraction_ratios"] = ratios;
        return metrics;
    }

    EquilibriumSolution eq = solve_equilibrium(model, xi, sc);
    write_series_csv(out / "series.csv", eq);

    json y0s = json::array(), values = json::array(), tails = json::array();
    for (double x : cfg.x_values) {
        RepresentativeSolution rp = solve_representative(model, x, eq, sc);
        ValueEstimate ve = value_v(model, x, eq, rp.bundle, sc);
        y0s.push_back(rp.y0);
        values.push_back(ve.value);
        tails.push_back(ve.tail_bound);
    }
    metrics["x_values"] = cfg.x_values;
    metrics["y0"] = y0s;
    metrics["value_v"] = values;
    metrics["tail_bound"] = tails;
    metrics["iterations"] = eq.iterations;
    metrics["residuals"] = eq.residual_history;
    metrics["contraction_ratios"] = json::array();
    return metrics;
}

inline json run_lions(const RunConfig& cfg, const std::filesystem::path& out) {
    const HamiltonianModel model = make_model(cfg);
    SolverConfig sc = make_solver_config(cfg);
    sc.extract_z = false;
    std::vector<double> xi = draw_xi(cfg, cfg.seed);
    std::vector<double> grid = cfg.xtilde_grid;
    if (grid.empty())
        for (int j = 0; j < 9; ++j) grid.push_back(-2.0 + 0.5 * j);
    const double x = cfg.x_values.empty() ? 1.0 : cfg.x_values[0];

    EquilibriumSolution eq = solve_equilibrium(model, xi, sc);
    auto field = lions_field(model, x, eq, grid, sc);

    std::ostringstream os;
    os << "xtilde,psi\n";
    for (std::size_t j = 0; j < grid.size(); ++j)
        os << io::fmt(grid[j]) << ',' << io::fmt(field.psi[j]) << '\n';
    io::write_text(out / "psi.csv", os.str());

    json metrics;
    metrics["x"] = x;
    metrics["xtilde"] = field.xtilde;
    metrics["psi"] = field.psi;
    metrics["se"] = field.se;
    return metrics;
}

inline json run_fdcheck(const RunConfig& cfg, const std::filesystem::path& out) {
    const HamiltonianModel model = make_model(cfg);
    SolverConfig sc = make_solver_config(cfg);
    std::vector<double> xi = draw_xi(cfg, cfg.seed);
    std::vector<double> eta = draw_eta(cfg, cfg.seed);
    const double x = cfg.x_values.empty() ? 1.0 : cfg.x_values[0];

    auto report = fd_check(model, x, xi, eta, cfg.deltas, sc);
    json rows = json::array();
    for (const auto& row : report.rows)
        rows.push_back({{"delta", row.delta},
                        {"quotient", row.quotient},
                        {"e_psi_eta", report.e_psi_eta},
                        {"gap", row.gap}});
    json metrics;
    metrics["base_value"] = report.base_value;
    metrics["e_psi_eta"] = report.e_psi_eta;
    metrics["rows"] = rows;
    metrics["trend_slope"] = report.trend_slope;
    metrics["common_random_numbers"] = report.common_random_numbers;
    io::write_json(out / "fdcheck.json", metrics);
    return metrics;
}

inline json run_uniqueness(const RunConfig& cfg, const std::filesystem::path& out) {
    const std::uint64_t seed_b = cfg.seed_b != 0 ? cfg.seed_b : cfg.seed + 1;
    auto rep = weak_uniqueness_test(cfg, cfg.seed, seed_b);
    json metrics;
    metrics["checkpoints"] = rep.checkpoints;
    metrics["w1_x"] = rep.w1_x;
    metrics["w1_y"] = rep.w1_y;
    metrics["w1_iz"] = rep.w1_iz;
    metrics["tolerance"] = rep.tolerance;
    metrics["passed"] = rep.passed;
    io::write_json(out / "uniqueness.json", metrics);
    return metrics;
}

inline json run_validate_lq(const RunConfig& cfg, const std::filesystem::path& out) {
    auto rep = validate_lq(cfg);
    json rows = json::array();
    for (const auto& row : rep.rows)
        rows.push_back({{"name", row.name},
                        {"value", row.value},
                        {"target", row.target},
                        {"tol", row.tol},
                        {"passed", row.passed}});
    json metrics;
    metrics["rows"] = rows;
    metrics["passed"] = rep.passed;
    io::write_json(out / "validate.json", metrics);
    return metrics;
}

inline json run_convergence(const RunConfig& cfg, const std::filesystem::path& out) {
    auto rep = discretization_convergence(cfg, cfg.n_list);
    json rows = json::array();
    for (const auto& row : rep.rows)
        rows.push_back({{"n", row.n}, {"sup_gap", row.sup_gap}, {"psi_n", row.psi_n}});
    json metrics;
    metrics["xtilde"] = rep.xtilde;
    metrics["psi_ref"] = rep.psi_ref;
    metrics["rows"] = rows;
    io::write_json(out / "convergence.json", metrics);
    return metrics;
}

}  // namespace detail_run

/// Dispatch one subcommand against a config file, writing artifacts and a
/// reproducibility stamp under out_dir. Returns the process exit code.
inline int run(const std::string& subcommand, const std::string& config_path,
               std::optional<std::uint64_t> seed_override, const std::string& out_dir) {
    namespace fs = std::filesystem;
    const fs::path out(out_dir);
    RunConfig cfg;
    try {
        cfg = load_config(config_path);
        if (seed_override) cfg.seed = *seed_override;
        fs::create_directories(out);

        json summary = detail_run::stamp(cfg, subcommand);
        if (subcommand == "solve")
            summary["metrics"] = detail_run::run_solve(cfg, out);
        else if (subcommand == "lions")
            summary["metrics"] = detail_run::run_lions(cfg, out);
        else if (subcommand == "fdcheck")
            summary["metrics"] = detail_run::run_fdcheck(cfg, out);
        else if (subcommand == "uniqueness")
            summary["metrics"] = detail_run::run_uniqueness(cfg, out);
        else if (subcommand == "validate-lq")
            summary["metrics"] = detail_run::run_validate_lq(cfg, out);
        else if (subcommand == "convergence")
            summary["metrics"] = detail_run::run_convergence(cfg, out);
        else
            throw ConfigError("unknown subcommand: " + subcommand);

        io::write_json(out / "summary.json", summary);
        if (subcommand == "validate-lq" && !summary["metrics"]["passed"].get<bool>())
            return kExitValidationFailed;
        if (subcommand == "uniqueness" && !summary["metrics"]["passed"].get<bool>())
            return kExitValidationFailed;
        return kExitOk;
    } catch (const ConfigError& e) {
        std::error_code ec;
        fs::create_directories(out, ec);
        if (!ec) io::write_json(out / "error.json", json{{"error", {{"type", "config"}, {"message", e.what()}}}});
        return kExitConfig;
    } catch (const InvalidParameter& e) {
        std::error_code ec;
        fs::create_directories(out, ec);
        if (!ec) io::write_json(out / "error.json", json{{"error", {{"type", "config"}, {"message", e.what()}}}});
        return kExitConfig;
    } catch (const NoConvergence& e) {
        std::error_code ec;
        fs::create_directories(out, ec);
        if (!ec) {
            json err{{"error",
                      {{"type", "no_convergence"},
                       {"message", e.what()},
                       {"residual_history", e.residual_history},
                       {"lambda", e.lambda}}}};
            io::write_json(out / "error.json", err);
        }
        return kExitNoConvergence;
    }
}

}  // namespace mfg::harness
