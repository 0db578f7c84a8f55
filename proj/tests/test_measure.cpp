#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>

#include "mfg/measure.hpp"

using namespace mfg;

TEST_CASE("wasserstein distances on atomic measures") {
    const auto d0 = EmpiricalMeasure::dirac(0.0);
    const auto d1 = EmpiricalMeasure::dirac(1.0);
    CHECK(wasserstein_1d(2, d0, d1) == Catch::Approx(1.0));
    CHECK(wasserstein_1d(1, d0, d1) == Catch::Approx(1.0));

    EmpiricalMeasure mu({0.0, 1.0});
    EmpiricalMeasure nu({0.5, 0.5});
    CHECK(wasserstein_1d(1, mu, nu) == Catch::Approx(0.5));

    EmpiricalMeasure any({0.3, -1.2, 4.0, 0.3});
    CHECK(wasserstein_1d(2, any, any) == Catch::Approx(0.0).margin(1e-15));

    CHECK_THROWS_AS(wasserstein_1d(3, mu, nu), UnsupportedOrder);
}

TEST_CASE("wasserstein handles weighted atoms") {
    EmpiricalMeasure mu({0.0, 1.0}, {0.25, 0.75});
    EmpiricalMeasure nu({1.0});
    // quantile coupling: 0.25 mass moves distance 1
    CHECK(wasserstein_1d(1, mu, nu) == Catch::Approx(0.25));
    CHECK(wasserstein_1d(2, mu, nu) == Catch::Approx(0.5));
}

TEST_CASE("triangle inequality on random atomic triples") {
    std::mt19937_64 rng(71);
    std::normal_distribution<double> z(0.0, 1.5);
    for (int rep = 0; rep < 40; ++rep) {
        auto draw = [&](std::size_t n) {
            std::vector<double> a(n);
            for (auto& v : a) v = z(rng);
            return EmpiricalMeasure(a);
        };
        const auto mu = draw(7), nu = draw(5), la = draw(9);
        for (int p : {1, 2}) {
            const double lhs = wasserstein_1d(p, mu, nu);
            const double rhs = wasserstein_1d(p, mu, la) + wasserstein_1d(p, la, nu);
            CHECK(lhs <= rhs + 1e-12);
        }
    }
}

TEST_CASE("cell index function") {
    CHECK(cell_index(0.7, 2) == 1);
    CHECK(cell_index(-0.1, 2) == -1);
    CHECK(cell_index(0.0, 5) == 0);
    CHECK_THROWS_AS(cell_index(2.0, 2), OutOfRange);
    CHECK_THROWS_AS(cell_index(-2.5, 2), OutOfRange);
}

TEST_CASE("grid projection of samples") {
    CHECK(discretize_grid(std::vector<double>{0.73}, 2) == std::vector<double>{0.5});
    CHECK(discretize_grid(std::vector<double>{-5.0}, 2) == std::vector<double>{-4.0});
    CHECK(discretize_grid(std::vector<double>{0.2, 0.7, -0.9}, 2) ==
          std::vector<double>({0.0, 0.5, -1.0}));
    // the bands between n and n^2 in absolute value fall through to zero
    CHECK(discretize_grid(std::vector<double>{3.0}, 2) == std::vector<double>{0.0});
    CHECK(discretize_grid(std::vector<double>{-3.0}, 2) == std::vector<double>{0.0});
    CHECK(discretize_grid(std::vector<double>{7.3}, 2) == std::vector<double>{4.0});
    // left endpoint of the covered range belongs to the first cell
    CHECK(discretize_grid(std::vector<double>{-2.0}, 2) == std::vector<double>{-2.0});
}

TEST_CASE("moments") {
    EmpiricalMeasure half({0.0, 1.0});
    CHECK(moment(half, 1) == Catch::Approx(0.5));
    EmpiricalMeasure dc = EmpiricalMeasure::dirac(-1.7);
    CHECK(moment(dc, 3) == Catch::Approx(std::pow(-1.7, 3)));
    EmpiricalMeasure pm({-1.0, 1.0});
    CHECK(moment(pm, 2) == Catch::Approx(1.0));
    CHECK_THROWS_AS(moment(pm, 0), InvalidParameter);
}

TEST_CASE("measure invariants") {
    CHECK_THROWS_AS(EmpiricalMeasure(std::vector<double>{}), InvalidParameter);
    CHECK_THROWS_AS(EmpiricalMeasure({0.0, 1.0}, {0.5, 0.6}), InvalidParameter);
    CHECK_THROWS_AS(EmpiricalMeasure({0.0, 1.0}, {-0.1, 1.1}), InvalidParameter);
    const double nanv = std::nan("");
    CHECK_THROWS_AS(EmpiricalMeasure(std::vector<double>{nanv}), InvalidParameter);
}

TEST_CASE("mean-square convergence of the grid projection") {
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> z(0.0, 1.0);
    std::vector<double> samples(20000);
    for (auto& v : samples) v = z(rng);

    double prev_rms = 1e18;
    for (int n : {2, 4, 8, 16}) {
        const auto proj = discretize_grid(samples, n);
        double ss = 0.0;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const double d = proj[i] - samples[i];
            ss += d * d;
        }
        const double rms = std::sqrt(ss / static_cast<double>(samples.size()));
        CHECK(rms < prev_rms);
        prev_rms = rms;

        // coupling bound: W2 between the two empirical laws is at most the
        // root-mean-square pointwise gap
        const double w2 = wasserstein_1d(2, EmpiricalMeasure(samples), EmpiricalMeasure(proj));
        CHECK(w2 <= rms + 1e-12);
    }
}

TEST_CASE("serialization round trip") {
    EmpiricalMeasure mu({0.25, -1.5, 3.0});
    std::stringstream ss;
    write_measure(ss, mu);
    const auto back = read_measure(ss);
    REQUIRE(back.size() == mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) CHECK(back.atoms()[i] == mu.atoms()[i]);

    EmpiricalMeasure wt({0.0, 2.0}, {0.3, 0.7});
    std::stringstream s2;
    write_measure(s2, wt);
    const auto back2 = read_measure(s2);
    REQUIRE_FALSE(back2.uniform());
    CHECK(back2.weights()[1] == Catch::Approx(0.7));
    CHECK(back2.mean() == Catch::Approx(wt.mean()));
}
