#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "meanstop/phi.hpp"

namespace meanstop {
namespace {

GridFunction random_density(std::mt19937_64& rng, const TorusGrid& g) {
    std::normal_distribution<double> z(0.0, 1.0);
    std::vector<double> v(g.n_cells());
    const double a1 = z(rng), b1 = z(rng), a2 = z(rng), shift = 0.3 * z(rng);
    for (int j = 0; j < g.n_cells(); ++j) {
        const double x = g.node(j);
        v[j] = shift + a1 * std::sin(2 * M_PI * x) + b1 * std::cos(2 * M_PI * x) + a2 * std::sin(6 * M_PI * x) +
               0.3 * z(rng);
    }
    return GridFunction(g, std::move(v));
}

// Projected Gauss-Seidel on A f = mu, f <= 0: the textbook solver for this box-constrained QP.
std::vector<double> psor(const GridFunction& mu) {
    const int n = mu.grid.n_cells();
    const double c = 1.0 / (mu.grid.h() * mu.grid.h()), d = 1.0 + 2.0 * c;
    std::vector<double> f(n, 0.0);
    for (int sweep = 0; sweep < 200000; ++sweep) {
        double change = 0.0;
        for (int j = 0; j < n; ++j) {
            const double v = std::min(0.0, (mu.values[j] + c * (f[(j + 1) % n] + f[(j + n - 1) % n])) / d);
            change = std::max(change, std::abs(v - f[j]));
            f[j] = v;
        }
        if (change < 1e-15) break;
    }
    return f;
}

TEST(PhiSolve, NonnegativeDensityGivesZero) {
    const TorusGrid g(32);
    std::vector<double> v(32);
    for (int j = 0; j < 32; ++j) v[j] = 0.5 + 0.4 * std::sin(2 * M_PI * g.node(j));
    const PhiResult r = phi_solve(GridFunction(g, v));
    EXPECT_EQ(r.value, 0.0);
    for (double f : r.f_hat.values) EXPECT_EQ(f, 0.0);
    EXPECT_EQ(phi_solve(GridFunction(g)).value, 0.0);
}

TEST(PhiSolve, NegativeConstant) {
    const TorusGrid g(40);
    for (double c : {0.5, 1.0, 3.0}) {
        const PhiResult r = phi_solve(GridFunction(g, std::vector<double>(40, -c)));
        EXPECT_NEAR(r.value, 0.5 * c * c, 1e-8);
        for (double f : r.f_hat.values) EXPECT_NEAR(f, -c, 1e-10);
        EXPECT_TRUE(r.exact);
    }
}

TEST(PhiSolve, MatchesProjectedGaussSeidelOracle) {
    std::mt19937_64 rng(4);
    const TorusGrid g(48);
    for (int s = 0; s < 10; ++s) {
        const GridFunction mu = random_density(rng, g);
        const PhiResult r = phi_solve(mu);
        const auto f = psor(mu);
        double val = 0.0;
        for (int j = 0; j < 48; ++j) {
            EXPECT_NEAR(r.f_hat.values[j], f[j], 1e-9);
            val += 0.5 * g.h() * mu.values[j] * f[j];
        }
        EXPECT_NEAR(r.value, val, 1e-10);
        EXPECT_TRUE(r.exact);
        EXPECT_FALSE(r.fallback);
    }
}

TEST(PhiSolve, ValueIdentitiesAndSign) {
    std::mt19937_64 rng(5);
    const TorusGrid g(64);
    for (int s = 0; s < 20; ++s) {
        const GridFunction mu = random_density(rng, g);
        const PhiResult r = phi_solve(mu);
        EXPECT_GE(r.value, 0.0);
        EXPECT_NEAR(r.value, 0.5 * h1_norm_sq(r.f_hat), 1e-8);
        for (double f : r.f_hat.values) EXPECT_LE(f, 0.0);
    }
}

TEST(PhiSolve, NonIncreasingInTheDensityOrder) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 0.8);
    const TorusGrid g(48);
    for (int s = 0; s < 30; ++s) {
        const GridFunction lo = random_density(rng, g);
        GridFunction hi = lo;
        for (double& v : hi.values) v += u(rng);
        EXPECT_GE(phi_solve(lo).value, phi_solve(hi).value - 1e-12);
    }
}

TEST(PhiSolve, VariationalInequality) {
    // <mu, k> - <f_hat, k>_{H^1} <= 0 for every feasible k <= 0.
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const TorusGrid g(48);
    const GridFunction mu = random_density(rng, g);
    const PhiResult r = phi_solve(mu);
    const auto af = detail::apply_a(g, r.f_hat.values);
    for (int s = 0; s < 100; ++s) {
        GridFunction k(g);
        for (double& v : k.values) v = -u(rng);
        const double nk = std::sqrt(h1_norm_sq(k));
        for (double& v : k.values) v /= nk;
        EXPECT_LE(detail::pairing(g, mu.values, k.values) - detail::pairing(g, af, k.values), 1e-8);
    }
}

TEST(PhiSolve, PenalizedValuesAreCauchyAsEpsilonHalves) {
    std::mt19937_64 rng(8);
    const TorusGrid g(48);
    const GridFunction mu = random_density(rng, g);
    std::vector<double> vals;
    std::vector<double> f(48, 0.0);
    int iters = 0;
    for (double eps = 1e-1; eps > 1e-5; eps *= 0.5) {
        ASSERT_TRUE(detail::penalized_newton(g, mu.values, eps, f, &iters));
        vals.push_back(0.5 * detail::pairing(g, mu.values, f));
    }
    for (std::size_t i = 2; i < vals.size(); ++i)
        EXPECT_LE(std::abs(vals[i] - vals[i - 1]), std::abs(vals[i - 1] - vals[i - 2]) + 1e-14);
    EXPECT_NEAR(vals.back(), phi_solve(mu).value, 1e-3);
}

TEST(PhiSolve, RejectsBadInput) {
    const TorusGrid g(8);
    EXPECT_THROW(phi_solve(GridFunction(g), 0.0), ParameterError);
    EXPECT_THROW(phi_solve(GridFunction(TorusGrid(2))), DomainError);
}

TEST(PhiGradient, ConstantModeAndPositiveInterior) {
    const TorusGrid g(32);
    const GridFunction mu(g, std::vector<double>(32, -1.5));
    const GridFunction one(g, std::vector<double>(32, 1.0));
    EXPECT_NEAR(detail::pairing(g, one.values, phi_solve(mu).f_hat.values), -1.5, 1e-10);
    EXPECT_LE(phi_gradient_check(mu, {one}), 1e-6);
    const GridFunction pos(g, std::vector<double>(32, 2.0));
    EXPECT_EQ(phi_gradient_check(pos, {one}), 0.0);
}

TEST(PhiGradient, RandomDirections) {
    std::mt19937_64 rng(9);
    const TorusGrid g(48);
    double worst = 0.0;
    for (int s = 0; s < 10; ++s) {
        const GridFunction mu = random_density(rng, g);
        worst = std::max(worst, phi_gradient_check(mu, {random_density(rng, g)}));
    }
    EXPECT_LE(worst, 1e-3);
}

TEST(PhiLipschitz, RatioAtMostOne) {
    std::mt19937_64 rng(10);
    const TorusGrid g(48);
    std::vector<std::pair<GridFunction, GridFunction>> pairs;
    for (int s = 0; s < 50; ++s) pairs.emplace_back(random_density(rng, g), random_density(rng, g));
    const double ratio = phi_lipschitz_check(pairs);
    EXPECT_LE(ratio, 1.0 + 1e-6);
    EXPECT_GT(ratio, 0.1);
    const GridFunction a(g, std::vector<double>(48, 1.0)), b(g, std::vector<double>(48, 2.0));
    EXPECT_EQ(phi_lipschitz_check({{a, b}, {a, a}}), 0.0);
}

TEST(PhiEnergy, SlackIsNonnegative) {
    std::mt19937_64 rng(11);
    const TorusGrid g(64);
    double worst = 1.0;
    for (int s = 0; s < 50; ++s) worst = std::min(worst, phi_energy_inequality_check(random_density(rng, g)));
    EXPECT_GE(worst, -1e-6);
    EXPECT_NEAR(phi_energy_inequality_check(GridFunction(g, std::vector<double>(64, -0.7))), 0.0, 1e-10);
    EXPECT_EQ(phi_energy_inequality_check(GridFunction(g, std::vector<double>(64, 0.7))), 0.0);
}

}  // namespace
}  // namespace meanstop
