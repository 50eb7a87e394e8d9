#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "meanstop/metrics.hpp"
#include "support.hpp"

using namespace meanstop;

namespace {

// Primal form of the dual norm: maximise sum c_j f_j over (f, s, t) with |f| <= s, |Df| <= t, s + t <= 1.
double bl_primal_oracle(const GridMeasure& m, const GridMeasure& n) {
    const int nc = m.size();
    const double h = m.grid().h();
    // f = fp - fm, then s, t.
    LinearProgram lp(2 * nc + 2);
    const int s = 2 * nc, t = 2 * nc + 1;
    using S = LinearProgram::Sense;
    for (int j = 0; j < nc; ++j) {
        const double c = m.mass()[j] - n.mass()[j];
        lp.set_objective(j, c);
        lp.set_objective(nc + j, -c);
        lp.add_row({j, nc + j, s}, {1, -1, -1}, S::Le, 0);
        lp.add_row({j, nc + j, s}, {-1, 1, -1}, S::Le, 0);
        const int jp = (j + 1) % nc;
        lp.add_row({jp, nc + jp, j, nc + j, t}, {1, -1, -1, 1, -h}, S::Le, 0);
        lp.add_row({jp, nc + jp, j, nc + j, t}, {-1, 1, 1, -1, -h}, S::Le, 0);
    }
    lp.add_row({s, t}, {1, 1}, S::Le, 1);
    return lp.maximize().value;
}

// Transport LP with circle cost.
double w1_transport_oracle(const GridMeasure& m, const GridMeasure& n) {
    const int nc = m.size();
    LinearProgram lp(nc * nc);
    using S = LinearProgram::Sense;
    for (int i = 0; i < nc; ++i)
        for (int j = 0; j < nc; ++j)
            lp.set_objective(i * nc + j, circle_distance(m.grid().node(i), m.grid().node(j)));
    for (int i = 0; i < nc; ++i) {
        std::vector<int> idx;
        std::vector<double> coef(nc, 1.0);
        for (int j = 0; j < nc; ++j) idx.push_back(i * nc + j);
        lp.add_row(idx, coef, S::Eq, m.mass()[i]);
    }
    for (int j = 0; j < nc; ++j) {
        std::vector<int> idx;
        std::vector<double> coef(nc, 1.0);
        for (int i = 0; i < nc; ++i) idx.push_back(i * nc + j);
        lp.add_row(idx, coef, S::Eq, n.mass()[j]);
    }
    return lp.minimize().value;
}

// Exhaustive sub-selection and permutation search.
double empirical_rho_bruteforce(const EmpiricalState& a, const EmpiricalState& b) {
    const int ka = a.k(), kb = b.k();
    std::vector<int> perm(kb);
    std::iota(perm.begin(), perm.end(), 0);
    double best = 1e300;
    do {
        double c = 0.0;
        for (int i = 0; i < ka; ++i) c += circle_distance(a[i], b[perm[i]]);
        best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return (kb - ka) / double(a.big_n()) + best / a.big_n();
}

// Circle W1 between two point clouds of equal size, by integrating |F - G - kappa| piecewise.
double point_cloud_w1(std::vector<double> x, std::vector<double> y) {
    const double w = 1.0 / x.size();
    std::vector<std::pair<double, double>> ev;
    for (double v : x) ev.push_back({v, w});
    for (double v : y) ev.push_back({v, -w});
    std::sort(ev.begin(), ev.end());
    // Piecewise-constant difference D on [0,1): segments between events.
    std::vector<double> len, val;
    double prev = 0.0, acc = 0.0;
    for (auto& e : ev) {
        len.push_back(e.first - prev);
        val.push_back(acc);
        acc += e.second;
        prev = e.first;
    }
    len.push_back(1.0 - prev);
    val.push_back(acc);
    // Weighted median of val with weights len minimises sum len |val - kappa|.
    std::vector<int> order(val.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return val[a] < val[b]; });
    double half = 0.5, cum = 0.0, kappa = 0.0;
    for (int i : order) {
        cum += len[i];
        if (cum >= half) {
            kappa = val[i];
            break;
        }
    }
    double s = 0.0;
    for (std::size_t i = 0; i < val.size(); ++i) s += len[i] * std::abs(val[i] - kappa);
    return s;
}

}  // namespace

TEST(BlDistance, IdentityIsZero) {
    std::mt19937_64 rng(1);
    auto m = fixtures::random_measure(rng, TorusGrid(16));
    EXPECT_EQ(bl_distance(m, m), 0.0);
}

TEST(BlDistance, OrderedPairEqualsMassDifference) {
    TorusGrid g(16);
    std::vector<double> a(16, 0.0), b(16, 0.0);
    a[0] = 0.3;
    b[0] = 0.3;
    b[8] = 0.2;
    EXPECT_NEAR(bl_distance(GridMeasure(g, a), GridMeasure(g, b)), 0.2, 1e-12);
}

TEST(BlDistance, TwoHalfDiracsAtQuarterDistance) {
    // Balancing |f| <= s against 0.25 t with s + t = 1 gives s = 1/9.
    TorusGrid g(64);
    auto m = GridMeasure::dirac(g, 0.0, 0.5);
    auto n = GridMeasure::dirac(g, 0.25, 0.5);
    EXPECT_NEAR(bl_distance(m, n), 1.0 / 9.0, 1e-10);
    EXPECT_NEAR(bl_primal_oracle(m, n), 1.0 / 9.0, 1e-10);
}

TEST(BlDistance, FrozenOfflineValues) {
    // Reference values from an independent HiGHS solve of the primal program.
    auto m1 = fixtures::pattern_measure(16, 7, 3, 11, 0.6), n1 = fixtures::pattern_measure(16, 5, 2, 13, 0.8);
    auto m2 = fixtures::pattern_measure(16, 3, 1, 7, 0.9), n2 = fixtures::pattern_measure(16, 11, 4, 9, 0.9);
    auto m3 = fixtures::pattern_measure(32, 13, 5, 17, 0.4), n3 = fixtures::pattern_measure(32, 9, 7, 19, 0.95);
    EXPECT_NEAR(bl_distance(m1, n1), 0.20000000000000012, 1e-9);
    EXPECT_NEAR(bl_distance(m2, n2), 0.026438840055861328, 1e-9);
    EXPECT_NEAR(bl_distance(m3, n3), 0.5499999999999999, 1e-9);
    EXPECT_NEAR(rho_distance(m1, n1), 0.20762707286771476, 1e-9);
    EXPECT_NEAR(rho_distance(m2, n2), 0.02643884005586145, 1e-9);
    EXPECT_NEAR(rho_distance(m3, n3), 0.5521595604395605, 1e-9);
}

TEST(BlDistance, MatchesPrimalOracleOnRandomPairs) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        TorusGrid g(12 + trial % 5);
        auto m = fixtures::random_measure(rng, g), n = fixtures::random_measure(rng, g);
        EXPECT_NEAR(bl_distance(m, n), bl_primal_oracle(m, n), 1e-9);
    }
}

TEST(BlDistance, MismatchedGridsRejected) {
    EXPECT_THROW(bl_distance(GridMeasure(TorusGrid(4)), GridMeasure(TorusGrid(5))), StructuralError);
}

TEST(BlDistance, MassGapLowerBoundAndMetricAxioms) {
    std::mt19937_64 rng(8);
    TorusGrid g(16);
    for (int trial = 0; trial < 200; ++trial) {
        auto m = fixtures::random_measure(rng, g), n = fixtures::random_measure(rng, g);
        EXPECT_GE(bl_distance(m, n), std::abs(m.total() - n.total()) - 1e-12);
        auto sub = fixtures::random_submeasure(rng, m);
        EXPECT_NEAR(bl_distance(sub, m), m.total() - sub.total(), 1e-10);
    }
    for (int trial = 0; trial < 30; ++trial) {
        auto a = fixtures::random_measure(rng, g), b = fixtures::random_measure(rng, g),
             c = fixtures::random_measure(rng, g);
        const double ab = bl_distance(a, b), ba = bl_distance(b, a);
        EXPECT_NEAR(ab, ba, 1e-8);
        EXPECT_LE(ab, bl_distance(a, c) + bl_distance(c, b) + 1e-8);
    }
}

TEST(W1Distance, BasicCases) {
    std::mt19937_64 rng(2);
    TorusGrid g(16);
    auto m = fixtures::random_measure(rng, g, 0.7);
    EXPECT_EQ(w1_distance(m, m), 0.0);
    TorusGrid g4(4);
    EXPECT_NEAR(w1_distance(GridMeasure::dirac(g4, 0.0, 1.0), GridMeasure::dirac(g4, 0.25, 1.0)), 0.25, 1e-15);
    EXPECT_NEAR(w1_distance(GridMeasure::dirac(g4, 0.0, 1.0), GridMeasure::dirac(g4, 0.75, 1.0)), 0.25, 1e-15);
    EXPECT_THROW(w1_distance(fixtures::random_measure(rng, g, 0.5), fixtures::random_measure(rng, g, 0.6)), DomainError);
}

TEST(W1Distance, MatchesTransportOracle) {
    std::mt19937_64 rng(5);
    TorusGrid g(16);
    for (int trial = 0; trial < 10; ++trial) {
        auto m = fixtures::random_measure(rng, g, 0.8), n = fixtures::random_measure(rng, g, 0.8);
        EXPECT_NEAR(w1_distance(m, n), w1_transport_oracle(m, n), 1e-10);
    }
}

TEST(W1Distance, ComparableToDualNorm) {
    // Centred 1-Lipschitz test functions have sup norm <= diam/2 = 1/4, hence d <= d1 <= (5/4) d.
    std::mt19937_64 rng(6);
    TorusGrid g(16);
    for (int trial = 0; trial < 50; ++trial) {
        auto m = fixtures::random_measure(rng, g, 0.9), n = fixtures::random_measure(rng, g, 0.9);
        const double d = bl_distance(m, n), d1 = w1_distance(m, n);
        EXPECT_LE(d, d1 + 1e-10);
        EXPECT_LE(d1, 1.25 * d + 1e-10);
    }
}

TEST(RhoDistance, IdentityAndOrderedPairs) {
    std::mt19937_64 rng(9);
    TorusGrid g(16);
    for (int trial = 0; trial < 20; ++trial) {
        auto m = fixtures::random_measure(rng, g);
        EXPECT_EQ(rho_distance(m, m), 0.0);
        auto sub = fixtures::random_submeasure(rng, m);
        EXPECT_NEAR(rho_distance(sub, m), m.total() - sub.total(), 1e-10);
        EXPECT_NEAR(rho_distance(m, sub), m.total() - sub.total(), 1e-10);
    }
}

TEST(RhoDistance, SandwichOnRandomPairs) {
    std::mt19937_64 rng(10);
    TorusGrid g(16);
    for (int trial = 0; trial < 60; ++trial) {
        auto m = fixtures::random_measure(rng, g), n = fixtures::random_measure(rng, g);
        const double d = bl_distance(m, n), r = rho_distance(m, n);
        EXPECT_LE(d, r + 1e-8);
        EXPECT_LE(r, 3 * d + 1e-8);
    }
}

TEST(EmpiricalRho, IdentityAndRemoval) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        int big_n = 2 + trial % 9;
        auto a = fixtures::random_state(rng, big_n, 1 + trial % big_n);
        EXPECT_EQ(empirical_rho(a, a), 0.0);
        auto b = a.without(1u << (trial % a.k()));
        EXPECT_EQ(empirical_rho(b, a), 1.0 / big_n);
    }
    EXPECT_THROW(empirical_rho(EmpiricalState(3, {0.1}), EmpiricalState(4, {0.1})), DomainError);
}

TEST(EmpiricalRho, MatchesExhaustiveEnumeration) {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 40; ++trial) {
        auto a = fixtures::random_state(rng, 4, 2), b = fixtures::random_state(rng, 4, 3);
        EXPECT_NEAR(empirical_rho(a, b), empirical_rho_bruteforce(a, b), 1e-14);
    }
    for (int trial = 0; trial < 10; ++trial) {
        auto a = fixtures::random_state(rng, 8, 3), b = fixtures::random_state(rng, 8, 6);
        EXPECT_NEAR(empirical_rho(a, b), empirical_rho_bruteforce(a, b), 1e-14);
    }
}

TEST(EmpiricalRho, EqualSizesGiveScaledW1) {
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 30; ++trial) {
        int k = 1 + trial % 6;
        int big_n = k + trial % 3;
        auto a = fixtures::random_state(rng, big_n, k), b = fixtures::random_state(rng, big_n, k);
        const double expected = double(k) / big_n * point_cloud_w1(a.positions(), b.positions());
        EXPECT_NEAR(empirical_rho(a, b), expected, 1e-12);
    }
}

TEST(ApproximateMeasure, EmptyAndUniformCases) {
    TorusGrid g(16);
    EXPECT_EQ(approximate_measure(GridMeasure(g), 8).k(), 0);
    auto s = approximate_measure(GridMeasure::uniform(g, 0.5), 8);
    ASSERT_EQ(s.k(), 4);
    for (int i = 1; i < 4; ++i) EXPECT_NEAR(circle_distance(s[i], s[i - 1]), 0.25, 1e-12);
}

TEST(ApproximateMeasure, DistanceDecreasesWithN) {
    std::mt19937_64 rng(15);
    TorusGrid g(32);
    for (int trial = 0; trial < 3; ++trial) {
        auto m0 = fixtures::random_measure(rng, g);
        double prev = 1e9;
        for (int big_n : {8, 16, 32}) {
            auto s = approximate_measure(m0, big_n);
            EXPECT_EQ(s.k(), std::lround(big_n * m0.total()));
            const double d = bl_distance(s.as_measure(g), m0);
            EXPECT_LT(d, prev);
            prev = d;
        }
    }
}
