#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "meanstop/torus.hpp"
#include "support.hpp"

using namespace meanstop;

TEST(TorusGrid, UnitTorusAndPeriodicIndexing) {
    for (int n : {1, 3, 16, 64, 127}) {
        TorusGrid g(n);
        EXPECT_NEAR(g.h() * n, 1.0, 1e-12);
        EXPECT_EQ(g.index(n), 0);
        EXPECT_EQ(g.index(-1), n - 1);
        EXPECT_EQ(g.index(3 * n + 2), 2 % n);
    }
    EXPECT_THROW(TorusGrid(0), ParameterError);
}

TEST(TorusGrid, NearestNode) {
    TorusGrid g(8);
    EXPECT_EQ(g.nearest(0.0), 0);
    EXPECT_EQ(g.nearest(0.99), 0);
    EXPECT_EQ(g.nearest(0.13), 1);
    EXPECT_EQ(g.nearest(-0.125), 7);
}

TEST(Circle, ShorterArcWithPositiveTieBreak) {
    EXPECT_DOUBLE_EQ(circle_distance(0.1, 0.9), 0.2);
    EXPECT_DOUBLE_EQ(circle_displacement(0.1, 0.9), -0.2);
    EXPECT_DOUBLE_EQ(circle_displacement(0.0, 0.5), 0.5);
    EXPECT_DOUBLE_EQ(circle_displacement(0.5, 0.0), 0.5);
    EXPECT_DOUBLE_EQ(circle_distance(0.25, 0.25), 0.0);
}

TEST(GridMeasure, InvariantsEnforced) {
    TorusGrid g(4);
    EXPECT_THROW(GridMeasure(g, {0.1, -0.1, 0.0, 0.0}), DomainError);
    EXPECT_THROW(GridMeasure(g, {0.5, 0.5, 0.1, 0.0}), DomainError);
    EXPECT_THROW(GridMeasure(g, {0.5, 0.5}), StructuralError);
    EXPECT_NO_THROW(GridMeasure(g, {0.25, 0.25, 0.25, 0.25}));
}

TEST(EmpiricalState, MassIsExactlyKOverN) {
    TorusGrid g(16);
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        int big_n = 1 + trial % 7;
        int k = trial % (big_n + 1);
        auto s = fixtures::random_state(rng, big_n, k);
        double expected = 0.0;
        for (int i = 0; i < k; ++i) expected += 1.0 / big_n;
        EXPECT_EQ(s.as_measure(g).total(), expected);
    }
    EXPECT_THROW(EmpiricalState(2, {0.1, 0.2, 0.3}), DomainError);
}

TEST(EmpiricalState, WithoutRemovesMaskedParticles) {
    EmpiricalState s(5, {0.1, 0.2, 0.3});
    auto r = s.without(0b101u);
    ASSERT_EQ(r.k(), 1);
    EXPECT_DOUBLE_EQ(r[0], 0.2);
    EXPECT_EQ(r.big_n(), 5);
}

TEST(Serialization, BitExactRoundTrip) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        TorusGrid g(5 + trial * 7);
        auto m = fixtures::random_measure(rng, g);
        std::stringstream ss;
        write_measure(ss, m);
        auto back = read_measure(ss);
        ASSERT_EQ(back.size(), m.size());
        for (int j = 0; j < m.size(); ++j) EXPECT_EQ(back.mass()[j], m.mass()[j]);
    }
}

TEST(Serialization, HeaderFormat) {
    std::stringstream ss;
    write_measure(ss, GridMeasure(TorusGrid(2), {0.25, 0.5}));
    EXPECT_EQ(ss.str(), "# torus-measure n_cells=2\n0,0.25\n1,0.5\n");
    std::stringstream bad("# something else\n0,1\n");
    EXPECT_THROW(read_measure(bad), StructuralError);
}
