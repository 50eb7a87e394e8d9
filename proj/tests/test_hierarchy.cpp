#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "meanstop/hierarchy.hpp"

namespace meanstop {
namespace {

constexpr double kPi = std::numbers::pi;

// -d_t v - v_xx + v_x^2/2 = 0, v(T) = a cos(2 pi x): v = -2 log w with w solving the backward heat
// equation, w(T) = exp(-(a/2) cos 2 pi x) expanded in modified Bessel functions.
double cole_hopf(double a, double tau, double x) {
    const double b = 0.5 * a;
    double w = std::cyl_bessel_i(0.0, b);
    for (int k = 1; k <= 40; ++k) {
        const double sign = k % 2 ? -1.0 : 1.0;
        w += 2.0 * sign * std::cyl_bessel_i(static_cast<double>(k), b) * std::exp(-4.0 * kPi * kPi * k * k * tau) *
             std::cos(2.0 * kPi * k * x);
    }
    return -2.0 * std::log(w);
}

TEST(ColeHopfOracle, TerminalValue) {
    for (double x : {0.0, 0.1, 0.37}) EXPECT_NEAR(cole_hopf(0.8, 0.0, x), 0.8 * std::cos(2.0 * kPi * x), 1e-13);
}

ModelSpec heat_model(double amp) {
    return make_model("quadratic", {{"g_amp", amp}, {"g_const", 0.25}});
}

double reference_error(int n, double amp) {
    const ModelSpec model = heat_model(amp);
    const ValueHierarchy h = solve_hierarchy(model, 1, 1, n, n * n);
    double err = 0.0;
    for (double t : {0.0, 0.5, 0.875})
        for (double x : {0.0, 0.125, 0.25, 0.5, 0.75}) {
            const double ref = 0.25 + cole_hopf(amp, 1.0 - t, x);
            err = std::max(err, std::abs(query_value(h, t, EmpiricalState(1, {x})) - ref));
        }
    return err;
}

TEST(SolveHierarchy, MatchesColeHopfReferenceWithSecondOrderRefinement) {
    const double amp = 0.5;
    const double e16 = reference_error(16, amp);
    const double e32 = reference_error(32, amp);
    const double h16 = 1.0 / 16, h32 = 1.0 / 32;
    EXPECT_LE(e16, 5.0 * (h16 * h16 + h16 * h16));
    EXPECT_LE(e32, 5.0 * (h32 * h32 + h32 * h32));
    const double ratio = e16 / e32;
    EXPECT_GE(ratio, 2.5);
    EXPECT_LE(ratio, 6.0);
}

TEST(SolveHierarchy, ZeroCostsGiveZeroValue) {
    const ModelSpec model = make_model("quadratic", {{"psi_c0", 0.0}, {"g_amp", 0.0}});
    const ValueHierarchy h = solve_hierarchy(model, 3, 3, 8, 64);
    for (int k = 0; k <= 3; ++k)
        for (double v : h.levels[k].values) EXPECT_EQ(v, 0.0);
}

TEST(SolveHierarchy, LevelZeroIsConstant) {
    const ModelSpec model = make_model("congestion");
    const ValueHierarchy h = solve_hierarchy(model, 2, 2, 12, 144);
    const double g0 = model.terminal(Features(model.n_features(), 0.0));
    for (double v : h.levels[0].values) EXPECT_EQ(v, g0);
    EXPECT_EQ(query_value(h, 0.3, EmpiricalState(2, {})), g0);
}

TEST(SolveHierarchy, TerminalSliceIsTheDiscreteEnvelope) {
    const ModelSpec model = make_model("congestion", {{"psi_c0", -0.1}});
    const ValueHierarchy h = solve_hierarchy(model, 3, 3, 8, 64);
    for (int k = 1; k <= 3; ++k) {
        const auto V = h.slice(k, h.n_steps);
        for (std::size_t node = 0; node < h.nodes(k); ++node)
            EXPECT_EQ(V[node], discrete_envelope(model, EmpiricalState(3, h.positions(k, node))).value);
    }
}

TEST(SolveHierarchy, SymmetricUnderExchangeForTwoAndThreeParticles) {
    const ModelSpec model = make_model("congestion");
    const ValueHierarchy h = solve_hierarchy(model, 3, 3, 10, 100);
    const int n = h.n_cells;
    for (int step : {0, 50, 100}) {
        const auto V2 = h.slice(2, step);
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < n; ++b) EXPECT_NEAR(V2[a + n * b], V2[b + n * a], 1e-12);
        const auto V3 = h.slice(3, step);
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < n; ++b)
                for (int c = 0; c < n; ++c) {
                    const double v = V3[a + n * b + n * n * c];
                    EXPECT_NEAR(v, V3[b + n * a + n * n * c], 1e-12);
                    EXPECT_NEAR(v, V3[c + n * b + n * n * a], 1e-12);
                }
    }
}

// Every node of every table: V^K <= V^{K-|S|}(x^{-S}) + (1/N) sum_S Psi(x_i, m_x).
void expect_obstacle_inequality(const ModelSpec& model, const ValueHierarchy& h) {
    double worst = -1.0;
    for (int k = 1; k <= h.k_max; ++k)
        for (int step = 0; step <= h.n_steps; ++step) {
            const auto V = h.slice(k, step);
            for (std::size_t node = 0; node < h.nodes(k); ++node) {
                const EmpiricalState s(h.big_n, h.positions(k, node));
                const Features f = model.features(s);
                for_each_subset_by_size(k, [&](unsigned mask, const std::vector<int>& idx) {
                    if (idx.empty()) return;
                    const EmpiricalState r = s.without(mask);
                    double pen = 0.0;
                    for (int i : idx) pen += model.psi(s[i], f);
                    const double obs = query_value(h, h.time(step), r) + pen / h.big_n;
                    worst = std::max(worst, V[node] - obs);
                });
            }
        }
    EXPECT_LE(worst, 1e-9);
}

TEST(SolveHierarchy, ObstacleInequalityAtEveryNode) {
    const ModelSpec model = make_model("congestion", {{"psi_c0", 0.0}, {"psi_c1", 0.8}});
    expect_obstacle_inequality(model, solve_hierarchy(model, 3, 3, 8, 64));
    const ModelSpec crowd = make_model("crowd");
    expect_obstacle_inequality(crowd, solve_hierarchy(crowd, 2, 2, 12, 144));
}

TEST(SolveHierarchy, SingleRemovalsSufficeWhenPsiIgnoresTheMeasure) {
    const ModelSpec model = make_model("congestion", {{"psi_c0", 0.02}, {"psi_c1", 0.0}, {"psi_c2", 0.2}});
    HierarchyOptions single;
    single.all_subsets = false;
    const ValueHierarchy a = solve_hierarchy(model, 3, 3, 8, 64);
    const ValueHierarchy b = solve_hierarchy(model, 3, 3, 8, 64, single);
    for (int k = 0; k <= 3; ++k)
        for (std::size_t i = 0; i < a.levels[k].values.size(); ++i)
            EXPECT_NEAR(a.levels[k].values[i], b.levels[k].values[i], 1e-10);
}

TEST(SolveHierarchy, FullEnumerationNeverExceedsSingleRemovals) {
    // Psi = 1 - m(T): free to drop particles from a full system, not after the first removal.
    const ModelSpec model = make_model("congestion", {{"psi_c0", 0.0}, {"psi_c1", 1.0}, {"psi_c2", 0.0},
                                                      {"g_level", 0.0}, {"g_amp", 1.0}, {"kappa", 0.5}});
    HierarchyOptions single;
    single.all_subsets = false;
    const ValueHierarchy a = solve_hierarchy(model, 3, 3, 8, 192);
    const ValueHierarchy b = solve_hierarchy(model, 3, 3, 8, 192, single);
    double gap = 0.0;
    for (int k = 0; k <= 3; ++k)
        for (std::size_t i = 0; i < a.levels[k].values.size(); ++i) {
            EXPECT_LE(a.levels[k].values[i], b.levels[k].values[i] + 1e-12);
            gap = std::max(gap, b.levels[k].values[i] - a.levels[k].values[i]);
        }
    // Removing two particles at once is charged at the larger measure, so it is strictly cheaper here.
    EXPECT_GT(gap, 1e-4);
}

TEST(SolveHierarchy, BelowDoNothingCost) {
    // V(t, x) <= E[G_Psi(x + sqrt(2) W_{T-t})] + (T - t) sup L(., 0, .) / N for K = 1.
    const ModelSpec model = make_model("congestion");
    const int big_n = 2, n = 32;
    const ValueHierarchy h = solve_hierarchy(model, big_n, 1, n, n * n);
    const TorusGrid fine(2048);
    std::vector<double> env(fine.n_cells());
    for (int j = 0; j < fine.n_cells(); ++j)
        env[j] = discrete_envelope(model, EmpiricalState(big_n, {fine.node(j)})).value;
    double sup_l = 0.0;
    for (int j = 0; j < n; ++j) sup_l = std::max(sup_l, model.lagrangian(h.grid.node(j), 0.0, h.features(1, j)));
    for (double t : {0.0, 0.5, 0.9})
        for (int j = 0; j < n; j += 3) {
            const double x = h.grid.node(j), var = 2.0 * (1.0 - t);
            double e = 0.0, wsum = 0.0;
            for (int q = 0; q < fine.n_cells(); ++q) {
                const double d = circle_displacement(x, fine.node(q));
                double w = 0.0;
                for (int r = -3; r <= 3; ++r) w += std::exp(-(d + r) * (d + r) / (2.0 * var));
                e += w * env[q];
                wsum += w;
            }
            const double bound = e / wsum + (1.0 - t) * sup_l / big_n;
            EXPECT_LE(h.slice(1, static_cast<int>(std::lround(t * n * n)))[j], bound + 1e-9);
        }
}

TEST(SolveHierarchy, CflGuardSuggestsAStableStepCount) {
    const ModelSpec model = make_model("congestion");
    try {
        solve_hierarchy(model, 2, 1, 32, 100);
        FAIL() << "expected a CFL refusal";
    } catch (const CflError& e) {
        EXPECT_GE(e.suggested_n_steps, 1024);
        EXPECT_NO_THROW(solve_hierarchy(model, 2, 1, 32, e.suggested_n_steps));
    }
}

TEST(SolveHierarchy, RejectsBadShapesAndBudgets) {
    const ModelSpec model = make_model("congestion");
    EXPECT_THROW(solve_hierarchy(model, 4, 4, 8, 64), DomainError);
    EXPECT_THROW(solve_hierarchy(model, 1, 2, 8, 64), DomainError);
    HierarchyOptions tiny;
    tiny.memory_budget = 1000;
    EXPECT_THROW(solve_hierarchy(model, 2, 2, 8, 64, tiny), CapacityError);
}

TEST(SolveHierarchy, PersistedTablesAreDeterministic) {
    const ModelSpec model = make_model("congestion");
    std::ostringstream a, b;
    write_level(a, solve_hierarchy(model, 2, 2, 8, 64), 2);
    write_level(b, solve_hierarchy(model, 2, 2, 8, 64), 2);
    EXPECT_EQ(a.str(), b.str());
    EXPECT_EQ(a.str().rfind("# vnk N=2 K=2 n_cells=8 n_steps=64 T=1\n", 0), 0u);
}

TEST(QueryValue, NodesAreExactAndMidpointsAreBracketed) {
    const ModelSpec model = make_model("congestion");
    const ValueHierarchy h = solve_hierarchy(model, 2, 2, 16, 256);
    for (int step : {0, 17, 256})
        for (int a = 0; a < 16; a += 5)
            for (int b = 0; b < 16; b += 3) {
                const EmpiricalState s(2, {h.grid.node(a), h.grid.node(b)});
                EXPECT_EQ(query_value(h, h.time(step), s), h.slice(2, step)[a + 16 * b]);
            }
    const auto V = h.slice(1, 40);
    for (int j = 0; j < 16; ++j) {
        const double v = query_value(h, h.time(40), EmpiricalState(2, {h.grid.node(j) + 0.5 * h.h()}));
        const double lo = std::min(V[j], V[(j + 1) % 16]), hi = std::max(V[j], V[(j + 1) % 16]);
        EXPECT_GE(v, lo - 1e-15);
        EXPECT_LE(v, hi + 1e-15);
    }
    const double tm = 0.5 * (h.time(40) + h.time(41));
    const double v = query_value(h, tm, EmpiricalState(2, {h.grid.node(3)}));
    EXPECT_GE(v, std::min(V[3], h.slice(1, 41)[3]) - 1e-15);
    EXPECT_LE(v, std::max(V[3], h.slice(1, 41)[3]) + 1e-15);
    EXPECT_THROW(query_value(h, 0.5, EmpiricalState(3, {0.1, 0.2, 0.3})), DomainError);
    EXPECT_THROW(query_value(h, 1.5, EmpiricalState(2, {0.1})), DomainError);
}

TEST(ExtractPolicy, QuadraticDriftIsMinusScaledGradient) {
    const ModelSpec model = make_model("quadratic", {{"g_amp", 1.0}});
    const ValueHierarchy h = solve_hierarchy(model, 2, 2, 16, 384);
    const FeedbackPolicy p = extract_policy(h, model);
    const int n = 16, step = 100;
    const auto V = h.slice(2, step);
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
            const std::size_t node = a + n * b;
            const double d0 = 2.0 * (V[(a + 1) % n + n * b] - V[(a + n - 1) % n + n * b]) / (2.0 * h.h());
            EXPECT_DOUBLE_EQ(p.drift[2][(step * h.nodes(2) + node) * 2], -d0);
        }
}

TEST(ExtractPolicy, ProhibitivePsiNeverStopsEarly) {
    const ModelSpec model = make_model("quadratic");
    const FeedbackPolicy p = extract_policy(solve_hierarchy(model, 2, 2, 12, 144), model);
    for (int k = 1; k <= 2; ++k)
        for (std::uint8_t m : p.stop[k]) EXPECT_EQ(m, 0);
}

TEST(ExtractPolicy, TerminalStoppingMatchesEnvelopeMinimizers) {
    const ModelSpec model = make_model("congestion", {{"psi_c0", 0.0}});
    const ValueHierarchy h = solve_hierarchy(model, 3, 3, 8, 64);
    const FeedbackPolicy p = extract_policy(h, model);
    int removed = 0;
    for (int k = 1; k <= 3; ++k)
        for (std::size_t node = 0; node < h.nodes(k); ++node) {
            const auto env = discrete_envelope(model, EmpiricalState(3, h.positions(k, node)));
            EXPECT_EQ(p.stop[k][h.n_steps * h.nodes(k) + node], env.mask);
            removed += env.mask != 0;
        }
    EXPECT_GT(removed, 0);
    // Before the horizon, stopping only where the obstacle is within tolerance.
    for (int k = 1; k <= 3; ++k)
        for (int step = 0; step < h.n_steps; ++step)
            for (std::size_t node = 0; node < h.nodes(k); ++node)
                if (p.stop[k][step * h.nodes(k) + node])
                    EXPECT_LE(detail::obstacle_at(h, k, step, node) - h.slice(k, step)[node], p.tolerance);
}

TEST(RegularityReport, ConstantInSpaceModelHasNoSpatialVariation) {
    const ModelSpec model = make_model("quadratic", {{"g_amp", 0.0}, {"g_level", 0.7}, {"kappa", 0.3}});
    const RegularityReport r = regularity_report(solve_hierarchy(model, 2, 2, 12, 144));
    EXPECT_LT(r.spatial[1], 1e-10);
    EXPECT_LT(r.spatial[2], 1e-10);
}

TEST(RegularityReport, CongestionConstantsStableAcrossN) {
    const ModelSpec model = make_model("congestion");
    std::vector<RegularityReport> reps;
    for (int big_n : {2, 3, 4}) reps.push_back(regularity_report(solve_hierarchy(model, big_n, 2, 16, 256)));
    for (const auto& r : reps)
        for (int k = 1; k <= 2; ++k) {
            EXPECT_TRUE(std::isfinite(r.spatial[k]) && std::isfinite(r.removal[k]) && std::isfinite(r.holder[k]));
            EXPECT_GT(r.spatial[k], 0.0);
        }
    // The bound is uniform in K, so compare the sup over levels.
    auto top = [](const std::vector<double>& v) { return *std::max_element(v.begin(), v.end()); };
    for (std::size_t i = 1; i < reps.size(); ++i) {
        EXPECT_LT(top(reps[i].spatial), 1.25 * top(reps[i - 1].spatial));
        EXPECT_LT(top(reps[i].removal), 1.25 * top(reps[i - 1].removal));
        EXPECT_LT(top(reps[i].holder), 1.25 * top(reps[i - 1].holder));
    }
}

}  // namespace
}  // namespace meanstop
