#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numbers>

#include "meanstop/particle_mc.hpp"

namespace meanstop {
namespace {

constexpr double kPi = std::numbers::pi;

bool same_bytes(const CostEstimate& a, const CostEstimate& b) {
    const double va[] = {a.mean, a.std_error, a.running, a.stopping, a.terminal};
    const double vb[] = {b.mean, b.std_error, b.running, b.stopping, b.terminal};
    return std::memcmp(va, vb, sizeof va) == 0 && a.n_paths == b.n_paths;
}

TEST(NormalDraw, MomentsAndKeying) {
    double s = 0.0, s2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double z = normal_draw(11, i, i % 3, i / 7);
        s += z;
        s2 += z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.01);
    EXPECT_EQ(normal_draw(1, 2, 3, 4), normal_draw(1, 2, 3, 4));
    EXPECT_NE(normal_draw(1, 2, 3, 4), normal_draw(1, 2, 4, 3));
}

TEST(Simulate, AtTheHorizonReturnsTheEnvelope) {
    const ModelSpec model = make_model("congestion", {{"psi_c0", -0.05}});
    const auto h = std::make_shared<const ValueHierarchy>(solve_hierarchy(model, 3, 3, 8, 64));
    const FeedbackPolicy pol = extract_policy(h, model);
    SimConfig cfg;
    cfg.n_paths = 10;
    cfg.t0 = model.horizon;
    cfg.initial = EmpiricalState(3, {0.1, 0.45, 0.8});
    const CostEstimate e = simulate(model, pol, cfg);
    EXPECT_EQ(e.mean, discrete_envelope(model, cfg.initial).value);
    EXPECT_EQ(e.std_error, 0.0);
    EXPECT_NEAR(e.mean, e.running + e.stopping + e.terminal, 1e-15);
}

TEST(Simulate, HeatFlowOfFirstFourierMode) {
    // Zero drift, no stopping, G = integral of cos(2 pi x): E = (1/N) sum_i exp(-4 pi^2 (T - t0)) cos(2 pi x_i).
    const ModelSpec model = make_model("quadratic", {{"g_amp", 1.0}, {"T", 0.05}});
    SimConfig cfg;
    cfg.n_paths = 20000;
    cfg.dt_sim = 0.01;
    cfg.seed = 3;
    cfg.t0 = 0.01;
    cfg.initial = EmpiricalState(4, {0.05, 0.3, 0.9});
    const CostEstimate e = simulate(model, null_policy(), cfg);
    double exact = 0.0;
    for (double x : cfg.initial.positions()) exact += std::exp(-4.0 * kPi * kPi * 0.04) * std::cos(2.0 * kPi * x) / 4.0;
    EXPECT_LE(std::abs(e.mean - exact), 3.0 * e.std_error) << e.mean << " vs " << exact;
    EXPECT_EQ(e.running, 0.0);
    EXPECT_EQ(e.stopping, 0.0);
}

TEST(Simulate, ExtractedPolicyMatchesPdeValue) {
    const ModelSpec model = make_model("congestion");
    const auto h = std::make_shared<const ValueHierarchy>(solve_hierarchy(model, 2, 2, 64, 4096));
    const FeedbackPolicy pol = extract_policy(h, model);
    SimConfig cfg;
    cfg.n_paths = 4000;
    cfg.dt_sim = h->dt;
    cfg.seed = 21;
    cfg.initial = EmpiricalState(2, {0.1, 0.6});
    const CostEstimate e = simulate(model, pol, cfg);
    const double v = query_value(*h, 0.0, cfg.initial);
    EXPECT_LE(std::abs(e.mean - v), 3.0 * e.std_error) << e.mean << " vs " << v << " se " << e.std_error;
    EXPECT_GT(e.stopping, -1.0);
    EXPECT_FALSE(e.coarse_step);
}

TEST(Simulate, ReproducibleAcrossRunsAndWorkers) {
    const ModelSpec model = make_model("congestion");
    const auto h = std::make_shared<const ValueHierarchy>(solve_hierarchy(model, 2, 2, 16, 256));
    const FeedbackPolicy pol = extract_policy(h, model);
    SimConfig cfg;
    cfg.n_paths = 300;
    cfg.dt_sim = h->dt;
    cfg.seed = 99;
    cfg.initial = EmpiricalState(2, {0.2, 0.7});
    const CostEstimate a = simulate(model, pol, cfg);
    const CostEstimate b = simulate(model, pol, cfg);
    cfg.workers = 3;
    const CostEstimate c = simulate(model, pol, cfg);
    EXPECT_TRUE(same_bytes(a, b));
    EXPECT_TRUE(same_bytes(a, c));
    cfg.seed = 100;
    EXPECT_FALSE(same_bytes(a, simulate(model, pol, cfg)));
}

TEST(Simulate, StandardErrorScalesWithPathCount) {
    const ModelSpec model = make_model("quadratic", {{"g_amp", 1.0}, {"T", 0.1}});
    SimConfig cfg;
    cfg.dt_sim = 0.02;
    cfg.initial = EmpiricalState(2, {0.1, 0.4});
    cfg.n_paths = 2000;
    const double s1 = simulate(model, null_policy(), cfg).std_error;
    cfg.n_paths = 8000;
    const double s4 = simulate(model, null_policy(), cfg).std_error;
    EXPECT_GT(s1 / s4, 2.0 / 1.5);
    EXPECT_LT(s1 / s4, 2.0 * 1.5);
}

TEST(Simulate, FlagsStepsCoarserThanThePolicyMesh) {
    const ModelSpec model = make_model("congestion");
    const auto h = std::make_shared<const ValueHierarchy>(solve_hierarchy(model, 2, 1, 8, 64));
    SimConfig cfg;
    cfg.n_paths = 5;
    cfg.dt_sim = 0.1;
    cfg.initial = EmpiricalState(2, {0.3});
    EXPECT_TRUE(simulate(model, extract_policy(h, model), cfg).coarse_step);
    cfg.initial = EmpiricalState(2, {0.3, 0.4});
    EXPECT_THROW(simulate(model, extract_policy(h, model), cfg), DomainError);
}

TEST(PolicyGap, ZeroPerturbationIsExactlyZero) {
    const ModelSpec model = make_model("congestion");
    const auto h = std::make_shared<const ValueHierarchy>(solve_hierarchy(model, 2, 2, 16, 256));
    SimConfig cfg;
    cfg.n_paths = 200;
    cfg.dt_sim = h->dt;
    cfg.initial = EmpiricalState(2, {0.2, 0.7});
    const GapEstimate g = policy_gap(model, extract_policy(h, model), cfg, 0.0);
    EXPECT_EQ(g.gap, 0.0);
    EXPECT_EQ(g.std_error, 0.0);
}

TEST(PolicyGap, ExtractedPolicyIsNoWorseThanAPerturbedOne) {
    const ModelSpec model = make_model("quadratic", {{"g_amp", 1.0}, {"f0_amp", 0.5}});
    const auto h = std::make_shared<const ValueHierarchy>(solve_hierarchy(model, 2, 2, 32, 1024));
    SimConfig cfg;
    cfg.n_paths = 2000;
    cfg.dt_sim = h->dt;
    cfg.seed = 5;
    cfg.initial = EmpiricalState(2, {0.1, 0.35});
    const GapEstimate g = policy_gap(model, extract_policy(h, model), cfg, 0.5);
    EXPECT_LE(g.gap, 3.0 * g.std_error);
}

// Cost of the fixed feedback a = s * alpha(t, x) for one particle with N = 1, computed by the
// backward linear equation -w_t - w_xx - a w_x = a^2/2 + f0 cos(2 pi x) on a finer mesh.
double feedback_cost(const ModelSpec& model, const FeedbackPolicy& pol, double scale, double x0) {
    const ValueHierarchy& h = *pol.hierarchy;
    const int n = 4 * h.n_cells, steps = 16 * h.n_steps;
    const double dx = 1.0 / n, dt = model.horizon / steps, f0 = model.param("f0_amp", 0.0);
    std::vector<double> w(n), lower(n, -dt / (dx * dx)), diag(n, 1.0 + 2.0 * dt / (dx * dx)), upper(n, -dt / (dx * dx));
    for (int j = 0; j < n; ++j) w[j] = model.param("g_const", 0.0) + model.param("g_level", 0.0) +
                                       model.param("g_amp", 0.0) * std::cos(2.0 * kPi * j * dx);
    for (int s = steps - 1; s >= 0; --s) {
        const double t = s * dt;
        std::vector<double> rhs(n);
        for (int j = 0; j < n; ++j) {
            const double x = j * dx;
            const double a = scale * detail::policy_drift(pol, t, {x}, 0);
            const double dw = a > 0 ? (w[(j + 1) % n] - w[j]) / dx : (w[j] - w[(j + n - 1) % n]) / dx;
            rhs[j] = w[j] + dt * (a * dw + 0.5 * a * a + f0 * std::cos(2.0 * kPi * x));
        }
        w = solve_periodic_tridiagonal(lower, diag, upper, rhs);
    }
    const double u = x0 * n;
    const int j = static_cast<int>(std::floor(u));
    return (1.0 - (u - j)) * w[j % n] + (u - j) * w[(j + 1) % n];
}

TEST(PolicyGap, MatchesSingleParticleEvaluationWithProhibitivePsi) {
    const ModelSpec model = make_model("quadratic", {{"g_amp", 1.0}, {"f0_amp", 1.0}});
    const auto h = std::make_shared<const ValueHierarchy>(solve_hierarchy(model, 1, 1, 32, 1024));
    const FeedbackPolicy pol = extract_policy(h, model);
    SimConfig cfg;
    cfg.n_paths = 4000;
    cfg.dt_sim = h->dt;
    cfg.seed = 17;
    cfg.initial = EmpiricalState(1, {0.2});
    const double pert = 1.0;
    const GapEstimate g = policy_gap(model, pol, cfg, pert);
    const double oracle = feedback_cost(model, pol, 1.0, 0.2) - feedback_cost(model, pol, 1.0 + pert, 0.2);
    EXPECT_LT(oracle, 0.0);
    EXPECT_LE(std::abs(g.gap - oracle), 3.0 * g.std_error + 2e-3) << g.gap << " vs " << oracle;
}

}  // namespace
}  // namespace meanstop
