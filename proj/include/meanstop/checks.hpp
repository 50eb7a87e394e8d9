#pragma once

// Fixed-seed acceptance checks shared by the CLI and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "meanstop/envelopes.hpp"
#include "meanstop/fixtures.hpp"
#include "meanstop/hierarchy.hpp"
#include "meanstop/meanfield.hpp"
#include "meanstop/metrics.hpp"
#include "meanstop/particle_mc.hpp"
#include "meanstop/phi.hpp"

namespace meanstop {

struct CheckResult {
    std::string id;
    std::string name;
    std::string module;
    bool pass = false;
    std::string detail;
};

namespace detail {

inline std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

inline CheckResult verdict(std::string id, std::string name, std::string module, bool pass, std::string detail) {
    return {std::move(id), std::move(name), std::move(module), pass, std::move(detail)};
}

// -v_t - v_xx + v_x^2/2 = 0 with v(T) = a cos(2 pi x), through w = exp(-v/2) and the Bessel series of w(T).
inline double cole_hopf(double a, double tau, double x) {
    constexpr double pi = std::numbers::pi;
    const double b = 0.5 * a;
    double w = std::cyl_bessel_i(0.0, b);
    for (int k = 1; k <= 40; ++k) {
        const double sign = k % 2 ? -1.0 : 1.0;
        w += 2.0 * sign * std::cyl_bessel_i(static_cast<double>(k), b) * std::exp(-4.0 * pi * pi * k * k * tau) *
             std::cos(2.0 * pi * k * x);
    }
    return -2.0 * std::log(w);
}

inline GridFunction random_density(std::mt19937_64& rng, const TorusGrid& g) {
    constexpr double pi = std::numbers::pi;
    std::normal_distribution<double> z(0.0, 1.0);
    std::vector<double> v(g.n_cells());
    const double a1 = z(rng), b1 = z(rng), a2 = z(rng), shift = 0.3 * z(rng);
    for (int j = 0; j < g.n_cells(); ++j) {
        const double x = g.node(j);
        v[j] = shift + a1 * std::sin(2 * pi * x) + b1 * std::cos(2 * pi * x) + a2 * std::sin(6 * pi * x) +
               0.3 * z(rng);
    }
    return GridFunction(g, std::move(v));
}

inline ControlField random_control(std::mt19937_64& rng, int steps, int n, double amax, double bmax) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ControlField c = ControlField::zeros(steps, n);
    for (auto& r : c.alpha)
        for (double& v : r) v = amax * (2.0 * u(rng) - 1.0);
    for (auto& r : c.beta)
        for (double& v : r) v = bmax * u(rng);
    return c;
}

/// Largest V^K - [V^{K-|S|}(x^{-S}) + (1/N) sum_S Psi] over every node, time and subset; also the
/// same maximum restricted to single removals.
inline std::pair<double, double> obstacle_violation(const ModelSpec& model, const ValueHierarchy& h) {
    double all = -INFINITY, single = -INFINITY;
    for (int k = 1; k <= h.k_max; ++k)
        for (int step = 0; step <= h.n_steps; ++step) {
            const auto V = h.slice(k, step);
            for (std::size_t node = 0; node < h.nodes(k); ++node) {
                const EmpiricalState s(h.big_n, h.positions(k, node));
                const Features f = model.features(s);
                for_each_subset_by_size(k, [&](unsigned mask, const std::vector<int>& idx) {
                    if (idx.empty()) return;
                    double pen = 0.0;
                    for (int i : idx) pen += model.psi(s[i], f);
                    const double gap = V[node] - (query_value(h, h.time(step), s.without(mask)) + pen / h.big_n);
                    all = std::max(all, gap);
                    if (idx.size() == 1) single = std::max(single, gap);
                });
            }
        }
    return {all, single};
}

}  // namespace detail

inline CheckResult check_metric_sandwich() {
    std::mt19937_64 rng(101);
    const TorusGrid g(64);
    double worst = -INFINITY;
    for (int t = 0; t < 200; ++t) {
        const GridMeasure m = fixtures::random_measure(rng, g), n = fixtures::random_measure(rng, g);
        const double d = bl_distance(m, n), r = rho_distance(m, n);
        worst = std::max({worst, d - r, r - 3.0 * d});
    }
    return detail::verdict("1", "metric-sandwich", "metrics", worst <= 1e-8,
                           "200 pairs, n=64, max(d - rho, rho - 3d) = " + detail::sci(worst));
}

inline CheckResult check_removal_distance() {
    std::mt19937_64 rng(102);
    int exact = 0;
    for (int t = 0; t < 100; ++t) {
        const int big_n = 2 + t % 15;
        const EmpiricalState a = fixtures::random_state(rng, big_n, 1 + t % std::min(big_n, 6));
        const EmpiricalState b = a.without(1u << (t % a.k()));
        if (empirical_rho(a, b) == 1.0 / big_n && empirical_rho(b, a) == 1.0 / big_n) ++exact;
    }
    return detail::verdict("2", "removal-distance", "metrics", exact == 100,
                           std::to_string(exact) + "/100 states give exactly 1/N");
}

inline CheckResult check_envelope_monotonicity() {
    std::mt19937_64 rng(103);
    double worst = -INFINITY;
    for (const ModelSpec& m : builtin_models())
        for (int t = 0; t < 200; ++t) {
            const int big_n = 2 + t % 7;
            const EmpiricalState s = fixtures::random_state(rng, big_n, 1 + t % std::min(big_n, 5));
            const Features full = m.features(s);
            const double g = discrete_envelope(m, s).value;
            for_each_subset_by_size(s.k(), [&](unsigned mask, const std::vector<int>& idx) {
                double pen = 0.0;
                for (int i : idx) pen += m.psi(s[i], full);
                worst = std::max(worst, g - discrete_envelope(m, s.without(mask)).value - pen / big_n);
            });
        }
    const double discrete = worst;
    worst = -INFINITY;
    const TorusGrid g16(16);
    for (const ModelSpec& m : {make_model("congestion"), make_model("linearG")})
        for (int t = 0; t < 200; ++t) {
            const GridMeasure mu = fixtures::random_measure(rng, g16);
            const GridMeasure nu = fixtures::random_submeasure(rng, mu);
            const Features f = m.features(mu);
            double rhs = continuous_envelope(m, nu).value;
            for (int j = 0; j < 16; ++j) rhs += m.psi(g16.node(j), f) * (mu.mass()[j] - nu.mass()[j]);
            worst = std::max(worst, continuous_envelope(m, mu).value - rhs);
        }
    const double continuous = worst;
    // Linear G: keep a cell iff its terminal density is below Psi there.
    const ModelSpec lin = make_model("congestion");
    double closed = 0.0;
    const TorusGrid g32(32);
    for (int t = 0; t < 20; ++t) {
        const GridMeasure mu = fixtures::random_measure(rng, g32);
        const Features f = lin.features(mu);
        double v = lin.linear_terminal->constant;
        for (int j = 0; j < 32; ++j) {
            const double x = g32.node(j);
            v += std::min(lin.linear_terminal->density(x), lin.psi(x, f)) * mu.mass()[j];
        }
        closed = std::max(closed, std::abs(continuous_envelope(lin, mu).value - v));
    }
    const bool pass = discrete <= 1e-10 && continuous <= 1e-10 && closed <= 1e-14;
    return detail::verdict("3", "envelope-monotonicity", "envelope", pass,
                           "discrete " + detail::sci(discrete) + ", continuous " + detail::sci(continuous) +
                               ", closed-form gap " + detail::sci(closed));
}

inline CheckResult check_envelope_convergence() {
    constexpr double pi = std::numbers::pi;
    const ModelSpec m = make_model("congestion");
    const TorusGrid g(64);
    bool pass = true;
    std::string detail;
    for (double total : {0.25, 0.5, 0.75}) {
        std::vector<double> base(64);
        double s = 0.0;
        for (int j = 0; j < 64; ++j) s += base[j] = 1.0 + 0.8 * std::sin(2 * pi * (g.node(j) + 0.1 * total));
        for (double& v : base) v *= total / s;
        const GridMeasure m0(g, base);
        const double target = continuous_envelope(m, m0).value;
        double prev = INFINITY;
        detail += (detail.empty() ? "" : "; ") + std::string("mass ") + format_real(total) + ":";
        for (int big_n : {4, 8, 16}) {
            const double e = std::abs(discrete_envelope(m, approximate_measure(m0, big_n)).value - target);
            pass = pass && e < prev;
            prev = e;
            detail += " " + detail::sci(e);
        }
    }
    return detail::verdict("4", "envelope-convergence", "envelope", pass, detail);
}

inline CheckResult check_hierarchy_reference() {
    const double amp = 0.5;
    const ModelSpec model = make_model("quadratic", {{"g_amp", amp}, {"g_const", 0.25}});
    auto error = [&](int n) {
        const ValueHierarchy h = solve_hierarchy(model, 1, 1, n, n * n);
        double err = 0.0;
        for (double t : {0.0, 0.5, 0.875})
            for (double x : {0.0, 0.125, 0.25, 0.5, 0.75})
                err = std::max(err, std::abs(query_value(h, t, EmpiricalState(1, {x})) -
                                             (0.25 + detail::cole_hopf(amp, 1.0 - t, x))));
        return err;
    };
    const double e16 = error(16), e32 = error(32);
    const double tol16 = 5.0 * 2.0 / 256.0, tol32 = 5.0 * 2.0 / 1024.0;
    const double ratio = e16 / e32;
    const bool pass = e16 <= tol16 && e32 <= tol32 && ratio >= 2.5 && ratio <= 6.0;
    return detail::verdict("5", "hierarchy-reference", "nparticle", pass,
                           "err(n=16) " + detail::sci(e16) + ", err(n=32) " + detail::sci(e32) + ", ratio " +
                               detail::sci(ratio));
}

inline CheckResult check_hierarchy_obstacle() {
    const ModelSpec cong = make_model("congestion", {{"psi_c0", 0.0}, {"psi_c1", 0.8}});
    const ModelSpec crowd = make_model("crowd");
    const auto a = detail::obstacle_violation(cong, solve_hierarchy(cong, 3, 3, 8, 64));
    const auto b = detail::obstacle_violation(crowd, solve_hierarchy(crowd, 2, 2, 12, 144));
    const double all = std::max(a.first, b.first), single = std::max(a.second, b.second);
    return detail::verdict("6", "hierarchy-obstacle", "nparticle", all <= 1e-9 && single <= 1e-9,
                           "single removals " + detail::sci(single) + ", all subsets " + detail::sci(all));
}

inline CheckResult check_montecarlo(int workers = 1) {
    const ModelSpec model = make_model("congestion");
    const auto h = std::make_shared<const ValueHierarchy>(solve_hierarchy(model, 2, 2, 64, 4096));
    SimConfig cfg;
    cfg.n_paths = 20000;
    cfg.dt_sim = h->dt;
    cfg.seed = 21;
    cfg.workers = workers;
    cfg.initial = EmpiricalState(2, {0.1, 0.6});
    const CostEstimate e = simulate(model, extract_policy(h, model), cfg);
    const double v = query_value(*h, 0.0, cfg.initial);
    const double z1 = std::abs(e.mean - v) / e.std_error;

    // Zero drift and no stopping: E = (1/N) sum_i exp(-4 pi^2 (T - t0)) cos(2 pi x_i).
    constexpr double pi = std::numbers::pi;
    const ModelSpec heat = make_model("quadratic", {{"g_amp", 1.0}, {"T", 0.05}});
    SimConfig hc;
    hc.n_paths = 20000;
    hc.dt_sim = 0.01;
    hc.seed = 3;
    hc.t0 = 0.01;
    hc.workers = workers;
    hc.initial = EmpiricalState(4, {0.05, 0.3, 0.9});
    const CostEstimate eh = simulate(heat, null_policy(), hc);
    double exact = 0.0;
    for (double x : hc.initial.positions()) exact += std::exp(-4.0 * pi * pi * 0.04) * std::cos(2.0 * pi * x) / 4.0;
    const double z2 = std::abs(eh.mean - exact) / eh.std_error;
    return detail::verdict("7", "montecarlo-cross-validation", "montecarlo", z1 <= 3.0 && z2 <= 3.0,
                           "congestion N=K=2 |mc - pde|/se = " + detail::sci(z1) + ", heat flow " + detail::sci(z2));
}

inline CheckResult check_meanfield_internals() {
    std::mt19937_64 rng(108);
    const ModelSpec model = make_model("congestion");
    double ledger = 0.0;
    {
        const TorusGrid g(24);
        const TimeMesh mesh{0.0, 1.0, 80};
        for (int trial = 0; trial < 5; ++trial) {
            const GridMeasure m0 = fixtures::random_measure(rng, g);
            const MeasurePath p = solve_fp(model, detail::random_control(rng, 80, 24, 10.0, 5.0), m0, mesh);
            double out = p.total(mesh.n_steps);
            for (const auto& k : p.killed)
                for (double v : k) out += v;
            ledger = std::max(ledger, std::abs(out - m0.total()));
        }
    }
    double grad = 0.0;
    {
        const int n = 16, steps = 40;
        const GridMeasure m0 = fixtures::random_measure(rng, TorusGrid(n), 0.9);
        const ControlField c = detail::random_control(rng, steps, n, 0.5, 2.0);
        const TimeMesh mesh{0.0, 1.0, steps};
        const double delta = 0.05;
        for (double theta : {0.0, 0.1}) {
            const ControlField gc = cost_gradient(model, 0.0, m0, c, theta, delta, steps);
            auto cost = [&](const ControlField& u) {
                return evaluate_J_theta_delta(model, solve_fp(model, u, m0, mesh), u, theta, delta);
            };
            for (int dir = 0; dir < 5; ++dir) {
                const ControlField d = detail::random_control(rng, steps, n, 1.0, 1.0);
                const double t = 1e-5;
                ControlField plus = c, minus = c;
                double an = 0.0;
                for (int k = 0; k < steps; ++k)
                    for (int j = 0; j < n; ++j) {
                        an += gc.alpha[k][j] * d.alpha[k][j] + gc.beta[k][j] * d.beta[k][j];
                        plus.alpha[k][j] += t * d.alpha[k][j];
                        minus.alpha[k][j] -= t * d.alpha[k][j];
                        plus.beta[k][j] += t * d.beta[k][j];
                        minus.beta[k][j] -= t * d.beta[k][j];
                    }
                const double fd = (cost(plus) - cost(minus)) / (2.0 * t);
                grad = std::max(grad, std::abs(fd - an) / std::abs(an));
            }
        }
    }
    const int n = 32, steps = 256;
    const GridMeasure m0 = fixtures::random_measure(rng, TorusGrid(n), 0.9);
    const double tol = 5.0 * (1.0 / (n * n) + 1.0 / steps + 1e-6);
    const double dpp = std::max(check_dpp(model, 0.0, 0.5, m0, 0.05, 1e-2, steps),
                                check_dpp(model, 0.0, 0.5, m0, 0.0, 1e-3, steps));
    const bool pass = ledger <= 1e-10 && grad <= 1e-4 && dpp <= tol;
    return detail::verdict("8", "meanfield-internals", "meanfield", pass,
                           "mass ledger " + detail::sci(ledger) + ", gradient rel " + detail::sci(grad) + ", dpp " +
                               detail::sci(dpp) + " (tol " + detail::sci(tol) + ")");
}

inline CheckResult check_regularization_ladder() {
    // f0 cos(2 pi x) makes removal worthwhile; g <= Psi keeps G Psi-nondecreasing.
    const ModelSpec model = make_model("quadratic", {{"f0_amp", 10.0}, {"g_amp", 0.1}, {"psi_c0", 0.1}});
    const int n = 32, steps = 256;
    const double theta = 0.05;
    const std::vector<double> deltas{1e-3, 5e-4, 2.5e-4, 1.25e-4};
    std::mt19937_64 rng(5);
    const TorusGrid g(n);
    const GridMeasure m0 = fixtures::random_measure(rng, g, 0.8);
    const LadderTable t = regularization_ladder(model, 0.0, m0, {theta}, deltas, steps);
    const auto& d = t.delta_cauchy[0];
    bool pass = d.size() == 3 && d[0] > d[1] && d[1] > d[2];
    double slack = INFINITY;
    for (const auto& c : t.cells[0]) {
        pass = pass && c.converged;
        slack = std::min(slack, c.value - c.penalty_free);
    }
    pass = pass && slack >= 0.0;
    std::vector<std::pair<GridMeasure, GridMeasure>> pairs;
    for (int i = 0; i < 30; ++i) {
        GridMeasure a = fixtures::random_measure(rng, g);
        pairs.emplace_back(std::move(a), fixtures::random_measure(rng, g));
    }
    double lo = INFINITY, hi = 0.0;
    for (double delta : deltas) {
        const double c = mf_lipschitz_constant(model, 0.0, pairs, theta, delta, steps);
        lo = std::min(lo, c);
        hi = std::max(hi, c);
    }
    pass = pass && hi <= 1.2 * lo;
    std::string cauchy;
    for (double v : d) cauchy += " " + detail::sci(v);
    return detail::verdict("9", "regularization-ladder", "ladder", pass,
                           "cauchy" + cauchy + ", min(U - J) " + detail::sci(slack) + ", lipschitz " +
                               detail::sci(lo) + ".." + detail::sci(hi));
}

inline CheckResult check_meanfield_psi_monotonicity() {
    // dt = 1e-3 with T = 0.2 keeps the suite within its time budget.
    std::mt19937_64 rng(1);
    const ModelSpec model = make_model("congestion", {{"T", 0.2}});
    const TorusGrid g(64);
    std::vector<std::pair<GridMeasure, GridMeasure>> pairs;
    for (int i = 0; i < 20; ++i) {
        GridMeasure m = fixtures::random_measure(rng, g);
        GridMeasure sub = fixtures::random_submeasure(rng, m);
        pairs.emplace_back(std::move(m), std::move(sub));
    }
    const double v = psi_monotonicity_check(model, 0.0, pairs, 0.0, 1e-7, 200);
    return detail::verdict("10", "meanfield-psi-monotonicity", "meanfield", v <= 1e-3,
                           "20 pairs, n=64, dt=1e-3, max violation " + detail::sci(v));
}

inline CheckResult check_phi() {
    std::mt19937_64 rng(111);
    const TorusGrid g32(32), g40(40), g48(48), g64(64);
    bool zero = true;
    {
        std::vector<double> v(32);
        for (int j = 0; j < 32; ++j) v[j] = 0.5 + 0.4 * std::sin(2 * std::numbers::pi * g32.node(j));
        const PhiResult r = phi_solve(GridFunction(g32, v));
        zero = r.value == 0.0;
        for (double f : r.f_hat.values) zero = zero && f == 0.0;
    }
    double constant = 0.0;
    for (double c : {0.5, 1.0, 3.0})
        constant = std::max(constant, std::abs(phi_solve(GridFunction(g40, std::vector<double>(40, -c))).value -
                                               0.5 * c * c));
    double grad = 0.0;
    for (int s = 0; s < 10; ++s) {
        const GridFunction mu = detail::random_density(rng, g48);
        grad = std::max(grad, phi_gradient_check(mu, {detail::random_density(rng, g48)}));
    }
    std::vector<std::pair<GridFunction, GridFunction>> pairs;
    for (int s = 0; s < 50; ++s) {
        GridFunction a = detail::random_density(rng, g48);
        pairs.emplace_back(std::move(a), detail::random_density(rng, g48));
    }
    const double lip = phi_lipschitz_check(pairs);
    double slack = INFINITY;
    for (int s = 0; s < 50; ++s) slack = std::min(slack, phi_energy_inequality_check(detail::random_density(rng, g64)));
    const bool pass = zero && constant <= 1e-8 && grad <= 1e-3 && lip <= 1.0 + 1e-6 && slack >= -1e-6;
    return detail::verdict("11", "phi-obstacle", "phi", pass,
                           std::string("zero on nonnegative ") + (zero ? "yes" : "no") + ", constant " +
                               detail::sci(constant) + ", gradient " + detail::sci(grad) + ", lipschitz " +
                               detail::sci(lip) + ", energy slack " + detail::sci(slack));
}

}  // namespace meanstop
