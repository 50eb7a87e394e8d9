#pragma once

// Experiment drivers behind the meanstop CLI. Each runner fills a RunReport; apart from the
// per-cell solution tables of the meanfield kind, files are written by write_report.

#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "meanstop/checks.hpp"
#include "meanstop/config.hpp"
#include "meanstop/envelopes.hpp"
#include "meanstop/fixtures.hpp"
#include "meanstop/hierarchy.hpp"
#include "meanstop/meanfield.hpp"
#include "meanstop/metrics.hpp"
#include "meanstop/particle_mc.hpp"
#include "meanstop/phi.hpp"
#include "meanstop/report.hpp"

namespace meanstop {

namespace detail {

inline std::uint64_t cell_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return splitmix64(seed ^ splitmix64(a * 0x9e3779b97f4a7c15ULL + b));
}

/// Initial measure of the meanfield, ladder and envelope kinds.
inline GridMeasure probe_measure(const ExperimentConfig& c) {
    const TorusGrid g(c.n_cells);
    if (c.measure == "uniform") return GridMeasure::uniform(g, c.probe_mass);
    if (c.measure == "random") {
        std::mt19937_64 rng(cell_seed(c.seed_or_zero(), 0x6d30));
        return fixtures::random_measure(rng, g, c.probe_mass);
    }
    std::vector<double> v(c.n_cells);
    double s = 0.0;
    for (int j = 0; j < c.n_cells; ++j) s += v[j] = 1.0 + 0.8 * std::cos(2.0 * std::numbers::pi * (g.node(j) - 0.3));
    for (double& x : v) x *= c.probe_mass / s;
    return GridMeasure(g, std::move(v));
}

/// K probe positions for the hierarchy kinds: the configured list, cycled with a shift when short.
inline std::vector<double> probe_positions(const ExperimentConfig& c, int k) {
    std::vector<double> x;
    for (int i = 0; i < k; ++i) {
        const std::size_t m = c.positions.size();
        x.push_back(wrap01(c.positions[i % m] + 0.37 * static_cast<double>(i / m)));
    }
    return x;
}

inline double top(const std::vector<double>& v) { return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end()); }

inline CheckResult check(const std::string& kind, const std::string& name, bool pass, const std::string& detail) {
    return {kind + "." + name, name, kind, pass, detail};
}

inline double fp_ledger_error(const MeasurePath& p, double m0_total) {
    double out = p.total(p.mesh.n_steps);
    for (const auto& k : p.killed)
        for (double v : k) out += v;
    return std::abs(out - m0_total);
}

}  // namespace detail

inline RunReport run_validate_model(const ExperimentConfig& cfg, int) {
    RunReport r;
    const ValidatorReport v = validate(cfg.build_model(), cfg.samples, cfg.seed_or_zero());
    Table t{"", {"experiment", "quantity", "value"}, {}};
    auto add = [&](const char* q, double x) { t.rows.push_back(row(cfg.kind, q, x)); };
    add("samples", v.samples);
    add("finite_ok", v.finite_ok);
    add("coercivity_ok", v.coercivity_ok);
    add("growth_ok", v.growth_ok);
    add("convexity_ok", v.convexity_ok);
    add("duality_ok", v.duality_ok);
    add("legendre_ok", v.legendre_ok);
    add("gradient_ok", v.gradient_ok);
    add("psi_monotone_ok", v.psi_monotone_ok);
    add("coercivity_h", v.coercivity_h);
    add("coercivity_l", v.coercivity_l);
    add("duality_gap", v.duality_gap);
    add("legendre_residual", v.legendre_residual);
    add("psi_lipschitz_x", v.psi_lipschitz_x);
    add("psi_lipschitz_m", v.psi_lipschitz_m);
    add("terminal_lipschitz", v.terminal_lipschitz);
    add("psi_sup", v.psi_sup);
    r.tables.push_back(std::move(t));
    std::string failures;
    for (const auto& f : v.failures) failures += (failures.empty() ? "" : "; ") + f;
    r.checks.push_back(detail::check(cfg.kind, "model-assumptions", v.ok(),
                                     v.ok() ? cfg.model + " passes every structural check" : failures));
    return r;
}

inline RunReport run_envelope(const ExperimentConfig& cfg, int workers) {
    RunReport r;
    const ModelSpec model = cfg.build_model();
    const GridMeasure m0 = detail::probe_measure(cfg);
    double target = std::numeric_limits<double>::quiet_NaN();
    std::string status = "ok";
    try {
        target = continuous_envelope(model, m0).value;
    } catch (const Error& e) {
        status = e.what();
    }
    struct Cell {
        int k = 0;
        double discrete = std::numeric_limits<double>::quiet_NaN();
        std::string status = "ok";
    };
    const auto cells = parallel_map(cfg.big_n.size(), workers, [&](std::size_t i) {
        Cell c;
        try {
            const EmpiricalState s = approximate_measure(m0, cfg.big_n[i]);
            c.k = s.k();
            c.discrete = discrete_envelope(model, s).value;
        } catch (const Error& e) {
            c.status = e.what();
        }
        return c;
    });
    Table t{"", {"experiment", "N", "K", "discrete", "continuous", "gap", "status"}, {}};
    Series gap{"|discrete - continuous|", {}, {}};
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const double e = std::abs(cells[i].discrete - target);
        t.rows.push_back(row(cfg.kind, cfg.big_n[i], cells[i].k, cells[i].discrete, target, e,
                             cells[i].status != "ok" ? cells[i].status : status));
        gap.x.push_back(cfg.big_n[i]);
        gap.y.push_back(e);
    }
    r.tables.push_back(std::move(t));
    r.charts.push_back({"gap", "Envelope gap along approximating empirical measures", "N", "gap", true, true, {gap}});

    // Psi-monotonicity of the discrete envelope on seeded random states.
    std::mt19937_64 rng(detail::cell_seed(cfg.seed_or_zero(), 0xe9));
    double worst = -INFINITY;
    for (int s = 0; s < cfg.samples; ++s) {
        const int big_n = 2 + s % 7;
        const EmpiricalState st = fixtures::random_state(rng, big_n, 1 + s % std::min(big_n, 5));
        const Features full = model.features(st);
        const double g = discrete_envelope(model, st).value;
        for_each_subset_by_size(st.k(), [&](unsigned mask, const std::vector<int>& idx) {
            double pen = 0.0;
            for (int i : idx) pen += model.psi(st[i], full);
            worst = std::max(worst, g - discrete_envelope(model, st.without(mask)).value - pen / big_n);
        });
    }
    r.checks.push_back(detail::check(cfg.kind, "psi-non-increasing", worst <= 1e-10,
                                     std::to_string(cfg.samples) + " states, worst " + detail::sci(worst)));
    return r;
}

inline RunReport run_nparticle(const ExperimentConfig& cfg, int workers) {
    RunReport r;
    const ModelSpec model = cfg.build_model();
    const int steps = cfg.steps_for(model.horizon - cfg.t0);
    struct Cell {
        std::vector<double> values;  // by K = 1..k
        RegularityReport reg;
        double obstacle = -INFINITY;
        std::string status = "ok";
    };
    const auto cells = parallel_map(cfg.big_n.size(), workers, [&](std::size_t i) {
        Cell c;
        const int big_n = cfg.big_n[i], k = std::min(big_n, cfg.k_max);
        try {
            HierarchyOptions opt;
            opt.t0 = cfg.t0;
            const ValueHierarchy h = solve_hierarchy(model, big_n, k, cfg.n_cells, steps, opt);
            for (int kk = 1; kk <= k; ++kk) {
                const EmpiricalState s(big_n, detail::probe_positions(cfg, kk));
                c.values.push_back(query_value(h, cfg.t0, s));
                // Obstacle inequality along the probe's time line.
                const Features f = model.features(s);
                for (int step = 0; step <= h.n_steps; ++step) {
                    const double t = h.time(step);
                    const double v = query_value(h, t, s);
                    for (int i2 = 0; i2 < kk; ++i2)
                        c.obstacle = std::max(c.obstacle, v - query_value(h, t, s.without(1u << i2)) -
                                                              model.psi(s[i2], f) / big_n);
                }
            }
            c.reg = regularity_report(h, 2000, detail::cell_seed(cfg.seed_or_zero(), big_n));
        } catch (const Error& e) {
            c.status = e.what();
        }
        return c;
    });
    Table values{"", {"experiment", "N", "K", "t0", "value", "status"}, {}};
    Table reg{"regularity", {"experiment", "N", "K", "spatial", "removal", "holder"}, {}};
    std::map<int, Series> by_k;
    double worst = -INFINITY;
    bool solved = true;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const Cell& c = cells[i];
        const int big_n = cfg.big_n[i], k = std::min(big_n, cfg.k_max);
        solved = solved && c.status == "ok";
        worst = std::max(worst, c.obstacle);
        for (int kk = 1; kk <= k; ++kk) {
            const double v = c.status == "ok" ? c.values[kk - 1] : std::numeric_limits<double>::quiet_NaN();
            values.rows.push_back(row(cfg.kind, big_n, kk, cfg.t0, v, c.status));
            if (c.status == "ok")
                reg.rows.push_back(row(cfg.kind, big_n, kk, c.reg.spatial[kk], c.reg.removal[kk], c.reg.holder[kk]));
            auto& s = by_k[kk];
            s.name = "K=" + std::to_string(kk);
            s.x.push_back(big_n);
            s.y.push_back(v);
        }
    }
    r.tables.push_back(std::move(values));
    r.tables.push_back(std::move(reg));
    Chart chart{"value", "Hierarchy value at the probe states", "N", "V(t0, x)", true, false, {}};
    for (auto& [k, s] : by_k) chart.series.push_back(std::move(s));
    r.charts.push_back(std::move(chart));
    r.checks.push_back(detail::check(cfg.kind, "all-solved", solved, solved ? "every N solved" : "some N failed"));
    r.checks.push_back(detail::check(cfg.kind, "psi-monotone-along-probes", worst <= 1e-9,
                                     "worst single-removal gap " + detail::sci(worst)));
    return r;
}

inline RunReport run_montecarlo(const ExperimentConfig& cfg, int workers) {
    RunReport r;
    const ModelSpec model = cfg.build_model();
    const int steps = cfg.steps_for(model.horizon - cfg.t0);
    const int k = static_cast<int>(cfg.positions.size());
    Table t{"", {"experiment", "N", "K", "t0", "mean", "stderr", "n_paths", "seed", "pde", "status"}, {}};
    Series mc{"Monte Carlo", {}, {}}, pde{"PDE", {}, {}};
    double worst = 0.0;
    bool solved = true;
    // Paths already fan out over the workers, so the N values run in order.
    for (int big_n : cfg.big_n) {
        CostEstimate e;
        double v = std::numeric_limits<double>::quiet_NaN();
        std::string status = "ok";
        try {
            if (k > std::min(big_n, 3)) throw DomainError("montecarlo: more probe positions than min(N, 3)");
            HierarchyOptions opt;
            opt.t0 = cfg.t0;
            const auto h = std::make_shared<const ValueHierarchy>(solve_hierarchy(model, big_n, k, cfg.n_cells, steps, opt));
            SimConfig sc;
            sc.n_paths = cfg.n_paths;
            sc.dt_sim = cfg.dt_sim > 0.0 ? cfg.dt_sim : h->dt;
            sc.seed = detail::cell_seed(cfg.seed_or_zero(), big_n);
            sc.t0 = cfg.t0;
            sc.workers = workers;
            sc.initial = EmpiricalState(big_n, cfg.positions);
            e = simulate(model, extract_policy(h, model), sc);
            v = query_value(*h, cfg.t0, sc.initial);
            worst = std::max(worst, e.std_error > 0.0 ? std::abs(e.mean - v) / e.std_error
                                                      : (e.mean == v ? 0.0 : INFINITY));
        } catch (const Error& ex) {
            status = ex.what();
            solved = false;
            e.mean = e.std_error = std::numeric_limits<double>::quiet_NaN();
        }
        t.rows.push_back(row(cfg.kind, big_n, k, cfg.t0, e.mean, e.std_error, cfg.n_paths,
                             detail::cell_seed(cfg.seed_or_zero(), big_n), v, status));
        mc.x.push_back(big_n);
        mc.y.push_back(e.mean);
        pde.x.push_back(big_n);
        pde.y.push_back(v);
    }
    r.tables.push_back(std::move(t));
    r.charts.push_back({"cost", "Simulated cost of the extracted policy", "N", "cost", true, false, {mc, pde}});
    r.checks.push_back(detail::check(cfg.kind, "within-3-se", solved && worst <= 3.0,
                                     "max |mc - pde| / se = " + detail::sci(worst)));
    return r;
}

inline RunReport run_meanfield(const ExperimentConfig& cfg, int workers) {
    RunReport r;
    const ModelSpec model = cfg.build_model();
    const GridMeasure m0 = detail::probe_measure(cfg);
    const int steps = cfg.steps_for(model.horizon - cfg.t0);
    const std::size_t nd = cfg.deltas.size();
    struct Cell {
        std::optional<MFCSolution> sol;
        std::string status = "ok";
    };
    const auto cells = parallel_map(cfg.thetas.size() * nd, workers, [&](std::size_t i) {
        Cell c;
        try {
            c.sol = solve_mfc(model, cfg.t0, m0, cfg.thetas[i / nd], cfg.deltas[i % nd], steps);
        } catch (const Error& e) {
            c.status = e.what();
        }
        return c;
    });
    Table t{"",
            {"experiment", "theta", "delta", "value", "running", "stopping", "penalty", "terminal", "iterations",
             "residual", "converged", "status"},
            {}};
    Chart mass{"mass", "Surviving mass", "t", "m(t)", false, false, {}};
    bool converged = true;
    double ledger = 0.0;
    namespace fs = std::filesystem;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const double theta = cfg.thetas[i / nd], delta = cfg.deltas[i % nd];
        const Cell& c = cells[i];
        if (!c.sol) {
            const double nan = std::numeric_limits<double>::quiet_NaN();
            t.rows.push_back(row(cfg.kind, theta, delta, nan, nan, nan, nan, nan, 0, nan, false, c.status));
            converged = false;
            continue;
        }
        const MFCSolution& s = *c.sol;
        converged = converged && s.converged;
        ledger = std::max(ledger, detail::fp_ledger_error(s.path, m0.total()));
        t.rows.push_back(row(cfg.kind, theta, delta, s.value, s.cost.running, s.cost.stopping, s.cost.penalty,
                             s.cost.terminal, s.iterations, s.residual, s.converged, c.status));
        Series ser{"theta=" + detail::tick_label(theta) + " delta=" + detail::tick_label(delta), {}, {}};
        for (int k = 0; k <= steps; ++k) {
            ser.x.push_back(s.path.mesh.time(k));
            ser.y.push_back(s.path.total(k));
        }
        mass.series.push_back(std::move(ser));
        const fs::path dir = fs::path(cfg.out) / ("meanfield_cell" + std::to_string(i));
        fs::create_directories(dir);
        write_solution(s, dir.string());
        for (const char* f : {"meta", "m.csv", "alpha.csv", "beta.csv", "u.csv"})
            r.files.push_back("meanfield_cell" + std::to_string(i) + "/" + f);
    }
    r.tables.push_back(std::move(t));
    r.charts.push_back(std::move(mass));
    r.checks.push_back(detail::check(cfg.kind, "converged", converged,
                                     converged ? "every cell converged" : "some cells did not converge"));
    r.checks.push_back(
        detail::check(cfg.kind, "mass-ledger", ledger <= 1e-10, "max ledger error " + detail::sci(ledger)));
    return r;
}

inline RunReport run_ladder(const ExperimentConfig& cfg, int workers) {
    RunReport r;
    const ModelSpec model = cfg.build_model();
    const GridMeasure m0 = detail::probe_measure(cfg);
    const int steps = cfg.steps_for(model.horizon - cfg.t0);
    for (std::size_t i = 1; i < cfg.thetas.size(); ++i)
        if (!(cfg.thetas[i] < cfg.thetas[i - 1])) throw ParameterError("ladder: thetas must decrease");
    // One ladder per theta row; rows are independent.
    const auto rows = parallel_map(cfg.thetas.size(), workers, [&](std::size_t i) {
        return regularization_ladder(model, cfg.t0, m0, {cfg.thetas[i]}, cfg.deltas, steps);
    });
    Table t{"", {"experiment", "theta", "delta", "value", "penalty_free", "iterations", "residual", "converged"}, {}};
    Table cauchy{"cauchy", {"experiment", "theta", "delta", "next_delta", "difference"}, {}};
    Chart values{"value", "Regularized value along the delta ladder", "delta", "U", true, false, {}};
    Chart diffs{"cauchy", "delta-Cauchy differences", "delta", "|U(delta) - U(delta/2)|", true, true, {}};
    bool positive = true, decreasing = true, converged = true;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const LadderTable& lt = rows[i];
        Series sv{"theta=" + detail::tick_label(cfg.thetas[i]), {}, {}}, sd = sv;
        for (const auto& c : lt.cells[0]) {
            t.rows.push_back(row(cfg.kind, c.theta, c.delta, c.value, c.penalty_free, c.iterations, c.residual,
                                 c.converged));
            converged = converged && c.converged;
            if (c.converged) positive = positive && c.value >= c.penalty_free;
            sv.x.push_back(c.delta);
            sv.y.push_back(c.value);
        }
        const auto& d = lt.delta_cauchy[0];
        for (std::size_t j = 0; j < d.size(); ++j) {
            cauchy.rows.push_back(row(cfg.kind, cfg.thetas[i], cfg.deltas[j], cfg.deltas[j + 1], d[j]));
            if (j > 0) decreasing = decreasing && d[j] < d[j - 1];
            sd.x.push_back(cfg.deltas[j]);
            sd.y.push_back(d[j]);
        }
        values.series.push_back(std::move(sv));
        diffs.series.push_back(std::move(sd));
    }
    Table theta_t{"theta", {"experiment", "delta", "theta", "next_theta", "difference"}, {}};
    for (std::size_t j = 0; j < cfg.deltas.size(); ++j)
        for (std::size_t i = 0; i + 1 < rows.size(); ++i)
            theta_t.rows.push_back(row(cfg.kind, cfg.deltas[j], cfg.thetas[i], cfg.thetas[i + 1],
                                       std::abs(rows[i].cells[0][j].value - rows[i + 1].cells[0][j].value)));
    r.tables.push_back(std::move(t));
    r.tables.push_back(std::move(cauchy));
    r.tables.push_back(std::move(theta_t));
    r.charts.push_back(std::move(values));
    r.charts.push_back(std::move(diffs));
    r.checks.push_back(detail::check(cfg.kind, "converged", converged, converged ? "every cell converged" : "some cells did not converge"));
    r.checks.push_back(detail::check(cfg.kind, "penalty-positivity", positive, "U >= J of the same triple"));
    r.checks.push_back(detail::check(cfg.kind, "delta-cauchy-decreasing", decreasing,
                                     "consecutive differences shrink along every row"));
    return r;
}

/// e(N, K) = max over probes |V^{N,K}(t0, x) - U_est(t0, m_x)| with U_est the ladder corner at m_x.
inline RunReport run_convergence(const ExperimentConfig& cfg, int workers) {
    if (cfg.k_max > 3) throw ParameterError("converge: k_max must be at most 3");
    for (std::size_t i = 1; i < cfg.big_n.size(); ++i)
        if (!(cfg.big_n[i] > cfg.big_n[i - 1])) throw ParameterError("converge: big_n must be ascending");
    RunReport r;
    const ModelSpec model = cfg.build_model();
    const int steps = cfg.steps_for(model.horizon - cfg.t0);
    const TorusGrid g(cfg.n_cells);
    const double tol = 5.0 * (g.h() * g.h() + (model.horizon - cfg.t0) / steps);
    struct Cell {
        std::vector<double> e;  // by K = 0..k
        std::vector<std::string> status;
    };
    const auto cells = parallel_map(cfg.big_n.size(), workers, [&](std::size_t i) {
        const int big_n = cfg.big_n[i], k = std::min(big_n, cfg.k_max);
        Cell c;
        c.e.assign(k + 1, std::numeric_limits<double>::quiet_NaN());
        c.status.assign(k + 1, "ok");
        std::optional<ValueHierarchy> h;
        try {
            HierarchyOptions opt;
            opt.t0 = cfg.t0;
            h.emplace(solve_hierarchy(model, big_n, k, cfg.n_cells, steps, opt));
        } catch (const Error& e) {
            c.status.assign(k + 1, e.what());
            return c;
        }
        for (int kk = 0; kk <= k; ++kk) {
            try {
                std::mt19937_64 rng(detail::cell_seed(cfg.seed_or_zero(), big_n, kk));
                std::uniform_int_distribution<int> pick(0, cfg.n_cells - 1);
                double e = 0.0;
                const int probes = kk == 0 ? 1 : cfg.probe_count;
                for (int p = 0; p < probes; ++p) {
                    std::vector<double> x(kk);
                    for (double& v : x) v = g.node(pick(rng));
                    const EmpiricalState s(big_n, x);
                    const double v = query_value(*h, cfg.t0, s);
                    const LadderTable lt =
                        regularization_ladder(model, cfg.t0, s.as_measure(g), cfg.thetas, cfg.deltas, steps);
                    if (!std::isfinite(lt.corner)) throw NumericalError("converge: ladder failed at a probe");
                    e = std::max(e, std::abs(v - lt.corner));
                }
                c.e[kk] = e;
            } catch (const Error& ex) {
                c.status[kk] = ex.what();
            }
        }
        return c;
    });
    Table t{"", {"experiment", "N", "K", "e", "tolerance", "probes", "status"}, {}};
    std::map<int, Series> by_k;
    bool solved = true;
    double empty = 0.0;
    std::vector<double> k1;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const int big_n = cfg.big_n[i];
        for (std::size_t kk = 0; kk < cells[i].e.size(); ++kk) {
            const double e = cells[i].e[kk];
            solved = solved && cells[i].status[kk] == "ok";
            if (kk == 0) {
                empty = std::max(empty, std::isnan(e) ? INFINITY : e);
                continue;
            }
            t.rows.push_back(row(cfg.kind, big_n, static_cast<int>(kk), e, tol, cfg.probe_count, cells[i].status[kk]));
            if (kk == 1) k1.push_back(e);
            auto& s = by_k[static_cast<int>(kk)];
            s.name = "K=" + std::to_string(kk);
            s.x.push_back(big_n);
            s.y.push_back(e);
        }
    }
    r.tables.push_back(std::move(t));
    Chart chart{"error", "Hierarchy versus mean-field value", "N", "e(N, K)", true, true, {}};
    for (auto& [k, s] : by_k) chart.series.push_back(std::move(s));
    r.charts.push_back(std::move(chart));
    bool trend = true;
    for (std::size_t i = 1; i < k1.size(); ++i) trend = trend && k1[i] <= 1.2 * k1[i - 1];
    std::string k1s;
    for (double v : k1) k1s += " " + detail::sci(v);
    r.checks.push_back(detail::check(cfg.kind, "all-cells-solved", solved, solved ? "every cell solved" : "some cells failed"));
    r.checks.push_back(detail::check(cfg.kind, "empty-probe", empty <= 1e-12, "e at K=0: " + detail::sci(empty)));
    r.checks.push_back(detail::check(cfg.kind, "k1-non-increasing", trend, "e(N,1):" + k1s));
    return r;
}

/// Least-squares slope of log |V(T - tau, x*) - V(T, x*)| against log tau for tau = dt {4, 8, 16, 32},
/// N = K = 1, with x* the node of largest variation over the first window.
inline double time_holder_exponent(const ModelSpec& model, int n_cells, int n_steps, double* where = nullptr) {
    const ValueHierarchy h = solve_hierarchy(model, 1, 1, n_cells, n_steps);
    const auto last = h.slice(1, h.n_steps), probe = h.slice(1, h.n_steps - 4);
    std::size_t arg = 0;
    for (std::size_t j = 0; j < last.size(); ++j)
        if (std::abs(probe[j] - last[j]) > std::abs(probe[arg] - last[arg])) arg = j;
    if (where) *where = h.grid.node(static_cast<int>(arg));
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int m = 0;
    for (int w : {4, 8, 16, 32}) {
        if (w > h.n_steps) break;
        const double d = std::abs(h.slice(1, h.n_steps - w)[arg] - last[arg]);
        if (!(d > 0.0)) return 0.0;
        const double x = std::log(w * h.dt), y = std::log(d);
        sx += x, sy += y, sxx += x * x, sxy += x * y, ++m;
    }
    if (m < 2) throw DomainError("time_holder_exponent: need at least 8 time steps");
    return (m * sxy - sx * sy) / (m * sxx - sx * sx);
}

/// Cross-N regularity constants of the hierarchy, mean-field Lipschitz constants per ladder cell and
/// the time-Holder fit.
inline RunReport run_lipschitz(const ExperimentConfig& cfg, int workers) {
    if (cfg.k_max > 3) throw ParameterError("lipschitz: k_max must be at most 3");
    RunReport r;
    const ModelSpec model = cfg.build_model();
    const int steps = cfg.steps_for(model.horizon - cfg.t0);
    const auto reps = parallel_map(cfg.big_n.size(), workers, [&](std::size_t i) {
        const int big_n = cfg.big_n[i];
        HierarchyOptions opt;
        opt.t0 = cfg.t0;
        return regularity_report(solve_hierarchy(model, big_n, std::min(big_n, cfg.k_max), cfg.n_cells, steps, opt),
                                 2000, detail::cell_seed(cfg.seed_or_zero(), big_n));
    });
    Table t{"", {"experiment", "N", "spatial", "removal", "holder"}, {}};
    Series sp{"spatial", {}, {}}, rm{"removal", {}, {}}, ho{"holder", {}, {}};
    double factor = 1.0;
    auto ratio = [](double a, double b) {
        if (a < 1e-12 && b < 1e-12) return 1.0;
        return b < 1e-12 ? INFINITY : a / b;
    };
    for (std::size_t i = 0; i < reps.size(); ++i) {
        const double s = detail::top(reps[i].spatial), m = detail::top(reps[i].removal), h = detail::top(reps[i].holder);
        t.rows.push_back(row(cfg.kind, cfg.big_n[i], s, m, h));
        sp.x.push_back(cfg.big_n[i]), sp.y.push_back(s);
        rm.x.push_back(cfg.big_n[i]), rm.y.push_back(m);
        ho.x.push_back(cfg.big_n[i]), ho.y.push_back(h);
        if (i > 0)
            factor = std::max({factor, ratio(s, detail::top(reps[i - 1].spatial)),
                               ratio(m, detail::top(reps[i - 1].removal)), ratio(h, detail::top(reps[i - 1].holder))});
    }
    r.tables.push_back(std::move(t));
    r.charts.push_back({"constants", "Regularity constants across N", "N", "constant", true, false, {sp, rm, ho}});

    const TorusGrid g(cfg.n_cells);
    const std::size_t nd = cfg.deltas.size();
    const auto mf = parallel_map(cfg.thetas.size() * nd, workers, [&](std::size_t i) {
        std::mt19937_64 rng(detail::cell_seed(cfg.seed_or_zero(), 0x11f));
        std::vector<std::pair<GridMeasure, GridMeasure>> pairs;
        for (int p = 0; p < cfg.probe_count; ++p) {
            GridMeasure a = fixtures::random_measure(rng, g);
            pairs.emplace_back(std::move(a), fixtures::random_measure(rng, g));
        }
        try {
            return mf_lipschitz_constant(model, cfg.t0, pairs, cfg.thetas[i / nd], cfg.deltas[i % nd], steps);
        } catch (const Error&) {
            return std::numeric_limits<double>::quiet_NaN();
        }
    });
    Table mt{"meanfield", {"experiment", "theta", "delta", "lipschitz"}, {}};
    for (std::size_t i = 0; i < mf.size(); ++i)
        mt.rows.push_back(row(cfg.kind, cfg.thetas[i / nd], cfg.deltas[i % nd], mf[i]));
    r.tables.push_back(std::move(mt));

    double x_star = 0.0;
    const double exponent = time_holder_exponent(model, cfg.n_cells, cfg.steps_for(model.horizon), &x_star);
    r.tables.push_back({"holder", {"experiment", "x", "exponent"}, {row(cfg.kind, x_star, exponent)}});
    r.checks.push_back(detail::check(cfg.kind, "cross-n-stability", factor <= 1.25,
                                     "largest consecutive ratio " + detail::sci(factor)));
    return r;
}

inline RunReport run_phi(const ExperimentConfig& cfg, int workers) {
    RunReport r;
    const TorusGrid g(cfg.n_cells);
    std::mt19937_64 rng(detail::cell_seed(cfg.seed_or_zero(), 0xf1));
    std::vector<GridFunction> mus, dirs;
    for (int s = 0; s < cfg.samples; ++s) {
        mus.push_back(detail::random_density(rng, g));
        dirs.push_back(detail::random_density(rng, g));
    }
    struct Cell {
        PhiResult res;
        double grad = 0.0, slack = 0.0, lip = 0.0;
    };
    const auto cells = parallel_map(mus.size(), workers, [&](std::size_t i) {
        Cell c;
        c.res = phi_solve(mus[i]);
        c.grad = phi_gradient_check(mus[i], {dirs[i]});
        c.slack = phi_energy_inequality_check(mus[i]);
        c.lip = phi_lipschitz_check({{mus[i], dirs[i]}});
        return c;
    });
    Table t{"", {"experiment", "sample", "value", "exact", "newton_iters", "gradient_error", "energy_slack", "lipschitz_ratio"}, {}};
    double grad = 0.0, slack = INFINITY, lip = 0.0;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const Cell& c = cells[i];
        t.rows.push_back(row(cfg.kind, static_cast<int>(i), c.res.value, c.res.exact, c.res.newton_iters, c.grad,
                             c.slack, c.lip));
        grad = std::max(grad, c.grad);
        slack = std::min(slack, c.slack);
        lip = std::max(lip, c.lip);
    }
    r.tables.push_back(std::move(t));
    // Phi(mu + c) along constant shifts of the first sample: non-increasing, zero once mu + c >= 0.
    Series shift{"Phi(mu + c)", {}, {}};
    if (!mus.empty())
        for (int s = 0; s <= 20; ++s) {
            const double c = -2.0 + 0.2 * s;
            GridFunction m = mus[0];
            for (double& v : m.values) v += c;
            shift.x.push_back(c);
            shift.y.push_back(phi_solve(m).value);
        }
    r.charts.push_back({"shift", "Phi along constant shifts", "c", "Phi", false, false, {shift}});
    r.checks.push_back(detail::check(cfg.kind, "gradient", grad <= 1e-3, "worst relative error " + detail::sci(grad)));
    r.checks.push_back(detail::check(cfg.kind, "lipschitz", lip <= 1.0 + 1e-6, "worst ratio " + detail::sci(lip)));
    r.checks.push_back(detail::check(cfg.kind, "energy-inequality", slack >= -1e-6, "worst slack " + detail::sci(slack)));
    return r;
}

// ---------------------------------------------------------------------------------------------
// Acceptance suite

inline CheckResult check_convergence_experiment(int workers = 1) {
    ExperimentConfig dec;
    dec.kind = "converge";
    dec.seed = 12;
    dec.model = "quadratic";
    dec.model_params = {{"g_amp", 0.5}, {"g_const", 0.25}};
    dec.n_cells = 16;
    dec.k_max = 3;
    dec.big_n = {1, 2, 3, 4};
    dec.thetas = {0.0};
    dec.deltas = {1e-2};
    dec.probe_count = 3;
    const RunReport a = run_convergence(dec, workers);
    bool pass = a.passed();
    double worst = 0.0, tol = 0.0;
    for (const auto& rw : a.tables[0].rows) {
        const double e = std::stod(rw[3]);
        tol = std::stod(rw[4]);
        worst = std::max(worst, std::isnan(e) ? INFINITY : e);
    }
    pass = pass && worst <= tol;

    ExperimentConfig cong = dec;
    cong.model = "congestion";
    cong.model_params = {};
    cong.k_max = 1;
    cong.big_n = {2, 4, 8, 16};
    cong.deltas = {1e-4};
    cong.probe_count = 4;
    const RunReport b = run_convergence(cong, workers);
    pass = pass && b.passed();
    std::string trend;
    for (const auto& c : b.checks)
        if (c.name == "k1-non-increasing") trend = c.detail;
    return detail::verdict("12", "convergence-experiment", "converge", pass,
                           "decoupled max e " + detail::sci(worst) + " (tol " + detail::sci(tol) + "); congestion " +
                               trend);
}

/// Small configurations of every CSV-producing kind, used by the determinism check.
inline std::vector<std::string> determinism_configs() {
    return {
        "[experiment]\nkind = validate-model\nseed = 3\nsamples = 50\n[model]\nname = crowd\n",
        "[experiment]\nkind = envelope\nseed = 4\nsamples = 20\n[model]\nname = congestion\n[grid]\nn_cells = 16\n"
        "big_n = 4, 8\n",
        "[experiment]\nkind = nparticle\n[model]\nname = congestion\n[grid]\nn_cells = 8\nk_max = 2\nbig_n = 2, 3\n",
        "[experiment]\nkind = montecarlo\nseed = 5\n[model]\nname = congestion\n[grid]\nn_cells = 12\nbig_n = 2, 3\n"
        "[montecarlo]\nn_paths = 300\n[probes]\npositions = 0.1, 0.6\n",
        "[experiment]\nkind = meanfield\n[model]\nname = congestion\n[grid]\nn_cells = 8\nn_steps = 20\n"
        "[regularization]\ntheta = 0, 0.1\ndelta = 1e-2\n",
        "[experiment]\nkind = ladder\n[model]\nname = congestion\n[grid]\nn_cells = 8\nn_steps = 20\n"
        "[regularization]\ntheta = 0.1, 0\ndelta = 1e-2, 5e-3\n",
        "[experiment]\nkind = converge\nseed = 6\n[model]\nname = congestion\n[grid]\nn_cells = 8\nbig_n = 2, 4\n"
        "[regularization]\ntheta = 0\ndelta = 1e-2\n[probes]\ncount = 2\n",
        "[experiment]\nkind = lipschitz\nseed = 7\n[model]\nname = congestion\n[grid]\nn_cells = 8\nbig_n = 2, 3\n"
        "k_max = 2\n[regularization]\ntheta = 0\ndelta = 1e-2\n[probes]\ncount = 2\n",
        "[experiment]\nkind = phi\nseed = 8\nsamples = 5\n[grid]\nn_cells = 16\n",
    };
}

inline RunReport run_experiment(const ExperimentConfig& cfg, int workers);

/// Every CSV of every kind is byte-identical across two runs with different worker counts.
inline CheckResult check_determinism() {
    namespace fs = std::filesystem;
    const fs::path base = fs::temp_directory_path() / ("meanstop_determinism_" + std::to_string(::getpid()));
    int files = 0;
    std::string mismatch;
    for (const auto& text : determinism_configs()) {
        const std::string kind = parse_config_string(text).kind;
        std::vector<std::map<std::string, std::string>> runs;
        for (int workers : {1, 2}) {
            ExperimentConfig cfg = parse_config_string(text);
            cfg.out = (base / (cfg.kind + "_w" + std::to_string(workers))).string();
            fs::remove_all(cfg.out);
            RunReport r = run_experiment(cfg, workers);
            write_report(r);
            std::map<std::string, std::string> csv;
            for (const auto& f : r.files) {
                if (fs::path(f).extension() != ".csv") continue;
                std::ifstream in(fs::path(cfg.out) / f, std::ios::binary);
                csv[f] = std::string(std::istreambuf_iterator<char>(in), {});
            }
            runs.push_back(std::move(csv));
        }
        files += static_cast<int>(runs[0].size());
        if (runs[0] != runs[1] || runs[0].empty()) mismatch += (mismatch.empty() ? "" : ", ") + kind;
    }
    fs::remove_all(base);
    return detail::verdict("13", "determinism", "determinism", mismatch.empty(),
                           mismatch.empty() ? std::to_string(files) + " CSV files identical across reruns"
                                            : "differing output for: " + mismatch);
}

struct Criterion {
    std::string id, name, module;
    std::function<CheckResult()> run;
};

inline std::vector<Criterion> acceptance_criteria(int workers = 1) {
    return {
        {"1", "metric-sandwich", "metrics", check_metric_sandwich},
        {"2", "removal-distance", "metrics", check_removal_distance},
        {"3", "envelope-monotonicity", "envelope", check_envelope_monotonicity},
        {"4", "envelope-convergence", "envelope", check_envelope_convergence},
        {"5", "hierarchy-reference", "nparticle", check_hierarchy_reference},
        {"6", "hierarchy-obstacle", "nparticle", check_hierarchy_obstacle},
        {"7", "montecarlo-cross-validation", "montecarlo", [workers] { return check_montecarlo(workers); }},
        {"8", "meanfield-internals", "meanfield", check_meanfield_internals},
        {"9", "regularization-ladder", "ladder", check_regularization_ladder},
        {"10", "meanfield-psi-monotonicity", "meanfield", check_meanfield_psi_monotonicity},
        {"11", "phi-obstacle", "phi", check_phi},
        {"12", "convergence-experiment", "converge", [workers] { return check_convergence_experiment(workers); }},
        {"13", "determinism", "determinism", check_determinism},
    };
}

/// A criterion is selected when any filter token equals its module, id or name.
inline bool selected(const Criterion& c, const std::vector<std::string>& filter) {
    if (filter.empty()) return true;
    return std::any_of(filter.begin(), filter.end(),
                       [&](const std::string& f) { return f == c.module || f == c.id || f == c.name; });
}

/// Model validation first (a failing model skips everything else), then the selected criteria.
inline RunReport run_all_checks(const ExperimentConfig& cfg, int workers) {
    RunReport r;
    ExperimentConfig vcfg = cfg;
    vcfg.kind = "validate-model";
    const RunReport v = run_validate_model(vcfg, workers);
    r.checks = v.checks;
    r.checks[0].id = "0";
    Table t{"", {"experiment", "id", "name", "module", "pass", "detail"}, {}};
    auto add = [&](const CheckResult& c) { t.rows.push_back(row(cfg.kind, c.id, c.name, c.module, c.pass, c.detail)); };
    add(r.checks[0]);
    const auto all = acceptance_criteria(workers);
    std::vector<Criterion> chosen;
    for (const auto& c : all)
        if (selected(c, cfg.filter)) chosen.push_back(c);
    if (!v.passed()) {
        for (const auto& c : chosen) {
            const CheckResult skipped{c.id, c.name, c.module, false, "skipped: model validation failed"};
            r.checks.push_back(skipped);
            add(skipped);
        }
    } else {
        for (const auto& c : chosen) {
            CheckResult res;
            try {
                res = c.run();
            } catch (const std::exception& e) {
                res = {c.id, c.name, c.module, false, std::string("error: ") + e.what()};
            }
            r.checks.push_back(res);
            add(res);
        }
    }
    r.tables.push_back(std::move(t));
    return r;
}

inline RunReport run_experiment(const ExperimentConfig& cfg, int workers) {
    using Runner = RunReport (*)(const ExperimentConfig&, int);
    static const std::map<std::string, Runner> runners{
        {"validate-model", run_validate_model}, {"envelope", run_envelope},   {"nparticle", run_nparticle},
        {"montecarlo", run_montecarlo},         {"meanfield", run_meanfield}, {"ladder", run_ladder},
        {"converge", run_convergence},          {"lipschitz", run_lipschitz}, {"phi", run_phi},
        {"check", run_all_checks}};
    const auto it = runners.find(cfg.kind);
    if (it == runners.end()) throw ParameterError("unknown experiment kind '" + cfg.kind + "'");
    const auto start = std::chrono::steady_clock::now();
    RunReport r = it->second(cfg, workers);
    r.config = cfg;
    r.workers = workers;
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

}  // namespace meanstop
