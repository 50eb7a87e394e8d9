#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "meanstop/metrics.hpp"
#include "meanstop/model.hpp"
#include "meanstop/tridiag.hpp"

namespace meanstop {

/// Uniform time mesh t0 = t_0 < ... < t_M = horizon.
struct TimeMesh {
    double t0 = 0.0;
    double horizon = 1.0;
    int n_steps = 1;

    double dt() const { return (horizon - t0) / n_steps; }
    double time(int k) const { return k == n_steps ? horizon : t0 + k * dt(); }
};

/// Mass per cell at every mesh time, and the mass killed during each step.
struct MeasurePath {
    TorusGrid grid;
    TimeMesh mesh;
    std::vector<std::vector<double>> m;       // n_steps + 1 slices
    std::vector<std::vector<double>> killed;  // n_steps slices (may be empty)

    double total(int k) const {
        double s = 0.0;
        for (double v : m[k]) s += v;
        return s;
    }
    GridMeasure at(int k) const { return GridMeasure(grid, m[k]); }
};

/// Drift alpha and killing rate beta >= 0 per (step, cell); step k acts on [t_k, t_{k+1}].
struct ControlField {
    std::vector<std::vector<double>> alpha;
    std::vector<std::vector<double>> beta;

    static ControlField zeros(int n_steps, int n_cells) {
        return {std::vector<std::vector<double>>(n_steps, std::vector<double>(n_cells, 0.0)),
                std::vector<std::vector<double>>(n_steps, std::vector<double>(n_cells, 0.0))};
    }
};

/// Removal measure: killed mass per (step, cell) plus atoms removed at mesh times.
struct JumpMeasure {
    std::vector<std::vector<double>> killed;
    std::vector<std::pair<int, GridMeasure>> atoms;
};

struct CostBreakdown {
    double running = 0.0;
    double stopping = 0.0;
    double penalty = 0.0;  ///< (delta/2) sum dt beta^2 m
    double terminal = 0.0;
    double total() const { return running + stopping + penalty + terminal; }
};

struct MFCOptions {
    double damping = 0.5;
    double tolerance = 1e-6;
    int max_picard = 200;
    int stall_rounds = 10;
    int max_gradient = 400;
    /// Below this delta, solve at 10 delta first and warm start from it.
    double continuation_start = 1e-2;
    /// Starting control (zero when empty).
    ControlField initial;
    /// Skip Picard and run projected gradient descent only.
    bool gradient_only = false;
    /// Measure slices before t0, oldest first; earlier times repeat the oldest slice (m0 if empty).
    std::vector<std::vector<double>> history;
};

struct MFCSolution {
    MeasurePath path;
    ControlField control;
    /// Discrete adjoint: derivative of the cost with respect to m^k, k = 0..n_steps.
    std::vector<std::vector<double>> adjoint;
    double value = 0.0;
    CostBreakdown cost;
    double theta = 0.0;
    double delta = 0.0;
    int iterations = 0;
    double residual = 0.0;
    bool converged = false;
    bool used_gradient = false;
    /// Objective after each accepted gradient step.
    std::vector<double> gradient_values;
};

/// Normalized weights w_r of the kernel (s/theta)^2 (1 - s/theta)^2 at s = r dt, r = 1..floor(theta/dt).
inline std::vector<double> mollifier_weights(double theta, double dt) {
    if (theta == 0.0) return {};
    if (!(theta >= 2.0 * dt * (1.0 - 1e-12))) throw ParameterError("time mollification needs theta >= 2 dt");
    const int r_max = static_cast<int>(std::floor(theta / dt + 1e-9));
    std::vector<double> w(r_max, 0.0);
    double s = 0.0;
    for (int r = 1; r <= r_max; ++r) {
        const double y = r * dt / theta;
        w[r - 1] = y < 1.0 ? y * y * (1.0 - y) * (1.0 - y) : 0.0;
        s += w[r - 1];
    }
    for (double& v : w) v /= s;
    return w;
}

/// (xi_theta * m)_{t_k} = sum_r w_r m_{t_k - r dt}, with m extended by m_0 before t0.
inline MeasurePath time_mollify(const MeasurePath& path, double theta) {
    if (!(theta > 0.0)) throw ParameterError("time_mollify: theta must be positive");
    const auto w = mollifier_weights(theta, path.mesh.dt());
    MeasurePath out = path;
    out.killed.clear();
    const int n = path.grid.n_cells();
    for (int k = 0; k <= path.mesh.n_steps; ++k) {
        std::vector<double> s(n, 0.0);
        for (std::size_t r = 1; r <= w.size(); ++r) {
            const auto& src = path.m[std::max<int>(0, k - static_cast<int>(r))];
            for (int j = 0; j < n; ++j) s[j] += w[r - 1] * src[j];
        }
        out.m[k] = std::move(s);
    }
    return out;
}

namespace detail {

struct MFContext {
    const ModelSpec* model;
    TorusGrid grid;
    TimeMesh mesh;
    double theta = 0.0;
    double delta = 0.0;
    int n = 0, M = 0, nf = 0;
    double dt = 0.0, h = 0.0, alpha_max = 0.0;
    std::vector<double> xs;
    std::vector<std::vector<double>> obs;  // nf x n
    std::vector<double> weights;
    std::vector<std::vector<double>> history;
    std::vector<Features> history_features;

    MFContext(const ModelSpec& mdl, const TorusGrid& g, const TimeMesh& tm, double th, double de,
              std::vector<std::vector<double>> hist = {})
        : model(&mdl), grid(g), mesh(tm), theta(th), delta(de), history(std::move(hist)) {
        n = g.n_cells();
        M = tm.n_steps;
        nf = mdl.n_features();
        dt = tm.dt();
        h = g.h();
        alpha_max = 1.9 / h;
        xs.resize(n);
        for (int j = 0; j < n; ++j) xs[j] = g.node(j);
        obs.assign(nf, std::vector<double>(n));
        for (int q = 0; q < nf; ++q)
            for (int j = 0; j < n; ++j) obs[q][j] = mdl.observable(q, xs[j]);
        weights = mollifier_weights(th, dt);
        for (const auto& s : history) history_features.push_back(mdl.features(s, g));
    }

    // Slices feeding the Psi measure of the mass killed during step k: (index, weight); negative
    // indices refer to the history.
    std::vector<std::pair<int, double>> window(int k) const {
        if (weights.empty()) return {{k, 1.0}};
        std::vector<std::pair<int, double>> out;
        for (std::size_t r = 1; r <= weights.size(); ++r)
            if (weights[r - 1] != 0.0) out.emplace_back(k + 1 - static_cast<int>(r), weights[r - 1]);
        return out;
    }

    const Features& features_at(const std::vector<Features>& feats, int i) const {
        if (i >= 0) return feats[i];
        if (history.empty()) return feats[0];
        const int hs = static_cast<int>(history.size());
        return history_features[std::max(0, hs + i)];
    }

    Features psi_features(const std::vector<Features>& feats, int k) const {
        Features f(nf, 0.0);
        for (const auto& [i, w] : window(k)) {
            const Features& src = features_at(feats, i);
            for (int q = 0; q < nf; ++q) f[q] += w * src[q];
        }
        return f;
    }

    double field(const std::vector<double>& coef, int j) const {
        double s = 0.0;
        for (int q = 0; q < nf; ++q) s += coef[q] * obs[q][j];
        return s;
    }
};

// Row j of M = I - dt Delta_h + dt C_alpha (centered divergence), as (lower, diag, upper).
inline void transport_matrix(const MFContext& c, const std::vector<double>& a, std::vector<double>& lo,
                             std::vector<double>& di, std::vector<double>& up, bool transpose) {
    const int n = c.n;
    const double cc = c.dt / (c.h * c.h), ca = c.dt / (2.0 * c.h);
    lo.assign(n, 0.0);
    di.assign(n, 1.0 + 2.0 * cc);
    up.assign(n, 0.0);
    for (int j = 0; j < n; ++j) {
        const int jm = (j + n - 1) % n, jp = (j + 1) % n;
        if (!transpose) {
            lo[j] = -cc - ca * a[jm];
            up[j] = -cc + ca * a[jp];
        } else {
            lo[j] = -cc + ca * a[j];
            up[j] = -cc - ca * a[j];
        }
    }
}

inline std::vector<Features> path_features(const MFContext& c, const MeasurePath& p) {
    std::vector<Features> f(c.M + 1);
    for (int k = 0; k <= c.M; ++k) f[k] = c.model->features(p.m[k], c.grid);
    return f;
}

inline MeasurePath forward(const MFContext& c, const std::vector<double>& m0, const ControlField& u) {
    MeasurePath p;
    p.grid = c.grid;
    p.mesh = c.mesh;
    p.m.assign(c.M + 1, {});
    p.killed.assign(c.M, std::vector<double>(c.n, 0.0));
    p.m[0] = m0;
    std::vector<double> lo, di, up;
    double scale = 0.0;
    for (double v : m0) scale = std::max(scale, v);
    for (int k = 0; k < c.M; ++k) {
        transport_matrix(c, u.alpha[k], lo, di, up, false);
        std::vector<double> z = solve_periodic_tridiagonal(lo, di, up, p.m[k]);
        std::vector<double> next(c.n);
        for (int j = 0; j < c.n; ++j) {
            if (z[j] < -1e-13 * std::max(scale, 1e-300))
                throw NumericalError("solve_fp: negative mass at step " + std::to_string(k) + ", cell " +
                                     std::to_string(j));
            z[j] = std::max(z[j], 0.0);
            next[j] = z[j] / (1.0 + c.dt * u.beta[k][j]);
            p.killed[k][j] = z[j] - next[j];
        }
        p.m[k + 1] = std::move(next);
    }
    return p;
}

inline std::vector<CostBreakdown> step_costs(const MFContext& c, const MeasurePath& p, const ControlField& u) {
    const auto feats = path_features(c, p);
    std::vector<CostBreakdown> out(c.M + 1);
    for (int k = 0; k < c.M; ++k) {
        const Features& f1 = feats[k + 1];
        const Features fm = c.psi_features(feats, k);
        auto& b = out[k];
        for (int j = 0; j < c.n; ++j) {
            const double m1 = p.m[k + 1][j];
            if (m1 == 0.0) continue;
            const double a = u.alpha[k][j], be = u.beta[k][j];
            b.running += c.dt * c.model->lagrangian(c.xs[j], a, f1) * m1;
            if (be != 0.0) {
                b.stopping += c.dt * c.model->psi(c.xs[j], fm) * be * m1;
                b.penalty += c.dt * 0.5 * c.delta * be * be * m1;
            }
        }
    }
    out[c.M].terminal = c.model->terminal(feats[c.M]);
    return out;
}

inline CostBreakdown objective(const MFContext& c, const MeasurePath& p, const ControlField& u) {
    CostBreakdown t;
    for (const auto& b : step_costs(c, p, u)) {
        t.running += b.running;
        t.stopping += b.stopping;
        t.penalty += b.penalty;
        t.terminal += b.terminal;
    }
    return t;
}

struct Adjoint {
    std::vector<std::vector<double>> lambda;  // M + 1 slices
    std::vector<std::vector<double>> w;       // lambda^{k+1} / (1 + dt beta^k), index k
    std::vector<std::vector<double>> nu;      // M^{-T} w, index k
};

// Smallest root of w + (dt / 2 delta)(w - psi)_+^2 = rhs, returned as beta = (w - psi)_+ / delta.
inline double penalty_rate(double rhs, double psi, double dt, double delta) {
    const double g = rhs - psi;
    if (g <= 0.0) return 0.0;
    const double s = 2.0 * g / (1.0 + std::sqrt(1.0 + 2.0 * dt * g / delta));
    return s / delta;
}

// Backward sweep for lambda^k = dJ/dm^k. With best_response, the controls of each step are replaced by
// the pointwise minimizers of the linearized cost (penalized HJB step); otherwise they are read.
inline Adjoint sweep(const MFContext& c, const MeasurePath& p, ControlField& u, bool best_response) {
    const ModelSpec& model = *c.model;
    if (!model.terminal_df) throw UnsupportedModelError("mean-field solver needs the terminal derivative");
    const int n = c.n, M = c.M, nf = c.nf;
    const double dt = c.dt;
    const auto feats = path_features(c, p);
    Adjoint adj;
    adj.lambda.assign(M + 1, std::vector<double>(n, 0.0));
    adj.w.assign(M, {});
    adj.nu.assign(M, {});
    std::vector<std::vector<double>> acc(M + 1, std::vector<double>(nf, 0.0));
    std::vector<double> grad(nf), rest(n);
    model.terminal_df(feats[M], grad);
    for (int j = 0; j < n; ++j) rest[j] = c.field(grad, j);
    std::vector<double> lo, di, up, psi(n), ut(n), lam(n), w(n), nu;
    std::vector<double> cl(nf), buf(nf);
    for (int k = M - 1; k >= 0; --k) {
        const auto& m1 = p.m[k + 1];
        const Features& f1 = feats[k + 1];
        const Features fm = c.psi_features(feats, k);
        for (int j = 0; j < n; ++j) psi[j] = model.psi(c.xs[j], fm);
        auto& a = u.alpha[k];
        auto& b = u.beta[k];
        for (int it = 0;; ++it) {
            std::fill(cl.begin(), cl.end(), 0.0);
            for (int l = 0; l < n; ++l) {
                if (m1[l] == 0.0) continue;
                model.lagrangian_df(c.xs[l], a[l], f1, buf);
                for (int q = 0; q < nf; ++q) cl[q] += m1[l] * buf[q];
            }
            for (int j = 0; j < n; ++j) {
                ut[j] = rest[j] + dt * model.lagrangian(c.xs[j], a[j], f1) + dt * c.field(cl, j);
                if (best_response) b[j] = penalty_rate(ut[j], psi[j], dt, c.delta);
                lam[j] = ut[j] + dt * (psi[j] * b[j] + 0.5 * c.delta * b[j] * b[j]);
                w[j] = lam[j] / (1.0 + dt * b[j]);
            }
            transport_matrix(c, a, lo, di, up, true);
            nu = solve_periodic_tridiagonal(lo, di, up, w);
            if (!best_response || it == 12) break;
            double change = 0.0;
            std::vector<double> next(n);
            for (int j = 0; j < n; ++j) {
                const double dnu = (nu[(j + 1) % n] - nu[(j + n - 1) % n]) / (2.0 * c.h);
                const double pj = (1.0 + dt * b[j]) * dnu;
                next[j] = std::clamp(-model.hamiltonian_dp(c.xs[j], pj, f1), -c.alpha_max, c.alpha_max);
                change = std::max(change, std::abs(next[j] - a[j]));
            }
            if (change < 1e-13) break;
            a = std::move(next);
        }
        adj.lambda[k + 1] = lam;
        adj.w[k] = w;
        adj.nu[k] = nu;
        // Psi-measure cross terms of step k, credited to the slices in its window.
        std::fill(buf.begin(), buf.end(), 0.0);
        std::vector<double> sq(nf, 0.0);
        for (int l = 0; l < n; ++l) {
            if (b[l] == 0.0 || m1[l] == 0.0) continue;
            model.psi_df(c.xs[l], fm, buf);
            for (int q = 0; q < nf; ++q) sq[q] += dt * buf[q] * b[l] * m1[l];
        }
        for (const auto& [i, wt] : c.window(k)) {
            int target = i;
            if (i < 0) {
                if (!c.history.empty()) continue;
                target = 0;
            }
            for (int q = 0; q < nf; ++q) acc[target][q] += wt * sq[q];
        }
        for (int j = 0; j < n; ++j) rest[j] = nu[j] + c.field(acc[k], j);
    }
    adj.lambda[0] = rest;
    // lambda^M gets its own Psi cross terms only through windows, which never reach index M.
    return adj;
}

// dJ/dalpha and dJ/dbeta for fixed controls.
inline void gradient(const MFContext& c, const MeasurePath& p, const ControlField& u, const Adjoint& adj,
                     ControlField& g) {
    const auto feats = path_features(c, p);
    g = ControlField::zeros(c.M, c.n);
    for (int k = 0; k < c.M; ++k) {
        const Features& f1 = feats[k + 1];
        const Features fm = c.psi_features(feats, k);
        const auto& nu = adj.nu[k];
        for (int j = 0; j < c.n; ++j) {
            const double m1 = p.m[k + 1][j];
            const double be = u.beta[k][j];
            const double z = (1.0 + c.dt * be) * m1;
            const double dnu = (nu[(j + 1) % c.n] - nu[(j + c.n - 1) % c.n]) / (2.0 * c.h);
            g.alpha[k][j] = c.dt * m1 * c.model->lagrangian_da(c.xs[j], u.alpha[k][j], f1) + c.dt * z * dnu;
            g.beta[k][j] = c.dt * m1 * (c.model->psi(c.xs[j], fm) + c.delta * be - adj.w[k][j]);
        }
    }
}

inline double control_change(const ControlField& a, const ControlField& b, double delta) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.alpha.size(); ++k)
        for (std::size_t j = 0; j < a.alpha[k].size(); ++j) {
            s = std::max(s, std::abs(a.alpha[k][j] - b.alpha[k][j]));
            s = std::max(s, delta * std::abs(a.beta[k][j] - b.beta[k][j]));
        }
    return s;
}

inline void require_mesh(const ModelSpec& model, double t0, int n_steps, double theta, double delta) {
    if (!(t0 < model.horizon)) throw DomainError("mean-field solver: t0 must be before the horizon");
    if (n_steps < 1) throw ParameterError("mean-field solver: n_steps must be positive");
    if (theta < 0.0) throw ParameterError("mean-field solver: theta must be >= 0");
    if (!(delta > 0.0)) throw ParameterError("mean-field solver: delta must be positive");
}

}  // namespace detail

/// Fokker-Planck with killing: implicit diffusion and centered transport, then m <- m / (1 + dt beta).
inline MeasurePath solve_fp(const ModelSpec& model, const ControlField& control, const GridMeasure& m0,
                            const TimeMesh& mesh) {
    if (static_cast<int>(control.alpha.size()) != mesh.n_steps || static_cast<int>(control.beta.size()) != mesh.n_steps)
        throw StructuralError("solve_fp: control does not match the time mesh");
    const detail::MFContext c(model, m0.grid(), mesh, 0.0, 1.0);
    for (const auto& row : control.beta)
        for (double b : row)
            if (b < 0.0) throw DomainError("solve_fp: negative killing rate");
    for (const auto& row : control.alpha)
        for (double a : row)
            if (std::abs(a) * c.h > 2.0) throw DomainError("solve_fp: drift exceeds 2/h, positivity is lost");
    return detail::forward(c, m0.mass(), control);
}

/// Adjoint of the penalized problem along a given path, with the pointwise optimal controls:
/// alpha = -D_pH(x, Du, m), beta = (u - Psi)_+ / delta. `control` supplies the starting drift and
/// receives the optimal controls.
inline std::vector<std::vector<double>> solve_hjb_penalized(const ModelSpec& model, const MeasurePath& path,
                                                            double theta, double delta, ControlField& control) {
    detail::require_mesh(model, path.mesh.t0, path.mesh.n_steps, theta, delta);
    if (control.alpha.empty()) control = ControlField::zeros(path.mesh.n_steps, path.grid.n_cells());
    const detail::MFContext c(model, path.grid, path.mesh, theta, delta);
    return detail::sweep(c, path, control, true).lambda;
}

/// J: running cost, Psi at the pre-removal measure for both killed mass and atoms, then G(m_T).
/// Slices of `path` are post-jump; the pre-jump measure at t_k is m^k plus the atom at k.
inline CostBreakdown evaluate_J(const ModelSpec& model, const GridMeasure& m0, const MeasurePath& path,
                                const ControlField& control, const JumpMeasure& jumps) {
    const int M = path.mesh.n_steps, n = path.grid.n_cells();
    const TorusGrid& g = path.grid;
    const double dt = path.mesh.dt();
    std::vector<std::vector<double>> atom(M + 1, std::vector<double>(n, 0.0));
    for (const auto& [k, a] : jumps.atoms) {
        if (k < 0 || k > M) throw DomainError("evaluate_J: atom outside the mesh");
        for (int j = 0; j < n; ++j) atom[k][j] += a.mass()[j];
    }
    auto total = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    };
    const double tol = 1e-8;
    if (std::abs(m0.total() - total(atom[0]) - path.total(0)) > tol) throw DomainError("evaluate_J: mass mismatch at t0");
    for (int k = 0; k < M; ++k) {
        const double killed = jumps.killed.empty() ? 0.0 : total(jumps.killed[k]);
        if (std::abs(path.total(k) - killed - total(atom[k + 1]) - path.total(k + 1)) > tol)
            throw DomainError("evaluate_J: mass mismatch at step " + std::to_string(k));
    }
    CostBreakdown out;
    for (int k = 0; k <= M; ++k) {
        std::vector<double> pre = path.m[k];
        if (k == 0) pre = m0.mass();
        else
            for (int j = 0; j < n; ++j) pre[j] += atom[k][j];
        const Features fpre = model.features(pre, g);
        for (int j = 0; j < n; ++j)
            if (atom[k][j] != 0.0) out.stopping += model.psi(g.node(j), fpre) * atom[k][j];
        if (k == M) break;
        const Features fk = model.features(path.m[k], g);
        const Features f1 = model.features(path.m[k + 1], g);
        for (int j = 0; j < n; ++j) {
            out.running += dt * model.lagrangian(g.node(j), control.alpha[k][j], f1) * path.m[k + 1][j];
            if (!jumps.killed.empty()) out.stopping += model.psi(g.node(j), fk) * jumps.killed[k][j];
        }
    }
    out.terminal = model.terminal(model.features(path.m[M], g));
    return out;
}

/// J^theta: the Psi measure of killed mass is time-mollified; no penalty term.
inline double evaluate_J_theta(const ModelSpec& model, const MeasurePath& path, const ControlField& control,
                               double theta) {
    const detail::MFContext c(model, path.grid, path.mesh, theta, 0.0);
    const CostBreakdown b = detail::objective(c, path, control);
    return b.running + b.stopping + b.terminal;
}

inline double evaluate_J_theta_delta(const ModelSpec& model, const MeasurePath& path, const ControlField& control,
                                     double theta, double delta) {
    double pen = 0.0;
    const double dt = path.mesh.dt();
    for (int k = 0; k < path.mesh.n_steps; ++k)
        for (int j = 0; j < path.grid.n_cells(); ++j)
            pen += dt * 0.5 * delta * control.beta[k][j] * control.beta[k][j] * path.m[k + 1][j];
    return evaluate_J_theta(model, path, control, theta) + pen;
}

/// Exact gradient of J^{theta,delta} in (alpha, beta) at a control, through the discrete adjoint.
inline ControlField cost_gradient(const ModelSpec& model, double t0, const GridMeasure& m0, const ControlField& control,
                                  double theta, double delta, int n_steps) {
    detail::require_mesh(model, t0, n_steps, theta, delta);
    const detail::MFContext c(model, m0.grid(), TimeMesh{t0, model.horizon, n_steps}, theta, delta);
    const MeasurePath p = detail::forward(c, m0.mass(), control);
    ControlField u = control;
    const detail::Adjoint adj = detail::sweep(c, p, u, false);
    ControlField g;
    detail::gradient(c, p, control, adj, g);
    return g;
}

/// Minimizes J^{theta,delta} from (t0, m0): damped Picard on the optimality system, then projected
/// gradient descent with Armijo backtracking if Picard stalls.
inline MFCSolution solve_mfc(const ModelSpec& model, double t0, const GridMeasure& m0, double theta, double delta,
                             int n_steps, const MFCOptions& opt = {}) {
    detail::require_mesh(model, t0, n_steps, theta, delta);
    if (!(opt.damping > 0.0 && opt.damping <= 1.0)) throw ParameterError("solve_mfc: damping must be in (0, 1]");
    const detail::MFContext c(model, m0.grid(), TimeMesh{t0, model.horizon, n_steps}, theta, delta, opt.history);
    MFCSolution sol;
    sol.theta = theta;
    sol.delta = delta;
    ControlField u = ControlField::zeros(c.M, c.n);
    if (m0.total() == 0.0) {
        sol.path = detail::forward(c, m0.mass(), u);
        sol.control = u;
        sol.cost = detail::objective(c, sol.path, u);
        sol.value = sol.cost.total();
        sol.adjoint.assign(c.M + 1, std::vector<double>(c.n, 0.0));
        sol.converged = true;
        return sol;
    }

    if (!opt.initial.alpha.empty()) {
        if (static_cast<int>(opt.initial.alpha.size()) != c.M || static_cast<int>(opt.initial.beta.size()) != c.M)
            throw StructuralError("solve_mfc: initial control does not match the mesh");
        u = opt.initial;
    } else if (delta < opt.continuation_start && !opt.gradient_only) {
        // Warm start from the solution at 10 delta; beta scales like 1/delta.
        const double coarse = std::min(opt.continuation_start, 10.0 * delta);
        const MFCSolution prev = solve_mfc(model, t0, m0, theta, coarse, n_steps, opt);
        u = prev.control;
        for (auto& row : u.beta)
            for (double& b : row) b *= coarse / delta;
    }

    ControlField best = u;
    double best_j = std::numeric_limits<double>::infinity();
    bool done = false;
    if (!opt.gradient_only) {
        MeasurePath p = detail::forward(c, m0.mass(), u);
        double j = detail::objective(c, p, u).total();
        best_j = j;
        int stall = 0;
        double best_change = std::numeric_limits<double>::infinity();
        for (int it = 0; it < opt.max_picard; ++it) {
            ControlField br = u;
            detail::sweep(c, p, br, true);
            const double change = detail::control_change(br, u, delta);
            ++sol.iterations;
            sol.residual = change;
            if (change <= opt.tolerance) {
                u = std::move(br);
                done = true;
                break;
            }
            // Damped step toward the best response, shortened until J does not increase.
            bool moved = false;
            double w = opt.damping;
            for (int ls = 0; ls < 12 && !moved; ++ls, w *= 0.5) {
                ControlField trial = u;
                for (int k = 0; k < c.M; ++k)
                    for (int jj = 0; jj < c.n; ++jj) {
                        trial.alpha[k][jj] += w * (br.alpha[k][jj] - u.alpha[k][jj]);
                        trial.beta[k][jj] += w * (br.beta[k][jj] - u.beta[k][jj]);
                    }
                MeasurePath tp;
                try {
                    tp = detail::forward(c, m0.mass(), trial);
                } catch (const NumericalError&) {
                    continue;
                }
                const double tj = detail::objective(c, tp, trial).total();
                if (tj <= j + 1e-14 * std::max(1.0, std::abs(j))) {
                    const bool progress = tj < best_j - 1e-13 * std::max(1.0, std::abs(best_j)) || change < 0.99 * best_change;
                    stall = progress ? 0 : stall + 1;
                    u = std::move(trial);
                    p = std::move(tp);
                    j = tj;
                    moved = true;
                }
            }
            best_change = std::min(best_change, change);
            if (j < best_j) {
                best_j = j;
                best = u;
            }
            if (!moved || stall >= opt.stall_rounds) break;
        }
        if (!done) best = u;
    }
    if (!done) {
        // Projected, diagonally preconditioned gradient descent from the best Picard iterate.
        sol.used_gradient = true;
        if (best_j < std::numeric_limits<double>::infinity()) u = best;
        MeasurePath p = detail::forward(c, m0.mass(), u);
        double j = detail::objective(c, p, u).total();
        sol.gradient_values.push_back(j);
        for (int it = 0; it < opt.max_gradient; ++it) {
            ControlField tmp = u;
            const detail::Adjoint adj = detail::sweep(c, p, tmp, false);
            ControlField g;
            detail::gradient(c, p, u, adj, g);
            ControlField dir = ControlField::zeros(c.M, c.n);
            double dmax = 0.0;
            for (int k = 0; k < c.M; ++k)
                for (int jj = 0; jj < c.n; ++jj) {
                    const double wgt = c.dt * p.m[k + 1][jj];
                    if (wgt <= 0.0) continue;
                    dir.alpha[k][jj] = -g.alpha[k][jj] / wgt;
                    dir.beta[k][jj] = -g.beta[k][jj] / (wgt * delta);
                    if (u.beta[k][jj] == 0.0 && dir.beta[k][jj] < 0.0) dir.beta[k][jj] = 0.0;
                    dmax = std::max({dmax, std::abs(dir.alpha[k][jj]), delta * std::abs(dir.beta[k][jj])});
                }
            sol.residual = dmax;
            ++sol.iterations;
            if (dmax <= opt.tolerance) {
                done = true;
                break;
            }
            double step = 1.0;
            bool accepted = false;
            for (int ls = 0; ls < 40; ++ls, step *= 0.5) {
                ControlField trial = u;
                double slope = 0.0;
                for (int k = 0; k < c.M; ++k)
                    for (int jj = 0; jj < c.n; ++jj) {
                        trial.alpha[k][jj] = std::clamp(u.alpha[k][jj] + step * dir.alpha[k][jj], -c.alpha_max, c.alpha_max);
                        trial.beta[k][jj] = std::max(0.0, u.beta[k][jj] + step * dir.beta[k][jj]);
                        slope += g.alpha[k][jj] * (trial.alpha[k][jj] - u.alpha[k][jj]) +
                                 g.beta[k][jj] * (trial.beta[k][jj] - u.beta[k][jj]);
                    }
                const MeasurePath tp = detail::forward(c, m0.mass(), trial);
                const double tj = detail::objective(c, tp, trial).total();
                if (tj <= j + 1e-4 * slope) {
                    u = std::move(trial);
                    p = tp;
                    j = tj;
                    accepted = true;
                    break;
                }
            }
            if (!accepted) break;
            sol.gradient_values.push_back(j);
        }
    }
    sol.converged = done;
    sol.control = u;
    sol.path = detail::forward(c, m0.mass(), u);
    sol.cost = detail::objective(c, sol.path, u);
    sol.value = sol.cost.total();
    ControlField tmp = u;
    sol.adjoint = detail::sweep(c, sol.path, tmp, false).lambda;
    return sol;
}

/// |U(t0, m0) - [cost of the optimal triple on [t0, t1] + U(t1, m_{t1})]|, with the restarted problem
/// carrying the path history that feeds the time mollification. t1 must lie on the mesh.
inline double check_dpp(const ModelSpec& model, double t0, double t1, const GridMeasure& m0, double theta,
                        double delta, int n_steps, const MFCOptions& opt = {}) {
    if (t1 == t0 || m0.total() == 0.0) return 0.0;
    if (!(t0 < t1 && t1 < model.horizon)) throw DomainError("check_dpp: need t0 < t1 < T");
    const double dt = (model.horizon - t0) / n_steps;
    const int k1 = static_cast<int>(std::lround((t1 - t0) / dt));
    if (std::abs(t0 + k1 * dt - t1) > 1e-9) throw ParameterError("check_dpp: t1 is not a mesh time");
    const MFCSolution full = solve_mfc(model, t0, m0, theta, delta, n_steps, opt);
    const detail::MFContext c(model, m0.grid(), TimeMesh{t0, model.horizon, n_steps}, theta, delta, opt.history);
    const auto costs = detail::step_costs(c, full.path, full.control);
    double head = 0.0;
    for (int k = 0; k < k1; ++k) head += costs[k].running + costs[k].stopping + costs[k].penalty;
    MFCOptions tail_opt = opt;
    tail_opt.history = opt.history;
    for (int k = 0; k < k1; ++k) tail_opt.history.push_back(full.path.m[k]);
    const MFCSolution tail = solve_mfc(model, t1, full.path.at(k1), theta, delta, n_steps - k1, tail_opt);
    return std::abs(full.value - head - tail.value);
}

/// max over pairs of U(m) - U(n) - int Psi(x, m) d(m - n), for n <= m.
inline double psi_monotonicity_check(const ModelSpec& model, double t0,
                                     const std::vector<std::pair<GridMeasure, GridMeasure>>& pairs, double theta,
                                     double delta, int n_steps, const MFCOptions& opt = {}) {
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto& [m, nn] : pairs) {
        if (!nn.leq(m)) throw DomainError("psi_monotonicity_check: pair is not ordered");
        const double um = solve_mfc(model, t0, m, theta, delta, n_steps, opt).value;
        const double un = solve_mfc(model, t0, nn, theta, delta, n_steps, opt).value;
        const Features f = model.features(m);
        double jump = 0.0;
        for (int j = 0; j < m.size(); ++j) jump += model.psi(m.grid().node(j), f) * (m.mass()[j] - nn.mass()[j]);
        worst = std::max(worst, um - un - jump);
    }
    return pairs.empty() ? 0.0 : worst;
}

/// max |U(m) - U(m')| / d(m, m') over pairs.
inline double mf_lipschitz_constant(const ModelSpec& model, double t0,
                                    const std::vector<std::pair<GridMeasure, GridMeasure>>& pairs, double theta,
                                    double delta, int n_steps, const MFCOptions& opt = {}) {
    double worst = 0.0;
    for (const auto& [a, b] : pairs) {
        const double d = bl_distance(a, b);
        if (d <= 0.0) continue;
        const double ua = solve_mfc(model, t0, a, theta, delta, n_steps, opt).value;
        const double ub = solve_mfc(model, t0, b, theta, delta, n_steps, opt).value;
        worst = std::max(worst, std::abs(ua - ub) / d);
    }
    return worst;
}

struct LadderCell {
    double theta = 0.0;
    double delta = 0.0;
    double value = 0.0;
    double penalty_free = 0.0;  ///< J^theta of the same triple
    int iterations = 0;
    double residual = 0.0;
    bool converged = false;
};

struct LadderTable {
    std::vector<double> thetas, deltas;
    std::vector<std::vector<LadderCell>> cells;  // [theta][delta]
    /// |U(theta, delta_j) - U(theta, delta_{j+1})| per theta row.
    std::vector<std::vector<double>> delta_cauchy;
    /// |U(theta_i, delta) - U(theta_{i+1}, delta)| per delta column.
    std::vector<std::vector<double>> theta_cauchy;
    /// Linear extrapolation to delta = 0 on the smallest-theta row, with the last Cauchy defect.
    double corner = 0.0;
    double corner_error = 0.0;
};

inline LadderTable regularization_ladder(const ModelSpec& model, double t0, const GridMeasure& m0,
                                         const std::vector<double>& thetas, const std::vector<double>& deltas,
                                         int n_steps, const MFCOptions& opt = {}) {
    if (thetas.empty() || deltas.empty()) throw ParameterError("regularization_ladder: empty theta or delta list");
    for (std::size_t i = 1; i < thetas.size(); ++i)
        if (!(thetas[i] < thetas[i - 1])) throw ParameterError("regularization_ladder: thetas must decrease");
    for (std::size_t i = 1; i < deltas.size(); ++i)
        if (!(deltas[i] < deltas[i - 1])) throw ParameterError("regularization_ladder: deltas must decrease");
    LadderTable t;
    t.thetas = thetas;
    t.deltas = deltas;
    t.cells.assign(thetas.size(), std::vector<LadderCell>(deltas.size()));
    for (std::size_t i = 0; i < thetas.size(); ++i)
        for (std::size_t j = 0; j < deltas.size(); ++j) {
            LadderCell& cell = t.cells[i][j];
            cell.theta = thetas[i];
            cell.delta = deltas[j];
            try {
                const MFCSolution s = solve_mfc(model, t0, m0, thetas[i], deltas[j], n_steps, opt);
                cell.value = s.value;
                cell.penalty_free = s.cost.running + s.cost.stopping + s.cost.terminal;
                cell.iterations = s.iterations;
                cell.residual = s.residual;
                cell.converged = s.converged;
            } catch (const Error&) {
                cell.value = std::numeric_limits<double>::quiet_NaN();
                cell.converged = false;
            }
        }
    t.delta_cauchy.assign(thetas.size(), {});
    for (std::size_t i = 0; i < thetas.size(); ++i)
        for (std::size_t j = 0; j + 1 < deltas.size(); ++j)
            t.delta_cauchy[i].push_back(std::abs(t.cells[i][j].value - t.cells[i][j + 1].value));
    t.theta_cauchy.assign(deltas.size(), {});
    for (std::size_t j = 0; j < deltas.size(); ++j)
        for (std::size_t i = 0; i + 1 < thetas.size(); ++i)
            t.theta_cauchy[j].push_back(std::abs(t.cells[i][j].value - t.cells[i + 1][j].value));
    const auto& row = t.cells.back();
    if (row.size() == 1) {
        t.corner = row[0].value;
        t.corner_error = 0.0;
    } else {
        const LadderCell& a = row[row.size() - 2];
        const LadderCell& b = row.back();
        t.corner = b.value - b.delta * (a.value - b.value) / (a.delta - b.delta);
        t.corner_error = std::abs(a.value - b.value);
    }
    return t;
}

inline void write_ladder(std::ostream& os, const LadderTable& t) {
    os << "theta,delta,value,iterations,residual\n";
    for (const auto& row : t.cells)
        for (const auto& c : row)
            os << format_real(c.theta) << ',' << format_real(c.delta) << ',' << format_real(c.value) << ','
               << c.iterations << ',' << format_real(c.residual) << '\n';
}

namespace detail {

inline void write_table(const std::string& path, const std::vector<std::vector<double>>& rows) {
    std::ofstream os(path);
    if (!os) throw StructuralError("cannot open " + path);
    for (const auto& r : rows) {
        for (std::size_t j = 0; j < r.size(); ++j) {
            if (j) os << ',';
            os << format_real(r[j]);
        }
        os << '\n';
    }
}

}  // namespace detail

/// Writes meta, m.csv, alpha.csv, beta.csv and u.csv into `dir` (which must exist).
inline void write_solution(const MFCSolution& s, const std::string& dir) {
    {
        std::ofstream os(dir + "/meta");
        if (!os) throw StructuralError("cannot open " + dir + "/meta");
        os << "value=" << format_real(s.value) << "\ntheta=" << format_real(s.theta) << "\ndelta=" << format_real(s.delta)
           << "\niterations=" << s.iterations << "\nresidual=" << format_real(s.residual)
           << "\nconverged=" << (s.converged ? 1 : 0) << "\nn_cells=" << s.path.grid.n_cells()
           << "\nn_steps=" << s.path.mesh.n_steps << "\nt0=" << format_real(s.path.mesh.t0)
           << "\nT=" << format_real(s.path.mesh.horizon) << '\n';
    }
    detail::write_table(dir + "/m.csv", s.path.m);
    detail::write_table(dir + "/alpha.csv", s.control.alpha);
    detail::write_table(dir + "/beta.csv", s.control.beta);
    detail::write_table(dir + "/u.csv", s.adjoint);
}

}  // namespace meanstop
