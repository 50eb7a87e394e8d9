#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "meanstop/torus.hpp"
#include "meanstop/tridiag.hpp"

namespace meanstop {

/// Phi(mu) = sup_{f <= 0} <mu, f> - |f|_{H^1}^2 / 2 on a periodic grid, with
/// <mu, f> = h sum mu f and <f, g>_{H^1} = h sum f g + h sum D+f D+g.
struct PhiResult {
    double value = 0.0;
    GridFunction f_hat;
    double epsilon_used = 0.0;
    int newton_iters = 0;
    /// True when the active-set finish certified the KKT conditions of the discrete problem.
    bool exact = false;
    /// True when semismooth Newton cycled and projected gradient ascent was used instead.
    bool fallback = false;
};

namespace detail {

inline double pairing(const TorusGrid& g, const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
    return g.h() * s;
}

// (A f)_j with A = I - Delta_h.
inline std::vector<double> apply_a(const TorusGrid& g, const std::vector<double>& f) {
    const int n = g.n_cells();
    const double c = 1.0 / (g.h() * g.h());
    std::vector<double> out(n);
    for (int j = 0; j < n; ++j)
        out[j] = f[j] + c * (2.0 * f[j] - f[(j + 1) % n] - f[(j + n - 1) % n]);
    return out;
}

// Solves (A + diag(extra)) f = rhs, with rows in `pinned` replaced by f_j = 0.
inline std::vector<double> solve_a(const TorusGrid& g, const std::vector<double>& extra,
                                   const std::vector<char>& pinned, const std::vector<double>& rhs) {
    const int n = g.n_cells();
    const double c = 1.0 / (g.h() * g.h());
    std::vector<double> lo(n, -c), di(n), up(n, -c), r(rhs);
    for (int j = 0; j < n; ++j) {
        di[j] = 1.0 + 2.0 * c + (extra.empty() ? 0.0 : extra[j]);
        if (!pinned.empty() && pinned[j]) {
            lo[j] = up[j] = 0.0;
            di[j] = 1.0;
            r[j] = 0.0;
        }
    }
    return solve_periodic_tridiagonal(lo, di, up, r);
}

// f - Delta f + f_+ / eps = mu by semismooth Newton on the set {f > 0}; false if the set cycles.
inline bool penalized_newton(const TorusGrid& g, const std::vector<double>& mu, double eps, std::vector<double>& f,
                             int* iters) {
    const int n = g.n_cells();
    std::vector<char> active(n);
    for (int j = 0; j < n; ++j) active[j] = f[j] > 0.0;
    std::vector<std::vector<char>> seen;
    for (int it = 0; it < 100; ++it) {
        std::vector<double> extra(n, 0.0);
        for (int j = 0; j < n; ++j) extra[j] = active[j] ? 1.0 / eps : 0.0;
        f = solve_a(g, extra, {}, mu);
        ++*iters;
        std::vector<char> next(n);
        for (int j = 0; j < n; ++j) next[j] = f[j] > 0.0;
        if (next == active) return true;
        if (std::find(seen.begin(), seen.end(), next) != seen.end()) return false;
        seen.push_back(active);
        active = std::move(next);
    }
    return false;
}

// Primal-dual active-set method for the exact discrete obstacle problem; the contact set is
// {lambda + f > 0} with lambda = mu - A f. Returns true once the sets settle and KKT holds.
inline bool active_set_finish(const TorusGrid& g, const std::vector<double>& mu, std::vector<double>& f) {
    const int n = g.n_cells();
    std::vector<char> contact(n);
    for (int j = 0; j < n; ++j) contact[j] = f[j] >= 0.0;
    for (int it = 0; it < 200; ++it) {
        std::vector<double> trial = solve_a(g, {}, contact, mu);
        const std::vector<double> af = apply_a(g, trial);
        std::vector<char> next(n);
        for (int j = 0; j < n; ++j) {
            const double lambda = contact[j] ? mu[j] - af[j] : 0.0;
            next[j] = lambda + trial[j] > 0.0;
        }
        if (next == contact) {
            double scale = 1.0;
            for (int j = 0; j < n; ++j) scale = std::max(scale, std::abs(mu[j]));
            for (int j = 0; j < n; ++j) {
                if (trial[j] > 1e-13 * scale) return false;
                if (contact[j] && mu[j] - af[j] < -1e-9 * scale) return false;
            }
            for (double& v : trial) v = std::min(v, 0.0);
            f = std::move(trial);
            return true;
        }
        contact = std::move(next);
    }
    return false;
}

// Projected gradient ascent with step 1/|A|; every step increases the objective.
inline void projected_ascent(const TorusGrid& g, const std::vector<double>& mu, std::vector<double>& f) {
    const int n = g.n_cells();
    const double step = 1.0 / (1.0 + 4.0 / (g.h() * g.h()));
    for (int it = 0; it < 2000000; ++it) {
        const std::vector<double> af = apply_a(g, f);
        double change = 0.0;
        for (int j = 0; j < n; ++j) {
            const double v = std::min(0.0, f[j] + step * (mu[j] - af[j]));
            change = std::max(change, std::abs(v - f[j]));
            f[j] = v;
        }
        if (change < 1e-15) break;
    }
}

}  // namespace detail

/// Maximizer via the eps-penalized equation f - Delta f + f_+/eps = mu, eps halved until Phi moves
/// by less than 1e-8, then an active-set finish on the exact problem.
inline PhiResult phi_solve(const GridFunction& mu, double epsilon = 1e-2) {
    if (!(epsilon > 0.0)) throw ParameterError("phi_solve: epsilon must be positive");
    const TorusGrid& g = mu.grid;
    if (g.n_cells() < 3) throw DomainError("phi_solve: need at least 3 cells");
    for (double v : mu.values)
        if (!std::isfinite(v)) throw DomainError("phi_solve: non-finite density");
    PhiResult res;
    std::vector<double> f(g.n_cells(), 0.0);
    double eps = epsilon;
    double prev = 0.0;
    bool ok = true;
    for (int round = 0; round < 60; ++round) {
        ok = detail::penalized_newton(g, mu.values, eps, f, &res.newton_iters);
        if (!ok) break;
        const double val = 0.5 * detail::pairing(g, mu.values, f);
        res.epsilon_used = eps;
        if (round > 0 && std::abs(val - prev) < 1e-8) break;
        prev = val;
        eps *= 0.5;
    }
    if (!ok) {
        res.fallback = true;
        std::fill(f.begin(), f.end(), 0.0);
        detail::projected_ascent(g, mu.values, f);
    }
    res.exact = detail::active_set_finish(g, mu.values, f);
    if (!res.exact)
        for (double& v : f) v = std::min(v, 0.0);
    res.value = 0.5 * detail::pairing(g, mu.values, f);
    res.f_hat = GridFunction{g, std::move(f)};
    return res;
}

/// |f|_{H^1}^2 with the forward-difference inner product.
inline double h1_norm_sq(const GridFunction& f) {
    return detail::pairing(f.grid, f.values, detail::apply_a(f.grid, f.values));
}

/// |mu|_{H^-1}^2 = <mu, w> with (I - Delta_h) w = mu.
inline double hminus1_norm_sq(const GridFunction& mu) {
    const auto w = detail::solve_a(mu.grid, {}, {}, mu.values);
    return detail::pairing(mu.grid, mu.values, w);
}

/// Worst relative gap between (Phi(mu + t nu) - Phi(mu - t nu)) / 2t and <nu, f_hat>.
inline double phi_gradient_check(const GridFunction& mu, const std::vector<GridFunction>& directions, double t = 1e-4) {
    const PhiResult base = phi_solve(mu);
    double worst = 0.0;
    for (const auto& nu : directions) {
        GridFunction plus = mu, minus = mu;
        for (std::size_t j = 0; j < mu.values.size(); ++j) {
            plus.values[j] += t * nu.values[j];
            minus.values[j] -= t * nu.values[j];
        }
        const double fd = (phi_solve(plus).value - phi_solve(minus).value) / (2.0 * t);
        const double an = detail::pairing(mu.grid, nu.values, base.f_hat.values);
        worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(an), 1e-6));
    }
    return worst;
}

/// Max of |f1 - f2|_{H^1} / |mu1 - mu2|_{H^-1}; pairs with mu1 = mu2 are skipped.
inline double phi_lipschitz_check(const std::vector<std::pair<GridFunction, GridFunction>>& pairs) {
    double worst = 0.0;
    for (const auto& [a, b] : pairs) {
        GridFunction dm = a, df = a;
        const auto fa = phi_solve(a).f_hat, fb = phi_solve(b).f_hat;
        for (std::size_t j = 0; j < a.values.size(); ++j) {
            dm.values[j] = a.values[j] - b.values[j];
            df.values[j] = fa.values[j] - fb.values[j];
        }
        const double den = hminus1_norm_sq(dm);
        if (den <= 0.0) continue;
        worst = std::max(worst, std::sqrt(std::max(0.0, h1_norm_sq(df)) / den));
    }
    return worst;
}

/// h sum D+f_hat D+mu + 2 Phi(mu) - |mu_-|_2^2, which is nonnegative.
inline double phi_energy_inequality_check(const GridFunction& mu) {
    const PhiResult r = phi_solve(mu);
    const TorusGrid& g = mu.grid;
    const int n = g.n_cells();
    const double h = g.h();
    double grad = 0.0, neg = 0.0;
    for (int j = 0; j < n; ++j) {
        const double df = (r.f_hat.values[(j + 1) % n] - r.f_hat.values[j]) / h;
        const double dm = (mu.values[(j + 1) % n] - mu.values[j]) / h;
        grad += h * df * dm;
        const double m = std::min(mu.values[j], 0.0);
        neg += h * m * m;
    }
    return grad + 2.0 * r.value - neg;
}

}  // namespace meanstop
