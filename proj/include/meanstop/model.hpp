#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "meanstop/errors.hpp"
#include "meanstop/torus.hpp"

namespace meanstop {

/// Cylindrical coordinates of a measure: [0] total mass, [q] = integral of observable w_q.
using Features = std::vector<double>;
using FeatureView = std::span<const double>;
using FeatureGrad = std::span<double>;

/// G(m) = constant + integral of g dm.
struct LinearTerminal {
    double constant = 0.0;
    std::function<double(double)> density;
};

/// Problem data. Measure dependence goes through finitely many features, so every
/// linear derivative is delta F/delta m(y) = sum_q dF/df_q * w_q(y) with w_0 = 1.
struct ModelSpec {
    std::string name;
    double horizon = 1.0;
    std::map<std::string, double> params;

    /// Observables w_1..w_Q; the total mass w_0 = 1 is implicit.
    std::vector<std::function<double(double)>> observables;

    std::function<double(double x, double p, FeatureView f)> hamiltonian;
    std::function<double(double x, double p, FeatureView f)> hamiltonian_dp;
    std::function<double(double x, double a, FeatureView f)> lagrangian;
    std::function<double(double x, double a, FeatureView f)> lagrangian_da;
    std::function<void(double x, double a, FeatureView f, FeatureGrad out)> lagrangian_df;
    std::function<double(double x, FeatureView f)> psi;
    std::function<void(double x, FeatureView f, FeatureGrad out)> psi_df;
    std::function<double(FeatureView f)> terminal;
    /// Optional; required by the mean-field solver and the projected-gradient envelope.
    std::function<void(FeatureView f, FeatureGrad out)> terminal_df;
    std::optional<LinearTerminal> linear_terminal;
    /// False when G cannot be written through the features (envelopes then refuse).
    bool terminal_is_cylindrical = true;

    int n_features() const { return 1 + static_cast<int>(observables.size()); }

    /// w_q(y), with w_0 = 1.
    double observable(int q, double y) const { return q == 0 ? 1.0 : observables[q - 1](y); }

    Features features(const GridMeasure& m) const {
        Features f(n_features(), 0.0);
        const auto& g = m.grid();
        for (int j = 0; j < m.size(); ++j) {
            const double mj = m.mass()[j];
            if (mj == 0.0) continue;
            const double x = g.node(j);
            f[0] += mj;
            for (int q = 1; q < n_features(); ++q) f[q] += observables[q - 1](x) * mj;
        }
        return f;
    }

    Features features(const std::vector<double>& mass, const TorusGrid& g) const {
        Features f(n_features(), 0.0);
        for (int j = 0; j < g.n_cells(); ++j) {
            const double mj = mass[j];
            if (mj == 0.0) continue;
            const double x = g.node(j);
            f[0] += mj;
            for (int q = 1; q < n_features(); ++q) f[q] += observables[q - 1](x) * mj;
        }
        return f;
    }

    Features features(const EmpiricalState& s) const { return features(s.positions(), s.big_n()); }

    Features features(const std::vector<double>& positions, int big_n) const {
        Features f(n_features(), 0.0);
        const double w = 1.0 / big_n;
        f[0] = static_cast<double>(positions.size()) / big_n;
        for (double x : positions)
            for (int q = 1; q < n_features(); ++q) f[q] += observables[q - 1](x) * w;
        return f;
    }

    /// delta Psi / delta m (x, m, y).
    double psi_lin(double x, FeatureView f, double y) const {
        Features d(n_features(), 0.0);
        psi_df(x, f, d);
        double s = 0.0;
        for (int q = 0; q < n_features(); ++q) s += d[q] * observable(q, y);
        return s;
    }

    /// delta G / delta m (m, y).
    double terminal_lin(FeatureView f, double y) const {
        if (!terminal_df) throw UnsupportedModelError("model " + name + " has no terminal derivative");
        Features d(n_features(), 0.0);
        terminal_df(f, d);
        double s = 0.0;
        for (int q = 0; q < n_features(); ++q) s += d[q] * observable(q, y);
        return s;
    }

    double param(const std::string& key, double fallback) const {
        auto it = params.find(key);
        return it == params.end() ? fallback : it->second;
    }
};

/// Parameter table of the built-in family. Keys not listed keep their defaults.
///   T         horizon
///   f0_amp    potential f0(x) = f0_amp cos(2 pi x) in H and L
///   kappa     mass coupling in H = p^2/2 - f0 - kappa m(T)
///   psi_c0, psi_c1, psi_c2   Psi = c0 + c1 (1 - m(T)) + c2 cos(2 pi x)
///   g_const, g_level, g_amp, g_quad   G = g_const + int (g_level + g_amp cos) dm + g_quad/2 m(T)^2
inline std::map<std::string, double> builtin_defaults(const std::string& name) {
    std::map<std::string, double> p{{"T", 1.0},       {"f0_amp", 0.0},  {"kappa", 0.0},   {"psi_c0", 1000.0},
                                    {"psi_c1", 0.0},  {"psi_c2", 0.0},  {"g_const", 0.0}, {"g_level", 0.0},
                                    {"g_amp", 0.5},   {"g_quad", 0.0}};
    if (name == "quadratic") return p;
    if (name == "congestion") {
        p["kappa"] = 0.2;
        p["psi_c0"] = 0.05;
        p["psi_c1"] = 0.5;
        p["psi_c2"] = 0.1;
        p["g_level"] = 0.3;
        p["g_amp"] = 0.4;
        return p;
    }
    if (name == "linearG") {
        p["psi_c0"] = 1.0;
        p["g_level"] = 0.5;
        p["g_amp"] = 1.0;
        return p;
    }
    if (name == "crowd") {
        p["psi_c0"] = 0.3;
        p["psi_c1"] = 0.2;
        p["g_level"] = 0.2;
        p["g_amp"] = 0.3;
        p["g_quad"] = 1.0;
        return p;
    }
    throw ParameterError("unknown built-in model: " + name);
}

/// Built-in quadratic / congestion family with analytic derivatives.
inline ModelSpec make_model(const std::string& name, const std::map<std::string, double>& overrides = {}) {
    auto p = builtin_defaults(name);
    for (const auto& [k, v] : overrides) {
        if (!p.count(k)) throw ParameterError("model " + name + ": unknown parameter " + k);
        p[k] = v;
    }
    constexpr double tau = 2.0 * std::numbers::pi;
    const double f0a = p["f0_amp"], kappa = p["kappa"];
    const double c0 = p["psi_c0"], c1 = p["psi_c1"], c2 = p["psi_c2"];
    const double g0 = p["g_const"], gl = p["g_level"], ga = p["g_amp"], gq = p["g_quad"];
    if (!(p["T"] > 0.0)) throw ParameterError("horizon T must be positive");

    ModelSpec m;
    m.name = name;
    m.horizon = p["T"];
    m.params = p;
    m.observables = {[](double x) { return std::cos(tau * x); }};
    m.hamiltonian = [=](double x, double q, FeatureView f) {
        return 0.5 * q * q - f0a * std::cos(tau * x) - kappa * f[0];
    };
    m.hamiltonian_dp = [](double, double q, FeatureView) { return q; };
    m.lagrangian = [=](double x, double a, FeatureView f) {
        return 0.5 * a * a + f0a * std::cos(tau * x) + kappa * f[0];
    };
    m.lagrangian_da = [](double, double a, FeatureView) { return a; };
    m.lagrangian_df = [=](double, double, FeatureView, FeatureGrad out) {
        std::fill(out.begin(), out.end(), 0.0);
        out[0] = kappa;
    };
    m.psi = [=](double x, FeatureView f) { return c0 + c1 * (1.0 - f[0]) + c2 * std::cos(tau * x); };
    m.psi_df = [=](double, FeatureView, FeatureGrad out) {
        std::fill(out.begin(), out.end(), 0.0);
        out[0] = -c1;
    };
    m.terminal = [=](FeatureView f) { return g0 + gl * f[0] + ga * f[1] + 0.5 * gq * f[0] * f[0]; };
    m.terminal_df = [=](FeatureView f, FeatureGrad out) {
        std::fill(out.begin(), out.end(), 0.0);
        out[0] = gl + gq * f[0];
        out[1] = ga;
    };
    if (gq == 0.0) m.linear_terminal = LinearTerminal{g0, [=](double y) { return gl + ga * std::cos(tau * y); }};
    return m;
}

/// Named models with default parameters.
inline std::vector<ModelSpec> builtin_models() {
    return {make_model("quadratic"), make_model("congestion"), make_model("linearG"), make_model("crowd")};
}

/// H^R(x, p, m) = H(x, clamp(p, -R, R), m); D_pH^R vanishes outside [-R, R].
inline ModelSpec truncate_hamiltonian(const ModelSpec& model, double radius) {
    if (!(radius > 0.0)) throw ParameterError("truncate_hamiltonian: radius must be positive");
    ModelSpec out = model;
    auto H = model.hamiltonian;
    auto Hp = model.hamiltonian_dp;
    out.hamiltonian = [H, radius](double x, double p, FeatureView f) { return H(x, std::clamp(p, -radius, radius), f); };
    out.hamiltonian_dp = [Hp, radius](double x, double p, FeatureView f) {
        return std::abs(p) <= radius ? Hp(x, p, f) : 0.0;
    };
    return out;
}

/// sup|w| + sup|w'| of an observable, sampled on a fine mesh.
inline double observable_w1inf_norm(const ModelSpec& model, int q) {
    const int n = 2048;
    double sup = 0.0, lip = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = double(i) / n, y = double(i + 1) / n;
        const double a = model.observable(q, x), b = model.observable(q, y);
        sup = std::max(sup, std::abs(a));
        lip = std::max(lip, std::abs(b - a) * n);
    }
    return sup + lip;
}

struct ValidatorReport {
    int samples = 0;
    bool finite_ok = true;
    bool coercivity_ok = true;
    bool growth_ok = true;
    bool convexity_ok = true;
    bool duality_ok = true;
    bool legendre_ok = true;
    bool gradient_ok = true;
    bool psi_monotone_ok = true;
    double coercivity_h = 0.0;   ///< tightest C with p^2/C - C <= H <= C (p^2 + 1)
    double coercivity_l = 0.0;   ///< same for L in a
    double duality_gap = 0.0;    ///< max |L - sup_p(-p a - H)|
    double legendre_residual = 0.0;
    double psi_lipschitz_x = 0.0;
    double psi_lipschitz_m = 0.0;
    double terminal_lipschitz = 0.0;
    double psi_sup = 0.0;
    std::vector<std::string> failures;

    bool ok() const {
        return finite_ok && coercivity_ok && growth_ok && convexity_ok && duality_ok && legendre_ok && gradient_ok &&
               psi_monotone_ok;
    }
    double psi_lipschitz() const { return psi_lipschitz_x + psi_lipschitz_m; }
};

namespace detail {

// sup_p (-p a - H(p)) for convex H: bracket by coarse scan, then golden section.
inline double legendre_sup(const std::function<double(double)>& H, double a, double radius) {
    auto obj = [&](double p) { return -p * a - H(p); };
    const int n = 400;
    double best = -INFINITY;
    int ib = 0;
    for (int i = 0; i <= n; ++i) {
        const double p = -radius + 2.0 * radius * i / n;
        const double v = obj(p);
        if (v > best) {
            best = v;
            ib = i;
        }
    }
    double lo = -radius + 2.0 * radius * std::max(0, ib - 1) / n;
    double hi = -radius + 2.0 * radius * std::min(n, ib + 1) / n;
    const double r = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = hi - r * (hi - lo), d = lo + r * (hi - lo);
    double fc = obj(c), fd = obj(d);
    for (int it = 0; it < 200 && hi - lo > 1e-13; ++it) {
        if (fc > fd) {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = obj(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = obj(d);
        }
    }
    return std::max(best, obj(0.5 * (lo + hi)));
}

inline GridMeasure sample_measure(std::mt19937_64& rng, const TorusGrid& g) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> m(g.n_cells());
    double s = 0.0;
    for (double& v : m) {
        v = u(rng) < 0.25 ? 0.0 : u(rng);
        s += v;
    }
    const double total = u(rng);
    if (s > 0.0)
        for (double& v : m) v *= total / s;
    return GridMeasure(g, std::move(m));
}

}  // namespace detail

/// Sampled checks of the standing assumptions. Failures are reported, never thrown.
inline ValidatorReport validate(const ModelSpec& model, int samples, std::uint64_t seed) {
    if (samples < 1) throw ParameterError("validate: samples must be >= 1");
    ValidatorReport rep;
    rep.samples = samples;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ux(0.0, 1.0), up(-10.0, 10.0);
    const TorusGrid grid(32);
    auto finite = [&](double v, const char* what) {
        if (!std::isfinite(v)) {
            if (rep.finite_ok) rep.failures.push_back(std::string("non-finite ") + what);
            rep.finite_ok = false;
            return false;
        }
        return true;
    };
    auto fail = [&](bool& flag, const std::string& msg) {
        if (flag) rep.failures.push_back(msg);
        flag = false;
    };

    const double pmax = 10.0;
    double ch_full = 0.0, ch_half = 0.0, cl_full = 0.0, cl_half = 0.0;
    double lower_h = 1.0, lower_l = 1.0;
    const int n_fd = model.n_features();
    std::vector<double> dpsi(n_fd), dg(n_fd);
    std::vector<double> wnorm(n_fd);
    for (int q = 0; q < n_fd; ++q) wnorm[q] = observable_w1inf_norm(model, q);

    for (int s = 0; s < samples; ++s) {
        const double x = ux(rng);
        auto mu = detail::sample_measure(rng, grid);
        const Features f = model.features(mu);
        std::vector<double> ps{-pmax, -0.5 * pmax, 0.0, 0.5 * pmax, pmax, up(rng), up(rng)};
        for (double p : ps) {
            const double H = model.hamiltonian(x, p, f);
            const double L = model.lagrangian(x, p, f);
            if (!finite(H, "hamiltonian") || !finite(L, "lagrangian")) continue;
            const double lo_h = 0.5 * (-H + std::sqrt(H * H + 4.0 * p * p));
            const double lo_l = 0.5 * (-L + std::sqrt(L * L + 4.0 * p * p));
            lower_h = std::max(lower_h, lo_h);
            lower_l = std::max(lower_l, lo_l);
            ch_full = std::max(ch_full, H / (p * p + 1.0));
            cl_full = std::max(cl_full, L / (p * p + 1.0));
            if (std::abs(p) <= 0.5 * pmax + 1e-12) {
                ch_half = std::max(ch_half, H / (p * p + 1.0));
                cl_half = std::max(cl_half, L / (p * p + 1.0));
            }
            // Convexity and derivative consistency by finite differences.
            const double e = 1e-3;
            const double Hp = model.hamiltonian(x, p + e, f), Hm = model.hamiltonian(x, p - e, f);
            const double Lp = model.lagrangian(x, p + e, f), Lm = model.lagrangian(x, p - e, f);
            const double scale = 1.0 + std::abs(H) + std::abs(L);
            if (Hp + Hm - 2.0 * H < -1e-9 * scale) fail(rep.convexity_ok, "H not convex in p");
            if (Lp + Lm - 2.0 * L < -1e-9 * scale) fail(rep.convexity_ok, "L not convex in a");
            const double dH = model.hamiltonian_dp(x, p, f), dL = model.lagrangian_da(x, p, f);
            if (!finite(dH, "D_pH") || !finite(dL, "D_aL")) continue;
            if (std::abs((Hp - Hm) / (2 * e) - dH) > 1e-4 * (1.0 + std::abs(dH)))
                fail(rep.gradient_ok, "D_pH inconsistent with H");
            if (std::abs((Lp - Lm) / (2 * e) - dL) > 1e-4 * (1.0 + std::abs(dL)))
                fail(rep.gradient_ok, "D_aL inconsistent with L");
            // Duality: L(a) = sup_p(-p a - H(p)) and L(a) + H(-D_aL(a)) = a D_aL(a).
            const double a = p;
            const double sup = detail::legendre_sup([&](double pp) { return model.hamiltonian(x, pp, f); }, a,
                                                    std::max(50.0, 4.0 * std::abs(a) + 20.0));
            rep.duality_gap = std::max(rep.duality_gap, std::abs(L - sup));
            const double legendre = L + model.hamiltonian(x, -dL, f) - a * dL;
            rep.legendre_residual = std::max(rep.legendre_residual, std::abs(legendre));
        }
        // Psi: finiteness, x-Lipschitz, feature Lipschitz, monotonicity along a random chain n <= m.
        const double psi = model.psi(x, f);
        if (!finite(psi, "psi")) continue;
        rep.psi_sup = std::max(rep.psi_sup, std::abs(psi));
        const double e = 1e-4;
        rep.psi_lipschitz_x =
            std::max(rep.psi_lipschitz_x, std::abs(model.psi(x + e, f) - model.psi(x - e, f)) / (2 * e));
        model.psi_df(x, f, dpsi);
        double lm = 0.0;
        for (int q = 0; q < n_fd; ++q) lm += std::abs(dpsi[q]) * wnorm[q];
        rep.psi_lipschitz_m = std::max(rep.psi_lipschitz_m, lm);
        if (model.terminal_df && model.terminal_is_cylindrical) {
            model.terminal_df(f, dg);
            double lg = 0.0;
            for (int q = 0; q < n_fd; ++q) lg += std::abs(dg[q]) * wnorm[q];
            rep.terminal_lipschitz = std::max(rep.terminal_lipschitz, lg);
        }
        if (!finite(model.terminal(f), "terminal")) continue;
        std::vector<double> sub(mu.mass());
        for (double& v : sub) v *= ux(rng);
        const Features fs = model.features(sub, grid);
        for (int j = 0; j < grid.n_cells(); ++j) {
            const double y = grid.node(j);
            if (model.psi(y, fs) < model.psi(y, f) - 1e-12) {
                fail(rep.psi_monotone_ok, "psi increases when mass is removed");
                break;
            }
        }
    }
    rep.coercivity_h = std::max({1.0, lower_h, ch_full});
    rep.coercivity_l = std::max({1.0, lower_l, cl_full});
    const double ceiling = 1e3;
    if (rep.coercivity_h > ceiling || rep.coercivity_l > ceiling) fail(rep.coercivity_ok, "coercivity constant too large");
    if (ch_full > 2.0 * std::max(ch_half, 1.0) || cl_full > 2.0 * std::max(cl_half, 1.0))
        fail(rep.growth_ok, "super-quadratic growth on the sample box");
    if (rep.duality_gap > 1e-6) fail(rep.duality_ok, "Legendre duality gap");
    if (rep.legendre_residual > 1e-9 * (1.0 + pmax * pmax)) fail(rep.legendre_ok, "L + H(-D_aL) != a D_aL");
    return rep;
}

}  // namespace meanstop
