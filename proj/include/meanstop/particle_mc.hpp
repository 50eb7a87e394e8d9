#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <thread>
#include <vector>

#include "meanstop/hierarchy.hpp"

namespace meanstop {

struct SimConfig {
    int n_paths = 1000;
    double dt_sim = 1e-2;
    std::uint64_t seed = 0;
    double t0 = 0.0;
    EmpiricalState initial;
    int workers = 1;
};

struct CostEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    int n_paths = 0;
    double running = 0.0;   ///< mean running cost
    double stopping = 0.0;  ///< mean Psi charges, including removals at the horizon
    double terminal = 0.0;  ///< mean G on the survivors
    /// Set when dt_sim is coarser than the policy mesh.
    bool coarse_step = false;
};

/// Per-path cost components.
struct PathCost {
    double running = 0.0;
    double stopping = 0.0;
    double terminal = 0.0;
    double total() const { return running + stopping + terminal; }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace detail

/// Standard normal keyed by (seed, path, particle, step): independent of evaluation order.
inline double normal_draw(std::uint64_t seed, std::uint64_t path, std::uint64_t particle, std::uint64_t step) {
    using detail::splitmix64;
    const std::uint64_t key = splitmix64(seed ^ splitmix64(path ^ splitmix64(particle ^ splitmix64(step))));
    const std::uint64_t a = splitmix64(key), b = splitmix64(key ^ 0x5bd1e995ULL);
    const double u1 = (static_cast<double>(a >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

namespace detail {

// Linear-in-time, multilinear-in-space value of a per-step table family at (t, x).
template <class Slice>
double space_time(const ValueHierarchy& h, int k, double t, std::span<const double> x, Slice&& slice) {
    double w;
    const int step = time_bracket(h, t, &w);
    const double a = interpolate_nodes(h, k, slice(k, step), x);
    if (w == 0.0) return a;
    return (1.0 - w) * a + w * interpolate_nodes(h, k, slice(k, step + 1), x);
}

// Subset of the live particles to stop now (0 = none): stop when some obstacle is strictly below
// the continuation value.
inline unsigned stopping_mask(const ModelSpec& model, const FeedbackPolicy& pol, double t,
                              const std::vector<double>& y) {
    const ValueHierarchy& h = *pol.hierarchy;
    const int k = static_cast<int>(y.size());
    if (k == 0) return 0;
    if (h.levels[k].continuation.empty()) {
        double w;
        int step = time_bracket(h, t, &w);
        if (w > 0.5) ++step;
        std::size_t node = 0, stride = 1;
        for (int i = 0; i < k; ++i) {
            node += static_cast<std::size_t>(h.grid.nearest(y[i])) * stride;
            stride *= h.n_cells;
        }
        return pol.stop[k][step * h.nodes(k) + node];
    }
    const double cont = space_time(h, k, t, y, [&](int kk, int s) { return h.continuation_slice(kk, s); });
    const Features f = model.features(y, h.big_n);
    const auto& masks = h.levels[k].geometry.masks;
    double best = cont;
    unsigned arg = 0;
    std::vector<double> rest;
    for (unsigned mask : masks) {
        rest.clear();
        double pen = 0.0;
        for (int i = 0; i < k; ++i) {
            if (mask >> i & 1u)
                pen += model.psi(y[i], f);
            else
                rest.push_back(y[i]);
        }
        const int r = k - std::popcount(mask);
        const double v = space_time(h, r, t, rest, [&](int kk, int s) { return h.slice(kk, s); }) + pen / h.big_n;
        if (v < best) {
            best = v;
            arg = mask;
        }
    }
    return arg;
}

inline double policy_drift(const FeedbackPolicy& pol, double t, const std::vector<double>& y, int i) {
    const ValueHierarchy& h = *pol.hierarchy;
    const int k = static_cast<int>(y.size());
    double w;
    const int step = time_bracket(h, t, &w);
    const std::size_t nodes = h.nodes(k);
    const auto& table = pol.drift[k];
    auto at = [&](int s) {
        return multilinear(h.n_cells, k, y, [&](std::size_t node) { return table[(s * nodes + node) * k + i]; });
    };
    const double a = at(step);
    return pol.drift_scale * (w == 0.0 ? a : (1.0 - w) * a + w * at(step + 1));
}

inline PathCost simulate_path(const ModelSpec& model, const FeedbackPolicy& pol, const SimConfig& cfg, int n_sim,
                              double dt, std::uint64_t path) {
    PathCost cost;
    const int big_n = cfg.initial.big_n();
    std::vector<double> x = cfg.initial.positions();
    std::vector<int> id(x.size());
    for (std::size_t i = 0; i < id.size(); ++i) id[i] = static_cast<int>(i);
    std::vector<double> drift;
    const double sq = std::sqrt(2.0 * dt);
    for (int s = 0; s < n_sim; ++s) {
        const double t = cfg.t0 + s * dt;
        if (!pol.is_null() && !x.empty()) {
            const unsigned mask = stopping_mask(model, pol, t, x);
            if (mask) {
                const Features f = model.features(x, big_n);
                std::vector<double> nx;
                std::vector<int> nid;
                for (std::size_t i = 0; i < x.size(); ++i) {
                    if (mask >> i & 1u) {
                        cost.stopping += model.psi(x[i], f) / big_n;
                    } else {
                        nx.push_back(x[i]);
                        nid.push_back(id[i]);
                    }
                }
                x = std::move(nx);
                id = std::move(nid);
            }
        }
        if (x.empty()) break;
        const Features f = model.features(x, big_n);
        drift.assign(x.size(), 0.0);
        double run = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (!pol.is_null()) drift[i] = policy_drift(pol, t, x, static_cast<int>(i));
            run += model.lagrangian(x[i], drift[i], f);
        }
        cost.running += dt * run / big_n;
        for (std::size_t i = 0; i < x.size(); ++i)
            x[i] = wrap01(x[i] + drift[i] * dt + sq * normal_draw(cfg.seed, path, id[i], s));
    }
    const EmpiricalState last(big_n, x);
    if (pol.is_null()) {
        cost.terminal = model.terminal(model.features(last));
    } else {
        const EnvelopeResult env = discrete_envelope(model, last);
        cost.terminal = model.terminal(model.features(last.without(env.mask)));
        cost.stopping += env.value - cost.terminal;
    }
    return cost;
}

}  // namespace detail

/// Per-path costs of the controlled and stopped particle system (Euler-Maruyama, sqrt(2) noise).
/// Stopping is decided at step starts, before the move, and charged at the pre-removal measure.
inline std::vector<PathCost> simulate_paths(const ModelSpec& model, const FeedbackPolicy& pol, const SimConfig& cfg,
                                            bool* coarse = nullptr) {
    const double horizon = model.horizon;
    if (cfg.n_paths < 1) throw ParameterError("simulate: n_paths must be >= 1");
    if (!(cfg.dt_sim > 0.0)) throw ParameterError("simulate: dt_sim must be positive");
    if (cfg.t0 > horizon + 1e-12) throw DomainError("simulate: t0 is after the horizon");
    if (!pol.is_null()) {
        const ValueHierarchy& h = *pol.hierarchy;
        if (cfg.initial.k() > h.k_max) throw DomainError("simulate: policy does not cover the initial K");
        if (cfg.initial.big_n() != h.big_n) throw DomainError("simulate: policy was built for another N");
        if (cfg.t0 < h.t0 - 1e-12) throw DomainError("simulate: t0 precedes the policy mesh");
    }
    const double span = std::max(0.0, horizon - cfg.t0);
    const int n_sim = span <= 1e-14 ? 0 : static_cast<int>(std::ceil(span / cfg.dt_sim - 1e-9));
    const double dt = n_sim ? span / n_sim : 0.0;
    if (coarse) *coarse = !pol.is_null() && dt > pol.hierarchy->dt * (1.0 + 1e-9);

    std::vector<PathCost> out(cfg.n_paths);
    const int workers = std::clamp(cfg.workers, 1, cfg.n_paths);
    auto run = [&](int lo, int hi) {
        for (int p = lo; p < hi; ++p) out[p] = detail::simulate_path(model, pol, cfg, n_sim, dt, p);
    };
    if (workers == 1) {
        run(0, cfg.n_paths);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (cfg.n_paths + workers - 1) / workers;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back(run, std::min(cfg.n_paths, w * chunk), std::min(cfg.n_paths, (w + 1) * chunk));
        for (auto& t : pool) t.join();
    }
    return out;
}

inline CostEstimate summarize(const std::vector<PathCost>& paths) {
    CostEstimate e;
    e.n_paths = static_cast<int>(paths.size());
    if (paths.empty()) return e;
    for (const auto& p : paths) {
        e.running += p.running;
        e.stopping += p.stopping;
        e.terminal += p.terminal;
    }
    const double n = static_cast<double>(paths.size());
    e.running /= n;
    e.stopping /= n;
    e.terminal /= n;
    e.mean = e.running + e.stopping + e.terminal;
    double ss = 0.0;
    for (const auto& p : paths) ss += (p.total() - e.mean) * (p.total() - e.mean);
    e.std_error = paths.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
    return e;
}

inline CostEstimate simulate(const ModelSpec& model, const FeedbackPolicy& pol, const SimConfig& cfg) {
    bool coarse = false;
    CostEstimate e = summarize(simulate_paths(model, pol, cfg, &coarse));
    e.coarse_step = coarse;
    return e;
}

struct GapEstimate {
    double gap = 0.0;        ///< cost(extracted) - cost(perturbed)
    double std_error = 0.0;  ///< of the paired difference (common random numbers)
};

/// Compares the extracted policy with one whose drift is scaled by 1 + perturbation.
inline GapEstimate policy_gap(const ModelSpec& model, const FeedbackPolicy& pol, const SimConfig& cfg,
                              double perturbation) {
    FeedbackPolicy other = pol;
    other.drift_scale = pol.drift_scale * (1.0 + perturbation);
    const auto a = simulate_paths(model, pol, cfg);
    const auto b = simulate_paths(model, other, cfg);
    const double n = static_cast<double>(a.size());
    GapEstimate g;
    for (std::size_t i = 0; i < a.size(); ++i) g.gap += a[i].total() - b[i].total();
    g.gap /= n;
    double ss = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i].total() - b[i].total() - g.gap;
        ss += d * d;
    }
    g.std_error = a.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
    return g;
}

}  // namespace meanstop
