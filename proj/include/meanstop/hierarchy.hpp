#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <memory>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "meanstop/envelopes.hpp"
#include "meanstop/model.hpp"
#include "meanstop/tridiag.hpp"

namespace meanstop {

struct HierarchyOptions {
    double t0 = 0.0;
    /// Time step must satisfy dt <= safety * h^2.
    double safety = 1.0;
    /// Truncation radius for H; 0 picks 4 x the N-scaled Lipschitz bound of the terminal envelope.
    double radius = 0.0;
    /// Obstacle over every nonempty subset; false keeps single removals plus the full removal.
    bool all_subsets = true;
    /// Keep the pre-projection tables (used by the simulator's stopping rule).
    bool keep_continuation = true;
    std::size_t memory_budget = std::size_t(1) << 30;
};

/// Per-level node data: features of m^{N,K}_x and the obstacle subsets with their reduced nodes.
struct LevelGeometry {
    int k = 0;
    std::size_t nodes = 1;
    std::vector<double> features;      // nodes x n_features
    std::vector<unsigned> masks;       // obstacle subsets, by size then lexicographic
    std::vector<std::size_t> reduced;  // masks.size() x nodes: node of x^{-S} on level K - |S|
    std::vector<double> penalty;       // masks.size() x nodes: (1/N) sum_{i in S} Psi(x_i, m_x)
};

struct LevelTables {
    LevelGeometry geometry;
    std::vector<double> values;        // (n_steps + 1) x nodes, time-major
    std::vector<double> continuation;  // same layout, before the obstacle projection; may be empty
};

/// Tables V^{N,K}(t_k, x) for K = 0..k_max on grid^K; node index = sum_i j_i n^i.
struct ValueHierarchy {
    int big_n = 1;
    int k_max = 0;
    int n_cells = 0;
    int n_steps = 0;
    double t0 = 0.0;
    double horizon = 1.0;
    double dt = 0.0;
    double radius = 0.0;
    bool all_subsets = true;
    TorusGrid grid;
    ModelSpec model;  ///< with the truncated Hamiltonian actually used
    std::vector<LevelTables> levels;

    double h() const { return grid.h(); }
    double time(int step) const { return step == n_steps ? horizon : t0 + step * dt; }
    std::size_t nodes(int k) const { return levels[k].geometry.nodes; }
    std::span<const double> slice(int k, int step) const {
        return {levels[k].values.data() + static_cast<std::size_t>(step) * nodes(k), nodes(k)};
    }
    std::span<const double> continuation_slice(int k, int step) const {
        const auto& c = levels[k].continuation;
        if (c.empty()) return slice(k, step);
        return {c.data() + static_cast<std::size_t>(step) * nodes(k), nodes(k)};
    }
    int coordinate(std::size_t node, int i) const {
        for (int r = 0; r < i; ++r) node /= n_cells;
        return static_cast<int>(node % n_cells);
    }
    std::vector<double> positions(int k, std::size_t node) const {
        std::vector<double> x(k);
        for (int i = 0; i < k; ++i) {
            x[i] = grid.node(static_cast<int>(node % n_cells));
            node /= n_cells;
        }
        return x;
    }
    FeatureView features(int k, std::size_t node) const {
        const int nf = model.n_features();
        return {levels[k].geometry.features.data() + node * nf, static_cast<std::size_t>(nf)};
    }
};

namespace detail {

inline std::size_t ipow(int n, int k) {
    std::size_t r = 1;
    for (int i = 0; i < k; ++i) r *= static_cast<std::size_t>(n);
    return r;
}

inline LevelGeometry build_geometry(const ModelSpec& model, int big_n, int k, const TorusGrid& grid,
                                    bool all_subsets) {
    const int n = grid.n_cells();
    const int nf = model.n_features();
    LevelGeometry g;
    g.k = k;
    g.nodes = ipow(n, k);
    g.features.resize(g.nodes * nf);
    for_each_subset_by_size(k, [&](unsigned mask, const std::vector<int>& idx) {
        const int r = static_cast<int>(idx.size());
        if (r == 0) return;
        if (all_subsets || r == 1 || r == k) g.masks.push_back(mask);
    });
    const std::size_t ns = g.masks.size();
    g.reduced.resize(ns * g.nodes);
    g.penalty.resize(ns * g.nodes);
    std::vector<double> x(k);
    std::vector<int> j(k);
    for (std::size_t node = 0; node < g.nodes; ++node) {
        std::size_t rest = node;
        for (int i = 0; i < k; ++i) {
            j[i] = static_cast<int>(rest % n);
            rest /= n;
            x[i] = grid.node(j[i]);
        }
        const Features f = model.features(x, big_n);
        std::copy(f.begin(), f.end(), g.features.begin() + node * nf);
        for (std::size_t s = 0; s < ns; ++s) {
            const unsigned mask = g.masks[s];
            std::size_t red = 0, stride = 1;
            double pen = 0.0;
            for (int i = 0; i < k; ++i) {
                if (mask >> i & 1u) {
                    pen += model.psi(x[i], f);
                } else {
                    red += static_cast<std::size_t>(j[i]) * stride;
                    stride *= n;
                }
            }
            g.reduced[s * g.nodes + node] = red;
            g.penalty[s * g.nodes + node] = pen / big_n;
        }
    }
    return g;
}

// Lowest obstacle value at `node` and the index of the minimizing subset (first on ties).
inline double obstacle_at(const ValueHierarchy& h, int k, int step, std::size_t node, std::size_t* arg = nullptr) {
    const LevelGeometry& g = h.levels[k].geometry;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < g.masks.size(); ++s) {
        const int r = std::popcount(g.masks[s]);
        const double v = h.slice(k - r, step)[g.reduced[s * g.nodes + node]] + g.penalty[s * g.nodes + node];
        if (v < best) {
            best = v;
            if (arg) *arg = s;
        }
    }
    return best;
}

// W = V - (dt/N) sum_i H(x_i, N D_i V, m_x): centered gradient while the cell Peclet number
// |H_p| h / 2 stays <= 1, local Lax-Friedrichs otherwise.
inline void hamiltonian_step(const ValueHierarchy& h, int k, std::span<const double> V, std::span<double> W) {
    const int n = h.n_cells;
    const double hh = h.h();
    const double bn = h.big_n;
    const auto& H = h.model.hamiltonian;
    const auto& Hp = h.model.hamiltonian_dp;
    const std::size_t nodes = h.nodes(k);
    for (std::size_t node = 0; node < nodes; ++node) {
        const FeatureView f = h.features(k, node);
        double acc = 0.0;
        std::size_t rest = node, stride = 1;
        for (int i = 0; i < k; ++i) {
            const int j = static_cast<int>(rest % n);
            rest /= n;
            const std::size_t up = j == n - 1 ? node - (n - 1) * stride : node + stride;
            const std::size_t dn = j == 0 ? node + (n - 1) * stride : node - stride;
            const double x = h.grid.node(j);
            const double pc = bn * (V[up] - V[dn]) / (2.0 * hh);
            if (std::abs(Hp(x, pc, f)) * hh <= 2.0) {
                acc += H(x, pc, f);
            } else {
                const double pm = bn * (V[node] - V[dn]) / hh;
                const double pp = bn * (V[up] - V[node]) / hh;
                const double theta = std::max(std::abs(Hp(x, pm, f)), std::abs(Hp(x, pp, f)));
                acc += H(x, pc, f) - 0.5 * theta * (pp - pm);
            }
            stride *= n;
        }
        W[node] = V[node] - h.dt / bn * acc;
    }
}

// In-place product of (I - dt Delta_i)^{-1} over the K coordinate directions.
inline void diffusion_step(const ValueHierarchy& h, int k, const PeriodicHeatSolver& solver, std::span<double> W) {
    const std::size_t n = h.n_cells;
    const std::size_t nodes = h.nodes(k);
    std::size_t stride = 1;
    for (int i = 0; i < k; ++i) {
        const std::size_t block = stride * n;
        for (std::size_t outer = 0; outer < nodes; outer += block)
            for (std::size_t inner = 0; inner < stride; ++inner)
                solver.solve(W.data() + outer + inner, static_cast<std::ptrdiff_t>(stride));
        stride = block;
    }
}

}  // namespace detail

/// Solves the hierarchy of obstacle problems backward in time, K = 0..k_max.
inline ValueHierarchy solve_hierarchy(const ModelSpec& model, int big_n, int k_max, int n_cells, int n_steps,
                                      const HierarchyOptions& opt = {}) {
    if (k_max < 0 || k_max > 3) throw DomainError("solve_hierarchy: k_max must be in 0..3");
    if (big_n < 1 || k_max > big_n) throw DomainError("solve_hierarchy: need 1 <= N and k_max <= N");
    if (n_cells < 3) throw DomainError("solve_hierarchy: n_cells must be at least 3");
    if (n_steps < 1) throw DomainError("solve_hierarchy: n_steps must be positive");
    if (!(opt.t0 < model.horizon)) throw DomainError("solve_hierarchy: t0 must be before the horizon");
    if (!(opt.safety > 0.0)) throw ParameterError("solve_hierarchy: safety must be positive");

    ValueHierarchy hv;
    hv.big_n = big_n;
    hv.k_max = k_max;
    hv.n_cells = n_cells;
    hv.n_steps = n_steps;
    hv.t0 = opt.t0;
    hv.horizon = model.horizon;
    hv.dt = (model.horizon - opt.t0) / n_steps;
    hv.all_subsets = opt.all_subsets;
    hv.grid = TorusGrid(n_cells);
    const double hh = hv.grid.h();

    std::size_t bytes = 0;
    for (int k = 0; k <= k_max; ++k) {
        const std::size_t nodes = detail::ipow(n_cells, k);
        const std::size_t subsets = (std::size_t(1) << k);
        bytes += nodes * sizeof(double) * ((n_steps + 1) * (opt.keep_continuation ? 2 : 1) + model.n_features());
        bytes += nodes * subsets * (sizeof(double) + sizeof(std::size_t));
    }
    if (bytes > opt.memory_budget)
        throw CapacityError("solve_hierarchy: tables need " + std::to_string(bytes) + " bytes, over the budget of " +
                            std::to_string(opt.memory_budget));

    hv.levels.resize(k_max + 1);
    for (int k = 0; k <= k_max; ++k) {
        auto& lv = hv.levels[k];
        lv.geometry = detail::build_geometry(model, big_n, k, hv.grid, opt.all_subsets);
        lv.values.assign((n_steps + 1) * lv.geometry.nodes, 0.0);
        if (opt.keep_continuation && k > 0) lv.continuation.assign(lv.values.size(), 0.0);
    }

    // Terminal slices: the discrete envelope and the plain terminal cost.
    double lip = 0.0;
    for (int k = 0; k <= k_max; ++k) {
        auto& lv = hv.levels[k];
        const std::size_t off = static_cast<std::size_t>(n_steps) * lv.geometry.nodes;
        for (std::size_t node = 0; node < lv.geometry.nodes; ++node) {
            const EmpiricalState s(big_n, hv.positions(k, node));
            lv.values[off + node] = discrete_envelope(model, s).value;
            if (!lv.continuation.empty()) lv.continuation[off + node] = model.terminal(model.features(s));
        }
        std::size_t stride = 1;
        for (int i = 0; i < k; ++i) {
            for (std::size_t node = 0; node < lv.geometry.nodes; ++node) {
                const int j = hv.coordinate(node, i);
                const std::size_t up = j == n_cells - 1 ? node - (n_cells - 1) * stride : node + stride;
                lip = std::max(lip, big_n * std::abs(lv.values[off + up] - lv.values[off + node]) / hh);
            }
            stride *= n_cells;
        }
    }
    hv.radius = opt.radius > 0.0 ? opt.radius : std::max(1.0, 4.0 * lip);
    hv.model = truncate_hamiltonian(model, hv.radius);

    // Step limits: dt <= safety h^2; centered nodes (|H_p| h <= 2) need dt a^2 <= 2 for the
    // explicit advection against implicit diffusion; upwind nodes need dt |H_p| <= h.
    double amax = 0.0;
    for (int k = 1; k <= k_max; ++k) {
        const std::size_t nodes = hv.nodes(k);
        const std::size_t step = std::max<std::size_t>(1, nodes / 64);
        for (std::size_t node = 0; node < nodes; node += step)
            for (int i = 0; i < k; ++i)
                for (int q = -20; q <= 20; ++q) {
                    const double p = hv.radius * q / 20.0;
                    const double x = hv.grid.node(hv.coordinate(node, i));
                    amax = std::max(amax, std::abs(hv.model.hamiltonian_dp(x, p, hv.features(k, node))));
                }
    }
    double dt_max = opt.safety * hh * hh;
    const double acentered = std::min(amax, 2.0 / hh);
    if (acentered > 0.0) dt_max = std::min(dt_max, 2.0 / (acentered * acentered));
    if (amax * hh > 2.0) dt_max = std::min(dt_max, hh / amax);
    if (hv.dt > dt_max * (1.0 + 1e-12)) {
        const int suggested = static_cast<int>(std::ceil((model.horizon - opt.t0) / dt_max));
        throw CflError("solve_hierarchy: dt = " + format_real(hv.dt) + " exceeds the stable step " +
                           format_real(dt_max) + "; use n_steps >= " + std::to_string(suggested),
                       suggested);
    }

    const PeriodicHeatSolver solver(n_cells, hv.dt / (hh * hh));
    for (int k = 0; k <= k_max; ++k) {
        auto& lv = hv.levels[k];
        const std::size_t nodes = lv.geometry.nodes;
        if (k == 0) {
            std::fill(lv.values.begin(), lv.values.end(), lv.values.back());
            continue;
        }
        for (int step = n_steps - 1; step >= 0; --step) {
            std::span<const double> next(lv.values.data() + (step + 1) * nodes, nodes);
            std::span<double> cur(lv.values.data() + step * nodes, nodes);
            detail::hamiltonian_step(hv, k, next, cur);
            detail::diffusion_step(hv, k, solver, cur);
            if (!lv.continuation.empty()) std::copy(cur.begin(), cur.end(), lv.continuation.begin() + step * nodes);
            bool finite = true;
            for (std::size_t node = 0; node < nodes; ++node) {
                finite = finite && std::isfinite(cur[node]);
                cur[node] = std::min(cur[node], detail::obstacle_at(hv, k, step, node));
            }
            if (!finite)
                throw NumericalError("solve_hierarchy: non-finite value at K = " + std::to_string(k) +
                                     ", time index " + std::to_string(step));
        }
    }
    return hv;
}

namespace detail {

// Multilinear interpolation on grid^K of at(node); zero-weight corners are skipped so that node
// queries return the stored value exactly.
template <class At>
double multilinear(int n, int k, std::span<const double> x, At&& at) {
    int j0[3] = {0, 0, 0};
    double w[3] = {0.0, 0.0, 0.0};
    for (int i = 0; i < k; ++i) {
        const double u = wrap01(x[i]) * n;
        const double r = std::round(u);
        if (std::abs(u - r) < 1e-9) {
            j0[i] = static_cast<int>(r) % n;
            w[i] = 0.0;
        } else {
            const double fl = std::floor(u);
            j0[i] = static_cast<int>(fl) % n;
            w[i] = u - fl;
        }
    }
    double acc = 0.0;
    for (unsigned corner = 0; corner < (1u << k); ++corner) {
        double weight = 1.0;
        std::size_t node = 0, stride = 1;
        for (int i = 0; i < k; ++i) {
            const bool hi = corner >> i & 1u;
            weight *= hi ? w[i] : 1.0 - w[i];
            node += static_cast<std::size_t>(hi ? (j0[i] + 1) % n : j0[i]) * stride;
            stride *= n;
        }
        if (weight != 0.0) acc += weight * at(node);
    }
    return acc;
}

inline double interpolate_nodes(const ValueHierarchy& h, int k, std::span<const double> table,
                                std::span<const double> x) {
    return multilinear(h.n_cells, k, x, [&](std::size_t node) { return table[node]; });
}

// Bracketing time indices and the weight of the later one.
inline int time_bracket(const ValueHierarchy& h, double t, double* w) {
    const double s = (t - h.t0) / h.dt;
    const double r = std::round(s);
    int k;
    if (std::abs(s - r) < 1e-9) {
        k = static_cast<int>(r);
        *w = 0.0;
    } else {
        k = static_cast<int>(std::floor(s));
        *w = s - k;
    }
    if (k >= h.n_steps) {
        k = h.n_steps;
        *w = 0.0;
    }
    if (k < 0) {
        k = 0;
        *w = 0.0;
    }
    return k;
}

}  // namespace detail

/// V^{N,K}(t, x): multilinear in space, linear in time.
inline double query_value(const ValueHierarchy& h, double t, const EmpiricalState& state) {
    const int k = state.k();
    if (k > h.k_max) throw DomainError("query_value: K exceeds k_max");
    if (state.big_n() != h.big_n) throw DomainError("query_value: state has a different N");
    if (t < h.t0 - 1e-12 || t > h.horizon + 1e-12) throw DomainError("query_value: time outside the mesh");
    double w;
    const int step = detail::time_bracket(h, t, &w);
    const double a = detail::interpolate_nodes(h, k, h.slice(k, step), state.positions());
    if (w == 0.0) return a;
    const double b = detail::interpolate_nodes(h, k, h.slice(k, step + 1), state.positions());
    return (1.0 - w) * a + w * b;
}

/// Drift and stopping tables derived from a solved hierarchy. An empty hierarchy pointer is the
/// null policy: zero drift, no stopping before the horizon, and no removal at the horizon.
struct FeedbackPolicy {
    std::shared_ptr<const ValueHierarchy> hierarchy;
    double tolerance = 0.0;
    /// Per K: (n_steps + 1) x nodes x K drifts.
    std::vector<std::vector<double>> drift;
    /// Per K: (n_steps + 1) x nodes subset masks; 0 = continue.
    std::vector<std::vector<std::uint8_t>> stop;
    /// Multiplies every drift (perturbed policies).
    double drift_scale = 1.0;

    bool is_null() const { return !hierarchy; }
};

inline FeedbackPolicy null_policy() { return {}; }

/// alpha_i = -D_pH(x_i, N D_i V, m_x) with centered differences; stop where the obstacle gap is
/// within 10 (h^2 + dt), removing the minimizing subset. At the horizon the envelope minimizer.
inline FeedbackPolicy extract_policy(std::shared_ptr<const ValueHierarchy> hp, const ModelSpec& model) {
    if (!hp) throw StructuralError("extract_policy: no hierarchy");
    const ValueHierarchy& h = *hp;
    FeedbackPolicy pol;
    pol.tolerance = 10.0 * (h.h() * h.h() + h.dt);
    pol.drift.resize(h.k_max + 1);
    pol.stop.resize(h.k_max + 1);
    const int n = h.n_cells;
    for (int k = 1; k <= h.k_max; ++k) {
        const std::size_t nodes = h.nodes(k);
        const LevelGeometry& g = h.levels[k].geometry;
        auto& dr = pol.drift[k];
        auto& st = pol.stop[k];
        dr.assign((h.n_steps + 1) * nodes * k, 0.0);
        st.assign((h.n_steps + 1) * nodes, 0);
        for (int step = 0; step <= h.n_steps; ++step) {
            const auto V = h.slice(k, step);
            for (std::size_t node = 0; node < nodes; ++node) {
                const FeatureView f = h.features(k, node);
                std::size_t rest = node, stride = 1;
                for (int i = 0; i < k; ++i) {
                    const int j = static_cast<int>(rest % n);
                    rest /= n;
                    const std::size_t up = j == n - 1 ? node - (n - 1) * stride : node + stride;
                    const std::size_t dn = j == 0 ? node + (n - 1) * stride : node - stride;
                    const double p = h.big_n * (V[up] - V[dn]) / (2.0 * h.h());
                    dr[(step * nodes + node) * k + i] = -model.hamiltonian_dp(h.grid.node(j), p, f);
                    stride *= n;
                }
                if (step == h.n_steps) {
                    const EmpiricalState s(h.big_n, h.positions(k, node));
                    st[step * nodes + node] = static_cast<std::uint8_t>(discrete_envelope(model, s).mask);
                } else {
                    std::size_t arg = 0;
                    const double obs = detail::obstacle_at(h, k, step, node, &arg);
                    if (obs - V[node] <= pol.tolerance) st[step * nodes + node] = static_cast<std::uint8_t>(g.masks[arg]);
                }
            }
        }
    }
    pol.hierarchy = std::move(hp);
    return pol;
}

inline FeedbackPolicy extract_policy(const ValueHierarchy& h, const ModelSpec& model) {
    return extract_policy(std::make_shared<const ValueHierarchy>(h), model);
}

/// Empirical regularity constants per K (index 0 unused).
struct RegularityReport {
    std::vector<double> spatial;  ///< sup N |V(t,x) - V(t,y)| / sum_i |x_i - y_i|
    std::vector<double> removal;  ///< sup N |V^{K-1}(t, x^{-i}) - V^K(t, x)|
    std::vector<double> holder;   ///< sup |V(t,x) - V(s,x)| / |t - s|^{1/2}
};

inline RegularityReport regularity_report(const ValueHierarchy& h, int samples = 4000, std::uint64_t seed = 0x5eed) {
    RegularityReport rep;
    rep.spatial.assign(h.k_max + 1, 0.0);
    rep.removal.assign(h.k_max + 1, 0.0);
    rep.holder.assign(h.k_max + 1, 0.0);
    std::mt19937_64 rng(seed);
    const int n = h.n_cells;
    for (int k = 1; k <= h.k_max; ++k) {
        const std::size_t nodes = h.nodes(k);
        std::uniform_int_distribution<std::size_t> pick_node(0, nodes - 1);
        std::uniform_int_distribution<int> pick_step(0, h.n_steps);
        // With the l1 sum metric the grid sup is attained at adjacent nodes.
        for (int step = 0; step <= h.n_steps; ++step) {
            const auto V = h.slice(k, step);
            std::size_t stride = 1;
            for (int i = 0; i < k; ++i, stride *= static_cast<std::size_t>(n))
                for (std::size_t x = 0; x < nodes; ++x) {
                    const std::size_t y = h.coordinate(x, i) + 1 < n ? x + stride : x - (n - 1) * stride;
                    rep.spatial[k] = std::max(rep.spatial[k], h.big_n * n * std::abs(V[x] - V[y]));
                }
        }
        const LevelGeometry& g = h.levels[k].geometry;
        const int every = std::max(1, h.n_steps / 64);
        for (int step = 0; step <= h.n_steps; step += every) {
            const auto V = h.slice(k, step);
            const auto W = h.slice(k - 1, step);
            for (std::size_t s = 0; s < g.masks.size(); ++s) {
                if (std::popcount(g.masks[s]) != 1) continue;
                for (std::size_t node = 0; node < nodes; ++node)
                    rep.removal[k] = std::max(rep.removal[k], h.big_n * std::abs(W[g.reduced[s * nodes + node]] - V[node]));
            }
        }
        for (int s = 0; s < samples; ++s) {
            const std::size_t x = pick_node(rng);
            const int a = pick_step(rng);
            const int b = pick_step(rng);
            if (a == b) continue;
            const double gap = std::abs(h.time(a) - h.time(b));
            rep.holder[k] = std::max(rep.holder[k], std::abs(h.slice(k, a)[x] - h.slice(k, b)[x]) / std::sqrt(gap));
        }
        // Pairs ending at the horizon probe the terminal layer where the square-root rate is sharp.
        for (int r = 0; (1 << r) <= h.n_steps; ++r) {
            const int a = h.n_steps - (1 << r);
            const double gap = h.horizon - h.time(a);
            for (std::size_t node = 0; node < nodes; node += std::max<std::size_t>(1, nodes / 256))
                rep.holder[k] = std::max(rep.holder[k],
                                         std::abs(h.slice(k, a)[node] - h.slice(k, h.n_steps)[node]) / std::sqrt(gap));
        }
    }
    return rep;
}

/// One text table per K: header line, then one comma-separated row of node values per time index.
inline void write_level(std::ostream& os, const ValueHierarchy& h, int k) {
    os << "# vnk N=" << h.big_n << " K=" << k << " n_cells=" << h.n_cells << " n_steps=" << h.n_steps
       << " T=" << format_real(h.horizon) << '\n';
    const std::size_t nodes = h.nodes(k);
    for (int step = 0; step <= h.n_steps; ++step) {
        const auto V = h.slice(k, step);
        for (std::size_t node = 0; node < nodes; ++node) {
            if (node) os << ',';
            os << format_real(V[node]);
        }
        os << '\n';
    }
}

/// Writes vnk_K<k>.txt for every level into `dir` (which must exist).
inline void write_hierarchy(const ValueHierarchy& h, const std::string& dir) {
    for (int k = 0; k <= h.k_max; ++k) {
        const std::string path = dir + "/vnk_K" + std::to_string(k) + ".txt";
        std::ofstream os(path);
        if (!os) throw StructuralError("write_hierarchy: cannot open " + path);
        write_level(os, h, k);
    }
}

}  // namespace meanstop
