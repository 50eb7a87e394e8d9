#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "meanstop/assignment.hpp"
#include "meanstop/linprog.hpp"
#include "meanstop/torus.hpp"

namespace meanstop {

namespace detail {

using Sense = LinearProgram::Sense;

// Variables of the dual flow program: a = ap - am (pointwise part), q = qp - qm (edge flux), z.
struct FlowLayout {
    int n;
    int ap(int j) const { return j; }
    int am(int j) const { return n + j; }
    int qp(int j) const { return 2 * n + j; }
    int qm(int j) const { return 3 * n + j; }
    int z() const { return 4 * n; }
    int count() const { return 4 * n + 1; }
};

// Adds z >= sum|a|, z >= h sum|q| and returns the layout. Balance rows are added by the caller.
inline void add_norm_rows(LinearProgram& lp, const FlowLayout& L, double h) {
    std::vector<int> idx;
    std::vector<double> coef;
    for (int j = 0; j < L.n; ++j) {
        idx.push_back(L.ap(j));
        idx.push_back(L.am(j));
        coef.push_back(1.0);
        coef.push_back(1.0);
    }
    idx.push_back(L.z());
    coef.push_back(-1.0);
    lp.add_row(idx, coef, Sense::Le, 0.0);
    idx.clear();
    coef.clear();
    for (int j = 0; j < L.n; ++j) {
        idx.push_back(L.qp(j));
        idx.push_back(L.qm(j));
        coef.push_back(h);
        coef.push_back(h);
    }
    idx.push_back(L.z());
    coef.push_back(-1.0);
    lp.add_row(idx, coef, Sense::Le, 0.0);
    lp.set_objective(L.z(), 1.0);
}

// Balance row j: a_j + q_{j-1} - q_j (+ extra) = rhs.
inline void balance_row(const FlowLayout& L, int j, std::vector<int>& idx, std::vector<double>& coef) {
    const int n = L.n;
    const int jm = (j + n - 1) % n;
    idx = {L.ap(j), L.am(j), L.qp(jm), L.qm(jm), L.qp(j), L.qm(j)};
    coef = {1.0, -1.0, 1.0, -1.0, -1.0, 1.0};
}

}  // namespace detail

/// Dual norm of m - n against test functions with sup|f| + sup|Df| <= 1 (forward differences).
/// Solved exactly through the dual flow program min max(sum|a|, h sum|q|) with a + D^T q = m - n.
inline double bl_distance(const GridMeasure& m, const GridMeasure& n) {
    require_same_grid(m, n, "bl_distance");
    const int nc = m.size();
    bool equal = true;
    for (int j = 0; j < nc; ++j) equal = equal && m.mass()[j] == n.mass()[j];
    if (equal) return 0.0;
    detail::FlowLayout L{nc};
    LinearProgram lp(L.count());
    detail::add_norm_rows(lp, L, m.grid().h());
    std::vector<int> idx;
    std::vector<double> coef;
    for (int j = 0; j < nc; ++j) {
        detail::balance_row(L, j, idx, coef);
        lp.add_row(idx, coef, detail::Sense::Eq, m.mass()[j] - n.mass()[j]);
    }
    auto r = lp.minimize();
    if (!r.feasible || !r.bounded) throw NumericalError("bl_distance: linear program failed");
    return std::max(0.0, r.value);
}

/// 1-Wasserstein distance on the circle for equal-mass measures (cumulative shift formula).
inline double w1_distance(const GridMeasure& m, const GridMeasure& n) {
    require_same_grid(m, n, "w1_distance");
    if (std::abs(m.total() - n.total()) > 1e-10) throw DomainError("w1_distance: unequal total masses");
    const int nc = m.size();
    std::vector<double> F(nc);
    double acc = 0.0;
    for (int j = 0; j < nc; ++j) {
        acc += m.mass()[j] - n.mass()[j];
        F[j] = acc;
    }
    std::vector<double> sorted = F;
    std::nth_element(sorted.begin(), sorted.begin() + nc / 2, sorted.end());
    const double kappa = sorted[nc / 2];
    double s = 0.0;
    for (double f : F) s += std::abs(f - kappa);
    return m.grid().h() * s;
}

/// Mass-defect distance: n(T) - m(T) + inf{ d(m, n') : n' <= n, n'(T) = m(T) } for m(T) <= n(T).
inline double rho_distance(const GridMeasure& m_in, const GridMeasure& n_in) {
    require_same_grid(m_in, n_in, "rho_distance");
    const bool swap = m_in.total() > n_in.total();
    const GridMeasure& m = swap ? n_in : m_in;
    const GridMeasure& n = swap ? m_in : n_in;
    const int nc = m.size();
    const double tm = m.total();
    const double tn = n.total();
    bool equal = true;
    for (int j = 0; j < nc; ++j) equal = equal && m.mass()[j] == n.mass()[j];
    if (equal) return 0.0;
    detail::FlowLayout L{nc};
    const int off = L.count();
    LinearProgram lp(off + nc);
    detail::add_norm_rows(lp, L, m.grid().h());
    std::vector<int> idx;
    std::vector<double> coef;
    for (int j = 0; j < nc; ++j) {
        detail::balance_row(L, j, idx, coef);
        idx.push_back(off + j);
        coef.push_back(1.0);
        lp.add_row(idx, coef, detail::Sense::Eq, m.mass()[j]);
        lp.add_row({off + j}, {1.0}, detail::Sense::Le, n.mass()[j]);
    }
    idx.clear();
    coef.clear();
    for (int j = 0; j < nc; ++j) {
        idx.push_back(off + j);
        coef.push_back(1.0);
    }
    lp.add_row(idx, coef, detail::Sense::Eq, tm);
    auto r = lp.minimize();
    if (!r.feasible || !r.bounded) throw NumericalError("rho_distance: linear program failed");
    return (tn - tm) + std::max(0.0, r.value);
}

/// rho between empirical states: (K_b - K_a)/N + optimal partial matching cost / N.
inline double empirical_rho(const EmpiricalState& a_in, const EmpiricalState& b_in) {
    if (a_in.big_n() != b_in.big_n()) throw DomainError("empirical_rho: states have different N");
    const bool swap = a_in.k() > b_in.k();
    const EmpiricalState& a = swap ? b_in : a_in;
    const EmpiricalState& b = swap ? a_in : b_in;
    std::vector<std::vector<double>> cost(a.k(), std::vector<double>(b.k()));
    for (int i = 0; i < a.k(); ++i)
        for (int j = 0; j < b.k(); ++j) cost[i][j] = circle_distance(a[i], b[j]);
    const double match = min_cost_assignment(cost);
    const double n = a.big_n();
    return (b.k() - a.k()) / n + match / n;
}

/// K = round(N m0(T)) particles at quantile midpoints of m0 / m0(T); cells are centred at nodes.
inline EmpiricalState approximate_measure(const GridMeasure& m0, int big_n) {
    if (big_n < 1) throw DomainError("approximate_measure: big_n must be positive");
    const double total = m0.total();
    const int k = static_cast<int>(std::lround(big_n * total));
    if (total <= 0.0 || k == 0) return EmpiricalState(big_n, {});
    const TorusGrid& g = m0.grid();
    const double h = g.h();
    std::vector<double> pos;
    pos.reserve(k);
    int j = 0;
    double below = 0.0;  // normalized mass of cells before j
    for (int i = 1; i <= k; ++i) {
        const double q = (i - 0.5) / k;
        while (j < g.n_cells() - 1 && below + m0.mass()[j] / total < q) {
            below += m0.mass()[j] / total;
            ++j;
        }
        const double p = m0.mass()[j] / total;
        const double frac = p > 0.0 ? std::clamp((q - below) / p, 0.0, 1.0) : 0.5;
        pos.push_back(g.node(j) - 0.5 * h + frac * h);
    }
    return EmpiricalState(big_n, std::move(pos));
}

}  // namespace meanstop
