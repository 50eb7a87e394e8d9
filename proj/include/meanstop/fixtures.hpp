#pragma once

// Seeded random measures and states used by the checks and the tests.

#include <random>
#include <vector>

#include "meanstop/torus.hpp"

namespace meanstop::fixtures {

inline GridMeasure random_measure(std::mt19937_64& rng, const TorusGrid& g, double total) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> m(g.n_cells());
    double s = 0.0;
    for (double& v : m) {
        v = u(rng) < 0.3 ? 0.0 : u(rng);
        s += v;
    }
    if (s == 0.0) {
        m[0] = 1.0;
        s = 1.0;
    }
    for (double& v : m) v *= total / s;
    return GridMeasure(g, std::move(m));
}

inline GridMeasure random_measure(std::mt19937_64& rng, const TorusGrid& g) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    return random_measure(rng, g, u(rng));
}

/// Cellwise scaled-down copy n <= m.
inline GridMeasure random_submeasure(std::mt19937_64& rng, const GridMeasure& m) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> n(m.mass());
    for (double& v : n) v *= u(rng) < 0.3 ? 1.0 : u(rng);
    return GridMeasure(m.grid(), std::move(n));
}

inline EmpiricalState random_state(std::mt19937_64& rng, int big_n, int k) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> x(k);
    for (double& v : x) v = u(rng);
    return EmpiricalState(big_n, std::move(x));
}

/// Deterministic integer-pattern measure (shared with offline oracle scripts).
inline GridMeasure pattern_measure(int n, int a, int b, int mod, double total) {
    std::vector<double> v(n);
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
        v[j] = static_cast<double>((a * j + b) % mod);
        s += v[j];
    }
    for (double& x : v) x = x / s * total;
    return GridMeasure(TorusGrid(n), std::move(v));
}

}  // namespace meanstop::fixtures
