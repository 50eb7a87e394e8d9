#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "meanstop/errors.hpp"

namespace meanstop {

/// Wraps a real number into [0, 1).
inline double wrap01(double x) {
    double y = x - std::floor(x);
    return y >= 1.0 ? 0.0 : y;
}

/// Signed displacement from x to y along the shorter arc, in (-1/2, 1/2].
inline double circle_displacement(double x, double y) {
    double d = wrap01(y - x);
    return d > 0.5 ? d - 1.0 : d;
}

/// Shorter-arc distance on the unit circle.
inline double circle_distance(double x, double y) { return std::abs(circle_displacement(x, y)); }

/// Uniform periodic grid on the unit torus with nodes x_j = j h.
class TorusGrid {
public:
    TorusGrid() = default;
    explicit TorusGrid(int n_cells) : n_(n_cells) {
        if (n_cells < 1) throw ParameterError("TorusGrid: n_cells must be positive");
        h_ = 1.0 / n_cells;
    }

    int n_cells() const { return n_; }
    double h() const { return h_; }
    double node(int j) const { return index(j) * h_; }

    /// Periodic index reduction.
    int index(int j) const {
        int r = j % n_;
        return r < 0 ? r + n_ : r;
    }

    /// Nearest node to a torus point (ties resolved upward).
    int nearest(double x) const { return index(static_cast<int>(std::floor(wrap01(x) * n_ + 0.5))); }

    bool operator==(const TorusGrid& o) const { return n_ == o.n_; }
    bool operator!=(const TorusGrid& o) const { return n_ != o.n_; }

private:
    int n_ = 1;
    double h_ = 1.0;
};

/// Values at grid nodes, periodic extension implied.
struct GridFunction {
    TorusGrid grid;
    std::vector<double> values;

    GridFunction() = default;
    explicit GridFunction(const TorusGrid& g) : grid(g), values(g.n_cells(), 0.0) {}
    GridFunction(const TorusGrid& g, std::vector<double> v) : grid(g), values(std::move(v)) {
        if (static_cast<int>(values.size()) != g.n_cells())
            throw StructuralError("GridFunction: size does not match grid");
        for (double x : values)
            if (!std::isfinite(x)) throw DomainError("GridFunction: non-finite entry");
    }

    double operator[](int j) const { return values[grid.index(j)]; }
};

/// Sub-probability measure stored as mass per cell.
class GridMeasure {
public:
    GridMeasure() = default;
    explicit GridMeasure(const TorusGrid& g) : grid_(g), mass_(g.n_cells(), 0.0) {}
    GridMeasure(const TorusGrid& g, std::vector<double> mass) : grid_(g), mass_(std::move(mass)) {
        if (static_cast<int>(mass_.size()) != g.n_cells())
            throw StructuralError("GridMeasure: size does not match grid");
        double total = 0.0;
        for (double m : mass_) {
            if (!(m >= 0.0) || !std::isfinite(m)) throw DomainError("GridMeasure: negative or non-finite mass");
            total += m;
        }
        if (total > 1.0 + 1e-12) throw DomainError("GridMeasure: total mass exceeds 1");
    }

    static GridMeasure uniform(const TorusGrid& g, double total) {
        return GridMeasure(g, std::vector<double>(g.n_cells(), total / g.n_cells()));
    }
    static GridMeasure dirac(const TorusGrid& g, double x, double weight) {
        std::vector<double> m(g.n_cells(), 0.0);
        m[g.nearest(x)] = weight;
        return GridMeasure(g, std::move(m));
    }

    const TorusGrid& grid() const { return grid_; }
    const std::vector<double>& mass() const { return mass_; }
    double operator[](int j) const { return mass_[grid_.index(j)]; }
    int size() const { return grid_.n_cells(); }

    double total() const {
        double s = 0.0;
        for (double m : mass_) s += m;
        return s;
    }

    /// Integral of a node function against the measure.
    template <class F>
    double integrate(F&& f) const {
        double s = 0.0;
        for (int j = 0; j < size(); ++j) s += f(grid_.node(j)) * mass_[j];
        return s;
    }

    /// Entrywise comparison m <= other.
    bool leq(const GridMeasure& o, double tol = 0.0) const {
        for (int j = 0; j < size(); ++j)
            if (mass_[j] > o.mass_[j] + tol) return false;
        return true;
    }

private:
    TorusGrid grid_;
    std::vector<double> mass_;
};

inline void require_same_grid(const GridMeasure& m, const GridMeasure& n, const char* who) {
    if (m.grid() != n.grid()) throw StructuralError(std::string(who) + ": measures live on different grids");
}

/// Empirical state m^{N,K}_x = (1/N) sum_i delta_{x_i}.
class EmpiricalState {
public:
    EmpiricalState() = default;
    EmpiricalState(int big_n, std::vector<double> positions) : n_(big_n), x_(std::move(positions)) {
        if (big_n < 1) throw DomainError("EmpiricalState: big_n must be positive");
        if (static_cast<int>(x_.size()) > big_n) throw DomainError("EmpiricalState: more particles than N");
        for (double& x : x_) {
            if (!std::isfinite(x)) throw DomainError("EmpiricalState: non-finite position");
            x = wrap01(x);
        }
    }

    int big_n() const { return n_; }
    int k() const { return static_cast<int>(x_.size()); }
    const std::vector<double>& positions() const { return x_; }
    double operator[](int i) const { return x_[i]; }

    /// Mass K/N deposited to the nearest cells.
    GridMeasure as_measure(const TorusGrid& g) const {
        std::vector<double> m(g.n_cells(), 0.0);
        for (double x : x_) m[g.nearest(x)] += 1.0 / n_;
        return GridMeasure(g, std::move(m));
    }

    /// State with the particles in `mask` removed (bit i set = particle i removed).
    EmpiricalState without(unsigned mask) const {
        std::vector<double> y;
        for (int i = 0; i < k(); ++i)
            if (!(mask >> i & 1u)) y.push_back(x_[i]);
        return EmpiricalState(n_, std::move(y));
    }

private:
    int n_ = 1;
    std::vector<double> x_;
};

/// Formats a double with 17 significant digits (round-trips exactly).
inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Writes `# torus-measure n_cells=<n>` followed by `index,mass` rows.
inline void write_measure(std::ostream& os, const GridMeasure& m) {
    os << "# torus-measure n_cells=" << m.size() << "\n";
    for (int j = 0; j < m.size(); ++j) os << j << "," << format_real(m.mass()[j]) << "\n";
}

inline GridMeasure read_measure(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw StructuralError("read_measure: empty input");
    const std::string prefix = "# torus-measure n_cells=";
    if (line.rfind(prefix, 0) != 0) throw StructuralError("read_measure: bad header");
    int n = std::stoi(line.substr(prefix.size()));
    TorusGrid g(n);
    std::vector<double> mass(n, 0.0);
    std::vector<char> seen(n, 0);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos) throw StructuralError("read_measure: malformed row");
        int j = std::stoi(line.substr(0, comma));
        if (j < 0 || j >= n || seen[j]) throw StructuralError("read_measure: bad index");
        seen[j] = 1;
        mass[j] = std::strtod(line.c_str() + comma + 1, nullptr);
    }
    if (std::count(seen.begin(), seen.end(), 0) != 0) throw StructuralError("read_measure: missing rows");
    return GridMeasure(g, std::move(mass));
}

}  // namespace meanstop
