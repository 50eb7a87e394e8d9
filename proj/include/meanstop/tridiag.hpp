#pragma once

#include <span>
#include <vector>

#include "meanstop/errors.hpp"

namespace meanstop {

/// Solves the periodic tridiagonal system lower_j x_{j-1} + diag_j x_j + upper_j x_{j+1} = rhs_j
/// (indices mod n) by the Sherman-Morrison reduction to a plain tridiagonal solve. Requires n >= 3.
inline std::vector<double> solve_periodic_tridiagonal(std::span<const double> lower, std::span<const double> diag,
                                                      std::span<const double> upper, std::span<const double> rhs) {
    const int n = static_cast<int>(diag.size());
    if (n < 3) throw StructuralError("periodic tridiagonal solve needs at least 3 unknowns");
    const double alpha = upper[n - 1];  // couples x_{n-1} to x_0
    const double beta = lower[0];       // couples x_0 to x_{n-1}
    const double gamma = -diag[0];
    std::vector<double> b(diag.begin(), diag.end());
    b[0] -= gamma;
    b[n - 1] -= alpha * beta / gamma;
    auto thomas = [&](const std::vector<double>& r) {
        std::vector<double> c(n), x(n);
        double den = b[0];
        c[0] = upper[0] / den;
        x[0] = r[0] / den;
        for (int j = 1; j < n; ++j) {
            den = b[j] - lower[j] * c[j - 1];
            c[j] = j < n - 1 ? upper[j] / den : 0.0;
            x[j] = (r[j] - lower[j] * x[j - 1]) / den;
        }
        for (int j = n - 2; j >= 0; --j) x[j] -= c[j] * x[j + 1];
        return x;
    };
    std::vector<double> r(rhs.begin(), rhs.end());
    std::vector<double> u(n, 0.0);
    u[0] = gamma;
    u[n - 1] = alpha;
    auto y = thomas(r);
    auto z = thomas(u);
    const double fact = (y[0] + beta * y[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
    for (int j = 0; j < n; ++j) y[j] -= fact * z[j];
    return y;
}

/// Pre-factored solver for (I - c Delta_h) with constant c = dt / h^2 on a periodic line.
/// Matrix: (1 + 2c) on the diagonal, -c off the diagonal and in the corners.
class PeriodicHeatSolver {
public:
    PeriodicHeatSolver() = default;
    PeriodicHeatSolver(int n, double c) : n_(n), c_(c) {
        if (n < 3) throw StructuralError("periodic heat solve needs at least 3 cells");
        const double d = 1.0 + 2.0 * c, off = -c;
        gamma_ = -d;
        b_.assign(n, d);
        b_[0] -= gamma_;
        b_[n - 1] -= off * off / gamma_;
        cp_.assign(n, 0.0);
        inv_.assign(n, 0.0);
        double den = b_[0];
        inv_[0] = 1.0 / den;
        cp_[0] = off * inv_[0];
        for (int j = 1; j < n; ++j) {
            den = b_[j] - off * cp_[j - 1];
            inv_[j] = 1.0 / den;
            cp_[j] = j < n - 1 ? off * inv_[j] : 0.0;
        }
        std::vector<double> u(n, 0.0);
        u[0] = gamma_;
        u[n - 1] = off;
        z_ = u;
        sweep(z_.data(), 1);
        denom_ = 1.0 + z_[0] + off * z_[n - 1] / gamma_;
    }

    int size() const { return n_; }

    /// In-place solve on a strided line x[0], x[stride], ..., x[(n-1) stride].
    void solve(double* x, std::ptrdiff_t stride) const {
        sweep(x, stride);
        const double off = -c_;
        const double fact = (x[0] + off * x[(n_ - 1) * stride] / gamma_) / denom_;
        for (int j = 0; j < n_; ++j) x[j * stride] -= fact * z_[j];
    }

private:
    void sweep(double* x, std::ptrdiff_t stride) const {
        const double off = -c_;
        x[0] *= inv_[0];
        for (int j = 1; j < n_; ++j) x[j * stride] = (x[j * stride] - off * x[(j - 1) * stride]) * inv_[j];
        for (int j = n_ - 2; j >= 0; --j) x[j * stride] -= cp_[j] * x[(j + 1) * stride];
    }

    int n_ = 0;
    double c_ = 0.0;
    double gamma_ = 0.0;
    double denom_ = 1.0;
    std::vector<double> b_, cp_, inv_, z_;
};

}  // namespace meanstop
