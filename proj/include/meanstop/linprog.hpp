#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "meanstop/errors.hpp"

namespace meanstop {

/// Dense linear program: optimize c.x subject to row constraints and x >= 0.
class LinearProgram {
public:
    enum class Sense { Le, Ge, Eq };

    explicit LinearProgram(int n_vars) : n_(n_vars), c_(n_vars, 0.0) {}

    int n_vars() const { return n_; }
    void set_objective(int j, double v) { c_[j] = v; }

    /// Adds sum_k coef[k] x[idx[k]] (sense) rhs.
    void add_row(const std::vector<int>& idx, const std::vector<double>& coef, Sense s, double rhs) {
        std::vector<double> row(n_, 0.0);
        for (std::size_t k = 0; k < idx.size(); ++k) row[idx[k]] += coef[k];
        if (s == Sense::Le || s == Sense::Eq) {
            rows_.push_back(row);
            rhs_.push_back(rhs);
        }
        if (s == Sense::Ge || s == Sense::Eq) {
            for (double& v : row) v = -v;
            rows_.push_back(std::move(row));
            rhs_.push_back(-rhs);
        }
    }

    struct Result {
        bool feasible = false;
        bool bounded = false;
        double value = 0.0;
        std::vector<double> x;
    };

    Result minimize() const { return solve(-1.0); }
    Result maximize() const { return solve(1.0); }

private:
    // Two-phase tableau simplex; smallest-index tie breaking avoids cycling.
    Result solve(double sign) const {
        const int m = static_cast<int>(rows_.size());
        const int n = n_;
        const double eps = 1e-11;
        std::vector<std::vector<double>> D(m + 2, std::vector<double>(n + 2, 0.0));
        std::vector<int> B(m), N(n + 1);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) D[i][j] = rows_[i][j];
            D[i][n] = -1.0;
            D[i][n + 1] = rhs_[i];
            B[i] = n + i;
        }
        for (int j = 0; j < n; ++j) {
            N[j] = j;
            D[m][j] = -sign * c_[j];
        }
        N[n] = -1;
        D[m + 1][n] = 1.0;

        auto pivot = [&](int r, int s) {
            const double inv = 1.0 / D[r][s];
            for (int i = 0; i < m + 2; ++i) {
                if (i == r || D[i][s] == 0.0) continue;
                const double f = D[i][s] * inv;
                for (int j = 0; j < n + 2; ++j) D[i][j] -= D[r][j] * f;
                D[i][s] = -f;
            }
            for (int j = 0; j < n + 2; ++j)
                if (j != s) D[r][j] *= inv;
            D[r][s] = inv;
            std::swap(B[r], N[s]);
        };

        auto simplex = [&](int phase) -> bool {
            const int x = phase == 1 ? m + 1 : m;
            for (;;) {
                int s = -1;
                for (int j = 0; j <= n; ++j) {
                    if (phase == 2 && N[j] == -1) continue;
                    if (s == -1 || D[x][j] < D[x][s] - eps || (D[x][j] <= D[x][s] + eps && N[j] < N[s])) s = j;
                }
                if (D[x][s] > -eps) return true;
                int r = -1;
                for (int i = 0; i < m; ++i) {
                    if (D[i][s] < eps) continue;
                    if (r == -1) {
                        r = i;
                        continue;
                    }
                    const double a = D[i][n + 1] / D[i][s];
                    const double b = D[r][n + 1] / D[r][s];
                    if (a < b - eps || (a <= b + eps && B[i] < B[r])) r = i;
                }
                if (r == -1) return false;
                pivot(r, s);
            }
        };

        Result res;
        int r = 0;
        for (int i = 1; i < m; ++i)
            if (D[i][n + 1] < D[r][n + 1]) r = i;
        if (m > 0 && D[r][n + 1] < -eps) {
            pivot(r, n);
            if (!simplex(1) || D[m + 1][n + 1] < -1e-9) return res;
            for (int i = 0; i < m; ++i)
                if (B[i] == -1) {
                    int s = -1;
                    for (int j = 0; j <= n; ++j)
                        if (s == -1 || D[i][j] < D[i][s] || (D[i][j] == D[i][s] && N[j] < N[s])) s = j;
                    pivot(i, s);
                }
        }
        res.feasible = true;
        if (!simplex(2)) return res;
        res.bounded = true;
        res.x.assign(n, 0.0);
        for (int i = 0; i < m; ++i)
            if (B[i] >= 0 && B[i] < n) res.x[B[i]] = D[i][n + 1];
        res.value = sign * D[m][n + 1];
        return res;
    }

    int n_;
    std::vector<double> c_;
    std::vector<std::vector<double>> rows_;
    std::vector<double> rhs_;
};

}  // namespace meanstop
