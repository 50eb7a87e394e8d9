#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "meanstop/model.hpp"

namespace meanstop {

struct EnvelopeResult {
    double value = 0.0;
    /// Discrete case: removed particle indices (ascending) and the same set as a bit mask.
    std::vector<int> removed;
    unsigned mask = 0;
    /// Continuous case: the retained measure m' <= m.
    std::optional<GridMeasure> kept;
};

namespace detail {

// Next subset of the same popcount in lexicographic order of index lists; false when exhausted.
inline bool next_combination(std::vector<int>& c, int k) {
    const int r = static_cast<int>(c.size());
    int i = r - 1;
    while (i >= 0 && c[i] == k - r + i) --i;
    if (i < 0) return false;
    ++c[i];
    for (int j = i + 1; j < r; ++j) c[j] = c[j - 1] + 1;
    return true;
}

}  // namespace detail

/// Calls fn(mask, indices) for every subset of [k] ordered by size, then lexicographically.
template <class Fn>
void for_each_subset_by_size(int k, Fn&& fn) {
    for (int r = 0; r <= k; ++r) {
        std::vector<int> c(r);
        for (int i = 0; i < r; ++i) c[i] = i;
        do {
            unsigned mask = 0;
            for (int i : c) mask |= 1u << i;
            fn(mask, c);
        } while (r > 0 && detail::next_combination(c, k));
    }
}

/// Cost of removing `mask` from the state at the terminal time.
inline double envelope_candidate(const ModelSpec& model, const EmpiricalState& s, unsigned mask,
                                 const Features& full) {
    std::vector<double> rest;
    double penalty = 0.0;
    for (int i = 0; i < s.k(); ++i) {
        if (mask >> i & 1u)
            penalty += model.psi(s[i], full);
        else
            rest.push_back(s[i]);
    }
    return model.terminal(model.features(rest, s.big_n())) + penalty / s.big_n();
}

/// G^{N,K}_Psi(x) = min over S of G(m_{x^{-S}}) + (1/N) sum_{i in S} Psi(x_i, m_x).
/// Ties go to the smaller subset, then to the lexicographically first one.
inline EnvelopeResult discrete_envelope(const ModelSpec& model, const EmpiricalState& s) {
    const int k = s.k();
    if (k > 20) throw CapacityError("discrete_envelope: K > 20 is too large for exact enumeration; use a greedy mode");
    const Features full = model.features(s);
    EnvelopeResult best;
    bool first = true;
    for_each_subset_by_size(k, [&](unsigned mask, const std::vector<int>& idx) {
        const double v = envelope_candidate(model, s, mask, full);
        if (first || v < best.value) {
            best.value = v;
            best.mask = mask;
            best.removed = idx;
            first = false;
        }
    });
    return best;
}

/// G_Psi(m) = min over 0 <= m' <= m of G(m') + int Psi(x, m) d(m - m').
inline EnvelopeResult continuous_envelope(const ModelSpec& model, const GridMeasure& m) {
    if (!model.terminal_is_cylindrical) throw UnsupportedModelError("continuous_envelope: terminal cost is not cylindrical");
    const TorusGrid& g = m.grid();
    const int n = g.n_cells();
    const Features fm = model.features(m);
    std::vector<double> psi(n);
    for (int j = 0; j < n; ++j) psi[j] = model.psi(g.node(j), fm);
    auto objective = [&](const std::vector<double>& kept) {
        double s = model.terminal(model.features(kept, g));
        for (int j = 0; j < n; ++j) s += psi[j] * (m.mass()[j] - kept[j]);
        return s;
    };
    EnvelopeResult res;
    if (model.linear_terminal) {
        std::vector<double> kept(n, 0.0);
        for (int j = 0; j < n; ++j)
            if (model.linear_terminal->density(g.node(j)) <= psi[j]) kept[j] = m.mass()[j];
        res.value = objective(kept);
        res.kept = GridMeasure(g, std::move(kept));
        return res;
    }
    if (!model.terminal_df) throw UnsupportedModelError("continuous_envelope: nonlinear G needs its derivative");
    // Projected gradient with Armijo backtracking from 8 deterministic starts.
    const int nf = model.n_features();
    std::vector<std::vector<double>> w(nf, std::vector<double>(n));
    for (int q = 0; q < nf; ++q)
        for (int j = 0; j < n; ++j) w[q][j] = model.observable(q, g.node(j));
    auto gradient = [&](const std::vector<double>& kept, std::vector<double>& grad) {
        Features dG(nf);
        model.terminal_df(model.features(kept, g), dG);
        for (int j = 0; j < n; ++j) {
            double s = -psi[j];
            for (int q = 0; q < nf; ++q) s += dG[q] * w[q][j];
            grad[j] = s;
        }
    };
    std::mt19937_64 rng(0x5eedu);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> best_kept;
    double best_val = INFINITY;
    for (int start = 0; start < 8; ++start) {
        std::vector<double> x(n);
        for (int j = 0; j < n; ++j) {
            const double frac = start == 0 ? 1.0 : start == 1 ? 0.0 : start == 2 ? 0.5 : u(rng);
            x[j] = frac * m.mass()[j];
        }
        double fx = objective(x);
        std::vector<double> grad(n), trial(n);
        double step = 1.0;
        for (int it = 0; it < 5000; ++it) {
            gradient(x, grad);
            double stat = 0.0;
            for (int j = 0; j < n; ++j) {
                const double pj = std::clamp(x[j] - grad[j], 0.0, m.mass()[j]) - x[j];
                stat = std::max(stat, std::abs(pj));
            }
            if (stat < 1e-15) break;
            step = std::min(1.0, step * 4.0);
            bool moved = false;
            while (step > 1e-14) {
                double dec = 0.0;
                for (int j = 0; j < n; ++j) {
                    trial[j] = std::clamp(x[j] - step * grad[j], 0.0, m.mass()[j]);
                    dec += grad[j] * (x[j] - trial[j]);
                }
                const double ft = objective(trial);
                if (ft <= fx - 1e-4 * dec && ft < fx) {
                    x.swap(trial);
                    fx = ft;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if (!moved) break;
        }
        if (fx < best_val) {
            best_val = fx;
            best_kept = x;
        }
    }
    res.value = best_val;
    res.kept = GridMeasure(g, std::move(best_kept));
    return res;
}

/// Periodized smooth partition of unity with patch diameter <= delta.
class PartitionOfUnity {
public:
    explicit PartitionOfUnity(double delta) : delta_(delta) {
        if (!(delta > 0.0 && delta <= 1.0)) throw ParameterError("partition of unity: delta must lie in (0, 1]");
        n_ = static_cast<int>(std::ceil(2.0 / delta));
        radius_ = 0.5 * delta;
        // Patch integrals by midpoint quadrature; all patches are translates.
        const int q = 256 * n_;
        mass_.assign(n_, 0.0);
        std::vector<double> vals;
        for (int s = 0; s < q; ++s) {
            const double x = (s + 0.5) / q;
            weights(x, vals);
            for (int i = 0; i < n_; ++i) mass_[i] += vals[i] / q;
        }
        r_min_ = *std::min_element(mass_.begin(), mass_.end());
    }

    int size() const { return n_; }
    double delta() const { return delta_; }
    double anchor(int i) const { return double(i) / n_; }
    double patch_mass(int i) const { return mass_[i]; }
    /// r_delta = min_i integral of phi_i.
    double r_min() const { return r_min_; }

    double bump(double x, int i) const {
        const double y = circle_distance(x, anchor(i)) / radius_;
        return y < 1.0 ? std::exp(-1.0 / (1.0 - y * y)) : 0.0;
    }

    double phi(double x, int i) const {
        double s = 0.0;
        for (int k = 0; k < n_; ++k) s += bump(x, k);
        return bump(x, i) / s;
    }

    void weights(double x, std::vector<double>& out) const {
        out.assign(n_, 0.0);
        double s = 0.0;
        for (int k = 0; k < n_; ++k) s += (out[k] = bump(x, k));
        for (double& v : out) v /= s;
    }

private:
    double delta_;
    int n_;
    double radius_;
    std::vector<double> mass_;
    double r_min_;
};

/// Replaces G by the smoothed, tilted cost G~_{delta,eta}(m) = G_{delta,eta}(m) - C(delta + (1+n)eta + eta/r) m(T).
/// The perturbation average uses 64 antithetic pairs drawn from a smooth bump law on [-eta, eta].
inline ModelSpec mollify_terminal(const ModelSpec& model, double delta, double eta, int samples = 64,
                                  std::uint64_t seed = 0x6d6f6c6cu) {
    if (!model.terminal_is_cylindrical) throw UnsupportedModelError("mollify_terminal: terminal cost is not cylindrical");
    const PartitionOfUnity pu(delta);
    const double r = pu.r_min();
    if (!(eta > 0.0) || eta >= r) throw ParameterError("mollify_terminal: need 0 < eta < r_delta");
    const int n = pu.size();
    const auto rep = validate(model, 200, 0);
    const double C = rep.psi_lipschitz() + rep.terminal_lipschitz;
    const double tilt = C * (delta + (1 + n) * eta + eta / r);
    const int q0 = model.n_features();

    // Perturbation vectors y_s in [-eta, eta]^n, density proportional to (1 - (y/eta)^2)^2.
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0), v(0.0, 1.0);
    std::vector<std::vector<double>> ys;
    for (int s = 0; s < samples; ++s) {
        std::vector<double> y(n);
        for (double& yi : y) {
            for (;;) {
                const double t = u(rng);
                if (v(rng) <= (1 - t * t) * (1 - t * t)) {
                    yi = eta * t;
                    break;
                }
            }
        }
        ys.push_back(y);
        for (double& yi : y) yi = -yi;
        ys.push_back(std::move(y));
    }

    std::vector<std::vector<double>> w_anchor(q0, std::vector<double>(n));
    for (int q = 0; q < q0; ++q)
        for (int i = 0; i < n; ++i) w_anchor[q][i] = model.observable(q, pu.anchor(i));
    std::vector<double> leb(n);
    for (int i = 0; i < n; ++i) leb[i] = pu.patch_mass(i);
    const double keep = 1.0 - eta / r, spread = eta / r;

    ModelSpec out = model;
    out.name = model.name + "~";
    for (int i = 0; i < n; ++i) out.observables.push_back([pu, i](double x) { return pu.phi(x, i); });
    auto G = model.terminal;
    auto Gdf = model.terminal_df;

    // Features of sum_i (c_i + y_i) delta_{x_i} in the original coordinates.
    auto anchored = [=](FeatureView f, const std::vector<double>& y, Features& fe) {
        fe.assign(q0, 0.0);
        for (int i = 0; i < n; ++i) {
            const double a = keep * f[q0 + i] + spread * leb[i] + y[i];
            for (int q = 0; q < q0; ++q) fe[q] += a * w_anchor[q][i];
        }
    };
    out.terminal = [=](FeatureView f) {
        Features fe;
        double s = 0.0;
        for (const auto& y : ys) {
            anchored(f, y, fe);
            s += G(fe);
        }
        return s / ys.size() - tilt * f[0];
    };
    if (Gdf) {
        out.terminal_df = [=](FeatureView f, FeatureGrad d) {
            std::fill(d.begin(), d.end(), 0.0);
            Features fe, dg(q0);
            for (const auto& y : ys) {
                anchored(f, y, fe);
                Gdf(fe, dg);
                for (int i = 0; i < n; ++i) {
                    double s = 0.0;
                    for (int q = 0; q < q0; ++q) s += dg[q] * w_anchor[q][i];
                    d[q0 + i] += keep * s / ys.size();
                }
            }
            d[0] -= tilt;
        };
    } else {
        out.terminal_df = nullptr;
    }
    if (model.linear_terminal) {
        const auto g = model.linear_terminal->density;
        std::vector<double> g_anchor(n);
        double constant = model.linear_terminal->constant;
        for (int i = 0; i < n; ++i) {
            g_anchor[i] = g(pu.anchor(i));
            constant += spread * leb[i] * g_anchor[i];
        }
        out.linear_terminal = LinearTerminal{constant, [=](double x) {
                                                 std::vector<double> wts;
                                                 pu.weights(x, wts);
                                                 double s = 0.0;
                                                 for (int i = 0; i < n; ++i) s += wts[i] * g_anchor[i];
                                                 return keep * s - tilt;
                                             }};
    } else {
        out.linear_terminal.reset();
    }
    out.params["mollify_delta"] = delta;
    out.params["mollify_eta"] = eta;
    out.params["mollify_tilt"] = tilt;
    out.params["mollify_patches"] = n;
    return out;
}

}  // namespace meanstop
