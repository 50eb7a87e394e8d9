#pragma once

// Experiment configuration: sectioned key = value text, parsed with boost's INI reader and then
// checked against a fixed schema (unknown sections or keys are errors).

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "meanstop/errors.hpp"
#include "meanstop/model.hpp"

namespace meanstop {

inline const std::vector<std::string>& experiment_kinds() {
    static const std::vector<std::string> kinds{"validate-model", "envelope", "nparticle", "montecarlo", "meanfield",
                                                "ladder",         "converge", "lipschitz", "phi",        "check"};
    return kinds;
}

inline bool is_stochastic_kind(const std::string& kind) {
    return kind != "nparticle" && kind != "meanfield" && kind != "ladder";
}

struct ExperimentConfig {
    std::string kind;
    std::optional<std::uint64_t> seed;
    std::string out = "results";
    std::vector<std::string> filter;  ///< check kind only; empty = everything

    std::string model = "congestion";
    std::map<std::string, double> model_params;

    int n_cells = 32;
    int n_steps = 0;  ///< 0: ceil(T n_cells^2), the explicit-scheme limit
    int k_max = 1;
    std::vector<int> big_n{2};
    double t0 = 0.0;

    std::vector<double> thetas{0.0};
    std::vector<double> deltas{1e-3};

    int n_paths = 4000;
    double dt_sim = 0.0;  ///< 0: the hierarchy time step

    std::vector<double> positions{0.1, 0.6};
    int probe_count = 4;
    double probe_mass = 0.8;
    std::string measure = "bump";  ///< bump | uniform | random

    int samples = 200;

    ModelSpec build_model() const { return make_model(model, model_params); }

    int steps_for(double horizon_minus_t0) const {
        if (n_steps > 0) return n_steps;
        return std::max(1, static_cast<int>(std::ceil(horizon_minus_t0 * n_cells * n_cells - 1e-9)));
    }

    std::uint64_t seed_or_zero() const { return seed.value_or(0); }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        item = trim(item);
        if (item.empty()) throw ParameterError("config: empty list item in '" + s + "'");
        out.push_back(item);
    }
    if (out.empty()) throw ParameterError("config: empty list");
    return out;
}

inline double parse_real(const std::string& key, const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        throw ParameterError("config: " + key + " is not a number: '" + s + "'");
    }
    if (used != s.size() || !std::isfinite(v)) throw ParameterError("config: " + key + " is not a number: '" + s + "'");
    return v;
}

inline long long parse_integer(const std::string& key, const std::string& s) {
    std::size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(s, &used);
    } catch (const std::exception&) {
        throw ParameterError("config: " + key + " is not an integer: '" + s + "'");
    }
    if (used != s.size()) throw ParameterError("config: " + key + " is not an integer: '" + s + "'");
    return v;
}

inline int parse_positive(const std::string& key, const std::string& s) {
    const long long v = parse_integer(key, s);
    if (v <= 0 || v > 1000000000) throw ParameterError("config: " + key + " must be a positive integer");
    return static_cast<int>(v);
}

inline std::vector<double> parse_reals(const std::string& key, const std::string& s) {
    std::vector<double> out;
    for (const auto& item : split_list(s)) out.push_back(parse_real(key, item));
    return out;
}

}  // namespace detail

/// Checks list shapes and the per-kind requirements. Throws ParameterError.
inline void validate_config(const ExperimentConfig& c) {
    const auto& kinds = experiment_kinds();
    if (std::find(kinds.begin(), kinds.end(), c.kind) == kinds.end())
        throw ParameterError("config: unknown experiment kind '" + c.kind + "'");
    if (is_stochastic_kind(c.kind) && !c.seed) throw ParameterError("config: kind " + c.kind + " needs a seed");
    if (c.measure == "random" && !c.seed) throw ParameterError("config: random probe measure needs a seed");
    if (c.measure != "bump" && c.measure != "uniform" && c.measure != "random")
        throw ParameterError("config: probes.measure must be bump, uniform or random");
    if (c.big_n.empty() || c.thetas.empty() || c.deltas.empty() || c.positions.empty())
        throw ParameterError("config: lists must be nonempty");
    for (int n : c.big_n)
        if (n < 1) throw ParameterError("config: big_n entries must be positive");
    if (c.kind == "converge" || c.kind == "lipschitz") {
        if (c.k_max > 3) throw ParameterError("config: k_max must be at most 3 for " + c.kind);
        for (std::size_t i = 1; i < c.big_n.size(); ++i)
            if (!(c.big_n[i] > c.big_n[i - 1])) throw ParameterError("config: big_n must be ascending");
    }
    if (c.k_max < 1) throw ParameterError("config: k_max must be positive");
    if (c.n_cells < 2) throw ParameterError("config: n_cells must be at least 2");
    if (c.n_steps < 0) throw ParameterError("config: n_steps must be nonnegative");
    for (double t : c.thetas)
        if (t < 0.0) throw ParameterError("config: theta must be nonnegative");
    for (double d : c.deltas)
        if (!(d > 0.0)) throw ParameterError("config: delta must be positive");
    for (double x : c.positions)
        if (x < 0.0 || x >= 1.0) throw ParameterError("config: probe positions must lie in [0, 1)");
    if (!(c.probe_mass >= 0.0)) throw ParameterError("config: probes.mass must be nonnegative");
    if (c.probe_count < 1) throw ParameterError("config: probes.count must be positive");
    if (!(c.dt_sim >= 0.0)) throw ParameterError("config: dt_sim must be nonnegative");
    builtin_defaults(c.model);  // throws on unknown model names
}

/// Parses config text. `kind_override` (the CLI positional argument) wins over [experiment] kind,
/// but the two must agree when both are given.
inline ExperimentConfig parse_config(std::istream& in, const std::string& kind_override = "") {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ParameterError(std::string("config: ") + e.what());
    }
    ExperimentConfig c;
    std::string kind;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty())
            throw ParameterError("config: key '" + section + "' outside any section");
        for (const auto& [key, node] : body) {
            const std::string v = detail::trim(node.data());
            const std::string where = section + "." + key;
            if (v.empty()) throw ParameterError("config: " + where + " has no value");
            if (section == "experiment") {
                if (key == "kind") kind = v;
                else if (key == "seed") {
                    const long long s = detail::parse_integer(where, v);
                    if (s < 0) throw ParameterError("config: seed must be nonnegative");
                    c.seed = static_cast<std::uint64_t>(s);
                } else if (key == "out") c.out = v;
                else if (key == "samples") c.samples = detail::parse_positive(where, v);
                else if (key == "filter") c.filter = detail::split_list(v);
                else throw ParameterError("config: unknown key " + where);
            } else if (section == "model") {
                if (key == "name") c.model = v;
                else c.model_params[key] = detail::parse_real(where, v);
            } else if (section == "grid") {
                if (key == "n_cells") c.n_cells = detail::parse_positive(where, v);
                else if (key == "n_steps") c.n_steps = detail::parse_positive(where, v);
                else if (key == "k_max") c.k_max = detail::parse_positive(where, v);
                else if (key == "t0") c.t0 = detail::parse_real(where, v);
                else if (key == "big_n") {
                    c.big_n.clear();
                    for (const auto& s : detail::split_list(v)) c.big_n.push_back(detail::parse_positive(where, s));
                } else throw ParameterError("config: unknown key " + where);
            } else if (section == "regularization") {
                if (key == "theta") c.thetas = detail::parse_reals(where, v);
                else if (key == "delta") c.deltas = detail::parse_reals(where, v);
                else throw ParameterError("config: unknown key " + where);
            } else if (section == "montecarlo") {
                if (key == "n_paths") c.n_paths = detail::parse_positive(where, v);
                else if (key == "dt_sim") c.dt_sim = detail::parse_real(where, v);
                else throw ParameterError("config: unknown key " + where);
            } else if (section == "probes") {
                if (key == "positions") c.positions = detail::parse_reals(where, v);
                else if (key == "count") c.probe_count = detail::parse_positive(where, v);
                else if (key == "mass") c.probe_mass = detail::parse_real(where, v);
                else if (key == "measure") c.measure = v;
                else throw ParameterError("config: unknown key " + where);
            } else {
                throw ParameterError("config: unknown section [" + section + "]");
            }
        }
    }
    if (!kind_override.empty()) {
        if (!kind.empty() && kind != kind_override)
            throw ParameterError("config: file is for kind '" + kind + "', command line asks for '" + kind_override + "'");
        kind = kind_override;
    }
    if (kind.empty()) throw ParameterError("config: no experiment kind");
    c.kind = kind;
    // Model parameters are checked here so that typos surface before any solve.
    make_model(c.model, c.model_params);
    validate_config(c);
    return c;
}

inline ExperimentConfig parse_config_string(const std::string& text, const std::string& kind_override = "") {
    std::istringstream in(text);
    return parse_config(in, kind_override);
}

inline ExperimentConfig load_config(const std::string& path, const std::string& kind_override = "") {
    std::ifstream in(path);
    if (!in) throw ParameterError("config: cannot open " + path);
    return parse_config(in, kind_override);
}

}  // namespace meanstop
