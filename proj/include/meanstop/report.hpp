#pragma once

// Run reports: result tables (CSV), line charts (SVG), the JSON report and a small worker pool.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "meanstop/checks.hpp"
#include "meanstop/config.hpp"
#include "meanstop/torus.hpp"

namespace meanstop {

inline constexpr const char* kVersion = "0.1.0";

struct Table {
    std::string key;  ///< file is <experiment>.csv, or <experiment>_<key>.csv when set
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;
};

struct Series {
    std::string name;
    std::vector<double> x, y;
};

struct Chart {
    std::string key;  ///< file is <experiment>_<key>.svg
    std::string title, xlabel, ylabel;
    bool log_x = false, log_y = false;
    std::vector<Series> series;
};

struct RunReport {
    ExperimentConfig config;
    std::vector<Table> tables;
    std::vector<Chart> charts;
    std::vector<CheckResult> checks;
    double wall_seconds = 0.0;
    int workers = 1;
    std::vector<std::string> files;

    bool passed() const {
        return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
    }
};

/// Cells are written with 17 significant digits; NaN marks a failed cell.
inline std::string cell(double v) { return std::isnan(v) ? "nan" : format_real(v); }
inline std::string cell(long long v) { return std::to_string(v); }
inline std::string cell(int v) { return std::to_string(v); }
inline std::string cell(std::uint64_t v) { return std::to_string(v); }
inline std::string cell(const std::string& v) { return v; }
inline std::string cell(const char* v) { return v; }
inline std::string cell(bool v) { return v ? "1" : "0"; }

template <class... T>
std::vector<std::string> row(const T&... v) {
    return {cell(v)...};
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline void write_csv(std::ostream& os, const Table& t) {
    for (std::size_t j = 0; j < t.columns.size(); ++j) os << (j ? "," : "") << csv_escape(t.columns[j]);
    os << '\n';
    for (const auto& r : t.rows) {
        for (std::size_t j = 0; j < r.size(); ++j) os << (j ? "," : "") << csv_escape(r[j]);
        os << '\n';
    }
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string fixed(double v, int digits = 2) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

// Tick positions in plot coordinates (log10 already applied on log axes).
inline std::vector<double> ticks(double lo, double hi, bool log_axis) {
    std::vector<double> t;
    if (log_axis) {
        const int a = static_cast<int>(std::ceil(lo - 1e-9)), b = static_cast<int>(std::floor(hi + 1e-9));
        const int stride = std::max(1, (b - a + 1) / 6 + 1);
        for (int e = a; e <= b; e += stride) t.push_back(e);
        if (t.empty()) t = {lo, hi};
        return t;
    }
    const double span = hi - lo, raw = span / 5.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double m : {1.0, 2.0, 5.0, 10.0})
        if (m * mag >= raw) {
            step = m * mag;
            break;
        }
    for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * span; v += step) t.push_back(std::abs(v) < 1e-12 * span ? 0.0 : v);
    return t;
}

}  // namespace detail

/// Self-contained SVG line chart. Points that are not finite (or not positive on a log axis) are skipped.
inline void write_svg(std::ostream& os, const Chart& c) {
    const double W = 640, H = 420, L = 80, R = 170, T = 40, B = 60;
    auto tx = [&](double v) { return c.log_x ? std::log10(v) : v; };
    auto ty = [&](double v) { return c.log_y ? std::log10(v) : v; };
    auto usable = [&](double x, double y) {
        return std::isfinite(x) && std::isfinite(y) && (!c.log_x || x > 0.0) && (!c.log_y || y > 0.0);
    };
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : c.series)
        for (std::size_t i = 0; i < s.x.size(); ++i)
            if (usable(s.x[i], s.y[i])) {
                x0 = std::min(x0, tx(s.x[i]));
                x1 = std::max(x1, tx(s.x[i]));
                y0 = std::min(y0, ty(s.y[i]));
                y1 = std::max(y1, ty(s.y[i]));
            }
    if (!(x0 <= x1)) x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
    if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
    if (y1 - y0 < 1e-12 * std::max(1.0, std::abs(y0))) {
        const double pad = c.log_y ? 0.5 : std::max(1e-3, 0.1 * std::abs(y0));
        y0 -= pad, y1 += pad;
    } else {
        const double pad = 0.05 * (y1 - y0);
        y0 -= pad, y1 += pad;
    }
    const double pw = W - L - R, ph = H - T - B;
    auto px = [&](double v) { return L + (v - x0) / (x1 - x0) * pw; };
    auto py = [&](double v) { return T + ph - (v - y0) / (y1 - y0) * ph; };
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"};

    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
       << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << detail::xml_escape(c.title)
       << "</text>\n";
    os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (double v : detail::ticks(x0, x1, c.log_x)) {
        const double p = px(v);
        os << "<line x1=\"" << detail::fixed(p) << "\" y1=\"" << T + ph << "\" x2=\"" << detail::fixed(p) << "\" y2=\""
           << T + ph + 5 << "\" stroke=\"black\"/>\n";
        os << "<text x=\"" << detail::fixed(p) << "\" y=\"" << T + ph + 18 << "\" text-anchor=\"middle\">"
           << detail::tick_label(c.log_x ? std::pow(10.0, v) : v) << "</text>\n";
    }
    for (double v : detail::ticks(y0, y1, c.log_y)) {
        const double p = py(v);
        os << "<line x1=\"" << L - 5 << "\" y1=\"" << detail::fixed(p) << "\" x2=\"" << L << "\" y2=\"" << detail::fixed(p)
           << "\" stroke=\"black\"/>\n";
        os << "<text x=\"" << L - 8 << "\" y=\"" << detail::fixed(p + 4) << "\" text-anchor=\"end\">"
           << detail::tick_label(c.log_y ? std::pow(10.0, v) : v) << "</text>\n";
    }
    os << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">"
       << detail::xml_escape(c.xlabel + (c.log_x ? " (log)" : "")) << "</text>\n";
    os << "<text transform=\"translate(18," << T + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
       << detail::xml_escape(c.ylabel + (c.log_y ? " (log)" : "")) << "</text>\n";
    for (std::size_t k = 0; k < c.series.size(); ++k) {
        const Series& s = c.series[k];
        const char* color = palette[k % 8];
        std::string pts;
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!usable(s.x[i], s.y[i])) continue;
            const double a = px(tx(s.x[i])), b = py(ty(s.y[i]));
            pts += detail::fixed(a) + "," + detail::fixed(b) + " ";
            os << "<circle cx=\"" << detail::fixed(a) << "\" cy=\"" << detail::fixed(b) << "\" r=\"3\" fill=\"" << color
               << "\"/>\n";
        }
        if (!pts.empty())
            os << "<polyline points=\"" << pts << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\"/>\n";
        const double ly = T + 10 + 18 * k;
        os << "<line x1=\"" << L + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << L + pw + 32 << "\" y2=\"" << ly
           << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << L + pw + 38 << "\" y=\"" << ly + 4 << "\">" << detail::xml_escape(s.name) << "</text>\n";
    }
    os << "</svg>\n";
}

inline nlohmann::json config_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["kind"] = c.kind;
    j["seed"] = c.seed ? nlohmann::json(*c.seed) : nlohmann::json(nullptr);
    j["out"] = c.out;
    j["filter"] = c.filter;
    j["samples"] = c.samples;
    j["model"] = {{"name", c.model}, {"params", make_model(c.model, c.model_params).params}};
    j["grid"] = {{"n_cells", c.n_cells}, {"n_steps", c.n_steps}, {"k_max", c.k_max}, {"big_n", c.big_n}, {"t0", c.t0}};
    j["regularization"] = {{"theta", c.thetas}, {"delta", c.deltas}};
    j["montecarlo"] = {{"n_paths", c.n_paths}, {"dt_sim", c.dt_sim}};
    j["probes"] = {{"positions", c.positions}, {"count", c.probe_count}, {"mass", c.probe_mass}, {"measure", c.measure}};
    return j;
}

inline nlohmann::json report_json(const RunReport& r) {
    nlohmann::json j;
    j["tool"] = "meanstop";
    j["version"] = kVersion;
    j["config"] = config_json(r.config);
    j["wall_seconds"] = r.wall_seconds;
    j["workers"] = r.workers;
    j["tables"] = nlohmann::json::array();
    for (const auto& t : r.tables) j["tables"].push_back({{"key", t.key}, {"columns", t.columns}, {"rows", t.rows}});
    j["checks"] = nlohmann::json::array();
    for (const auto& c : r.checks)
        j["checks"].push_back(
            {{"id", c.id}, {"name", c.name}, {"module", c.module}, {"pass", c.pass}, {"detail", c.detail}});
    j["passed"] = r.passed();
    j["files"] = r.files;
    return j;
}

/// Writes every table, chart and the JSON report under cfg.out; records the file names in r.files.
inline void write_report(RunReport& r) {
    namespace fs = std::filesystem;
    const fs::path dir(r.config.out);
    fs::create_directories(dir);
    const std::string stem = r.config.kind;
    auto open = [&](const std::string& name) {
        std::ofstream os(dir / name, std::ios::binary);
        if (!os) throw StructuralError("cannot write " + (dir / name).string());
        r.files.push_back(name);
        return os;
    };
    for (const auto& t : r.tables) {
        auto os = open(stem + (t.key.empty() ? "" : "_" + t.key) + ".csv");
        write_csv(os, t);
    }
    for (const auto& c : r.charts) {
        auto os = open(stem + "_" + c.key + ".svg");
        write_svg(os, c);
    }
    r.files.push_back(stem + "_report.json");
    std::ofstream os(dir / (stem + "_report.json"), std::ios::binary);
    if (!os) throw StructuralError("cannot write report");
    os << report_json(r).dump(2) << '\n';
}

/// Worker count: explicit value if positive, else MEANSTOP_WORKERS, else 1.
inline int resolve_workers(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("MEANSTOP_WORKERS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1 || v > 1024)
            throw ParameterError("MEANSTOP_WORKERS must be a positive integer");
        return static_cast<int>(v);
    }
    return 1;
}

/// fn(i) for i in [0, n) on at most `workers` threads; results come back in index order and the
/// first exception (by index) is rethrown.
template <class Fn>
auto parallel_map(std::size_t n, int workers, Fn&& fn) -> std::vector<decltype(fn(std::size_t{0}))> {
    using R = decltype(fn(std::size_t{0}));
    std::vector<std::optional<R>> slots(n);
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i; (i = next++) < n;) {
            try {
                slots[i].emplace(fn(i));
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const int w = static_cast<int>(std::min<std::size_t>(std::max(1, workers), std::max<std::size_t>(n, 1)));
    if (w == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < w; ++t) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    std::vector<R> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (errors[i]) std::rethrow_exception(errors[i]);
        out.push_back(std::move(*slots[i]));
    }
    return out;
}

}  // namespace meanstop
