// meanstop <experiment-kind> --config <path> [--out <dir>] [--filter <name>] [--workers <n>]
// Exit codes: 0 all checks passed, 1 a check failed, 2 usage or configuration error.

#include <iostream>

#include "CLI11.hpp"
#include "meanstop/experiment.hpp"

int main(int argc, char** argv) {
    using namespace meanstop;
    CLI::App app{"Optimal stopping with mean-field interaction: experiments and checks"};
    std::string kind, config, out, filter;
    int workers = 0;
    std::string kinds;
    for (const auto& k : experiment_kinds()) kinds += (kinds.empty() ? "" : ", ") + k;
    app.add_option("kind", kind, "experiment kind: " + kinds)->required()->check(CLI::IsMember(experiment_kinds()));
    app.add_option("-c,--config", config, "configuration file")->required()->check(CLI::ExistingFile);
    app.add_option("-o,--out", out, "output directory (overrides [experiment] out)");
    app.add_option("-f,--filter", filter, "check kind: comma-separated modules, ids or names to run");
    app.add_option("-w,--workers", workers, "worker threads (default: MEANSTOP_WORKERS or 1)")
        ->check(CLI::Range(1, 1024));
    app.set_version_flag("--version", kVersion);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    RunReport report;
    try {
        ExperimentConfig cfg = load_config(config, kind);
        if (!out.empty()) cfg.out = out;
        if (!filter.empty()) cfg.filter = detail::split_list(filter);
        workers = resolve_workers(workers);
        report = run_experiment(cfg, workers);
        write_report(report);
    } catch (const ParameterError& e) {
        std::cerr << "meanstop: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "meanstop: " << e.what() << '\n';
        return 1;
    }

    for (const auto& c : report.checks)
        std::cout << (c.pass ? "PASS " : "FAIL ") << c.id << ' ' << c.name << ": " << c.detail << '\n';
    std::cout << "wrote " << report.files.size() << " files to " << report.config.out << " in "
              << detail::fixed(report.wall_seconds, 1) << " s\n";
    if (!report.passed()) {
        std::cerr << "failing checks:";
        for (const auto& c : report.checks)
            if (!c.pass) std::cerr << ' ' << c.id;
        std::cerr << '\n';
        return 1;
    }
    return 0;
}
