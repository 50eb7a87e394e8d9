// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fails.
// An optional argument restricts the run (same filter semantics as `meanstop check --filter`).

#include <chrono>
#include <iostream>

#include "meanstop/experiment.hpp"

int main(int argc, char** argv) {
    using namespace meanstop;
    std::vector<std::string> filter;
    if (argc > 1) filter = detail::split_list(argv[1]);
    const int workers = resolve_workers(0);
    bool ok = true;
    for (const auto& c : acceptance_criteria(workers)) {
        if (!selected(c, filter)) continue;
        const auto start = std::chrono::steady_clock::now();
        CheckResult r;
        try {
            r = c.run();
        } catch (const std::exception& e) {
            r = {c.id, c.name, c.module, false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        ok = ok && r.pass;
        std::cout << (r.pass ? "PASS" : "FAIL") << " [" << r.id << "] " << r.name << ": " << r.detail << " ("
                  << detail::fixed(secs, 1) << " s)" << std::endl;
    }
    return ok ? 0 : 1;
}
