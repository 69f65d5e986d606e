// Runs "all" twice with the default configuration and prints one line per
// acceptance criterion. Exit status is nonzero if any criterion fails.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "skewresp/harness.hpp"

namespace fs = std::filesystem;
using namespace skewresp;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Every output except the wall-clock timings must match byte for byte.
bool identical_outputs(const fs::path& a, const fs::path& b, std::string& detail) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(a)) names.push_back(e.path().filename().string());
    std::size_t compared = 0;
    for (const auto& n : names) {
        if (n == "timings.json") continue;
        if (!fs::exists(b / n) || slurp(a / n) != slurp(b / n)) {
            detail = n + " differs";
            return false;
        }
        ++compared;
    }
    std::size_t other = 0;
    for (const auto& e : fs::directory_iterator(b)) other += e.path().filename() != "timings.json";
    if (other != compared) {
        detail = "file sets differ";
        return false;
    }
    detail = std::to_string(compared) + " files identical";
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "skewresp-acceptance";
    fs::remove_all(root);
    // Both runs use the identical configuration; the first run's files are
    // set aside before the second one overwrites them.
    std::vector<RunReport> reports;
    ExperimentConfig cfg;
    cfg.output_dir = (root / "out").string();
    for (int run = 0; run < 2; ++run) {
        Experiment ex(cfg);
        reports.push_back(ex.run("all"));
        if (run == 0) fs::copy(root / "out", root / "first", fs::copy_options::recursive);
    }
    const RunReport& r = reports[0];

    const std::vector<std::pair<int, std::string>> criteria = {
        {1, "mass_conservation"},     {2, "equivariance"},      {3, "fiber_decay"},
        {4, "derivative_operators"},  {5, "telescoping"},       {6, "quenched_stability"},
        {7, "linear_response"},       {8, "omega_regularity"},  {9, "annealed_response"},
        {10, "green_kubo_monte_carlo"}, {11, "variance_derivative"}, {12, "moment_ratios"},
        {13, "fixed_base"},
    };
    bool all = true;
    for (const auto& [id, name] : criteria) {
        const Flag* f = r.find(name);
        const bool pass = f && f->pass;
        all = all && pass;
        std::printf("criterion %2d %-24s %s\n", id, name.c_str(), pass ? "PASS" : "FAIL");
    }
    std::string detail;
    const bool same = identical_outputs(root / "first", root / "out", detail);
    all = all && same;
    std::printf("criterion 14 %-24s %s (%s)\n", "determinism", same ? "PASS" : "FAIL", detail.c_str());

    for (const auto& f : r.flags) {
        if (!f.pass) std::printf("  failed flag %s: %s\n", f.name.c_str(), f.values.dump().c_str());
    }
    for (const auto& w : r.warnings) std::printf("  warning: %s\n", w.c_str());
    double total = 0.0;
    for (const auto& rep : reports) {
        for (const auto& [k, v] : rep.timings) total += v;
    }
    std::printf("wall clock for both runs: %.1f s\n", total);
    return all ? 0 : 1;
}
