// skew-response <subcommand> --config path.json [--set key=value]... [--seed u64] [--out dir]

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "skewresp/harness.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Quenched and annealed linear response for random expanding circle maps"};
    std::string subcommand;
    std::string config_path;
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    std::string out;
    app.add_option("subcommand", subcommand, "diagnostics, stability, response, annealed, regularity, variance, moments or all")
        ->required()
        ->check(CLI::IsMember(skewresp::subcommands()));
    app.add_option("--config", config_path, "JSON config; missing keys take their defaults");
    app.add_option("--set", overrides, "dotted key=value override, applied after the config file");
    auto* seed_opt = app.add_option("--seed", seed, "moments.rng_seed");
    auto* out_opt = app.add_option("--out", out, "output_dir");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    skewresp::ExperimentConfig cfg;
    try {
        if (*seed_opt) overrides.push_back("moments.rng_seed=" + std::to_string(seed));
        if (*out_opt) overrides.push_back("output_dir=" + skewresp::ojson(out).dump());
        cfg = skewresp::load_config(config_path, overrides);
    } catch (const skewresp::Error& e) {
        std::cerr << e.what() << '\n';
        return 2;
    }

    try {
        skewresp::Experiment experiment(cfg);
        auto report = experiment.run(subcommand);
        for (const auto& f : report.flags) {
            std::cout << (f.pass ? "PASS " : "FAIL ") << f.name << '\n';
        }
        for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
        std::cout << "report: " << cfg.output_dir << "/report.json\n";
        if (!report.all_pass()) {
            for (const auto& name : report.failed()) std::cerr << "failed flag: " << name << '\n';
            return 3;
        }
    } catch (const skewresp::Error& e) {
        std::cerr << e.what() << '\n';
        return e.kind() == skewresp::ErrorKind::ConfigInvalid ? 2 : 3;
    }
    return 0;
}
