#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "skewresp/harness.hpp"

using namespace skewresp;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("skewresp-test-" + name);
    std::filesystem::remove_all(p);
    return p;
}

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    return ErrorKind::NumericalFailure;
}

std::string read(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
    auto c = config_from_json(ojson::object());
    EXPECT_EQ(c.K, 64);
    EXPECT_EQ(c.N, 256);
    EXPECT_EQ(c.J, 60);
    EXPECT_EQ(c.N_corr, 40);
    EXPECT_EQ(c.n_omega, 64);
    ASSERT_EQ(c.eps_grid.size(), 8u);
    EXPECT_DOUBLE_EQ(c.eps_grid.back(), 0.1 / 128);
    EXPECT_EQ(to_json(config_from_json(to_json(c))), to_json(c));
}

TEST(Config, StrictKeysAndTypes) {
    EXPECT_EQ(kind_of([] { config_from_json(ojson{{"fibre", {{"a", 0.1}}}}); }), ErrorKind::ConfigInvalid);
    EXPECT_EQ(kind_of([] { config_from_json(ojson{{"fiber", {{"d", 0.1}}}}); }), ErrorKind::ConfigInvalid);
    EXPECT_EQ(kind_of([] { config_from_json(ojson{{"spectral", {{"K", 32.5}}}}); }), ErrorKind::ConfigInvalid);
    EXPECT_EQ(kind_of([] { config_from_json(ojson{{"fiber", 3}}); }), ErrorKind::ConfigInvalid);
}

TEST(Config, Validation) {
    auto bad = [](ojson j) { return kind_of([&] { config_from_json(j); }); };
    EXPECT_EQ(bad({{"fiber", {{"a", 0.5}, {"c", 0.5}, {"b", 0.0}, {"eps_max", 1.0}}}}), ErrorKind::ConfigInvalid);
    EXPECT_EQ(bad({{"spectral", {{"K", 64}, {"N", 129}}}}), ErrorKind::ConfigInvalid);
    EXPECT_EQ(bad({{"grids", {{"eps_grid", {0.2, 0.1, 0.05}}}}}), ErrorKind::ConfigInvalid);
    EXPECT_EQ(bad({{"grids", {{"eps_grid", {0.1, 0.05}}}}}), ErrorKind::ConfigInvalid);
    EXPECT_EQ(bad({{"moments", {{"n_steps", 999}}}}), ErrorKind::ConfigInvalid);
    EXPECT_EQ(bad({{"moments", {{"trials", 10}}}}), ErrorKind::ConfigInvalid);
    EXPECT_EQ(bad({{"grids", {{"omega_samples", 0}}}}), ErrorKind::ConfigInvalid);
}

TEST(Config, Overrides) {
    auto c = load_config("", {"fiber.a=0.2", "grids.eps_grid=[0.1,0.01,0.001]", "output_dir=plain-text",
                              "moments.rng_seed=18446744073709551615"});
    EXPECT_DOUBLE_EQ(c.fiber.a, 0.2);
    EXPECT_EQ(c.eps_grid.size(), 3u);
    EXPECT_EQ(c.output_dir, "plain-text");
    EXPECT_EQ(c.rng_seed, 18446744073709551615ull);
    EXPECT_EQ(kind_of([] { load_config("", {"fiber.z=1"}); }), ErrorKind::ConfigInvalid);
    EXPECT_EQ(kind_of([] { load_config("", {"no-equals"}); }), ErrorKind::ConfigInvalid);
    EXPECT_EQ(kind_of([] { load_config("/nonexistent/config.json", {}); }), ErrorKind::ConfigInvalid);
}

TEST(Config, FileThenOverrides) {
    auto dir = scratch_dir("config");
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "c.json");
        out << R"({"spectral": {"K": 16, "N": 64}, "response": {"J": 20}})";
    }
    auto c = load_config((dir / "c.json").string(), {"response.J=25"});
    EXPECT_EQ(c.K, 16);
    EXPECT_EQ(c.J, 25);
}

TEST(Csv, Format) {
    CsvTable t({"name", "n", "x"});
    t.row("a", 3, 0.1);
    t.row(std::string("b"), 4, -2.5e-300);
    EXPECT_EQ(t.str(), "name,n,x\na,3,0.10000000000000001\nb,4,-2.5e-300\n");
}

TEST(Experiment, UnperturbedStabilityPasses) {
    auto dir = scratch_dir("flat");
    auto c = load_config("", {"fiber.b=0", "base.beta=0", "spectral.K=16", "spectral.N=64", "grids.omega_samples=2",
                              "output_dir=" + ojson(dir.string()).dump()});
    Experiment ex(c);
    auto r = ex.run("stability");
    ASSERT_NE(r.find("quenched_stability"), nullptr);
    EXPECT_TRUE(r.all_pass());
    EXPECT_TRUE(std::filesystem::exists(dir / "stability_curve.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "timings.json"));
    auto report = ojson::parse(read(dir / "report.json"));
    EXPECT_EQ(report["config"], to_json(c));
    EXPECT_FALSE(report.contains("timings"));
    auto csv = read(dir / "stability_curve.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "omega,eps,error,fitted_slope");
}

TEST(Experiment, UnderResolvedResponseWarns) {
    auto dir = scratch_dir("coarse");
    auto c = load_config("", {"spectral.K=8", "spectral.N=32", "grids.omega_samples=1",
                              "output_dir=" + ojson(dir.string()).dump()});
    Experiment ex(c);
    auto r = ex.run("response");
    bool found = false;
    for (const auto& w : r.warnings) found = found || w.find("under-resolved") != std::string::npos;
    EXPECT_TRUE(found);
}

TEST(Experiment, ResolvedResponseDoesNotWarn) {
    auto dir = scratch_dir("fine");
    auto c = load_config("", {"grids.omega_samples=1", "output_dir=" + ojson(dir.string()).dump()});
    Experiment ex(c);
    auto r = ex.run("response");
    EXPECT_TRUE(r.warnings.empty());
    EXPECT_TRUE(r.find("telescoping")->pass);
    EXPECT_TRUE(r.find("linear_response")->pass);
}

TEST(Experiment, UnknownSubcommand) {
    Experiment ex(load_config("", {"spectral.K=8", "spectral.N=32"}));
    EXPECT_EQ(kind_of([&] { ex.run("plot"); }), ErrorKind::ConfigInvalid);
}
