#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "skewresp/fit.hpp"
#include "skewresp/spectral.hpp"

using namespace skewresp;

namespace {

SpectralField random_field(int K, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    SpectralField f = SpectralField::constant(K, u(rng));
    for (int k = 1; k <= K; ++k) f.set_coeff(k, cplx(u(rng), u(rng)));
    return f;
}

cplx at(double x) { return std::polar(1.0, two_pi * x); }

}  // namespace

TEST(Spectral, AnalyzeConstantAndCosine) {
    GridFunction one{std::vector<double>(32, 1.0)};
    auto c = analyze(one, 8);
    EXPECT_NEAR(std::abs(c.coeff(0) - cplx(1.0)), 0.0, 1e-15);
    for (int k = 1; k <= 8; ++k) EXPECT_LT(std::abs(c.coeff(k)), 1e-15);

    GridFunction cosine;
    for (int m = 0; m < 32; ++m) cosine.values.push_back(std::cos(two_pi * GridFunction::node(m, 32)));
    auto f = analyze(cosine, 8);
    EXPECT_NEAR(f.coeff(1).real(), 0.5, 1e-15);
    EXPECT_NEAR(f.coeff(-1).real(), 0.5, 1e-15);
    EXPECT_LT(std::abs(f.coeff(2)), 1e-15);
}

TEST(Spectral, RoundTrip) {
    auto f = random_field(64, 3);
    auto g = analyze(synthesize(f, 256), 64);
    EXPECT_LE(f.max_coeff_distance(g), 1e-13);
}

TEST(Spectral, AliasedGridRejected) {
    try {
        analyze(GridFunction{std::vector<double>(33, 0.0)}, 16);
        FAIL() << "expected aliasing error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Aliasing);
    }
}

TEST(Spectral, EvaluateMatchesSynthesis) {
    auto f = random_field(12, 9);
    auto g = synthesize(f, 64);
    for (int m = 0; m < 64; m += 7) EXPECT_NEAR(f.evaluate(at(m / 64.0)), g.values[static_cast<std::size_t>(m)], 1e-13);
    auto [v, d] = f.evaluate_with_derivative(at(0.3));
    EXPECT_NEAR(v, f.evaluate(at(0.3)), 1e-13);
    const double h = 1e-6;
    EXPECT_NEAR(d, (f.evaluate(at(0.3 + h)) - f.evaluate(at(0.3 - h))) / (2 * h), 1e-6 * std::max(1.0, std::abs(d)));
}

TEST(Spectral, PairIsTheLebesgueIntegralOfTheProduct) {
    auto f = random_field(8, 4), g = random_field(8, 5);
    const int M = 4096;
    double ref = 0.0;
    for (int m = 0; m < M; ++m) ref += f.evaluate(at(double(m) / M)) * g.evaluate(at(double(m) / M)) / M;
    EXPECT_NEAR(pair(f, g), ref, 1e-12);
    EXPECT_NEAR(f.mass(), pair(f, SpectralField::constant(8, 1.0)), 1e-14);
}

TEST(Spectral, MultiplyIsExactForBandLimitedProducts) {
    SpectralField f(8), g(8);
    f.set_coeff(2, cplx(0.5, 0.0));  // cos(4 pi x)
    g.set_coeff(3, cplx(0.5, 0.0));  // cos(6 pi x)
    auto p = multiply(f, g);
    // cos a cos b = (cos(a + b) + cos(a - b)) / 2
    EXPECT_NEAR(p.coeff(5).real(), 0.25, 1e-15);
    EXPECT_NEAR(p.coeff(1).real(), 0.25, 1e-15);
    EXPECT_LT(std::abs(p.coeff(0)), 1e-15);
    EXPECT_THROW(multiply(f, g, 20), Error);
}

TEST(Spectral, Norms) {
    SpectralField c(4);
    c.set_coeff(1, cplx(0.5, 0.0));
    EXPECT_NEAR(w_norm(c), 1.0, 1e-15);
    EXPECT_NEAR(s_norm(c), 1.0 + two_pi, 1e-12);
    EXPECT_NEAR(grid_min(c), -1.0, 1e-15);
}

TEST(Spectral, ProjectCapturesAnalyticFunctions) {
    auto f = project([](double x) { return std::exp(std::sin(two_pi * x)); }, 32);
    EXPECT_NEAR(f.mass(), std::cyl_bessel_i(0.0, 1.0), 1e-14);
    EXPECT_NEAR(f.evaluate(at(0.17)), std::exp(std::sin(two_pi * 0.17)), 1e-13);
}

TEST(Fit, LogLogFixtures) {
    std::vector<double> xs = {0.1, 0.05, 0.025, 0.0125, 0.00625};
    auto one = fit_loglog(xs, xs);
    EXPECT_NEAR(one.slope, 1.0, 1e-12);
    EXPECT_NEAR(one.residual, 0.0, 1e-12);

    std::vector<double> sq;
    for (double x : xs) sq.push_back(x * x);
    EXPECT_NEAR(fit_loglog(xs, sq).slope, 2.0, 1e-12);

    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> noise(-1e-3, 1e-3);
    std::vector<double> ys;
    for (double x : xs) ys.push_back(3.0 * std::pow(x, 1.5) * (1.0 + noise(rng)));
    EXPECT_NEAR(fit_loglog(xs, ys).slope, 1.5, 0.01);
}

TEST(Fit, RejectsNonPositiveValues) {
    std::vector<double> xs = {1.0, 2.0, 3.0}, ys = {1.0, 0.0, 2.0};
    try {
        fit_loglog(xs, ys);
        FAIL() << "expected degenerate input";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::DegenerateInput);
    }
    std::vector<double> two = {1.0, 2.0};
    EXPECT_THROW(fit_loglog(two, two), Error);
}
