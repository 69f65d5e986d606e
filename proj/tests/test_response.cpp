#include <cmath>

#include <gtest/gtest.h>

#include "skewresp/response.hpp"

using namespace skewresp;

namespace {

const FiberParams kUnperturbed{0.3, 0.0, 0.3, 0.1};
const RotationBase kFixed{0.6180339887498949, 0.0};

const DecayEstimate& default_decay() {
    static const DecayEstimate d = [] {
        TransferFamily fam(FiberParams{}, 64, 256);
        return estimate_decay(fam, RotationBase{}, CirclePoint(0.1), 0.0, 40, 4);
    }();
    return d;
}

OperatorMatrix quotient(const OperatorMatrix& hi, const OperatorMatrix& lo, double h) {
    OperatorMatrix q = hi;
    for (std::size_t i = 0; i < q.entries.size(); ++i) q.entries[i] = (hi.entries[i] - lo.entries[i]) / (2.0 * h);
    return q;
}

}  // namespace

TEST(Lambda, ZeroWithoutPerturbation) {
    TransferFamily fam(kUnperturbed, 16, 64);
    for (int j : {0, 3}) EXPECT_LE(lambda_operator(fam, kFixed, CirclePoint(0.3), j).max_abs_entry(), 1e-13);
}

TEST(Lambda, FixedBaseIsTheEpsDerivative) {
    TransferFamily fam(FiberParams{}, 16, 64);
    const CirclePoint w(0.3);
    auto L = lambda_operator(fam, kFixed, w, 2);
    auto D = assemble_d_eps(FiberParams{}, lambda_base_point(kFixed, w, 2), 0.0, 16, 64);
    EXPECT_EQ(relative_max_entry_error(L, D), 0.0);
    EXPECT_EQ(fam.audit().d_omega_applied, 0u);
}

TEST(Lambda, DriftTermMatchesDifferenceQuotient) {
    // eps moves both the fiber map and its base point sigma_e^{-(j+1)} w; the
    // quotient of the full assembled map is extrapolated once to remove h^2.
    FiberParams p;
    RotationBase base;
    const int K = 32, N = 128;
    TransferFamily fam(p, K, N);
    const CirclePoint w(0.55);
    const double h = 1e-4;
    for (int j : {0, 3}) {
        auto at = [&](double s) { return assemble_transfer(p, advance(base, s, w, -(j + 1)), s, K, N); };
        auto q1 = quotient(at(h), at(-h), h);
        auto q2 = quotient(at(h / 2), at(-h / 2), h / 2);
        OperatorMatrix r = q2;
        for (std::size_t i = 0; i < r.entries.size(); ++i) r.entries[i] = (4.0 * q2.entries[i] - q1.entries[i]) / 3.0;
        EXPECT_LE(relative_max_entry_error(lambda_operator(fam, base, w, j), r), 1e-8) << "j = " << j;
    }
}

TEST(Lambda, ApplyMatchesAssembled) {
    TransferFamily fam(FiberParams{}, 32, 128);
    RotationBase base;
    SpectralField g = SpectralField::constant(32, 1.0);
    g.set_coeff(3, cplx(0.1, -0.2));
    auto M = lambda_operator(fam, base, CirclePoint(0.9), 4);
    EXPECT_LE(lambda_apply(fam, base, CirclePoint(0.9), 4, g).max_coeff_distance(apply(M, g)), 1e-13);
    EXPECT_NEAR(lambda_apply(fam, base, CirclePoint(0.9), 4, g).mass(), 0.0, 1e-13);
}

TEST(Telescoping, ZeroPerturbation) {
    TransferFamily fam(FiberParams{}, 32, 128);
    // Every telescoping term vanishes; what is left is the pullback floor.
    EXPECT_LE(telescoping_check(fam, RotationBase{}, CirclePoint(0.2), 0.0, 10), 1e-12);
}

TEST(Telescoping, DefaultResidual) {
    TransferFamily fam(FiberParams{}, 64, 256);
    RotationBase base;
    const double r20 = telescoping_check(fam, base, CirclePoint(0.2), 0.05, 20);
    const double r40 = telescoping_check(fam, base, CirclePoint(0.2), 0.05, 40);
    EXPECT_LE(r40, 1e-8);
    const double r5 = telescoping_check(fam, base, CirclePoint(0.2), 0.05, 5);
    const double r10 = telescoping_check(fam, base, CirclePoint(0.2), 0.05, 10);
    EXPECT_LE(r10, 2.0 * r5 * std::exp(-default_decay().lambda_hat * 5));
    EXPECT_LE(r20, std::max(2.0 * r10 * std::exp(-default_decay().lambda_hat * 10), 1e-12));
}

TEST(Gamma, ZeroWithoutPerturbation) {
    TransferFamily fam(kUnperturbed, 32, 128);
    auto g = gamma_series(fam, kFixed, CirclePoint(0.4), 30, default_decay());
    EXPECT_LE(w_norm(g.field), 1e-13);
    EXPECT_EQ(g.drift_applications, 0u);
    EXPECT_EQ(fam.audit().d_omega_applied, 0u);
}

TEST(Gamma, CentralDifferenceIsSecondOrder) {
    TransferFamily fam(FiberParams{}, 64, 256);
    RotationBase base;
    auto g = gamma_series(fam, base, CirclePoint(0.2), 60, default_decay());
    EXPECT_NEAR(g.field.mass(), 0.0, 1e-12);
    EXPECT_GT(g.drift_applications, 0u);
    const double h = 1e-3;
    auto cd = gamma_central_difference(fam, base, CirclePoint(0.2), g, h);
    EXPECT_NEAR(cd.ratio, 4.0, 0.8);
    auto hs = densities_over(fam, base, CirclePoint(0.2), {h, -h, h / 2, -h / 2});
    auto d1 = (1.0 / (2 * h)) * (hs[0] - hs[1]);
    auto d2 = (1.0 / h) * (hs[2] - hs[3]);
    auto richardson = (4.0 / 3.0) * d2 - (1.0 / 3.0) * d1;
    EXPECT_LE(w_norm(g.field - richardson), 1e-8);
    auto g55 = gamma_series(fam, base, CirclePoint(0.2), 55, default_decay());
    auto g40 = gamma_series(fam, base, CirclePoint(0.2), 40, default_decay());
    EXPECT_LE(w_norm(g55.field - g40.field), 1e-9);
}

TEST(Gamma, ToleranceStopsEarly) {
    TransferFamily fam(FiberParams{}, 32, 128);
    GammaOptions o;
    o.tolerance = 1e-6;
    auto g = gamma_series(fam, RotationBase{}, CirclePoint(0.2), 60, default_decay(), o);
    EXPECT_LT(g.J, 60);
    EXPECT_LE(g.tail_bound, 1e-6);
    EXPECT_TRUE(g.warnings.empty());
}

TEST(Stability, UnperturbedErrorsVanish) {
    TransferFamily fam(kUnperturbed, 32, 128);
    auto c = statstab_curve(fam, kFixed, CirclePoint(0.3), {0.1, 0.05, 0.025});
    for (double e : c.errors) EXPECT_LE(e, 1e-12);
}

TEST(Stability, FirstOrderBound) {
    // | ||h_e - h|| - |e| ||Gamma|| | <= ||h_e - h - e Gamma||
    TransferFamily fam(FiberParams{}, 64, 256);
    RotationBase base;
    const CirclePoint w(0.2);
    std::vector<double> grid = {0.01, 0.005, 0.0025, 0.00125};
    auto c = statstab_curve(fam, base, w, grid);
    auto gamma = gamma_series(fam, base, w, 60, default_decay());
    auto r = response_residual(fam, base, w, grid, gamma);
    const double g = w_norm(gamma.field);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        EXPECT_LE(std::abs(c.errors[i] - grid[i] * g), r.residuals[i] + 1e-14);
    }
    EXPECT_GE(c.fitted_slope, 0.95);
    EXPECT_GE(r.fitted_slope, 1.8);
}

TEST(Stability, GridValidation) {
    TransferFamily fam(FiberParams{}, 16, 64);
    EXPECT_THROW(statstab_curve(fam, RotationBase{}, CirclePoint(), {0.1, 0.05}), Error);
    EXPECT_THROW(statstab_curve(fam, RotationBase{}, CirclePoint(), {0.2, 0.05, 0.01}), Error);
    EXPECT_THROW(statstab_curve(fam, RotationBase{}, CirclePoint(), {0.05, 0.1, 0.01}), Error);
}

TEST(Annealed, Probabilities) {
    TransferFamily fam(FiberParams{}, 32, 128);
    EXPECT_NEAR(annealed_value(fam, RotationBase{}, [](CirclePoint, double) { return 1.0; }, 0.03, 16), 1.0, 1e-13);
    TransferFamily dbl(FiberParams{0.0, 0.0, 0.0, 0.1}, 16, 64);
    auto c = [](CirclePoint, double x) { return std::cos(two_pi * x); };
    EXPECT_NEAR(annealed_value(dbl, RotationBase{}, c, 0.03, 16), 0.0, 1e-14);
}

TEST(Annealed, ResponseIdentities) {
    TransferFamily fam(FiberParams{}, 32, 128);
    RotationBase base;
    auto one = annealed_response(fam, base, BaseMeasureFamily::haar(), [](CirclePoint, double) { return 1.0; }, 16,
                                 40, default_decay());
    EXPECT_NEAR(one.value, 0.0, 1e-13);

    TransferFamily flat(kUnperturbed, 32, 128);
    auto z = annealed_response(flat, kFixed, BaseMeasureFamily::haar(),
                               [](CirclePoint w, double x) { return std::cos(two_pi * (x + w.value())); }, 16, 40,
                               default_decay());
    EXPECT_LE(std::abs(z.value), 1e-13);

    auto phi = [](CirclePoint w, double x) { return std::cos(two_pi * (x + w.value())); };
    auto r = annealed_response(fam, base, BaseMeasureFamily::haar(), phi, 16, 40, default_decay());
    double quad = 0.0;
    for (double q : r.quenched) quad += q / 16.0;
    EXPECT_EQ(r.value, quad);
}

TEST(Annealed, BaseMeasureDerivativeIsAdded) {
    TransferFamily fam(FiberParams{}, 32, 128);
    BaseMeasureFamily m;
    // P_e with density 1 + e cos(2 pi w)
    m.derivative_functional = [](const BaseMeasureFamily::Observable& f) {
        double s = 0.0;
        for (auto q : haar_quadrature(32)) s += q.weight * std::cos(two_pi * q.node.value()) * f(q.node);
        return s;
    };
    auto phi = [](CirclePoint w, double x) { return std::cos(two_pi * x) * std::cos(two_pi * w.value()); };
    auto with = annealed_response(fam, RotationBase{}, m, phi, 16, 40, default_decay());
    auto without = annealed_response(fam, RotationBase{}, BaseMeasureFamily::haar(), phi, 16, 40, default_decay());
    EXPECT_NE(with.base_term, 0.0);
    EXPECT_NEAR(with.value, without.value + with.base_term, 1e-15);
}

TEST(Annealed, MatchesDifferenceQuotient) {
    TransferFamily fam(FiberParams{}, 64, 256);
    RotationBase base;
    auto phi = [](CirclePoint, double x) { return std::cos(two_pi * x); };
    auto r = annealed_response(fam, base, BaseMeasureFamily::haar(), phi, 32, 60, default_decay());
    const double h = 1e-3;
    const double fd = (annealed_value(fam, base, phi, h, 32) - annealed_value(fam, base, phi, -h, 32)) / (2 * h);
    EXPECT_LE(std::abs(r.value - fd) / std::abs(fd), 1e-3);
}
