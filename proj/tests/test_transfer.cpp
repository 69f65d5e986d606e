#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "skewresp/base_dynamics.hpp"
#include "skewresp/equivariant.hpp"
#include "skewresp/transfer.hpp"

using namespace skewresp;

namespace {

SpectralField smooth_field(int K, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    SpectralField f = SpectralField::constant(K, 1.0);
    for (int k = 1; k <= std::min(K, 6); ++k) f.set_coeff(k, cplx(u(rng), u(rng)) * std::pow(0.5, k));
    return f;
}

cplx at(double x) { return std::polar(1.0, two_pi * x); }

// (L g)(x) = sum over preimages y of g(y) / T'(y)
double brute_force_transfer(const FiberParams& p, CirclePoint w, double e, const SpectralField& g, double x) {
    double s = 0.0;
    for (CirclePoint y : inverse_branches(p, w, e, CirclePoint(x))) {
        s += g.evaluate(at(y.value())) / eval_jet(p, w, e, y).dTdx;
    }
    return s;
}

OperatorMatrix difference_quotient(const OperatorMatrix& hi, const OperatorMatrix& lo, double h) {
    OperatorMatrix q = hi;
    for (std::size_t i = 0; i < q.entries.size(); ++i) q.entries[i] = (hi.entries[i] - lo.entries[i]) / (2.0 * h);
    return q;
}

OperatorMatrix richardson(const OperatorMatrix& q1, const OperatorMatrix& q2) {
    OperatorMatrix r = q2;
    for (std::size_t i = 0; i < r.entries.size(); ++i) r.entries[i] = (4.0 * q2.entries[i] - q1.entries[i]) / 3.0;
    return r;
}

}  // namespace

TEST(Transfer, DoublingMatrixIsTheModeHalving) {
    FiberParams p{0.0, 0.0, 0.0, 0.1};
    auto M = assemble_transfer(p, CirclePoint(0.3), 0.0, 16, 64);
    for (int r = -16; r <= 16; ++r) {
        for (int c = -16; c <= 16; ++c) {
            const double expect = (c % 2 == 0 && c / 2 == r) ? 1.0 : 0.0;
            ASSERT_NEAR(std::abs(M.at(r, c) - cplx(expect)), 0.0, 1e-14) << r << "," << c;
        }
    }
    auto one = apply(M, SpectralField::constant(16, 1.0));
    EXPECT_LT(one.max_coeff_distance(SpectralField::constant(16, 1.0)), 1e-14);
}

TEST(Transfer, MatchesBranchSum) {
    FiberParams p;
    TransferFamily fam(p, 64, 256);
    CirclePoint w(0.41);
    const double e = -0.037;
    auto g = smooth_field(64, 2);
    auto Lg = fam.apply(w, e, g);
    for (double x : {0.0, 0.123, 0.5, 0.77, 0.999}) {
        EXPECT_NEAR(Lg.evaluate(at(x)), brute_force_transfer(p, w, e, g, x), 1e-12);
    }
}

TEST(Transfer, MatrixFreeMatchesAssembled) {
    FiberParams p;
    TransferFamily fam(p, 32, 128);
    CirclePoint w(0.8);
    auto g = smooth_field(32, 8);
    for (auto kind : {OperatorKind::transfer, OperatorKind::d_eps, OperatorKind::d_omega}) {
        auto M = fam.assemble(w, 0.02, kind);
        SpectralField direct = kind == OperatorKind::transfer ? fam.apply(w, 0.02, g)
                               : kind == OperatorKind::d_eps  ? fam.apply_d_eps(w, 0.02, g)
                                                              : fam.apply_d_omega(w, 0.02, g);
        EXPECT_LT(direct.max_coeff_distance(apply(M, g)), 1e-13);
    }
}

TEST(Transfer, PreservesMass) {
    FiberParams p;
    TransferFamily fam(p, 64, 256);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0, worst_d = 0.0;
    for (int i = 0; i < 20; ++i) {
        CirclePoint w(u(rng));
        const double e = (2 * u(rng) - 1) * 0.1;
        for (int j = 0; j < 5; ++j) {
            auto g = smooth_field(64, 100 * i + j);
            worst = std::max(worst, std::abs(fam.apply(w, e, g).mass() - g.mass()));
            worst_d = std::max(worst_d, std::abs(fam.apply_d_eps(w, e, g).mass()));
            worst_d = std::max(worst_d, std::abs(fam.apply_d_omega(w, e, g).mass()));
        }
    }
    EXPECT_LE(worst, 1e-12);
    EXPECT_LE(worst_d, 1e-12);
}

TEST(Transfer, DerivativesVanishWithoutDependence) {
    auto d_eps = assemble_d_eps(FiberParams{0.3, 0.0, 0.3, 0.1}, CirclePoint(0.2), 0.05, 16, 64);
    EXPECT_LE(d_eps.max_abs_entry(), 1e-13);
    auto d_omega = assemble_d_omega(FiberParams{0.3, 1.0, 0.0, 0.1}, CirclePoint(0.2), 0.05, 16, 64);
    EXPECT_LE(d_omega.max_abs_entry(), 1e-13);
}

TEST(Transfer, DerivativesMatchDifferenceQuotients) {
    // The central quotient is second order; one Richardson step removes the
    // h^2 term, leaving roundoff.
    FiberParams p;
    const int K = 32, N = 128;
    CirclePoint w(0.61);
    const double e = 0.04, h = 1e-4;
    auto eps_at = [&](double s) { return assemble_transfer(p, w, e + s, K, N); };
    auto omega_at = [&](double s) { return assemble_transfer(p, w + CirclePoint(s), e, K, N); };
    auto check = [&](const OperatorMatrix& exact, auto shifted) {
        auto q1 = difference_quotient(shifted(h), shifted(-h), h);
        auto q2 = difference_quotient(shifted(h / 2), shifted(-h / 2), h / 2);
        EXPECT_NEAR(relative_max_entry_error(exact, q1) / relative_max_entry_error(exact, q2), 4.0, 0.05);
        EXPECT_LE(relative_max_entry_error(exact, richardson(q1, q2)), 1e-9);
    };
    check(assemble_d_eps(p, w, e, K, N), eps_at);
    check(assemble_d_omega(p, w, e, K, N), omega_at);
}

TEST(Transfer, DerivativesMatchAtLowResolution) {
    FiberParams p;
    const int K = 8, N = 64;
    CirclePoint w(0.25);
    const double e = -0.03, h = 1e-4;
    auto q = difference_quotient(assemble_transfer(p, w, e + h, K, N), assemble_transfer(p, w, e - h, K, N), h);
    EXPECT_LE(relative_max_entry_error(assemble_d_eps(p, w, e, K, N), q), 1e-6);
}

TEST(Transfer, CocycleComposition) {
    FiberParams p;
    RotationBase base;
    TransferFamily fam(p, 32, 128);
    auto g = smooth_field(32, 4);
    EXPECT_EQ(cocycle_apply(fam, base, CirclePoint(0.3), 0.01, 0, g).max_coeff_distance(g), 0.0);
    auto a = cocycle_apply(fam, base, CirclePoint(0.3), 0.01, 5, g);
    auto mid = cocycle_apply(fam, base, CirclePoint(0.3), 0.01, 2, g);
    auto b = cocycle_apply(fam, base, advance(base, 0.01, CirclePoint(0.3), 2), 0.01, 3, mid);
    EXPECT_EQ(a.max_coeff_distance(b), 0.0);
}

TEST(Transfer, SpectralAccuracyInK) {
    FiberParams p;
    RotationBase base;
    TransferFamily f32(p, 32, 128), f64(p, 64, 256);
    auto g = smooth_field(32, 6);
    auto a = f32.apply(CirclePoint(0.2), 0.05, g);
    auto b = f64.apply(CirclePoint(0.2), 0.05, g.resized(64));
    EXPECT_LE(a.max_coeff_distance(b.resized(32)), 1e-10);

    PullbackOptions o;
    o.compute_residual = false;
    auto h32 = pullback_density(f32, base, CirclePoint(0.2), 0.05, o).field;
    auto h64 = pullback_density(f64, base, CirclePoint(0.2), 0.05, o).field;
    EXPECT_LE(w_norm(h32.resized(64) - h64), 1e-10);
}

TEST(Transfer, CacheAndAudit) {
    TransferFamily fam(FiberParams{}, 16, 64, 4);
    auto g = smooth_field(16, 1);
    fam.apply(CirclePoint(0.1), 0.0, g);
    fam.apply(CirclePoint(0.1), 0.0, g);
    fam.apply_d_omega(CirclePoint(0.1), 0.0, g);
    auto a = fam.audit();
    EXPECT_EQ(a.transfer_built, 1u);
    EXPECT_EQ(a.transfer_applied, 2u);
    EXPECT_EQ(a.d_omega_applied, 1u);
    EXPECT_EQ(a.cache_hits, 2u);
    for (int i = 0; i < 6; ++i) fam.apply(CirclePoint(0.2 + 0.1 * i), 0.0, g);
    fam.apply(CirclePoint(0.1), 0.0, g);  // evicted, rebuilt
    EXPECT_EQ(fam.audit().transfer_built, 8u);
    fam.reset_audit();
    EXPECT_EQ(fam.audit().transfer_applied, 0u);
}

TEST(Transfer, RejectsAliasingGrid) {
    try {
        TransferFamily fam(FiberParams{}, 32, 64);
        FAIL() << "expected aliasing error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Aliasing);
    }
}
