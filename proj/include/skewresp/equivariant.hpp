#pragma once

// Equivariant densities h_{w,e} with L_{w,e} h_{w,e} = h_{sigma_e w, e}, obtained
// by pulling a probability density back along the base orbit; the fiber decay
// rate of the cocycle on mean-zero fields; and the w-derivative of h_w.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <sstream>
#include <vector>

#include "skewresp/base_dynamics.hpp"
#include "skewresp/fit.hpp"
#include "skewresp/spectral.hpp"
#include "skewresp/transfer.hpp"

namespace skewresp {

struct EquivariantDensity {
    CirclePoint omega;
    double eps = 0.0;
    SpectralField field;
    int n_pullback = 0;
    double increment = 0.0;  // ||h^{(n+1)} - h^{(n)}||_w
    double residual = 0.0;   // ||L_{w,e} h_{w,e} - h_{sigma_e w, e}||_w
};

struct PullbackOptions {
    double tolerance = 1e-12;  // on the increment between depths n and n + 1
    int initial_depth = 16;
    int max_depth = 200;
    bool compute_residual = true;
};

namespace detail {

/// L^n_{sigma^{-n} w} u and L^{n+1}_{sigma^{-(n+1)} w} u, sharing the last n
/// operators.
inline std::pair<SpectralField, SpectralField> pullback_pair(const TransferFamily& family,
                                                             const RotationBase& base, CirclePoint omega,
                                                             double eps, int n, const SpectralField& seed) {
    const CirclePoint step = base.angle(eps);
    CirclePoint start = omega - step.times(n + 1);
    SpectralField deep = family.apply(start, eps, seed);
    SpectralField shallow = seed.resized(family.degree());
    CirclePoint point = start + step;
    for (int j = 0; j < n; ++j) {
        deep = family.apply(point, eps, deep);
        shallow = family.apply(point, eps, shallow);
        point = point + step;
    }
    return {std::move(shallow), std::move(deep)};
}

inline SpectralField pullback_field(const TransferFamily& family, const RotationBase& base,
                                    CirclePoint omega, double eps, int n, const SpectralField& seed) {
    const CirclePoint step = base.angle(eps);
    return cocycle_apply(family, base, omega - step.times(n), eps, n, seed.resized(family.degree()));
}

}  // namespace detail

/// h_{w,e} = L^n_{sigma_e^{-n} w, e} seed, at fixed depth n.
inline EquivariantDensity pullback_density(const TransferFamily& family, const RotationBase& base,
                                           CirclePoint omega, double eps, int n, const SpectralField& seed,
                                           const PullbackOptions& opts = {}) {
    if (n < 1) throw Error(ErrorKind::DegenerateInput, "pullback depth must be >= 1");
    if (std::abs(seed.mass() - 1.0) > 1e-12) {
        throw Error(ErrorKind::DegenerateInput, "pullback seed must have unit mass");
    }
    auto [shallow, deep] = detail::pullback_pair(family, base, omega, eps, n, seed);
    EquivariantDensity h;
    h.omega = omega;
    h.eps = eps;
    h.n_pullback = n;
    h.increment = w_norm(deep - shallow);
    h.field = std::move(deep);
    if (h.increment > opts.tolerance) {
        std::ostringstream os;
        os << "pullback increment " << h.increment << " at depth " << n << " exceeds " << opts.tolerance;
        throw Error(ErrorKind::NonConvergence, os.str());
    }
    if (opts.compute_residual) {
        // independent pullback at sigma_e w, not L applied to the same object
        CirclePoint next = omega + base.angle(eps);
        SpectralField target = detail::pullback_field(family, base, next, eps, n, seed);
        h.residual = w_norm(family.apply(omega, eps, h.field) - target);
    }
    return h;
}

/// Pullback with depth doubled from opts.initial_depth until the increment
/// meets opts.tolerance; the last attempt uses opts.max_depth.
inline EquivariantDensity pullback_density(const TransferFamily& family, const RotationBase& base,
                                           CirclePoint omega, double eps, const PullbackOptions& opts = {},
                                           std::optional<SpectralField> seed = std::nullopt) {
    SpectralField u = seed ? *seed : SpectralField::constant(family.degree(), 1.0);
    int n = std::max(1, opts.initial_depth);
    for (;;) {
        auto [shallow, deep] = detail::pullback_pair(family, base, omega, eps, n, u);
        double inc = w_norm(deep - shallow);
        if (inc <= opts.tolerance || n >= opts.max_depth) {
            return pullback_density(family, base, omega, eps, n, u, opts);
        }
        n = std::min(2 * n, opts.max_depth);
    }
}

/// Depth at which the pullback increment at (w, e) meets the tolerance.
inline int converged_depth(const TransferFamily& family, const RotationBase& base, CirclePoint omega,
                           double eps, const PullbackOptions& opts = {}) {
    PullbackOptions o = opts;
    o.compute_residual = false;
    return pullback_density(family, base, omega, eps, o).n_pullback;
}

/// h_{sigma_e^{-j} w, e} for j = 0..count-1, all from one forward sweep that
/// starts depth steps behind the farthest point.
inline std::vector<SpectralField> backward_orbit_densities(const TransferFamily& family,
                                                           const RotationBase& base, CirclePoint omega,
                                                           double eps, int count, int depth) {
    const CirclePoint step = base.angle(eps);
    std::vector<SpectralField> out(static_cast<std::size_t>(count));
    CirclePoint point = omega - step.times(count - 1 + depth);
    SpectralField h = SpectralField::constant(family.degree(), 1.0);
    for (int j = 0; j < depth; ++j) {
        h = family.apply(point, eps, h);
        point = point + step;
    }
    for (int j = count - 1; j >= 0; --j) {
        out[static_cast<std::size_t>(j)] = h;
        if (j > 0) {
            h = family.apply(point, eps, h);
            point = point + step;
        }
    }
    return out;
}

/// h_{sigma_e^k w, e} = L^k_{w,e} h_{w,e} for k = 0..count-1.
inline std::vector<SpectralField> forward_orbit_densities(const TransferFamily& family,
                                                          const RotationBase& base, CirclePoint omega,
                                                          double eps, const SpectralField& h, int count) {
    std::vector<SpectralField> out;
    out.reserve(static_cast<std::size_t>(count));
    out.push_back(h);
    const CirclePoint step = base.angle(eps);
    CirclePoint point = omega;
    for (int k = 1; k < count; ++k) {
        out.push_back(family.apply(point, eps, out.back()));
        point = point + step;
    }
    return out;
}

struct DecayEstimate {
    double lambda_hat = 0.0;
    double C_hat = 0.0;
    int n_first = 0;
    int n_last = 0;
    double fit_residual = 0.0;  // RMS log deviation over the fit window
    double bound_excess = 0.0;  // max_n log(envelope_n / (C_hat e^{-lambda_hat n})) down to the floor
    std::vector<double> envelope;  // n = 0..n_max
};

struct DecayOptions {
    double floor = 1e-12;            // relative to the envelope at n = 0
    double window_drop = 1e-3;       // fit window ends once the envelope has dropped by this factor
    double monotone_slack = 2.0;     // allowed growth factor of the envelope per step
    int base_samples = 16;           // stratified base points omega + i / M
    int low_modes = 4;               // single-mode trial fields k = 1..low_modes
    std::uint64_t seed = 20240611;
};

/// Mean-zero trial fields: single modes cos(2 pi k x + phase) for
/// k = 1..mode_count and for the dyadic frequencies 2^j above it, plus random
/// fields with coefficients of size k^{-2}. A negative mode_count takes every
/// mode up to K.
inline std::vector<SpectralField> decay_trial_fields(int K, int random_count, std::uint64_t seed,
                                                     int mode_count = -1) {
    if (mode_count < 0 || mode_count > K) mode_count = K;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> phase(0.0, two_pi);
    std::uniform_real_distribution<double> amp(0.0, 1.0);
    std::vector<SpectralField> trials;
    for (int k = 1; k <= mode_count; ++k) trials.push_back(SpectralField::mode(K, k, 1.0, phase(rng)));
    for (int k = 1; k <= K; k *= 2) {
        if (k > mode_count) trials.push_back(SpectralField::mode(K, k, 1.0, phase(rng)));
    }
    for (int t = 0; t < random_count; ++t) {
        SpectralField g(K);
        for (int k = 1; k <= K; ++k) {
            g.set_coeff(k, std::polar(amp(rng) / (static_cast<double>(k) * k), phase(rng)));
        }
        trials.push_back(std::move(g));
    }
    return trials;
}

/// Fits ||L^n g||_w / ||g||_s ~ C e^{-lambda n} on the upper envelope over
/// trial fields and over a stratified set of base points anchored at omega.
///
/// The trial fields are normalized in the strong (C^1) proxy: in the sup norm
/// alone the cocycle need not contract (for the doubling map a single high
/// mode keeps its sup norm while its frequency halves). The constants being
/// estimated are uniform in omega, so the envelope takes the sup over base
/// points too.
///
/// The envelope is not a single exponential: high modes first cascade down
/// at roughly the expansion rate, after which the resolved low modes mix
/// faster. The fit covers n = 1 until the envelope has dropped by
/// window_drop, which gives the slower early rate; bound_excess reports how
/// far the whole envelope, down to the floor, rises above the fitted bound.
inline DecayEstimate estimate_decay(const TransferFamily& family, const RotationBase& base, CirclePoint omega,
                                    double eps, int n_max, int trial_count, const DecayOptions& opts = {}) {
    if (n_max < 10) throw Error(ErrorKind::DegenerateInput, "decay fit needs n_max >= 10");
    if (opts.base_samples < 1) throw Error(ErrorKind::DegenerateInput, "decay fit needs base_samples >= 1");
    const int K = family.degree();
    const auto trials = decay_trial_fields(K, trial_count, opts.seed, opts.low_modes);
    if (trials.empty()) throw Error(ErrorKind::DegenerateInput, "no decay trial fields");
    std::vector<double> scale;
    std::vector<double> env(static_cast<std::size_t>(n_max) + 1, 0.0);
    for (const auto& g : trials) {
        scale.push_back(s_norm(g));
        env[0] = std::max(env[0], w_norm(g) / scale.back());
    }
    const double floor = opts.floor * env[0];
    const CirclePoint step = base.angle(eps);
    for (int i = 0; i < opts.base_samples; ++i) {
        CirclePoint point = omega + CirclePoint(static_cast<double>(i) / opts.base_samples);
        auto gs = trials;
        for (int n = 1; n <= n_max; ++n) {
            double top = 0.0;
            for (std::size_t t = 0; t < gs.size(); ++t) {
                gs[t] = family.apply(point, eps, gs[t]);
                top = std::max(top, w_norm(gs[t]) / scale[t]);
            }
            env[static_cast<std::size_t>(n)] = std::max(env[static_cast<std::size_t>(n)], top);
            point = point + step;
            // far below the floor nothing here can raise the envelope
            if (top < 1e-3 * floor) break;
        }
    }
    DecayEstimate est;
    est.envelope = env;
    auto at = [&](int n) { return env[static_cast<std::size_t>(n)]; };
    int to_floor = 0;
    while (to_floor + 1 <= n_max && at(to_floor + 1) > floor) ++to_floor;
    for (int n = 0; n < to_floor; ++n) {
        if (at(n + 1) > opts.monotone_slack * at(n)) {
            throw Error(ErrorKind::FitUnstable, "decay envelope grows along the fit window");
        }
    }
    const double cut = std::max(opts.window_drop * env[0], floor);
    int last = 0;
    while (last + 1 <= to_floor && at(last + 1) > cut) ++last;
    int first = 1;
    // too few points before the cut: use everything above the floor
    if (last - first + 1 < 3) last = to_floor;
    if (last - first + 1 < 3) first = 0;
    est.n_first = first;
    est.n_last = last;
    if (est.n_last - est.n_first + 1 < 2) {
        throw Error(ErrorKind::FitUnstable, "decay envelope reaches the floor immediately");
    }
    std::vector<double> xs, ys;
    for (int n = est.n_first; n <= est.n_last; ++n) {
        xs.push_back(n);
        ys.push_back(std::log(at(n)));
    }
    LineFit fit = fit_line(xs, ys);
    est.lambda_hat = -fit.slope;
    est.C_hat = std::exp(fit.intercept);
    est.fit_residual = fit.residual;
    if (!(est.lambda_hat > 0.0)) throw Error(ErrorKind::FitUnstable, "fitted decay rate is not positive");
    est.bound_excess = -std::numeric_limits<double>::infinity();
    for (int n = 0; n <= to_floor; ++n) {
        est.bound_excess = std::max(est.bound_excess, std::log(at(n)) - fit.intercept + est.lambda_hat * n);
    }
    return est;
}

/// d/dw h_w at e = 0, as the series
///   sum_{j=0}^{J} L^j_{sigma^{-j} w} (d_w L)_{sigma^{-(j+1)} w} h_{sigma^{-(j+1)} w}.
inline SpectralField omega_derivative(const TransferFamily& family, const RotationBase& base, CirclePoint omega,
                                      int J, int depth = 0) {
    if (J < 1) throw Error(ErrorKind::DegenerateInput, "series depth must be >= 1");
    if (depth == 0) depth = converged_depth(family, base, omega, 0.0);
    auto hs = backward_orbit_densities(family, base, omega, 0.0, J + 2, depth);
    const CirclePoint step = base.angle(0.0);
    // Horner: S_j = v_j + L_{sigma^{-(j+1)} w} S_{j+1}
    auto theta = [&](int j) { return omega - step.times(j + 1); };
    SpectralField acc = family.apply_d_omega(theta(J), 0.0, hs[static_cast<std::size_t>(J) + 1]);
    for (int j = J - 1; j >= 0; --j) {
        acc = family.apply(theta(j), 0.0, acc);
        acc += family.apply_d_omega(theta(j), 0.0, hs[static_cast<std::size_t>(j) + 1]);
    }
    return acc;
}

struct AdmissibilityThresholds {
    double norm_bound = 10.0;      // sup ||L f||_s / ||f||_s
    double contraction = 1.0;      // fitted derivative-seminorm ratio must be below this
    double positivity = 0.0;       // min of L^n f over cone samples must exceed this
};

struct AdmissibilityReport {
    double norm_ratio = 0.0;
    double contraction_ratio = 0.0;
    double positivity_min = 0.0;
    int n = 0;
    bool norm_pass = false;
    bool contraction_pass = false;
    bool positivity_pass = false;
    bool pass() const { return norm_pass && contraction_pass && positivity_pass; }
};

/// Empirical checks of the admissibility conditions on sampled (w, f):
/// a uniform single-step norm bound, a per-step contraction ratio of the
/// derivative seminorm under L^n, and a positive lower bound of L^n f for
/// nonnegative f with bounded relative variation.
inline AdmissibilityReport admissibility_diagnostics(const TransferFamily& family, const RotationBase& base,
                                                     double eps, int n, int sample_count,
                                                     const AdmissibilityThresholds& thr = {},
                                                     std::uint64_t seed = 7) {
    const int K = family.degree();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    AdmissibilityReport rep;
    rep.n = n;
    rep.positivity_min = std::numeric_limits<double>::infinity();
    double worst_ratio = 0.0;
    const CirclePoint step = base.angle(eps);
    for (int s = 0; s < sample_count; ++s) {
        CirclePoint omega(unit(rng));
        // cone sample: 1 + bounded smooth bump, positive with unit mass
        SpectralField f = SpectralField::constant(K, 1.0);
        for (int k = 1; k <= std::min(K, 6); ++k) {
            f.set_coeff(k, std::polar(0.4 * unit(rng) / (k * k), two_pi * unit(rng)));
        }
        rep.norm_ratio = std::max(rep.norm_ratio, s_norm(family.apply(omega, eps, f)) / s_norm(f));
        SpectralField g = f;
        CirclePoint point = omega;
        for (int j = 0; j < n; ++j) {
            g = family.apply(point, eps, g);
            point = point + step;
        }
        rep.positivity_min = std::min(rep.positivity_min, grid_min(g));
        double var0 = w_norm(f.derivative());
        double varn = w_norm(g.derivative());
        if (var0 > 0.0) worst_ratio = std::max(worst_ratio, varn / var0);
    }
    if (sample_count == 0) rep.positivity_min = 0.0;
    // per-step rate of the derivative seminorm contraction
    rep.contraction_ratio = n > 0 ? std::pow(worst_ratio, 1.0 / n) : worst_ratio;
    rep.norm_pass = rep.norm_ratio <= thr.norm_bound;
    rep.contraction_pass = rep.contraction_ratio < thr.contraction;
    rep.positivity_pass = rep.positivity_min > thr.positivity;
    return rep;
}

}  // namespace skewresp
