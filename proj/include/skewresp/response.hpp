#pragma once

// Quenched stability and linear response of h_{w,e}, the telescoping identity
// behind them, and the annealed (Haar-averaged) versions.
//
// The response series is
//
//   Gamma_w = sum_j L^j_{sigma^{-j} w} Lambda_{w,j} h_{sigma^{-(j+1)} w},
//   Lambda_{w,j} = d/de L_{sigma_e^{-(j+1)} w, e} at e = 0,
//
// where the e-derivative also moves the base point: by the chain rule
// Lambda_{w,j} = d_e L + (-(j+1) beta) d_w L at theta_j = sigma^{-(j+1)} w.

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "skewresp/base_dynamics.hpp"
#include "skewresp/equivariant.hpp"
#include "skewresp/fit.hpp"
#include "skewresp/parallel.hpp"
#include "skewresp/spectral.hpp"
#include "skewresp/transfer.hpp"

namespace skewresp {

/// theta_j = sigma^{-(j+1)} w at e = 0.
inline CirclePoint lambda_base_point(const RotationBase& base, CirclePoint omega, int j) {
    return advance(base, 0.0, omega, -(static_cast<std::int64_t>(j) + 1));
}

/// Lambda_{w,j} g. With beta = 0 the d_w L operator is never touched.
inline SpectralField lambda_apply(const TransferFamily& family, const RotationBase& base, CirclePoint omega, int j,
                                  const SpectralField& g) {
    if (j < 0) throw Error(ErrorKind::DegenerateInput, "Lambda index must be >= 0");
    const CirclePoint theta = lambda_base_point(base, omega, j);
    SpectralField out = family.apply_d_eps(theta, 0.0, g);
    const double drift = orbit_eps_derivative(base, -(static_cast<std::int64_t>(j) + 1));
    if (drift != 0.0) out.axpy(drift, family.apply_d_omega(theta, 0.0, g));
    return out;
}

inline OperatorMatrix lambda_operator(const TransferFamily& family, const RotationBase& base, CirclePoint omega,
                                      int j) {
    if (j < 0) throw Error(ErrorKind::DegenerateInput, "Lambda index must be >= 0");
    const CirclePoint theta = lambda_base_point(base, omega, j);
    OperatorMatrix M = family.assemble(theta, 0.0, OperatorKind::d_eps);
    const double drift = orbit_eps_derivative(base, -(static_cast<std::int64_t>(j) + 1));
    if (drift != 0.0) {
        OperatorMatrix D = family.assemble(theta, 0.0, OperatorKind::d_omega);
        for (std::size_t i = 0; i < M.entries.size(); ++i) M.entries[i] += drift * D.entries[i];
    }
    M.omega = omega;
    return M;
}

struct ResponseTerm {
    CirclePoint omega;
    SpectralField field;
    int J = 0;
    double tail_bound = 0.0;
    std::uint64_t drift_applications = 0;  // d_w L applications while summing
    std::vector<std::string> warnings;
};

struct GammaOptions {
    double tolerance = 0.0;  // stop at the first J whose tail bound is below this; 0 sums to J
    int depth = 0;           // pullback depth for h; 0 picks it adaptively
};

/// C (J + 2) e^{-lambda J} / (1 - e^{-lambda}); the (J + 2) covers the linear
/// growth of Lambda_{w,j} in j.
inline double gamma_tail_bound(const DecayEstimate& decay, int J) {
    const double q = std::exp(-decay.lambda_hat);
    return decay.C_hat * (J + 2) * std::pow(q, J) / (1.0 - q);
}

inline ResponseTerm gamma_series(const TransferFamily& family, const RotationBase& base, CirclePoint omega, int J,
                                 const DecayEstimate& decay, const GammaOptions& opts = {}) {
    if (J < 1) throw Error(ErrorKind::DegenerateInput, "series depth must be >= 1");
    ResponseTerm term;
    term.omega = omega;
    int used = J;
    if (opts.tolerance > 0.0) {
        for (int j = 1; j <= J; ++j) {
            if (gamma_tail_bound(decay, j) <= opts.tolerance) {
                used = j;
                break;
            }
        }
    }
    term.J = used;
    term.tail_bound = gamma_tail_bound(decay, used);
    if (opts.tolerance > 0.0 && term.tail_bound > opts.tolerance) {
        std::ostringstream os;
        os << "response tail bound " << term.tail_bound << " exceeds tolerance " << opts.tolerance << " at J = " << used;
        term.warnings.push_back(os.str());
    }
    const int depth = opts.depth > 0 ? opts.depth : converged_depth(family, base, omega, 0.0);
    auto hs = backward_orbit_densities(family, base, omega, 0.0, used + 2, depth);
    const auto before = family.audit().d_omega_applied;
    // Horner from the deepest term: S_j = Lambda_j h_{j+1} + L_{theta_j} S_{j+1}
    SpectralField acc = lambda_apply(family, base, omega, used, hs[static_cast<std::size_t>(used) + 1]);
    for (int j = used - 1; j >= 0; --j) {
        acc = family.apply(lambda_base_point(base, omega, j), 0.0, acc);
        acc += lambda_apply(family, base, omega, j, hs[static_cast<std::size_t>(j) + 1]);
    }
    term.drift_applications = family.audit().d_omega_applied - before;
    term.field = std::move(acc);
    return term;
}

/// || sum_{j<=J} L^j_{sigma_e^{-j} w, e} (L_{sigma_e^{-(j+1)} w, e} - L_{sigma^{-(j+1)} w}) h_{sigma^{-(j+1)} w}
///     - (h_{w,e} - h_w) ||_w
inline double telescoping_check(const TransferFamily& family, const RotationBase& base, CirclePoint omega,
                                double eps, int J, int depth = 0) {
    if (J < 1) throw Error(ErrorKind::DegenerateInput, "series depth must be >= 1");
    if (depth == 0) depth = std::max(converged_depth(family, base, omega, 0.0), converged_depth(family, base, omega, eps));
    auto h0 = backward_orbit_densities(family, base, omega, 0.0, J + 2, depth);
    auto he = backward_orbit_densities(family, base, omega, eps, 1, depth);
    auto term = [&](int j) {
        auto jj = -(static_cast<std::int64_t>(j) + 1);
        const auto& h = h0[static_cast<std::size_t>(j) + 1];
        return family.apply(advance(base, eps, omega, jj), eps, h) - family.apply(advance(base, 0.0, omega, jj), 0.0, h);
    };
    SpectralField acc = term(J);
    for (int j = J - 1; j >= 0; --j) {
        acc = family.apply(advance(base, eps, omega, -(static_cast<std::int64_t>(j) + 1)), eps, acc);
        acc += term(j);
    }
    return w_norm(acc - (he[0] - h0[0]));
}

struct StabilityCurve {
    std::vector<double> eps_grid;
    std::vector<double> errors;   // ||h_{w,e} - h_w||_w
    double fitted_slope = std::numeric_limits<double>::quiet_NaN();
    double fit_residual = std::numeric_limits<double>::quiet_NaN();
};

inline void check_eps_grid(const FiberParams& params, const std::vector<double>& grid) {
    if (grid.size() < 3) throw Error(ErrorKind::DegenerateInput, "eps grid needs >= 3 points");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        double e = std::abs(grid[i]);
        if (e == 0.0 || e > params.eps_max) {
            throw Error(ErrorKind::ParameterOutOfRange, "eps grid values must be nonzero with |eps| <= eps_max");
        }
        if (i > 0 && !(e < std::abs(grid[i - 1]))) {
            throw Error(ErrorKind::DegenerateInput, "eps grid must be strictly decreasing in |eps|");
        }
    }
}

/// Slope of the log-log fit when every value is positive; NaN otherwise
/// (exactly unperturbed families give zero errors).
inline LineFit loglog_or_nan(const std::vector<double>& xs, const std::vector<double>& ys) {
    for (double y : ys) {
        if (!(y > 0.0)) {
            double nan = std::numeric_limits<double>::quiet_NaN();
            return {nan, nan, nan};
        }
    }
    return fit_loglog(xs, ys);
}

inline std::vector<double> abs_values(const std::vector<double>& v) {
    std::vector<double> out;
    for (double x : v) out.push_back(std::abs(x));
    return out;
}

/// h_{w,e} at every grid value, pulled back adaptively. Independent per e.
inline std::vector<SpectralField> densities_over(const TransferFamily& family, const RotationBase& base,
                                                 CirclePoint omega, const std::vector<double>& eps_grid) {
    std::vector<SpectralField> out(eps_grid.size());
    PullbackOptions o;
    o.compute_residual = false;
    parallel_for(eps_grid.size(), [&](std::size_t i) {
        out[i] = pullback_density(family, base, omega, eps_grid[i], o).field;
    });
    return out;
}

inline StabilityCurve statstab_curve(const TransferFamily& family, const RotationBase& base, CirclePoint omega,
                                     const std::vector<double>& eps_grid) {
    check_eps_grid(family.params(), eps_grid);
    PullbackOptions o;
    o.compute_residual = false;
    const SpectralField h0 = pullback_density(family, base, omega, 0.0, o).field;
    auto hs = densities_over(family, base, omega, eps_grid);
    StabilityCurve curve;
    curve.eps_grid = eps_grid;
    for (const auto& h : hs) curve.errors.push_back(w_norm(h - h0));
    LineFit fit = loglog_or_nan(abs_values(eps_grid), curve.errors);
    curve.fitted_slope = fit.slope;
    curve.fit_residual = fit.residual;
    return curve;
}

struct ResponseResidualCurve {
    std::vector<double> eps_grid;
    std::vector<double> residuals;  // ||h_{w,e} - h_w - e Gamma_w||_w
    double fitted_slope = std::numeric_limits<double>::quiet_NaN();
    double fit_residual = std::numeric_limits<double>::quiet_NaN();
};

inline ResponseResidualCurve response_residual(const TransferFamily& family, const RotationBase& base,
                                               CirclePoint omega, const std::vector<double>& eps_grid,
                                               const ResponseTerm& gamma) {
    check_eps_grid(family.params(), eps_grid);
    PullbackOptions o;
    o.compute_residual = false;
    const SpectralField h0 = pullback_density(family, base, omega, 0.0, o).field;
    auto hs = densities_over(family, base, omega, eps_grid);
    ResponseResidualCurve curve;
    curve.eps_grid = eps_grid;
    for (std::size_t i = 0; i < hs.size(); ++i) {
        SpectralField d = hs[i] - h0;
        d.axpy(-eps_grid[i], gamma.field);
        curve.residuals.push_back(w_norm(d));
    }
    LineFit fit = loglog_or_nan(abs_values(eps_grid), curve.residuals);
    curve.fitted_slope = fit.slope;
    curve.fit_residual = fit.residual;
    return curve;
}

struct CentralDifferenceCheck {
    double step = 0.0;
    double error = 0.0;       // ||Gamma - (h_e - h_{-e}) / 2e||_w
    double error_half = 0.0;  // same at step / 2
    double ratio = 0.0;       // error / error_half, 4 for a second-order difference
};

inline CentralDifferenceCheck gamma_central_difference(const TransferFamily& family, const RotationBase& base,
                                                       CirclePoint omega, const ResponseTerm& gamma, double step) {
    auto quotient = [&](double e) {
        auto hs = densities_over(family, base, omega, {e, -e});
        return (1.0 / (2.0 * e)) * (hs[0] - hs[1]);
    };
    CentralDifferenceCheck c;
    c.step = step;
    c.error = w_norm(gamma.field - quotient(step));
    c.error_half = w_norm(gamma.field - quotient(0.5 * step));
    c.ratio = c.error / c.error_half;
    return c;
}

/// Phi(w, x), an observable on the skew product.
using SkewObservable = std::function<double(CirclePoint, double)>;

/// Phi(w, .) projected to degree K.
inline SpectralField observable_slice(const SkewObservable& phi, CirclePoint omega, int K) {
    return project([&](double x) { return phi(omega, x); }, K);
}

/// mu_e(Phi) = int h_{w,e}(Phi(w, .)) dw by the Haar rule with n_omega nodes,
/// for several observables over one set of densities.
inline std::vector<double> annealed_values(const TransferFamily& family, const RotationBase& base,
                                           const std::vector<SkewObservable>& phis, double eps, int n_omega) {
    if (n_omega < 8) throw Error(ErrorKind::DegenerateInput, "annealed quadrature needs n_omega >= 8");
    auto rule = haar_quadrature(n_omega);
    std::vector<std::vector<double>> slot(rule.size());
    PullbackOptions o;
    o.compute_residual = false;
    parallel_for(rule.size(), [&](std::size_t i) {
        auto h = pullback_density(family, base, rule[i].node, eps, o);
        for (const auto& phi : phis) slot[i].push_back(pair(h.field, observable_slice(phi, rule[i].node, family.degree())));
    });
    std::vector<double> acc(phis.size(), 0.0);
    for (std::size_t i = 0; i < rule.size(); ++i) {
        for (std::size_t k = 0; k < phis.size(); ++k) acc[k] += rule[i].weight * slot[i][k];
    }
    return acc;
}

inline double annealed_value(const TransferFamily& family, const RotationBase& base, const SkewObservable& phi,
                             double eps, int n_omega) {
    return annealed_values(family, base, {phi}, eps, n_omega)[0];
}

struct AnnealedResponse {
    double value = 0.0;           // quadrature term plus base-measure term
    double base_term = 0.0;       // P_0'(w -> h_w(Phi(w, .)))
    std::vector<double> quenched; // Gamma_w(Phi(w, .)) at each node
};

inline AnnealedResponse annealed_response(const TransferFamily& family, const RotationBase& base,
                                          const BaseMeasureFamily& measure, const SkewObservable& phi, int n_omega,
                                          int J, const DecayEstimate& decay) {
    if (n_omega < 8) throw Error(ErrorKind::DegenerateInput, "annealed quadrature needs n_omega >= 8");
    auto rule = haar_quadrature(n_omega);
    AnnealedResponse out;
    out.quenched.resize(rule.size());
    parallel_for(rule.size(), [&](std::size_t i) {
        auto g = gamma_series(family, base, rule[i].node, J, decay);
        out.quenched[i] = pair(g.field, observable_slice(phi, rule[i].node, family.degree()));
    });
    for (std::size_t i = 0; i < rule.size(); ++i) out.value += rule[i].weight * out.quenched[i];
    if (measure.has_derivative()) {
        PullbackOptions o;
        o.compute_residual = false;
        out.base_term = measure.derivative([&](CirclePoint w) {
            auto h = pullback_density(family, base, w, 0.0, o);
            return pair(h.field, observable_slice(phi, w, family.degree()));
        });
        out.value += out.base_term;
    }
    return out;
}

}  // namespace skewresp
