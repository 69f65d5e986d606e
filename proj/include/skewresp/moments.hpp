#pragma once

// Green-Kubo variance of fiberwise-centered Birkhoff sums
//
//   Sigma_e^2 = C_0(e) + 2 sum_{n>=1} C_n(e),
//   C_n(e) = int int L^n_{w,e}(fbar_{w,e} h_{w,e}) fbar_{sigma_e^n w, e} dx dP_e(w),
//
// its e-derivative at 0 summand by summand, and a Monte Carlo oracle for the
// variance and higher moments of n^{-1/2} S_n.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "skewresp/base_dynamics.hpp"
#include "skewresp/equivariant.hpp"
#include "skewresp/fiber_maps.hpp"
#include "skewresp/parallel.hpp"
#include "skewresp/response.hpp"
#include "skewresp/spectral.hpp"
#include "skewresp/transfer.hpp"

namespace skewresp {

/// f_e(w, x) with its partial derivatives.
struct ObservableFamily {
    using Fn = std::function<double(CirclePoint, double, double)>;  // (w, e, x)
    Fn value;
    Fn d_eps;
    Fn d_omega;
    Fn d_x;

    /// cos(2 pi x) + e sin(2 pi (x + w))
    static ObservableFamily standard() {
        ObservableFamily f;
        f.value = [](CirclePoint w, double e, double x) {
            return std::cos(two_pi * x) + e * std::sin(two_pi * (x + w.value()));
        };
        f.d_eps = [](CirclePoint w, double, double x) { return std::sin(two_pi * (x + w.value())); };
        f.d_omega = [](CirclePoint w, double e, double x) {
            return e * two_pi * std::cos(two_pi * (x + w.value()));
        };
        f.d_x = [](CirclePoint w, double e, double x) {
            return -two_pi * std::sin(two_pi * x) + e * two_pi * std::cos(two_pi * (x + w.value()));
        };
        return f;
    }

    /// cos(2 pi x), independent of w and e.
    static ObservableFamily cosine() {
        ObservableFamily f;
        f.value = [](CirclePoint, double, double x) { return std::cos(two_pi * x); };
        f.d_eps = [](CirclePoint, double, double) { return 0.0; };
        f.d_omega = [](CirclePoint, double, double) { return 0.0; };
        f.d_x = [](CirclePoint, double, double x) { return -two_pi * std::sin(two_pi * x); };
        return f;
    }

    static ObservableFamily constant(double c) {
        ObservableFamily f;
        f.value = [c](CirclePoint, double, double) { return c; };
        f.d_eps = f.d_omega = f.d_x = [](CirclePoint, double, double) { return 0.0; };
        return f;
    }
};

namespace detail {

inline SpectralField slice(const ObservableFamily::Fn& fn, CirclePoint w, double e, int K) {
    return project([&](double x) { return fn(w, e, x); }, K);
}

}  // namespace detail

/// fbar = f_e(w, .) - h(f_e(w, .)).
inline SpectralField centered_observable(const ObservableFamily& obs, CirclePoint omega, double eps,
                                         const SpectralField& h) {
    SpectralField f = detail::slice(obs.value, omega, eps, h.degree());
    f.set_coeff(0, f.coeff(0) - pair(h, f));
    return f;
}

inline SpectralField centered_observable(const ObservableFamily& obs, CirclePoint omega, double eps,
                                         const EquivariantDensity& h) {
    return centered_observable(obs, omega, eps, h.field);
}

/// C_0..C_{n_max} along the orbit of one base point (the integrand of the
/// correlation terms before the average over w).
inline std::vector<double> quenched_correlations(const TransferFamily& family, const RotationBase& base,
                                                 const ObservableFamily& obs, CirclePoint omega, double eps,
                                                 int n_max) {
    PullbackOptions o;
    o.compute_residual = false;
    SpectralField h = pullback_density(family, base, omega, eps, o).field;
    SpectralField g = multiply(centered_observable(obs, omega, eps, h), h);
    const CirclePoint step = base.angle(eps);
    CirclePoint point = omega;
    std::vector<double> c;
    c.reserve(static_cast<std::size_t>(n_max) + 1);
    for (int n = 0;; ++n) {
        c.push_back(pair(g, centered_observable(obs, point, eps, h)));
        if (n == n_max) break;
        g = family.apply(point, eps, g);
        h = family.apply(point, eps, h);
        point = point + step;
    }
    return c;
}

/// Haar-averaged C_0..C_{n_max}.
inline std::vector<double> correlation_terms(const TransferFamily& family, const RotationBase& base,
                                             const ObservableFamily& obs, double eps, int n_max, int n_omega) {
    if (n_max < 0) throw Error(ErrorKind::DegenerateInput, "correlation lag must be >= 0");
    auto rule = haar_quadrature(n_omega);
    std::vector<std::vector<double>> slot(rule.size());
    parallel_for(rule.size(), [&](std::size_t i) {
        slot[i] = quenched_correlations(family, base, obs, rule[i].node, eps, n_max);
    });
    std::vector<double> c(static_cast<std::size_t>(n_max) + 1, 0.0);
    for (std::size_t i = 0; i < rule.size(); ++i) {
        for (std::size_t n = 0; n < c.size(); ++n) c[n] += rule[i].weight * slot[i][n];
    }
    return c;
}

inline double correlation_term(const TransferFamily& family, const RotationBase& base, const ObservableFamily& obs,
                               double eps, int n, int n_omega) {
    return correlation_terms(family, base, obs, eps, n, n_omega).back();
}

struct VarianceReport {
    double sigma2 = 0.0;
    int N_corr = 0;
    double tail_estimate = 0.0;
    std::vector<double> correlations;  // n = 0..N_corr
    std::vector<std::string> warnings;
};

/// 2 C_hat S e^{-lambda (N+1)} / (1 - e^{-lambda}) with S the largest
/// ||fbar h||_s ||fbar||_w over the nodes: |C_n| <= ||L^n(fbar h)||_w ||fbar||_w.
inline double correlation_tail(const DecayEstimate& decay, double scale, int N) {
    const double q = std::exp(-decay.lambda_hat);
    return 2.0 * decay.C_hat * scale * std::pow(q, N + 1) / (1.0 - q);
}

inline double correlation_scale(const TransferFamily& family, const RotationBase& base, const ObservableFamily& obs,
                                 double eps, int n_omega) {
    auto rule = haar_quadrature(n_omega);
    std::vector<double> slot(rule.size());
    PullbackOptions o;
    o.compute_residual = false;
    parallel_for(rule.size(), [&](std::size_t i) {
        SpectralField h = pullback_density(family, base, rule[i].node, eps, o).field;
        SpectralField fbar = centered_observable(obs, rule[i].node, eps, h);
        slot[i] = s_norm(multiply(fbar, h)) * w_norm(fbar);
    });
    return *std::max_element(slot.begin(), slot.end());
}

inline VarianceReport green_kubo_variance(const TransferFamily& family, const RotationBase& base,
                                          const ObservableFamily& obs, double eps, int N_corr, int n_omega,
                                          const DecayEstimate& decay) {
    if (N_corr < 1) throw Error(ErrorKind::DegenerateInput, "N_corr must be >= 1");
    VarianceReport rep;
    rep.N_corr = N_corr;
    rep.correlations = correlation_terms(family, base, obs, eps, N_corr, n_omega);
    rep.sigma2 = rep.correlations[0];
    for (int n = 1; n <= N_corr; ++n) rep.sigma2 += 2.0 * rep.correlations[static_cast<std::size_t>(n)];
    rep.tail_estimate = correlation_tail(decay, correlation_scale(family, base, obs, eps, n_omega), N_corr);
    if (rep.tail_estimate > 1e-6 * std::abs(rep.sigma2)) {
        std::ostringstream os;
        os << "correlation tail " << rep.tail_estimate << " exceeds 1e-6 sigma2";
        rep.warnings.push_back(os.str());
    }
    return rep;
}

struct VarianceDerivative {
    double value = 0.0;
    double I1 = 0.0;  // int Gamma_w(fbar^2)
    double I2 = 0.0;  // 2 int h fbar d_e fbar
    double I3 = 0.0;  // P_0'(int h fbar^2)
    // sums over n = 1..N_corr, before the factor 2
    double d1 = 0.0;
    double d1_explicit = 0.0;  // d_e f at sigma^n w
    double d1_drift = 0.0;     // n beta d_w f at sigma^n w
    double d1_mean = 0.0;      // derivative of the mean h(f) along the drifted orbit
    double d2 = 0.0;
    double d3 = 0.0;
    double d4 = 0.0;
    std::vector<double> last_terms;  // |d_{i,N_corr}|, i = 1..4
    std::vector<std::string> warnings;
};

namespace detail {

struct NodeDerivative {
    double I1 = 0.0, I2 = 0.0;
    double d1_explicit = 0.0, d1_drift = 0.0, d1_mean = 0.0, d2 = 0.0, d3 = 0.0;
    double last1 = 0.0, last2 = 0.0, last3 = 0.0;
};

/// Lambda^+_k g = d/de L_{sigma_e^k w, e} g at e = 0; the base point moves
/// forward with velocity k beta.
inline SpectralField forward_lambda_apply(const TransferFamily& family, const RotationBase& base, CirclePoint point,
                                          int k, const SpectralField& g) {
    SpectralField out = family.apply_d_eps(point, 0.0, g);
    const double drift = orbit_eps_derivative(base, k);
    if (drift != 0.0) out.axpy(drift, family.apply_d_omega(point, 0.0, g));
    return out;
}

inline NodeDerivative node_derivative(const TransferFamily& family, const RotationBase& base,
                                      const ObservableFamily& obs, CirclePoint omega, int N, int J,
                                      const DecayEstimate& decay) {
    const int K = family.degree();
    PullbackOptions o;
    o.compute_residual = false;
    const int depth = converged_depth(family, base, omega, 0.0, o);
    SpectralField h = pullback_density(family, base, omega, 0.0, o).field;
    GammaOptions go;
    go.depth = depth;
    SpectralField G = gamma_series(family, base, omega, J, decay, go).field;
    const bool moving = base.beta != 0.0;
    SpectralField D = moving ? omega_derivative(family, base, omega, J, depth) : SpectralField(K);

    NodeDerivative out;
    SpectralField f = slice(obs.value, omega, 0.0, K);
    SpectralField fe = slice(obs.d_eps, omega, 0.0, K);
    SpectralField fbar = centered_observable(obs, omega, 0.0, h);
    out.I1 = pair(G, multiply(fbar, fbar));
    out.I2 = 2.0 * pair(h, multiply(fbar, fe));

    // d/de (fbar h) at w: (d_e f - Gamma(f) - h(d_e f)) h + fbar Gamma
    SpectralField dfbar = fe;
    dfbar.set_coeff(0, dfbar.coeff(0) - pair(G, f) - pair(h, fe));
    SpectralField u = multiply(dfbar, h) + multiply(fbar, G);
    SpectralField g = multiply(fbar, h);
    SpectralField t(K);

    const CirclePoint step = base.angle(0.0);
    CirclePoint point = omega;
    SpectralField hn = h, Gn = G, Dn = D;
    for (int n = 1; n <= N; ++n) {
        // advance every orbit quantity from sigma^{n-1} w to sigma^n w
        SpectralField Lh_eps = family.apply_d_eps(point, 0.0, hn);
        SpectralField Lh_omega = moving ? family.apply_d_omega(point, 0.0, hn) : SpectralField(K);
        t = family.apply(point, 0.0, t) + forward_lambda_apply(family, base, point, n - 1, g);
        g = family.apply(point, 0.0, g);
        u = family.apply(point, 0.0, u);
        if (moving) Dn = Lh_omega + family.apply(point, 0.0, Dn);
        Gn = Lh_eps + family.apply(point, 0.0, Gn);
        if (moving) Gn.axpy(-base.beta, Dn);
        hn = family.apply(point, 0.0, hn);
        point = point + step;

        const double nb = orbit_eps_derivative(base, n);
        SpectralField fn = slice(obs.value, point, 0.0, K);
        SpectralField fen = slice(obs.d_eps, point, 0.0, K);
        SpectralField fwn = slice(obs.d_omega, point, 0.0, K);
        SpectralField fbarn = fn;
        fbarn.set_coeff(0, fbarn.coeff(0) - pair(hn, fn));

        double e1 = pair(g, fen);
        double e2 = nb * pair(g, fwn);
        // the mean derivative is a constant in x, paired with the mass of g
        double mean = pair(Gn, fn) + nb * pair(Dn, fn) + pair(hn, fen) + nb * pair(hn, fwn);
        double e3 = -mean * g.mass();
        out.d1_explicit += e1;
        out.d1_drift += e2;
        out.d1_mean += e3;
        double t2 = pair(u, fbarn);
        double t3 = pair(t, fbarn);
        out.d2 += t2;
        out.d3 += t3;
        if (n == N) {
            out.last1 = std::abs(e1 + e2 + e3);
            out.last2 = std::abs(t2);
            out.last3 = std::abs(t3);
        }
    }
    return out;
}

}  // namespace detail

/// d/de Sigma_e^2 at e = 0, differentiating each summand: the n = 0 term
/// gives I1 + I2 + I3 and each C_n with n >= 1 gives d_{1,n} + ... + d_{4,n}.
inline VarianceDerivative variance_derivative(const TransferFamily& family, const RotationBase& base,
                                              const ObservableFamily& obs, const BaseMeasureFamily& measure,
                                              int N_corr, int n_omega, int J, const DecayEstimate& decay,
                                              double tail_tolerance = 1e-8) {
    if (N_corr < 1) throw Error(ErrorKind::DegenerateInput, "N_corr must be >= 1");
    auto rule = haar_quadrature(n_omega);
    std::vector<detail::NodeDerivative> slot(rule.size());
    parallel_for(rule.size(), [&](std::size_t i) {
        slot[i] = detail::node_derivative(family, base, obs, rule[i].node, N_corr, J, decay);
    });
    VarianceDerivative d;
    double last1 = 0.0, last2 = 0.0, last3 = 0.0, last4 = 0.0;
    for (std::size_t i = 0; i < rule.size(); ++i) {
        const double w = rule[i].weight;
        const auto& s = slot[i];
        d.I1 += w * s.I1;
        d.I2 += w * s.I2;
        d.d1_explicit += w * s.d1_explicit;
        d.d1_drift += w * s.d1_drift;
        d.d1_mean += w * s.d1_mean;
        d.d2 += w * s.d2;
        d.d3 += w * s.d3;
        last1 += w * s.last1;
        last2 += w * s.last2;
        last3 += w * s.last3;
    }
    d.d1 = d.d1_explicit + d.d1_drift + d.d1_mean;
    if (measure.has_derivative()) {
        std::map<std::uint64_t, std::vector<double>> memo;
        auto correlations_at = [&](CirclePoint w) -> const std::vector<double>& {
            auto it = memo.find(w.turns());
            if (it == memo.end()) {
                it = memo.emplace(w.turns(), quenched_correlations(family, base, obs, w, 0.0, N_corr)).first;
            }
            return it->second;
        };
        d.I3 = measure.derivative([&](CirclePoint w) { return correlations_at(w)[0]; });
        for (int n = 1; n <= N_corr; ++n) {
            double term = measure.derivative(
                [&](CirclePoint w) { return correlations_at(w)[static_cast<std::size_t>(n)]; });
            d.d4 += term;
            if (n == N_corr) last4 = std::abs(term);
        }
    }
    d.value = d.I1 + d.I2 + d.I3 + 2.0 * (d.d1 + d.d2 + d.d3 + d.d4);
    d.last_terms = {last1, last2, last3, last4};
    for (std::size_t i = 0; i < d.last_terms.size(); ++i) {
        if (d.last_terms[i] > tail_tolerance) {
            std::ostringstream os;
            os << "d" << i + 1 << " term at n = " << N_corr << " is " << d.last_terms[i];
            d.warnings.push_back(os.str());
        }
    }
    return d;
}

/// Inverse-CDF sampler for a density on the circle. The CDF is exact at the
/// nodes of a uniform grid and interpolated linearly between them.
class DensitySampler {
public:
    explicit DensitySampler(const SpectralField& h, int grid = 1 << 12) : cdf_(static_cast<std::size_t>(grid) + 1) {
        if (grid < 2) throw Error(ErrorKind::DegenerateInput, "sampler grid must be >= 2");
        const double mass = h.mass();
        if (!(mass > 0.0)) throw Error(ErrorKind::DegenerateInput, "sampler density must have positive mass");
        for (int m = 0; m <= grid; ++m) {
            double x = static_cast<double>(m) / grid;
            // int_0^x h = c_0 x + sum_k 2 Re(c_k (e^{2 pi i k x} - 1) / (2 pi i k))
            double acc = mass * x;
            for (int k = 1; k <= h.degree(); ++k) {
                cplx e = std::polar(1.0, two_pi * k * x) - 1.0;
                acc += 2.0 * (h.coeff(k) * e / cplx{0.0, two_pi * k}).real();
            }
            cdf_[static_cast<std::size_t>(m)] = acc / mass;
        }
        for (std::size_t m = 1; m < cdf_.size(); ++m) {
            if (cdf_[m] < cdf_[m - 1]) throw Error(ErrorKind::DegenerateInput, "sampler density is not positive");
        }
        cdf_.back() = 1.0;
    }

    double operator()(double u) const {
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        std::size_t m = it == cdf_.begin() ? 1 : static_cast<std::size_t>(it - cdf_.begin());
        m = std::min(m, cdf_.size() - 1);
        double lo = cdf_[m - 1], hi = cdf_[m];
        double frac = hi > lo ? (u - lo) / (hi - lo) : 0.0;
        double x = (static_cast<double>(m - 1) + frac) / static_cast<double>(cdf_.size() - 1);
        return x >= 1.0 ? x - 1.0 : x;
    }

private:
    std::vector<double> cdf_;
};

struct MonteCarloOptions {
    // Roundoff-scale kick added to x after every step. In double precision
    // the doubling map shifts one bit out per step and reaches 0 after about
    // 53 steps; the kick keeps orbits generic without moving the statistics.
    double dither = 0x1p-44;
    int sampler_grid = 1 << 12;
};

struct MonteCarloResult {
    double mean = 0.0;       // mean of S_n / sqrt(n)
    double variance = 0.0;   // mean of (S_n / sqrt(n))^2
    double std_error = 0.0;  // standard error of variance
    std::vector<double> samples;  // S_n / sqrt(n) per trial
};

/// Birkhoff sums S_n = sum_{j<n} fbar_{sigma_e^j w, e}(T^j x) with x drawn
/// from h_{w,e}. Trial i uses the generator seeded with rng_seed + i.
inline MonteCarloResult monte_carlo_variance(const TransferFamily& family, const RotationBase& base,
                                             const ObservableFamily& obs, CirclePoint omega, double eps,
                                             int n_steps, int trials, std::uint64_t rng_seed,
                                             const MonteCarloOptions& opts = {}) {
    if (n_steps < 1000) throw Error(ErrorKind::DegenerateInput, "Monte Carlo needs n_steps >= 1000");
    if (trials < 100) throw Error(ErrorKind::DegenerateInput, "Monte Carlo needs trials >= 100");
    PullbackOptions po;
    po.compute_residual = false;
    SpectralField h = pullback_density(family, base, omega, eps, po).field;
    DensitySampler sampler(h, opts.sampler_grid);

    // fiber maps and means h_{sigma^j w}(f) along the orbit, shared by all trials
    std::vector<FiberMap> maps;
    std::vector<double> means;
    std::vector<CirclePoint> points;
    maps.reserve(static_cast<std::size_t>(n_steps));
    const CirclePoint step = base.angle(eps);
    CirclePoint point = omega;
    SpectralField hj = h;
    for (int j = 0; j < n_steps; ++j) {
        maps.emplace_back(family.params(), point, eps);
        points.push_back(point);
        means.push_back(pair(hj, detail::slice(obs.value, point, eps, family.degree())));
        if (j + 1 < n_steps) hj = family.apply(point, eps, hj);
        point = point + step;
    }

    MonteCarloResult r;
    r.samples.assign(static_cast<std::size_t>(trials), 0.0);
    parallel_for(static_cast<std::size_t>(trials), [&](std::size_t i) {
        std::mt19937_64 rng(rng_seed + i);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::uniform_real_distribution<double> kick(-opts.dither, opts.dither);
        double x = sampler(unit(rng));
        double s = 0.0;
        for (int j = 0; j < n_steps; ++j) {
            s += obs.value(points[static_cast<std::size_t>(j)], eps, x) - means[static_cast<std::size_t>(j)];
            x = maps[static_cast<std::size_t>(j)](CirclePoint(x + kick(rng))).value();
        }
        r.samples[i] = s / std::sqrt(static_cast<double>(n_steps));
    });
    double m1 = 0.0, m2 = 0.0;
    for (double z : r.samples) {
        m1 += z;
        m2 += z * z;
    }
    const double T = trials;
    r.mean = m1 / T;
    r.variance = m2 / T;
    double ss = 0.0;
    for (double z : r.samples) ss += (z * z - r.variance) * (z * z - r.variance);
    r.std_error = std::sqrt(ss / (T - 1.0) / T);
    return r;
}

struct MomentReport {
    int k = 2;
    double M_k_empirical = 0.0;
    double ratio_to_gaussian = 1.0;  // M_k / (M_2^{k/2} (k-1)!!)
    double std_error = 0.0;          // sampling error of the ratio when the limit is Gaussian
    double jackknife_error = 0.0;    // data-driven error of the ratio
};

inline double double_factorial(int n) {
    double r = 1.0;
    for (int i = n; i > 1; i -= 2) r *= i;
    return r;
}

/// Asymptotic variance of sqrt(T) m_k / m_2^{k/2} for Gaussian samples, by the
/// delta method: 24 for k = 4 and 6120 for k = 6.
inline double gaussian_ratio_variance(int k) {
    auto mu = [](int j) { return double_factorial(j - 1); };
    const double h = k / 2.0;
    const double mk = mu(k);
    return mu(2 * k) - mk * mk - 2.0 * h * mk * (mu(k + 2) - mk) + 2.0 * h * h * mk * mk;
}

/// Moment ratio from existing samples of S_n / sqrt(n).
///
/// The jackknife error tracks the sample and comes out small exactly when the
/// sample is light-tailed by chance; std_error is the sampling error under
/// the Gaussian hypothesis being tested.
inline MomentReport moment_ratio(const std::vector<double>& samples, int k) {
    if (k != 2 && k != 4 && k != 6) throw Error(ErrorKind::DegenerateInput, "moment order must be 2, 4 or 6");
    if (samples.size() < 3) throw Error(ErrorKind::DegenerateInput, "moment ratio needs >= 3 samples");
    MomentReport rep;
    rep.k = k;
    const std::size_t T = samples.size();
    double s2 = 0.0, sk = 0.0;
    for (double z : samples) {
        s2 += z * z;
        sk += std::pow(z, k);
    }
    rep.M_k_empirical = sk / static_cast<double>(T);
    if (k == 2) return rep;
    const double gauss = double_factorial(k - 1);
    auto ratio = [&](double a2, double ak, double n) { return (ak / n) / (std::pow(a2 / n, k / 2) * gauss); };
    rep.ratio_to_gaussian = ratio(s2, sk, static_cast<double>(T));
    rep.std_error = std::sqrt(gaussian_ratio_variance(k) / static_cast<double>(T)) / gauss;
    std::vector<double> leave(T);
    double mean = 0.0;
    for (std::size_t i = 0; i < T; ++i) {
        double z2 = samples[i] * samples[i];
        leave[i] = ratio(s2 - z2, sk - std::pow(samples[i], k), static_cast<double>(T - 1));
        mean += leave[i];
    }
    mean /= static_cast<double>(T);
    double ss = 0.0;
    for (double v : leave) ss += (v - mean) * (v - mean);
    rep.jackknife_error = std::sqrt(ss * static_cast<double>(T - 1) / static_cast<double>(T));
    return rep;
}

inline MomentReport moment_ratio_check(const TransferFamily& family, const RotationBase& base,
                                       const ObservableFamily& obs, CirclePoint omega, double eps, int k, int n_steps,
                                       int trials, std::uint64_t rng_seed) {
    auto mc = monte_carlo_variance(family, base, obs, omega, eps, n_steps, trials, rng_seed);
    return moment_ratio(mc.samples, k);
}

}  // namespace skewresp
