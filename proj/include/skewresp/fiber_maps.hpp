#pragma once

// Degree-2 analytic expanding circle maps
//
//   T_{w,e}(x) = 2x + (a + b e) sin(2 pi x) / (2 pi) + c sin(2 pi (x - w)) / (2 pi)   mod 1
//
// with w the base point and e the perturbation parameter. The derivative in x
// is bounded below by gamma = 2 - |a| - |b| eps_max - |c|, which must exceed 1.

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include "skewresp/circle.hpp"
#include "skewresp/errors.hpp"

namespace skewresp {

struct FiberParams {
    double a = 0.3;
    double b = 1.0;
    double c = 0.3;
    double eps_max = 0.1;
};

/// Uniform lower bound on dT/dx over the whole parameter box.
inline double expansion_constant(const FiberParams& p) {
    return 2.0 - std::abs(p.a) - std::abs(p.b) * p.eps_max - std::abs(p.c);
}

inline void validate(const FiberParams& p) {
    if (!(p.eps_max > 0.0)) {
        throw Error(ErrorKind::ParameterOutOfRange, "eps_max must be positive");
    }
    double gamma = expansion_constant(p);
    if (!(gamma > 1.0)) {
        std::ostringstream os;
        os << "expansion constant " << gamma << " <= 1";
        throw Error(ErrorKind::ParameterOutOfRange, os.str());
    }
}

struct MapJet {
    CirclePoint T;
    double dTdx = 0.0;
    double d2Tdx2 = 0.0;
    double dTdeps = 0.0;
    double dTdomega = 0.0;
    double d2Tdxdeps = 0.0;
    double d2Tdxdomega = 0.0;
};

/// A single fiber map T_{w,e}, validated once and then evaluated many times.
class FiberMap {
public:
    FiberMap(const FiberParams& params, CirclePoint omega, double eps)
        : params_(params), omega_(omega), eps_(eps) {
        validate(params);
        if (std::abs(eps) > params.eps_max) {
            std::ostringstream os;
            os << "|eps| = " << std::abs(eps) << " exceeds eps_max = " << params.eps_max;
            throw Error(ErrorKind::ParameterOutOfRange, os.str());
        }
        amp_ = params.a + params.b * eps;
        shift_ = omega.value();
    }

    const FiberParams& params() const { return params_; }
    CirclePoint omega() const { return omega_; }
    double eps() const { return eps_; }

    /// The real lift on [0, 1): lift(0) = t0 and lift(1) = t0 + 2.
    double lift(double x) const {
        return 2.0 * x + amp_ * std::sin(two_pi * x) / two_pi +
               params_.c * std::sin(two_pi * (x - shift_)) / two_pi;
    }

    double dlift(double x) const {
        return 2.0 + amp_ * std::cos(two_pi * x) + params_.c * std::cos(two_pi * (x - shift_));
    }

    CirclePoint operator()(CirclePoint x) const { return CirclePoint(lift(x.value())); }

    MapJet jet(CirclePoint x) const { return jet_at(x.value()); }

    MapJet jet_at(double x) const {
        double s0 = std::sin(two_pi * x);
        double c0 = std::cos(two_pi * x);
        double s1 = std::sin(two_pi * (x - shift_));
        double c1 = std::cos(two_pi * (x - shift_));
        MapJet j;
        j.T = CirclePoint(2.0 * x + amp_ * s0 / two_pi + params_.c * s1 / two_pi);
        j.dTdx = 2.0 + amp_ * c0 + params_.c * c1;
        j.d2Tdx2 = -two_pi * (amp_ * s0 + params_.c * s1);
        j.dTdeps = params_.b * s0 / two_pi;
        j.dTdomega = -params_.c * c1;
        j.d2Tdxdeps = params_.b * c0;
        j.d2Tdxdomega = two_pi * params_.c * s1;
        return j;
    }

    /// The two preimages of x, ordered by lift offset.
    ///
    /// Branch i solves lift(y) = x + m0 + i on [0, 1), where m0 places the
    /// first target in [lift(0), lift(0) + 1). Newton iteration on the
    /// increasing lift, safeguarded by bisection.
    std::array<CirclePoint, 2> inverse_branches(CirclePoint x) const {
        auto ys = inverse_lifts(x.value());
        return {CirclePoint(ys[0]), CirclePoint(ys[1])};
    }

    /// Same as inverse_branches but returns the preimages as reals in [0, 1).
    std::array<double, 2> inverse_lifts(double x) const {
        double t0 = lift(0.0);
        double m0 = std::ceil(t0 - x);
        if (x + m0 >= t0 + 1.0) m0 -= 1.0;
        return {solve_lift(x + m0, t0), solve_lift(x + m0 + 1.0, t0)};
    }

    static constexpr int newton_cap = 50;
    static constexpr double newton_tolerance = 1e-13;

private:
    double solve_lift(double target, double t0) const {
        double lo = 0.0;
        double hi = 1.0;
        double y = std::clamp((target - t0) / 2.0, 0.0, 1.0);
        for (int it = 0; it < newton_cap; ++it) {
            double r = lift(y) - target;
            if (std::abs(r) <= 0.25 * newton_tolerance) return wrap(y);
            if (r > 0.0) hi = y; else lo = y;
            double next = y - r / dlift(y);
            if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
            if (next == y) break;
            y = next;
        }
        double r = lift(y) - target;
        if (std::abs(r) > newton_tolerance) {
            std::ostringstream os;
            os << "inverse branch residual " << r << " after " << newton_cap << " steps";
            throw Error(ErrorKind::NewtonDivergence, os.str());
        }
        return wrap(y);
    }

    static double wrap(double y) { return y >= 1.0 ? y - 1.0 : (y < 0.0 ? y + 1.0 : y); }

    FiberParams params_;
    CirclePoint omega_;
    double eps_;
    double amp_ = 0.0;
    double shift_ = 0.0;
};

inline CirclePoint eval_map(const FiberParams& p, CirclePoint omega, double eps, CirclePoint x) {
    return FiberMap(p, omega, eps)(x);
}

inline MapJet eval_jet(const FiberParams& p, CirclePoint omega, double eps, CirclePoint x) {
    return FiberMap(p, omega, eps).jet(x);
}

inline std::array<CirclePoint, 2> inverse_branches(const FiberParams& p, CirclePoint omega,
                                                   double eps, CirclePoint x) {
    return FiberMap(p, omega, eps).inverse_branches(x);
}

}  // namespace skewresp
