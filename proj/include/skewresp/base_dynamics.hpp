#pragma once

// Base rotations sigma_e(w) = w + alpha0 + beta e (mod 1) and their Haar measure.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "skewresp/circle.hpp"
#include "skewresp/errors.hpp"

namespace skewresp {

struct RotationBase {
    double alpha0 = 0.6180339887498949;  // (sqrt 5 - 1) / 2
    double beta = 1.0;

    /// Rotation angle at parameter eps, as an exact circle increment.
    CirclePoint angle(double eps) const { return CirclePoint(alpha0 + beta * eps); }
};

/// sigma_e^n(w); negative n walks the backward orbit.
inline CirclePoint advance(const RotationBase& base, double eps, CirclePoint omega, std::int64_t n) {
    return omega + base.angle(eps).times(n);
}

/// d/de sigma_e^n(w) at e = 0.
inline double orbit_eps_derivative(const RotationBase& base, std::int64_t n) {
    return static_cast<double>(n) * base.beta;
}

/// sup_w d(sigma^{-1} w, sigma_e^{-1} w), which for rotations is the circle
/// norm of beta e.
inline double c0_distance(const RotationBase& base, double eps) {
    return circle_distance(CirclePoint(base.beta * eps), CirclePoint());
}

struct QuadratureNode {
    CirclePoint node;
    double weight;
};

/// Equispaced rule k/N with weights 1/N: exact on trigonometric polynomials of
/// degree < N.
inline std::vector<QuadratureNode> haar_quadrature(int n) {
    if (n < 1) throw Error(ErrorKind::DegenerateInput, "quadrature size must be >= 1");
    std::vector<QuadratureNode> rule;
    rule.reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        rule.push_back({CirclePoint(static_cast<double>(k) / n), 1.0 / n});
    }
    return rule;
}

/// The base measure P_e and its derivative P_0' acting on functions of w.
///
/// For rotations P_e is Haar for every e and the derivative functional is
/// zero; a nonzero derivative can be injected for families with moving base
/// measures. The derivative must annihilate constants.
struct BaseMeasureFamily {
    using Observable = std::function<double(CirclePoint)>;
    using Functional = std::function<double(const Observable&)>;

    Observable density_at_0 = [](CirclePoint) { return 1.0; };
    Functional derivative_functional;

    static BaseMeasureFamily haar() { return {}; }

    bool has_derivative() const { return static_cast<bool>(derivative_functional); }

    double derivative(const Observable& phi) const {
        return derivative_functional ? derivative_functional(phi) : 0.0;
    }
};

}  // namespace skewresp
