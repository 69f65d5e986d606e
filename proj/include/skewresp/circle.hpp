#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <numbers>

namespace skewresp {

inline constexpr double two_pi = 2.0 * std::numbers::pi;

/// A point of the circle R/Z.
///
/// Stored as a 64-bit fixed-point fraction of a full turn, so that addition
/// wraps modulo 1 for free and rotation orbits compose exactly: advancing by
/// n steps and then by m steps lands on the same bit pattern as advancing by
/// n + m steps.
class CirclePoint {
public:
    constexpr CirclePoint() = default;

    /// Reduces any real number mod 1.
    explicit CirclePoint(double x) : turns_(to_turns(x)) {}

    static constexpr CirclePoint from_turns(std::uint64_t turns) {
        CirclePoint p;
        p.turns_ = turns;
        return p;
    }

    /// Representative in [0, 1).
    double value() const { return static_cast<double>(turns_ >> 11) * 0x1.0p-53; }
    std::uint64_t turns() const { return turns_; }

    CirclePoint operator+(CirclePoint other) const { return from_turns(turns_ + other.turns_); }
    CirclePoint operator-(CirclePoint other) const { return from_turns(turns_ - other.turns_); }
    CirclePoint operator-() const { return from_turns(0 - turns_); }

    /// n-fold sum; negative n walks backwards.
    CirclePoint times(std::int64_t n) const {
        return from_turns(turns_ * static_cast<std::uint64_t>(n));
    }

    /// Representative of (this - other) in [-1/2, 1/2).
    double signed_difference(CirclePoint other) const {
        auto diff = static_cast<std::int64_t>(turns_ - other.turns_);
        return static_cast<double>(diff) * 0x1.0p-64;
    }

    friend constexpr bool operator==(CirclePoint, CirclePoint) = default;
    friend constexpr auto operator<=>(CirclePoint, CirclePoint) = default;

private:
    static std::uint64_t to_turns(double x) {
        double frac = x - std::floor(x);
        // frac can round up to exactly 1.0 for tiny negative x
        if (frac >= 1.0) frac = 0.0;
        long double scaled = static_cast<long double>(frac) * 0x1.0p64L;
        if (scaled >= 0x1.0p64L) return 0;
        return static_cast<std::uint64_t>(scaled);
    }

    std::uint64_t turns_ = 0;
};

/// Circle distance min(|x - y|, 1 - |x - y|).
inline double circle_distance(CirclePoint x, CirclePoint y) {
    return std::abs(x.signed_difference(y));
}

}  // namespace skewresp
