#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "skewresp/errors.hpp"

namespace skewresp {

struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double residual = 0.0;  // root-mean-square deviation
};

/// Ordinary least squares y = intercept + slope x.
inline LineFit fit_line(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size() || xs.size() < 2) {
        throw Error(ErrorKind::DegenerateInput, "line fit needs >= 2 paired points");
    }
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if (sxx == 0.0) throw Error(ErrorKind::DegenerateInput, "abscissae are all equal");
    LineFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    double ss = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        double r = ys[i] - (fit.intercept + fit.slope * xs[i]);
        ss += r * r;
    }
    fit.residual = std::sqrt(ss / n);
    return fit;
}

/// Least squares in log-log coordinates; the residual is the RMS log deviation.
inline LineFit fit_loglog(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size() || xs.size() < 3) {
        throw Error(ErrorKind::DegenerateInput, "log-log fit needs >= 3 paired points");
    }
    std::vector<double> lx(xs.size()), ly(ys.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!(xs[i] > 0.0) || !(ys[i] > 0.0)) {
            throw Error(ErrorKind::DegenerateInput, "log-log fit needs positive values");
        }
        lx[i] = std::log(xs[i]);
        ly[i] = std::log(ys[i]);
    }
    return fit_line(lx, ly);
}

}  // namespace skewresp
