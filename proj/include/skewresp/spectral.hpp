#pragma once

// Real functions on the circle as truncated Fourier series, plus the FFT pair
// that moves between coefficients and equispaced grid values.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <sstream>
#include <vector>

#include "skewresp/circle.hpp"
#include "skewresp/errors.hpp"

namespace skewresp {

using cplx = std::complex<double>;

/// A real-valued function sum_{|k| <= K} c_k e^{2 pi i k x}.
///
/// Only c_0..c_K are stored; c_{-k} = conj(c_k) is implied, and c_0 is kept
/// real. mass() is the integral against Lebesgue measure.
class SpectralField {
public:
    SpectralField() = default;
    explicit SpectralField(int K) : coeffs_(static_cast<std::size_t>(K) + 1, cplx{}) {
        if (K < 0) throw Error(ErrorKind::DegenerateInput, "negative truncation degree");
    }

    static SpectralField constant(int K, double value) {
        SpectralField f(K);
        f.coeffs_[0] = value;
        return f;
    }

    /// cos(2 pi k x + phase) scaled by amplitude.
    static SpectralField mode(int K, int k, double amplitude = 1.0, double phase = 0.0) {
        SpectralField f(K);
        if (k == 0) {
            f.coeffs_[0] = amplitude * std::cos(phase);
        } else if (k <= K) {
            f.coeffs_[static_cast<std::size_t>(k)] = 0.5 * amplitude * std::polar(1.0, phase);
        }
        return f;
    }

    int degree() const { return static_cast<int>(coeffs_.size()) - 1; }

    /// c_k for any integer k (zero beyond the truncation).
    cplx coeff(int k) const {
        int K = degree();
        if (k > K || k < -K) return {};
        return k >= 0 ? coeffs_[static_cast<std::size_t>(k)]
                      : std::conj(coeffs_[static_cast<std::size_t>(-k)]);
    }

    /// Sets c_k (and implicitly c_{-k}); k >= 0.
    void set_coeff(int k, cplx value) {
        if (k == 0) value = value.real();
        coeffs_.at(static_cast<std::size_t>(k)) = value;
    }

    const std::vector<cplx>& half_spectrum() const { return coeffs_; }

    double mass() const { return coeffs_.empty() ? 0.0 : coeffs_[0].real(); }

    double operator()(double x) const { return evaluate(cplx{std::cos(two_pi * x), std::sin(two_pi * x)}); }
    double operator()(CirclePoint x) const { return (*this)(x.value()); }

    /// Value at the point with e^{2 pi i x} = z.
    double evaluate(cplx z) const {
        int K = degree();
        if (K < 0) return 0.0;
        cplx acc{};
        for (int k = K; k >= 1; --k) acc = acc * z + coeffs_[static_cast<std::size_t>(k)];
        acc *= z;
        return coeffs_[0].real() + 2.0 * acc.real();
    }

    /// Value and x-derivative at the point with e^{2 pi i x} = z.
    std::pair<double, double> evaluate_with_derivative(cplx z) const {
        int K = degree();
        if (K < 0) return {0.0, 0.0};
        cplx acc{};
        cplx dacc{};
        for (int k = K; k >= 1; --k) {
            acc = acc * z + coeffs_[static_cast<std::size_t>(k)];
            dacc = dacc * z + static_cast<double>(k) * coeffs_[static_cast<std::size_t>(k)];
        }
        acc *= z;
        dacc *= z;
        // d/dx of 2 Re(c_k e^{2 pi i k x}) = 2 Re(2 pi i k c_k e^{...}) = -4 pi Im(k c_k e^{...})
        return {coeffs_[0].real() + 2.0 * acc.real(), -2.0 * two_pi * dacc.imag()};
    }

    SpectralField derivative() const {
        SpectralField d(degree());
        for (int k = 1; k <= degree(); ++k) {
            d.coeffs_[static_cast<std::size_t>(k)] =
                cplx{0.0, two_pi * k} * coeffs_[static_cast<std::size_t>(k)];
        }
        return d;
    }

    /// Zero-padded or truncated copy at degree K.
    SpectralField resized(int K) const {
        SpectralField f(K);
        for (int k = 0; k <= std::min(K, degree()); ++k) {
            f.coeffs_[static_cast<std::size_t>(k)] = coeffs_[static_cast<std::size_t>(k)];
        }
        return f;
    }

    SpectralField& operator+=(const SpectralField& o) {
        check_same(o);
        for (std::size_t k = 0; k < coeffs_.size(); ++k) coeffs_[k] += o.coeffs_[k];
        return *this;
    }
    SpectralField& operator-=(const SpectralField& o) {
        check_same(o);
        for (std::size_t k = 0; k < coeffs_.size(); ++k) coeffs_[k] -= o.coeffs_[k];
        return *this;
    }
    SpectralField& operator*=(double s) {
        for (auto& c : coeffs_) c *= s;
        return *this;
    }
    /// this += s * o
    SpectralField& axpy(double s, const SpectralField& o) {
        check_same(o);
        for (std::size_t k = 0; k < coeffs_.size(); ++k) coeffs_[k] += s * o.coeffs_[k];
        return *this;
    }

    friend SpectralField operator+(SpectralField a, const SpectralField& b) { return a += b; }
    friend SpectralField operator-(SpectralField a, const SpectralField& b) { return a -= b; }
    friend SpectralField operator*(double s, SpectralField a) { return a *= s; }
    friend SpectralField operator*(SpectralField a, double s) { return a *= s; }

    /// Largest coefficient difference, over k = -K..K.
    double max_coeff_distance(const SpectralField& o) const {
        double m = 0.0;
        int K = std::max(degree(), o.degree());
        for (int k = 0; k <= K; ++k) m = std::max(m, std::abs(coeff(k) - o.coeff(k)));
        return m;
    }

    bool hermitian_ok() const { return coeffs_.empty() || coeffs_[0].imag() == 0.0; }

private:
    void check_same(const SpectralField& o) const {
        if (o.coeffs_.size() != coeffs_.size()) {
            throw Error(ErrorKind::DegenerateInput, "field degrees differ");
        }
    }

    std::vector<cplx> coeffs_;
};

/// Values at the N equispaced nodes m / N.
struct GridFunction {
    std::vector<double> values;

    int size() const { return static_cast<int>(values.size()); }
    static double node(int m, int N) { return static_cast<double>(m) / N; }
};

namespace detail {

class FftPlans {
public:
    struct Pair {
        fftw_plan forward;
        fftw_plan backward;
    };

    static const Pair& get(int N) {
        static FftPlans instance;
        std::lock_guard lock(instance.mutex_);
        auto it = instance.plans_.find(N);
        if (it != instance.plans_.end()) return it->second;
        std::vector<double> re(static_cast<std::size_t>(N));
        std::vector<fftw_complex> sp(static_cast<std::size_t>(N / 2 + 1));
        Pair p{};
        p.forward = fftw_plan_dft_r2c_1d(N, re.data(), sp.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
        p.backward = fftw_plan_dft_c2r_1d(N, sp.data(), re.data(),
                                          FFTW_ESTIMATE | FFTW_UNALIGNED | FFTW_DESTROY_INPUT);
        return instance.plans_.emplace(N, p).first->second;
    }

    ~FftPlans() {
        for (auto& [n, p] : plans_) {
            fftw_destroy_plan(p.forward);
            fftw_destroy_plan(p.backward);
        }
    }

private:
    std::mutex mutex_;
    std::map<int, Pair> plans_;
};

inline void check_alias_free(int K, int N) {
    if (N < 2 * K + 2) {
        std::ostringstream os;
        os << "grid size " << N << " < 2K + 2 = " << 2 * K + 2;
        throw Error(ErrorKind::Aliasing, os.str());
    }
}

}  // namespace detail

/// Projection of grid samples onto Fourier degree <= K (discrete Fourier
/// coefficients).
inline SpectralField analyze(const GridFunction& g, int K) {
    const int N = g.size();
    detail::check_alias_free(K, N);
    const auto& plan = detail::FftPlans::get(N);
    std::vector<double> in = g.values;
    std::vector<fftw_complex> out(static_cast<std::size_t>(N / 2 + 1));
    fftw_execute_dft_r2c(plan.forward, in.data(), out.data());
    SpectralField f(K);
    const double scale = 1.0 / N;
    for (int k = 0; k <= K; ++k) {
        // FFTW's forward transform uses e^{-2 pi i k m / N}
        f.set_coeff(k, cplx{out[static_cast<std::size_t>(k)][0], out[static_cast<std::size_t>(k)][1]} * scale);
    }
    return f;
}

inline GridFunction synthesize(const SpectralField& f, int N) {
    const int K = f.degree();
    detail::check_alias_free(K, N);
    const auto& plan = detail::FftPlans::get(N);
    std::vector<fftw_complex> in(static_cast<std::size_t>(N / 2 + 1));
    for (auto& c : in) c[0] = c[1] = 0.0;
    for (int k = 0; k <= K; ++k) {
        cplx c = f.coeff(k);
        in[static_cast<std::size_t>(k)][0] = c.real();
        in[static_cast<std::size_t>(k)][1] = c.imag();
    }
    GridFunction g;
    g.values.resize(static_cast<std::size_t>(N));
    fftw_execute_dft_c2r(plan.backward, in.data(), g.values.data());
    return g;
}

/// Default synthesis grid for norm proxies.
inline int norm_grid(int K) { return std::max(16 * K, 64); }

/// Weak-norm proxy: sup of |f| on the synthesis grid.
inline double w_norm(const SpectralField& f, int N = 0) {
    if (N == 0) N = norm_grid(f.degree());
    auto g = synthesize(f, N);
    double m = 0.0;
    for (double v : g.values) m = std::max(m, std::abs(v));
    return m;
}

/// Strong-norm proxy: sup |f| + sup |f'| (a C^1 norm).
inline double s_norm(const SpectralField& f, int N = 0) {
    return w_norm(f, N) + w_norm(f.derivative(), N);
}

inline double grid_min(const SpectralField& f, int N = 0) {
    if (N == 0) N = norm_grid(f.degree());
    auto g = synthesize(f, N);
    return *std::min_element(g.values.begin(), g.values.end());
}

/// Integral of f g against Lebesgue measure.
inline double pair(const SpectralField& f, const SpectralField& g) {
    int K = std::min(f.degree(), g.degree());
    double acc = f.coeff(0).real() * g.coeff(0).real();
    for (int k = 1; k <= K; ++k) acc += 2.0 * (f.coeff(k) * std::conj(g.coeff(k))).real();
    return acc;
}

/// Pointwise product, projected back to degree K. The grid must hold the
/// degree-2K product without folding into degrees <= K, i.e. N >= 3K + 1.
inline SpectralField multiply(const SpectralField& f, const SpectralField& g, int N = 0) {
    int K = std::max(f.degree(), g.degree());
    if (N == 0) N = norm_grid(K);
    if (N < 3 * K + 1) {
        std::ostringstream os;
        os << "product grid " << N << " < 3K + 1 = " << 3 * K + 1;
        throw Error(ErrorKind::Aliasing, os.str());
    }
    auto gf = synthesize(f.resized(K), N);
    auto gg = synthesize(g.resized(K), N);
    for (std::size_t m = 0; m < gf.values.size(); ++m) gf.values[m] *= gg.values[m];
    return analyze(gf, K);
}

/// Samples a callable on the grid and projects to degree K.
template <class F>
SpectralField project(F&& fn, int K, int N = 0) {
    if (N == 0) N = norm_grid(K);
    GridFunction g;
    g.values.resize(static_cast<std::size_t>(N));
    for (int m = 0; m < N; ++m) g.values[static_cast<std::size_t>(m)] = fn(GridFunction::node(m, N));
    return analyze(g, K);
}

/// CSV rows "k,re,im" for k = -K..K.
inline void write_csv_rows(std::ostream& os, const SpectralField& f) {
    auto old = os.precision(17);
    for (int k = -f.degree(); k <= f.degree(); ++k) {
        cplx c = f.coeff(k);
        os << k << ',' << c.real() << ',' << c.imag() << '\n';
    }
    os.precision(old);
}

}  // namespace skewresp
