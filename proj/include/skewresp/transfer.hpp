#pragma once

// Fourier collocation of the transfer operators
//
//   (L g)(x) = sum_{T(y) = x} g(y) / T'(y)
//
// and of their parameter derivatives. The preimages of the N grid nodes are
// computed once per (omega, eps) and shared by every application and every
// matrix column: applying L to a degree-K field means evaluating the field at
// the 2N preimages, forming the Jacobian-weighted branch sums at the nodes and
// projecting back to degree K.

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <numeric>
#include <unordered_map>
#include <vector>

#include "skewresp/base_dynamics.hpp"
#include "skewresp/fiber_maps.hpp"
#include "skewresp/spectral.hpp"

namespace skewresp {

enum class OperatorKind { transfer, d_eps, d_omega };

/// Dense (2K+1) x (2K+1) matrix acting on coefficients c_{-K}..c_K.
struct OperatorMatrix {
    int K = 0;
    OperatorKind kind = OperatorKind::transfer;
    CirclePoint omega;
    double eps = 0.0;
    std::vector<cplx> entries;  // row-major

    int dim() const { return 2 * K + 1; }
    cplx& at(int row_k, int col_k) {
        return entries[static_cast<std::size_t>((row_k + K) * dim() + (col_k + K))];
    }
    cplx at(int row_k, int col_k) const {
        return entries[static_cast<std::size_t>((row_k + K) * dim() + (col_k + K))];
    }

    double max_abs_entry() const {
        double m = 0.0;
        for (auto c : entries) m = std::max(m, std::abs(c));
        return m;
    }
};

inline SpectralField apply(const OperatorMatrix& M, const SpectralField& f) {
    SpectralField out(M.K);
    for (int row = 0; row <= M.K; ++row) {
        cplx acc{};
        for (int col = -M.K; col <= M.K; ++col) acc += M.at(row, col) * f.coeff(col);
        out.set_coeff(row, acc);
    }
    return out;
}

/// Max entry of (A - B), relative to the max entry of B (absolute when B = 0).
inline double relative_max_entry_error(const OperatorMatrix& A, const OperatorMatrix& B) {
    double diff = 0.0;
    for (std::size_t i = 0; i < A.entries.size(); ++i) {
        diff = std::max(diff, std::abs(A.entries[i] - B.entries[i]));
    }
    double scale = B.max_abs_entry();
    return scale > 0.0 ? diff / scale : diff;
}

/// Branch data of L_{omega,eps} at the N collocation nodes.
class CollocatedTransfer {
public:
    CollocatedTransfer(const FiberParams& params, CirclePoint omega, double eps, int K, int N)
        : map_(params, omega, eps), K_(K), N_(N) {
        detail::check_alias_free(K, N);
        const std::size_t count = 2 * static_cast<std::size_t>(N);
        z_.resize(count);
        weight_.resize(count);
        value_eps_.resize(count);
        slope_eps_.resize(count);
        value_omega_.resize(count);
        slope_omega_.resize(count);
        solve_preimages();
    }

    int degree() const { return K_; }
    int grid() const { return N_; }
    const FiberMap& map() const { return map_; }
    CirclePoint omega() const { return map_.omega(); }
    double eps() const { return map_.eps(); }

    /// Preimage (as e^{2 pi i y}) of node m on branch b.
    cplx preimage(int m, int b) const { return z_[index(m, b)]; }
    double preimage_point(int m, int b) const {
        double y = std::arg(z_[index(m, b)]) / two_pi;
        return y < 0.0 ? y + 1.0 : y;
    }

    SpectralField apply(const SpectralField& g) const {
        const SpectralField gK = g.resized(K_);
        GridFunction out;
        out.values.assign(static_cast<std::size_t>(N_), 0.0);
        for (int m = 0; m < N_; ++m) {
            double acc = 0.0;
            for (int b = 0; b < 2; ++b) {
                std::size_t i = index(m, b);
                acc += gK.evaluate(z_[i]) * weight_[i];
            }
            out.values[static_cast<std::size_t>(m)] = acc;
        }
        return analyze(out, K_);
    }

    /// d/dp of the branch sum, p in {eps, omega}:
    ///   sum_y g'(y) y_p / T'(y) - g(y) (T'_p(y) + T''(y) y_p) / T'(y)^2,
    /// with y_p = -T_p(y) / T'(y).
    SpectralField apply_derivative(OperatorKind kind, const SpectralField& g) const {
        if (kind == OperatorKind::transfer) return apply(g);
        const auto& val = kind == OperatorKind::d_eps ? value_eps_ : value_omega_;
        const auto& slope = kind == OperatorKind::d_eps ? slope_eps_ : slope_omega_;
        const SpectralField gK = g.resized(K_);
        GridFunction out;
        out.values.assign(static_cast<std::size_t>(N_), 0.0);
        for (int m = 0; m < N_; ++m) {
            double acc = 0.0;
            for (int b = 0; b < 2; ++b) {
                std::size_t i = index(m, b);
                auto [v, dv] = gK.evaluate_with_derivative(z_[i]);
                acc += dv * slope[i] + v * val[i];
            }
            out.values[static_cast<std::size_t>(m)] = acc;
        }
        return analyze(out, K_);
    }

    /// Dense matrix of the collocated operator, one column per e_k.
    OperatorMatrix assemble(OperatorKind kind) const {
        OperatorMatrix M;
        M.K = K_;
        M.kind = kind;
        M.omega = omega();
        M.eps = eps();
        M.entries.assign(static_cast<std::size_t>(M.dim() * M.dim()), cplx{});
        // e_k = cos_k + i sin_k with cos_k, sin_k real; columns follow by linearity
        for (int k = 0; k <= K_; ++k) {
            SpectralField lc = apply_derivative(kind, SpectralField::mode(K_, k, 1.0, 0.0));
            SpectralField ls = k == 0 ? SpectralField(K_)
                                      : apply_derivative(kind, SpectralField::mode(K_, k, 1.0, -0.5 * std::numbers::pi));
            for (int row = -K_; row <= K_; ++row) {
                cplx c = lc.coeff(row);
                cplx s = ls.coeff(row);
                M.at(row, k) = c + cplx{0.0, 1.0} * s;
                if (k > 0) M.at(row, -k) = c - cplx{0.0, 1.0} * s;
            }
        }
        return M;
    }

private:
    std::size_t index(int m, int b) const { return 2 * static_cast<std::size_t>(m) + static_cast<std::size_t>(b); }

    void solve_preimages() {
        // All 2N lift targets sorted increasingly, so each Newton solve is
        // warm-started from the previous root.
        struct Target {
            double value;
            std::size_t slot;
        };
        std::vector<Target> targets;
        targets.reserve(2 * static_cast<std::size_t>(N_));
        const double t0 = map_.lift(0.0);
        for (int m = 0; m < N_; ++m) {
            double x = GridFunction::node(m, N_);
            double m0 = std::ceil(t0 - x);
            if (x + m0 >= t0 + 1.0) m0 -= 1.0;
            targets.push_back({x + m0, index(m, 0)});
            targets.push_back({x + m0 + 1.0, index(m, 1)});
        }
        std::sort(targets.begin(), targets.end(),
                  [](const Target& l, const Target& r) { return l.value < r.value; });

        double y = 0.0;
        double prev_target = t0;
        for (const auto& t : targets) {
            double guess = y + (t.value - prev_target) / map_.dlift(y);
            y = newton(t.value, std::clamp(guess, 0.0, 1.0));
            prev_target = t.value;
            fill(t.slot, y);
        }
    }

    double newton(double target, double y) const {
        double lo = 0.0;
        double hi = 1.0;
        for (int it = 0; it < FiberMap::newton_cap; ++it) {
            double r = map_.lift(y) - target;
            if (std::abs(r) <= 0.25 * FiberMap::newton_tolerance) return y;
            if (r > 0.0) hi = y; else lo = y;
            double next = y - r / map_.dlift(y);
            if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
            if (next == y) break;
            y = next;
        }
        double r = map_.lift(y) - target;
        if (std::abs(r) > FiberMap::newton_tolerance) {
            std::ostringstream os;
            os << "inverse branch residual " << r << " at target " << target;
            throw Error(ErrorKind::NewtonDivergence, os.str());
        }
        return y;
    }

    void fill(std::size_t i, double y) {
        MapJet j = map_.jet_at(y);
        double w = 1.0 / j.dTdx;
        z_[i] = cplx{std::cos(two_pi * y), std::sin(two_pi * y)};
        weight_[i] = w;
        double ye = -j.dTdeps * w;
        slope_eps_[i] = ye * w;
        value_eps_[i] = -(j.d2Tdxdeps + j.d2Tdx2 * ye) * w * w;
        double yo = -j.dTdomega * w;
        slope_omega_[i] = yo * w;
        value_omega_[i] = -(j.d2Tdxdomega + j.d2Tdx2 * yo) * w * w;
    }

    FiberMap map_;
    int K_;
    int N_;
    std::vector<cplx> z_;
    std::vector<double> weight_;
    std::vector<double> value_eps_, slope_eps_, value_omega_, slope_omega_;
};

/// Counts of operator work, used to audit which derivative terms a pipeline
/// actually touched.
struct OperatorAudit {
    std::uint64_t transfer_built = 0;
    std::uint64_t transfer_applied = 0;
    std::uint64_t d_eps_applied = 0;
    std::uint64_t d_omega_applied = 0;
    std::uint64_t cache_hits = 0;
};

/// Source of collocated operators for one fiber family at fixed (K, N).
///
/// Operators are cached by exact (omega, eps); the cache is bounded and
/// evicts in insertion order. Safe for concurrent use.
class TransferFamily {
public:
    TransferFamily(FiberParams params, int K, int N, std::size_t capacity = 1024)
        : params_(params), K_(K), N_(N), capacity_(capacity) {
        validate(params);
        detail::check_alias_free(K, N);
    }

    const FiberParams& params() const { return params_; }
    int degree() const { return K_; }
    int grid() const { return N_; }

    std::shared_ptr<const CollocatedTransfer> at(CirclePoint omega, double eps) const {
        Key key{omega.turns(), std::bit_cast<std::uint64_t>(eps)};
        {
            std::lock_guard lock(mutex_);
            auto it = cache_.find(key);
            if (it != cache_.end()) {
                ++hits_;
                return it->second;
            }
        }
        auto op = std::make_shared<const CollocatedTransfer>(params_, omega, eps, K_, N_);
        ++built_;
        std::lock_guard lock(mutex_);
        auto [it, inserted] = cache_.emplace(key, op);
        if (inserted) {
            order_.push_back(key);
            while (order_.size() > capacity_) {
                cache_.erase(order_.front());
                order_.pop_front();
            }
        }
        return it->second;
    }

    SpectralField apply(CirclePoint omega, double eps, const SpectralField& g) const {
        ++applied_;
        return at(omega, eps)->apply(g);
    }

    SpectralField apply_d_eps(CirclePoint omega, double eps, const SpectralField& g) const {
        ++d_eps_;
        return at(omega, eps)->apply_derivative(OperatorKind::d_eps, g);
    }

    SpectralField apply_d_omega(CirclePoint omega, double eps, const SpectralField& g) const {
        ++d_omega_;
        return at(omega, eps)->apply_derivative(OperatorKind::d_omega, g);
    }

    /// Dense matrix of one operator; counted like an application of its kind.
    OperatorMatrix assemble(CirclePoint omega, double eps, OperatorKind kind) const {
        switch (kind) {
        case OperatorKind::transfer: ++applied_; break;
        case OperatorKind::d_eps: ++d_eps_; break;
        case OperatorKind::d_omega: ++d_omega_; break;
        }
        return at(omega, eps)->assemble(kind);
    }

    OperatorAudit audit() const {
        return {built_.load(), applied_.load(), d_eps_.load(), d_omega_.load(), hits_.load()};
    }

    void reset_audit() const {
        built_ = applied_ = d_eps_ = d_omega_ = hits_ = 0;
    }

private:
    struct Key {
        std::uint64_t omega;
        std::uint64_t eps;
        bool operator==(const Key&) const = default;
    };
    struct KeyHash {
        std::size_t operator()(const Key& k) const {
            return std::hash<std::uint64_t>{}(k.omega * 0x9E3779B97F4A7C15ull ^ k.eps);
        }
    };

    FiberParams params_;
    int K_;
    int N_;
    std::size_t capacity_;
    mutable std::mutex mutex_;
    mutable std::unordered_map<Key, std::shared_ptr<const CollocatedTransfer>, KeyHash> cache_;
    mutable std::deque<Key> order_;
    mutable std::atomic<std::uint64_t> built_{0}, applied_{0}, d_eps_{0}, d_omega_{0}, hits_{0};
};

inline OperatorMatrix assemble_transfer(const FiberParams& p, CirclePoint omega, double eps, int K, int N) {
    return CollocatedTransfer(p, omega, eps, K, N).assemble(OperatorKind::transfer);
}

inline OperatorMatrix assemble_d_eps(const FiberParams& p, CirclePoint omega, double eps, int K, int N) {
    return CollocatedTransfer(p, omega, eps, K, N).assemble(OperatorKind::d_eps);
}

inline OperatorMatrix assemble_d_omega(const FiberParams& p, CirclePoint omega, double eps, int K, int N) {
    return CollocatedTransfer(p, omega, eps, K, N).assemble(OperatorKind::d_omega);
}

/// L^n_{omega,eps} f = L_{sigma^{n-1} omega} ... L_{omega} f.
inline SpectralField cocycle_apply(const TransferFamily& family, const RotationBase& base,
                                   CirclePoint omega, double eps, int n, SpectralField f) {
    if (n < 0) throw Error(ErrorKind::DegenerateInput, "cocycle length must be >= 0");
    CirclePoint point = omega;
    const CirclePoint step = base.angle(eps);
    for (int j = 0; j < n; ++j) {
        f = family.apply(point, eps, f);
        point = point + step;
    }
    return f;
}

inline SpectralField cocycle_apply(const FiberParams& params, const RotationBase& base, CirclePoint omega,
                                   double eps, int n, const SpectralField& f, int N = 0) {
    int K = f.degree();
    TransferFamily family(params, K, N == 0 ? norm_grid(K) : N);
    return cocycle_apply(family, base, omega, eps, n, f);
}

}  // namespace skewresp
