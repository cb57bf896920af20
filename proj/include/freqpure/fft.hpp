#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <vector>

namespace freqpure::fft {

using cplx = std::complex<double>;

/// One-dimensional complex DFT of fixed length. Radix-2 for powers of two,
/// Bluestein's chirp-z otherwise. Immutable after construction.
class Plan1d {
public:
    explicit Plan1d(std::size_t n) : n_(n) {
        if (n_ <= 1) return;
        if (is_pow2(n_)) {
            build_radix2(n_, twiddle_, bitrev_);
        } else {
            // chirp w_k = exp(-i pi k^2 / n), convolved on a power-of-two grid
            m_ = 1;
            while (m_ < 2 * n_ - 1) m_ <<= 1;
            build_radix2(m_, twiddle_, bitrev_);
            chirp_.resize(n_);
            for (std::size_t k = 0; k < n_; ++k) {
                // k^2 mod 2n keeps the angle small for large k
                const std::size_t k2 = (k * k) % (2 * n_);
                chirp_[k] = std::polar(1.0, -std::numbers::pi * double(k2) / double(n_));
            }
            std::vector<cplx> b(m_, cplx{});
            b[0] = std::conj(chirp_[0]);
            for (std::size_t k = 1; k < n_; ++k) b[k] = b[m_ - k] = std::conj(chirp_[k]);
            radix2(b, false);
            chirp_fft_ = std::move(b);
        }
    }

    std::size_t size() const { return n_; }

    /// In-place transform of `n` elements spaced `stride` apart. No scaling.
    void run(cplx* x, std::size_t stride, bool inverse, std::vector<cplx>& scratch) const {
        if (n_ <= 1) return;
        if (m_ == 0) {
            scratch.resize(n_);
            for (std::size_t i = 0; i < n_; ++i) scratch[i] = x[i * stride];
            radix2(scratch, inverse);
            for (std::size_t i = 0; i < n_; ++i) x[i * stride] = scratch[i];
            return;
        }
        scratch.assign(m_, cplx{});
        // inverse DFT = conj(DFT(conj(x)))
        for (std::size_t k = 0; k < n_; ++k) {
            const cplx v = inverse ? std::conj(x[k * stride]) : x[k * stride];
            scratch[k] = v * chirp_[k];
        }
        radix2(scratch, false);
        for (std::size_t k = 0; k < m_; ++k) scratch[k] *= chirp_fft_[k];
        radix2(scratch, true);
        const double inv_m = 1.0 / double(m_);
        for (std::size_t k = 0; k < n_; ++k) {
            const cplx v = scratch[k] * inv_m * chirp_[k];
            x[k * stride] = inverse ? std::conj(v) : v;
        }
    }

private:
    static bool is_pow2(std::size_t n) { return (n & (n - 1)) == 0; }

    static void build_radix2(std::size_t n, std::vector<cplx>& tw, std::vector<std::size_t>& rev) {
        tw.resize(n / 2);
        for (std::size_t k = 0; k < n / 2; ++k)
            tw[k] = std::polar(1.0, -2.0 * std::numbers::pi * double(k) / double(n));
        rev.resize(n);
        std::size_t bits = 0;
        while ((std::size_t{1} << bits) < n) ++bits;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t r = 0;
            for (std::size_t b = 0; b < bits; ++b)
                if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
            rev[i] = r;
        }
    }

    void radix2(std::vector<cplx>& a, bool inverse) const {
        const std::size_t n = a.size();
        for (std::size_t i = 0; i < n; ++i)
            if (i < bitrev_[i]) std::swap(a[i], a[bitrev_[i]]);
        for (std::size_t len = 2; len <= n; len <<= 1) {
            const std::size_t half = len / 2, step = n / len;
            for (std::size_t i = 0; i < n; i += len) {
                for (std::size_t j = 0; j < half; ++j) {
                    const cplx w = inverse ? std::conj(twiddle_[j * step]) : twiddle_[j * step];
                    const cplx u = a[i + j], v = a[i + j + half] * w;
                    a[i + j] = u + v;
                    a[i + j + half] = u - v;
                }
            }
        }
    }

    std::size_t n_ = 0;
    std::size_t m_ = 0; // Bluestein padded length, 0 for radix-2
    std::vector<cplx> twiddle_;
    std::vector<std::size_t> bitrev_;
    std::vector<cplx> chirp_;
    std::vector<cplx> chirp_fft_;
};

/// Per-thread plan cache; plans are built once per length.
inline const Plan1d& plan(std::size_t n) {
    thread_local std::map<std::size_t, std::unique_ptr<Plan1d>> cache;
    auto& slot = cache[n];
    if (!slot) slot = std::make_unique<Plan1d>(n);
    return *slot;
}

/// In-place 2-D DFT of an h x w row-major plane. Forward is unnormalized,
/// inverse carries the 1/(h*w) factor.
inline void fft2(std::span<cplx> x, std::size_t h, std::size_t w, bool inverse) {
    thread_local std::vector<cplx> scratch;
    const Plan1d& pr = plan(w);
    for (std::size_t r = 0; r < h; ++r) pr.run(x.data() + r * w, 1, inverse, scratch);
    const Plan1d& pc = plan(h);
    for (std::size_t c = 0; c < w; ++c) pc.run(x.data() + c, w, inverse, scratch);
    if (inverse) {
        const double s = 1.0 / double(h * w);
        for (cplx& v : x) v *= s;
    }
}

/// Reference O(n^2) 1-D DFT; used to check the fast paths.
inline std::vector<cplx> naive_dft(std::span<const cplx> x, bool inverse = false) {
    const std::size_t n = x.size();
    std::vector<cplx> out(n);
    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t k = 0; k < n; ++k) {
        cplx acc{};
        for (std::size_t j = 0; j < n; ++j)
            acc += x[j] * std::polar(1.0, sign * 2.0 * std::numbers::pi * double((j * k) % n) / double(n));
        out[k] = inverse ? acc / double(n) : acc;
    }
    return out;
}

} // namespace freqpure::fft
