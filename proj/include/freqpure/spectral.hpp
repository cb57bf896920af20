#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "freqpure/fft.hpp"
#include "freqpure/tensor.hpp"

namespace freqpure {

/// Per-channel magnitude and phase of the 2-D DFT of an image batch.
/// Phase lives in (-pi, pi].
struct SpectralDecomposition {
    Tensor magnitude;
    Tensor phase;

    const Shape& shape() const { return magnitude.shape(); }
};

struct Recomposition {
    ImageBatch image;
    /// Largest |imag| of the inverse transform; zero for Hermitian spectra.
    double max_imag_residual = 0.0;
};

/// Index of the point reflection (u,v) -> (-u mod h, -v mod w) within a plane.
inline std::size_t reflect_index(std::size_t idx, std::size_t h, std::size_t w) {
    const std::size_t u = idx / w, v = idx % w;
    return ((h - u) % h) * w + (w - v) % w;
}

inline double wrap_phase(double p) {
    p = std::remainder(p, 2.0 * std::numbers::pi);
    return p <= -std::numbers::pi ? p + 2.0 * std::numbers::pi : p;
}

/// Complex spectrum of one real plane.
inline std::vector<fft::cplx> plane_spectrum(std::span<const double> plane, std::size_t h, std::size_t w) {
    std::vector<fft::cplx> buf(plane.begin(), plane.end());
    fft::fft2(buf, h, w, false);
    return buf;
}

inline SpectralDecomposition decompose(const ImageBatch& img) {
    if (!img.data.all_finite()) throw InvalidInput("decompose: image contains non-finite values");
    const Shape s = img.shape();
    SpectralDecomposition out{Tensor(s), Tensor(s)};
    for (std::size_t b = 0; b < s.n; ++b) {
        for (std::size_t c = 0; c < s.c; ++c) {
            auto spec = plane_spectrum(img.data.plane(b, c), s.h, s.w);
            auto mag = out.magnitude.plane(b, c);
            auto ph = out.phase.plane(b, c);
            for (std::size_t i = 0; i < spec.size(); ++i) {
                mag[i] = std::abs(spec[i]);
                ph[i] = mag[i] == 0.0 ? 0.0 : wrap_phase(std::arg(spec[i]));
            }
        }
    }
    return out;
}

/// Real part of the inverse DFT of magnitude * exp(i phase).
inline Recomposition recompose(const SpectralDecomposition& spec, RangeTag range = RangeTag::unit) {
    const Shape s = spec.shape();
    spec.magnitude.require_same(spec.phase, "recompose");
    for (double m : spec.magnitude.values())
        if (!(m >= 0.0)) throw InvalidInput("recompose: magnitude must be non-negative");
    Recomposition out{ImageBatch{Tensor(s), range}, 0.0};
    std::vector<fft::cplx> buf(s.plane());
    for (std::size_t b = 0; b < s.n; ++b) {
        for (std::size_t c = 0; c < s.c; ++c) {
            auto mag = spec.magnitude.plane(b, c);
            auto ph = spec.phase.plane(b, c);
            for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = std::polar(mag[i], ph[i]);
            fft::fft2(buf, s.h, s.w, true);
            auto dst = out.image.data.plane(b, c);
            for (std::size_t i = 0; i < buf.size(); ++i) {
                dst[i] = buf[i].real();
                out.max_imag_residual = std::max(out.max_imag_residual, std::abs(buf[i].imag()));
            }
        }
    }
    return out;
}

/// Projects a (magnitude factor, phase offset) pair onto the Hermitian-compatible
/// subspace: magnitude even, phase odd under point reflection. Self-conjugate
/// bins end up with zero phase.
inline std::pair<Tensor, Tensor> symmetrize(const Tensor& delta_mag, const Tensor& delta_phase) {
    delta_mag.require_same(delta_phase, "symmetrize");
    const Shape s = delta_mag.shape();
    Tensor mag(s), ph(s);
    for (std::size_t b = 0; b < s.n; ++b) {
        for (std::size_t c = 0; c < s.c; ++c) {
            auto m_in = delta_mag.plane(b, c);
            auto p_in = delta_phase.plane(b, c);
            auto m_out = mag.plane(b, c);
            auto p_out = ph.plane(b, c);
            for (std::size_t i = 0; i < s.plane(); ++i) {
                const std::size_t r = reflect_index(i, s.h, s.w);
                m_out[i] = 0.5 * (m_in[i] + m_in[r]);
                p_out[i] = 0.5 * (p_in[i] - p_in[r]);
            }
        }
    }
    return {std::move(mag), std::move(ph)};
}

/// Radially binned spectrum energy, lowest frequency first.
struct SpectrumHistogram {
    std::vector<double> radius; ///< bin centres, normalized frequency in [0, sqrt(2)/2]
    std::vector<double> energy; ///< mean log(1 + |F|^2) per bin

    std::size_t bin_count() const { return radius.size(); }
    std::size_t argmax() const {
        return std::size_t(std::max_element(energy.begin(), energy.end()) - energy.begin());
    }
};

namespace detail {

struct RadialAccumulator {
    std::vector<double> sum;
    std::vector<std::size_t> count;
};

inline void accumulate_plane(std::span<const double> plane, std::size_t h, std::size_t w, std::size_t bins,
                             RadialAccumulator& acc) {
    const auto spec = plane_spectrum(plane, h, w);
    const double r_max = std::numbers::sqrt2 / 2.0;
    for (std::size_t u = 0; u < h; ++u) {
        // signed frequency of row u after moving DC to the centre
        const double fu = (u < (h + 1) / 2 ? double(u) : double(u) - double(h)) / double(h);
        for (std::size_t v = 0; v < w; ++v) {
            const double fv = (v < (w + 1) / 2 ? double(v) : double(v) - double(w)) / double(w);
            const double r = std::sqrt(fu * fu + fv * fv);
            std::size_t bin = std::size_t(r / r_max * double(bins));
            bin = std::min(bin, bins - 1);
            acc.sum[bin] += std::log1p(std::norm(spec[u * w + v]));
            acc.count[bin] += 1;
        }
    }
}

inline SpectrumHistogram finish(const RadialAccumulator& acc, std::size_t bins) {
    SpectrumHistogram hist;
    const double width = std::numbers::sqrt2 / 2.0 / double(bins);
    for (std::size_t i = 0; i < bins; ++i) {
        hist.radius.push_back((double(i) + 0.5) * width);
        // empty annuli (tiny images) report zero energy
        hist.energy.push_back(acc.count[i] ? acc.sum[i] / double(acc.count[i]) : 0.0);
    }
    return hist;
}

} // namespace detail

/// Radial spectrum of one batch item, averaged over its channels.
inline SpectrumHistogram radial_spectrum_item(const ImageBatch& perturbation, std::size_t item, std::size_t bins) {
    if (bins < 2) throw InvalidInput("radial_spectrum: need at least 2 bins");
    const Shape s = perturbation.shape();
    detail::RadialAccumulator acc{std::vector<double>(bins, 0.0), std::vector<std::size_t>(bins, 0)};
    for (std::size_t c = 0; c < s.c; ++c) detail::accumulate_plane(perturbation.data.plane(item, c), s.h, s.w, bins, acc);
    return detail::finish(acc, bins);
}

/// Radial spectrum pooled over every item and channel of the batch.
inline SpectrumHistogram radial_spectrum(const ImageBatch& perturbation, std::size_t bins) {
    if (bins < 2) throw InvalidInput("radial_spectrum: need at least 2 bins");
    if (!perturbation.data.all_finite()) throw InvalidInput("radial_spectrum: non-finite perturbation");
    const Shape s = perturbation.shape();
    detail::RadialAccumulator acc{std::vector<double>(bins, 0.0), std::vector<std::size_t>(bins, 0)};
    for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t c = 0; c < s.c; ++c) detail::accumulate_plane(perturbation.data.plane(b, c), s.h, s.w, bins, acc);
    return detail::finish(acc, bins);
}

/// Tab-separated (radius, energy) rows under a single header line.
inline void write_histogram(const std::string& path, const SpectrumHistogram& hist) {
    std::ofstream os(path);
    if (!os) throw InvalidInput("cannot write histogram to " + path);
    os << "radius\tenergy\n" << std::setprecision(17);
    for (std::size_t i = 0; i < hist.bin_count(); ++i) os << hist.radius[i] << '\t' << hist.energy[i] << '\n';
}

inline SpectrumHistogram read_histogram(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InvalidInput("cannot read histogram " + path);
    std::string header;
    std::getline(is, header);
    SpectrumHistogram hist;
    double r, e;
    while (is >> r >> e) {
        hist.radius.push_back(r);
        hist.energy.push_back(e);
    }
    return hist;
}

} // namespace freqpure
