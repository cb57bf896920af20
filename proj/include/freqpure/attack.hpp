#pragma once

// Adversarial perturbation of an image's Fourier magnitude, Fourier phase
// and/or pixels. The perturbed image is
//
//   x' = clip_[0,1]( Re F^-1( max(M * d_mag, 0) * exp(i (phi + d_phase)) ) + d_pixel )
//
// and the perturbation fields are optimized with Adam against
// lambda * distortion(x', x) - CE(f(x'), y).

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "freqpure/classifier.hpp"
#include "freqpure/fft.hpp"
#include "freqpure/nn.hpp"
#include "freqpure/spectral.hpp"
#include "freqpure/tensor.hpp"

namespace freqpure {

enum class AttackMode { pixel, mag, phase, phase_mag, all };

inline const std::vector<std::string>& attack_mode_names() {
    static const std::vector<std::string> names{"pixel", "mag", "phase", "phase_mag", "all"};
    return names;
}

inline std::string to_string(AttackMode m) { return attack_mode_names()[std::size_t(m)]; }

inline AttackMode attack_mode_from_string(const std::string& s) {
    const auto& names = attack_mode_names();
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == s) return AttackMode(i);
    throw InvalidInput("unknown attack mode '" + s + "' (expected one of: pixel, mag, phase, phase_mag, all)");
}

struct ActiveFields {
    bool mag = false, phase = false, pixel = false;

    bool spectral() const { return mag || phase; }
};

inline ActiveFields active_fields(AttackMode m) {
    switch (m) {
    case AttackMode::pixel: return {false, false, true};
    case AttackMode::mag: return {true, false, false};
    case AttackMode::phase: return {false, true, false};
    case AttackMode::phase_mag: return {true, true, false};
    case AttackMode::all: return {true, true, true};
    }
    return {};
}

/// How the distortion term measures x' - x, per image, then averaged over the batch.
enum class Distortion {
    mse, ///< mean squared pixel difference
    rms  ///< root of the above
};

inline std::string to_string(Distortion d) { return d == Distortion::mse ? "mse" : "rms"; }

inline Distortion distortion_from_string(const std::string& s) {
    if (s == "mse") return Distortion::mse;
    if (s == "rms") return Distortion::rms;
    throw InvalidInput("unknown distortion '" + s + "' (expected mse|rms)");
}

struct AttackConfig {
    double lambda = 5e4;
    double learning_rate = 5e-3;
    double weight_decay = 5e-6;
    std::size_t max_iterations = 1000;
    std::size_t patience = 5;
    AttackMode mode = AttackMode::pixel;
    Distortion distortion = Distortion::mse;

    void validate() const {
        if (!(lambda >= 0.0)) throw InvalidInput("attack: lambda must be non-negative");
        if (!(learning_rate > 0.0)) throw InvalidInput("attack: learning_rate must be positive");
        if (!(weight_decay >= 0.0)) throw InvalidInput("attack: weight_decay must be non-negative");
        if (max_iterations == 0) throw InvalidInput("attack: max_iterations must be positive");
        if (patience == 0) throw InvalidInput("attack: patience must be positive");
    }
};

/// Multiplicative magnitude field, additive phase field (radians), additive
/// pixel field. Inactive fields stay at identity (1, 0, 0).
struct PerturbationSet {
    Tensor delta_mag;
    Tensor delta_phase;
    Tensor delta_pixel;
    ActiveFields active;

    static PerturbationSet identity(const Shape& s, ActiveFields active = {}) {
        return {Tensor(s, 1.0), Tensor(s, 0.0), Tensor(s, 0.0), active};
    }

    void require_shape(const Shape& s) const {
        if (!(delta_mag.shape() == s) || !(delta_phase.shape() == s) || !(delta_pixel.shape() == s))
            throw InvalidInput("perturbation fields do not match image shape " + s.str());
    }
};

/// Gradients of a scalar loss with respect to each perturbation field.
struct PerturbationGrad {
    Tensor mag, phase, pixel;
};

/// Differentiable map (perturbation fields) -> perturbed image for a fixed
/// clean batch. Caches the clean spectrum.
class PerturbationModel {
public:
    explicit PerturbationModel(const ImageBatch& x) : x_(x) {
        x.require_range(RangeTag::unit, "apply_perturbations");
        if (!x.data.all_finite()) throw InvalidInput("apply_perturbations: non-finite input");
        const Shape s = x.shape();
        spectrum_.resize(s.n * s.c);
        for (std::size_t b = 0; b < s.n; ++b)
            for (std::size_t c = 0; c < s.c; ++c) spectrum_[b * s.c + c] = plane_spectrum(x.data.plane(b, c), s.h, s.w);
    }

    const ImageBatch& clean() const { return x_; }

    struct Forward {
        ImageBatch image;                           ///< x'
        Tensor pre_clip;                            ///< x~' before the [0,1] clip
        std::vector<std::vector<fft::cplx>> z;      ///< perturbed spectra, per plane
        double max_imag_residual = 0.0;
    };

    Forward forward(const PerturbationSet& p) const {
        const Shape s = x_.shape();
        p.require_shape(s);
        Forward f{ImageBatch{Tensor(s), RangeTag::unit}, Tensor(s), {}, 0.0};
        if (p.active.spectral()) {
            f.z.resize(s.n * s.c);
            for (std::size_t b = 0; b < s.n; ++b) {
                for (std::size_t c = 0; c < s.c; ++c) {
                    const auto& X = spectrum_[b * s.c + c];
                    auto dm = p.delta_mag.plane(b, c);
                    auto dp = p.delta_phase.plane(b, c);
                    std::vector<fft::cplx> z(X.size());
                    for (std::size_t i = 0; i < z.size(); ++i) {
                        const double mag = std::max(std::abs(X[i]) * dm[i], 0.0);
                        z[i] = std::polar(mag, std::arg(X[i]) + dp[i]);
                    }
                    std::vector<fft::cplx> img = z;
                    fft::fft2(img, s.h, s.w, true);
                    auto dst = f.pre_clip.plane(b, c);
                    for (std::size_t i = 0; i < img.size(); ++i) {
                        dst[i] = img[i].real();
                        f.max_imag_residual = std::max(f.max_imag_residual, std::abs(img[i].imag()));
                    }
                    f.z[b * s.c + c] = std::move(z);
                }
            }
        } else {
            // identity spectrum: F^-1(F(x)) = x
            f.pre_clip = x_.data;
        }
        f.pre_clip += p.delta_pixel;
        f.image.data = f.pre_clip;
        f.image.clip();
        return f;
    }

    /// Backpropagates dL/dx' through the clip, the pixel offset and the
    /// spectral reconstruction. Clips pass gradient only strictly inside range.
    PerturbationGrad backward(const Forward& f, const Tensor& grad_image, const PerturbationSet& p) const {
        const Shape s = x_.shape();
        PerturbationGrad g{Tensor(s), Tensor(s), Tensor(s)};
        Tensor gt = grad_image;
        for (std::size_t i = 0; i < gt.size(); ++i)
            if (f.pre_clip[i] < 0.0 || f.pre_clip[i] > 1.0) gt[i] = 0.0;
        if (p.active.pixel) g.pixel = gt;
        if (!p.active.spectral()) return g;
        const double inv_n = 1.0 / double(s.plane());
        for (std::size_t b = 0; b < s.n; ++b) {
            for (std::size_t c = 0; c < s.c; ++c) {
                // dL/dZ (conjugate-Wirtinger form) of L(Re F^-1 Z) is F(g) / (h w)
                auto G = plane_spectrum(gt.plane(b, c), s.h, s.w);
                const auto& X = spectrum_[b * s.c + c];
                const auto& Z = f.z[b * s.c + c];
                auto dm = p.delta_mag.plane(b, c);
                auto gm = g.mag.plane(b, c);
                auto gp = g.phase.plane(b, c);
                for (std::size_t i = 0; i < G.size(); ++i) {
                    const fft::cplx Gi = G[i] * inv_n;
                    const double m = std::abs(X[i]);
                    if (p.active.mag && m * dm[i] > 0.0) {
                        const fft::cplx unit = std::polar(1.0, std::arg(Z[i]));
                        gm[i] = (std::conj(Gi) * unit).real() * m;
                    }
                    if (p.active.phase) gp[i] = -(std::conj(Gi) * Z[i]).imag();
                }
            }
        }
        return g;
    }

private:
    ImageBatch x_;
    std::vector<std::vector<fft::cplx>> spectrum_;
};

inline ImageBatch apply_perturbations(const ImageBatch& x, const PerturbationSet& p) {
    return PerturbationModel(x).forward(p).image;
}

/// Per-image distortion of x_adv against x, averaged over the batch, and its gradient.
inline double distortion(const Tensor& x_adv, const Tensor& x, Distortion kind, Tensor* grad = nullptr) {
    x_adv.require_same(x, "distortion");
    const std::size_t n = x.shape().n, d = x.shape().item();
    if (grad) *grad = Tensor(x.shape());
    double total = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
        auto a = x_adv.item(b), c = x.item(b);
        double ss = 0.0;
        for (std::size_t i = 0; i < d; ++i) ss += (a[i] - c[i]) * (a[i] - c[i]);
        const double mse = ss / double(d);
        if (kind == Distortion::mse) {
            total += mse;
            if (grad) {
                auto g = grad->item(b);
                for (std::size_t i = 0; i < d; ++i) g[i] = 2.0 * (a[i] - c[i]) / double(d) / double(n);
            }
        } else {
            const double rms = std::sqrt(mse);
            total += rms;
            // subgradient 0 at rms = 0
            if (grad && rms > 0.0) {
                auto g = grad->item(b);
                for (std::size_t i = 0; i < d; ++i) g[i] = (a[i] - c[i]) / (double(d) * rms) / double(n);
            }
        }
    }
    return n ? total / double(n) : 0.0;
}

/// lambda * distortion(x_adv, x) - sum_k y_k log softmax_k(logits), batch-averaged:
/// the distortion-weighted cross-entropy. The attack descends
/// lambda * distortion - CE instead, which raises the cross-entropy.
inline double attack_loss(const ImageBatch& x_adv, const ImageBatch& x, const Tensor& logits,
                          std::span<const int> labels, double lambda, Distortion kind = Distortion::mse) {
    if (logits.shape().n != x.shape().n) throw InvalidInput("attack_loss: logits rows must equal batch size");
    const double ce = nn::softmax_cross_entropy(logits, labels, nullptr);
    return lambda * distortion(x_adv.data, x.data, kind) + ce;
}

/// Gradient of attack_loss with respect to x_adv through the classifier.
inline Tensor attack_loss_input_gradient(const Classifier& clf, const ImageBatch& x_adv, const ImageBatch& x,
                                         std::span<const int> labels, double lambda,
                                         Distortion kind = Distortion::mse) {
    Tensor gd;
    distortion(x_adv.data, x.data, kind, &gd);
    Tensor g = clf.input_gradient(x_adv.data, [&](const Tensor& logits) {
        Tensor gl;
        nn::softmax_cross_entropy(logits, labels, &gl);
        return gl;
    });
    gd *= lambda;
    return g += gd;
}

struct TracePoint {
    std::size_t iteration;
    double objective;
    double l2;
    double cross_entropy;
    double imag_residual;
};

/// Per-image optimisation history.
struct AttackTrace {
    std::vector<TracePoint> points;
    bool early_stopped = false;
    double best_objective = std::numeric_limits<double>::infinity();
    std::size_t best_iteration = 0;
};

/// Thrown when an attack cannot continue; carries the trace so far.
class AttackAborted : public std::runtime_error {
public:
    AttackAborted(const std::string& what, std::size_t iter, AttackTrace t)
        : std::runtime_error(what), iteration(iter), trace(std::move(t)) {}
    std::size_t iteration;
    AttackTrace trace;
};

struct AttackResult {
    ImageBatch adversarial;
    std::vector<AttackTrace> traces; ///< one per batch item
    std::vector<PerturbationSet> perturbations; ///< final fields per item
};

namespace detail {

inline Tensor slice_item(const Tensor& t, std::size_t b) {
    Shape s = t.shape();
    s.n = 1;
    auto src = t.item(b);
    return Tensor(s, std::vector<double>(src.begin(), src.end()));
}

} // namespace detail

/// Attacks one image (batch of 1), starting from identity fields.
inline std::pair<ImageBatch, AttackTrace> attack_single(const ImageBatch& x, int label, const Classifier& clf,
                                                        const AttackConfig& cfg, PerturbationSet* final_fields = nullptr) {
    const Shape s = x.shape();
    const PerturbationModel model(x);
    const ActiveFields act = active_fields(cfg.mode);
    PerturbationSet p = PerturbationSet::identity(s, act);
    const std::vector<int> labels{label};

    // parameter vector: [mag | phase | pixel] restricted to active fields
    const std::size_t d = s.size();
    std::vector<Tensor*> fields;
    std::vector<double> anchors;
    if (act.mag) fields.push_back(&p.delta_mag), anchors.insert(anchors.end(), d, 1.0);
    if (act.phase) fields.push_back(&p.delta_phase), anchors.insert(anchors.end(), d, 0.0);
    if (act.pixel) fields.push_back(&p.delta_pixel), anchors.insert(anchors.end(), d, 0.0);
    std::vector<double> params(anchors), grads(anchors.size());
    nn::Adam adam(params.size(), cfg.learning_rate, cfg.weight_decay);

    AttackTrace trace;
    ImageBatch best = x;
    std::size_t stall = 0;
    for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
        const auto fwd = model.forward(p);
        double ce = 0.0;
        Tensor ce_input_grad;
        try {
            ce_input_grad = clf.input_gradient(fwd.image.data, [&](const Tensor& logits) {
                Tensor gl;
                ce = nn::softmax_cross_entropy(logits, labels, &gl);
                return gl;
            });
        } catch (const std::exception& e) {
            throw AttackAborted("classifier failed at iteration " + std::to_string(it) + ": " + e.what(), it, trace);
        }
        Tensor dist_grad;
        const double l2 = distortion(fwd.image.data, x.data, cfg.distortion, &dist_grad);
        const double objective = cfg.lambda * l2 - ce;
        if (!std::isfinite(objective))
            throw AttackAborted("non-finite attack objective at iteration " + std::to_string(it), it, trace);
        trace.points.push_back({it, objective, l2, ce, fwd.max_imag_residual});

        if (objective < trace.best_objective) {
            trace.best_objective = objective;
            trace.best_iteration = it;
            best = fwd.image;
            stall = 0;
        } else if (++stall >= cfg.patience) {
            trace.early_stopped = true;
            break;
        }
        if (it == cfg.max_iterations) break;

        // d(objective)/dx' = lambda * d(distortion) - d(CE)
        dist_grad *= cfg.lambda;
        dist_grad -= ce_input_grad;
        const PerturbationGrad pg = model.backward(fwd, dist_grad, p);
        std::size_t off = 0;
        auto pack = [&](const Tensor& field, const Tensor& grad) {
            std::copy(field.values().begin(), field.values().end(), params.begin() + std::ptrdiff_t(off));
            std::copy(grad.values().begin(), grad.values().end(), grads.begin() + std::ptrdiff_t(off));
            off += d;
        };
        if (act.mag) pack(p.delta_mag, pg.mag);
        if (act.phase) pack(p.delta_phase, pg.phase);
        if (act.pixel) pack(p.delta_pixel, pg.pixel);
        adam.step(params, grads, anchors);
        off = 0;
        for (Tensor* f : fields) {
            std::copy(params.begin() + std::ptrdiff_t(off), params.begin() + std::ptrdiff_t(off + d), f->values().begin());
            off += d;
        }
        if (act.spectral()) {
            auto [m, ph] = symmetrize(p.delta_mag, p.delta_phase);
            if (act.mag) p.delta_mag = std::move(m);
            if (act.phase) p.delta_phase = std::move(ph);
        }
    }
    if (final_fields) *final_fields = std::move(p);
    return {std::move(best), std::move(trace)};
}

/// Attacks every image of the batch independently and returns the images
/// that achieved each run's best objective. The seed is currently unused.
inline AttackResult run_attack(const ImageBatch& x, std::span<const int> labels, const Classifier& clf,
                               const AttackConfig& cfg, std::uint64_t seed = 0) {
    (void)seed;
    cfg.validate();
    x.require_range(RangeTag::unit, "run_attack");
    if (labels.size() != x.shape().n) throw InvalidInput("run_attack: label count does not match batch");
    AttackResult result{ImageBatch{Tensor(x.shape()), RangeTag::unit}, {}, {}};
    for (std::size_t b = 0; b < x.shape().n; ++b) {
        ImageBatch single{detail::slice_item(x.data, b), RangeTag::unit};
        PerturbationSet fields;
        auto [adv, trace] = attack_single(single, labels[b], clf, cfg, &fields);
        std::copy(adv.data.values().begin(), adv.data.values().end(), result.adversarial.data.item(b).begin());
        result.traces.push_back(std::move(trace));
        result.perturbations.push_back(std::move(fields));
    }
    return result;
}

/// x_adv - x, unclipped and untagged.
inline ImageBatch extract_perturbation(const ImageBatch& x, const ImageBatch& x_adv) {
    x.data.require_same(x_adv.data, "extract_perturbation");
    return ImageBatch{x_adv.data - x.data, RangeTag::signed_unit};
}

/// Tab-separated rows: item, iteration, objective, l2, cross_entropy.
inline void write_traces(const std::string& path, const std::vector<AttackTrace>& traces) {
    std::ofstream os(path);
    if (!os) throw InvalidInput("cannot write trace to " + path);
    os << "item\titeration\tobjective\tl2\tcross_entropy\n" << std::setprecision(17);
    for (std::size_t b = 0; b < traces.size(); ++b)
        for (const auto& p : traces[b].points)
            os << b << '\t' << p.iteration << '\t' << p.objective << '\t' << p.l2 << '\t' << p.cross_entropy << '\n';
}

} // namespace freqpure
