#pragma once

// Desk-scale models: a synthetic band-limited image dataset, a small CNN
// classifier and a denoising-score-matching network, plus weight files and
// manifest-driven loaders.
//
// Weight file layout (.fqm):
//   8 bytes   magic "FQMODEL1"
//   8 bytes   little-endian u64 header length L
//   L bytes   JSON header: kind, input [c,h,w], architecture fields, and an
//             ordered "arrays" list of {name, size}
//   ...       the arrays' little-endian doubles, concatenated in list order

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "freqpure/classifier.hpp"
#include "freqpure/diffusion.hpp"
#include "freqpure/fft.hpp"
#include "freqpure/io.hpp"
#include "freqpure/nn.hpp"
#include "freqpure/spectral.hpp"

namespace freqpure {

// ---------------------------------------------------------------- dataset

/// Class-conditional Gaussian mixture living in the span of low-frequency
/// Fourier modes, plus white pixel noise, clipped to [0,1].
struct ToyDatasetSpec {
    std::size_t channels = 1, height = 32, width = 32;
    std::size_t class_count = 10;
    std::size_t train_size = 5000, val_size = 500, test_size = 1000;
    std::uint64_t seed = 1234;
    std::size_t band = 3;        ///< highest spatial frequency index used
    double separation = 4.0;     ///< class-mean spread in latent units
    double spread = 7.0;         ///< within-class spread in latent units
    double amplitude = 0.15;     ///< pixel RMS of the latent signal
    double pixel_noise = 0.01;

    void validate() const {
        if (channels == 0 || height == 0 || width == 0) throw InvalidInput("dataset: image dimensions must be positive");
        if (height % 8 != 0 || width % 8 != 0) throw InvalidInput("dataset: height and width must be multiples of 8");
        if (2 * band >= std::min(height, width)) throw InvalidInput("dataset: band too high for the image size");
        if (class_count < 2) throw InvalidInput("dataset: need at least two classes");
        if (train_size == 0 || test_size == 0) throw InvalidInput("dataset: train and test splits must be non-empty");
        if (!(separation > 0.0) || !(spread >= 0.0) || !(amplitude > 0.0) || !(pixel_noise >= 0.0))
            throw InvalidInput("dataset: separation/amplitude must be positive, spread/noise non-negative");
    }

    Shape item_shape() const { return {1, channels, height, width}; }
};

struct LabeledBatch {
    ImageBatch images;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }

    LabeledBatch subset(std::span<const std::size_t> idx) const {
        LabeledBatch out{ImageBatch{images.data.gather(idx), images.range}, {}};
        for (std::size_t i : idx) out.labels.push_back(labels[i]);
        return out;
    }
};

struct ToyDataset {
    LabeledBatch train, val, test;
};

/// Unit-RMS cos/sin images for frequencies (u, v) with 0 <= u <= band,
/// |v| <= band, one representative per conjugate pair.
inline std::vector<std::vector<double>> fourier_basis(std::size_t h, std::size_t w, std::size_t band) {
    std::vector<std::vector<double>> basis;
    const auto b = std::ptrdiff_t(band);
    for (std::ptrdiff_t u = 0; u <= b; ++u) {
        for (std::ptrdiff_t v = -b; v <= b; ++v) {
            if (u == 0 && v <= 0) continue;
            std::vector<double> c(h * w), s(h * w);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double a = 2.0 * std::numbers::pi * (double(u) * double(y) / double(h) + double(v) * double(x) / double(w));
                    c[y * w + x] = std::cos(a);
                    s[y * w + x] = std::sin(a);
                }
            for (auto* img : {&c, &s}) {
                double ss = 0.0;
                for (double e : *img) ss += e * e;
                const double norm = std::sqrt(ss / double(h * w));
                for (double& e : *img) e /= norm;
                basis.push_back(std::move(*img));
            }
        }
    }
    return basis;
}

inline ToyDataset make_toy_dataset(const ToyDatasetSpec& spec) {
    spec.validate();
    const auto basis = fourier_basis(spec.height, spec.width, spec.band);
    const std::size_t d = basis.size(), plane = spec.height * spec.width;
    const double sd = std::sqrt(double(d));
    std::normal_distribution<double> normal(0.0, 1.0);

    std::mt19937_64 proto_gen(spec.seed);
    std::vector<double> protos(spec.class_count * spec.channels * d);
    for (double& p : protos) p = normal(proto_gen) * spec.separation / sd;

    std::mt19937_64 gen(spec.seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_int_distribution<int> pick(0, int(spec.class_count) - 1);
    const double latent_norm = std::sqrt((spec.separation * spec.separation + spec.spread * spec.spread) / double(d));
    auto draw = [&](std::size_t n) {
        LabeledBatch out{ImageBatch{Tensor(Shape{n, spec.channels, spec.height, spec.width}), RangeTag::unit}, {}};
        std::vector<double> z(d);
        for (std::size_t i = 0; i < n; ++i) {
            const int y = pick(gen);
            out.labels.push_back(y);
            for (std::size_t c = 0; c < spec.channels; ++c) {
                const double* mu = protos.data() + (std::size_t(y) * spec.channels + c) * d;
                for (std::size_t k = 0; k < d; ++k) z[k] = (mu[k] + normal(gen) * spec.spread / sd) / latent_norm;
                auto px = out.images.data.plane(i, c);
                for (std::size_t p = 0; p < plane; ++p) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < d; ++k) acc += z[k] * basis[k][p];
                    px[p] = 0.5 + spec.amplitude * acc / sd;
                }
                for (double& v : px) v = std::clamp(v + spec.pixel_noise * normal(gen), 0.0, 1.0);
            }
        }
        return out;
    };
    ToyDataset ds;
    ds.train = draw(spec.train_size);
    ds.val = draw(spec.val_size);
    ds.test = draw(spec.test_size);
    return ds;
}

// ---------------------------------------------------------------- weight files

struct WeightFile {
    nlohmann::json header;
    std::map<std::string, std::vector<double>> arrays;
};

inline void write_weights(const std::string& path, nlohmann::json header,
                          const std::vector<std::pair<std::string, std::span<const double>>>& arrays) {
    header["arrays"] = nlohmann::json::array();
    for (const auto& [name, data] : arrays) header["arrays"].push_back({{"name", name}, {"size", data.size()}});
    const std::string text = header.dump();
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw InvalidInput("cannot write " + path);
        os.write("FQMODEL1", 8);
        detail::put_u64(os, text.size());
        os.write(text.data(), std::streamsize(text.size()));
        for (const auto& [name, data] : arrays)
            for (double v : data) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
        if (!os) throw InvalidInput("short write to " + path);
    }
    std::filesystem::rename(tmp, path);
}

inline WeightFile read_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError(path, "cannot open weight file");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != "FQMODEL1") throw LoadError(path, "not a weight file");
    const std::uint64_t len = detail::get_u64(is);
    if (!is || len > (1u << 30)) throw LoadError(path, "corrupt header length");
    std::string text(len, '\0');
    is.read(text.data(), std::streamsize(len));
    WeightFile wf;
    try {
        wf.header = nlohmann::json::parse(text);
        for (const auto& a : wf.header.at("arrays")) {
            std::vector<double> v(a.at("size").get<std::size_t>());
            for (double& e : v) e = std::bit_cast<double>(detail::get_u64(is));
            wf.arrays[a.at("name").get<std::string>()] = std::move(v);
        }
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(path, std::string("bad header: ") + e.what());
    }
    if (!is) throw LoadError(path, "truncated weight data");
    return wf;
}

namespace detail {

inline const std::vector<double>& require_array(const WeightFile& wf, const std::string& name, std::size_t size,
                                                const std::string& path) {
    auto it = wf.arrays.find(name);
    if (it == wf.arrays.end()) throw LoadError(path, "missing array '" + name + "'");
    if (it->second.size() != size)
        throw LoadError(path, "array '" + name + "' has " + std::to_string(it->second.size()) + " values, expected " +
                                  std::to_string(size));
    return it->second;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

/// Applies y = Re F^-1( F(x) * gain ) to every plane; gain is one (c,h,w) block.
inline Tensor spectral_filter(const Tensor& x, std::span<const double> gain) {
    const Shape s = x.shape();
    Tensor y(s);
    std::vector<fft::cplx> buf(s.plane());
    for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t c = 0; c < s.c; ++c) {
            auto src = x.plane(b, c);
            std::copy(src.begin(), src.end(), buf.begin());
            fft::fft2(buf, s.h, s.w, false);
            for (std::size_t i = 0; i < buf.size(); ++i) buf[i] *= gain[c * s.plane() + i];
            fft::fft2(buf, s.h, s.w, true);
            auto dst = y.plane(b, c);
            for (std::size_t i = 0; i < buf.size(); ++i) dst[i] = buf[i].real();
        }
    return y;
}

/// Per-channel mean image and per-frequency RMS amplitude (pixel units) of a batch.
inline std::pair<std::vector<double>, std::vector<double>> spectral_statistics(const Tensor& x) {
    const Shape s = x.shape();
    std::vector<double> mean(s.item(), 0.0), power(s.item(), 0.0);
    for (std::size_t b = 0; b < s.n; ++b) {
        auto it = x.item(b);
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += it[i];
    }
    for (double& m : mean) m /= double(s.n);
    std::vector<fft::cplx> buf(s.plane());
    for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t c = 0; c < s.c; ++c) {
            auto src = x.plane(b, c);
            for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = src[i] - mean[c * s.plane() + i];
            fft::fft2(buf, s.h, s.w, false);
            for (std::size_t i = 0; i < buf.size(); ++i) power[c * s.plane() + i] += std::norm(buf[i]);
        }
    for (double& p : power) p /= double(s.n) * double(s.plane());
    return {std::move(mean), std::move(power)};
}

/// Deterministic batch order for one epoch.
inline std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& gen) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[gen() % i]);
    return idx;
}

} // namespace detail

// ---------------------------------------------------------------- classifier

/// Whitening front end followed by three conv/ReLU/avg-pool stages and a
/// linear head. The front end divides each frequency by the training-set RMS
/// amplitude at that frequency.
class ToyClassifier final : public Classifier {
public:
    ToyClassifier(Shape input, std::size_t classes, std::size_t width = 8) : input_(input), classes_(classes), width_(width) {
        input_.n = 1;
        if (input_.h % 8 != 0 || input_.w % 8 != 0) throw InvalidInput("classifier: input size must be a multiple of 8");
        c1_ = nn::Conv2d(layout_, "c1", input_.c, width);
        c2_ = nn::Conv2d(layout_, "c2", width, 2 * width);
        c3_ = nn::Conv2d(layout_, "c3", 2 * width, 4 * width);
        fc_ = nn::Linear(layout_, "fc", 4 * width * (input_.h / 8) * (input_.w / 8), classes);
        params_ = layout_.initialize(0);
        mean_.assign(input_.item(), 0.0);
        gain_.assign(input_.item(), 1.0);
    }

    std::size_t class_count() const override { return classes_; }
    Shape input_shape() const override { return input_; }
    std::size_t width() const { return width_; }

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    const nn::ParamLayout& layout() const { return layout_; }

    void initialize(std::uint64_t seed) { params_ = layout_.initialize(seed); }

    /// Fits the whitening statistics to training images; `floor` (pixel units)
    /// bounds the gain at frequencies the data never excites.
    void fit_whitening(const Tensor& train, double floor = 0.0) {
        check_input(train);
        auto [mean, power] = detail::spectral_statistics(train);
        mean_ = std::move(mean);
        for (std::size_t i = 0; i < power.size(); ++i) gain_[i] = 1.0 / std::sqrt(power[i] + floor * floor + 1e-24);
    }

    Tensor logits(const Tensor& x) const override {
        check_input(x);
        Cache c;
        return forward(x, c);
    }

    Tensor input_gradient(const Tensor& x, const LogitsGradFn& grad_fn, Tensor* logits_out) const override {
        check_input(x);
        Cache c;
        Tensor z = forward(x, c);
        Tensor gz = grad_fn(z);
        Tensor gx = backward(c, gz, {});
        if (logits_out) *logits_out = std::move(z);
        return gx;
    }

    std::string fingerprint() const override {
        std::uint64_t h = nn::hash_params(params_);
        h ^= nn::hash_params(gain_) * 31u;
        return "toycnn-" + detail::hex64(h);
    }

    /// Loss gradient for training; returns mean loss. Labels are smoothed by `smoothing`.
    double train_gradient(const Tensor& x, std::span<const int> labels, double smoothing, std::vector<double>& grad) const {
        Cache c;
        const Tensor z = forward(x, c);
        const std::size_t n = z.shape().n, k = classes_;
        Tensor gz(z.shape());
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            auto row = z.item(i);
            const double m = *std::max_element(row.begin(), row.end());
            double s = 0.0;
            for (double v : row) s += std::exp(v - m);
            const double lse = m + std::log(s);
            auto g = gz.item(i);
            for (std::size_t j = 0; j < k; ++j) {
                const double target = (1.0 - smoothing) * (int(j) == labels[i]) + smoothing / double(k);
                total -= target * (row[j] - lse);
                g[j] = (std::exp(row[j] - lse) - target) / double(n);
            }
        }
        std::fill(grad.begin(), grad.end(), 0.0);
        backward(c, gz, grad);
        return total / double(n);
    }

    void save(const std::string& path) const {
        nlohmann::json h{{"kind", "toy_classifier"},
                         {"input", {input_.c, input_.h, input_.w}},
                         {"classes", classes_},
                         {"width", width_}};
        write_weights(path, h, {{"params", params_}, {"whiten_mean", mean_}, {"whiten_gain", gain_}});
    }

    static std::unique_ptr<ToyClassifier> load(const std::string& path) {
        const WeightFile wf = read_weights(path);
        try {
            if (wf.header.at("kind") != "toy_classifier") throw LoadError(path, "not a classifier weight file");
            const auto in = wf.header.at("input").get<std::vector<std::size_t>>();
            auto clf = std::make_unique<ToyClassifier>(Shape{1, in.at(0), in.at(1), in.at(2)},
                                                       wf.header.at("classes").get<std::size_t>(),
                                                       wf.header.at("width").get<std::size_t>());
            clf->params_ = detail::require_array(wf, "params", clf->layout_.total(), path);
            clf->mean_ = detail::require_array(wf, "whiten_mean", clf->input_.item(), path);
            clf->gain_ = detail::require_array(wf, "whiten_gain", clf->input_.item(), path);
            return clf;
        } catch (const nlohmann::json::exception& e) {
            throw LoadError(path, std::string("bad header: ") + e.what());
        }
    }

private:
    struct Cache {
        Tensor w, a1, h1, p1, a2, h2, p2, a3, h3, p3;
    };

    void check_input(const Tensor& x) const {
        const Shape s = x.shape();
        if (s.c != input_.c || s.h != input_.h || s.w != input_.w)
            throw InvalidInput("classifier expects items shaped " + input_.str() + ", got " + s.str());
    }

    Tensor whiten(const Tensor& x) const {
        Tensor centered = x;
        for (std::size_t b = 0; b < x.shape().n; ++b) {
            auto it = centered.item(b);
            for (std::size_t i = 0; i < it.size(); ++i) it[i] -= mean_[i];
        }
        return detail::spectral_filter(centered, gain_);
    }

    Tensor forward(const Tensor& x, Cache& c) const {
        c.w = whiten(x);
        c.a1 = c1_.forward(c.w, params_);
        c.h1 = nn::relu(c.a1);
        c.p1 = nn::avg_pool2(c.h1);
        c.a2 = c2_.forward(c.p1, params_);
        c.h2 = nn::relu(c.a2);
        c.p2 = nn::avg_pool2(c.h2);
        c.a3 = c3_.forward(c.p2, params_);
        c.h3 = nn::relu(c.a3);
        c.p3 = nn::avg_pool2(c.h3);
        return fc_.forward(c.p3, params_);
    }

    // gain_ is even under point reflection, so the whitening filter is self-adjoint
    Tensor backward(const Cache& c, const Tensor& gz, nn::GradSpan g) const {
        Tensor gp3 = fc_.backward(c.p3, gz, params_, g);
        Tensor gp2 = c3_.backward(c.p2, nn::relu_backward(c.a3, nn::avg_pool2_backward(c.h3.shape(), gp3)), params_, g);
        Tensor gp1 = c2_.backward(c.p1, nn::relu_backward(c.a2, nn::avg_pool2_backward(c.h2.shape(), gp2)), params_, g);
        Tensor gw = c1_.backward(c.w, nn::relu_backward(c.a1, nn::avg_pool2_backward(c.h1.shape(), gp1)), params_, g);
        return detail::spectral_filter(gw, gain_);
    }

    Shape input_;
    std::size_t classes_, width_;
    nn::ParamLayout layout_;
    nn::Conv2d c1_, c2_, c3_;
    nn::Linear fc_;
    std::vector<double> params_, mean_, gain_;
};

struct ClassifierTraining {
    std::size_t epochs = 20;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    double label_smoothing = 0.1;
    double whitening_floor = 0.0;
    std::size_t width = 8;
    std::uint64_t seed = 0;
};

struct TrainedClassifier {
    std::unique_ptr<ToyClassifier> model;
    std::vector<double> loss_curve; ///< mean training loss per epoch
    double test_accuracy = 0.0;
};

/// Trains on `train`, reports accuracy on `test`. With epochs > 0 a final
/// test accuracy below 60% raises TrainingFailure.
inline TrainedClassifier train_classifier(const LabeledBatch& train, const LabeledBatch& test, std::size_t classes,
                                          const ClassifierTraining& cfg,
                                          const std::function<void(std::size_t, double)>& progress = {}) {
    if (cfg.batch_size == 0) throw InvalidInput("classifier training: batch size must be positive");
    TrainedClassifier out;
    out.model = std::make_unique<ToyClassifier>(train.images.shape(), classes, cfg.width);
    out.model->initialize(cfg.seed);
    out.model->fit_whitening(train.images.data, cfg.whitening_floor);
    auto& params = out.model->params();
    std::vector<double> grad(params.size());
    nn::Adam adam(params.size(), cfg.learning_rate);
    std::mt19937_64 gen(cfg.seed + 1);
    for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
        const auto order = detail::shuffled(train.size(), gen);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            const LabeledBatch mb = train.subset(idx);
            const double loss = out.model->train_gradient(mb.images.data, mb.labels, cfg.label_smoothing, grad);
            if (!std::isfinite(loss)) {
                out.loss_curve.push_back(loss);
                throw TrainingFailure("classifier loss diverged in epoch " + std::to_string(ep), out.loss_curve);
            }
            adam.step(params, grad);
            sum += loss;
            ++batches;
        }
        out.loss_curve.push_back(sum / double(batches));
        if (progress) progress(ep, out.loss_curve.back());
    }
    out.test_accuracy = accuracy(*out.model, test.images.data, test.labels);
    if (cfg.epochs > 0 && out.test_accuracy < 0.6)
        throw TrainingFailure("classifier reached only " + std::to_string(100.0 * out.test_accuracy) +
                                  "% test accuracy (minimum 60%)",
                              out.loss_curve);
    return out;
}

inline TrainedClassifier train_toy_classifier(const ToyDatasetSpec& spec, std::size_t epochs, std::uint64_t seed) {
    const ToyDataset ds = make_toy_dataset(spec);
    ClassifierTraining cfg;
    cfg.epochs = epochs;
    cfg.seed = seed;
    return train_classifier(ds.train, ds.test, spec.class_count, cfg);
}

// ---------------------------------------------------------------- score network

/// Predicts the noise eps in x_t = sqrt(a) x_0 + sqrt(1-a) eps as the sum of
///  - a per-frequency Gaussian-prior denoiser: sqrt(1-a) F^-1[ F(x - sqrt(a) m) / (a e^p + 1 - a) ],
///    the exact answer when data are Gaussian with mean m and spectrum e^p;
///  - a two-level U-Net residual with Fourier time features.
/// The score is -eps_hat / sqrt(1 - a).
class ToyScoreNet final : public ScoreModel {
public:
    static constexpr std::size_t time_features = 8;

    ToyScoreNet(Shape item, std::size_t width, DiffusionSchedule schedule = {})
        : item_(item), width_(width), schedule_(schedule) {
        item_.n = 1;
        if (item_.h % 2 != 0 || item_.w % 2 != 0) throw InvalidInput("score net: image size must be even");
        m_off_ = layout_.add("prior.mean", item_.item(), 1);
        p_off_ = layout_.add("prior.log_power", item_.item(), 1);
        if (width_ > 0) {
            const std::size_t w = width_, c = item_.c;
            temb_ = nn::Linear(layout_, "temb", 2 * time_features, 3 * w);
            e1_ = nn::Conv2d(layout_, "e1", c, w);
            e2_ = nn::Conv2d(layout_, "e2", w, w);
            d1_ = nn::Conv2d(layout_, "d1", w, 2 * w);
            d2_ = nn::Conv2d(layout_, "d2", 2 * w, 2 * w);
            u1_ = nn::Conv2d(layout_, "u1", 3 * w, w);
            out_ = nn::Conv2d(layout_, "out", w, c);
        }
        params_ = layout_.initialize(0);
        std::fill_n(params_.begin() + std::ptrdiff_t(m_off_), 2 * item_.item(), 0.0);
    }

    const Shape& item_shape() const { return item_; }
    std::size_t width() const { return width_; }
    const DiffusionSchedule& schedule() const { return schedule_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }

    void initialize(std::uint64_t seed) {
        std::vector<double> prior(params_.begin() + std::ptrdiff_t(m_off_),
                                  params_.begin() + std::ptrdiff_t(p_off_ + item_.item()));
        params_ = layout_.initialize(seed);
        std::copy(prior.begin(), prior.end(), params_.begin() + std::ptrdiff_t(m_off_));
    }

    /// Sets the prior branch to the empirical mean and log power spectrum of `data` (signed range).
    void fit_prior(const Tensor& data) {
        check(data);
        auto [mean, power] = detail::spectral_statistics(data);
        for (std::size_t i = 0; i < mean.size(); ++i) {
            params_[m_off_ + i] = mean[i];
            params_[p_off_ + i] = std::log(std::max(power[i], 1e-12));
        }
    }

    /// eps prediction for a batch that shares one time t.
    Tensor predict_noise(const Tensor& x, double t) const {
        check(x);
        Cache c;
        return forward(x, std::vector<double>(x.shape().n, t), c);
    }

    Tensor evaluate(const Tensor& x, double t) const override {
        Tensor eps = predict_noise(x, t);
        eps *= -1.0 / std::sqrt(1.0 - schedule_.alpha(t));
        return eps;
    }

    /// Mean squared eps error over the batch; accumulates parameter gradients into `grad` when non-empty.
    double dsm_loss(const Tensor& x_t, const std::vector<double>& t, const Tensor& eps, std::vector<double>* grad) const {
        Cache c;
        const Tensor pred = forward(x_t, t, c);
        const double inv = 1.0 / double(pred.size());
        Tensor g(pred.shape());
        double loss = 0.0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double d = pred[i] - eps[i];
            loss += d * d;
            g[i] = 2.0 * d * inv;
        }
        if (grad) backward(c, g, *grad);
        return loss * inv;
    }

    std::string fingerprint() const { return "toyscore-" + detail::hex64(nn::hash_params(params_)); }

    void save(const std::string& path) const {
        nlohmann::json h{{"kind", "toy_score"},
                         {"input", {item_.c, item_.h, item_.w}},
                         {"width", width_},
                         {"beta_min", schedule_.beta_min},
                         {"beta_max", schedule_.beta_max}};
        write_weights(path, h, {{"params", params_}});
    }

    static std::unique_ptr<ToyScoreNet> load(const std::string& path) {
        const WeightFile wf = read_weights(path);
        try {
            if (wf.header.at("kind") != "toy_score") throw LoadError(path, "not a score-model weight file");
            const auto in = wf.header.at("input").get<std::vector<std::size_t>>();
            DiffusionSchedule sched{wf.header.at("beta_min").get<double>(), wf.header.at("beta_max").get<double>()};
            auto net = std::make_unique<ToyScoreNet>(Shape{1, in.at(0), in.at(1), in.at(2)},
                                                     wf.header.at("width").get<std::size_t>(), sched);
            net->params_ = detail::require_array(wf, "params", net->layout_.total(), path);
            return net;
        } catch (const nlohmann::json::exception& e) {
            throw LoadError(path, std::string("bad header: ") + e.what());
        }
    }

private:
    struct Cache {
        std::vector<double> t, alpha;
        std::vector<std::vector<fft::cplx>> centered; // F(x - sqrt(a) m) per plane
        Tensor x, feats, emb, a1, h1a, a2, h1, pooled, b1, h2a, b2, h2, up, cat, c1, hu;
    };

    void check(const Tensor& x) const {
        const Shape s = x.shape();
        if (s.c != item_.c || s.h != item_.h || s.w != item_.w)
            throw InvalidInput("score net expects items shaped " + item_.str() + ", got " + s.str());
    }

    static double frequency(std::size_t j) {
        return std::exp(double(j) * std::log(1000.0) / double(time_features - 1));
    }

    Tensor forward(const Tensor& x, const std::vector<double>& t, Cache& c) const {
        const Shape s = x.shape();
        c.t = t;
        c.alpha.resize(s.n);
        for (std::size_t b = 0; b < s.n; ++b) c.alpha[b] = schedule_.alpha(t[b]);
        Tensor out(s);
        c.centered.assign(s.n * s.c, {});
        for (std::size_t b = 0; b < s.n; ++b) {
            const double a = c.alpha[b], sa = std::sqrt(a), sn = std::sqrt(1.0 - a);
            for (std::size_t ch = 0; ch < s.c; ++ch) {
                const std::size_t base = ch * s.plane();
                auto src = x.plane(b, ch);
                std::vector<fft::cplx> buf(s.plane());
                for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = src[i] - sa * params_[m_off_ + base + i];
                fft::fft2(buf, s.h, s.w, false);
                c.centered[b * s.c + ch] = buf;
                for (std::size_t i = 0; i < buf.size(); ++i)
                    buf[i] *= sn / (a * std::exp(params_[p_off_ + base + i]) + 1.0 - a);
                fft::fft2(buf, s.h, s.w, true);
                auto dst = out.plane(b, ch);
                for (std::size_t i = 0; i < buf.size(); ++i) dst[i] = buf[i].real();
            }
        }
        if (width_ == 0) return out;

        const std::size_t w = width_;
        c.x = x;
        c.feats = Tensor(Shape{s.n, 2 * time_features, 1, 1});
        for (std::size_t b = 0; b < s.n; ++b)
            for (std::size_t j = 0; j < time_features; ++j) {
                c.feats.item(b)[j] = std::sin(t[b] * frequency(j));
                c.feats.item(b)[time_features + j] = std::cos(t[b] * frequency(j));
            }
        c.emb = temb_.forward(c.feats, params_);
        c.a1 = e1_.forward(x, params_);
        nn::add_channel_bias(c.a1, c.emb, 0);
        c.h1a = nn::silu(c.a1);
        c.a2 = e2_.forward(c.h1a, params_);
        c.h1 = nn::silu(c.a2);
        c.pooled = nn::avg_pool2(c.h1);
        c.b1 = d1_.forward(c.pooled, params_);
        nn::add_channel_bias(c.b1, c.emb, w);
        c.h2a = nn::silu(c.b1);
        c.b2 = d2_.forward(c.h2a, params_);
        c.h2 = nn::silu(c.b2);
        c.up = nn::upsample2(c.h2);
        c.cat = nn::concat_channels(c.up, c.h1);
        c.c1 = u1_.forward(c.cat, params_);
        c.hu = nn::silu(c.c1);
        out += out_.forward(c.hu, params_);
        return out;
    }

    void backward(const Cache& c, const Tensor& g, std::vector<double>& grad) const {
        const Shape s = g.shape();
        // prior branch
        for (std::size_t b = 0; b < s.n; ++b) {
            const double a = c.alpha[b], sa = std::sqrt(a), sn = std::sqrt(1.0 - a);
            for (std::size_t ch = 0; ch < s.c; ++ch) {
                const std::size_t base = ch * s.plane();
                auto G = plane_spectrum(g.plane(b, ch), s.h, s.w);
                const auto& Y = c.centered[b * s.c + ch];
                std::vector<fft::cplx> gm(s.plane());
                for (std::size_t i = 0; i < G.size(); ++i) {
                    const double e = std::exp(params_[p_off_ + base + i]);
                    const double den = a * e + 1.0 - a;
                    const fft::cplx Gi = G[i] / double(s.plane());
                    grad[p_off_ + base + i] += (Y[i] * std::conj(Gi)).real() * (-sn * a * e / (den * den));
                    gm[i] = G[i] * (sn / den);
                }
                fft::fft2(gm, s.h, s.w, true);
                for (std::size_t i = 0; i < gm.size(); ++i) grad[m_off_ + base + i] -= sa * gm[i].real();
            }
        }
        if (width_ == 0) return;

        const std::size_t w = width_;
        Tensor gemb(c.emb.shape());
        Tensor ghu = out_.backward(c.hu, g, params_, grad);
        Tensor gcat = u1_.backward(c.cat, nn::silu_backward(c.c1, ghu), params_, grad);
        auto [gup, gh1_skip] = nn::split_channels(gcat, 2 * w);
        Tensor gb2 = nn::silu_backward(c.b2, nn::upsample2_backward(gup));
        Tensor gh2a = d2_.backward(c.h2a, gb2, params_, grad);
        Tensor gb1 = nn::silu_backward(c.b1, gh2a);
        nn::channel_bias_backward(gb1, gemb, w);
        Tensor gpooled = d1_.backward(c.pooled, gb1, params_, grad);
        Tensor gh1 = nn::avg_pool2_backward(c.h1.shape(), gpooled);
        gh1 += gh1_skip;
        Tensor ga2 = nn::silu_backward(c.a2, gh1);
        Tensor gh1a = e2_.backward(c.h1a, ga2, params_, grad);
        Tensor ga1 = nn::silu_backward(c.a1, gh1a);
        nn::channel_bias_backward(ga1, gemb, 0);
        e1_.backward(c.x, ga1, params_, grad);
        temb_.backward(c.feats, gemb, params_, grad);
    }

    Shape item_;
    std::size_t width_;
    DiffusionSchedule schedule_;
    nn::ParamLayout layout_;
    std::size_t m_off_ = 0, p_off_ = 0;
    nn::Linear temb_;
    nn::Conv2d e1_, e2_, d1_, d2_, u1_, out_;
    std::vector<double> params_;
};

struct ScoreTraining {
    std::size_t epochs = 4;
    std::size_t batch_size = 64;
    double learning_rate = 2e-3;
    double t_min = 1e-3;
    std::size_t width = 4;
    std::uint64_t seed = 0;
};

struct TrainedScore {
    std::unique_ptr<ToyScoreNet> model;
    std::vector<double> loss_curve;   ///< mean training DSM loss per epoch
    double val_loss = 0.0;            ///< DSM loss on the validation data
    double zero_baseline = 0.0;       ///< same draws with eps_hat = 0
};

/// DSM loss of `net` on `data` with draws fixed by `seed`; also returns the
/// loss of the zero predictor on the same draws.
inline std::pair<double, double> dsm_validation(const ToyScoreNet& net, const Tensor& data, double t_min, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> ut(t_min, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Shape s = data.shape();
    std::vector<double> t(s.n);
    Tensor eps(s), xt(s);
    for (std::size_t b = 0; b < s.n; ++b) {
        t[b] = ut(gen);
        const double a = net.schedule().alpha(t[b]);
        auto src = data.item(b);
        auto dst = xt.item(b);
        auto e = eps.item(b);
        for (std::size_t i = 0; i < src.size(); ++i) {
            e[i] = normal(gen);
            dst[i] = std::sqrt(a) * src[i] + std::sqrt(1.0 - a) * e[i];
        }
    }
    double zero = 0.0;
    for (double v : eps.values()) zero += v * v;
    double loss = 0.0;
    const std::size_t chunk = 128;
    for (std::size_t start = 0; start < s.n; start += chunk) {
        const std::size_t end = std::min(s.n, start + chunk);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const std::vector<double> tt(t.begin() + std::ptrdiff_t(start), t.begin() + std::ptrdiff_t(end));
        loss += net.dsm_loss(xt.gather(idx), tt, eps.gather(idx), nullptr) * double(idx.size() * s.item());
    }
    return {loss / double(eps.size()), zero / double(eps.size())};
}

/// Denoising score matching on signed-range `train`; `val` (may be empty) is
/// used for the reported validation loss.
inline TrainedScore train_score_model(const Tensor& train, const Tensor& val, const DiffusionSchedule& schedule,
                                      const ScoreTraining& cfg,
                                      const std::function<void(std::size_t, double)>& progress = {}) {
    schedule.validate();
    if (cfg.batch_size == 0) throw InvalidInput("score training: batch size must be positive");
    if (!(cfg.t_min > 0.0 && cfg.t_min < 1.0)) throw InvalidInput("score training: t_min must lie in (0, 1)");
    TrainedScore out;
    out.model = std::make_unique<ToyScoreNet>(train.shape(), cfg.width, schedule);
    out.model->fit_prior(train);
    out.model->initialize(cfg.seed);
    auto& params = out.model->params();
    std::vector<double> grad(params.size());
    nn::Adam adam(params.size(), cfg.learning_rate);
    std::mt19937_64 gen(cfg.seed + 1);
    std::uniform_real_distribution<double> ut(cfg.t_min, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Shape s = train.shape();
    for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
        const auto order = detail::shuffled(s.n, gen);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            const Tensor x0 = train.gather(idx);
            Tensor eps(x0.shape()), xt(x0.shape());
            std::vector<double> t(idx.size());
            for (std::size_t b = 0; b < idx.size(); ++b) {
                t[b] = ut(gen);
                const double a = schedule.alpha(t[b]);
                auto src = x0.item(b);
                auto dst = xt.item(b);
                auto e = eps.item(b);
                for (std::size_t i = 0; i < src.size(); ++i) {
                    e[i] = normal(gen);
                    dst[i] = std::sqrt(a) * src[i] + std::sqrt(1.0 - a) * e[i];
                }
            }
            std::fill(grad.begin(), grad.end(), 0.0);
            const double loss = out.model->dsm_loss(xt, t, eps, &grad);
            if (!std::isfinite(loss)) {
                out.loss_curve.push_back(loss);
                throw TrainingFailure("score-model loss diverged in epoch " + std::to_string(ep), out.loss_curve);
            }
            adam.step(params, grad);
            sum += loss;
            ++batches;
        }
        out.loss_curve.push_back(sum / double(batches));
        if (progress) progress(ep, out.loss_curve.back());
    }
    const Tensor& v = val.empty() ? train : val;
    std::tie(out.val_loss, out.zero_baseline) = dsm_validation(*out.model, v, cfg.t_min, cfg.seed + 2);
    if (!std::isfinite(out.val_loss)) throw TrainingFailure("score model produces non-finite predictions", out.loss_curve);
    return out;
}

inline TrainedScore train_toy_score_model(const ToyDatasetSpec& spec, const DiffusionSchedule& schedule,
                                          std::size_t epochs, std::uint64_t seed) {
    const ToyDataset ds = make_toy_dataset(spec);
    ScoreTraining cfg;
    cfg.epochs = epochs;
    cfg.seed = seed;
    return train_score_model(to_signed(ds.train.images).data, to_signed(ds.val.images).data, schedule, cfg);
}

// ---------------------------------------------------------------- manifests

/// key = value lines; '#' starts a comment.
inline std::map<std::string, std::string> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw LoadError(path, "cannot open manifest");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

namespace detail {

inline std::string manifest_get(const std::map<std::string, std::string>& kv, const std::string& key,
                                const std::string& path) {
    auto it = kv.find(key);
    if (it == kv.end()) throw LoadError(path, "manifest is missing '" + key + "'");
    return it->second;
}

inline std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
}

inline std::string resolve(const std::string& manifest, const std::string& rel) {
    const std::filesystem::path p(rel);
    return p.is_absolute() ? rel : (std::filesystem::path(manifest).parent_path() / p).string();
}

inline Shape manifest_shape(const std::map<std::string, std::string>& kv, const std::string& path) {
    const auto dims = parse_list(manifest_get(kv, "input_shape", path));
    if (dims.size() != 3) throw LoadError(path, "input_shape must be c,h,w");
    return {1, std::size_t(dims[0]), std::size_t(dims[1]), std::size_t(dims[2])};
}

} // namespace detail

/// Applies per-channel (x - mean) / std before an inner classifier.
class NormalizedClassifier final : public Classifier {
public:
    NormalizedClassifier(std::unique_ptr<Classifier> inner, std::vector<double> mean, std::vector<double> stddev)
        : inner_(std::move(inner)), mean_(std::move(mean)), std_(std::move(stddev)) {}

    std::size_t class_count() const override { return inner_->class_count(); }
    Shape input_shape() const override { return inner_->input_shape(); }
    Tensor logits(const Tensor& x) const override { return inner_->logits(normalize(x)); }
    Tensor input_gradient(const Tensor& x, const LogitsGradFn& fn, Tensor* logits_out) const override {
        Tensor g = inner_->input_gradient(normalize(x), fn, logits_out);
        divide_by_std(g);
        return g;
    }
    std::string fingerprint() const override { return inner_->fingerprint() + "-norm"; }

private:
    Tensor normalize(Tensor x) const {
        const Shape s = x.shape();
        for (std::size_t b = 0; b < s.n; ++b)
            for (std::size_t c = 0; c < s.c; ++c)
                for (double& v : x.plane(b, c)) v -= mean_[c % mean_.size()];
        divide_by_std(x);
        return x;
    }
    void divide_by_std(Tensor& x) const {
        const Shape s = x.shape();
        for (std::size_t b = 0; b < s.n; ++b)
            for (std::size_t c = 0; c < s.c; ++c)
                for (double& v : x.plane(b, c)) v /= std_[c % std_.size()];
    }

    std::unique_ptr<Classifier> inner_;
    std::vector<double> mean_, std_;
};

/// Manifest keys: weights, input_shape (c,h,w), mean, std, class_count, value_range.
inline std::unique_ptr<Classifier> load_external_classifier(const std::string& manifest_path) {
    const auto kv = read_manifest(manifest_path);
    const std::string weights = detail::resolve(manifest_path, detail::manifest_get(kv, "weights", manifest_path));
    if (!std::filesystem::exists(weights)) throw LoadError(manifest_path, "weights file not found: " + weights);
    const Shape want = detail::manifest_shape(kv, manifest_path);
    const auto classes = std::size_t(std::stoul(detail::manifest_get(kv, "class_count", manifest_path)));
    if (detail::manifest_get(kv, "value_range", manifest_path) != "unit")
        throw LoadError(manifest_path, "classifiers must consume unit-range images");
    std::unique_ptr<ToyClassifier> inner;
    try {
        inner = ToyClassifier::load(weights);
    } catch (const LoadError& e) {
        throw LoadError(manifest_path, e.what());
    }
    const Shape have = inner->input_shape();
    if (!(have == want))
        throw LoadError(manifest_path, "shape mismatch: manifest declares " + want.str() + " but weights expect " + have.str());
    if (inner->class_count() != classes)
        throw LoadError(manifest_path, "class count mismatch: manifest declares " + std::to_string(classes) +
                                           " but weights have " + std::to_string(inner->class_count()));
    const auto mean = detail::parse_list(kv.count("mean") ? kv.at("mean") : "0");
    const auto sd = detail::parse_list(kv.count("std") ? kv.at("std") : "1");
    if (mean.empty() || sd.empty() || std::any_of(sd.begin(), sd.end(), [](double v) { return !(v > 0.0); }))
        throw LoadError(manifest_path, "normalization std must be positive");
    auto clf = std::make_unique<NormalizedClassifier>(std::move(inner), mean, sd);
    Shape probe = want;
    probe.n = 2;
    if (!clf->logits(Tensor(probe, 0.5)).all_finite()) throw LoadError(manifest_path, "smoke pass produced non-finite logits");
    return clf;
}

/// Manifest keys: weights, input_shape (c,h,w), value_range (must be signed).
inline std::unique_ptr<ScoreModel> load_external_score(const std::string& manifest_path) {
    const auto kv = read_manifest(manifest_path);
    const std::string weights = detail::resolve(manifest_path, detail::manifest_get(kv, "weights", manifest_path));
    if (!std::filesystem::exists(weights)) throw LoadError(manifest_path, "weights file not found: " + weights);
    const Shape want = detail::manifest_shape(kv, manifest_path);
    if (kv.count("value_range") && kv.at("value_range") != "signed")
        throw LoadError(manifest_path, "score models operate on signed-range images");
    std::unique_ptr<ToyScoreNet> net;
    try {
        net = ToyScoreNet::load(weights);
    } catch (const LoadError& e) {
        throw LoadError(manifest_path, e.what());
    }
    if (!(net->item_shape() == want))
        throw LoadError(manifest_path,
                        "shape mismatch: manifest declares " + want.str() + " but weights expect " + net->item_shape().str());
    Shape probe = want;
    probe.n = 2;
    if (!net->evaluate(Tensor(probe, 0.0), 0.5).all_finite())
        throw LoadError(manifest_path, "smoke pass produced non-finite scores");
    return net;
}

} // namespace freqpure
