#pragma once

// Minimal batched layers with hand-written backward passes. Weights live in a
// flat parameter vector owned by the model; layers only hold offsets into it,
// so a trained model is an immutable blob that many threads may evaluate.

#include <cmath>
#include <algorithm>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "freqpure/tensor.hpp"

namespace freqpure::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Matrix>;
using ConstMatMap = Eigen::Map<const Matrix>;

/// Allocates named slices of a flat parameter vector.
class ParamLayout {
public:
    struct Block {
        std::string name;
        std::size_t offset;
        std::size_t size;
        std::size_t fan_in;
    };

    std::size_t add(std::string name, std::size_t size, std::size_t fan_in) {
        blocks_.push_back({std::move(name), total_, size, fan_in});
        total_ += size;
        return blocks_.back().offset;
    }

    std::size_t total() const { return total_; }
    const std::vector<Block>& blocks() const { return blocks_; }

    /// PyTorch-style default init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    std::vector<double> initialize(std::uint64_t seed) const {
        std::vector<double> p(total_);
        std::mt19937_64 gen(seed);
        for (const auto& b : blocks_) {
            const double bound = 1.0 / std::sqrt(double(b.fan_in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (std::size_t i = 0; i < b.size; ++i) p[b.offset + i] = dist(gen);
        }
        return p;
    }

private:
    std::vector<Block> blocks_;
    std::size_t total_ = 0;
};

/// Gradient sink; an empty span means "input gradient only".
using GradSpan = std::span<double>;
using ParamSpan = std::span<const double>;

/// Square-kernel convolution, stride 1, "same" zero padding.
struct Conv2d {
    std::size_t cin = 0, cout = 0, k = 3;
    std::size_t w_off = 0, b_off = 0;

    Conv2d() = default;
    Conv2d(ParamLayout& layout, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel = 3)
        : cin(in), cout(out), k(kernel) {
        w_off = layout.add(name + ".weight", cout * cin * k * k, cin * k * k);
        b_off = layout.add(name + ".bias", cout, cin * k * k);
    }

    void im2col(std::span<const double> x, std::size_t h, std::size_t w, Matrix& cols) const {
        const std::ptrdiff_t pad = std::ptrdiff_t(k / 2);
        cols.resize(std::ptrdiff_t(cin * k * k), std::ptrdiff_t(h * w));
        for (std::size_t c = 0; c < cin; ++c) {
            const double* src = x.data() + c * h * w;
            for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                    double* dst = cols.data() + ((c * k + ky) * k + kx) * h * w;
                    const std::ptrdiff_t dy = std::ptrdiff_t(ky) - pad, dx = std::ptrdiff_t(kx) - pad;
                    for (std::size_t y = 0; y < h; ++y) {
                        const std::ptrdiff_t sy = std::ptrdiff_t(y) + dy;
                        double* row = dst + y * w;
                        if (sy < 0 || sy >= std::ptrdiff_t(h)) {
                            std::fill(row, row + w, 0.0);
                            continue;
                        }
                        for (std::size_t xx = 0; xx < w; ++xx) {
                            const std::ptrdiff_t sx = std::ptrdiff_t(xx) + dx;
                            row[xx] = (sx < 0 || sx >= std::ptrdiff_t(w)) ? 0.0 : src[sy * std::ptrdiff_t(w) + sx];
                        }
                    }
                }
            }
        }
    }

    void col2im(const Matrix& cols, std::size_t h, std::size_t w, std::span<double> x) const {
        const std::ptrdiff_t pad = std::ptrdiff_t(k / 2);
        std::fill(x.begin(), x.end(), 0.0);
        for (std::size_t c = 0; c < cin; ++c) {
            double* dst = x.data() + c * h * w;
            for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const double* src = cols.data() + ((c * k + ky) * k + kx) * h * w;
                    const std::ptrdiff_t dy = std::ptrdiff_t(ky) - pad, dx = std::ptrdiff_t(kx) - pad;
                    for (std::size_t y = 0; y < h; ++y) {
                        const std::ptrdiff_t sy = std::ptrdiff_t(y) + dy;
                        if (sy < 0 || sy >= std::ptrdiff_t(h)) continue;
                        for (std::size_t xx = 0; xx < w; ++xx) {
                            const std::ptrdiff_t sx = std::ptrdiff_t(xx) + dx;
                            if (sx >= 0 && sx < std::ptrdiff_t(w)) dst[sy * std::ptrdiff_t(w) + sx] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }

    Tensor forward(const Tensor& x, ParamSpan p) const {
        const Shape s = x.shape();
        if (s.c != cin) throw InvalidInput("conv: expected " + std::to_string(cin) + " channels, got " + s.str());
        Tensor y(Shape{s.n, cout, s.h, s.w});
        ConstMatMap W(p.data() + w_off, std::ptrdiff_t(cout), std::ptrdiff_t(cin * k * k));
        Matrix cols;
        for (std::size_t b = 0; b < s.n; ++b) {
            im2col(x.item(b), s.h, s.w, cols);
            MatMap out(y.item(b).data(), std::ptrdiff_t(cout), std::ptrdiff_t(s.plane()));
            out.noalias() = W * cols;
            for (std::size_t o = 0; o < cout; ++o) out.row(std::ptrdiff_t(o)).array() += p[b_off + o];
        }
        return y;
    }

    /// Returns dL/dx; accumulates weight/bias gradients into `g` when non-empty.
    Tensor backward(const Tensor& x, const Tensor& gy, ParamSpan p, GradSpan g) const {
        const Shape s = x.shape();
        Tensor gx(s);
        ConstMatMap W(p.data() + w_off, std::ptrdiff_t(cout), std::ptrdiff_t(cin * k * k));
        Matrix cols, gcols;
        for (std::size_t b = 0; b < s.n; ++b) {
            ConstMatMap gout(gy.item(b).data(), std::ptrdiff_t(cout), std::ptrdiff_t(s.plane()));
            if (!g.empty()) {
                im2col(x.item(b), s.h, s.w, cols);
                MatMap gW(g.data() + w_off, std::ptrdiff_t(cout), std::ptrdiff_t(cin * k * k));
                gW.noalias() += gout * cols.transpose();
                for (std::size_t o = 0; o < cout; ++o) {
                    auto row = gy.plane(b, o);
                    g[b_off + o] += std::accumulate(row.begin(), row.end(), 0.0);
                }
            }
            gcols.noalias() = W.transpose() * gout;
            col2im(gcols, s.h, s.w, gx.item(b));
        }
        return gx;
    }
};

/// Fully connected layer on flattened items: (n, in) -> (n, out, 1, 1).
struct Linear {
    std::size_t in = 0, out = 0;
    std::size_t w_off = 0, b_off = 0;

    Linear() = default;
    Linear(ParamLayout& layout, const std::string& name, std::size_t fan_in, std::size_t fan_out)
        : in(fan_in), out(fan_out) {
        w_off = layout.add(name + ".weight", out * in, in);
        b_off = layout.add(name + ".bias", out, in);
    }

    Tensor forward(const Tensor& x, ParamSpan p) const {
        const std::size_t n = x.shape().n;
        if (x.shape().item() != in) throw InvalidInput("linear: input size mismatch " + x.shape().str());
        Tensor y(Shape{n, out, 1, 1});
        ConstMatMap X(x.data(), std::ptrdiff_t(n), std::ptrdiff_t(in));
        ConstMatMap W(p.data() + w_off, std::ptrdiff_t(out), std::ptrdiff_t(in));
        MatMap Y(y.data(), std::ptrdiff_t(n), std::ptrdiff_t(out));
        Y.noalias() = X * W.transpose();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < out; ++o) Y(std::ptrdiff_t(i), std::ptrdiff_t(o)) += p[b_off + o];
        return y;
    }

    Tensor backward(const Tensor& x, const Tensor& gy, ParamSpan p, GradSpan g) const {
        const std::size_t n = x.shape().n;
        ConstMatMap X(x.data(), std::ptrdiff_t(n), std::ptrdiff_t(in));
        ConstMatMap GY(gy.data(), std::ptrdiff_t(n), std::ptrdiff_t(out));
        ConstMatMap W(p.data() + w_off, std::ptrdiff_t(out), std::ptrdiff_t(in));
        if (!g.empty()) {
            MatMap gW(g.data() + w_off, std::ptrdiff_t(out), std::ptrdiff_t(in));
            gW.noalias() += GY.transpose() * X;
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t o = 0; o < out; ++o) g[b_off + o] += gy[r * out + o];
        }
        Tensor gx(x.shape());
        MatMap GX(gx.data(), std::ptrdiff_t(n), std::ptrdiff_t(in));
        GX.noalias() = GY * W;
        return gx;
    }
};

inline Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
    return y;
}
inline Tensor relu_backward(const Tensor& x, Tensor gy) {
    for (std::size_t i = 0; i < gy.size(); ++i)
        if (x[i] <= 0.0) gy[i] = 0.0;
    return gy;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

inline Tensor silu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.values()) v = v * sigmoid(v);
    return y;
}
inline Tensor silu_backward(const Tensor& x, Tensor gy) {
    for (std::size_t i = 0; i < gy.size(); ++i) {
        const double s = sigmoid(x[i]);
        gy[i] *= s * (1.0 + x[i] * (1.0 - s));
    }
    return gy;
}

/// 2x2 average pooling (even spatial sizes).
inline Tensor avg_pool2(const Tensor& x) {
    const Shape s = x.shape();
    Tensor y(Shape{s.n, s.c, s.h / 2, s.w / 2});
    for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t i = 0; i < s.h / 2; ++i)
                for (std::size_t j = 0; j < s.w / 2; ++j)
                    y.at(b, c, i, j) = 0.25 * (x.at(b, c, 2 * i, 2 * j) + x.at(b, c, 2 * i + 1, 2 * j) +
                                               x.at(b, c, 2 * i, 2 * j + 1) + x.at(b, c, 2 * i + 1, 2 * j + 1));
    return y;
}
inline Tensor avg_pool2_backward(const Shape& in, const Tensor& gy) {
    Tensor gx(in);
    for (std::size_t b = 0; b < in.n; ++b)
        for (std::size_t c = 0; c < in.c; ++c)
            for (std::size_t i = 0; i < in.h; ++i)
                for (std::size_t j = 0; j < in.w; ++j) gx.at(b, c, i, j) = 0.25 * gy.at(b, c, i / 2, j / 2);
    return gx;
}

/// Nearest-neighbour 2x upsampling.
inline Tensor upsample2(const Tensor& x) {
    const Shape s = x.shape();
    Tensor y(Shape{s.n, s.c, s.h * 2, s.w * 2});
    for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t i = 0; i < 2 * s.h; ++i)
                for (std::size_t j = 0; j < 2 * s.w; ++j) y.at(b, c, i, j) = x.at(b, c, i / 2, j / 2);
    return y;
}
inline Tensor upsample2_backward(const Tensor& gy) {
    const Shape s = gy.shape();
    Tensor gx(Shape{s.n, s.c, s.h / 2, s.w / 2});
    for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t i = 0; i < s.h; ++i)
                for (std::size_t j = 0; j < s.w; ++j) gx.at(b, c, i / 2, j / 2) += gy.at(b, c, i, j);
    return gx;
}

/// Channel concatenation [a, b].
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const Shape sa = a.shape(), sb = b.shape();
    Tensor y(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
    for (std::size_t n = 0; n < sa.n; ++n) {
        auto dst = y.item(n);
        auto ia = a.item(n), ib = b.item(n);
        std::copy(ia.begin(), ia.end(), dst.begin());
        std::copy(ib.begin(), ib.end(), dst.begin() + std::ptrdiff_t(ia.size()));
    }
    return y;
}
inline std::pair<Tensor, Tensor> split_channels(const Tensor& g, std::size_t ca) {
    const Shape s = g.shape();
    Tensor a(Shape{s.n, ca, s.h, s.w}), b(Shape{s.n, s.c - ca, s.h, s.w});
    for (std::size_t n = 0; n < s.n; ++n) {
        auto src = g.item(n);
        std::copy(src.begin(), src.begin() + std::ptrdiff_t(a.shape().item()), a.item(n).begin());
        std::copy(src.begin() + std::ptrdiff_t(a.shape().item()), src.end(), b.item(n).begin());
    }
    return {std::move(a), std::move(b)};
}

/// Adds a per-(item, channel) offset, e.g. a time embedding.
inline void add_channel_bias(Tensor& x, const Tensor& bias, std::size_t bias_offset = 0) {
    const Shape s = x.shape();
    for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t c = 0; c < s.c; ++c) {
            const double v = bias.item(b)[bias_offset + c];
            for (double& e : x.plane(b, c)) e += v;
        }
}
inline void channel_bias_backward(const Tensor& gx, Tensor& gbias, std::size_t bias_offset = 0) {
    const Shape s = gx.shape();
    for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t c = 0; c < s.c; ++c) {
            double acc = 0.0;
            for (double e : gx.plane(b, c)) acc += e;
            gbias.item(b)[bias_offset + c] += acc;
        }
}

/// Mean softmax cross-entropy of logits (n, k) against labels, plus dL/dlogits.
inline double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* grad) {
    const std::size_t n = logits.shape().n, k = logits.shape().item();
    if (labels.size() != n) throw InvalidInput("cross-entropy: label count does not match batch");
    if (grad) *grad = Tensor(logits.shape());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        auto row = logits.item(i);
        const int y = labels[i];
        if (y < 0 || std::size_t(y) >= k) throw InvalidInput("cross-entropy: label out of range");
        const double m = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - m);
        const double lse = m + std::log(z);
        total += lse - row[std::size_t(y)];
        if (grad) {
            auto g = grad->item(i);
            for (std::size_t j = 0; j < k; ++j) g[j] = std::exp(row[j] - lse) / double(n);
            g[std::size_t(y)] -= 1.0 / double(n);
        }
    }
    return total / double(n);
}

/// Adam with optional L2 pull toward an anchor (coupled, as in classic Adam).
class Adam {
public:
    Adam(std::size_t size, double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps), m_(size, 0.0), v_(size, 0.0) {}

    /// One update of `params` from `grad`. `anchor` (same size) is the decay target; empty = zero.
    void step(std::span<double> params, std::span<const double> grad, std::span<const double> anchor = {}) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, double(t_));
        const double c2 = 1.0 - std::pow(b2_, double(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            double g = grad[i];
            if (wd_ != 0.0) g += wd_ * (params[i] - (anchor.empty() ? 0.0 : anchor[i]));
            m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
            v_[i] = b2_ * v_[i] + (1.0 - b2_) * g * g;
            params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
        }
    }

    std::size_t steps() const { return t_; }

private:
    double lr_, wd_, b1_, b2_, eps_;
    std::vector<double> m_, v_;
    std::size_t t_ = 0;
};

/// FNV-1a over the raw bytes of a parameter vector; used as a weights fingerprint.
inline std::uint64_t hash_params(std::span<const double> p) {
    std::uint64_t h = 1469598103934665603ull;
    for (double v : p) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof(double));
        for (unsigned char byte : bytes) {
            h ^= byte;
            h *= 1099511628211ull;
        }
    }
    return h;
}

} // namespace freqpure::nn
