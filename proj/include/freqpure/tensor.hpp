#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "freqpure/error.hpp"

namespace freqpure {

/// Dense (batch, channels, height, width) shape.
struct Shape {
    std::size_t n = 0, c = 0, h = 0, w = 0;

    std::size_t size() const { return n * c * h * w; }
    std::size_t plane() const { return h * w; }
    std::size_t item() const { return c * h * w; }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        std::ostringstream os;
        os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
        return os.str();
    }
};

/// Row-major 4-D tensor of doubles. Value type, cheap to move.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape_(s), data_(s.size(), fill) {}
    Tensor(Shape s, std::vector<double> values) : shape_(s), data_(std::move(values)) {
        if (data_.size() != shape_.size())
            throw InvalidInput("tensor data size " + std::to_string(data_.size()) +
                               " does not match shape " + shape_.str());
    }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> span() { return data_; }
    std::span<const double> span() const { return data_; }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) {
        return data_[((b * shape_.c + ch) * shape_.h + y) * shape_.w + x];
    }
    double at(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const {
        return data_[((b * shape_.c + ch) * shape_.h + y) * shape_.w + x];
    }

    /// View over one image (all channels) of the batch.
    std::span<double> item(std::size_t b) { return {data_.data() + b * shape_.item(), shape_.item()}; }
    std::span<const double> item(std::size_t b) const {
        return {data_.data() + b * shape_.item(), shape_.item()};
    }
    /// View over one (image, channel) plane.
    std::span<double> plane(std::size_t b, std::size_t ch) {
        return {data_.data() + (b * shape_.c + ch) * shape_.plane(), shape_.plane()};
    }
    std::span<const double> plane(std::size_t b, std::size_t ch) const {
        return {data_.data() + (b * shape_.c + ch) * shape_.plane(), shape_.plane()};
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    /// Copies items `indices` into a new batch.
    Tensor gather(std::span<const std::size_t> indices) const {
        Shape s = shape_;
        s.n = indices.size();
        Tensor out(s);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            auto src = item(indices[i]);
            std::copy(src.begin(), src.end(), out.item(i).begin());
        }
        return out;
    }

    Tensor& operator+=(const Tensor& o) {
        require_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        require_same(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Tensor& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }
    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(Tensor a, double s) { return a *= s; }

    void require_same(const Tensor& o, const char* op) const {
        if (!(shape_ == o.shape_))
            throw InvalidInput(std::string("shape mismatch in ") + op + ": " + shape_.str() +
                               " vs " + o.shape_.str());
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    a.require_same(b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Declared value range of an image batch.
enum class RangeTag { unit, signed_unit };

inline const char* to_string(RangeTag r) { return r == RangeTag::unit ? "unit" : "signed"; }

inline RangeTag range_from_string(const std::string& s) {
    if (s == "unit") return RangeTag::unit;
    if (s == "signed") return RangeTag::signed_unit;
    throw InvalidInput("unknown range tag '" + s + "' (expected unit|signed)");
}

inline double range_low(RangeTag r) { return r == RangeTag::unit ? 0.0 : -1.0; }

/// Image tensor plus its value-range convention. Unit batches feed
/// classifiers, signed batches feed the diffusion process.
struct ImageBatch {
    Tensor data;
    RangeTag range = RangeTag::unit;

    const Shape& shape() const { return data.shape(); }

    void clip() {
        const double lo = range_low(range);
        for (double& v : data.values()) v = std::clamp(v, lo, 1.0);
    }

    bool in_range(double tol = 0.0) const {
        const double lo = range_low(range) - tol, hi = 1.0 + tol;
        return std::all_of(data.values().begin(), data.values().end(),
                           [&](double v) { return v >= lo && v <= hi; });
    }

    void require_range(RangeTag expected, const char* where) const {
        if (range != expected)
            throw InvalidInput(std::string(where) + ": expected a " + to_string(expected) +
                               " batch but got " + to_string(range));
    }
};

/// [0,1] -> [-1,1]
inline ImageBatch to_signed(const ImageBatch& x) {
    x.require_range(RangeTag::unit, "to_signed");
    ImageBatch out{x.data, RangeTag::signed_unit};
    for (double& v : out.data.values()) v = 2.0 * v - 1.0;
    return out;
}

/// [-1,1] -> [0,1], clipped.
inline ImageBatch to_unit(const ImageBatch& x) {
    x.require_range(RangeTag::signed_unit, "to_unit");
    ImageBatch out{x.data, RangeTag::unit};
    for (double& v : out.data.values()) v = std::clamp((v + 1.0) * 0.5, 0.0, 1.0);
    return out;
}

} // namespace freqpure
