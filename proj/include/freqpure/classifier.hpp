#pragma once

#include <algorithm>
#include <functional>
#include <span>
#include <string>

#include "freqpure/tensor.hpp"

namespace freqpure {

/// Maps dL/dlogits from logits; lets a classifier run forward and backward in one pass.
using LogitsGradFn = std::function<Tensor(const Tensor& logits)>;

/// Differentiable image classifier on unit-range batches. Logits come back
/// shaped (n, K, 1, 1). Implementations must be safe to call concurrently.
class Classifier {
public:
    virtual ~Classifier() = default;

    virtual std::size_t class_count() const = 0;
    virtual Shape input_shape() const = 0; ///< expected (1, C, H, W)
    virtual Tensor logits(const Tensor& x) const = 0;

    /// Forward pass, then backpropagates `grad_fn(logits)` to the input.
    /// Returns dL/dx; `logits_out` receives the logits when non-null.
    virtual Tensor input_gradient(const Tensor& x, const LogitsGradFn& grad_fn, Tensor* logits_out = nullptr) const = 0;

    /// Identifies the weights; used to key attack caches.
    virtual std::string fingerprint() const = 0;
};

inline std::vector<int> predict(const Classifier& clf, const Tensor& x) {
    const Tensor z = clf.logits(x);
    std::vector<int> out(z.shape().n);
    for (std::size_t i = 0; i < out.size(); ++i) {
        auto row = z.item(i);
        out[i] = int(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

/// Fraction of correct predictions, in [0, 1].
inline double accuracy(const Classifier& clf, const Tensor& x, std::span<const int> labels,
                       std::size_t chunk = 256) {
    if (labels.size() != x.shape().n) throw InvalidInput("accuracy: label count does not match batch");
    std::size_t correct = 0;
    for (std::size_t start = 0; start < labels.size(); start += chunk) {
        const std::size_t end = std::min(labels.size(), start + chunk);
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < end; ++i) idx.push_back(i);
        const auto pred = predict(clf, x.gather(idx));
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[start + i];
    }
    return labels.empty() ? 0.0 : double(correct) / double(labels.size());
}

} // namespace freqpure
