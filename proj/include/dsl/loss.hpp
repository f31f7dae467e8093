#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "dsl/errors.hpp"
#include "dsl/linalg.hpp"

namespace dsl {

enum class LossKind { Hinge, CrossEntropy };

// Multiclass hinge: sum over wrong classes of max(0, 1 + z_j - z_y).
// Cross-entropy: log-sum-exp(z) - z_y.
inline double loss_value(const Vector& logits, std::size_t label, LossKind kind) {
    if (label >= logits.size()) throw ShapeMismatch("loss: label out of range");
    if (kind == LossKind::Hinge) {
        double acc = 0.0;
        for (std::size_t j = 0; j < logits.size(); ++j)
            if (j != label) acc += std::max(0.0, 1.0 + logits[j] - logits[label]);
        return acc;
    }
    const double zmax = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) sum += std::exp(z - zmax);
    return zmax + std::log(sum) - logits[label];
}

inline Vector loss_grad(const Vector& logits, std::size_t label, LossKind kind) {
    if (label >= logits.size()) throw ShapeMismatch("loss: label out of range");
    Vector g(logits.size(), 0.0);
    if (kind == LossKind::Hinge) {
        for (std::size_t j = 0; j < logits.size(); ++j) {
            if (j == label) continue;
            if (1.0 + logits[j] - logits[label] > 0.0) {
                g[j] = 1.0;
                g[label] -= 1.0;
            }
        }
        return g;
    }
    const double zmax = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) sum += std::exp(z - zmax);
    for (std::size_t j = 0; j < logits.size(); ++j) g[j] = std::exp(logits[j] - zmax) / sum;
    g[label] -= 1.0;
    return g;
}

// Explicit spectral regularization: (alpha / d) * sum |lambda_i|.
inline double spectral_penalty(const Vector& lambdas, double alpha) {
    double acc = 0.0;
    for (double l : lambdas) acc += std::fabs(l);
    return alpha * acc / static_cast<double>(lambdas.size());
}

}  // namespace dsl
