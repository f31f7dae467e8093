#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dsl/errors.hpp"
#include "dsl/linalg.hpp"

// Small fully-connected networks for the coefficient functions, with
// explicit forward, reverse-mode and forward-mode derivatives. No autodiff
// framework: gradients here feed the implicit-function assembly, which
// differentiates exactly what is computed.

namespace dsl {

enum class Activation : std::uint8_t { LeakyRelu, Tanh };
enum class Squash : std::uint8_t { None, SigmoidRange, TanhRange };
enum class CoeffRole : std::uint8_t { A, Q, InvP, W };

constexpr double kLeakySlope = 0.01;

struct RangeSpec {
    CoeffRole role;
    double lo;
    double hi;
};

// Output-domain defaults keeping eigenvalues moderate at initialization.
inline RangeSpec default_range(CoeffRole role) {
    switch (role) {
        case CoeffRole::A: return {role, 0.01, 1.0};
        case CoeffRole::Q: return {role, -10.0, 10.0};
        case CoeffRole::InvP: return {role, 1.0, 10.0};
        case CoeffRole::W: return {role, 0.1, 10.0};
    }
    return {role, 0.0, 1.0};
}

// q is sign-symmetric and gets the tanh map; the positive coefficients use
// the sigmoid map.
inline Squash default_squash(CoeffRole role) {
    return role == CoeffRole::Q ? Squash::TanhRange : Squash::SigmoidRange;
}

struct MlpParams {
    std::vector<std::size_t> layer_dims;  // [in, hidden..., out]
    std::vector<Matrix> weights;          // weights[l]: dims[l+1] x dims[l]
    std::vector<Vector> biases;
    Activation activation = Activation::LeakyRelu;
    Squash squash = Squash::None;
    double range_lo = 0.0;
    double range_hi = 0.0;

    std::size_t input_dim() const { return layer_dims.front(); }
    std::size_t output_dim() const { return layer_dims.back(); }
    std::size_t num_layers() const { return weights.size(); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].data.size() + biases[l].size();
        return n;
    }
};

struct MlpGrad {
    std::vector<Matrix> weights;
    std::vector<Vector> biases;

    static MlpGrad zeros_like(const MlpParams& p) {
        MlpGrad g;
        g.weights.reserve(p.weights.size());
        g.biases.reserve(p.biases.size());
        for (std::size_t l = 0; l < p.weights.size(); ++l) {
            g.weights.emplace_back(p.weights[l].rows, p.weights[l].cols, 0.0);
            g.biases.emplace_back(p.biases[l].size(), 0.0);
        }
        return g;
    }

    void scale(double s) {
        for (auto& w : weights)
            for (double& v : w.data) v *= s;
        for (auto& b : biases)
            for (double& v : b) v *= s;
    }

    void add_scaled(const MlpGrad& other, double s) {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            for (std::size_t i = 0; i < weights[l].data.size(); ++i)
                weights[l].data[i] += s * other.weights[l].data[i];
            for (std::size_t i = 0; i < biases[l].size(); ++i) biases[l][i] += s * other.biases[l][i];
        }
    }
};

namespace detail {

inline double activate(Activation a, double z) {
    return a == Activation::Tanh ? std::tanh(z) : (z > 0.0 ? z : kLeakySlope * z);
}

inline double activate_deriv(Activation a, double z) {
    if (a == Activation::Tanh) {
        const double t = std::tanh(z);
        return 1.0 - t * t;
    }
    return z > 0.0 ? 1.0 : kLeakySlope;
}

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace detail

// Reusable per-call buffers; one per worker thread is enough.
struct MlpWorkspace {
    std::vector<Vector> pre;    // pre-activation per layer
    std::vector<Vector> act;    // post-activation per layer (act[0] = input)
    Vector delta, delta_next;
};

namespace detail {

// Forward pass keeping pre-activations. The final layer applies the range
// squash when configured, otherwise the ordinary activation.
inline void forward_cached(const MlpParams& p, const Vector& x, MlpWorkspace& ws) {
    if (x.size() != p.input_dim())
        throw ShapeMismatch("mlp forward: input dim " + std::to_string(x.size()) + " != " +
                            std::to_string(p.input_dim()));
    const std::size_t L = p.num_layers();
    ws.pre.resize(L);
    ws.act.resize(L + 1);
    ws.act[0] = x;
    for (std::size_t l = 0; l < L; ++l) {
        matvec(p.weights[l], ws.act[l], ws.pre[l]);
        for (std::size_t i = 0; i < ws.pre[l].size(); ++i) ws.pre[l][i] += p.biases[l][i];
        ws.act[l + 1].resize(ws.pre[l].size());
        const bool final_layer = (l + 1 == L);
        if (final_layer && p.squash != Squash::None) {
            for (std::size_t i = 0; i < ws.pre[l].size(); ++i) {
                const double z = ws.pre[l][i];
                if (p.squash == Squash::SigmoidRange)
                    ws.act[l + 1][i] = p.range_lo + (p.range_hi - p.range_lo) * sigmoid(z);
                else
                    ws.act[l + 1][i] =
                        0.5 * (p.range_lo + p.range_hi) + 0.5 * (p.range_hi - p.range_lo) * std::tanh(z);
            }
        } else {
            for (std::size_t i = 0; i < ws.pre[l].size(); ++i)
                ws.act[l + 1][i] = activate(p.activation, ws.pre[l][i]);
        }
    }
}

inline double output_deriv(const MlpParams& p, double z, bool final_layer) {
    if (final_layer && p.squash != Squash::None) {
        if (p.squash == Squash::SigmoidRange) {
            const double s = sigmoid(z);
            return (p.range_hi - p.range_lo) * s * (1.0 - s);
        }
        const double t = std::tanh(z);
        return 0.5 * (p.range_hi - p.range_lo) * (1.0 - t * t);
    }
    return activate_deriv(p.activation, z);
}

}  // namespace detail

inline Vector mlp_forward(const MlpParams& p, const Vector& x) {
    MlpWorkspace ws;
    detail::forward_cached(p, x, ws);
    return ws.act.back();
}

inline void mlp_forward(const MlpParams& p, const Vector& x, Vector& out, MlpWorkspace& ws) {
    detail::forward_cached(p, x, ws);
    out = ws.act.back();
}

// Reverse-mode gradient of mlp_forward, squash included. Accumulates the
// parameter gradient into `grad` and writes d(loss)/d(input) into
// `input_grad`.
inline void mlp_backprop_accum(const MlpParams& p, const Vector& x, const Vector& cotangent,
                               MlpGrad& grad, Vector& input_grad, MlpWorkspace& ws) {
    if (cotangent.size() != p.output_dim())
        throw ShapeMismatch("mlp backprop: cotangent dim mismatch");
    detail::forward_cached(p, x, ws);
    const std::size_t L = p.num_layers();

    ws.delta = cotangent;
    for (std::size_t l = L; l-- > 0;) {
        const bool final_layer = (l + 1 == L);
        for (std::size_t i = 0; i < ws.delta.size(); ++i)
            ws.delta[i] *= detail::output_deriv(p, ws.pre[l][i], final_layer);

        Matrix& dw = grad.weights[l];
        const Vector& a_in = ws.act[l];
        for (std::size_t i = 0; i < dw.rows; ++i) {
            const double di = ws.delta[i];
            double* row = dw.data.data() + i * dw.cols;
            for (std::size_t j = 0; j < dw.cols; ++j) row[j] += di * a_in[j];
            grad.biases[l][i] += di;
        }
        ws.delta_next.assign(p.weights[l].cols, 0.0);
        matvec_transpose_add(p.weights[l], ws.delta, ws.delta_next);
        ws.delta.swap(ws.delta_next);
    }
    input_grad = ws.delta;
}

inline std::pair<Vector, MlpGrad> mlp_backprop(const MlpParams& p, const Vector& x,
                                               const Vector& cotangent) {
    MlpGrad g = MlpGrad::zeros_like(p);
    Vector input_grad;
    MlpWorkspace ws;
    mlp_backprop_accum(p, x, cotangent, g, input_grad, ws);
    return {std::move(input_grad), std::move(g)};
}

// Forward-mode directional derivative: returns f(x) and (Jf)(x) dx.
inline std::pair<Vector, Vector> mlp_jvp(const MlpParams& p, const Vector& x, const Vector& dx) {
    if (dx.size() != p.input_dim()) throw ShapeMismatch("mlp jvp: tangent dim mismatch");
    MlpWorkspace ws;
    detail::forward_cached(p, x, ws);
    const std::size_t L = p.num_layers();
    Vector tang = dx, tang_next;
    for (std::size_t l = 0; l < L; ++l) {
        matvec(p.weights[l], tang, tang_next);
        const bool final_layer = (l + 1 == L);
        for (std::size_t i = 0; i < tang_next.size(); ++i)
            tang_next[i] *= detail::output_deriv(p, ws.pre[l][i], final_layer);
        tang.swap(tang_next);
    }
    return {ws.act.back(), std::move(tang)};
}

enum class InitScheme : std::uint8_t { GlorotUniform, Orthogonal };

inline MlpParams mlp_init(std::vector<std::size_t> layer_dims, Activation activation,
                          std::optional<RangeSpec> output_range, InitScheme scheme,
                          std::uint64_t seed) {
    if (layer_dims.size() < 2) throw ShapeMismatch("mlp init: need at least input and output dims");
    MlpParams p;
    p.layer_dims = std::move(layer_dims);
    p.activation = activation;
    if (output_range) {
        p.squash = default_squash(output_range->role);
        p.range_lo = output_range->lo;
        p.range_hi = output_range->hi;
    }
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l + 1 < p.layer_dims.size(); ++l) {
        const std::size_t fan_in = p.layer_dims[l], fan_out = p.layer_dims[l + 1];
        if (scheme == InitScheme::Orthogonal) {
            p.weights.push_back(random_orthogonal(fan_out, fan_in, rng));
        } else {
            const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            std::uniform_real_distribution<double> unif(-limit, limit);
            Matrix w(fan_out, fan_in);
            for (double& v : w.data) v = unif(rng);
            p.weights.push_back(std::move(w));
        }
        p.biases.emplace_back(fan_out, 0.0);
    }
    return p;
}

}  // namespace dsl
