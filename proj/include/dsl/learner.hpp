#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "dsl/errors.hpp"
#include "dsl/gradflow.hpp"
#include "dsl/loss.hpp"
#include "dsl/model.hpp"

// Training: Adam over minibatches, per-sample gradients through the
// implicit assembly, failed forward passes skipped and counted.

namespace dsl {

struct TrainConfig {
    // [train]
    double lr = 2e-3;
    std::size_t epochs = 40;
    std::size_t batch_size = 32;
    double alpha = 1e-4;
    LossKind loss = LossKind::Hinge;
    std::uint64_t seed = 0;
    SolverSettings solver;

    // [model]
    std::size_t d = 10;
    std::vector<std::size_t> hidden = {128, 64, 32};    // 1/p, q, w networks
    std::vector<std::size_t> a_hidden = {128, 64, 32};  // vector field
    bool v_learnable = false;
    std::vector<std::size_t> v_hidden = {128, 64, 32};
    bool head_bias = true;
    InitScheme init = InitScheme::GlorotUniform;
    bool ablation = false;
    RangeSpec a_range = default_range(CoeffRole::A);
    RangeSpec q_range = default_range(CoeffRole::Q);
    RangeSpec invp_range = default_range(CoeffRole::InvP);
    RangeSpec w_range = default_range(CoeffRole::W);

    double max_batch_failure_fraction = 0.10;
    std::size_t threads = 1;
};

struct NormalizationStats {
    Vector min;
    Vector max;
};

struct DatasetSplit {
    Matrix features;                 // m x n, entries in [0.25, 0.75]
    std::vector<std::size_t> labels; // in [0, k)
    NormalizationStats normalization;

    std::size_t size() const { return features.rows; }
    Vector row(std::size_t i) const {
        return Vector(features.data.begin() + i * features.cols,
                      features.data.begin() + (i + 1) * features.cols);
    }
};

// Affine map sending the training min to 0.25 and max to 0.75 per feature.
// Out-of-range values (val/test data beyond the training range) clip to the
// guard band [0.26, 0.74]; constant features collapse to 0.5.
inline DatasetSplit normalize(const Matrix& raw, const std::vector<std::size_t>& labels,
                              const NormalizationStats* fit_stats = nullptr) {
    DatasetSplit out;
    out.labels = labels;
    out.features = Matrix(raw.rows, raw.cols);
    if (fit_stats) {
        out.normalization = *fit_stats;
    } else {
        out.normalization.min.assign(raw.cols, 0.0);
        out.normalization.max.assign(raw.cols, 0.0);
        for (std::size_t j = 0; j < raw.cols; ++j) {
            double lo = raw(0, j), hi = raw(0, j);
            for (std::size_t i = 1; i < raw.rows; ++i) {
                lo = std::min(lo, raw(i, j));
                hi = std::max(hi, raw(i, j));
            }
            out.normalization.min[j] = lo;
            out.normalization.max[j] = hi;
        }
    }
    for (std::size_t i = 0; i < raw.rows; ++i)
        for (std::size_t j = 0; j < raw.cols; ++j) {
            const double lo = out.normalization.min[j], hi = out.normalization.max[j];
            const double x = raw(i, j);
            double v;
            if (hi == lo)
                v = 0.5;
            else if (x < lo)
                v = 0.26;
            else if (x > hi)
                v = 0.74;
            else
                v = 0.25 + 0.5 * (x - lo) / (hi - lo);
            out.features(i, j) = v;
        }
    return out;
}

inline double denormalize(double v, double lo, double hi) {
    return lo + (v - 0.25) / 0.5 * (hi - lo);
}

// Interleaved half circles with Gaussian noise; rows shuffled, labels
// balanced.
inline std::pair<Matrix, std::vector<std::size_t>> two_moons(std::size_t m, double noise,
                                                             std::uint64_t seed) {
    if (m % 2 != 0) throw ShapeMismatch("two_moons: sample count must be even");
    const std::size_t mc = m / 2;
    Matrix x(m, 2);
    std::vector<std::size_t> y(m);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t i = 0; i < mc; ++i) {
        const double t = std::numbers::pi * static_cast<double>(i) / static_cast<double>(mc - 1);
        x(i, 0) = std::cos(t);
        x(i, 1) = std::sin(t);
        y[i] = 0;
        x(mc + i, 0) = 1.0 - std::cos(t);
        x(mc + i, 1) = 0.5 - std::sin(t);
        y[mc + i] = 1;
    }
    if (noise > 0.0)
        for (double& v : x.data) v += noise * gauss(rng);
    // Shuffle rows so contiguous splits stay balanced.
    std::vector<std::size_t> perm(m);
    for (std::size_t i = 0; i < m; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix xs(m, 2);
    std::vector<std::size_t> ys(m);
    for (std::size_t i = 0; i < m; ++i) {
        xs(i, 0) = x(perm[i], 0);
        xs(i, 1) = x(perm[i], 1);
        ys[i] = y[perm[i]];
    }
    return {std::move(xs), std::move(ys)};
}

inline DslModel init_model(const TrainConfig& cfg, std::size_t input_dim, std::size_t num_classes) {
    DslModel m;
    m.input_dim = input_dim;
    m.num_classes = num_classes;
    m.d = cfg.d;
    m.ablation = cfg.ablation;
    std::mt19937_64 rng(cfg.seed);

    auto dims = [&](const std::vector<std::size_t>& hidden, std::size_t in, std::size_t out) {
        std::vector<std::size_t> v{in};
        v.insert(v.end(), hidden.begin(), hidden.end());
        v.push_back(out);
        return v;
    };
    const std::size_t coeff_in = cfg.ablation ? input_dim + 1 : input_dim;

    m.a_net = mlp_init(dims(cfg.a_hidden, input_dim, input_dim), Activation::Tanh, cfg.a_range,
                       cfg.init, rng());
    m.invp_net = mlp_init(dims(cfg.hidden, coeff_in, 1), Activation::LeakyRelu, cfg.invp_range,
                          cfg.init, rng());
    m.q_net = mlp_init(dims(cfg.hidden, coeff_in, 1), Activation::LeakyRelu, cfg.q_range, cfg.init,
                       rng());
    m.w_net = mlp_init(dims(cfg.hidden, coeff_in, 1), Activation::LeakyRelu, cfg.w_range, cfg.init,
                       rng());
    if (cfg.v_learnable && !cfg.ablation)
        m.v_net = mlp_init(dims(cfg.v_hidden, input_dim, cfg.d), Activation::LeakyRelu,
                           std::nullopt, cfg.init, rng());

    const double limit = std::sqrt(6.0 / static_cast<double>(cfg.d + num_classes));
    std::uniform_real_distribution<double> unif(-limit, limit);
    m.head = Matrix(num_classes, cfg.d);
    for (double& v : m.head.data) v = unif(rng);
    if (cfg.head_bias) m.head_bias.assign(num_classes, 0.0);
    return m;
}

struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    Vector m, v;
    std::size_t t = 0;

    void step(Vector& params, const Vector& grad, double lr) {
        if (m.empty()) {
            m.assign(params.size(), 0.0);
            v.assign(params.size(), 0.0);
        }
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
};

namespace detail {

inline bool is_sample_failure(const std::exception& e) {
    return dynamic_cast<const NoEventDetected*>(&e) || dynamic_cast<const BracketFailure*>(&e) ||
           dynamic_cast<const SingularJacobian*>(&e) || dynamic_cast<const StartOnBoundary*>(&e) ||
           dynamic_cast<const MaxStepsExceeded*>(&e) || dynamic_cast<const StepSizeUnderflow*>(&e);
}

// Static-partition parallel map; results land in caller-indexed slots so
// reductions are independent of the thread count.
template <class Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, count));
    if (threads == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < count; i += threads) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace detail

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    std::size_t failures = 0;
};

// Argmax accuracy; samples whose forward pass fails count as errors.
inline EvalResult evaluate(const DslModel& m, const DatasetSplit& split, const SolverSettings& s,
                           LossKind kind, std::size_t threads = 1) {
    if (split.size() == 0) throw ShapeMismatch("evaluate: empty split");
    std::vector<int> correct(split.size(), 0);
    Vector losses(split.size(), 0.0);
    std::vector<int> failed(split.size(), 0);
    detail::parallel_for(split.size(), threads, [&](std::size_t i) {
        try {
            const Vector logits = predict(m, split.row(i), s);
            const std::size_t arg = static_cast<std::size_t>(
                std::max_element(logits.begin(), logits.end()) - logits.begin());
            correct[i] = (arg == split.labels[i]) ? 1 : 0;
            losses[i] = loss_value(logits, split.labels[i], kind);
        } catch (const std::exception& e) {
            if (!detail::is_sample_failure(e)) throw;
            failed[i] = 1;
        }
    });
    EvalResult r;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < split.size(); ++i) {
        r.failures += failed[i];
        if (!failed[i]) {
            r.accuracy += correct[i];
            r.mean_loss += losses[i];
            ++ok;
        }
    }
    r.accuracy /= static_cast<double>(split.size());
    r.mean_loss = ok ? r.mean_loss / static_cast<double>(ok) : 0.0;
    return r;
}

struct HistoryRow {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_accuracy = 0.0;
    std::size_t skipped = 0;
};

struct FitResult {
    DslModel model;  // best validation checkpoint
    std::vector<HistoryRow> history;
    std::size_t total_skipped = 0;
};

inline FitResult fit(const TrainConfig& cfg, const DatasetSplit& train, const DatasetSplit& val) {
    if (train.size() == 0 || val.size() == 0) throw ShapeMismatch("fit: empty split");
    const std::size_t n = train.features.cols;
    std::size_t k = 0;
    for (std::size_t y : train.labels) k = std::max(k, y + 1);
    for (std::size_t y : val.labels) k = std::max(k, y + 1);

    DslModel model = init_model(cfg, n, k);
    Vector params = flatten_params(model);
    Adam adam;
    std::mt19937_64 shuffle_rng(cfg.seed);

    FitResult res;
    res.history.reserve(cfg.epochs);
    double best_acc = -1.0;
    Vector best_params = params;

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    struct SampleOut {
        DslGrad grad;
        double loss = 0.0;
        bool ok = false;
    };

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        std::size_t epoch_count = 0, epoch_skipped = 0;

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t bs = std::min(cfg.batch_size, order.size() - start);
            std::vector<SampleOut> outs(bs);
            detail::parallel_for(bs, cfg.threads, [&](std::size_t b) {
                const std::size_t idx = order[start + b];
                try {
                    ForwardCache cache = dsl_forward(model, train.row(idx), cfg.solver);
                    const std::size_t label = train.labels[idx];
                    outs[b].loss = loss_value(cache.logits, label, cfg.loss) +
                                   spectral_penalty(cache.spec.lambdas, cfg.alpha);
                    outs[b].grad = implicit_grad(model, cache,
                                                 loss_grad(cache.logits, label, cfg.loss),
                                                 cfg.alpha, cfg.solver);
                    outs[b].ok = true;
                } catch (const std::exception& e) {
                    if (!detail::is_sample_failure(e)) throw;
                    outs[b].ok = false;
                }
            });

            std::size_t ok = 0;
            DslGrad batch_grad = DslGrad::zeros_like(model);
            for (auto& o : outs) {
                if (!o.ok) continue;
                batch_grad.add_scaled(o.grad, 1.0);
                epoch_loss += o.loss;
                ++ok;
            }
            const std::size_t failures = bs - ok;
            epoch_skipped += failures;
            epoch_count += ok;
            if (static_cast<double>(failures) > cfg.max_batch_failure_fraction *
                                                    static_cast<double>(bs))
                throw TrainingAborted("fit: " + std::to_string(failures) + " of " +
                                      std::to_string(bs) + " samples failed in one batch");
            if (ok == 0) continue;
            batch_grad.scale(1.0 / static_cast<double>(ok));
            Vector flat = flatten_grad(model, batch_grad);
            adam.step(params, flat, cfg.lr);
            unflatten_params(model, params);
        }

        const EvalResult ev = evaluate(model, val, cfg.solver, cfg.loss, cfg.threads);
        HistoryRow row;
        row.epoch = epoch;
        row.train_loss = epoch_count ? epoch_loss / static_cast<double>(epoch_count) : 0.0;
        row.val_accuracy = ev.accuracy;
        row.skipped = epoch_skipped;
        res.history.push_back(row);
        res.total_skipped += epoch_skipped;
        if (ev.accuracy > best_acc) {
            best_acc = ev.accuracy;
            best_params = params;
        }
    }
    unflatten_params(model, best_params);
    res.model = std::move(model);
    return res;
}

}  // namespace dsl
