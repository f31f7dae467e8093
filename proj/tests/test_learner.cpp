#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "dsl/learner.hpp"

using namespace dsl;

namespace {

TrainConfig small_cfg(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.d = 3;
    cfg.hidden = {16, 8};
    cfg.a_hidden = {16, 8};
    cfg.seed = seed;
    cfg.solver.rtol = cfg.solver.atol = 1e-6;
    cfg.solver.tol_t = 1e-4;
    cfg.solver.tol_lambda = 1e-4;
    cfg.solver.knots = 100;
    return cfg;
}

DatasetSplit moon_split(std::size_t m, std::uint64_t seed, const NormalizationStats* stats = nullptr) {
    auto [raw, labels] = two_moons(m, 0.1, seed);
    return normalize(raw, labels, stats);
}

}  // namespace

TEST_CASE("hinge loss is zero once the margin is met") {
    REQUIRE(loss_value({2.5, 0.3, 1.2}, 0, LossKind::Hinge) == 0.0);
    REQUIRE(loss_value({2.0, 1.5}, 0, LossKind::Hinge) == Catch::Approx(0.5));
}

TEST_CASE("cross entropy of uniform logits is log k") {
    for (std::size_t k : {2u, 5u, 7u}) {
        Vector logits(k, 0.37);
        REQUIRE_THAT(loss_value(logits, 1 % k, LossKind::CrossEntropy),
                     Catch::Matchers::WithinRel(std::log(double(k)), 1e-12));
    }
}

TEST_CASE("losses are nonnegative") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int t = 0; t < 50; ++t) {
        Vector logits(3);
        for (double& v : logits) v = u(rng);
        REQUIRE(loss_value(logits, t % 3, LossKind::Hinge) >= 0.0);
        REQUIRE(loss_value(logits, t % 3, LossKind::CrossEntropy) >= 0.0);
    }
}

TEST_CASE("spectral penalty follows the stated formula") {
    REQUIRE(spectral_penalty({9.8696, 39.478}, 0.0) == 0.0);
    const double pi2 = std::numbers::pi * std::numbers::pi;
    REQUIRE_THAT(spectral_penalty({pi2, 4.0 * pi2}, 1e-4),
                 Catch::Matchers::WithinRel(2.4674e-3, 1e-4));
}

TEST_CASE("normalization maps the training range onto the quarter band") {
    Matrix raw(3, 2);
    raw(0, 0) = 0.0; raw(0, 1) = 5.0;
    raw(1, 0) = 10.0; raw(1, 1) = 5.0;
    raw(2, 0) = 5.0; raw(2, 1) = 5.0;
    auto split = normalize(raw, {0, 1, 0});
    REQUIRE(split.features(0, 0) == 0.25);
    REQUIRE(split.features(1, 0) == 0.75);
    REQUIRE(split.features(2, 0) == 0.5);
    // Constant column collapses to the center.
    REQUIRE(split.features(0, 1) == 0.5);
    REQUIRE(split.features(2, 1) == 0.5);
}

TEST_CASE("out-of-range values clip to the guard band") {
    Matrix raw(2, 1);
    raw(0, 0) = 0.0;
    raw(1, 0) = 1.0;
    auto train = normalize(raw, {0, 1});
    Matrix fresh(3, 1);
    fresh(0, 0) = -0.5;  // below the training range
    fresh(1, 0) = 1.5;   // above
    fresh(2, 0) = 0.5;   // inside
    auto test = normalize(fresh, {0, 1, 0}, &train.normalization);
    REQUIRE(test.features(0, 0) == 0.26);
    REQUIRE(test.features(1, 0) == 0.74);
    REQUIRE(test.features(2, 0) == 0.5);
}

TEST_CASE("normalization round-trips in-range values") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-4.0, 7.0);
    Matrix raw(20, 3);
    for (double& v : raw.data) v = u(rng);
    auto split = normalize(raw, std::vector<std::size_t>(20, 0));
    for (std::size_t i = 0; i < 20; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            const double back = denormalize(split.features(i, j), split.normalization.min[j],
                                            split.normalization.max[j]);
            REQUIRE_THAT(back, Catch::Matchers::WithinAbs(raw(i, j), 1e-12));
        }
}

TEST_CASE("two moons is balanced and reproducible") {
    auto [x1, y1] = two_moons(500, 0.05, 7);
    auto [x2, y2] = two_moons(500, 0.05, 7);
    REQUIRE(x1.data == x2.data);
    REQUIRE(y1 == y2);
    std::size_t ones = 0;
    for (std::size_t v : y1) ones += v;
    REQUIRE(ones == 250);
}

TEST_CASE("noiseless moons sit exactly on the arcs") {
    auto [x, y] = two_moons(100, 0.0, 3);
    for (std::size_t i = 0; i < 100; ++i) {
        if (y[i] == 0) {
            REQUIRE_THAT(x(i, 0) * x(i, 0) + x(i, 1) * x(i, 1),
                         Catch::Matchers::WithinAbs(1.0, 1e-12));
        } else {
            const double cx = x(i, 0) - 1.0, cy = x(i, 1) - 0.5;
            REQUIRE_THAT(cx * cx + cy * cy, Catch::Matchers::WithinAbs(1.0, 1e-12));
        }
    }
}

TEST_CASE("odd sample counts are rejected") {
    REQUIRE_THROWS_AS(two_moons(501, 0.1, 0), ShapeMismatch);
}

TEST_CASE("predict is deterministic and respects a zero head") {
    TrainConfig cfg = small_cfg(5);
    DslModel m = init_model(cfg, 2, 2);
    const Vector x{0.45, 0.55};
    const Vector l1 = predict(m, x, cfg.solver);
    const Vector l2 = predict(m, x, cfg.solver);
    REQUIRE(l1 == l2);

    std::fill(m.head.data.begin(), m.head.data.end(), 0.0);
    std::fill(m.head_bias.begin(), m.head_bias.end(), 0.0);
    const Vector z = predict(m, x, cfg.solver);
    for (double v : z) REQUIRE(v == 0.0);
}

TEST_CASE("single basis-row head reads off u1") {
    TrainConfig cfg = small_cfg(6);
    DslModel m = init_model(cfg, 2, 2);
    std::fill(m.head.data.begin(), m.head.data.end(), 0.0);
    std::fill(m.head_bias.begin(), m.head_bias.end(), 0.0);
    m.head(0, 0) = 1.0;
    const Vector x{0.5, 0.42};
    ForwardCache c = dsl_forward(m, x, cfg.solver);
    REQUIRE(c.logits[0] == c.u0[0]);
    REQUIRE(c.logits[1] == 0.0);
}

TEST_CASE("head is equivariant under label permutation") {
    TrainConfig cfg = small_cfg(8);
    DslModel m = init_model(cfg, 2, 3);
    const Vector x{0.52, 0.61};
    const Vector base = predict(m, x, cfg.solver);
    // Swap classes 0 and 2 in the head.
    for (std::size_t j = 0; j < m.d; ++j) std::swap(m.head(0, j), m.head(2, j));
    std::swap(m.head_bias[0], m.head_bias[2]);
    const Vector swapped = predict(m, x, cfg.solver);
    REQUIRE_THAT(swapped[0], Catch::Matchers::WithinAbs(base[2], 1e-14));
    REQUIRE_THAT(swapped[2], Catch::Matchers::WithinAbs(base[0], 1e-14));
    REQUIRE_THAT(swapped[1], Catch::Matchers::WithinAbs(base[1], 1e-14));
}

TEST_CASE("flow consistency: predictions agree along a field line") {
    TrainConfig cfg = small_cfg(10);
    cfg.solver.rtol = cfg.solver.atol = 1e-9;
    cfg.solver.tol_t = 1e-8;
    cfg.solver.tol_lambda = 1e-8;
    cfg.solver.knots = 800;
    DslModel m = init_model(cfg, 2, 2);
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> ux(0.35, 0.65), us(0.2, 0.8);
    for (int trial = 0; trial < 4; ++trial) {
        const Vector x1{ux(rng), ux(rng)};
        ForwardCache c1 = dsl_forward(m, x1, cfg.solver);
        // Pick a point downstream on the same field line.
        const double s = c1.trace.t_minus +
                         us(rng) * (c1.trace.t_plus - c1.trace.t_minus);
        const Vector x2 = c1.fl.eval(s);
        bool inside = true;
        for (double v : x2) inside = inside && v > 0.05 && v < 0.95;
        if (!inside) continue;

        // Field-line value at s from x1's basis.
        Vector u_s(m.d);
        for (std::size_t n = 0; n < m.d; ++n)
            u_s[n] = u_solve(c1.trace, c1.spec.lambdas[n], c1.trace.v0[n], s, c1.substeps).u_anchor;
        Vector f_line;
        matvec(m.head, u_s, f_line);
        for (std::size_t i = 0; i < f_line.size(); ++i) f_line[i] += m.head_bias[i];

        const Vector f_pred = predict(m, x2, cfg.solver);
        double scale = 1e-3;
        for (double v : f_line) scale = std::max(scale, std::fabs(v));
        for (std::size_t i = 0; i < f_pred.size(); ++i)
            REQUIRE(std::fabs(f_pred[i] - f_line[i]) <= 1e-3 * scale);
    }
}

TEST_CASE("implicit regularization: fewer basis functions mean fewer sign changes") {
    TrainConfig cfg = small_cfg(12);
    DslModel m = init_model(cfg, 2, 2);
    ForwardCache c = dsl_forward(m, {0.5, 0.5}, cfg.solver);
    auto be = eval_basis(c.trace, c.spec, 400, c.anchor);
    for (std::size_t n = 1; n <= m.d; ++n) {
        Vector interior(be.u.data.begin() + (n - 1) * be.u.cols + 1,
                        be.u.data.begin() + (n - 1) * be.u.cols + be.u.cols - 1);
        REQUIRE(count_sign_changes(interior) == n - 1);
    }
}

TEST_CASE("evaluate scores a perfect and a constant predictor") {
    TrainConfig cfg = small_cfg(14);
    DatasetSplit split = moon_split(40, 5);
    DslModel m = init_model(cfg, 2, 2);
    // Constant predictor: zero head with a fixed bias favoring class 0.
    std::fill(m.head.data.begin(), m.head.data.end(), 0.0);
    m.head_bias = {1.0, 0.0};
    EvalResult ev = evaluate(m, split, cfg.solver, LossKind::Hinge);
    std::size_t zeros = 0;
    for (std::size_t y : split.labels) zeros += (y == 0);
    REQUIRE_THAT(ev.accuracy,
                 Catch::Matchers::WithinAbs(double(zeros) / split.size(), 1e-12));
    REQUIRE(ev.failures == 0);
    REQUIRE(ev.accuracy >= 0.0);
    REQUIRE(ev.accuracy <= 1.0);
}

TEST_CASE("a short fit run learns something and fills history") {
    TrainConfig cfg = small_cfg(16);
    cfg.epochs = 5;
    cfg.batch_size = 16;
    cfg.loss = LossKind::Hinge;
    DatasetSplit train = moon_split(96, 11);
    DatasetSplit val = moon_split(48, 12, &train.normalization);
    FitResult res = fit(cfg, train, val);
    REQUIRE(res.history.size() == 5);
    for (std::size_t e = 0; e + 1 < res.history.size(); ++e)
        REQUIRE(res.history[e].epoch == e);
    // The optimizer makes progress and validation is no worse than chance.
    REQUIRE(res.history.back().train_loss < res.history.front().train_loss);
    REQUIRE(res.history.back().val_accuracy >= 0.5);
    // Deterministic re-run produces the identical history.
    FitResult res2 = fit(cfg, train, val);
    for (std::size_t e = 0; e < res.history.size(); ++e) {
        REQUIRE(res.history[e].train_loss == res2.history[e].train_loss);
        REQUIRE(res.history[e].val_accuracy == res2.history[e].val_accuracy);
    }
}

TEST_CASE("history is identical regardless of the worker pool size") {
    TrainConfig cfg = small_cfg(17);
    cfg.epochs = 2;
    cfg.batch_size = 8;
    DatasetSplit train = moon_split(48, 31);
    DatasetSplit val = moon_split(24, 32, &train.normalization);
    FitResult one = fit(cfg, train, val);
    cfg.threads = 3;
    FitResult three = fit(cfg, train, val);
    for (std::size_t e = 0; e < one.history.size(); ++e) {
        REQUIRE(one.history[e].train_loss == three.history[e].train_loss);
        REQUIRE(one.history[e].val_accuracy == three.history[e].val_accuracy);
    }
}

TEST_CASE("a batch full of boundary samples aborts training") {
    TrainConfig cfg = small_cfg(19);
    cfg.epochs = 1;
    cfg.batch_size = 4;
    DatasetSplit train = moon_split(8, 41);
    // Park every feature on the domain boundary: every forward pass fails
    // with StartOnBoundary, tripping the batch failure-rate gate.
    std::fill(train.features.data.begin(), train.features.data.end(), 1.0 - 1e-12);
    DatasetSplit val = moon_split(8, 42, &train.normalization);
    REQUIRE_THROWS_AS(fit(cfg, train, val), TrainingAborted);
}

TEST_CASE("ablation model trains through the same interface") {
    TrainConfig cfg = small_cfg(18);
    cfg.ablation = true;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    DatasetSplit train = moon_split(64, 21);
    DatasetSplit val = moon_split(32, 22, &train.normalization);
    FitResult res = fit(cfg, train, val);
    REQUIRE(res.history.size() == 2);
    REQUIRE(res.history.back().val_accuracy >= 0.4);
}

TEST_CASE("adam matches a hand-computed first step") {
    Adam adam;
    Vector params{1.0, -2.0};
    const Vector grad{0.5, -1.5};
    adam.step(params, grad, 1e-2);
    // First step moves each coordinate by lr * g / (|g| + eps) = lr * sign.
    REQUIRE_THAT(params[0], Catch::Matchers::WithinAbs(1.0 - 1e-2 * (0.5 / (0.5 + 1e-8)), 1e-12));
    REQUIRE_THAT(params[1], Catch::Matchers::WithinAbs(-2.0 + 1e-2 * (1.5 / (1.5 + 1e-8)), 1e-12));
}
