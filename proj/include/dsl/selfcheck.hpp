#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dsl/gradflow.hpp"
#include "dsl/learner.hpp"
#include "dsl/slcore.hpp"

// Built-in verification suites behind `dsl selfcheck`: analytic eigenpairs,
// bound containment against the finite-difference oracle, orthogonality,
// and the implicit-gradient finite-difference check.

namespace dsl {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace selfcheck_detail {

inline CoefficientTrace constant_trace(double t_minus, double t_plus, double p, double q, double w,
                                       std::size_t knots, std::size_t d) {
    CoefficientTrace tr;
    tr.t_minus = t_minus;
    tr.t_plus = t_plus;
    tr.invp_vals.assign(knots + 1, 1.0 / p);
    tr.q_vals.assign(knots + 1, q);
    tr.w_vals.assign(knots + 1, w);
    tr.v0.assign(d, 1.0);
    return tr;
}

// Smooth coefficients inside the role ranges sampled on the knot grid.
inline CoefficientTrace random_smooth_trace(std::mt19937_64& rng, std::size_t knots, std::size_t d) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double t_minus = -0.3 - 0.5 * u01(rng);
    const double t_plus = 0.3 + 0.5 * u01(rng);
    auto smooth = [&](double mid, double amp) {
        const double w1 = 1.0 + 2.0 * u01(rng), w2 = 2.0 + 3.0 * u01(rng);
        const double p1 = 2.0 * std::numbers::pi * u01(rng), p2 = 2.0 * std::numbers::pi * u01(rng);
        const double a1 = u01(rng), a2 = u01(rng);
        return [=](double t) {
            return mid + amp * (a1 * std::sin(w1 * t + p1) + a2 * std::sin(w2 * t + p2)) /
                             std::max(a1 + a2, 1e-9);
        };
    };
    auto fp = smooth(5.0, 3.5);
    auto fq = smooth(0.0, 7.0);
    auto fw = smooth(4.0, 3.0);
    CoefficientTrace tr;
    tr.t_minus = t_minus;
    tr.t_plus = t_plus;
    tr.invp_vals.resize(knots + 1);
    tr.q_vals.resize(knots + 1);
    tr.w_vals.resize(knots + 1);
    tr.v0.assign(d, 1.0);
    for (std::size_t k = 0; k <= knots; ++k) {
        const double t = t_minus + (t_plus - t_minus) * static_cast<double>(k) / knots;
        tr.invp_vals[k] = fp(t);
        tr.q_vals[k] = fq(t);
        tr.w_vals[k] = fw(t);
    }
    return tr;
}

}  // namespace selfcheck_detail

// Analytic eigenpairs: constant coefficients, lambda_n = n^2 pi^2 and sine
// eigenfunctions on a unit interval.
inline CheckResult check_analytic_eigenpairs() {
    using namespace selfcheck_detail;
    CheckResult r;
    r.name = "analytic-eigenpairs";
    auto tr = constant_trace(-0.25, 0.75, 1.0, 0.0, 1.0, 200, 10);
    SolveOptions opts;
    opts.tol_lambda = 1e-9;
    opts.ode.rtol = opts.ode.atol = 1e-10;
    double worst_rel = 0.0;
    for (std::size_t n = 1; n <= 10; ++n) {
        const double exact = double(n * n) * std::numbers::pi * std::numbers::pi;
        const double lambda = solve_nth_detail(tr, n, opts).lambda;
        worst_rel = std::max(worst_rel, std::fabs(lambda - exact) / exact);
    }
    auto sp = spectrum(tr, 4, opts);
    auto be = eval_basis(tr, sp, 801);
    double worst_sup = 0.0;
    for (std::size_t n = 1; n <= 4; ++n)
        for (std::size_t g = 0; g < be.times.size(); ++g) {
            const double expect =
                std::sin(double(n) * std::numbers::pi * (be.times[g] + 0.25)) /
                (double(n) * std::numbers::pi);
            worst_sup = std::max(worst_sup, std::fabs(be.u(n - 1, g) - expect));
        }
    r.pass = worst_rel < 1e-6 && worst_sup < 1e-4;
    r.detail = "max eigenvalue rel err " + std::to_string(worst_rel) + ", basis sup err " +
               std::to_string(worst_sup);
    return r;
}

// Constant shift: q = 5 must move lambda_1 to pi^2 + 5 (the sign-convention
// gate) and the analytic bounds must contain it.
inline CheckResult check_shift_oracle() {
    using namespace selfcheck_detail;
    CheckResult r;
    r.name = "shift-oracle";
    auto tr = constant_trace(-0.5, 0.5, 1.0, 5.0, 1.0, 200, 4);
    SolveOptions opts;
    opts.tol_lambda = 1e-9;
    opts.ode.rtol = opts.ode.atol = 1e-10;
    const double expect = std::numbers::pi * std::numbers::pi + 5.0;
    const auto res = solve_nth_detail(tr, 1, opts);
    auto [lo, hi] = eigen_bounds(tr, 1);
    // Constant coefficients collapse the bounds to a point; containment is
    // meaningful only up to the bisection tolerance.
    const double slack = 2.0 * opts.tol_lambda * std::max(1.0, std::fabs(hi));
    const double rel = std::fabs(res.lambda - expect) / expect;
    r.pass = rel < 1e-6 && lo - slack <= res.lambda && res.lambda <= hi + slack;
    r.detail = "lambda_1 rel err " + std::to_string(rel) + " vs pi^2 + 5";
    return r;
}

// Shooting vs. the tridiagonal oracle, bound containment and eigenfunction
// structure on random smooth traces.
inline CheckResult check_bounds_and_oracle(std::size_t traces = 5, std::uint64_t seed = 2027) {
    using namespace selfcheck_detail;
    CheckResult r;
    r.name = "bounds-and-oracle";
    std::mt19937_64 rng(seed);
    SolveOptions opts;
    opts.tol_lambda = 1e-6;
    opts.ode.rtol = opts.ode.atol = 1e-8;
    double worst = 0.0;
    std::size_t contained = 0, total = 0, sign_ok = 0, sign_total = 0;
    for (std::size_t t = 0; t < traces; ++t) {
        auto tr = random_smooth_trace(rng, 2000, 6);
        const auto oracle = fd_oracle(tr, 6, 2000);
        auto sp = spectrum(tr, 6, opts);
        auto be = eval_basis(tr, sp, 512);
        for (std::size_t n = 1; n <= 6; ++n) {
            const double lambda = sp.lambdas[n - 1];
            worst = std::max(worst, std::fabs(lambda - oracle[n - 1]) / std::fabs(oracle[n - 1]));
            auto [lo, hi] = eigen_bounds(tr, n);
            ++total;
            if (lambda >= lo && lambda <= hi) ++contained;
            Vector interior(be.u.data.begin() + (n - 1) * be.u.cols + 1,
                            be.u.data.begin() + (n - 1) * be.u.cols + be.u.cols - 1);
            ++sign_total;
            if (count_sign_changes(interior) == n - 1) ++sign_ok;
        }
    }
    r.pass = worst < 1e-3 && contained == total && sign_ok == sign_total;
    r.detail = "max oracle rel err " + std::to_string(worst) + ", containment " +
               std::to_string(contained) + "/" + std::to_string(total) + ", sign counts " +
               std::to_string(sign_ok) + "/" + std::to_string(sign_total);
    return r;
}

// Normalized Gram off-diagonals on random traces.
inline CheckResult check_orthogonality(std::size_t traces = 3, std::uint64_t seed = 404) {
    using namespace selfcheck_detail;
    CheckResult r;
    r.name = "orthogonality";
    std::mt19937_64 rng(seed);
    SolveOptions opts;
    opts.tol_lambda = 1e-7;
    opts.ode.rtol = opts.ode.atol = 1e-9;
    double worst = 0.0;
    for (std::size_t t = 0; t < traces; ++t) {
        auto tr = random_smooth_trace(rng, 1000, 6);
        auto sp = spectrum(tr, 6, opts);
        auto be = eval_basis(tr, sp, 4000);
        auto gram = orthogonality_gram(tr, be);
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = i + 1; j < 6; ++j)
                worst = std::max(worst,
                                 std::fabs(gram(i, j)) / std::sqrt(gram(i, i) * gram(j, j)));
    }
    r.pass = worst < 1e-3;
    r.detail = "max normalized off-diagonal " + std::to_string(worst);
    return r;
}

// Implicit gradients vs. central finite differences on a tiny model.
inline CheckResult check_gradients(std::uint64_t seed = 11) {
    CheckResult r;
    r.name = "gradient-fd";
    TrainConfig cfg;
    cfg.d = 2;
    cfg.hidden = {4};
    cfg.a_hidden = {4};
    cfg.v_hidden = {4};
    cfg.v_learnable = true;
    cfg.seed = seed;
    cfg.solver.rtol = cfg.solver.atol = 1e-10;
    cfg.solver.tol_t = 1e-10;
    cfg.solver.tol_lambda = 1e-10;
    cfg.solver.knots = 50;
    DslModel m = init_model(cfg, 2, 2);
    const auto rep = fd_check(m, {0.4, 0.62}, 1, 1e-5, cfg.solver, LossKind::CrossEntropy, 1e-2);
    std::size_t over = 0;
    for (double e : rep.rel_errors)
        if (e > 1e-3) ++over;
    const double frac =
        1.0 - static_cast<double>(over) / static_cast<double>(rep.rel_errors.size());
    r.pass = frac >= 0.99 && rep.max_rel_error <= 1e-2;
    r.detail = "fraction within 1e-3: " + std::to_string(frac) + ", max rel err " +
               std::to_string(rep.max_rel_error);
    return r;
}

// Runs every suite, printing one line per check. Returns true if all pass.
inline bool run_selfcheck(bool quick = true) {
    std::vector<CheckResult> results;
    results.push_back(check_analytic_eigenpairs());
    results.push_back(check_shift_oracle());
    results.push_back(check_bounds_and_oracle(quick ? 3 : 20));
    results.push_back(check_orthogonality(quick ? 2 : 10));
    results.push_back(check_gradients());
    bool all = true;
    for (const auto& r : results) {
        std::printf("selfcheck %-22s %s  (%s)\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                    r.detail.c_str());
        all = all && r.pass;
    }
    return all;
}

}  // namespace dsl
