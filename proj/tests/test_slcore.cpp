#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "dsl/slcore.hpp"

using namespace dsl;
using std::numbers::pi;

namespace {

CoefficientTrace constant_trace(double t_minus, double t_plus, double p, double q, double w,
                                std::size_t knots = 200, std::size_t d = 6) {
    CoefficientTrace tr;
    tr.t_minus = t_minus;
    tr.t_plus = t_plus;
    tr.invp_vals.assign(knots + 1, 1.0 / p);
    tr.q_vals.assign(knots + 1, q);
    tr.w_vals.assign(knots + 1, w);
    tr.v0.assign(d, 1.0);
    return tr;
}

// Smooth positive coefficients inside the role ranges, sampled on the knot
// grid like a real trace would be.
CoefficientTrace random_smooth_trace(std::mt19937_64& rng, std::size_t knots = 400,
                                     std::size_t d = 6) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double t_minus = -0.3 - 0.5 * u01(rng);
    const double t_plus = 0.3 + 0.5 * u01(rng);

    auto smooth = [&](double mid, double amp) {
        const double w1 = 1.0 + 2.0 * u01(rng), w2 = 2.0 + 3.0 * u01(rng);
        const double ph1 = 2.0 * pi * u01(rng), ph2 = 2.0 * pi * u01(rng);
        const double a1 = u01(rng), a2 = u01(rng);
        return [=](double t) {
            const double s = (a1 * std::sin(w1 * t + ph1) + a2 * std::sin(w2 * t + ph2)) /
                             std::max(a1 + a2, 1e-9);
            return mid + amp * s;
        };
    };
    auto f_invp = smooth(5.0, 3.5);   // inside (1, 10)
    auto f_q = smooth(0.0, 7.0);      // inside (-10, 10)
    auto f_w = smooth(4.0, 3.0);      // inside (0.1, 10)

    CoefficientTrace tr;
    tr.t_minus = t_minus;
    tr.t_plus = t_plus;
    tr.invp_vals.resize(knots + 1);
    tr.q_vals.resize(knots + 1);
    tr.w_vals.resize(knots + 1);
    tr.v0.assign(d, 1.0);
    for (std::size_t k = 0; k <= knots; ++k) {
        const double t = t_minus + (t_plus - t_minus) * static_cast<double>(k) / knots;
        tr.invp_vals[k] = f_invp(t);
        tr.q_vals[k] = f_q(t);
        tr.w_vals[k] = f_w(t);
    }
    return tr;
}

IntegrateOptions ode_tol(double tol) {
    IntegrateOptions o;
    o.rtol = tol;
    o.atol = tol;
    return o;
}

}  // namespace

TEST_CASE("constant coefficient bounds coincide with the analytic eigenvalue") {
    auto tr = constant_trace(-0.25, 0.75, 1.0, 0.0, 1.0);
    for (std::size_t n : {1u, 2u, 5u}) {
        auto [lo, hi] = eigen_bounds(tr, n);
        const double exact = double(n * n) * pi * pi;
        REQUIRE_THAT(lo, Catch::Matchers::WithinRel(exact, 1e-12));
        REQUIRE_THAT(hi, Catch::Matchers::WithinRel(exact, 1e-12));
    }
}

TEST_CASE("constant shift moves the bounds by q") {
    auto tr = constant_trace(-0.5, 0.5, 1.0, 5.0, 1.0);
    auto [lo, hi] = eigen_bounds(tr, 1);
    REQUIRE_THAT(lo, Catch::Matchers::WithinRel(pi * pi + 5.0, 1e-12));
    REQUIRE_THAT(hi, Catch::Matchers::WithinRel(pi * pi + 5.0, 1e-12));
}

TEST_CASE("pruefer residual vanishes at the first Dirichlet mode") {
    auto tr = constant_trace(0.0, 1.0, 1.0, 0.0, 1.0);
    REQUIRE(std::fabs(pruefer_residual(tr, pi * pi, 1, ode_tol(1e-9))) < 1e-6);
}

TEST_CASE("pruefer phase at lambda zero solves tan(theta) = t") {
    auto tr = constant_trace(0.0, 1.0, 1.0, 0.0, 1.0);
    const double g = pruefer_residual(tr, 0.0, 1, ode_tol(1e-10));
    REQUIRE_THAT(g + pi, Catch::Matchers::WithinAbs(std::atan(1.0), 1e-8));
}

TEST_CASE("residual is strictly increasing in lambda") {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 6; ++trial) {
        auto tr = random_smooth_trace(rng);
        auto [lo, hi] = eigen_bounds(tr, 3);
        std::uniform_real_distribution<double> u(lo - 5.0, hi + 5.0);
        double la = u(rng), lb = u(rng);
        if (la > lb) std::swap(la, lb);
        if (lb - la < 1e-6) continue;
        REQUIRE(pruefer_residual(tr, la, 3, ode_tol(1e-8)) <
                pruefer_residual(tr, lb, 3, ode_tol(1e-8)));
    }
}

TEST_CASE("constant coefficients give n^2 pi^2 over the unit interval") {
    auto tr = constant_trace(-0.25, 0.75, 1.0, 0.0, 1.0);
    for (std::size_t n = 1; n <= 6; ++n) {
        const double lambda = solve_nth(tr, n, 1e-8, ode_tol(1e-9));
        REQUIRE_THAT(lambda, Catch::Matchers::WithinRel(double(n * n) * pi * pi, 1e-6));
    }
}

TEST_CASE("doubling the interval scales eigenvalues by a quarter") {
    auto tr = constant_trace(-1.0, 1.0, 1.0, 0.0, 1.0);
    for (std::size_t n = 1; n <= 4; ++n) {
        const double lambda = solve_nth(tr, n, 1e-8, ode_tol(1e-9));
        REQUIRE_THAT(lambda, Catch::Matchers::WithinRel(double(n * n) * pi * pi / 4.0, 1e-6));
    }
}

TEST_CASE("shooting agrees with the finite difference oracle on random traces") {
    std::mt19937_64 rng(77);
    SolveOptions opts;
    opts.tol_lambda = 1e-6;
    opts.ode = ode_tol(1e-8);
    for (int trial = 0; trial < 5; ++trial) {
        auto tr = random_smooth_trace(rng);
        const auto oracle = fd_oracle(tr, 6, 2000);
        for (std::size_t n = 1; n <= 6; ++n) {
            const auto r = solve_nth_detail(tr, n, opts);
            REQUIRE_THAT(r.lambda, Catch::Matchers::WithinRel(oracle[n - 1], 1e-3));
            auto [lo, hi] = eigen_bounds(tr, n);
            REQUIRE(r.lambda >= lo);
            REQUIRE(r.lambda <= hi);
        }
    }
}

TEST_CASE("spectrum is strictly increasing with residual certificates") {
    std::mt19937_64 rng(99);
    auto tr = random_smooth_trace(rng);
    SolveOptions opts;
    opts.tol_lambda = 1e-6;
    opts.ode = ode_tol(1e-8);
    auto sp = spectrum(tr, 6, opts);
    for (std::size_t i = 0; i + 1 < sp.d; ++i) REQUIRE(sp.lambdas[i] < sp.lambdas[i + 1]);
    for (std::size_t i = 0; i < sp.d; ++i) {
        REQUIRE(sp.lambdas[i] >= sp.bound_lo[i]);
        REQUIRE(sp.lambdas[i] <= sp.bound_hi[i]);
        REQUIRE(sp.residuals[i] < 1e-3);
    }
}

TEST_CASE("scaling w scales the spectrum inversely") {
    std::mt19937_64 rng(5);
    auto tr = random_smooth_trace(rng);
    SolveOptions opts;
    opts.tol_lambda = 1e-8;
    opts.ode = ode_tol(1e-9);
    auto base = spectrum(tr, 3, opts);
    const double c = 2.5;
    for (double& w : tr.w_vals) w *= c;
    auto scaled = spectrum(tr, 3, opts);
    for (std::size_t i = 0; i < 3; ++i)
        REQUIRE_THAT(scaled.lambdas[i], Catch::Matchers::WithinRel(base.lambdas[i] / c, 1e-5));
}

TEST_CASE("constant-coefficient eigenfunctions are normalized sines") {
    auto tr = constant_trace(-0.25, 0.75, 1.0, 0.0, 1.0, 200, 4);
    SolveOptions opts;
    opts.tol_lambda = 1e-9;
    opts.ode = ode_tol(1e-10);
    auto sp = spectrum(tr, 4, opts);
    auto be = eval_basis(tr, sp, 801);
    for (std::size_t n = 1; n <= 4; ++n) {
        double worst = 0.0;
        for (std::size_t g = 0; g < be.times.size(); ++g) {
            const double t = be.times[g];
            const double expect = std::sin(double(n) * pi * (t + 0.25)) / (double(n) * pi);
            worst = std::max(worst, std::fabs(be.u(n - 1, g) - expect));
        }
        REQUIRE(worst < 1e-4);
        // Derivative rows follow the cosine.
        double worst_du = 0.0;
        for (std::size_t g = 0; g < be.times.size(); ++g) {
            const double expect = std::cos(double(n) * pi * (be.times[g] + 0.25));
            worst_du = std::max(worst_du, std::fabs(be.du(n - 1, g) - expect));
        }
        REQUIRE(worst_du < 1e-4);
        // Dirichlet at both ends.
        REQUIRE(std::fabs(be.u(n - 1, 0)) < 1e-12);
        REQUIRE(std::fabs(be.u(n - 1, be.times.size() - 1)) < 1e-4);
        // u_at_zero matches the sine at the anchor.
        REQUIRE_THAT(be.u_at_zero[n - 1],
                     Catch::Matchers::WithinAbs(std::sin(double(n) * pi * 0.25) / (double(n) * pi), 1e-6));
    }
}

TEST_CASE("eigenfunction n has n-1 interior sign changes") {
    std::mt19937_64 rng(13);
    SolveOptions opts;
    opts.tol_lambda = 1e-6;
    opts.ode = ode_tol(1e-8);
    for (int trial = 0; trial < 3; ++trial) {
        auto tr = random_smooth_trace(rng);
        auto sp = spectrum(tr, 6, opts);
        auto be = eval_basis(tr, sp, 512);
        for (std::size_t n = 1; n <= 6; ++n) {
            Vector interior(be.u.data.begin() + (n - 1) * be.u.cols + 1,
                            be.u.data.begin() + (n - 1) * be.u.cols + be.u.cols - 1);
            REQUIRE(count_sign_changes(interior) == n - 1);
        }
    }
}

TEST_CASE("count_sign_changes on simple sequences") {
    REQUIRE(count_sign_changes({1.0, 1.0, 1.0}) == 0);
    Vector sin2(101), sin3(101);
    for (int i = 0; i <= 100; ++i) {
        const double t = i / 100.0;
        sin2[i] = std::sin(2.0 * pi * t);
        sin3[i] = std::sin(3.0 * pi * t);
    }
    REQUIRE(count_sign_changes(sin2) == 1);
    REQUIRE(count_sign_changes(sin3) == 2);
}

TEST_CASE("gram matrix is diagonal for constant coefficients") {
    auto tr = constant_trace(-0.5, 0.5, 1.0, 0.0, 1.0, 100, 4);
    SolveOptions opts;
    opts.tol_lambda = 1e-8;
    opts.ode = ode_tol(1e-9);
    auto sp = spectrum(tr, 4, opts);
    auto be = eval_basis(tr, sp, 2001);
    auto gram = orthogonality_gram(tr, be);
    for (std::size_t i = 0; i < 4; ++i) {
        REQUIRE(gram(i, i) > 0.0);
        for (std::size_t j = 0; j < 4; ++j) {
            if (i == j) continue;
            REQUIRE(std::fabs(gram(i, j)) / std::sqrt(gram(i, i) * gram(j, j)) < 1e-6);
        }
    }
}

TEST_CASE("gram off-diagonals stay small on random traces") {
    std::mt19937_64 rng(404);
    SolveOptions opts;
    opts.tol_lambda = 1e-7;
    opts.ode = ode_tol(1e-9);
    for (int trial = 0; trial < 3; ++trial) {
        auto tr = random_smooth_trace(rng);
        auto sp = spectrum(tr, 6, opts);
        auto be = eval_basis(tr, sp, 4000);
        auto gram = orthogonality_gram(tr, be);
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = i + 1; j < 6; ++j)
                REQUIRE(std::fabs(gram(i, j)) / std::sqrt(gram(i, i) * gram(j, j)) < 1e-3);
    }
}

TEST_CASE("fd oracle converges at second order") {
    auto tr = constant_trace(0.0, 1.0, 1.0, 0.0, 1.0);
    const auto coarse = fd_oracle(tr, 1, 500);
    const auto fine = fd_oracle(tr, 1, 1000);
    const auto finest = fd_oracle(tr, 1, 2000);
    REQUIRE_THAT(finest[0], Catch::Matchers::WithinRel(pi * pi, 1e-5));
    const double e_coarse = std::fabs(coarse[0] - pi * pi);
    const double e_fine = std::fabs(fine[0] - pi * pi);
    const double ratio = e_coarse / e_fine;
    REQUIRE(ratio > 3.0);
    REQUIRE(ratio < 5.0);
}

TEST_CASE("tighter shooting tolerance shrinks the far-end boundary defect") {
    std::mt19937_64 rng(31);
    auto tr = random_smooth_trace(rng);
    IntegrateOptions ode = ode_tol(1e-10);
    auto defect = [&](double tol) {
        const double lambda = solve_nth(tr, 2, tol, ode);
        auto tape = u_solve(tr, lambda, 1.0, 0.5 * (tr.t_minus + tr.t_plus), u_substeps(tr, lambda));
        return std::fabs(tape.u_end) / std::max(std::fabs(tape.u_anchor), 1e-12);
    };
    REQUIRE(defect(1e-8) < defect(1e-3));
}
