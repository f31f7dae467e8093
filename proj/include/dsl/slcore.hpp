#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "dsl/errors.hpp"
#include "dsl/fieldline.hpp"
#include "dsl/linalg.hpp"
#include "dsl/odeint.hpp"

// Sturm-Liouville eigensolver along a coefficient trace.
//
// Sign convention used throughout:   -(p u')' + q u = lambda w u
// with Dirichlet ends and the slope condition u'(t_minus) = v0. The Pruefer
// substitution u = r sin(theta), p u' = r cos(theta) yields
//     theta' = cos^2(theta)/p + (lambda w - q) sin^2(theta),
// theta(t_minus) = 0, and the n-th eigenvalue is the unique root of
// g(lambda) = theta(t_plus) - n pi, which is strictly increasing in lambda.

namespace dsl {

struct SolveOptions {
    double tol_lambda = 1e-4;  // relative bracket-width tolerance
    IntegrateOptions ode;      // used by the shooting integration
};

struct Spectrum {
    std::size_t d = 0;
    Vector lambdas;
    Vector bound_lo;   // search bracket actually used, contains lambda_n
    Vector bound_hi;
    Vector residuals;  // |theta(t_plus) - n pi| at the returned lambda
    double tol_lambda = 0.0;
};

// Analytic bracket for the n-th eigenvalue. Extrema of w*p and q/w are
// taken over knots, which is exact for the piecewise-linear coefficient
// model (both are segment-wise monotone ratios of linear functions);
// the integral of 1/p uses the trapezoid rule, exact as well.
inline std::pair<double, double> eigen_bounds(const CoefficientTrace& tr, std::size_t n) {
    if (n < 1) throw ShapeMismatch("eigen_bounds: n must be >= 1");
    const std::size_t kn = tr.knot_count();
    double wp_min = tr.w_vals[0] / tr.invp_vals[0];
    double wp_max = wp_min;
    double qw_min = tr.q_vals[0] / tr.w_vals[0];
    double qw_max = qw_min;
    double integral_invp = 0.0;
    for (std::size_t k = 0; k < kn; ++k) {
        const double wp = tr.w_vals[k] / tr.invp_vals[k];
        wp_min = std::min(wp_min, wp);
        wp_max = std::max(wp_max, wp);
        const double qw = tr.q_vals[k] / tr.w_vals[k];
        qw_min = std::min(qw_min, qw);
        qw_max = std::max(qw_max, qw);
        const bool endpoint = (k == 0 || k + 1 == kn);
        integral_invp += (endpoint ? 0.5 : 1.0) * tr.invp_vals[k];
    }
    integral_invp *= tr.knot_dt();

    const double npi2 = static_cast<double>(n * n) * std::numbers::pi * std::numbers::pi;
    const double ii = integral_invp * integral_invp;
    return {npi2 / (wp_max * ii) + qw_min, npi2 / (wp_min * ii) + qw_max};
}

// g(lambda) = theta(t_plus) - n pi from the Pruefer phase equation.
inline double pruefer_residual(const CoefficientTrace& tr, double lambda, std::size_t n,
                               const IntegrateOptions& ode = {}) {
    const double len = tr.length();
    auto rhs = [&](double t, const Vector& y, Vector& dy) {
        const auto w = tr.locate_rel((t - tr.t_minus) / len);
        const double invp = CoefficientTrace::interp(tr.invp_vals, w);
        const double q = CoefficientTrace::interp(tr.q_vals, w);
        const double ww = CoefficientTrace::interp(tr.w_vals, w);
        const double s = std::sin(y[0]);
        const double c = std::cos(y[0]);
        dy[0] = c * c * invp + (lambda * ww - q) * s * s;
    };
    Vector theta0{0.0};
    const Vector theta_end = integrate_endpoint(rhs, theta0, tr.t_minus, tr.t_plus, ode);
    return theta_end[0] - static_cast<double>(n) * std::numbers::pi;
}

struct EigenSolveResult {
    double lambda = 0.0;
    double residual = 0.0;
    double bracket_lo = 0.0;
    double bracket_hi = 0.0;
};

// Bisection for g(lambda) = 0 inside the analytic bounds, expanding the
// bracket geometrically (factor 2, at most 8 times per side) when the
// knot-sampled bounds miss the sign change.
inline EigenSolveResult solve_nth_detail(const CoefficientTrace& tr, std::size_t n,
                                         const SolveOptions& opts = {}) {
    auto [lo, hi] = eigen_bounds(tr, n);
    const double width_tol = opts.tol_lambda * std::max(1.0, std::fabs(hi));
    double g_lo = pruefer_residual(tr, lo, n, opts.ode);
    double g_hi = pruefer_residual(tr, hi, n, opts.ode);

    double step = std::max(hi - lo, std::max(1.0, std::fabs(hi)) * std::max(opts.tol_lambda, 1e-9));
    for (int e = 0; g_lo > 0.0 && e < 8; ++e) {
        lo -= step;
        step *= 2.0;
        g_lo = pruefer_residual(tr, lo, n, opts.ode);
    }
    step = std::max(hi - lo, std::max(1.0, std::fabs(hi)) * std::max(opts.tol_lambda, 1e-9));
    for (int e = 0; g_hi < 0.0 && e < 8; ++e) {
        hi += step;
        step *= 2.0;
        g_hi = pruefer_residual(tr, hi, n, opts.ode);
    }
    if (g_lo > 0.0 || g_hi < 0.0)
        throw BracketFailure("solve_nth: no sign change for n = " + std::to_string(n) +
                             " in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");

    EigenSolveResult res;
    res.bracket_lo = lo;
    res.bracket_hi = hi;
    for (int iter = 0; iter < 200 && hi - lo > width_tol; ++iter) {
        const double mid = 0.5 * (lo + hi);
        if (pruefer_residual(tr, mid, n, opts.ode) <= 0.0)
            lo = mid;
        else
            hi = mid;
    }
    res.lambda = 0.5 * (lo + hi);
    res.residual = std::fabs(pruefer_residual(tr, res.lambda, n, opts.ode));
    return res;
}

inline double solve_nth(const CoefficientTrace& tr, std::size_t n, double tol_lambda,
                        const IntegrateOptions& ode = {}) {
    SolveOptions opts;
    opts.tol_lambda = tol_lambda;
    opts.ode = ode;
    return solve_nth_detail(tr, n, opts).lambda;
}

inline Spectrum spectrum(const CoefficientTrace& tr, std::size_t d, const SolveOptions& opts = {}) {
    if (d < 1) throw ShapeMismatch("spectrum: d must be >= 1");
    Spectrum sp;
    sp.d = d;
    sp.tol_lambda = opts.tol_lambda;
    sp.lambdas.resize(d);
    sp.bound_lo.resize(d);
    sp.bound_hi.resize(d);
    sp.residuals.resize(d);
    for (std::size_t n = 1; n <= d; ++n) {
        const auto r = solve_nth_detail(tr, n, opts);
        sp.lambdas[n - 1] = r.lambda;
        sp.bound_lo[n - 1] = r.bracket_lo;
        sp.bound_hi[n - 1] = r.bracket_hi;
        sp.residuals[n - 1] = r.residual;
        if (n > 1 && sp.lambdas[n - 1] <= sp.lambdas[n - 2])
            throw BracketFailure("spectrum: eigenvalues out of order at n = " + std::to_string(n));
    }
    return sp;
}

// ---------------------------------------------------------------------------
// Eigenfunction integration.
//
// First-order system in the physical momentum pi = p u':
//     u' = (1/p) pi,     pi' = (q - lambda w) u.
// Integrated with fixed-step RK4 in the relative coordinate
// xi = (t - t_minus) / ell, split into two legs at an anchor (the prediction
// time). The recorded tape is what the implicit-gradient assembly
// differentiates: the same steps, the same interpolation weights.
// ---------------------------------------------------------------------------

// Substep count resolving the fastest local oscillation, so that
// h * k stays near 0.1 (k = local wavenumber) regardless of knot count.
inline std::size_t u_substeps(const CoefficientTrace& tr, double lambda_max) {
    double k2max = 0.0;
    for (std::size_t k = 0; k < tr.knot_count(); ++k) {
        const double k2 = std::fabs(lambda_max * tr.w_vals[k] - tr.q_vals[k]) * tr.invp_vals[k];
        k2max = std::max(k2max, k2);
    }
    const double h_knot = tr.knot_dt();
    const double per_knot = h_knot * std::sqrt(k2max) / 0.1;
    return static_cast<std::size_t>(std::clamp(std::ceil(per_knot), 1.0, 64.0));
}

struct ULeg {
    double xi_start = 0.0;
    double h = 0.0;          // xi step
    std::size_t steps = 0;
    Vector u;                // states at step boundaries, size steps+1
    Vector pi;
};

struct UTape {
    double lambda = 0.0;
    double ell = 0.0;
    double xi_anchor = 0.0;
    ULeg leg_a;              // [0, xi_anchor]
    ULeg leg_b;              // [xi_anchor, 1]
    double u_anchor = 0.0;   // u at the anchor time
    double du_anchor = 0.0;  // du/dt at the anchor
    double u_end = 0.0;      // u at t_plus (the shooting residual H_k)
};

namespace detail {

inline void u_rk4_step(const CoefficientTrace& tr, double lambda, double ell, double xi, double h,
                       double& u, double& pi) {
    auto coeffs = [&](double x, double& A, double& B) {
        const auto w = tr.locate_rel(x);
        A = ell * CoefficientTrace::interp(tr.invp_vals, w);
        B = ell * (CoefficientTrace::interp(tr.q_vals, w) -
                   lambda * CoefficientTrace::interp(tr.w_vals, w));
    };
    double A1, B1, A2, B2, A3, B3;
    coeffs(xi, A1, B1);
    coeffs(xi + 0.5 * h, A2, B2);
    coeffs(xi + h, A3, B3);

    const double k1u = A1 * pi, k1p = B1 * u;
    const double t1u = pi + 0.5 * h * k1p, t1p = u + 0.5 * h * k1u;
    const double k2u = A2 * t1u, k2p = B2 * t1p;
    const double t2u = pi + 0.5 * h * k2p, t2p = u + 0.5 * h * k2u;
    const double k3u = A2 * t2u, k3p = B2 * t2p;
    const double t3u = pi + h * k3p, t3p = u + h * k3u;
    const double k4u = A3 * t3u, k4p = B3 * t3p;

    u += h / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u);
    pi += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
}

inline void u_run_leg(const CoefficientTrace& tr, double lambda, double ell, ULeg& leg,
                      double& u, double& pi, bool record) {
    if (record) {
        leg.u.resize(leg.steps + 1);
        leg.pi.resize(leg.steps + 1);
        leg.u[0] = u;
        leg.pi[0] = pi;
    }
    for (std::size_t i = 0; i < leg.steps; ++i) {
        const double xi = leg.xi_start + leg.h * static_cast<double>(i);
        u_rk4_step(tr, lambda, ell, xi, leg.h, u, pi);
        if (record) {
            leg.u[i + 1] = u;
            leg.pi[i + 1] = pi;
        }
    }
}

}  // namespace detail

// Integrate one eigenfunction from (u, u') = (0, v0_n) at t_minus through
// the anchor to t_plus. `anchor_t` is an absolute time strictly inside
// (t_minus, t_plus); predictions use anchor 0.
inline UTape u_solve(const CoefficientTrace& tr, double lambda, double v0_n, double anchor_t,
                     std::size_t substeps, bool record = false) {
    UTape tape;
    tape.lambda = lambda;
    tape.ell = tr.length();
    tape.xi_anchor = (anchor_t - tr.t_minus) / tape.ell;
    if (!(tape.xi_anchor > 0.0 && tape.xi_anchor < 1.0))
        throw ShapeMismatch("u_solve: anchor outside the open interval");

    const double steps_per_xi = static_cast<double>(tr.intervals() * substeps);
    tape.leg_a.xi_start = 0.0;
    tape.leg_a.steps = std::max<std::size_t>(1, static_cast<std::size_t>(
                           std::ceil(tape.xi_anchor * steps_per_xi)));
    tape.leg_a.h = tape.xi_anchor / static_cast<double>(tape.leg_a.steps);
    tape.leg_b.xi_start = tape.xi_anchor;
    tape.leg_b.steps = std::max<std::size_t>(1, static_cast<std::size_t>(
                           std::ceil((1.0 - tape.xi_anchor) * steps_per_xi)));
    tape.leg_b.h = (1.0 - tape.xi_anchor) / static_cast<double>(tape.leg_b.steps);

    double u = 0.0;
    double pi = v0_n / tr.invp_vals.front();  // pi = p(t_minus) * u'(t_minus)
    detail::u_run_leg(tr, lambda, tape.ell, tape.leg_a, u, pi, record);
    tape.u_anchor = u;
    tape.du_anchor = pi * CoefficientTrace::interp(tr.invp_vals, tr.locate_rel(tape.xi_anchor));
    detail::u_run_leg(tr, lambda, tape.ell, tape.leg_b, u, pi, record);
    tape.u_end = u;
    return tape;
}

namespace detail {

// One RK4 step of the (u, pi) system augmented with the lambda-sensitivity
// pair (su, spi). The (u, pi) arithmetic is identical to u_rk4_step, so the
// augmented run reproduces the plain integration bit for bit.
inline void u_rk4_step_sens(const CoefficientTrace& tr, double lambda, double ell, double xi,
                            double h, double& u, double& pi, double& su, double& spi) {
    auto coeffs = [&](double x, double& A, double& B, double& Bl) {
        const auto w = tr.locate_rel(x);
        A = ell * CoefficientTrace::interp(tr.invp_vals, w);
        const double ww = CoefficientTrace::interp(tr.w_vals, w);
        B = ell * (CoefficientTrace::interp(tr.q_vals, w) - lambda * ww);
        Bl = -ell * ww;  // dB/dlambda
    };
    double A1, B1, L1, A2, B2, L2, A3, B3, L3;
    coeffs(xi, A1, B1, L1);
    coeffs(xi + 0.5 * h, A2, B2, L2);
    coeffs(xi + h, A3, B3, L3);

    const double k1u = A1 * pi, k1p = B1 * u;
    const double s1u = A1 * spi, s1p = B1 * su + L1 * u;
    const double t1u = pi + 0.5 * h * k1p, t1p = u + 0.5 * h * k1u;
    const double r1u = spi + 0.5 * h * s1p, r1p = su + 0.5 * h * s1u;
    const double k2u = A2 * t1u, k2p = B2 * t1p;
    const double s2u = A2 * r1u, s2p = B2 * r1p + L2 * t1p;
    const double t2u = pi + 0.5 * h * k2p, t2p = u + 0.5 * h * k2u;
    const double r2u = spi + 0.5 * h * s2p, r2p = su + 0.5 * h * s2u;
    const double k3u = A2 * t2u, k3p = B2 * t2p;
    const double s3u = A2 * r2u, s3p = B2 * r2p + L2 * t2p;
    const double t3u = pi + h * k3p, t3p = u + h * k3u;
    const double r3u = spi + h * s3p, r3p = su + h * s3u;
    const double k4u = A3 * t3u, k4p = B3 * t3p;
    const double s4u = A3 * r3u, s4p = B3 * r3p + L3 * t3p;

    u += h / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u);
    pi += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
    su += h / 6.0 * (s1u + 2.0 * s2u + 2.0 * s3u + s4u);
    spi += h / 6.0 * (s1p + 2.0 * s2p + 2.0 * s3p + s4p);
}

}  // namespace detail

// u(t_plus) and its lambda-derivative for the same two-leg discretization
// as u_solve (same anchor split, same steps).
inline std::pair<double, double> u_end_lambda_sensitivity(const CoefficientTrace& tr, double lambda,
                                                          double v0_n, double anchor_t,
                                                          std::size_t substeps) {
    const double ell = tr.length();
    const double xi_anchor = (anchor_t - tr.t_minus) / ell;
    const double steps_per_xi = static_cast<double>(tr.intervals() * substeps);
    const std::size_t na =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(xi_anchor * steps_per_xi)));
    const std::size_t nb = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil((1.0 - xi_anchor) * steps_per_xi)));
    const double ha = xi_anchor / static_cast<double>(na);
    const double hb = (1.0 - xi_anchor) / static_cast<double>(nb);

    double u = 0.0, pi = v0_n / tr.invp_vals.front(), su = 0.0, spi = 0.0;
    for (std::size_t i = 0; i < na; ++i)
        detail::u_rk4_step_sens(tr, lambda, ell, ha * static_cast<double>(i), ha, u, pi, su, spi);
    for (std::size_t i = 0; i < nb; ++i)
        detail::u_rk4_step_sens(tr, lambda, ell, xi_anchor + hb * static_cast<double>(i), hb, u, pi,
                                su, spi);
    return {u, su};
}

// Newton refinement of a shooting eigenvalue onto the root of the
// fixed-step residual u(t_plus; lambda) = 0. The bisected value solves the
// adaptive Pruefer condition; predictions and implicit gradients use the
// fixed-step integration, so the eigenvalue they treat as implicit must
// solve that discretization's own residual.
inline double refine_lambda_discrete(const CoefficientTrace& tr, double lambda, double v0_n,
                                     double anchor_t, std::size_t substeps, int max_iters = 8) {
    for (int it = 0; it < max_iters; ++it) {
        const auto [h, dh] = u_end_lambda_sensitivity(tr, lambda, v0_n, anchor_t, substeps);
        if (std::fabs(dh) < 1e-300) break;
        const double delta = h / dh;
        lambda -= delta;
        if (std::fabs(delta) <= 1e-13 * std::max(1.0, std::fabs(lambda))) break;
    }
    return lambda;
}

struct BasisEval {
    Vector times;      // uniform grid on [t_minus, t_plus]
    Matrix u;          // d x grid
    Matrix du;         // d x grid, du/dt
    Vector u_at_zero;  // value at the anchor time (the prediction features)
};

// Dense evaluation of all d eigenfunctions on a uniform grid, plus the
// anchored values used for prediction.
inline BasisEval eval_basis(const CoefficientTrace& tr, const Spectrum& sp, std::size_t grid_size,
                            double anchor_t = 0.0) {
    if (grid_size < 2) throw ShapeMismatch("eval_basis: grid too small");
    BasisEval be;
    be.times.resize(grid_size);
    be.u = Matrix(sp.d, grid_size);
    be.du = Matrix(sp.d, grid_size);
    be.u_at_zero.resize(sp.d);

    const double len = tr.length();
    for (std::size_t g = 0; g < grid_size; ++g)
        be.times[g] = tr.t_minus + len * static_cast<double>(g) / static_cast<double>(grid_size - 1);

    const double lam_max = *std::max_element(sp.lambdas.begin(), sp.lambdas.end());
    const std::size_t sub = u_substeps(tr, lam_max);

    const double h_grid = 1.0 / static_cast<double>(grid_size - 1);
    const std::size_t per_cell = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::ceil(static_cast<double>(tr.intervals() * sub) * h_grid)));

    for (std::size_t n = 0; n < sp.d; ++n) {
        const double lambda = sp.lambdas[n];
        double u = 0.0;
        double pi = tr.v0[n] / tr.invp_vals.front();
        be.u(n, 0) = 0.0;
        be.du(n, 0) = pi * tr.invp_vals.front();
        for (std::size_t g = 0; g + 1 < grid_size; ++g) {
            const double xi0 = h_grid * static_cast<double>(g);
            const double h = h_grid / static_cast<double>(per_cell);
            for (std::size_t s = 0; s < per_cell; ++s)
                detail::u_rk4_step(tr, lambda, len, xi0 + h * static_cast<double>(s), h, u, pi);
            be.u(n, g + 1) = u;
            be.du(n, g + 1) = pi * CoefficientTrace::interp(
                                       tr.invp_vals, tr.locate_rel(h_grid * static_cast<double>(g + 1)));
        }
        be.u_at_zero[n] = u_solve(tr, lambda, tr.v0[n], anchor_t, sub).u_anchor;
    }
    return be;
}

// Strict sign alternations, ignoring samples inside a relative dead band.
inline std::size_t count_sign_changes(const Vector& values, double dead_band_rel = 1e-8) {
    double scale = 0.0;
    for (double v : values) scale = std::max(scale, std::fabs(v));
    const double band = dead_band_rel * scale;
    int last = 0;
    std::size_t changes = 0;
    for (double v : values) {
        if (std::fabs(v) <= band) continue;
        const int s = v > 0.0 ? 1 : -1;
        if (last != 0 && s != last) ++changes;
        last = s;
    }
    return changes;
}

// Gram matrix G_ij = integral of w u_i u_j dt over the basis grid
// (trapezoid rule). With the slope-normalized convention of the shooting
// solve the diagonal is not 1; orthogonality shows in the off-diagonals.
inline Matrix orthogonality_gram(const CoefficientTrace& tr, const BasisEval& be) {
    const std::size_t d = be.u.rows;
    const std::size_t g = be.u.cols;
    Matrix gram(d, d, 0.0);
    const double dt = (be.times.back() - be.times.front()) / static_cast<double>(g - 1);
    Vector wg(g);
    for (std::size_t k = 0; k < g; ++k)
        wg[k] = tr.w_at(be.times[k]) * ((k == 0 || k + 1 == g) ? 0.5 : 1.0) * dt;
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < g; ++k) acc += wg[k] * be.u(i, k) * be.u(j, k);
            gram(i, j) = acc;
            gram(j, i) = acc;
        }
    return gram;
}

// Independent verification oracle: central-difference discretization of
// -(p u')' + q u = lambda w u with Dirichlet ends, reduced to a symmetric
// tridiagonal problem and solved by Sturm bisection. Shares nothing with
// the shooting path.
inline Vector fd_oracle(const CoefficientTrace& tr, std::size_t d, std::size_t mesh_size) {
    if (mesh_size < 200) throw ShapeMismatch("fd_oracle: mesh too coarse");
    const std::size_t m = mesh_size;           // intervals
    const double h = tr.length() / static_cast<double>(m);
    const std::size_t nu = m - 1;              // interior unknowns
    if (d >= nu) throw ShapeMismatch("fd_oracle: d too large for mesh");

    auto p_at_rel = [&](double xi) { return 1.0 / CoefficientTrace::interp(tr.invp_vals, tr.locate_rel(xi)); };

    Vector diag(nu), off(nu - 1), wvals(nu);
    for (std::size_t i = 1; i <= nu; ++i) {
        const double xi = static_cast<double>(i) / static_cast<double>(m);
        const double xi_l = (static_cast<double>(i) - 0.5) / static_cast<double>(m);
        const double xi_r = (static_cast<double>(i) + 0.5) / static_cast<double>(m);
        const double p_l = p_at_rel(xi_l);
        const double p_r = p_at_rel(xi_r);
        const auto w = tr.locate_rel(xi);
        diag[i - 1] = (p_l + p_r) / (h * h) + CoefficientTrace::interp(tr.q_vals, w);
        wvals[i - 1] = CoefficientTrace::interp(tr.w_vals, w);
        if (i < nu) off[i - 1] = -p_r / (h * h);
    }
    // Symmetrize the generalized problem A u = lambda W u via W^-1/2.
    for (std::size_t i = 0; i < nu; ++i) diag[i] /= wvals[i];
    for (std::size_t i = 0; i + 1 < nu; ++i) off[i] /= std::sqrt(wvals[i] * wvals[i + 1]);
    return tridiagonal_smallest_eigenvalues(diag, off, d);
}

}  // namespace dsl
