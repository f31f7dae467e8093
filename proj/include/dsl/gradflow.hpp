#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dsl/errors.hpp"
#include "dsl/loss.hpp"
#include "dsl/model.hpp"

// Gradient assembly through the eigen-solve and the boundary-exit times.
//
// The converged quantities psi = (lambda_1..lambda_d, t_minus, t_plus)
// satisfy the residual map H(psi, theta) = 0 with
//     H_k     = u_k(t_plus)            (shooting residual, k = 1..d)
//     H_{d+1} = min_j gamma_j(t_minus)
//     H_{d+2} = max_j gamma_j(t_plus) - 1,
// so dL/dtheta = dL/dtheta|_psi - (dL/dpsi J_psi^-1) J_theta H. All partial
// derivatives are taken on the discretized computation: the recorded
// u-integration tape, the fixed knot grid, and the frozen min/max indices
// of the forward pass.

namespace dsl {

// Cotangents of one scalar u-integration output with respect to every input
// of the recorded tape.
struct UTapeGrads {
    double d_lambda = 0.0;
    double d_ell = 0.0;        // interval length t_plus - t_minus
    double d_xi_anchor = 0.0;  // relative anchor position (anchor - t_minus)/ell
    double d_v0 = 0.0;
    Vector d_invp, d_q, d_w;   // per-knot value cotangents
};

namespace detail {

struct StageCotangent {
    double xi;      // stage position (relative)
    double c_invp;  // cotangent on the interpolated coefficient values
    double c_q;
    double c_w;
};

// Adjoint of one RK4 step of the (u, pi) system. Returns the cotangents of
// the step inputs and the per-stage coefficient cotangents; `c_xi` and
// `c_h` receive the step-position and step-size parts.
inline void u_rk4_step_adjoint(const CoefficientTrace& tr, double lambda, double ell, double xi,
                               double h, double u, double pi, double& cu, double& cp,
                               double& c_xi, double& c_h, double& c_lambda, double& c_ell,
                               StageCotangent out[3]) {
    auto coeff = [&](double x, double& P, double& Q, double& W) {
        const auto w = tr.locate_rel(x);
        P = CoefficientTrace::interp(tr.invp_vals, w);
        Q = CoefficientTrace::interp(tr.q_vals, w);
        W = CoefficientTrace::interp(tr.w_vals, w);
    };
    double P1, Q1, W1, P2, Q2, W2, P3, Q3, W3;
    coeff(xi, P1, Q1, W1);
    coeff(xi + 0.5 * h, P2, Q2, W2);
    coeff(xi + h, P3, Q3, W3);
    const double A1 = ell * P1, B1 = ell * (Q1 - lambda * W1);
    const double A2 = ell * P2, B2 = ell * (Q2 - lambda * W2);
    const double A3 = ell * P3, B3 = ell * (Q3 - lambda * W3);

    // Recompute the stages.
    const double k1u = A1 * pi, k1p = B1 * u;
    const double t1u = pi + 0.5 * h * k1p, t1p = u + 0.5 * h * k1u;
    const double k2u = A2 * t1u, k2p = B2 * t1p;
    const double t2u = pi + 0.5 * h * k2p, t2p = u + 0.5 * h * k2u;
    const double k3u = A2 * t2u, k3p = B2 * t2p;
    const double t3u = pi + h * k3p, t3p = u + h * k3u;
    const double k4u = A3 * t3u, k4p = B3 * t3p;

    const double cu_out = cu, cp_out = cp;
    double ch = (cu_out * (k1u + 2.0 * k2u + 2.0 * k3u + k4u) +
                 cp_out * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)) / 6.0;

    double ck1u = cu_out * h / 6.0, ck2u = cu_out * h / 3.0, ck3u = cu_out * h / 3.0,
           ck4u = cu_out * h / 6.0;
    double ck1p = cp_out * h / 6.0, ck2p = cp_out * h / 3.0, ck3p = cp_out * h / 3.0,
           ck4p = cp_out * h / 6.0;

    double cA1 = 0, cA2 = 0, cA3 = 0, cB1 = 0, cB2 = 0, cB3 = 0;
    double cu_in = cu_out, cp_in = cp_out;

    cB3 += ck4p * t3p;
    double ct3p = ck4p * B3;
    cA3 += ck4u * t3u;
    double ct3u = ck4u * A3;

    cu_in += ct3p;
    double ck3u_acc = ct3p * h;
    ch += ct3p * k3u;
    cp_in += ct3u;
    double ck3p_acc = ct3u * h;
    ch += ct3u * k3p;
    ck3u += ck3u_acc;
    ck3p += ck3p_acc;

    cB2 += ck3p * t2p;
    double ct2p = ck3p * B2;
    cA2 += ck3u * t2u;
    double ct2u = ck3u * A2;

    cu_in += ct2p;
    ck2u += ct2p * 0.5 * h;
    ch += ct2p * 0.5 * k2u;
    cp_in += ct2u;
    ck2p += ct2u * 0.5 * h;
    ch += ct2u * 0.5 * k2p;

    cB2 += ck2p * t1p;
    double ct1p = ck2p * B2;
    cA2 += ck2u * t1u;
    double ct1u = ck2u * A2;

    cu_in += ct1p;
    ck1u += ct1p * 0.5 * h;
    ch += ct1p * 0.5 * k1u;
    cp_in += ct1u;
    ck1p += ct1u * 0.5 * h;
    ch += ct1u * 0.5 * k1p;

    cB1 += ck1p * u;
    cu_in += ck1p * B1;
    cA1 += ck1u * pi;
    cp_in += ck1u * A1;

    // A = ell * P, B = ell * (Q - lambda W).
    c_ell += cA1 * P1 + cB1 * (Q1 - lambda * W1) + cA2 * P2 + cB2 * (Q2 - lambda * W2) +
             cA3 * P3 + cB3 * (Q3 - lambda * W3);
    c_lambda += -ell * (cB1 * W1 + cB2 * W2 + cB3 * W3);

    out[0] = {xi, cA1 * ell, cB1 * ell, -cB1 * ell * lambda};
    out[1] = {xi + 0.5 * h, cA2 * ell, cB2 * ell, -cB2 * ell * lambda};
    out[2] = {xi + h, cA3 * ell, cB3 * ell, -cB3 * ell * lambda};

    cu = cu_in;
    cp = cp_in;
    c_xi = 0.0;  // filled by the caller from the stage cotangents
    c_h = ch;
}

// Distribute one stage's coefficient cotangents onto the knot arrays and
// return the stage-position cotangent through the interpolation slopes.
inline double distribute_stage(const CoefficientTrace& tr, const StageCotangent& sc,
                               UTapeGrads& g) {
    const auto w = tr.locate_rel(sc.xi);
    const double onemf = 1.0 - w.frac;
    g.d_invp[w.j] += sc.c_invp * onemf;
    g.d_invp[w.j + 1] += sc.c_invp * w.frac;
    g.d_q[w.j] += sc.c_q * onemf;
    g.d_q[w.j + 1] += sc.c_q * w.frac;
    g.d_w[w.j] += sc.c_w * onemf;
    g.d_w[w.j + 1] += sc.c_w * w.frac;
    const double kk = static_cast<double>(tr.intervals());
    return kk * (sc.c_invp * (tr.invp_vals[w.j + 1] - tr.invp_vals[w.j]) +
                 sc.c_q * (tr.q_vals[w.j + 1] - tr.q_vals[w.j]) +
                 sc.c_w * (tr.w_vals[w.j + 1] - tr.w_vals[w.j]));
}

// Reverse one recorded leg. Incoming (cu, cp) are the cotangents at the leg
// end; on return they hold the cotangents at the leg start. Contributions
// to d(xi_anchor) are chained through the leg's start position and step.
inline void reverse_leg(const CoefficientTrace& tr, const UTape& tape, const ULeg& leg,
                        bool is_leg_a, double& cu, double& cp, UTapeGrads& g) {
    double c_xistart = 0.0, c_h_leg = 0.0;
    StageCotangent stages[3];
    for (std::size_t i = leg.steps; i-- > 0;) {
        const double xi = leg.xi_start + leg.h * static_cast<double>(i);
        double c_xi_step = 0.0, c_h_step = 0.0;
        u_rk4_step_adjoint(tr, tape.lambda, tape.ell, xi, leg.h, leg.u[i], leg.pi[i], cu, cp,
                           c_xi_step, c_h_step, g.d_lambda, g.d_ell, stages);
        // Stage positions are xi + c_m h with c = {0, 1/2, 1}.
        const double cm[3] = {0.0, 0.5, 1.0};
        for (int m = 0; m < 3; ++m) {
            const double c_pos = distribute_stage(tr, stages[m], g);
            c_xi_step += c_pos;
            c_h_step += c_pos * cm[m];
        }
        // xi = xi_start + i h.
        c_xistart += c_xi_step;
        c_h_leg += c_h_step + c_xi_step * static_cast<double>(i);
    }
    const double n = static_cast<double>(leg.steps);
    if (is_leg_a) {
        // xi_start = 0, h = xi_anchor / n.
        g.d_xi_anchor += c_h_leg / n;
    } else {
        // xi_start = xi_anchor, h = (1 - xi_anchor) / n.
        g.d_xi_anchor += c_xistart - c_h_leg / n;
    }
}

}  // namespace detail

// Reverse-mode sweep through a recorded u-integration for the scalar output
// cot_anchor * u(anchor) + cot_end * u(t_plus).
inline UTapeGrads u_tape_reverse(const CoefficientTrace& tr, const UTape& tape, double cot_anchor,
                                 double cot_end) {
    UTapeGrads g;
    const std::size_t kn = tr.knot_count();
    g.d_invp.assign(kn, 0.0);
    g.d_q.assign(kn, 0.0);
    g.d_w.assign(kn, 0.0);

    double cu = cot_end, cp = 0.0;
    detail::reverse_leg(tr, tape, tape.leg_b, false, cu, cp, g);
    cu += cot_anchor;
    detail::reverse_leg(tr, tape, tape.leg_a, true, cu, cp, g);

    // Initial condition u = 0, pi = v0 / invp(knot 0).
    const double ip0 = tr.invp_vals.front();
    const double v0 = tape.leg_a.pi.front() * ip0;  // reconstruct the v0 actually used
    g.d_v0 = cp / ip0;
    g.d_invp.front() += -cp * v0 / (ip0 * ip0);
    return g;
}

// Directional derivatives of the coefficient networks along the field at
// every knot, used to move knot values when the exit times move.
struct KnotChains {
    std::vector<Vector> a_dir;  // a(z_j)
    Vector invp_dir;            // grad invp(z_j) . a(z_j)
    Vector q_dir;
    Vector w_dir;
    Vector v_dir;               // Jv(z_0) a(z_0), length d (empty if v constant)
};

inline KnotChains knot_chains(const DslModel& m, const CoefficientTrace& tr) {
    const std::size_t kn = tr.knot_count();
    KnotChains kc;
    kc.a_dir.resize(kn);
    kc.invp_dir.resize(kn);
    kc.q_dir.resize(kn);
    kc.w_dir.resize(kn);
    MlpWorkspace ws;
    for (std::size_t j = 0; j < kn; ++j) {
        mlp_forward(m.a_net, tr.knot_points[j], kc.a_dir[j], ws);
        kc.invp_dir[j] = mlp_jvp(m.invp_net, tr.knot_points[j], kc.a_dir[j]).second[0];
        kc.q_dir[j] = mlp_jvp(m.q_net, tr.knot_points[j], kc.a_dir[j]).second[0];
        kc.w_dir[j] = mlp_jvp(m.w_net, tr.knot_points[j], kc.a_dir[j]).second[0];
    }
    if (m.v_net) kc.v_dir = mlp_jvp(*m.v_net, tr.knot_points.front(), kc.a_dir.front()).second;
    return kc;
}

namespace detail {

// Total derivative of a tape output with respect to t_minus or t_plus:
// the direct (ell, xi_anchor) part plus knot values and v0 moving along the
// flow. `n` selects the v0 component when v is a network.
inline double chain_exit_time(const UTapeGrads& rev, const KnotChains& kc,
                              const CoefficientTrace& tr, double anchor, std::size_t n,
                              bool is_minus) {
    const double ell = tr.length();
    const double d_ell = is_minus ? -1.0 : 1.0;
    const double d_xi0 = is_minus ? (anchor - tr.t_plus) / (ell * ell)
                                  : -(anchor - tr.t_minus) / (ell * ell);
    double acc = rev.d_ell * d_ell + rev.d_xi_anchor * d_xi0;
    const std::size_t kn = tr.knot_count();
    const double kk = static_cast<double>(tr.intervals());
    for (std::size_t j = 0; j < kn; ++j) {
        const double frac = static_cast<double>(j) / kk;
        const double wj = is_minus ? 1.0 - frac : frac;
        if (wj == 0.0) continue;
        acc += wj * (rev.d_invp[j] * kc.invp_dir[j] + rev.d_q[j] * kc.q_dir[j] +
                     rev.d_w[j] * kc.w_dir[j]);
    }
    if (is_minus && !kc.v_dir.empty()) acc += rev.d_v0 * kc.v_dir[n];
    return acc;
}

// Adjoint of one RK4 step of dz/dt = a(z), accumulating a-network
// parameter gradients. `z` is the step start; `c` carries the incoming
// cotangent on the step end and returns the cotangent on z.
inline void z_step_adjoint(const MlpParams& a, const Vector& z, double h, Vector& c,
                           MlpGrad& ga, MlpWorkspace& ws) {
    const std::size_t n = z.size();
    Vector k1, k2, k3, s2(n), s3(n), s4(n);
    mlp_forward(a, z, k1, ws);
    for (std::size_t i = 0; i < n; ++i) s2[i] = z[i] + 0.5 * h * k1[i];
    mlp_forward(a, s2, k2, ws);
    for (std::size_t i = 0; i < n; ++i) s3[i] = z[i] + 0.5 * h * k2[i];
    mlp_forward(a, s3, k3, ws);
    for (std::size_t i = 0; i < n; ++i) s4[i] = z[i] + h * k3[i];

    Vector ck4(n), ck3(n), ck2(n), ck1(n), cz = c, ig;
    for (std::size_t i = 0; i < n; ++i) {
        ck1[i] = c[i] * h / 6.0;
        ck2[i] = c[i] * h / 3.0;
        ck3[i] = c[i] * h / 3.0;
        ck4[i] = c[i] * h / 6.0;
    }
    mlp_backprop_accum(a, s4, ck4, ga, ig, ws);
    for (std::size_t i = 0; i < n; ++i) {
        cz[i] += ig[i];
        ck3[i] += h * ig[i];
    }
    mlp_backprop_accum(a, s3, ck3, ga, ig, ws);
    for (std::size_t i = 0; i < n; ++i) {
        cz[i] += ig[i];
        ck2[i] += 0.5 * h * ig[i];
    }
    mlp_backprop_accum(a, s2, ck2, ga, ig, ws);
    for (std::size_t i = 0; i < n; ++i) {
        cz[i] += ig[i];
        ck1[i] += 0.5 * h * ig[i];
    }
    mlp_backprop_accum(a, z, ck1, ga, ig, ws);
    for (std::size_t i = 0; i < n; ++i) cz[i] += ig[i];
    c = std::move(cz);
}

// Reverse sweep over the knot path: inject the per-knot cotangents and
// chain them back to the a-network through fixed-grid RK4 steps anchored at
// the sample (discretize-then-differentiate on the knot grid).
inline void z_path_reverse(const DslModel& m, const ForwardCache& cache,
                           std::vector<Vector>& c_z, MlpGrad& ga) {
    const CoefficientTrace& tr = cache.trace;
    const std::size_t kn = tr.knot_count();
    const double dt = tr.knot_dt();
    MlpWorkspace ws;

    // Index of the knot interval containing the anchor.
    std::size_t j0 = tr.locate_rel((cache.anchor - tr.t_minus) / tr.length()).j;

    // Forward side: x -> z_{j0+1} -> ... -> z_K.
    {
        Vector c = c_z[kn - 1];
        for (std::size_t j = kn - 1; j > j0 + 1; --j) {
            z_step_adjoint(m.a_net, tr.knot_points[j - 1], dt, c, ga, ws);
            for (std::size_t i = 0; i < c.size(); ++i) c[i] += c_z[j - 1][i];
        }
        const double h0 = tr.knot_time(j0 + 1) - cache.anchor;
        z_step_adjoint(m.a_net, cache.x, h0, c, ga, ws);
        // remaining cotangent is d/dx of the objective; the sample is data
    }
    // Backward side: x -> z_{j0} -> ... -> z_0 (negative steps).
    {
        Vector c = c_z[0];
        for (std::size_t j = 1; j <= j0; ++j) {
            z_step_adjoint(m.a_net, tr.knot_points[j], -dt, c, ga, ws);
            for (std::size_t i = 0; i < c.size(); ++i) c[i] += c_z[j][i];
        }
        const double h0 = tr.knot_time(j0) - cache.anchor;
        z_step_adjoint(m.a_net, cache.x, h0, c, ga, ws);
    }
}

}  // namespace detail

struct ImplicitState {
    Vector psi;                 // (lambda_1..lambda_d, t_minus, t_plus)
    Vector H;
    Matrix J_psi;
    double condition_estimate = 0.0;
};

// Residual map at a supplied psi: gamma is evaluated from the cached dense
// trace at the supplied times, coefficients are re-sampled on the implied
// knot grid, and each u_k is integrated at the supplied lambda_k. Nothing
// is re-solved.
inline Vector mapping_residual(const DslModel& m, const ForwardCache& cache, const Vector& psi,
                               const SolverSettings& s) {
    const std::size_t d = m.d;
    if (psi.size() != d + 2) throw ShapeMismatch("mapping_residual: psi must have d+2 entries");
    const double t_minus = psi[d], t_plus = psi[d + 1];
    if (!(t_minus < cache.anchor && cache.anchor < t_plus))
        throw ShapeMismatch("mapping_residual: anchor must lie inside (t_minus, t_plus)");

    Vector H(d + 2, 0.0);
    if (m.ablation) throw ShapeMismatch("mapping_residual: undefined for the ablation model");

    FieldLine fl_shift = cache.fl;   // same dense trajectory, shifted exits
    fl_shift.t_minus = t_minus;
    fl_shift.t_plus = t_plus;
    CoefficientTrace tr = sample_coefficients(fl_shift, m.invp_net, m.q_net, m.w_net,
                                              m.v_net ? &*m.v_net : nullptr, d, s.knots);
    for (std::size_t n = 0; n < d; ++n)
        H[n] = u_solve(tr, psi[n], tr.v0[n], cache.anchor, cache.substeps).u_end;

    const Vector z_minus = cache.fl.eval(t_minus);
    const Vector z_plus = cache.fl.eval(t_plus);
    H[d] = *std::min_element(z_minus.begin(), z_minus.end());
    H[d + 1] = *std::max_element(z_plus.begin(), z_plus.end()) - 1.0;
    return H;
}

// cotangent^T J_psi^-1 via one linear solve with the transpose.
inline Vector solve_adjoint(const ImplicitState& st, const Vector& cotangent) {
    const std::size_t n = st.J_psi.rows;
    if (cotangent.size() != n) throw ShapeMismatch("solve_adjoint: cotangent length mismatch");
    Matrix jt(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) jt(i, j) = st.J_psi(j, i);
    LuFactors lu = LuFactors::factor(jt);
    return lu.solve(cotangent);
}

namespace detail {

struct ImplicitParts {
    std::vector<UTapeGrads> rev_end;     // seeded at u(t_plus), one per eigenfunction
    std::vector<UTapeGrads> rev_anchor;  // seeded at u(anchor)
    KnotChains chains;
    Matrix J;  // (d+2)x(d+2); d x d in ablation mode
};

inline ImplicitParts assemble_parts(const DslModel& m, const ForwardCache& cache) {
    ImplicitParts parts;
    const std::size_t d = m.d;
    parts.rev_end.reserve(d);
    parts.rev_anchor.reserve(d);
    for (std::size_t n = 0; n < d; ++n) {
        parts.rev_end.push_back(u_tape_reverse(cache.trace, cache.tapes[n], 0.0, 1.0));
        parts.rev_anchor.push_back(u_tape_reverse(cache.trace, cache.tapes[n], 1.0, 0.0));
    }

    if (m.ablation) {
        parts.J = Matrix(d, d, 0.0);
        for (std::size_t n = 0; n < d; ++n) parts.J(n, n) = parts.rev_end[n].d_lambda;
        return parts;
    }

    parts.chains = knot_chains(m, cache.trace);
    parts.J = Matrix(d + 2, d + 2, 0.0);
    for (std::size_t n = 0; n < d; ++n) {
        parts.J(n, n) = parts.rev_end[n].d_lambda;
        parts.J(n, d) = chain_exit_time(parts.rev_end[n], parts.chains, cache.trace, cache.anchor,
                                        n, /*is_minus=*/true);
        parts.J(n, d + 1) = chain_exit_time(parts.rev_end[n], parts.chains, cache.trace,
                                            cache.anchor, n, /*is_minus=*/false);
    }
    // Exit rows: the achieving coordinate is frozen at its forward-pass
    // index (subgradient choice at ties).
    parts.J(d, d) = parts.chains.a_dir.front()[cache.min_exit_index];
    parts.J(d + 1, d + 1) = parts.chains.a_dir.back()[cache.max_exit_index];
    return parts;
}

}  // namespace detail

inline ImplicitState implicit_state(const DslModel& m, const ForwardCache& cache,
                                    const SolverSettings& s) {
    auto parts = detail::assemble_parts(m, cache);
    ImplicitState st;
    const std::size_t d = m.d;
    st.psi.resize(d + 2);
    for (std::size_t n = 0; n < d; ++n) st.psi[n] = cache.spec.lambdas[n];
    st.psi[d] = cache.trace.t_minus;
    st.psi[d + 1] = cache.trace.t_plus;
    st.J_psi = parts.J;
    st.H = mapping_residual(m, cache, st.psi, s);
    LuFactors lu = LuFactors::factor(st.J_psi);
    st.condition_estimate = condition_estimate_inf(st.J_psi, lu);
    return st;
}

// Full parameter gradient of
//     loss = L(logits(x)) + (alpha / d) sum |lambda_i|
// given d(loss)/d(logits). Combines the direct path (holding psi fixed)
// with the implicit correction through J_psi.
inline DslGrad implicit_grad(const DslModel& m, const ForwardCache& cache, const Vector& d_logits,
                             double alpha, const SolverSettings& s) {
    const std::size_t d = m.d;
    if (d_logits.size() != m.num_classes) throw ShapeMismatch("implicit_grad: logit dim mismatch");
    DslGrad grad = DslGrad::zeros_like(m);

    // Head: logits = L u0 + b.
    for (std::size_t i = 0; i < m.num_classes; ++i) {
        for (std::size_t j = 0; j < d; ++j) grad.head(i, j) = d_logits[i] * cache.u0[j];
        if (m.has_bias()) grad.head_bias[i] = d_logits[i];
    }
    // Upstream on the basis values.
    Vector g(d, 0.0);
    matvec_transpose_add(m.head, d_logits, g);

    auto parts = detail::assemble_parts(m, cache);
    const CoefficientTrace& tr = cache.trace;
    const std::size_t kn = tr.knot_count();

    // dL/dpsi, then mu^T = dL/dpsi J^-1.
    const std::size_t psi_dim = m.ablation ? d : d + 2;
    Vector dldpsi(psi_dim, 0.0);
    for (std::size_t n = 0; n < d; ++n) {
        dldpsi[n] = g[n] * parts.rev_anchor[n].d_lambda +
                    (alpha / static_cast<double>(d)) * (cache.spec.lambdas[n] >= 0.0 ? 1.0 : -1.0);
    }
    if (!m.ablation) {
        for (std::size_t n = 0; n < d; ++n) {
            dldpsi[d] += g[n] * detail::chain_exit_time(parts.rev_anchor[n], parts.chains, tr,
                                                        cache.anchor, n, true);
            dldpsi[d + 1] += g[n] * detail::chain_exit_time(parts.rev_anchor[n], parts.chains, tr,
                                                            cache.anchor, n, false);
        }
    }

    Matrix jt(psi_dim, psi_dim);
    for (std::size_t i = 0; i < psi_dim; ++i)
        for (std::size_t j = 0; j < psi_dim; ++j) jt(i, j) = parts.J(j, i);
    Vector mu;
    try {
        LuFactors lu = LuFactors::factor(jt);
        mu = lu.solve(dldpsi);
    } catch (const SingularJacobian&) {
        throw SingularJacobian("implicit_grad: singular J_psi",
                               std::numeric_limits<double>::infinity());
    }

    // Combined knot-value cotangents: direct part minus the implicit
    // correction.
    Vector c_invp(kn, 0.0), c_q(kn, 0.0), c_w(kn, 0.0), c_v0(d, 0.0);
    for (std::size_t n = 0; n < d; ++n) {
        const double gd = g[n], mn = mu[n];
        for (std::size_t j = 0; j < kn; ++j) {
            c_invp[j] += gd * parts.rev_anchor[n].d_invp[j] - mn * parts.rev_end[n].d_invp[j];
            c_q[j] += gd * parts.rev_anchor[n].d_q[j] - mn * parts.rev_end[n].d_q[j];
            c_w[j] += gd * parts.rev_anchor[n].d_w[j] - mn * parts.rev_end[n].d_w[j];
        }
        c_v0[n] = gd * parts.rev_anchor[n].d_v0 - mn * parts.rev_end[n].d_v0;
    }

    // Per-knot backprops through the coefficient networks; input gradients
    // become cotangents on the knot positions.
    MlpWorkspace ws;
    std::vector<Vector> c_z;
    if (!m.ablation) c_z.assign(kn, Vector(m.input_dim, 0.0));
    Vector ig, cot(1);
    for (std::size_t j = 0; j < kn; ++j) {
        cot[0] = c_invp[j];
        mlp_backprop_accum(m.invp_net, tr.knot_points[j], cot, grad.invp, ig, ws);
        if (!m.ablation)
            for (std::size_t i = 0; i < m.input_dim; ++i) c_z[j][i] += ig[i];
        cot[0] = c_q[j];
        mlp_backprop_accum(m.q_net, tr.knot_points[j], cot, grad.q, ig, ws);
        if (!m.ablation)
            for (std::size_t i = 0; i < m.input_dim; ++i) c_z[j][i] += ig[i];
        cot[0] = c_w[j];
        mlp_backprop_accum(m.w_net, tr.knot_points[j], cot, grad.w, ig, ws);
        if (!m.ablation)
            for (std::size_t i = 0; i < m.input_dim; ++i) c_z[j][i] += ig[i];
    }
    if (m.v_net && !m.ablation) {
        mlp_backprop_accum(*m.v_net, tr.knot_points.front(), c_v0, *grad.v, ig, ws);
        for (std::size_t i = 0; i < m.input_dim; ++i) c_z[0][i] += ig[i];
    }

    if (!m.ablation) {
        if (s.freeze_knot_positions)
            for (auto& c : c_z) std::fill(c.begin(), c.end(), 0.0);
        // Exit-condition rows reach the a-network through the endpoints.
        c_z.front()[cache.min_exit_index] -= mu[d];
        c_z.back()[cache.max_exit_index] -= mu[d + 1];
        detail::z_path_reverse(m, cache, c_z, grad.a);
    }
    return grad;
}

inline DslGrad implicit_grad(const DslModel& m, const Vector& x, const Vector& d_logits,
                             double alpha, const SolverSettings& s) {
    ForwardCache cache = dsl_forward(m, x, s);
    return implicit_grad(m, cache, d_logits, alpha, s);
}

// ---------------------------------------------------------------------------
// Finite-difference verification.
// ---------------------------------------------------------------------------

struct FdCheckReport {
    double max_rel_error = 0.0;
    std::vector<std::pair<std::string, double>> per_network;  // (name, max rel error)
    Vector rel_errors;                // one per parameter, traversal order
    std::vector<std::string> names;   // matching network tag per parameter
};

// Central finite differences of the full per-sample loss over every
// parameter, compared against implicit_grad. Run it at tight solver
// tolerances; the bisection floors show up otherwise.
inline FdCheckReport fd_check(DslModel m, const Vector& x, std::size_t label, double step,
                              const SolverSettings& s, LossKind kind = LossKind::CrossEntropy,
                              double alpha = 1e-2) {
    auto loss_at = [&](DslModel& mm) {
        ForwardCache c = dsl_forward(mm, x, s);
        return loss_value(c.logits, label, kind) + spectral_penalty(c.spec.lambdas, alpha);
    };

    ForwardCache cache = dsl_forward(m, x, s);
    DslGrad grad = implicit_grad(m, cache, loss_grad(cache.logits, label, kind), alpha, s);
    Vector flat_grad = flatten_grad(m, grad);
    std::vector<ParamSegment> segments;
    Vector flat = flatten_params(m, &segments);

    FdCheckReport rep;
    rep.rel_errors.resize(flat.size());
    rep.names.resize(flat.size());
    double gscale = 0.0;
    for (double v : flat_grad) gscale = std::max(gscale, std::fabs(v));

    for (const auto& seg : segments) {
        double seg_worst = 0.0;
        for (std::size_t i = seg.begin; i < seg.end; ++i) {
            const double saved = flat[i];
            flat[i] = saved + step;
            unflatten_params(m, flat);
            const double up = loss_at(m);
            flat[i] = saved - step;
            unflatten_params(m, flat);
            const double down = loss_at(m);
            flat[i] = saved;
            const double fd = (up - down) / (2.0 * step);
            // Near-zero entries are held to an absolute standard: central
            // differences bottom out at the solver floors (event bisection,
            // eigenvalue refinement), which dominates |fd| once the true
            // gradient falls below ~1e-3 of the largest one.
            const double denom = std::max({std::fabs(fd), std::fabs(flat_grad[i]), 1e-3 * gscale, 1e-12});
            const double rel = std::fabs(fd - flat_grad[i]) / denom;
            rep.rel_errors[i] = rel;
            rep.names[i] = seg.name;
            seg_worst = std::max(seg_worst, rel);
        }
        rep.per_network.emplace_back(seg.name, seg_worst);
        rep.max_rel_error = std::max(rep.max_rel_error, seg_worst);
    }
    unflatten_params(m, flat);
    return rep;
}

}  // namespace dsl
