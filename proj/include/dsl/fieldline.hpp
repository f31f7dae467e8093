#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dsl/errors.hpp"
#include "dsl/mlp.hpp"
#include "dsl/odeint.hpp"

// Field-line tracing on the unit hypercube and coefficient sampling along
// the traced line. The domain is fixed to (0,1)^n: the backward exit is the
// first coordinate reaching 0, the forward exit the first reaching 1.

namespace dsl {

constexpr double kStartBoundaryTol = 1e-6;  // samples this close to the boundary are rejected

struct FieldLine {
    Vector x0;
    double t_minus = 0.0;
    double t_plus = 0.0;
    DenseSolution forward_sol;   // covers [0, t_plus] (and slightly beyond)
    DenseSolution backward_sol;  // covers [t_minus, 0] (and slightly beyond)
    Vector exit_minus;           // gamma(t_minus)
    Vector exit_plus;            // gamma(t_plus)

    std::size_t dim() const { return x0.size(); }

    void eval_into(double t, Vector& out) const {
        if (t >= 0.0)
            forward_sol.eval_into(t, out);
        else
            backward_sol.eval_into(t, out);
    }

    Vector eval(double t) const {
        Vector out;
        eval_into(t, out);
        return out;
    }
};

struct TraceOptions {
    double tol_t = 1e-4;
    double horizon = 0.0;  // 0 = derive from the a-range, else 1e3
    IntegrateOptions ode;
};

// Integrate dz/dt = a(z) from x in both directions until the trajectory
// leaves (0,1)^n, refining each exit time by bisection to tol_t.
inline FieldLine trace(const MlpParams& a_params, const Vector& x, const TraceOptions& opts = {}) {
    const std::size_t n = x.size();
    if (n != a_params.input_dim() || n != a_params.output_dim())
        throw ShapeMismatch("trace: a-network must map R^n -> R^n");
    for (double xi : x)
        if (xi < kStartBoundaryTol || xi > 1.0 - kStartBoundaryTol)
            throw StartOnBoundary("trace: sample within " + std::to_string(kStartBoundaryTol) +
                                  " of the boundary");

    double horizon = opts.horizon;
    if (horizon == 0.0) {
        // With a squashed to (lo, hi), no coordinate can take longer than
        // 1/lo to cross the unit cube.
        horizon = (a_params.squash != Squash::None && a_params.range_lo > 0.0)
                      ? 1.25 / a_params.range_lo
                      : 1e3;
    }

    MlpWorkspace ws;
    auto rhs = [&](double, const Vector& z, Vector& dz) { mlp_forward(a_params, z, dz, ws); };
    auto max_minus_one = [](const Vector& z) { return *std::max_element(z.begin(), z.end()) - 1.0; };
    auto min_coord = [](const Vector& z) { return *std::min_element(z.begin(), z.end()); };

    FieldLine fl;
    fl.x0 = x;

    auto fwd = locate_event_dense(rhs, x, 0.0, Direction::Forward, max_minus_one, opts.tol_t,
                                  horizon, opts.ode);
    fl.t_plus = fwd.t_event;
    fl.exit_plus = std::move(fwd.y_event);
    fl.forward_sol = std::move(fwd.dense);

    auto bwd = locate_event_dense(rhs, x, 0.0, Direction::Backward, min_coord, opts.tol_t,
                                  horizon, opts.ode);
    fl.t_minus = bwd.t_event;
    fl.exit_minus = std::move(bwd.y_event);
    fl.backward_sol = std::move(bwd.dense);
    return fl;
}

// Piecewise-linear coefficient samples along a field line. The knot grid is
// uniform on [t_minus, t_plus]; linear interpolation between knots defines
// 1/p, q and w everywhere on the line. The network for p predicts 1/p
// directly, so only multiplications by these samples appear downstream.
struct CoefficientTrace {
    double t_minus = 0.0;
    double t_plus = 0.0;
    Vector invp_vals;  // K+1 knots, all > 0
    Vector q_vals;
    Vector w_vals;     // all > 0
    Vector v0;         // initial slope per eigenfunction, length d
    std::vector<Vector> knot_points;  // gamma(tau_k); kept for gradient assembly

    std::size_t knot_count() const { return invp_vals.size(); }     // K+1
    std::size_t intervals() const { return invp_vals.size() - 1; }  // K
    double length() const { return t_plus - t_minus; }
    double knot_dt() const { return length() / static_cast<double>(intervals()); }
    double knot_time(std::size_t k) const {
        return t_minus + length() * static_cast<double>(k) / static_cast<double>(intervals());
    }

    // Interpolation in the relative coordinate xi = (t - t_minus)/length.
    struct Interp {
        std::size_t j;
        double frac;
    };
    Interp locate_rel(double xi) const {
        const double s = xi * static_cast<double>(intervals());
        double j = std::floor(s);
        j = std::clamp(j, 0.0, static_cast<double>(intervals() - 1));
        return {static_cast<std::size_t>(j), s - j};
    }
    static double interp(const Vector& vals, Interp w) {
        return (1.0 - w.frac) * vals[w.j] + w.frac * vals[w.j + 1];
    }
    double rel(double t) const { return (t - t_minus) / length(); }

    double invp_at(double t) const { return interp(invp_vals, locate_rel(rel(t))); }
    double q_at(double t) const { return interp(q_vals, locate_rel(rel(t))); }
    double w_at(double t) const { return interp(w_vals, locate_rel(rel(t))); }
};

// One network call per knot per coefficient; knot positions come from the
// dense interpolant of the trace.
inline CoefficientTrace sample_coefficients(const FieldLine& fl, const MlpParams& invp_net,
                                            const MlpParams& q_net, const MlpParams& w_net,
                                            const MlpParams* v_net, std::size_t d, std::size_t knots) {
    if (knots < 2) throw ShapeMismatch("sample_coefficients: need at least 2 intervals");
    CoefficientTrace tr;
    tr.t_minus = fl.t_minus;
    tr.t_plus = fl.t_plus;
    const std::size_t kn = knots + 1;
    tr.invp_vals.resize(kn);
    tr.q_vals.resize(kn);
    tr.w_vals.resize(kn);
    tr.knot_points.resize(kn);

    MlpWorkspace ws;
    Vector out;
    const double len = fl.t_plus - fl.t_minus;
    for (std::size_t k = 0; k < kn; ++k) {
        const double t = fl.t_minus + len * static_cast<double>(k) / static_cast<double>(knots);
        fl.eval_into(t, tr.knot_points[k]);
        mlp_forward(invp_net, tr.knot_points[k], out, ws);
        tr.invp_vals[k] = out[0];
        mlp_forward(q_net, tr.knot_points[k], out, ws);
        tr.q_vals[k] = out[0];
        mlp_forward(w_net, tr.knot_points[k], out, ws);
        tr.w_vals[k] = out[0];
    }
    if (v_net) {
        mlp_forward(*v_net, tr.knot_points.front(), tr.v0, ws);
        if (tr.v0.size() != d) throw ShapeMismatch("sample_coefficients: v-network output dim != d");
    } else {
        tr.v0.assign(d, 1.0);
    }
    return tr;
}

}  // namespace dsl
