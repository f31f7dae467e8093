#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dsl/errors.hpp"
#include "dsl/fieldline.hpp"
#include "dsl/linalg.hpp"
#include "dsl/mlp.hpp"
#include "dsl/slcore.hpp"

// The predictor: parameter networks theta = (a, 1/p, q, w, v) plus the
// linear head L. The forward pass assembles everything the gradient
// assembly needs and is shared by training, evaluation and the CLI.

namespace dsl {

struct DslModel {
    std::size_t input_dim = 0;   // n
    std::size_t num_classes = 0; // k
    std::size_t d = 0;           // eigenfunction count
    MlpParams a_net;
    MlpParams invp_net;          // predicts 1/p directly
    MlpParams q_net;
    MlpParams w_net;
    std::optional<MlpParams> v_net;  // absent = constant v(x) = 1
    Matrix head;                 // k x d
    Vector head_bias;            // length k, empty when the bias is disabled
    bool ablation = false;       // fixed interval [0,1], no vector field

    bool has_bias() const { return !head_bias.empty(); }
};

struct SolverSettings {
    double rtol = 1e-6;
    double atol = 1e-6;
    double tol_t = 1e-4;
    double tol_lambda = 1e-4;
    std::size_t knots = 2000;
    std::size_t max_steps = 100000;
    bool freeze_knot_positions = false;

    IntegrateOptions ode() const {
        IntegrateOptions o;
        o.rtol = rtol;
        o.atol = atol;
        o.max_steps = max_steps;
        return o;
    }
    SolveOptions solve() const {
        SolveOptions s;
        s.tol_lambda = tol_lambda;
        s.ode = ode();
        return s;
    }
};

// Everything computed by one prediction, kept for the gradient assembly.
struct ForwardCache {
    Vector x;
    FieldLine fl;             // unused in ablation mode
    CoefficientTrace trace;
    Spectrum spec;
    std::size_t substeps = 1;
    std::vector<UTape> tapes; // one recorded u-integration per eigenfunction
    Vector u0;                // u_n at the anchor = the prediction features
    Vector logits;
    double anchor = 0.0;      // prediction time on the line (0.5 in ablation mode)
    std::size_t min_exit_index = 0;  // coordinate achieving min_j gamma_j(t_minus)
    std::size_t max_exit_index = 0;  // coordinate achieving max_j gamma_j(t_plus)
};

namespace detail {

inline CoefficientTrace ablation_trace(const DslModel& m, const Vector& x, std::size_t knots) {
    CoefficientTrace tr;
    tr.t_minus = 0.0;
    tr.t_plus = 1.0;
    const std::size_t kn = knots + 1;
    tr.invp_vals.resize(kn);
    tr.q_vals.resize(kn);
    tr.w_vals.resize(kn);
    tr.knot_points.resize(kn);
    MlpWorkspace ws;
    Vector out;
    for (std::size_t k = 0; k < kn; ++k) {
        Vector& xt = tr.knot_points[k];
        xt = x;
        xt.push_back(static_cast<double>(k) / static_cast<double>(knots));
        mlp_forward(m.invp_net, xt, out, ws);
        tr.invp_vals[k] = out[0];
        mlp_forward(m.q_net, xt, out, ws);
        tr.q_vals[k] = out[0];
        mlp_forward(m.w_net, xt, out, ws);
        tr.w_vals[k] = out[0];
    }
    tr.v0.assign(m.d, 1.0);  // the ablation fixes du/dt = 1 at t = 0
    return tr;
}

}  // namespace detail

// Full forward pass: trace, coefficient sampling, shooting, anchored
// eigenfunction integration, linear head.
inline ForwardCache dsl_forward(const DslModel& m, const Vector& x, const SolverSettings& s) {
    if (x.size() != m.input_dim) throw ShapeMismatch("dsl_forward: input dim mismatch");
    ForwardCache c;
    c.x = x;
    if (m.ablation) {
        c.anchor = 0.5;
        c.trace = detail::ablation_trace(m, x, s.knots);
    } else {
        c.anchor = 0.0;
        TraceOptions topts;
        topts.tol_t = s.tol_t;
        topts.ode = s.ode();
        c.fl = trace(m.a_net, x, topts);
        c.trace = sample_coefficients(c.fl, m.invp_net, m.q_net, m.w_net,
                                      m.v_net ? &*m.v_net : nullptr, m.d, s.knots);
        c.min_exit_index = static_cast<std::size_t>(
            std::min_element(c.fl.exit_minus.begin(), c.fl.exit_minus.end()) -
            c.fl.exit_minus.begin());
        c.max_exit_index = static_cast<std::size_t>(
            std::max_element(c.fl.exit_plus.begin(), c.fl.exit_plus.end()) -
            c.fl.exit_plus.begin());
    }

    c.spec = spectrum(c.trace, m.d, s.solve());
    c.substeps = u_substeps(c.trace, c.spec.lambdas.back());
    c.tapes.reserve(m.d);
    c.u0.resize(m.d);
    for (std::size_t n = 0; n < m.d; ++n) {
        // Polish the bisected eigenvalue onto the root of the fixed-step
        // residual, so the recorded tape sits exactly on H_n = 0 of the
        // discretization the gradient assembly differentiates.
        c.spec.lambdas[n] = refine_lambda_discrete(c.trace, c.spec.lambdas[n], c.trace.v0[n],
                                                   c.anchor, c.substeps);
        c.tapes.push_back(
            u_solve(c.trace, c.spec.lambdas[n], c.trace.v0[n], c.anchor, c.substeps, true));
        c.u0[n] = c.tapes.back().u_anchor;
    }

    matvec(m.head, c.u0, c.logits);
    if (m.has_bias())
        for (std::size_t i = 0; i < c.logits.size(); ++i) c.logits[i] += m.head_bias[i];
    return c;
}

inline Vector predict(const DslModel& m, const Vector& x, const SolverSettings& s) {
    return dsl_forward(m, x, s).logits;
}

// ---------------------------------------------------------------------------
// Parameter enumeration: a fixed traversal order shared by the optimizer,
// serialization and the finite-difference checks.
// ---------------------------------------------------------------------------

struct ParamSegment {
    std::string name;
    std::size_t begin = 0;
    std::size_t end = 0;
};

template <class F>
void for_each_param_array(DslModel& m, F&& f) {
    // f(name, vector<double>& data)
    auto net = [&](const char* name, MlpParams& p) {
        for (std::size_t l = 0; l < p.weights.size(); ++l) {
            f(name, p.weights[l].data);
            f(name, p.biases[l]);
        }
    };
    if (!m.ablation) net("a", m.a_net);
    net("p", m.invp_net);
    net("q", m.q_net);
    net("w", m.w_net);
    if (m.v_net) net("v", *m.v_net);
    f("L", m.head.data);
    if (m.has_bias()) f("L", m.head_bias);
}

struct DslGrad {
    MlpGrad a, invp, q, w;
    std::optional<MlpGrad> v;
    Matrix head;
    Vector head_bias;

    static DslGrad zeros_like(const DslModel& m) {
        DslGrad g;
        g.a = MlpGrad::zeros_like(m.a_net);
        g.invp = MlpGrad::zeros_like(m.invp_net);
        g.q = MlpGrad::zeros_like(m.q_net);
        g.w = MlpGrad::zeros_like(m.w_net);
        if (m.v_net) g.v = MlpGrad::zeros_like(*m.v_net);
        g.head = Matrix(m.head.rows, m.head.cols, 0.0);
        g.head_bias.assign(m.head_bias.size(), 0.0);
        return g;
    }

    void scale(double s) {
        a.scale(s); invp.scale(s); q.scale(s); w.scale(s);
        if (v) v->scale(s);
        for (double& x : head.data) x *= s;
        for (double& x : head_bias) x *= s;
    }

    void add_scaled(const DslGrad& o, double s) {
        a.add_scaled(o.a, s);
        invp.add_scaled(o.invp, s);
        q.add_scaled(o.q, s);
        w.add_scaled(o.w, s);
        if (v && o.v) v->add_scaled(*o.v, s);
        for (std::size_t i = 0; i < head.data.size(); ++i) head.data[i] += s * o.head.data[i];
        for (std::size_t i = 0; i < head_bias.size(); ++i) head_bias[i] += s * o.head_bias[i];
    }
};

template <class F>
void for_each_grad_array(const DslModel& m, DslGrad& g, F&& f) {
    auto net = [&](const char* name, MlpGrad& p) {
        for (std::size_t l = 0; l < p.weights.size(); ++l) {
            f(name, p.weights[l].data);
            f(name, p.biases[l]);
        }
    };
    if (!m.ablation) net("a", g.a);
    net("p", g.invp);
    net("q", g.q);
    net("w", g.w);
    if (g.v) net("v", *g.v);
    f("L", g.head.data);
    if (!g.head_bias.empty()) f("L", g.head_bias);
}

// Flat views in the shared traversal order.
inline Vector flatten_params(DslModel& m, std::vector<ParamSegment>* segments = nullptr) {
    Vector flat;
    std::string current;
    for_each_param_array(m, [&](const char* name, Vector& data) {
        if (segments) {
            if (current != name) {
                if (!current.empty()) segments->back().end = flat.size();
                segments->push_back({name, flat.size(), flat.size()});
                current = name;
            }
        }
        flat.insert(flat.end(), data.begin(), data.end());
    });
    if (segments && !segments->empty()) segments->back().end = flat.size();
    return flat;
}

inline void unflatten_params(DslModel& m, const Vector& flat) {
    std::size_t pos = 0;
    for_each_param_array(m, [&](const char*, Vector& data) {
        std::copy(flat.begin() + pos, flat.begin() + pos + data.size(), data.begin());
        pos += data.size();
    });
    if (pos != flat.size()) throw ShapeMismatch("unflatten_params: length mismatch");
}

inline Vector flatten_grad(const DslModel& m, DslGrad& g) {
    Vector flat;
    for_each_grad_array(m, g, [&](const char*, Vector& data) {
        flat.insert(flat.end(), data.begin(), data.end());
    });
    return flat;
}

}  // namespace dsl
