#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "dsl/errors.hpp"
#include "dsl/linalg.hpp"

// Adaptive Dormand-Prince 5(4) integration with the classic quartic
// continuous extension, plus event localization by bisection on the
// dense interpolant. Integration may run in either time direction.

namespace dsl {

namespace dopri5 {

constexpr double c2 = 1.0 / 5.0, c3 = 3.0 / 10.0, c4 = 4.0 / 5.0, c5 = 8.0 / 9.0;

constexpr double a21 = 1.0 / 5.0;
constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0, a53 = 64448.0 / 6561.0,
                 a54 = -212.0 / 729.0;
constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0, a63 = 46732.0 / 5247.0,
                 a64 = 49.0 / 176.0, a65 = -5103.0 / 18656.0;
constexpr double a71 = 35.0 / 384.0, a73 = 500.0 / 1113.0, a74 = 125.0 / 192.0,
                 a75 = -2187.0 / 6784.0, a76 = 11.0 / 84.0;

// Difference between the 5th- and embedded 4th-order weights.
constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0,
                 e5 = -17253.0 / 339200.0, e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;

// Weights of the quartic dense-output polynomial.
constexpr double d1 = -12715105075.0 / 11282082432.0;
constexpr double d3 = 87487479700.0 / 32700410799.0;
constexpr double d4 = -10690763975.0 / 1880347072.0;
constexpr double d5 = 701980252875.0 / 199316789632.0;
constexpr double d6 = -1453857185.0 / 822651844.0;
constexpr double d7 = 69997945.0 / 29380423.0;

}  // namespace dopri5

struct IntegrateOptions {
    double rtol = 1e-6;
    double atol = 1e-6;
    std::size_t max_steps = 100000;
    double initial_step = 0.0;  // 0 = choose automatically
    double max_step = 0.0;      // 0 = unlimited
};

// One accepted step's continuous extension: five coefficient vectors
// evaluated with the Horner-like scheme of the original dopri5 code.
struct DenseSegment {
    double t0 = 0.0;
    double t1 = 0.0;
    Vector c1, c2, c3, c4, c5;

    void eval(double t, Vector& out) const {
        const double h = t1 - t0;
        const double s = (t - t0) / h;
        const double s1 = 1.0 - s;
        const std::size_t n = c1.size();
        out.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            out[i] = c1[i] + s * (c2[i] + s1 * (c3[i] + s * (c4[i] + s1 * c5[i])));
    }
};

struct DenseSolution {
    double t_start = 0.0;
    double t_end = 0.0;
    double rtol = 0.0;
    double atol = 0.0;
    std::vector<DenseSegment> segments;

    bool forward() const { return t_end >= t_start; }

    // Segment lookup by binary search; times outside [t_start, t_end]
    // extrapolate with the nearest segment's polynomial.
    const DenseSegment& segment_at(double t) const {
        if (segments.empty()) throw std::logic_error("DenseSolution: empty");
        std::size_t lo = 0, hi = segments.size() - 1;
        const bool fwd = forward();
        while (lo < hi) {
            const std::size_t mid = (lo + hi) / 2;
            const bool before_end = fwd ? (t <= segments[mid].t1) : (t >= segments[mid].t1);
            if (before_end)
                hi = mid;
            else
                lo = mid + 1;
        }
        return segments[lo];
    }

    Vector eval(double t) const {
        Vector out;
        segment_at(t).eval(t, out);
        return out;
    }

    void eval_into(double t, Vector& out) const { segment_at(t).eval(t, out); }
};

namespace detail {

inline double error_norm(const Vector& err, const Vector& y0, const Vector& y1, double rtol, double atol) {
    double acc = 0.0;
    for (std::size_t i = 0; i < err.size(); ++i) {
        const double scale = atol + rtol * std::max(std::fabs(y0[i]), std::fabs(y1[i]));
        const double e = err[i] / scale;
        acc += e * e;
    }
    return std::sqrt(acc / static_cast<double>(err.size()));
}

template <class Rhs>
double initial_step_guess(Rhs&& rhs, double t0, const Vector& y0, const Vector& f0, double dir,
                          double rtol, double atol) {
    double dnf = 0.0, dny = 0.0;
    for (std::size_t i = 0; i < y0.size(); ++i) {
        const double sk = atol + rtol * std::fabs(y0[i]);
        dnf += (f0[i] / sk) * (f0[i] / sk);
        dny += (y0[i] / sk) * (y0[i] / sk);
    }
    double h = (dnf <= 1e-10 || dny <= 1e-10) ? 1e-6 : 0.01 * std::sqrt(dny / dnf);
    h *= dir;

    // One explicit Euler probe to estimate the second derivative.
    Vector y1(y0.size()), f1(y0.size());
    for (std::size_t i = 0; i < y0.size(); ++i) y1[i] = y0[i] + h * f0[i];
    rhs(t0 + h, y1, f1);
    double der2 = 0.0;
    for (std::size_t i = 0; i < y0.size(); ++i) {
        const double sk = atol + rtol * std::fabs(y0[i]);
        const double d = (f1[i] - f0[i]) / sk;
        der2 += d * d;
    }
    der2 = std::sqrt(der2) / std::fabs(h);
    const double der12 = std::max(der2, std::sqrt(dnf));
    double h1 = (der12 <= 1e-15) ? std::max(1e-6, std::fabs(h) * 1e-3)
                                 : std::pow(0.01 / der12, 0.2);
    return dir * std::min(100.0 * std::fabs(h), h1);
}

}  // namespace detail

// Single-stepping Dopri5 engine. `Rhs` is callable as
// rhs(double t, const Vector& y, Vector& dydt).
template <class Rhs>
class Dopri5Stepper {
public:
    Dopri5Stepper(Rhs& rhs, Vector y0, double t0, double t1, const IntegrateOptions& opts)
        : rhs_(rhs), opts_(opts), t_(t0), t_target_(t1), y_(std::move(y0)) {
        if (t0 == t1) throw std::invalid_argument("integrate: t0 == t1");
        dir_ = (t1 > t0) ? 1.0 : -1.0;
        const std::size_t n = y_.size();
        k1_.resize(n); k2_.resize(n); k3_.resize(n); k4_.resize(n);
        k5_.resize(n); k6_.resize(n); k7_.resize(n);
        y_stage_.resize(n); y_next_.resize(n); err_.resize(n);
        rhs_(t_, y_, k1_);
        h_ = (opts.initial_step != 0.0)
                 ? dir_ * std::fabs(opts.initial_step)
                 : detail::initial_step_guess(rhs_, t_, y_, k1_, dir_, opts.rtol, opts.atol);
        clamp_step();
    }

    bool done() const { return done_; }
    double t() const { return t_; }
    const Vector& y() const { return y_; }
    std::size_t steps_taken() const { return n_accepted_; }

    // Advance one accepted step. When `segments` is non-null the step's
    // dense segment is appended and returned; otherwise no interpolant is
    // built (shooting loops only need endpoint values).
    const DenseSegment* step(std::vector<DenseSegment>* segments) {
        const std::size_t n = y_.size();
        using namespace dopri5;
        for (;;) {
            if (++n_attempts_ > opts_.max_steps)
                throw MaxStepsExceeded("integrate: exceeded " + std::to_string(opts_.max_steps) + " steps");
            if (std::fabs(h_) < 16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::fabs(t_)))
                throw StepSizeUnderflow("integrate: step underflow at t = " + std::to_string(t_));

            bool last = false;
            if (dir_ * (t_ + h_ - t_target_) > 0.0) {
                h_ = t_target_ - t_;
                last = true;
            }
            const double h = h_;

            for (std::size_t i = 0; i < n; ++i) y_stage_[i] = y_[i] + h * a21 * k1_[i];
            rhs_(t_ + c2 * h, y_stage_, k2_);
            for (std::size_t i = 0; i < n; ++i)
                y_stage_[i] = y_[i] + h * (a31 * k1_[i] + a32 * k2_[i]);
            rhs_(t_ + c3 * h, y_stage_, k3_);
            for (std::size_t i = 0; i < n; ++i)
                y_stage_[i] = y_[i] + h * (a41 * k1_[i] + a42 * k2_[i] + a43 * k3_[i]);
            rhs_(t_ + c4 * h, y_stage_, k4_);
            for (std::size_t i = 0; i < n; ++i)
                y_stage_[i] = y_[i] + h * (a51 * k1_[i] + a52 * k2_[i] + a53 * k3_[i] + a54 * k4_[i]);
            rhs_(t_ + c5 * h, y_stage_, k5_);
            for (std::size_t i = 0; i < n; ++i)
                y_stage_[i] =
                    y_[i] + h * (a61 * k1_[i] + a62 * k2_[i] + a63 * k3_[i] + a64 * k4_[i] + a65 * k5_[i]);
            rhs_(t_ + h, y_stage_, k6_);
            for (std::size_t i = 0; i < n; ++i)
                y_next_[i] =
                    y_[i] + h * (a71 * k1_[i] + a73 * k3_[i] + a74 * k4_[i] + a75 * k5_[i] + a76 * k6_[i]);
            rhs_(t_ + h, y_next_, k7_);  // FSAL stage

            for (std::size_t i = 0; i < n; ++i)
                err_[i] = h * (e1 * k1_[i] + e3 * k3_[i] + e4 * k4_[i] + e5 * k5_[i] + e6 * k6_[i] +
                               e7 * k7_[i]);
            const double err = detail::error_norm(err_, y_, y_next_, opts_.rtol, opts_.atol);

            double factor = 0.9 * std::pow(std::max(err, 1e-300), -0.2);
            factor = std::clamp(factor, 0.2, 5.0);

            if (err <= 1.0) {
                const DenseSegment* produced = nullptr;
                if (segments) {
                    DenseSegment seg;
                    seg.t0 = t_;
                    seg.t1 = t_ + h;
                    seg.c1 = y_;
                    seg.c2.resize(n); seg.c3.resize(n); seg.c4.resize(n); seg.c5.resize(n);
                    for (std::size_t i = 0; i < n; ++i) {
                        const double ydiff = y_next_[i] - y_[i];
                        const double bspl = h * k1_[i] - ydiff;
                        seg.c2[i] = ydiff;
                        seg.c3[i] = bspl;
                        seg.c4[i] = ydiff - h * k7_[i] - bspl;
                        seg.c5[i] = h * (d1 * k1_[i] + d3 * k3_[i] + d4 * k4_[i] + d5 * k5_[i] +
                                         d6 * k6_[i] + d7 * k7_[i]);
                    }
                    segments->push_back(std::move(seg));
                    produced = &segments->back();
                }

                t_ += h;
                y_.swap(y_next_);
                k1_.swap(k7_);
                ++n_accepted_;
                if (last || dir_ * (t_ - t_target_) >= 0.0) done_ = true;
                h_ *= factor;
                clamp_step();
                return produced;
            }
            h_ *= std::min(factor, 1.0);  // rejected: shrink and retry
        }
    }

private:
    void clamp_step() {
        if (opts_.max_step > 0.0 && std::fabs(h_) > opts_.max_step) h_ = dir_ * opts_.max_step;
    }

    Rhs& rhs_;
    IntegrateOptions opts_;
    double t_, t_target_, h_ = 0.0, dir_ = 1.0;
    Vector y_;
    Vector k1_, k2_, k3_, k4_, k5_, k6_, k7_, y_stage_, y_next_, err_;
    std::size_t n_attempts_ = 0, n_accepted_ = 0;
    bool done_ = false;
};

template <class Rhs>
DenseSolution integrate(Rhs&& rhs, const Vector& y0, double t0, double t1,
                        const IntegrateOptions& opts = {}) {
    DenseSolution sol;
    sol.t_start = t0;
    sol.t_end = t1;
    sol.rtol = opts.rtol;
    sol.atol = opts.atol;
    Dopri5Stepper<Rhs> stepper(rhs, y0, t0, t1, opts);
    while (!stepper.done()) stepper.step(&sol.segments);
    return sol;
}

// Endpoint-only integration; no interpolant is retained.
template <class Rhs>
Vector integrate_endpoint(Rhs&& rhs, const Vector& y0, double t0, double t1,
                          const IntegrateOptions& opts = {}) {
    Dopri5Stepper<Rhs> stepper(rhs, y0, t0, t1, opts);
    while (!stepper.done()) stepper.step(nullptr);
    return stepper.y();
}

enum class Direction { Forward, Backward };

struct EventResult {
    double t_event = 0.0;
    Vector y_event;
    DenseSolution dense;  // covers from t0 through the step that crossed
};

// Integrate until `event` changes sign at a step endpoint, then bisect the
// crossing time on that step's dense interpolant down to tol_t. The scan
// looks at accepted step endpoints only. `horizon` bounds how far from t0
// the search may run.
template <class Rhs, class Event>
EventResult locate_event_dense(Rhs&& rhs, const Vector& y0, double t0, Direction direction,
                               Event&& event, double tol_t, double horizon,
                               const IntegrateOptions& opts = {}) {
    const double dir = (direction == Direction::Forward) ? 1.0 : -1.0;
    const double t1 = t0 + dir * horizon;

    EventResult res;
    res.dense.t_start = t0;
    res.dense.rtol = opts.rtol;
    res.dense.atol = opts.atol;

    double g_prev = event(y0);
    if (g_prev == 0.0) {
        res.t_event = t0;
        res.y_event = y0;
        res.dense.t_end = t0;
        return res;
    }

    Dopri5Stepper<Rhs> stepper(rhs, y0, t0, t1, opts);
    Vector y_mid;
    while (!stepper.done()) {
        const DenseSegment& seg = *stepper.step(&res.dense.segments);
        const double g_now = event(stepper.y());
        if ((g_prev < 0.0) != (g_now < 0.0) || g_now == 0.0) {
            // Bisection on the dense interpolant; no differentiability needed.
            double ta = seg.t0, tb = seg.t1;
            while (std::fabs(tb - ta) > tol_t) {
                const double tm = 0.5 * (ta + tb);
                seg.eval(tm, y_mid);
                const double gm = event(y_mid);
                if ((g_prev < 0.0) != (gm < 0.0) || gm == 0.0)
                    tb = tm;
                else
                    ta = tm;
            }
            res.t_event = 0.5 * (ta + tb);
            seg.eval(res.t_event, res.y_event);
            res.dense.t_end = seg.t1;
            return res;
        }
        g_prev = g_now;
    }
    throw NoEventDetected("locate_event: no sign change within horizon " + std::to_string(horizon));
}

template <class Rhs, class Event>
std::pair<double, Vector> locate_event(Rhs&& rhs, const Vector& y0, double t0, Direction direction,
                                       Event&& event, double tol_t, double horizon = 1e3,
                                       const IntegrateOptions& opts = {}) {
    auto res = locate_event_dense(rhs, y0, t0, direction, event, tol_t, horizon, opts);
    return {res.t_event, std::move(res.y_event)};
}

}  // namespace dsl
