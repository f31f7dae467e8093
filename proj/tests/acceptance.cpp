// Acceptance suite: every criterion prints one PASS/FAIL line with its
// measured numbers; the process exits nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dsl/dataio.hpp"
#include "dsl/gradflow.hpp"
#include "dsl/learner.hpp"
#include "dsl/selfcheck.hpp"
#include "dsl/slcore.hpp"

using namespace dsl;
using std::numbers::pi;

namespace {

struct Criterion {
    int id;
    bool pass;
    std::string detail;
    double seconds;
};

std::vector<Criterion> g_results;

template <class Fn>
void run_criterion(int id, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Criterion c;
    c.id = id;
    try {
        auto [pass, detail] = fn();
        c.pass = pass;
        c.detail = detail;
    } catch (const std::exception& e) {
        c.pass = false;
        c.detail = std::string("exception: ") + e.what();
    }
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d: %s  (%s) [%.1f s]\n", c.id, c.pass ? "PASS" : "FAIL",
                c.detail.c_str(), c.seconds);
    std::fflush(stdout);
    g_results.push_back(c);
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

struct TraceFixture {
    std::vector<CoefficientTrace> traces;
    std::vector<Spectrum> spectra;
    std::vector<BasisEval> bases;
};

TraceFixture& random_traces() {
    static TraceFixture fx = [] {
        TraceFixture f;
        std::mt19937_64 rng(7001);
        SolveOptions opts;
        opts.tol_lambda = 1e-6;
        opts.ode.rtol = opts.ode.atol = 1e-8;
        for (int t = 0; t < 20; ++t) {
            f.traces.push_back(selfcheck_detail::random_smooth_trace(rng, 2000, 6));
            f.spectra.push_back(spectrum(f.traces.back(), 6, opts));
            f.bases.push_back(eval_basis(f.traces.back(), f.spectra.back(), 4000,
                                         0.5 * (f.traces.back().t_minus + f.traces.back().t_plus)));
        }
        return f;
    }();
    return fx;
}

TrainConfig moons_config(std::uint64_t seed, double alpha) {
    TrainConfig cfg;
    cfg.d = 6;
    cfg.hidden = {32, 16};
    cfg.a_hidden = {32, 16};
    cfg.epochs = 40;
    cfg.batch_size = 32;
    cfg.lr = 2e-3;
    cfg.alpha = alpha;
    cfg.loss = LossKind::Hinge;
    cfg.seed = seed;
    cfg.solver.knots = 200;
    cfg.solver.tol_lambda = 1e-4;
    cfg.solver.tol_t = 1e-4;
    cfg.solver.rtol = cfg.solver.atol = 1e-6;
    return cfg;
}

struct MoonsRun {
    FitResult fit_result;
    EvalResult test_eval;
    TrainConfig cfg;
};

MoonsRun train_moons(std::uint64_t seed, double alpha) {
    TrainConfig cfg = moons_config(seed, alpha);
    auto [raw, labels] = two_moons(1200, 0.1, seed + 1000);
    auto take = [&](std::size_t begin, std::size_t count) {
        Matrix x(count, 2);
        std::vector<std::size_t> y(count);
        for (std::size_t i = 0; i < count; ++i) {
            x(i, 0) = raw(begin + i, 0);
            x(i, 1) = raw(begin + i, 1);
            y[i] = labels[begin + i];
        }
        return std::pair{std::move(x), std::move(y)};
    };
    auto [xtr, ytr] = take(0, 500);
    auto [xva, yva] = take(500, 200);
    auto [xte, yte] = take(700, 500);
    DatasetSplit train = normalize(xtr, ytr);
    DatasetSplit val = normalize(xva, yva, &train.normalization);
    DatasetSplit test = normalize(xte, yte, &train.normalization);
    MoonsRun r;
    r.cfg = cfg;
    r.fit_result = fit(cfg, train, val);
    r.test_eval = evaluate(r.fit_result.model, test, cfg.solver, cfg.loss);
    return r;
}

double mean_abs_lambda(const DslModel& m, const SolverSettings& s, std::uint64_t seed,
                       std::size_t samples) {
    auto [raw, labels] = two_moons(2 * samples, 0.1, seed);
    DatasetSplit split = normalize(raw, labels);
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < samples; ++i) {
        try {
            ForwardCache c = dsl_forward(m, split.row(i), s);
            for (double l : c.spec.lambdas) acc += std::fabs(l);
            count += c.spec.lambdas.size();
        } catch (const std::exception&) {
        }
    }
    return count ? acc / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

std::pair<bool, std::string> criterion1_analytic() {
    const auto t0 = std::chrono::steady_clock::now();
    CoefficientTrace tr = selfcheck_detail::constant_trace(-0.25, 0.75, 1.0, 0.0, 1.0, 400, 10);
    SolveOptions opts;
    opts.tol_lambda = 1e-9;
    opts.ode.rtol = opts.ode.atol = 1e-10;
    double worst_rel = 0.0;
    for (std::size_t n = 1; n <= 10; ++n) {
        const double exact = double(n * n) * pi * pi;
        worst_rel = std::max(worst_rel,
                             std::fabs(solve_nth_detail(tr, n, opts).lambda - exact) / exact);
    }
    Spectrum sp = spectrum(tr, 10, opts);
    BasisEval be = eval_basis(tr, sp, 2001);
    double worst_sup = 0.0;
    for (std::size_t n = 1; n <= 10; ++n)
        for (std::size_t g = 0; g < be.times.size(); ++g) {
            const double expect = std::sin(double(n) * pi * (be.times[g] + 0.25)) / (double(n) * pi);
            worst_sup = std::max(worst_sup, std::fabs(be.u(n - 1, g) - expect));
        }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = worst_rel < 1e-6 && worst_sup < 1e-4 && secs < 5.0;
    return {pass, "eigenvalue rel err " + fmt(worst_rel) + ", basis sup err " + fmt(worst_sup) +
                      ", " + fmt(secs) + " s (< 5 s)"};
}

std::pair<bool, std::string> criterion2_shift() {
    CoefficientTrace tr = selfcheck_detail::constant_trace(-0.5, 0.5, 1.0, 5.0, 1.0, 400, 4);
    SolveOptions opts;
    opts.tol_lambda = 1e-9;
    opts.ode.rtol = opts.ode.atol = 1e-10;
    const double expect = pi * pi + 5.0;
    const double lambda = solve_nth_detail(tr, 1, opts).lambda;
    auto [lo, hi] = eigen_bounds(tr, 1);
    const double rel = std::fabs(lambda - expect) / expect;
    // The bounds coincide for constant coefficients; containment holds up
    // to the bisection tolerance.
    const double slack = 2.0 * opts.tol_lambda * std::max(1.0, std::fabs(hi));
    const bool contained = lo - slack <= lambda && lambda <= hi + slack;
    return {rel < 1e-6 && contained,
            "lambda_1 = " + fmt(lambda) + " vs pi^2+5 = " + fmt(expect) + " (rel " + fmt(rel) +
                "), bounds " + std::string(contained ? "contain it" : "MISS")};
}

std::pair<bool, std::string> criterion3_oracle() {
    auto& fx = random_traces();
    SolveOptions opts;
    opts.tol_lambda = 1e-6;
    opts.ode.rtol = opts.ode.atol = 1e-8;
    double worst = 0.0;
    std::size_t contained = 0, total = 0;
    for (std::size_t t = 0; t < fx.traces.size(); ++t) {
        const auto oracle = fd_oracle(fx.traces[t], 6, 2000);
        for (std::size_t n = 1; n <= 6; ++n) {
            const double lambda = solve_nth_detail(fx.traces[t], n, opts).lambda;
            worst = std::max(worst, std::fabs(lambda - oracle[n - 1]) / std::fabs(oracle[n - 1]));
            auto [lo, hi] = eigen_bounds(fx.traces[t], n);
            ++total;
            if (lambda >= lo && lambda <= hi) ++contained;
        }
    }
    return {worst < 1e-3 && contained == total,
            "20 traces, n=1..6: max rel err vs fd oracle " + fmt(worst) + ", containment " +
                std::to_string(contained) + "/" + std::to_string(total)};
}

std::pair<bool, std::string> criterion4_structure() {
    auto& fx = random_traces();
    std::size_t sign_ok = 0, sign_total = 0;
    bool ordered = true;
    for (std::size_t t = 0; t < fx.traces.size(); ++t) {
        const auto& sp = fx.spectra[t];
        for (std::size_t i = 0; i + 1 < sp.d; ++i) ordered = ordered && sp.lambdas[i] < sp.lambdas[i + 1];
        const auto& be = fx.bases[t];
        for (std::size_t n = 1; n <= 6; ++n) {
            Vector interior(be.u.data.begin() + (n - 1) * be.u.cols + 1,
                            be.u.data.begin() + (n - 1) * be.u.cols + be.u.cols - 1);
            ++sign_total;
            if (count_sign_changes(interior) == n - 1) ++sign_ok;
        }
    }
    return {sign_ok == sign_total && ordered,
            "sign-change counts " + std::to_string(sign_ok) + "/" + std::to_string(sign_total) +
                std::string(ordered ? ", spectra strictly increasing" : ", ORDERING VIOLATION")};
}

std::pair<bool, std::string> criterion5_orthogonality() {
    auto& fx = random_traces();
    double worst = 0.0;
    for (std::size_t t = 0; t < fx.traces.size(); ++t) {
        const Matrix gram = orthogonality_gram(fx.traces[t], fx.bases[t]);
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = i + 1; j < 6; ++j)
                worst =
                    std::max(worst, std::fabs(gram(i, j)) / std::sqrt(gram(i, i) * gram(j, j)));
    }
    return {worst < 1e-3, "max normalized Gram off-diagonal " + fmt(worst) + " (< 1e-3)"};
}

std::pair<bool, std::string> criterion6_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    TrainConfig cfg;
    cfg.d = 2;
    cfg.hidden = {4};
    cfg.a_hidden = {4};
    cfg.v_hidden = {4};
    cfg.v_learnable = true;
    cfg.seed = 11;
    cfg.solver.rtol = cfg.solver.atol = 1e-10;
    cfg.solver.tol_t = 1e-10;
    cfg.solver.tol_lambda = 1e-10;
    cfg.solver.knots = 50;
    DslModel m = init_model(cfg, 2, 2);
    const auto rep = fd_check(m, {0.4, 0.62}, 1, 1e-5, cfg.solver, LossKind::CrossEntropy, 1e-2);
    std::size_t over = 0;
    for (double e : rep.rel_errors)
        if (e > 1e-3) ++over;
    const double frac = 1.0 - double(over) / double(rep.rel_errors.size());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = frac >= 0.99 && rep.max_rel_error <= 1e-2 && secs < 120.0;
    return {pass, "within 1e-3: " + fmt(100.0 * frac) + "% of " +
                      std::to_string(rep.rel_errors.size()) + " params, max rel " +
                      fmt(rep.max_rel_error) + ", " + fmt(secs) + " s (< 120 s)"};
}

std::pair<bool, std::string> criterion7_flow_consistency() {
    TrainConfig cfg;
    cfg.d = 4;
    cfg.hidden = {16, 8};
    cfg.a_hidden = {16, 8};
    cfg.seed = 4242;
    cfg.solver.rtol = cfg.solver.atol = 1e-9;
    cfg.solver.tol_t = 1e-8;
    cfg.solver.tol_lambda = 1e-8;
    cfg.solver.knots = 800;
    DslModel m = init_model(cfg, 2, 2);
    std::mt19937_64 rng(555);
    std::uniform_real_distribution<double> ux(0.35, 0.65), us(0.15, 0.85);
    double worst = 0.0;
    std::size_t done = 0;
    while (done < 20) {
        const Vector x1{ux(rng), ux(rng)};
        ForwardCache c1 = dsl_forward(m, x1, cfg.solver);
        const double s =
            c1.trace.t_minus + us(rng) * (c1.trace.t_plus - c1.trace.t_minus);
        const Vector x2 = c1.fl.eval(s);
        bool inside = true;
        for (double v : x2) inside = inside && v > 0.05 && v < 0.95;
        if (!inside) continue;

        Vector u_s(m.d);
        for (std::size_t n = 0; n < m.d; ++n)
            u_s[n] = u_solve(c1.trace, c1.spec.lambdas[n], c1.trace.v0[n], s, c1.substeps).u_anchor;
        Vector f_line;
        matvec(m.head, u_s, f_line);
        for (std::size_t i = 0; i < f_line.size(); ++i) f_line[i] += m.head_bias[i];
        const Vector f_pred = predict(m, x2, cfg.solver);

        double scale = 0.0;
        for (double v : f_line) scale = std::max(scale, std::fabs(v));
        scale = std::max(scale, 1e-8);
        for (std::size_t i = 0; i < f_pred.size(); ++i)
            worst = std::max(worst, std::fabs(f_pred[i] - f_line[i]) / scale);
        ++done;
    }
    return {worst < 1e-3, "20 pairs: max relative prediction gap " + fmt(worst) + " (< 1e-3)"};
}

std::pair<bool, std::string> criterion8_learning() {
    const auto t0 = std::chrono::steady_clock::now();
    double acc_sum = 0.0;
    bool monotone = true;
    for (std::uint64_t seed : {0ull, 1ull, 2ull}) {
        MoonsRun r = train_moons(seed, 1e-4);
        acc_sum += r.test_eval.accuracy;
        for (std::size_t e = 0; e + 1 < 5; ++e)
            monotone = monotone &&
                       r.fit_result.history[e + 1].train_loss < r.fit_result.history[e].train_loss;
    }
    const double mean_acc = acc_sum / 3.0;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = mean_acc >= 0.95 && monotone && secs < 1800.0;
    return {pass, "3-seed mean test accuracy " + fmt(mean_acc) + " (>= 0.95), first-5-epoch loss " +
                      std::string(monotone ? "monotone" : "NOT monotone") + ", " + fmt(secs) +
                      " s (< 1800 s)"};
}

std::pair<bool, std::string> criterion9_regularization() {
    MoonsRun strong = train_moons(0, 10.0);
    MoonsRun none = train_moons(0, 0.0);
    const double ml_strong = mean_abs_lambda(strong.fit_result.model, strong.cfg.solver, 99, 50);
    const double ml_none = mean_abs_lambda(none.fit_result.model, none.cfg.solver, 99, 50);
    return {ml_strong < ml_none, "mean |lambda|: alpha=10 gives " + fmt(ml_strong) +
                                     " vs alpha=0 gives " + fmt(ml_none)};
}

std::pair<bool, std::string> criterion10_determinism() {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "dsl_acceptance_det";
    fs::create_directories(dir);
    auto p = [&](const char* n) { return (dir / n).string(); };

    auto run = [&](const std::string& args) {
        const std::string cmd = std::string(DSL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
        return WEXITSTATUS(std::system(cmd.c_str()));
    };
    auto bytes = [&](const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };

    const char* config = R"([model]
d = 3
hidden = 16,8
a_hidden = 16,8

[train]
epochs = 3
batch_size = 16
seed = 5
knots = 100

[data]
label_column = label
)";
    atomic_write_text(p("cfg.toml"), config);
    bool ok = run("gen-moons --count 120 --noise 0.1 --moon-seed 3 --out " + p("train.csv")) == 0;
    ok = ok && run("gen-moons --count 60 --noise 0.1 --moon-seed 4 --out " + p("val.csv")) == 0;
    ok = ok && run("train --config " + p("cfg.toml") + " --train " + p("train.csv") + " --val " +
                   p("val.csv") + " --out " + p("m1.ckpt") + " --history " + p("h1.csv")) == 0;
    ok = ok && run("train --config " + p("cfg.toml") + " --train " + p("train.csv") + " --val " +
                   p("val.csv") + " --out " + p("m2.ckpt") + " --history " + p("h2.csv")) == 0;
    if (!ok) {
        fs::remove_all(dir);
        return {false, "CLI runs failed"};
    }
    const bool identical = bytes(p("h1.csv")) == bytes(p("h2.csv")) && !bytes(p("h1.csv")).empty();
    fs::remove_all(dir);
    return {identical, identical ? "two runs produced byte-identical history CSVs"
                                 : "history CSVs DIFFER"};
}

}  // namespace

int main() {
    std::printf("Deep Sturm-Liouville acceptance suite\n");
    run_criterion(1, criterion1_analytic);
    run_criterion(2, criterion2_shift);
    run_criterion(3, criterion3_oracle);
    run_criterion(4, criterion4_structure);
    run_criterion(5, criterion5_orthogonality);
    run_criterion(6, criterion6_gradients);
    run_criterion(7, criterion7_flow_consistency);
    run_criterion(8, criterion8_learning);
    run_criterion(9, criterion9_regularization);
    run_criterion(10, criterion10_determinism);

    std::size_t passed = 0;
    for (const auto& c : g_results) passed += c.pass;
    std::printf("%zu/%zu criteria passed\n", passed, g_results.size());
    return passed == g_results.size() ? 0 : 1;
}
