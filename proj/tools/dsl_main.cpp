// Command-line surface for the Deep Sturm-Liouville approximator:
// training, evaluation, prediction, basis dumps, dataset generation,
// benchmark sweeps and the built-in verification suite.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dsl/dataio.hpp"
#include "dsl/gradflow.hpp"
#include "dsl/learner.hpp"
#include "dsl/selfcheck.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitConfig = 2;
constexpr int kExitTrainingAborted = 3;
constexpr int kExitForwardFailure = 4;

struct GlobalFlags {
    std::int64_t seed = -1;  // -1 = keep the config seed
    std::size_t threads = 1;
    std::string precision;   // "", "standard" or "high"
};

void apply_globals(dsl::TrainConfig& cfg, const GlobalFlags& g) {
    if (g.seed >= 0) cfg.seed = static_cast<std::uint64_t>(g.seed);
    cfg.threads = g.threads;
    if (g.precision == "standard") {
        cfg.solver.tol_lambda = 1e-4;
        cfg.solver.tol_t = 1e-4;
        cfg.solver.rtol = cfg.solver.atol = 1e-6;
    } else if (g.precision == "high") {
        cfg.solver.tol_lambda = 1e-8;
        cfg.solver.tol_t = 1e-8;
        cfg.solver.rtol = cfg.solver.atol = 1e-8;
    }
}

dsl::DatasetSplit load_split(const std::string& path, const std::string& label_column,
                             const dsl::NormalizationStats* stats) {
    const dsl::CsvTable t = dsl::read_csv(path);
    auto [x, y] = dsl::split_label_column(t, label_column);
    return dsl::normalize(x, y, stats);
}

int cmd_train(const std::string& config_path, const std::string& train_path,
              const std::string& val_path, const std::string& out_path,
              std::string history_path, const GlobalFlags& g) {
    dsl::FileConfig fc = dsl::load_config(config_path);
    apply_globals(fc.train, g);

    dsl::DatasetSplit train = load_split(train_path, fc.label_column, nullptr);
    dsl::DatasetSplit val = load_split(val_path, fc.label_column, &train.normalization);

    dsl::FitResult res = dsl::fit(fc.train, train, val);

    dsl::Checkpoint ck;
    ck.model = std::move(res.model);
    ck.config = fc.train;
    ck.normalization = train.normalization;
    dsl::save_checkpoint(out_path, ck);

    if (history_path.empty()) history_path = out_path + ".history.csv";
    dsl::write_history_csv(history_path, res.history);

    double best = 0.0;
    for (const auto& h : res.history) best = std::max(best, h.val_accuracy);
    std::printf("trained %zu epochs, best val accuracy %.4f, skipped %zu samples\n",
                res.history.size(), best, res.total_skipped);
    std::printf("checkpoint: %s\nhistory: %s\n", out_path.c_str(), history_path.c_str());
    return kExitOk;
}

int cmd_eval(const std::string& model_path, const std::string& data_path,
             const std::string& label_column, const GlobalFlags& g) {
    dsl::Checkpoint ck = dsl::load_checkpoint(model_path);
    apply_globals(ck.config, g);
    const dsl::CsvTable t = dsl::read_csv(data_path);
    auto [x, y] = dsl::split_label_column(t, label_column);
    dsl::DatasetSplit split = dsl::normalize(x, y, &ck.normalization);
    const dsl::EvalResult ev =
        dsl::evaluate(ck.model, split, ck.config.solver, ck.config.loss, g.threads);
    std::printf("accuracy %.6f\nmean_loss %.6f\nfailures %zu\n", ev.accuracy, ev.mean_loss,
                ev.failures);
    return kExitOk;
}

int cmd_predict(const std::string& model_path, const std::string& data_path,
                const std::string& out_path, const GlobalFlags& g) {
    dsl::Checkpoint ck = dsl::load_checkpoint(model_path);
    apply_globals(ck.config, g);
    const dsl::CsvTable t = dsl::read_csv(data_path);

    dsl::Matrix x = t.values;
    if (t.column("label")) {
        auto [xs, ys] = dsl::split_label_column(t, "label");
        x = std::move(xs);
    }
    dsl::DatasetSplit split =
        dsl::normalize(x, std::vector<std::size_t>(x.rows, 0), &ck.normalization);

    const std::size_t k = ck.model.num_classes;
    dsl::Matrix out(x.rows, k + 1);
    std::size_t failures = 0;
    for (std::size_t i = 0; i < x.rows; ++i) {
        try {
            const dsl::Vector logits = dsl::predict(ck.model, split.row(i), ck.config.solver);
            for (std::size_t j = 0; j < k; ++j) out(i, j) = logits[j];
            out(i, k) = static_cast<double>(
                std::max_element(logits.begin(), logits.end()) - logits.begin());
        } catch (const std::exception&) {
            for (std::size_t j = 0; j < k; ++j) out(i, j) = std::nan("");
            out(i, k) = -1.0;
            ++failures;
        }
    }
    std::vector<std::string> header;
    for (std::size_t j = 0; j < k; ++j) header.push_back("logit_" + std::to_string(j));
    header.push_back("predicted_label");
    dsl::write_csv(out_path, header, out);
    std::printf("wrote %zu predictions to %s (%zu failures)\n", x.rows, out_path.c_str(), failures);
    return kExitOk;
}

int cmd_basis(const std::string& model_path, const std::string& data_path, std::size_t index,
              std::size_t grid, const std::string& out_path, const GlobalFlags& g) {
    dsl::Checkpoint ck = dsl::load_checkpoint(model_path);
    apply_globals(ck.config, g);
    const dsl::CsvTable t = dsl::read_csv(data_path);
    dsl::Matrix x = t.values;
    if (t.column("label")) {
        auto [xs, ys] = dsl::split_label_column(t, "label");
        x = std::move(xs);
    }
    if (index >= x.rows) throw dsl::IoError("sample index out of range");
    dsl::DatasetSplit split =
        dsl::normalize(x, std::vector<std::size_t>(x.rows, 0), &ck.normalization);

    dsl::ForwardCache cache;
    try {
        cache = dsl::dsl_forward(ck.model, split.row(index), ck.config.solver);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "forward pass failed on sample %zu: %s\n", index, e.what());
        return kExitForwardFailure;
    }
    const dsl::BasisEval be = dsl::eval_basis(cache.trace, cache.spec, grid, cache.anchor);
    dsl::Matrix out(grid, ck.model.d + 1);
    for (std::size_t gi = 0; gi < grid; ++gi) {
        out(gi, 0) = be.times[gi];
        for (std::size_t n = 0; n < ck.model.d; ++n) out(gi, n + 1) = be.u(n, gi);
    }
    std::vector<std::string> header{"t"};
    for (std::size_t n = 1; n <= ck.model.d; ++n) header.push_back("u" + std::to_string(n));
    dsl::write_csv(out_path, header, out);
    std::printf("wrote basis dump (%zu rows, %zu eigenfunctions) to %s\n", grid, ck.model.d,
                out_path.c_str());
    return kExitOk;
}

int cmd_gen_moons(std::size_t count, double noise, std::uint64_t seed,
                  const std::string& out_path) {
    auto [x, y] = dsl::two_moons(count, noise, seed);
    dsl::Matrix out(count, 3);
    for (std::size_t i = 0; i < count; ++i) {
        out(i, 0) = x(i, 0);
        out(i, 1) = x(i, 1);
        out(i, 2) = static_cast<double>(y[i]);
    }
    dsl::write_csv(out_path, {"x1", "x2", "label"}, out);
    std::printf("wrote %zu samples to %s\n", count, out_path.c_str());
    return kExitOk;
}

dsl::TrainConfig bench_base_config(std::size_t epochs, double alpha, std::size_t d,
                                   std::size_t knots) {
    dsl::TrainConfig cfg;
    cfg.d = d;
    cfg.hidden = {32, 16};
    cfg.a_hidden = {32, 16};
    cfg.epochs = epochs;
    cfg.alpha = alpha;
    cfg.loss = dsl::LossKind::Hinge;
    cfg.solver.knots = knots;
    cfg.solver.tol_lambda = 1e-4;
    cfg.solver.tol_t = 1e-4;
    return cfg;
}

int cmd_bench(const std::string& out_dir, const std::string& sweep,
              const std::vector<std::size_t>& sizes, std::size_t seeds, std::size_t epochs,
              double alpha, std::size_t d, std::size_t val_size, std::size_t test_size,
              double noise, std::size_t knots, const GlobalFlags& g) {
    std::filesystem::create_directories(out_dir);

    auto run_once = [&](std::size_t train_size, std::size_t d_run, double alpha_run,
                        std::uint64_t seed) {
        dsl::TrainConfig cfg = bench_base_config(epochs, alpha_run, d_run, knots);
        cfg.seed = seed;
        cfg.threads = g.threads;
        std::size_t total = train_size + val_size + test_size;
        total += total % 2;
        auto [raw, labels] = dsl::two_moons(total, noise, seed * 7919 + 13);
        auto take = [&](std::size_t begin, std::size_t count) {
            dsl::Matrix x(count, 2);
            std::vector<std::size_t> y(count);
            for (std::size_t i = 0; i < count; ++i) {
                x(i, 0) = raw(begin + i, 0);
                x(i, 1) = raw(begin + i, 1);
                y[i] = labels[begin + i];
            }
            return std::pair{std::move(x), std::move(y)};
        };
        auto [xtr, ytr] = take(0, train_size);
        auto [xva, yva] = take(train_size, val_size);
        auto [xte, yte] = take(train_size + val_size, test_size);
        dsl::DatasetSplit train = dsl::normalize(xtr, ytr);
        dsl::DatasetSplit val = dsl::normalize(xva, yva, &train.normalization);
        dsl::DatasetSplit test = dsl::normalize(xte, yte, &train.normalization);
        dsl::FitResult res = dsl::fit(cfg, train, val);
        return dsl::evaluate(res.model, test, cfg.solver, cfg.loss, cfg.threads).accuracy;
    };

    std::string csv;
    std::string path;
    if (sweep == "sizes") {
        path = out_dir + "/sample_efficiency.csv";
        csv = "train_size,seed,test_accuracy\n";
        for (std::size_t size : sizes)
            for (std::size_t s = 0; s < seeds; ++s) {
                const double acc = run_once(size, d, alpha, s);
                csv += std::to_string(size) + "," + std::to_string(s) + "," +
                       dsl::format_double(acc) + "\n";
                std::printf("size=%zu seed=%zu test_accuracy=%.4f\n", size, s, acc);
                std::fflush(stdout);
            }
    } else if (sweep == "d") {
        path = out_dir + "/sensitivity_d.csv";
        csv = "d,seed,test_accuracy\n";
        for (std::size_t dv = 2; dv <= 20; dv += 2)
            for (std::size_t s = 0; s < seeds; ++s) {
                const double acc = run_once(sizes.front(), dv, alpha, s);
                csv += std::to_string(dv) + "," + std::to_string(s) + "," +
                       dsl::format_double(acc) + "\n";
                std::printf("d=%zu seed=%zu test_accuracy=%.4f\n", dv, s, acc);
                std::fflush(stdout);
            }
    } else {
        path = out_dir + "/sensitivity_alpha.csv";
        csv = "alpha,seed,test_accuracy\n";
        for (double av : {0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0})
            for (std::size_t s = 0; s < seeds; ++s) {
                const double acc = run_once(sizes.front(), d, av, s);
                csv += dsl::format_double(av) + "," + std::to_string(s) + "," +
                       dsl::format_double(acc) + "\n";
                std::printf("alpha=%g seed=%zu test_accuracy=%.4f\n", av, s, acc);
                std::fflush(stdout);
            }
    }
    dsl::atomic_write_text(path, csv);
    std::printf("wrote %s\n", path.c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deep Sturm-Liouville function approximator"};
    app.require_subcommand(1);

    GlobalFlags g;
    app.add_option("--seed", g.seed, "override the config seed");
    app.add_option("--threads", g.threads, "worker pool size")->default_val(1);
    app.add_option("--precision", g.precision, "tolerance regime")
        ->check(CLI::IsMember({"standard", "high"}));

    std::string config_path, train_path, val_path, out_path, history_path, model_path, data_path;
    auto* train = app.add_subcommand("train", "train a model from CSV data");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--train", train_path, "training CSV")->required();
    train->add_option("--val", val_path, "validation CSV")->required();
    train->add_option("--out", out_path, "output checkpoint")->required();
    train->add_option("--history", history_path, "history CSV (default <out>.history.csv)");

    std::string eval_label = "label";
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a CSV");
    eval->add_option("--model", model_path, "checkpoint")->required();
    eval->add_option("--data", data_path, "CSV with a label column")->required();
    eval->add_option("--label-column", eval_label, "label column name");

    std::string pred_out;
    auto* predict = app.add_subcommand("predict", "write logits for a CSV");
    predict->add_option("--model", model_path, "checkpoint")->required();
    predict->add_option("--data", data_path, "feature CSV")->required();
    predict->add_option("--out", pred_out, "output CSV")->required();

    std::size_t basis_index = 0, basis_grid = 512;
    std::string basis_out;
    auto* basis = app.add_subcommand("basis", "dump eigenfunctions along one sample's field line");
    basis->add_option("--model", model_path, "checkpoint")->required();
    basis->add_option("--data", data_path, "feature CSV")->required();
    basis->add_option("--index", basis_index, "sample row")->default_val(0);
    basis->add_option("--grid", basis_grid, "output grid size")->default_val(512);
    basis->add_option("--out", basis_out, "output CSV")->required();

    std::size_t moons_count = 500;
    double moons_noise = 0.1;
    std::uint64_t moons_seed = 0;
    std::string moons_out;
    auto* moons = app.add_subcommand("gen-moons", "generate the two-moons dataset");
    moons->add_option("--count", moons_count, "sample count (even)")->default_val(500);
    moons->add_option("--noise", moons_noise, "gaussian noise sigma")->default_val(0.1);
    moons->add_option("--moon-seed", moons_seed, "dataset seed")->default_val(0);
    moons->add_option("--out", moons_out, "output CSV")->required();

    bool selfcheck_full = false;
    auto* selfcheck = app.add_subcommand("selfcheck", "run the built-in verification suites");
    selfcheck->add_flag("--full", selfcheck_full, "run the full-size suites");

    std::string bench_dir, bench_sweep = "sizes";
    std::vector<std::size_t> bench_sizes{100, 200, 400, 800};
    std::size_t bench_seeds = 5, bench_epochs = 200, bench_d = 10;
    std::size_t bench_val = 1000, bench_test = 1000, bench_knots = 200;
    double bench_alpha = 10.0, bench_noise = 0.15;
    auto* bench = app.add_subcommand("bench-sample-efficiency",
                                     "low-sample benchmark and sensitivity sweeps");
    bench->add_option("--out-dir", bench_dir, "output directory")->required();
    bench->add_option("--sweep", bench_sweep, "sizes | d | alpha")
        ->check(CLI::IsMember({"sizes", "d", "alpha"}));
    bench->add_option("--sizes", bench_sizes, "training sizes");
    bench->add_option("--seeds", bench_seeds, "seeds per setting");
    bench->add_option("--epochs", bench_epochs, "epochs per run");
    bench->add_option("--alpha", bench_alpha, "spectral coefficient");
    bench->add_option("--d", bench_d, "eigenfunction count");
    bench->add_option("--val-size", bench_val, "validation samples");
    bench->add_option("--test-size", bench_test, "test samples");
    bench->add_option("--noise", bench_noise, "moons noise");
    bench->add_option("--knots", bench_knots, "spline knots");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*train) return cmd_train(config_path, train_path, val_path, out_path, history_path, g);
        if (*eval) return cmd_eval(model_path, data_path, eval_label, g);
        if (*predict) return cmd_predict(model_path, data_path, pred_out, g);
        if (*basis) return cmd_basis(model_path, data_path, basis_index, basis_grid, basis_out, g);
        if (*moons) return cmd_gen_moons(moons_count, moons_noise, moons_seed, moons_out);
        if (*selfcheck) return dsl::run_selfcheck(!selfcheck_full) ? kExitOk : 5;
        if (*bench)
            return cmd_bench(bench_dir, bench_sweep, bench_sizes, bench_seeds, bench_epochs,
                             bench_alpha, bench_d, bench_val, bench_test, bench_noise, bench_knots,
                             g);
    } catch (const dsl::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const dsl::IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return kExitIo;
    } catch (const dsl::TrainingAborted& e) {
        std::fprintf(stderr, "training aborted: %s\n", e.what());
        return kExitTrainingAborted;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    }
    return kExitOk;
}
