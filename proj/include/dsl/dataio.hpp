#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dsl/errors.hpp"
#include "dsl/learner.hpp"
#include "dsl/model.hpp"

// File formats: CSV datasets (header row, comma separated, '.' decimal),
// the flat sectioned config, and the binary checkpoint. All writes go
// through a temp file and a rename.

namespace dsl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint layout assumes a little-endian host");

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

struct CsvTable {
    std::vector<std::string> header;
    Matrix values;  // rows x header.size()

    std::optional<std::size_t> column(const std::string& name) const {
        for (std::size_t j = 0; j < header.size(); ++j)
            if (header[j] == name) return j;
        return std::nullopt;
    }
};

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw IoError(path + ": missing header row");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::stringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) t.header.push_back(cell);
    if (t.header.empty()) throw IoError(path + ": empty header");

    std::vector<double> data;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream ls(line);
        std::size_t cols = 0;
        while (std::getline(ls, cell, ',')) {
            try {
                data.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw IoError(path + ": cannot parse '" + cell + "' as a number");
            }
            ++cols;
        }
        if (cols != t.header.size())
            throw IoError(path + ": row " + std::to_string(rows + 1) + " has " +
                          std::to_string(cols) + " fields, expected " +
                          std::to_string(t.header.size()));
        ++rows;
    }
    t.values = Matrix(rows, t.header.size());
    t.values.data = std::move(data);
    return t;
}

inline void atomic_write_text(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write " + tmp);
        out << content;
    }
    std::filesystem::rename(tmp, path);
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const Matrix& values) {
    std::string out;
    for (std::size_t j = 0; j < header.size(); ++j) {
        if (j) out += ',';
        out += header[j];
    }
    out += '\n';
    for (std::size_t i = 0; i < values.rows; ++i) {
        for (std::size_t j = 0; j < values.cols; ++j) {
            if (j) out += ',';
            out += format_double(values(i, j));
        }
        out += '\n';
    }
    atomic_write_text(path, out);
}

// Splits a table into features + integer labels using the named column.
inline std::pair<Matrix, std::vector<std::size_t>> split_label_column(const CsvTable& t,
                                                                      const std::string& label) {
    const auto col = t.column(label);
    if (!col) throw IoError("label column '" + label + "' not found");
    Matrix x(t.values.rows, t.values.cols - 1);
    std::vector<std::size_t> y(t.values.rows);
    for (std::size_t i = 0; i < t.values.rows; ++i) {
        std::size_t jj = 0;
        for (std::size_t j = 0; j < t.values.cols; ++j) {
            if (j == *col) continue;
            x(i, jj++) = t.values(i, j);
        }
        const double v = t.values(i, *col);
        if (v < 0.0 || v != std::floor(v))
            throw IoError("label column contains a non-integer value");
        y[i] = static_cast<std::size_t>(v);
    }
    return {std::move(x), std::move(y)};
}

// ---------------------------------------------------------------------------
// Config: flat key/value text with [model], [train], [data] sections.
// Unknown sections or keys are hard errors.
// ---------------------------------------------------------------------------

struct FileConfig {
    TrainConfig train;
    std::string label_column = "label";
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::size_t> parse_dims(const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        const long n = std::stol(trim(cell));
        if (n <= 0) throw ConfigError("layer sizes must be positive");
        out.push_back(static_cast<std::size_t>(n));
    }
    if (out.empty()) throw ConfigError("empty layer list");
    return out;
}

inline std::pair<double, double> parse_range(const std::string& v) {
    const auto comma = v.find(',');
    if (comma == std::string::npos) throw ConfigError("range must be 'lo,hi'");
    const double lo = std::stod(trim(v.substr(0, comma)));
    const double hi = std::stod(trim(v.substr(comma + 1)));
    if (!(lo < hi)) throw ConfigError("range must satisfy lo < hi");
    return {lo, hi};
}

inline bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("expected true/false, got '" + v + "'");
}

}  // namespace detail

inline FileConfig parse_config_text(const std::string& text) {
    FileConfig fc;
    std::string section;
    std::stringstream ss(text);
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(ss, raw)) {
        ++lineno;
        std::string line = raw;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": bad section");
            section = line.substr(1, line.size() - 2);
            if (section != "model" && section != "train" && section != "data")
                throw ConfigError("unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        TrainConfig& t = fc.train;
        try {
            if (section == "model") {
                if (key == "d") t.d = std::stoul(val);
                else if (key == "hidden") t.hidden = detail::parse_dims(val);
                else if (key == "a_hidden") t.a_hidden = detail::parse_dims(val);
                else if (key == "v_mode") {
                    if (val == "constant") t.v_learnable = false;
                    else if (val == "mlp") t.v_learnable = true;
                    else throw ConfigError("v_mode must be constant or mlp");
                } else if (key == "v_hidden") t.v_hidden = detail::parse_dims(val);
                else if (key == "head_bias") t.head_bias = detail::parse_bool(val);
                else if (key == "init") {
                    if (val == "glorot-uniform") t.init = InitScheme::GlorotUniform;
                    else if (val == "orthogonal") t.init = InitScheme::Orthogonal;
                    else throw ConfigError("init must be glorot-uniform or orthogonal");
                } else if (key == "ablation") t.ablation = detail::parse_bool(val);
                else if (key == "a_range") {
                    auto [lo, hi] = detail::parse_range(val);
                    t.a_range = {CoeffRole::A, lo, hi};
                } else if (key == "q_range") {
                    auto [lo, hi] = detail::parse_range(val);
                    t.q_range = {CoeffRole::Q, lo, hi};
                } else if (key == "invp_range") {
                    auto [lo, hi] = detail::parse_range(val);
                    t.invp_range = {CoeffRole::InvP, lo, hi};
                } else if (key == "w_range") {
                    auto [lo, hi] = detail::parse_range(val);
                    t.w_range = {CoeffRole::W, lo, hi};
                } else throw ConfigError("unknown key '" + key + "' in [model]");
            } else if (section == "train") {
                if (key == "lr") t.lr = std::stod(val);
                else if (key == "epochs") t.epochs = std::stoul(val);
                else if (key == "batch_size") t.batch_size = std::stoul(val);
                else if (key == "alpha") t.alpha = std::stod(val);
                else if (key == "loss") {
                    if (val == "hinge") t.loss = LossKind::Hinge;
                    else if (val == "cross-entropy") t.loss = LossKind::CrossEntropy;
                    else throw ConfigError("loss must be hinge or cross-entropy");
                } else if (key == "seed") t.seed = std::stoull(val);
                else if (key == "knots") t.solver.knots = std::stoul(val);
                else if (key == "tol_lambda") t.solver.tol_lambda = std::stod(val);
                else if (key == "tol_t") t.solver.tol_t = std::stod(val);
                else if (key == "rtol") t.solver.rtol = std::stod(val);
                else if (key == "atol") t.solver.atol = std::stod(val);
                else if (key == "max_steps") t.solver.max_steps = std::stoul(val);
                else if (key == "freeze_knot_positions")
                    t.solver.freeze_knot_positions = detail::parse_bool(val);
                else throw ConfigError("unknown key '" + key + "' in [train]");
            } else if (section == "data") {
                if (key == "label_column") fc.label_column = val;
                else throw ConfigError("unknown key '" + key + "' in [data]");
            } else {
                throw ConfigError("key '" + key + "' outside any section");
            }
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    // Validation.
    if (fc.train.alpha < 0.0) throw ConfigError("alpha must be >= 0");
    if (fc.train.epochs == 0) throw ConfigError("epochs must be >= 1");
    if (fc.train.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (fc.train.d == 0) throw ConfigError("d must be >= 1");
    if (fc.train.lr <= 0.0) throw ConfigError("lr must be > 0");
    if (fc.train.solver.tol_lambda <= 0.0 || fc.train.solver.tol_t <= 0.0 ||
        fc.train.solver.rtol <= 0.0 || fc.train.solver.atol <= 0.0)
        throw ConfigError("tolerances must be > 0");
    if (fc.train.solver.knots < 2) throw ConfigError("knots must be >= 2");
    return fc;
}

inline FileConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// Checkpoint: magic, text header describing shapes and the config snapshot,
// then raw little-endian float64 arrays in a fixed traversal order.
// ---------------------------------------------------------------------------

constexpr char kCheckpointMagic[8] = {'D', 'S', 'L', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    DslModel model;
    TrainConfig config;
    NormalizationStats normalization;
};

namespace detail {

inline void describe_net(std::string& h, const char* tag, const MlpParams& p) {
    h += std::string(tag) + "_dims = ";
    for (std::size_t i = 0; i < p.layer_dims.size(); ++i) {
        if (i) h += ',';
        h += std::to_string(p.layer_dims[i]);
    }
    h += '\n';
    h += std::string(tag) + "_activation = ";
    h += (p.activation == Activation::Tanh ? "tanh" : "leaky-relu");
    h += '\n';
    h += std::string(tag) + "_squash = ";
    h += (p.squash == Squash::None ? "none"
                                   : (p.squash == Squash::SigmoidRange ? "sigmoid" : "tanh"));
    h += '\n';
    if (p.squash != Squash::None)
        h += std::string(tag) + "_range = " + format_double(p.range_lo) + "," +
             format_double(p.range_hi) + "\n";
}

inline void blob_net(std::string& blob, const MlpParams& p) {
    auto push = [&](const Vector& v) {
        blob.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
    };
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        push(p.weights[l].data);
        push(p.biases[l]);
    }
}

struct BlobReader {
    const char* ptr;
    const char* end;
    void read(Vector& v) {
        const std::size_t bytes = v.size() * sizeof(double);
        if (ptr + bytes > end) throw IoError("checkpoint truncated");
        std::memcpy(v.data(), ptr, bytes);
        ptr += bytes;
    }
};

inline MlpParams net_from_header(const std::map<std::string, std::string>& kv,
                                 const std::string& tag) {
    MlpParams p;
    p.layer_dims = parse_dims(kv.at(tag + "_dims"));
    const std::string act = kv.at(tag + "_activation");
    p.activation = (act == "tanh") ? Activation::Tanh : Activation::LeakyRelu;
    const std::string sq = kv.at(tag + "_squash");
    p.squash = (sq == "none") ? Squash::None
                              : (sq == "sigmoid" ? Squash::SigmoidRange : Squash::TanhRange);
    if (p.squash != Squash::None) {
        auto [lo, hi] = parse_range(kv.at(tag + "_range"));
        p.range_lo = lo;
        p.range_hi = hi;
    }
    for (std::size_t l = 0; l + 1 < p.layer_dims.size(); ++l) {
        p.weights.emplace_back(p.layer_dims[l + 1], p.layer_dims[l], 0.0);
        p.biases.emplace_back(p.layer_dims[l + 1], 0.0);
    }
    return p;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    const DslModel& m = ck.model;
    const TrainConfig& t = ck.config;
    std::string h;
    h += "format_version = " + std::to_string(kCheckpointVersion) + "\n";
    h += "input_dim = " + std::to_string(m.input_dim) + "\n";
    h += "num_classes = " + std::to_string(m.num_classes) + "\n";
    h += "d = " + std::to_string(m.d) + "\n";
    h += std::string("ablation = ") + (m.ablation ? "true" : "false") + "\n";
    h += std::string("v_mode = ") + (m.v_net ? "mlp" : "constant") + "\n";
    h += std::string("head_bias = ") + (m.has_bias() ? "true" : "false") + "\n";
    detail::describe_net(h, "a", m.a_net);
    detail::describe_net(h, "p", m.invp_net);
    detail::describe_net(h, "q", m.q_net);
    detail::describe_net(h, "w", m.w_net);
    if (m.v_net) detail::describe_net(h, "v", *m.v_net);
    h += "normalization_dim = " + std::to_string(ck.normalization.min.size()) + "\n";
    // Config snapshot.
    h += "lr = " + format_double(t.lr) + "\n";
    h += "epochs = " + std::to_string(t.epochs) + "\n";
    h += "batch_size = " + std::to_string(t.batch_size) + "\n";
    h += "alpha = " + format_double(t.alpha) + "\n";
    h += std::string("loss = ") + (t.loss == LossKind::Hinge ? "hinge" : "cross-entropy") + "\n";
    h += "seed = " + std::to_string(t.seed) + "\n";
    h += "knots = " + std::to_string(t.solver.knots) + "\n";
    h += "tol_lambda = " + format_double(t.solver.tol_lambda) + "\n";
    h += "tol_t = " + format_double(t.solver.tol_t) + "\n";
    h += "rtol = " + format_double(t.solver.rtol) + "\n";
    h += "atol = " + format_double(t.solver.atol) + "\n";
    h += "max_steps = " + std::to_string(t.solver.max_steps) + "\n";
    h += std::string("freeze_knot_positions = ") +
         (t.solver.freeze_knot_positions ? "true" : "false") + "\n";

    std::string blob;
    detail::blob_net(blob, m.a_net);
    detail::blob_net(blob, m.invp_net);
    detail::blob_net(blob, m.q_net);
    detail::blob_net(blob, m.w_net);
    if (m.v_net) detail::blob_net(blob, *m.v_net);
    blob.append(reinterpret_cast<const char*>(m.head.data.data()),
                m.head.data.size() * sizeof(double));
    if (m.has_bias())
        blob.append(reinterpret_cast<const char*>(m.head_bias.data()),
                    m.head_bias.size() * sizeof(double));
    blob.append(reinterpret_cast<const char*>(ck.normalization.min.data()),
                ck.normalization.min.size() * sizeof(double));
    blob.append(reinterpret_cast<const char*>(ck.normalization.max.data()),
                ck.normalization.max.size() * sizeof(double));

    std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint32_t hlen = static_cast<std::uint32_t>(h.size());
    out.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out += h;
    out += blob;
    atomic_write_text(path, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();
    if (buf.size() < sizeof(kCheckpointMagic) + 4 ||
        std::memcmp(buf.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
        throw IoError(path + ": not a checkpoint file");
    std::uint32_t hlen;
    std::memcpy(&hlen, buf.data() + sizeof kCheckpointMagic, 4);
    const std::size_t hstart = sizeof(kCheckpointMagic) + 4;
    if (buf.size() < hstart + hlen) throw IoError(path + ": truncated header");

    std::map<std::string, std::string> kv;
    {
        std::stringstream hs(buf.substr(hstart, hlen));
        std::string line;
        while (std::getline(hs, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
        }
    }
    if (std::stoul(kv.at("format_version")) != kCheckpointVersion)
        throw IoError("unsupported checkpoint version");

    Checkpoint ck;
    DslModel& m = ck.model;
    m.input_dim = std::stoul(kv.at("input_dim"));
    m.num_classes = std::stoul(kv.at("num_classes"));
    m.d = std::stoul(kv.at("d"));
    m.ablation = detail::parse_bool(kv.at("ablation"));
    m.a_net = detail::net_from_header(kv, "a");
    m.invp_net = detail::net_from_header(kv, "p");
    m.q_net = detail::net_from_header(kv, "q");
    m.w_net = detail::net_from_header(kv, "w");
    if (kv.at("v_mode") == "mlp") m.v_net = detail::net_from_header(kv, "v");
    m.head = Matrix(m.num_classes, m.d);
    if (detail::parse_bool(kv.at("head_bias"))) m.head_bias.assign(m.num_classes, 0.0);

    TrainConfig& t = ck.config;
    t.d = m.d;
    t.ablation = m.ablation;
    t.lr = std::stod(kv.at("lr"));
    t.epochs = std::stoul(kv.at("epochs"));
    t.batch_size = std::stoul(kv.at("batch_size"));
    t.alpha = std::stod(kv.at("alpha"));
    t.loss = kv.at("loss") == "hinge" ? LossKind::Hinge : LossKind::CrossEntropy;
    t.seed = std::stoull(kv.at("seed"));
    t.solver.knots = std::stoul(kv.at("knots"));
    t.solver.tol_lambda = std::stod(kv.at("tol_lambda"));
    t.solver.tol_t = std::stod(kv.at("tol_t"));
    t.solver.rtol = std::stod(kv.at("rtol"));
    t.solver.atol = std::stod(kv.at("atol"));
    t.solver.max_steps = std::stoul(kv.at("max_steps"));
    t.solver.freeze_knot_positions = detail::parse_bool(kv.at("freeze_knot_positions"));

    const std::size_t norm_dim = std::stoul(kv.at("normalization_dim"));
    ck.normalization.min.assign(norm_dim, 0.0);
    ck.normalization.max.assign(norm_dim, 0.0);

    detail::BlobReader r{buf.data() + hstart + hlen, buf.data() + buf.size()};
    auto read_net = [&](MlpParams& p) {
        for (std::size_t l = 0; l < p.weights.size(); ++l) {
            r.read(p.weights[l].data);
            r.read(p.biases[l]);
        }
    };
    read_net(m.a_net);
    read_net(m.invp_net);
    read_net(m.q_net);
    read_net(m.w_net);
    if (m.v_net) read_net(*m.v_net);
    r.read(m.head.data);
    if (m.has_bias()) r.read(m.head_bias);
    r.read(ck.normalization.min);
    r.read(ck.normalization.max);
    if (r.ptr != r.end) throw IoError(path + ": trailing bytes");
    return ck;
}

inline void write_history_csv(const std::string& path, const std::vector<HistoryRow>& history) {
    std::string out = "epoch,train_loss,val_accuracy,skipped\n";
    for (const auto& h : history) {
        out += std::to_string(h.epoch) + ',' + format_double(h.train_loss) + ',' +
               format_double(h.val_accuracy) + ',' + std::to_string(h.skipped) + '\n';
    }
    atomic_write_text(path, out);
}

}  // namespace dsl
