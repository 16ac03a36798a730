#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "stopband/errors.hpp"

namespace stopband {

// Everything a run needs, resolvable from (in increasing precedence) built-in
// defaults, a key=value config file and command line flags. Key names match
// the long flag names without the leading dashes.
struct RunConfig {
    std::string model = "conv4-small";
    std::string dataset = "synthetic";
    std::string mode = "reparam";
    std::string data_dir;

    double prune_rate = 0.9;
    double lambda = 5.0;
    int crispness = 4;        // key "n"
    double t_init = 100.0;

    int epochs = 300;
    std::size_t batch_size = 128;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-5;
    double plateau_factor = 0.3;
    int plateau_patience = 10;
    int early_stop = 60;
    std::uint64_t seed = 1;

    bool augment = false;
    double val_split = 0.0;  // 0 = schedule on the test set

    int num_classes = 10;
    std::size_t synthetic_train = 2000;
    std::size_t synthetic_test = 400;
    int synthetic_size = 8;
    double synthetic_margin = 1.0;

    void validate() const {
        if (!(val_split >= 0 && val_split < 1))
            throw UsageError("val-split must lie in [0, 1)");
        if (dataset != "synthetic" && dataset != "cifar10")
            throw UsageError("dataset must be 'synthetic' or 'cifar10'");
        if (mode != "reparam" && mode != "plain")
            throw UsageError("mode must be 'reparam' or 'plain'");
        if (!(prune_rate >= 0 && prune_rate < 1))
            throw UsageError("prune-rate must lie in [0, 1)");
        if (crispness < 2 || crispness % 2 != 0)
            throw UsageError("n must be a positive even integer");
        if (!(t_init > 0)) throw UsageError("t-init must be positive");
        if (synthetic_size < 4 || synthetic_size % 4 != 0)
            throw UsageError("synthetic-size must be a positive multiple of 4");
    }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& val) {
    if (val == "true" || val == "1" || val == "on") return true;
    if (val == "false" || val == "0" || val == "off") return false;
    throw UsageError(key + ": cannot parse '" + val + "' as a boolean");
}

inline double parse_double(const std::string& key, const std::string& val) {
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(val, &pos);
    } catch (const std::exception&) {
        throw UsageError(key + ": cannot parse '" + val + "' as a number");
    }
    if (pos != val.size()) throw UsageError(key + ": trailing characters in '" + val + "'");
    return v;
}

inline long long parse_int(const std::string& key, const std::string& val) {
    std::size_t pos = 0;
    long long v = 0;
    try {
        v = std::stoll(val, &pos);
    } catch (const std::exception&) {
        throw UsageError(key + ": cannot parse '" + val + "' as an integer");
    }
    if (pos != val.size()) throw UsageError(key + ": trailing characters in '" + val + "'");
    return v;
}

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

} // namespace detail

// Applies one key=value setting. Unknown keys are an error: a typo in a
// config file must not silently fall back to a default.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& val) {
    using detail::parse_double;
    using detail::parse_int;
    if (key == "model") c.model = val;
    else if (key == "dataset") c.dataset = val;
    else if (key == "mode") c.mode = val;
    else if (key == "data-dir") c.data_dir = val;
    else if (key == "prune-rate") c.prune_rate = parse_double(key, val);
    else if (key == "lambda") c.lambda = parse_double(key, val);
    else if (key == "n") c.crispness = static_cast<int>(parse_int(key, val));
    else if (key == "t-init") c.t_init = parse_double(key, val);
    else if (key == "epochs") c.epochs = static_cast<int>(parse_int(key, val));
    else if (key == "batch-size") c.batch_size = static_cast<std::size_t>(parse_int(key, val));
    else if (key == "lr") c.lr = parse_double(key, val);
    else if (key == "momentum") c.momentum = parse_double(key, val);
    else if (key == "weight-decay") c.weight_decay = parse_double(key, val);
    else if (key == "plateau-factor") c.plateau_factor = parse_double(key, val);
    else if (key == "plateau-patience") c.plateau_patience = static_cast<int>(parse_int(key, val));
    else if (key == "early-stop") c.early_stop = static_cast<int>(parse_int(key, val));
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(key, val));
    else if (key == "augment") c.augment = detail::parse_bool(key, val);
    else if (key == "val-split") c.val_split = parse_double(key, val);
    else if (key == "num-classes") c.num_classes = static_cast<int>(parse_int(key, val));
    else if (key == "synthetic-train") c.synthetic_train = static_cast<std::size_t>(parse_int(key, val));
    else if (key == "synthetic-test") c.synthetic_test = static_cast<std::size_t>(parse_int(key, val));
    else if (key == "synthetic-size") c.synthetic_size = static_cast<int>(parse_int(key, val));
    else if (key == "synthetic-margin") c.synthetic_margin = parse_double(key, val);
    else throw UsageError("unknown configuration key '" + key + "'");
}

// key=value per line, blank lines and # comments allowed.
inline void load_config_file(const std::string& path, RunConfig& c) {
    std::ifstream f(path);
    if (!f) throw UsageError("cannot open config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
        apply_setting(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

// Canonical resolved form: fixed key order, full precision. What the run
// actually used, suitable for reproducing it.
inline std::string serialize_config(const RunConfig& c) {
    std::ostringstream os;
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    os << "model=" << c.model << "\n";
    os << "dataset=" << c.dataset << "\n";
    os << "mode=" << c.mode << "\n";
    os << "data-dir=" << c.data_dir << "\n";
    os << "prune-rate=" << num(c.prune_rate) << "\n";
    os << "lambda=" << num(c.lambda) << "\n";
    os << "n=" << c.crispness << "\n";
    os << "t-init=" << num(c.t_init) << "\n";
    os << "epochs=" << c.epochs << "\n";
    os << "batch-size=" << c.batch_size << "\n";
    os << "lr=" << num(c.lr) << "\n";
    os << "momentum=" << num(c.momentum) << "\n";
    os << "weight-decay=" << num(c.weight_decay) << "\n";
    os << "plateau-factor=" << num(c.plateau_factor) << "\n";
    os << "plateau-patience=" << c.plateau_patience << "\n";
    os << "early-stop=" << c.early_stop << "\n";
    os << "seed=" << c.seed << "\n";
    os << "augment=" << (c.augment ? "true" : "false") << "\n";
    os << "val-split=" << num(c.val_split) << "\n";
    os << "num-classes=" << c.num_classes << "\n";
    os << "synthetic-train=" << c.synthetic_train << "\n";
    os << "synthetic-test=" << c.synthetic_test << "\n";
    os << "synthetic-size=" << c.synthetic_size << "\n";
    os << "synthetic-margin=" << num(c.synthetic_margin) << "\n";
    return os.str();
}

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t config_fingerprint(const RunConfig& c) {
    return fnv1a64(serialize_config(c));
}

} // namespace stopband
