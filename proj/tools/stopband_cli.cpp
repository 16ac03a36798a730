#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "stopband/stopband.hpp"

namespace fs = std::filesystem;
using namespace stopband;

namespace {

// Exit codes: 0 success, 1 runtime/divergence, 2 usage/config, 3 data format.
enum ExitCode { kOk = 0, kRuntime = 1, kUsage = 2, kFormat = 3 };

// ---------------------------------------------------------------------------
// run directory locking

class Lockfile {
public:
    explicit Lockfile(const fs::path& dir) : path_(dir / ".lock") {
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw UsageError("run directory " + dir.string() +
                             " is locked; another command is writing to it "
                             "(delete " + path_.string() + " if stale)");
    }
    ~Lockfile() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }
    Lockfile(const Lockfile&) = delete;
    Lockfile& operator=(const Lockfile&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

// ---------------------------------------------------------------------------
// configuration resolution: defaults, then config file, then flags

struct Overrides {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> kv;
};

RunConfig resolve(const Overrides& ov) {
    RunConfig cfg;
    if (!ov.config_path.empty()) load_config_file(ov.config_path, cfg);
    for (const auto& [key, val] : ov.kv) apply_setting(cfg, key, val);
    if (cfg.lambda == 0) cfg.mode = "plain";  // no budget term means no gating
    cfg.validate();
    return cfg;
}

// Registers one --key flag that feeds apply_setting, so flag parsing and
// config-file parsing share a single code path.
void add_config_option(CLI::App* cmd, Overrides& ov, const std::string& key,
                       const std::string& help) {
    cmd->add_option_function<std::string>(
          "--" + key, [&ov, key](const std::string& v) { ov.kv.emplace_back(key, v); }, help)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
}

void add_config_options(CLI::App* cmd, Overrides& ov) {
    cmd->add_option("--config", ov.config_path, "key=value config file; flags override it");
    add_config_option(cmd, ov, "model", "mlp-toy | linear-toy | conv4 | conv4-small | vgg19 | resnet18");
    add_config_option(cmd, ov, "dataset", "synthetic | cifar10");
    add_config_option(cmd, ov, "mode", "reparam | plain");
    add_config_option(cmd, ov, "data-dir", "directory with the CIFAR-10 binary batches");
    add_config_option(cmd, ov, "prune-rate", "target fraction of weights to remove");
    add_config_option(cmd, ov, "lambda", "budget loss weight; 0 trains the plain network");
    add_config_option(cmd, ov, "n", "gate crispness exponent (even)");
    add_config_option(cmd, ov, "t-init", "initial per-layer temperature");
    add_config_option(cmd, ov, "epochs", "maximum training epochs");
    add_config_option(cmd, ov, "batch-size", "minibatch size");
    add_config_option(cmd, ov, "lr", "initial learning rate");
    add_config_option(cmd, ov, "momentum", "SGD momentum");
    add_config_option(cmd, ov, "weight-decay", "L2 decay on weights");
    add_config_option(cmd, ov, "plateau-factor", "learning-rate decay factor on plateau");
    add_config_option(cmd, ov, "plateau-patience", "epochs without improvement before decay");
    add_config_option(cmd, ov, "early-stop", "epochs without improvement before stopping");
    add_config_option(cmd, ov, "seed", "run seed; fixes init, batching and synthetic data");
    add_config_option(cmd, ov, "val-split", "fraction of train data held out for scheduling");
    add_config_option(cmd, ov, "num-classes", "synthetic class count");
    add_config_option(cmd, ov, "synthetic-train", "synthetic train examples");
    add_config_option(cmd, ov, "synthetic-test", "synthetic test examples");
    add_config_option(cmd, ov, "synthetic-size", "synthetic image side length (multiple of 4)");
    add_config_option(cmd, ov, "synthetic-margin", "synthetic class separation");
    cmd->add_flag_callback(
        "--augment", [&ov] { ov.kv.emplace_back("augment", "true"); },
        "random crop and flip on training batches");
}

// ---------------------------------------------------------------------------
// data plumbing

Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx) {
    Dataset out;
    out.sample_shape = d.sample_shape;
    const std::size_t elems = d.sample_elems();
    out.images.reserve(idx.size() * elems);
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) {
        const double* base = d.images.data() + i * elems;
        out.images.insert(out.images.end(), base, base + elems);
        out.labels.push_back(d.labels[i]);
    }
    return out;
}

struct LoadedData {
    Dataset train, test;
    Shape input_shape;
    int num_classes = 0;
};

LoadedData load_data(const RunConfig& cfg) {
    LoadedData out;
    if (cfg.dataset == "cifar10") {
        std::string dir = cfg.data_dir;
        if (dir.empty())
            if (const char* env = std::getenv("STOPBAND_DATA_DIR")) dir = env;
        if (dir.empty())
            throw UsageError("cifar10 needs --data-dir or STOPBAND_DATA_DIR");
        if (!fs::is_directory(dir))
            throw UsageError("dataset directory does not exist: " + dir);
        std::tie(out.train, out.test) = load_cifar10(dir);
        out.input_shape = {3, 32, 32};
        out.num_classes = 10;
    } else {
        SyntheticSpec spec;
        const auto side = static_cast<std::size_t>(cfg.synthetic_size);
        spec.sample_shape = {3, side, side};
        spec.num_classes = cfg.num_classes;
        spec.train_count = cfg.synthetic_train;
        spec.test_count = cfg.synthetic_test;
        spec.margin = cfg.synthetic_margin;
        spec.seed = cfg.seed;
        std::tie(out.train, out.test) = synthetic_dataset(spec);
        out.input_shape = spec.sample_shape;
        out.num_classes = cfg.num_classes;
    }
    const ChannelStats stats = channel_stats(out.train);
    normalize(out.train, stats);
    normalize(out.test, stats);
    return out;
}

Model<double> make_model(const RunConfig& cfg, const Shape& input_shape, int num_classes) {
    ReparamConfig rc;
    rc.crispness = cfg.crispness;
    rc.t_init = cfg.t_init;
    return build<double>(cfg.model, num_classes, input_shape, rc, cfg.seed,
                         cfg.mode == "reparam");
}

TrainConfig to_train_config(const RunConfig& cfg) {
    TrainConfig tc;
    tc.mode = cfg.mode == "reparam" ? TrainMode::Reparam : TrainMode::Plain;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.lr = cfg.lr;
    tc.momentum = cfg.momentum;
    tc.weight_decay = cfg.weight_decay;
    tc.plateau_factor = cfg.plateau_factor;
    tc.plateau_patience = cfg.plateau_patience;
    tc.early_stop_patience = cfg.early_stop;
    tc.lambda = cfg.lambda;
    tc.prune_rate = cfg.prune_rate;
    tc.seed = cfg.seed;
    tc.augment = cfg.augment;
    return tc;
}

RunConfig config_next_to(const fs::path& checkpoint, const Overrides& ov) {
    Overrides merged = ov;
    if (merged.config_path.empty()) {
        const fs::path sibling = checkpoint.parent_path() / "resolved.cfg";
        if (!fs::exists(sibling))
            throw UsageError("no resolved.cfg next to " + checkpoint.string() +
                             "; pass --config");
        merged.config_path = sibling.string();
    }
    return resolve(merged);
}

// ---------------------------------------------------------------------------
// reporting helpers

std::string fmt(double v, const char* spec = "%.4g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

std::string rate_tag(double rate) { return fmt(rate * 100, "%g"); }

// Minimal standalone line plot. Convenience output only; the .dat files are
// the authoritative record.
void write_svg(const std::string& path, const std::string& title,
               const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series) {
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& [name, pts] : series)
        for (const auto& [x, y] : pts) {
            xmin = std::min(xmin, x), xmax = std::max(xmax, x);
            ymin = std::min(ymin, y), ymax = std::max(ymax, y);
        }
    if (xmax <= xmin) xmax = xmin + 1;
    if (ymax <= ymin) ymax = ymin + 1;
    const double W = 640, H = 420, L = 70, R = 20, T = 40, B = 50;
    auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};

    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot write " + path);
    f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H
      << "' viewBox='0 0 " << W << " " << H << "'>\n"
      << "<rect width='100%' height='100%' fill='white'/>\n"
      << "<text x='" << W / 2 << "' y='24' text-anchor='middle' font-family='sans-serif' "
         "font-size='15'>" << title << "</text>\n"
      << "<line x1='" << L << "' y1='" << H - B << "' x2='" << W - R << "' y2='" << H - B
      << "' stroke='black'/>\n"
      << "<line x1='" << L << "' y1='" << T << "' x2='" << L << "' y2='" << H - B
      << "' stroke='black'/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double x = xmin + (xmax - xmin) * i / 4;
        const double y = ymin + (ymax - ymin) * i / 4;
        f << "<text x='" << px(x) << "' y='" << H - B + 18
          << "' text-anchor='middle' font-family='sans-serif' font-size='11'>" << fmt(x)
          << "</text>\n"
          << "<text x='" << L - 8 << "' y='" << py(y) + 4
          << "' text-anchor='end' font-family='sans-serif' font-size='11'>" << fmt(y)
          << "</text>\n";
    }
    std::size_t si = 0;
    for (const auto& [name, pts] : series) {
        const char* color = colors[si % 4];
        f << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
        for (const auto& [x, y] : pts) f << px(x) << "," << py(y) << " ";
        f << "'/>\n"
          << "<text x='" << W - R - 8 << "' y='" << T + 16 + 16 * static_cast<double>(si)
          << "' text-anchor='end' font-family='sans-serif' font-size='12' fill='" << color
          << "'>" << name << "</text>\n";
        ++si;
    }
    f << "</svg>\n";
}

std::vector<EpochStats> read_history(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open " + path);
    std::vector<EpochStats> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        EpochStats e;
        if (!(is >> e.epoch >> e.lr >> e.task_loss >> e.budget_loss >> e.total_loss >>
              e.cost_fraction >> e.test_accuracy))
            throw FormatError(path + ": malformed history line: " + line);
        rows.push_back(e);
    }
    return rows;
}

PruneReport make_train_report(const RunConfig& cfg, Model<double>& m, double test_acc) {
    PruneReport rep;
    rep.model = cfg.model;
    rep.method = "none";
    rep.prune_rate = cfg.mode == "reparam" ? cfg.prune_rate : 0.0;
    rep.achieved_sparsity = sparsity(m);
    rep.surrogate_fraction =
        surrogate_cost_value(m) / static_cast<double>(count_prunable(m));
    rep.weights_total = count_prunable(m);
    rep.weights_removed = 0;
    rep.accuracy_before = test_acc;
    rep.accuracy_after = test_acc;
    return rep;
}

// ---------------------------------------------------------------------------
// commands

int cmd_train(const Overrides& ov, const std::string& out_dir) {
    const RunConfig cfg = resolve(ov);
    LoadedData data = load_data(cfg);

    fs::create_directories(out_dir);
    Lockfile lock(out_dir);
    {
        std::ofstream f(fs::path(out_dir) / "resolved.cfg", std::ios::trunc);
        f << serialize_config(cfg);
    }

    Dataset* sched = &data.test;
    Dataset train_split, val_split;
    if (cfg.val_split > 0) {
        std::vector<std::size_t> idx(data.train.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        Rng rng(Rng::mix(cfg.seed, 0x76616cull));  // validation split stream
        rng.shuffle(idx);
        const auto nv = std::max<std::size_t>(
            1, static_cast<std::size_t>(cfg.val_split * static_cast<double>(idx.size())));
        val_split = subset(data.train, {idx.begin(), idx.begin() + static_cast<long>(nv)});
        train_split = subset(data.train, {idx.begin() + static_cast<long>(nv), idx.end()});
        data.train = std::move(train_split);
        sched = &val_split;
    }

    Model<double> m = make_model(cfg, data.input_shape, data.num_classes);
    auto res = train(m, data.train, *sched, to_train_config(cfg), &std::cout);
    const double test_acc = evaluate(m, data.test);

    CheckpointMeta meta;
    meta.model = cfg.model;
    meta.num_classes = data.num_classes;
    meta.input_shape = data.input_shape;
    meta.crispness = cfg.crispness;
    meta.t_init = cfg.t_init;
    meta.reparam = cfg.mode == "reparam";
    meta.epoch = res.best_epoch;
    meta.config_fingerprint = config_fingerprint(cfg);
    save_checkpoint((fs::path(out_dir) / "model.ckpt").string(), m, meta);
    res.history.save((fs::path(out_dir) / "history.dat").string());

    const PruneReport rep = make_train_report(cfg, m, test_acc);
    rep.save((fs::path(out_dir) / "train_report.txt").string());

    std::cout << "trained " << cfg.model << " (" << cfg.mode << "): best epoch "
              << res.best_epoch << ", test accuracy " << fmt(test_acc, "%.2f")
              << "%, surrogate fraction " << fmt(rep.surrogate_fraction) << "\n"
              << "artifacts in " << out_dir << "\n";
    return kOk;
}

int cmd_prune(const std::string& ckpt, const Overrides& ov, double rate_flag,
              bool rate_given, const std::string& method_flag, bool finetune,
              int finetune_epochs, double finetune_lr) {
    if (method_flag != "ours-effective" && method_flag != "magnitude")
        throw UsageError("--method must be ours-effective or magnitude");
    if (finetune && method_flag != "magnitude")
        throw UsageError("--finetune applies to magnitude pruning only; "
                         "effective pruning needs no fine-tuning");
    if (!fs::exists(ckpt)) throw UsageError("checkpoint does not exist: " + ckpt);

    const RunConfig cfg = config_next_to(ckpt, ov);
    const double rate = rate_given ? rate_flag : cfg.prune_rate;
    if (!(rate >= 0 && rate < 1)) throw UsageError("--rate must lie in [0, 1)");

    LoadedData data = load_data(cfg);
    Model<double> m = make_model(cfg, data.input_shape, data.num_classes);
    CheckpointMeta meta = load_checkpoint(ckpt, m);
    m.reparam = meta.reparam;

    const fs::path out_dir = fs::path(ckpt).parent_path();
    Lockfile lock(out_dir);

    PruneReport rep;
    rep.model = meta.model;
    rep.method = method_flag == "magnitude" ? "magnitude" : "effective";
    rep.prune_rate = rate;
    rep.weights_total = count_prunable(m);
    rep.accuracy_before = evaluate(m, data.test);

    if (rate > 0)
        rep.weights_removed = method_flag == "magnitude" ? magnitude_prune(m, rate)
                                                         : effective_prune(m, rate);
    if (finetune && rate > 0) {
        TrainConfig tc = to_train_config(cfg);
        tc.mode = TrainMode::Finetune;
        tc.epochs = finetune_epochs;
        tc.lr = finetune_lr;
        tc.augment = false;
        train(m, data.train, data.test, tc, &std::cout);
    }

    rep.achieved_sparsity = sparsity(m);
    rep.surrogate_fraction =
        surrogate_cost_value(m) / static_cast<double>(rep.weights_total);
    rep.accuracy_after = evaluate(m, data.test);

    std::string stem = "prune_" + rep.method + "_" + rate_tag(rate);
    if (finetune) stem += "_ft";
    meta.epoch += finetune ? finetune_epochs : 0;
    save_checkpoint((out_dir / ("pruned_" + stem.substr(6) + ".ckpt")).string(), m, meta);
    rep.save((out_dir / (stem + ".txt")).string());

    std::cout << rep.method << " pruning at " << fmt(rate * 100, "%g") << "%: accuracy "
              << fmt(rep.accuracy_before, "%.2f") << "% -> " << fmt(rep.accuracy_after, "%.2f")
              << "% (drop " << fmt(rep.accuracy_drop(), "%.2f") << "), kept l0 fraction "
              << fmt(1 - rep.achieved_sparsity) << "\n";
    return kOk;
}

int cmd_eval(const std::string& ckpt, const Overrides& ov) {
    if (!fs::exists(ckpt)) throw UsageError("checkpoint does not exist: " + ckpt);
    const RunConfig cfg = config_next_to(ckpt, ov);
    LoadedData data = load_data(cfg);
    Model<double> m = make_model(cfg, data.input_shape, data.num_classes);
    const CheckpointMeta meta = load_checkpoint(ckpt, m);
    m.reparam = meta.reparam;
    std::cout << "model=" << meta.model << " epoch=" << meta.epoch
              << " accuracy=" << fmt(evaluate(m, data.test), "%.4f")
              << " sparsity=" << fmt(sparsity(m), "%.6g") << " surrogate_fraction="
              << fmt(surrogate_cost_value(m) / static_cast<double>(count_prunable(m)), "%.6g")
              << "\n";
    return kOk;
}

void collect_reports(const fs::path& dir, const std::string& label,
                     std::vector<std::pair<std::string, PruneReport>>& out) {
    if (fs::exists(dir / "train_report.txt"))
        out.emplace_back(label + "train_report", PruneReport::load((dir / "train_report.txt").string()));
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename().string().rfind("prune_", 0) == 0 &&
            e.path().extension() == ".txt")
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files)
        out.emplace_back(label + p.stem().string(), PruneReport::load(p.string()));
}

int cmd_report(const std::string& run_dir) {
    if (!fs::is_directory(run_dir)) throw UsageError("not a directory: " + run_dir);

    std::vector<std::pair<std::string, PruneReport>> reports;
    std::vector<std::pair<std::string, fs::path>> histories;
    collect_reports(run_dir, "", reports);
    if (fs::exists(fs::path(run_dir) / "history.dat"))
        histories.emplace_back("", fs::path(run_dir) / "history.dat");
    std::vector<fs::path> subdirs;
    for (const auto& e : fs::directory_iterator(run_dir))
        if (e.is_directory() && fs::exists(e.path() / "resolved.cfg")) subdirs.push_back(e.path());
    std::sort(subdirs.begin(), subdirs.end());
    for (const auto& sub : subdirs) {
        collect_reports(sub, sub.filename().string() + "/", reports);
        if (fs::exists(sub / "history.dat"))
            histories.emplace_back(sub.filename().string(), sub / "history.dat");
    }
    if (reports.empty() && histories.empty())
        throw UsageError("no run artifacts under " + run_dir);

    std::cout << "# " << run_dir << "\n\ntrained models\n";
    for (const auto& [label, r] : reports)
        if (r.method == "none")
            std::cout << "  " << (label.empty() ? std::string("train_report") : label)
                      << ": " << r.model << ", accuracy " << fmt(r.accuracy_after, "%.2f")
                      << "%, surrogate fraction " << fmt(r.surrogate_fraction) << "\n";

    std::cout << "\npruning results\n";
    char line[256];
    std::snprintf(line, sizeof line, "  %-32s %-10s %6s %9s %9s %7s %9s %10s\n", "run",
                  "method", "rate", "acc_pre", "acc_post", "drop", "kept_l0", "surrogate");
    std::cout << line;
    for (const auto& [label, r] : reports) {
        if (r.method == "none") continue;
        std::snprintf(line, sizeof line,
                      "  %-32s %-10s %6.3g %8.2f%% %8.2f%% %7.2f %9.4f %10.4f\n",
                      label.c_str(), r.method.c_str(), r.prune_rate, r.accuracy_before,
                      r.accuracy_after, r.accuracy_drop(), 1 - r.achieved_sparsity,
                      r.surrogate_fraction);
        std::cout << line;
    }

    // gate shape data: x from -3 to 3 in centi-steps so x = 1 lands exactly on
    // a sample; h(1) with t = 1, n = 4 is 0.37754...
    const fs::path curve = fs::path(run_dir) / "h_curve.dat";
    {
        std::ofstream f(curve, std::ios::trunc);
        if (!f) throw FormatError("cannot write " + curve.string());
        f << "# x  h(x;t=1,n=4)  h(x;t=10,n=4)  h(x;t=100,n=4)\n";
        char row[160];
        for (int i = 0; i <= 600; ++i) {
            const double x = i / 100.0 - 3.0;
            std::snprintf(row, sizeof row, "%.17g %.17g %.17g %.17g\n", x, gate(x, 1.0, 4),
                          gate(x, 10.0, 4), gate(x, 100.0, 4));
            f << row;
        }
    }
    std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> gate_series(3);
    gate_series[0].first = "t=1";
    gate_series[1].first = "t=10";
    gate_series[2].first = "t=100";
    for (int i = 0; i <= 600; ++i) {
        const double x = i / 100.0 - 3.0;
        gate_series[0].second.emplace_back(x, gate(x, 1.0, 4));
        gate_series[1].second.emplace_back(x, gate(x, 10.0, 4));
        gate_series[2].second.emplace_back(x, gate(x, 100.0, 4));
    }
    write_svg((fs::path(run_dir) / "h_curve.svg").string(), "gate response, n=4", gate_series);

    for (const auto& [label, path] : histories) {
        const auto rows = read_history(path.string());
        if (rows.empty()) continue;
        std::vector<std::pair<double, double>> acc, cost;
        for (const auto& e : rows) {
            acc.emplace_back(e.epoch, e.test_accuracy);
            cost.emplace_back(e.epoch, e.cost_fraction);
        }
        const std::string prefix = label.empty() ? "" : label + "_";
        write_svg((fs::path(run_dir) / (prefix + "training_curve.svg")).string(),
                  label.empty() ? "test accuracy by epoch" : label + ": test accuracy by epoch",
                  {{"accuracy %", acc}});
        write_svg((fs::path(run_dir) / (prefix + "budget_curve.svg")).string(),
                  label.empty() ? "surrogate cost fraction by epoch"
                                : label + ": surrogate cost fraction by epoch",
                  {{"C/C_initial", cost}});
    }
    std::cout << "\nwrote h_curve.dat, h_curve.svg and per-run training curves to "
              << run_dir << "\n";
    return kOk;
}

int cmd_sweep(const Overrides& ov, const std::string& out_dir, const std::string& rates_csv) {
    std::vector<double> rates;
    std::stringstream ss(rates_csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!detail::trim(item).empty())
            rates.push_back(detail::parse_double("rates", detail::trim(item)));
    if (rates.empty()) throw UsageError("--rates: no rates given");
    for (double p : rates)
        if (!(p > 0 && p < 1)) throw UsageError("sweep rates must lie in (0, 1)");

    fs::create_directories(out_dir);
    for (double p : rates) {
        Overrides o = ov;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", p);
        o.kv.emplace_back("prune-rate", buf);
        const fs::path sub = fs::path(out_dir) / ("p" + rate_tag(p));
        std::cout << "== prune rate " << fmt(p, "%g") << " -> " << sub.string() << "\n";
        const int rc = cmd_train(o, sub.string());
        if (rc != kOk) return rc;
        const int rp = cmd_prune((sub / "model.ckpt").string(), o, p, true, "ours-effective",
                                 false, 0, 0);
        if (rp != kOk) return rp;
    }
    return cmd_report(out_dir);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"train-and-prune engine for stopband weight reparametrization"};
    app.require_subcommand(1);

    Overrides train_ov;
    std::string train_out = "run";
    CLI::App* train_cmd = app.add_subcommand("train", "train a model and write run artifacts");
    add_config_options(train_cmd, train_ov);
    train_cmd->add_option("--out", train_out, "run directory for artifacts");

    std::string prune_ckpt, prune_method = "ours-effective";
    double prune_rate = 0;
    bool prune_finetune = false;
    int finetune_epochs = 20;
    double finetune_lr = 0.01;
    Overrides prune_ov;
    CLI::App* prune_cmd = app.add_subcommand("prune", "prune a trained checkpoint");
    prune_cmd->add_option("checkpoint", prune_ckpt, "checkpoint to prune")->required();
    CLI::Option* rate_opt =
        prune_cmd->add_option("--rate", prune_rate, "fraction to remove; defaults to the run's prune-rate");
    prune_cmd->add_option("--method", prune_method, "ours-effective | magnitude");
    prune_cmd->add_flag("--finetune", prune_finetune, "fine-tune under the mask (magnitude only)");
    prune_cmd->add_option("--finetune-epochs", finetune_epochs, "fine-tuning epochs");
    prune_cmd->add_option("--finetune-lr", finetune_lr, "fine-tuning learning rate");
    prune_cmd->add_option("--config", prune_ov.config_path, "config file; defaults to sibling resolved.cfg");
    prune_cmd->add_option_function<std::string>(
        "--data-dir", [&prune_ov](const std::string& v) { prune_ov.kv.emplace_back("data-dir", v); },
        "override the dataset directory");

    std::string eval_ckpt;
    Overrides eval_ov;
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on its test split");
    eval_cmd->add_option("checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
    eval_cmd->add_option("--config", eval_ov.config_path, "config file; defaults to sibling resolved.cfg");
    eval_cmd->add_option_function<std::string>(
        "--data-dir", [&eval_ov](const std::string& v) { eval_ov.kv.emplace_back("data-dir", v); },
        "override the dataset directory");

    std::string report_dir;
    CLI::App* report_cmd = app.add_subcommand("report", "summarize run artifacts and write plots");
    report_cmd->add_option("run_dir", report_dir, "run or sweep directory")->required();

    Overrides sweep_ov;
    std::string sweep_out = "sweep";
    std::string sweep_rates = "0.90,0.95,0.97,0.99";
    CLI::App* sweep_cmd =
        app.add_subcommand("sweep", "train and effective-prune across prune rates");
    add_config_options(sweep_cmd, sweep_ov);
    sweep_cmd->add_option("--out", sweep_out, "sweep directory");
    sweep_cmd->add_option("--rates", sweep_rates, "comma-separated prune rates");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(train_ov, train_out);
        if (prune_cmd->parsed())
            return cmd_prune(prune_ckpt, prune_ov, prune_rate, rate_opt->count() > 0,
                             prune_method, prune_finetune, finetune_epochs, finetune_lr);
        if (eval_cmd->parsed()) return cmd_eval(eval_ckpt, eval_ov);
        if (report_cmd->parsed()) return cmd_report(report_dir);
        if (sweep_cmd->parsed()) return cmd_sweep(sweep_ov, sweep_out, sweep_rates);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFormat;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kUsage;
}
