// Black-box checks of the command-line tool. Runs the binary given as
// argv[1] against scratch run directories and inspects exit codes and
// artifacts.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "stopband/config.hpp"
#include "stopband/pruning.hpp"

namespace fs = std::filesystem;

namespace {

#define REQUIRE(cond, msg)                                                       \
    do {                                                                         \
        if (!(cond)) {                                                           \
            std::cerr << "[FAIL] " << __FILE__ << ":" << __LINE__ << " " << msg  \
                      << "\n";                                                   \
            std::exit(1);                                                        \
        }                                                                        \
    } while (0)

std::string g_bin;
fs::path g_dir;

struct RunResult {
    int exit_code = -1;
    std::string output;
};

RunResult run(const std::string& args) {
    const std::string cmd = g_bin + " " + args + " 2>&1";
    FILE* p = ::popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr, "popen failed for: " << cmd);
    RunResult r;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
    const int status = ::pclose(p);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string tiny_flags(int seed) {
    std::ostringstream os;
    os << "--model mlp-toy --dataset synthetic --num-classes 4 --synthetic-size 4"
       << " --synthetic-train 120 --synthetic-test 60 --synthetic-margin 2"
       << " --epochs 2 --batch-size 32 --lr 0.05 --prune-rate 0.5 --seed " << seed;
    return os.str();
}

std::vector<char> file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good(), "cannot open " << p);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string file_text(const fs::path& p) {
    const auto b = file_bytes(p);
    return {b.begin(), b.end()};
}

bool contains(const std::string& hay, const std::string& needle) {
    return hay.find(needle) != std::string::npos;
}

void test_train_artifacts() {
    const fs::path out = g_dir / "run_a";
    const RunResult r = run("train " + tiny_flags(7) + " --out " + out.string());
    REQUIRE(r.exit_code == 0, "train failed: " << r.output);
    for (const char* f : {"resolved.cfg", "model.ckpt", "history.dat", "train_report.txt"})
        REQUIRE(fs::exists(out / f), "missing artifact " << f);
    REQUIRE(!fs::exists(out / ".lock"), "lockfile not released");

    const auto rep = stopband::PruneReport::load((out / "train_report.txt").string());
    REQUIRE(rep.method == "none", "train report method " << rep.method);
    REQUIRE(rep.weights_removed == 0, "train report removed " << rep.weights_removed);
    REQUIRE(rep.accuracy_before == rep.accuracy_after, "train report accuracy mismatch");
    std::cout << "[ok] train writes the full artifact set\n";
}

void test_config_round_trip() {
    const fs::path a = g_dir / "run_a";
    const fs::path b = g_dir / "run_b";
    const RunResult r =
        run("train --config " + (a / "resolved.cfg").string() + " --out " + b.string());
    REQUIRE(r.exit_code == 0, "config round trip failed: " << r.output);
    REQUIRE(file_bytes(a / "model.ckpt") == file_bytes(b / "model.ckpt"),
            "resolved config did not reproduce the checkpoint");
    REQUIRE(file_bytes(a / "history.dat") == file_bytes(b / "history.dat"),
            "resolved config did not reproduce the history");
    std::cout << "[ok] resolved.cfg reproduces a bit-identical run\n";
}

void test_flag_overrides_file() {
    const fs::path cfg = g_dir / "override.cfg";
    std::ofstream(cfg) << "lr=0.05\nepochs=2\n";
    const fs::path out = g_dir / "run_override";
    const RunResult r = run("train --config " + cfg.string() + " " + tiny_flags(7) +
                            " --lr 0.01 --out " + out.string());
    REQUIRE(r.exit_code == 0, "override run failed: " << r.output);
    REQUIRE(contains(file_text(out / "resolved.cfg"), "lr=0.01"),
            "flag did not override config file");
    std::cout << "[ok] flags override config-file values\n";
}

void test_lambda_zero_is_plain() {
    const fs::path out = g_dir / "run_plain";
    const RunResult r =
        run("train " + tiny_flags(7) + " --lambda 0 --out " + out.string());
    REQUIRE(r.exit_code == 0, "lambda 0 run failed: " << r.output);
    const std::string cfg = file_text(out / "resolved.cfg");
    REQUIRE(contains(cfg, "mode=plain"), "lambda=0 did not resolve to the plain path");
    std::cout << "[ok] --lambda 0 trains the plain network\n";
}

void test_usage_errors() {
    RunResult r = run("train --dataset cifar10 --data-dir " + (g_dir / "nodir").string() +
                      " --out " + (g_dir / "x1").string());
    REQUIRE(r.exit_code == 2, "missing dataset dir gave exit " << r.exit_code);

    const fs::path cfg = g_dir / "bad.cfg";
    std::ofstream(cfg) << "not-a-key=3\n";
    r = run("train --config " + cfg.string() + " --out " + (g_dir / "x2").string());
    REQUIRE(r.exit_code == 2, "unknown config key gave exit " << r.exit_code);
    REQUIRE(contains(r.output, "not-a-key"), "diagnostic does not name the bad key");

    std::ofstream(cfg) << "lr=0.1x\n";
    r = run("train --config " + cfg.string() + " --out " + (g_dir / "x3").string());
    REQUIRE(r.exit_code == 2, "malformed config value gave exit " << r.exit_code);

    r = run("train --no-such-flag");
    REQUIRE(r.exit_code == 2, "unknown flag gave exit " << r.exit_code);

    r = run("--help");
    REQUIRE(r.exit_code == 0, "--help gave exit " << r.exit_code);
    std::cout << "[ok] usage errors exit with code 2\n";
}

void test_format_errors() {
    const fs::path bad = g_dir / "run_a" / "fake.ckpt";
    std::ofstream(bad) << "this is not a checkpoint at all";
    const RunResult r = run("eval " + bad.string());
    REQUIRE(r.exit_code == 3, "corrupt checkpoint gave exit " << r.exit_code);
    fs::remove(bad);
    std::cout << "[ok] malformed files exit with code 3\n";
}

void test_prune_and_eval() {
    const fs::path ckpt = g_dir / "run_a" / "model.ckpt";
    RunResult r = run("prune " + ckpt.string() + " --method ours-effective --rate 0.5");
    REQUIRE(r.exit_code == 0, "effective prune failed: " << r.output);
    const fs::path rep_path = g_dir / "run_a" / "prune_effective_50.txt";
    REQUIRE(fs::exists(rep_path), "missing prune report");
    REQUIRE(fs::exists(g_dir / "run_a" / "pruned_effective_50.ckpt"), "missing pruned checkpoint");
    const auto rep = stopband::PruneReport::load(rep_path.string());
    REQUIRE(rep.method == "effective", "report method " << rep.method);
    REQUIRE(std::abs(rep.achieved_sparsity - 0.5) < 1e-3,
            "sparsity " << rep.achieved_sparsity << " for rate 0.5");

    r = run("prune " + ckpt.string() + " --method ours-effective --finetune");
    REQUIRE(r.exit_code == 2, "--finetune with ours-effective gave exit " << r.exit_code);

    r = run("prune " + ckpt.string() + " --method nonsense");
    REQUIRE(r.exit_code == 2, "bad method gave exit " << r.exit_code);

    r = run("prune " + ckpt.string() + " --method magnitude --rate 0");
    REQUIRE(r.exit_code == 0, "rate 0 prune failed: " << r.output);
    const auto rep0 =
        stopband::PruneReport::load((g_dir / "run_a" / "prune_magnitude_0.txt").string());
    REQUIRE(rep0.weights_removed == 0, "rate 0 removed " << rep0.weights_removed);
    REQUIRE(rep0.accuracy_before == rep0.accuracy_after, "rate 0 changed accuracy");

    r = run("prune " + ckpt.string() + " --method magnitude --rate 0.5 --finetune"
            " --finetune-epochs 2");
    REQUIRE(r.exit_code == 0, "finetune prune failed: " << r.output);
    REQUIRE(fs::exists(g_dir / "run_a" / "prune_magnitude_50_ft.txt"), "missing finetune report");

    r = run("eval " + ckpt.string());
    REQUIRE(r.exit_code == 0, "eval failed: " << r.output);
    REQUIRE(contains(r.output, "accuracy="), "eval output lacks accuracy: " << r.output);
    std::cout << "[ok] prune and eval behave per contract\n";
}

void test_lockfile() {
    const fs::path out = g_dir / "run_a";
    std::ofstream(out / ".lock") << "";
    const RunResult r =
        run("prune " + (out / "model.ckpt").string() + " --method magnitude --rate 0.1");
    REQUIRE(r.exit_code == 2, "locked dir gave exit " << r.exit_code);
    REQUIRE(contains(r.output, "lock"), "diagnostic does not mention the lock");
    fs::remove(out / ".lock");
    std::cout << "[ok] run directories are locked against concurrent writes\n";
}

void test_report() {
    RunResult r = run("report " + (g_dir / "run_a").string());
    REQUIRE(r.exit_code == 0, "report failed: " << r.output);
    REQUIRE(contains(r.output, "prune_effective_50"), "table lacks the prune row");
    REQUIRE(contains(r.output, "effective"), "table lacks the method column");

    const fs::path curve = g_dir / "run_a" / "h_curve.dat";
    REQUIRE(fs::exists(curve), "missing h_curve.dat");
    std::ifstream f(curve);
    std::string line;
    bool found = false;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        double x, h1;
        is >> x >> h1;
        if (x == 1.0) {
            REQUIRE(std::abs(h1 - 0.3775) < 5e-4, "h(1; t=1, n=4) = " << h1);
            found = true;
        }
    }
    REQUIRE(found, "curve data has no sample at x = 1");
    REQUIRE(fs::exists(g_dir / "run_a" / "h_curve.svg"), "missing h_curve.svg");
    REQUIRE(fs::exists(g_dir / "run_a" / "training_curve.svg"), "missing training curve");

    const fs::path empty = g_dir / "empty";
    fs::create_directories(empty);
    r = run("report " + empty.string());
    REQUIRE(r.exit_code == 2, "empty report dir gave exit " << r.exit_code);
    std::cout << "[ok] report writes curves and the consolidated table\n";
}

void test_sweep() {
    const fs::path out = g_dir / "sweep";
    const RunResult r =
        run("sweep " + tiny_flags(9) + " --rates 0.5,0.7 --out " + out.string());
    REQUIRE(r.exit_code == 0, "sweep failed: " << r.output);
    for (const char* sub : {"p50", "p70"}) {
        REQUIRE(fs::exists(out / sub / "model.ckpt"), "sweep missing " << sub << " checkpoint");
        REQUIRE(fs::exists(out / sub / "resolved.cfg"), "sweep missing " << sub << " config");
    }
    REQUIRE(fs::exists(out / "p50" / "prune_effective_50.txt"), "sweep missing p50 report");
    REQUIRE(fs::exists(out / "p70" / "prune_effective_70.txt"), "sweep missing p70 report");
    REQUIRE(contains(r.output, "p50/prune_effective_50"), "sweep table lacks p50 row");
    REQUIRE(contains(r.output, "p70/prune_effective_70"), "sweep table lacks p70 row");
    std::cout << "[ok] sweep trains and prunes per rate\n";
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: cli_tests <path-to-cli-binary>\n";
        return 2;
    }
    g_bin = argv[1];
    g_dir = fs::temp_directory_path() / "stopband_cli_tests";
    fs::remove_all(g_dir);
    fs::create_directories(g_dir);

    test_train_artifacts();
    test_config_round_trip();
    test_flag_overrides_file();
    test_lambda_zero_is_plain();
    test_usage_errors();
    test_format_errors();
    test_prune_and_eval();
    test_lockfile();
    test_report();
    test_sweep();

    fs::remove_all(g_dir);
    std::cout << "cli_tests: all scenarios passed\n";
    return 0;
}
