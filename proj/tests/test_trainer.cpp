#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "stopband/data.hpp"
#include "stopband/model.hpp"
#include "stopband/trainer.hpp"
#include "test_helpers.hpp"

using namespace stopband;
using testutil::close;

namespace {

std::pair<Dataset, Dataset> tiny_data(int classes = 4, double margin = 2.0,
                                      std::size_t train = 160, std::size_t test = 80) {
    SyntheticSpec spec;
    spec.sample_shape = {2, 4, 4};
    spec.num_classes = classes;
    spec.train_count = train;
    spec.test_count = test;
    spec.margin = margin;
    spec.seed = 11;
    auto [tr, te] = synthetic_dataset(spec);
    const ChannelStats stats = channel_stats(tr);
    normalize(tr, stats);
    normalize(te, stats);
    return {std::move(tr), std::move(te)};
}

} // namespace

TEST_CASE("plateau scheduler decays by 0.3 after ten stagnant epochs") {
    PlateauScheduler sched(0.3, 10);
    double lr = 0.1;
    sched.step(50.0, lr);  // first observation becomes the best
    for (int i = 0; i < 9; ++i) {
        CHECK(!sched.step(50.0, lr));
        CHECK(lr == 0.1);  // nine stagnant epochs change nothing
    }
    CHECK(sched.step(50.0, lr));  // the tenth triggers the decay
    CHECK(close(lr, 0.03, 1e-15));
}

TEST_CASE("improvement resets the plateau counter") {
    PlateauScheduler sched(0.3, 10);
    double lr = 0.1;
    sched.step(50.0, lr);
    for (int i = 0; i < 9; ++i) sched.step(50.0, lr);
    sched.step(51.0, lr);  // improvement at the brink
    for (int i = 0; i < 9; ++i) {
        CHECK(!sched.step(51.0, lr));
    }
    CHECK(lr == 0.1);
    CHECK(sched.step(51.0, lr));
    // equal-to-best does not count as improvement
    PlateauScheduler strict(0.3, 2);
    double lr2 = 1.0;
    strict.step(10.0, lr2);
    strict.step(10.0, lr2);
    CHECK(strict.step(10.0, lr2));
    CHECK(close(lr2, 0.3, 1e-15));
}

TEST_CASE("early stop window") {
    CHECK(should_stop_early(60, 0, 60));    // 60 stagnant epochs
    CHECK(!should_stop_early(59, 0, 60));   // fewer than 60 elapsed
    CHECK(!should_stop_early(59, 59, 60));  // improvement at the window's end
    CHECK(should_stop_early(119, 59, 60));
    CHECK(!should_stop_early(5, -1, 60));
}

TEST_CASE("plain training reduces the loss") {
    auto [tr, te] = tiny_data();
    ReparamConfig rc;
    auto m = build<double>("mlp-toy", 4, {2, 4, 4}, rc, 21, false);
    TrainConfig cfg;
    cfg.mode = TrainMode::Plain;
    cfg.epochs = 20;
    cfg.batch_size = 32;
    cfg.lr = 0.05;
    cfg.seed = 21;
    auto res = train(m, tr, te, cfg);
    REQUIRE(res.history.epochs.size() >= 2);
    const double first = res.history.epochs.front().task_loss;
    const double last = res.history.epochs.back().task_loss;
    CHECK(last < first);
    CHECK(res.best_test_accuracy > 100.0 / 4.0);  // beats chance
}

TEST_CASE("identical seeds give identical histories and parameters") {
    auto run = [] {
        auto [tr, te] = tiny_data();
        ReparamConfig rc;
        auto m = build<double>("mlp-toy", 4, {2, 4, 4}, rc, 33, true);
        TrainConfig cfg;
        cfg.mode = TrainMode::Reparam;
        cfg.epochs = 4;
        cfg.batch_size = 32;
        cfg.seed = 33;
        cfg.prune_rate = 0.5;
        auto res = train(m, tr, te, cfg);
        std::ostringstream os;
        char line[256];
        for (const auto& e : res.history.epochs) {
            std::snprintf(line, sizeof line, "%.17g %.17g %.17g %.17g\n", e.task_loss,
                          e.budget_loss, e.cost_fraction, e.test_accuracy);
            os << line;
        }
        for (auto& p : parameters(m, true)) {
            if (p.kind == ParamKind::Temperature) {
                std::snprintf(line, sizeof line, "%.17g\n", *p.tau);
                os << line;
            } else {
                for (std::size_t i = 0; i < p.tensor->size(); ++i) {
                    std::snprintf(line, sizeof line, "%.17g\n", (*p.tensor)[i]);
                    os << line;
                }
            }
        }
        return os.str();
    };
    CHECK(run() == run());
}

TEST_CASE("returned model is the best-accuracy checkpoint") {
    auto [tr, te] = tiny_data();
    ReparamConfig rc;
    auto m = build<double>("mlp-toy", 4, {2, 4, 4}, rc, 5, false);
    TrainConfig cfg;
    cfg.mode = TrainMode::Plain;
    cfg.epochs = 12;
    cfg.batch_size = 32;
    cfg.seed = 5;
    auto res = train(m, tr, te, cfg);
    double best = 0;
    for (const auto& e : res.history.epochs) best = std::max(best, e.test_accuracy);
    CHECK(res.best_test_accuracy == best);
    CHECK(close(evaluate(m, te), best, 1e-12));
}

TEST_CASE("weight decay touches weights only") {
    // One step from identical state: the decay term shifts weights but not
    // the bias or temperature updates. (After more steps everything diverges
    // because the changed weights change later gradients.)
    auto [tr, te] = tiny_data();
    auto run_one_step = [&](double wd) {
        ReparamConfig rc;
        auto m = build<double>("mlp-toy", 4, {2, 4, 4}, rc, 9, true);
        m.reparam = true;
        TrainConfig cfg;
        cfg.mode = TrainMode::Reparam;
        cfg.weight_decay = wd;
        BudgetSpec<double> budget;
        budget.c_initial = static_cast<double>(count_prunable(m));
        budget.prune_rate = 0.5;
        detail::ParamState<double> state(parameters(m, true));
        std::vector<std::size_t> idx{0, 1, 2, 3};
        std::vector<int> labels;
        Tensor<double> batch = make_batch(tr, idx, &labels);
        train_step(m, batch, labels, cfg, &budget, state, 0.1);
        return m;
    };
    auto a = run_one_step(0.0);
    auto b = run_one_step(0.5);
    auto pa = parameters(a, true);
    auto pb = parameters(b, true);
    bool weights_differ = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].kind == ParamKind::Weight) {
            for (std::size_t k = 0; k < pa[i].tensor->size(); ++k)
                if ((*pa[i].tensor)[k] != (*pb[i].tensor)[k]) weights_differ = true;
        } else if (pa[i].kind == ParamKind::Temperature) {
            CHECK(*pa[i].tau == *pb[i].tau);
        } else {
            for (std::size_t k = 0; k < pa[i].tensor->size(); ++k)
                CHECK((*pa[i].tensor)[k] == (*pb[i].tensor)[k]);
        }
    }
    CHECK(weights_differ);
}

TEST_CASE("absurd learning rates raise a divergence error") {
    auto [tr, te] = tiny_data();
    ReparamConfig rc;
    auto m = build<double>("mlp-toy", 4, {2, 4, 4}, rc, 13, false);
    TrainConfig cfg;
    cfg.mode = TrainMode::Plain;
    cfg.epochs = 8;
    cfg.batch_size = 32;
    cfg.lr = 1e18;
    cfg.seed = 13;
    CHECK_THROWS_AS(train(m, tr, te, cfg), DivergenceError);
}

TEST_CASE("history serializes one epoch per line") {
    TrainHistory h;
    for (int i = 0; i < 3; ++i) {
        EpochStats e;
        e.epoch = i;
        e.lr = 0.1;
        e.task_loss = 1.0 / (i + 1);
        e.test_accuracy = 50.0 + i;
        h.epochs.push_back(e);
    }
    const std::string path = "/tmp/stopband_test_history.dat";
    h.save(path);
    std::ifstream f(path);
    std::string line;
    int lines = 0, comments = 0;
    while (std::getline(f, line)) {
        if (line.rfind('#', 0) == 0) ++comments;
        else ++lines;
    }
    CHECK(comments == 1);
    CHECK(lines == 3);
    std::filesystem::remove(path);
}

TEST_CASE("config validation rejects nonsense") {
    TrainConfig cfg;
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg.epochs = 1;
    cfg.momentum = 1.0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg.momentum = 0.9;
    cfg.plateau_factor = 1.0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg.plateau_factor = 0.3;
    CHECK_NOTHROW(cfg.validate());
}
