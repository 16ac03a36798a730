#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "stopband/model.hpp"
#include "stopband/pruning.hpp"
#include "stopband/reparam.hpp"
#include "stopband/rng.hpp"
#include "stopband/trainer.hpp"
#include "test_helpers.hpp"

using namespace stopband;
using testutil::close;

namespace {

// A single linear layer carrying the given weights, gated at temperature t.
Model<double> toy_model(const std::vector<double>& w, double t = 100.0) {
    Model<double> m;
    m.name = "toy";
    m.num_classes = 2;
    m.input_shape = {w.size() / 2};
    m.reparam = true;
    Layer<double> l;
    l.kind = LayerKind::Linear;
    l.w = Tensor<double>({w.size() / 2, 2}, std::vector<double>(w));
    l.temp = Temperature<double>::from_t(t);
    m.layers.push_back(std::move(l));
    return m;
}

std::vector<double> weights_of(Model<double>& m) {
    std::vector<double> out;
    for (auto& p : parameters(m, false))
        if (p.kind == ParamKind::Weight)
            out.insert(out.end(), p.tensor->data(), p.tensor->data() + p.tensor->size());
    return out;
}

} // namespace

TEST_CASE("zero rate is the identity") {
    auto m = toy_model({0.3, -0.1, 0.4, 0.2});
    const auto before = weights_of(m);
    CHECK(effective_prune(m, 0.0) == 0u);
    CHECK(weights_of(m) == before);
    CHECK(magnitude_prune(m, 0.0) == 0u);
    CHECK(weights_of(m) == before);
    CHECK_THROWS_AS(effective_prune(m, 1.5), UsageError);
}

TEST_CASE("effective pruning removes the smallest apparent magnitudes") {
    // apparent magnitudes |w|*h(w) are ordered like |w| at fixed t
    auto m = toy_model({0.3, -0.1, 0.4, 0.2});
    CHECK(effective_prune(m, 0.5) == 2u);
    const auto w = weights_of(m);
    CHECK(w[0] == 0.3);
    CHECK(w[1] == 0.0);  // the 0.1 carrier
    CHECK(w[2] == 0.4);
    CHECK(w[3] == 0.0);  // the 0.2 carrier
    CHECK(close(sparsity(m), 0.5, 1e-12));
}

TEST_CASE("magnitude pruning ranks raw weights") {
    auto m = toy_model({-3.0, 1.0, -0.5, 2.0});
    m.reparam = false;
    CHECK(magnitude_prune(m, 0.5) == 2u);
    const auto w = weights_of(m);
    CHECK(w[0] == -3.0);
    CHECK(w[1] == 0.0);
    CHECK(w[2] == 0.0);
    CHECK(w[3] == 2.0);
}

TEST_CASE("nonzero count after pruning is exact") {
    ReparamConfig rc;
    auto m = build<double>("mlp-toy", 10, {16}, rc, 5);
    const std::size_t total = count_prunable(m);
    const double p = 0.9;
    const std::size_t removed = effective_prune(m, p);
    CHECK(removed == static_cast<std::size_t>(p * static_cast<double>(total)));
    std::size_t zeros = 0;
    for (auto& pr : parameters(m, false))
        if (pr.kind == ParamKind::Weight)
            for (std::size_t i = 0; i < pr.tensor->size(); ++i)
                if ((*pr.tensor)[i] == 0.0) ++zeros;
    CHECK(zeros >= removed);  // ties or incidental zeros can only add
    CHECK(close(sparsity(m), p, 1.0 / static_cast<double>(total)));
}

TEST_CASE("pruning is idempotent and nests across rates") {
    ReparamConfig rc;
    auto m = build<double>("mlp-toy", 10, {16}, rc, 6);
    effective_prune(m, 0.9);
    const auto once = weights_of(m);
    effective_prune(m, 0.9);
    CHECK(weights_of(m) == once);  // bitwise identical

    auto zero_set = [](const std::vector<double>& w) {
        std::vector<bool> z(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) z[i] = w[i] == 0.0;
        return z;
    };
    const auto z90 = zero_set(once);
    effective_prune(m, 0.95);
    const auto z95 = zero_set(weights_of(m));
    effective_prune(m, 0.97);
    const auto z97 = zero_set(weights_of(m));
    for (std::size_t i = 0; i < z90.size(); ++i) {
        if (z90[i]) CHECK(z95[i]);
        if (z95[i]) CHECK(z97[i]);
    }
}

TEST_CASE("masked finetune steps keep pruned weights at zero") {
    ReparamConfig rc;
    auto m = build<double>("mlp-toy", 4, {8}, rc, 7, false);
    magnitude_prune(m, 0.5);

    TrainConfig cfg;
    cfg.mode = TrainMode::Finetune;
    cfg.lr = 0.1;
    detail::ParamState<double> state(parameters(m, false));
    Rng rng(3);
    Tensor<double> batch({4, 8});
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = rng.uniform(-1.0, 1.0);
    std::vector<int> labels{0, 1, 2, 3};
    for (int step = 0; step < 3; ++step)
        train_step(m, batch, labels, cfg, static_cast<const BudgetSpec<double>*>(nullptr),
                   state, cfg.lr);

    for (auto& p : parameters(m, false)) {
        if (p.kind != ParamKind::Weight) continue;
        REQUIRE(!p.mask->empty());
        for (std::size_t i = 0; i < p.tensor->size(); ++i)
            if ((*p.mask)[i] == 0.0) CHECK((*p.tensor)[i] == 0.0);
    }
}

TEST_CASE("saturated weights give unit surrogate and l0 fractions") {
    auto m = toy_model({10.0, -20.0, 15.0, -30.0}, 1e6);
    const double frac = surrogate_cost_value(m) / 4.0;
    CHECK(frac == 1.0);
    CHECK(sparsity(m) == 0.0);
}

TEST_CASE("prune report round trips and rejects unknown keys") {
    PruneReport r;
    r.model = "conv4-small";
    r.method = "effective";
    r.prune_rate = 0.9;
    r.achieved_sparsity = 0.9000017;
    r.surrogate_fraction = 0.102;
    r.weights_total = 115808;
    r.weights_removed = 104227;
    r.accuracy_before = 91.25;
    r.accuracy_after = 90.875;
    const std::string path = "/tmp/stopband_test_report.txt";
    r.save(path);
    PruneReport back = PruneReport::load(path);
    CHECK(back.model == r.model);
    CHECK(back.method == r.method);
    CHECK(back.prune_rate == r.prune_rate);
    CHECK(back.achieved_sparsity == r.achieved_sparsity);
    CHECK(back.surrogate_fraction == r.surrogate_fraction);
    CHECK(back.weights_total == r.weights_total);
    CHECK(back.weights_removed == r.weights_removed);
    CHECK(back.accuracy_before == r.accuracy_before);
    CHECK(back.accuracy_after == r.accuracy_after);
    CHECK(close(back.accuracy_drop(), 0.375, 1e-12));

    std::ofstream f(path, std::ios::app);
    f << "bogus_key=1\n";
    f.close();
    CHECK_THROWS_AS(PruneReport::load(path), FormatError);
    std::filesystem::remove(path);
}
