#include <cmath>

#include "doctest.h"
#include "stopband/budget.hpp"
#include "stopband/graph.hpp"
#include "stopband/reparam.hpp"
#include "stopband/rng.hpp"
#include "test_helpers.hpp"

using namespace stopband;
using testutil::close;

namespace {
using Ref = Graph<double>::NodeRef;
}

TEST_CASE("budget target arithmetic and validation") {
    BudgetSpec<double> b;
    b.c_initial = 100.0;
    b.prune_rate = 0.9;
    CHECK(close(b.c_target(), 10.0, 1e-12));
    CHECK_NOTHROW(b.validate());
    b.prune_rate = 1.0;
    CHECK_THROWS_AS(b.validate(), UsageError);
    b.prune_rate = -0.1;
    CHECK_THROWS_AS(b.validate(), UsageError);
    b.prune_rate = 0.5;
    b.c_initial = 0.0;
    CHECK_THROWS_AS(b.validate(), UsageError);
    b.c_initial = 10.0;
    b.lambda = -1.0;
    CHECK_THROWS_AS(b.validate(), UsageError);
}

TEST_CASE("budget loss at the target and at the start") {
    BudgetSpec<double> b;
    b.c_initial = 100.0;
    b.prune_rate = 0.9;
    CHECK(b.loss_value(b.c_target()) == 0.0);
    // cost still at its initial value: ((1 - (1-p)))^2 = p^2
    CHECK(close(b.loss_value(100.0), 0.81, 1e-12));
}

TEST_CASE("surrogate cost on constructed tensors") {
    Graph<double> g;
    Ref zeros = g.leaf(Tensor<double>({10}));
    Ref tau = g.leaf(Tensor<double>::scalar(0.0));
    Ref gate_zeros = g.stopband_gate(zeros, tau, 4);
    CHECK(g.value(g.sum(gate_zeros)).item() == 0.0);

    // all weights deep in saturation: each gate contributes exactly 1
    Graph<double> g2;
    Ref big = g2.leaf(Tensor<double>::full({7}, 1e6));
    Ref tau2 = g2.leaf(Tensor<double>::scalar(0.0));
    CHECK(g2.value(g2.sum(g2.stopband_gate(big, tau2, 4))).item() == 7.0);

    // worked example: four unit weights at t=1, n=4
    Graph<double> g3;
    Ref w = g3.leaf(Tensor<double>({4}, {1.0, 1.0, 1.0, 1.0}));
    Ref tau3 = g3.leaf(Tensor<double>::scalar(0.0));
    std::vector<Ref> gates{g3.stopband_gate(w, tau3, 4)};
    const double c = g3.value(surrogate_cost(g3, gates)).item();
    CHECK(close(c, 4.0 * static_cast<double>(testutil::ref_gate(1.0L, 1.0L, 4)), 1e-12));
    CHECK(close(c, 1.510164, 1e-5, 0.0));
}

TEST_CASE("budget loss gradient matches the closed form") {
    BudgetSpec<double> spec;
    spec.c_initial = 50.0;
    spec.prune_rate = 0.8;
    Rng rng(19);
    for (int i = 0; i < 20; ++i) {
        const double c = rng.uniform(0.0, 50.0);
        Graph<double> g;
        Ref cost = g.leaf(Tensor<double>::scalar(c));
        Ref loss = budget_loss(g, cost, spec);
        g.backward(loss);
        const double want = 2.0 * (c - spec.c_target()) / (spec.c_initial * spec.c_initial);
        CHECK(close(g.grad(cost)[0], want, 1e-12));
        const double fdg = testutil::fd(
            [&spec](double cc) { return spec.loss_value(cc); }, c);
        CHECK(close(g.grad(cost)[0], fdg, 1e-8));
    }
}

TEST_CASE("total loss composition") {
    BudgetSpec<double> spec;
    spec.c_initial = 10.0;
    spec.prune_rate = 0.9;
    spec.lambda = 5.0;
    Graph<double> g;
    Ref task = g.leaf(Tensor<double>::scalar(2.0));
    Ref budget = g.leaf(Tensor<double>::scalar(0.81));
    CHECK(close(g.value(total_loss(g, task, budget, spec)).item(), 6.05, 1e-12));

    spec.lambda = 0.0;
    Graph<double> g2;
    Ref task2 = g2.leaf(Tensor<double>::scalar(2.0));
    Ref budget2 = g2.leaf(Tensor<double>::scalar(0.81));
    CHECK(g2.value(total_loss(g2, task2, budget2, spec)).item() == 2.0);
}

TEST_CASE("gradients flow through both loss terms") {
    Rng rng(23);
    Tensor<double> w({16});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-0.5, 0.5);
    Tensor<double> tau = Tensor<double>::scalar(std::log(10.0));

    auto grads_for = [&](double lambda) {
        BudgetSpec<double> spec;
        spec.c_initial = 16.0;
        spec.prune_rate = 0.5;
        spec.lambda = lambda;
        Graph<double> g;
        Ref rw = g.leaf(w), rt = g.leaf(tau);
        Ref gate = g.stopband_gate(rw, rt, 4);
        // task stand-in touching the weights: sum of squared apparent weights
        Ref task = g.sum(g.square(g.mul(rw, gate)));
        std::vector<Ref> gates{gate};
        Ref loss = total_loss(g, task, budget_loss(g, surrogate_cost(g, gates), spec), spec);
        g.backward(loss);
        return g.grad(rw);
    };
    Tensor<double> g0 = grads_for(0.0);
    Tensor<double> g5 = grads_for(5.0);
    bool any_differ = false;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (g0[i] != g5[i]) any_differ = true;
        CHECK(std::isfinite(g5[i]));
    }
    CHECK(any_differ);  // the budget term contributes its own gradient
}

TEST_CASE("budget gradient vanishes exactly at the target") {
    // Pick uniform weights w = a so C = N * h(a); set the target to that by
    // choosing p = 1 - h(a). At this point the budget term contributes zero
    // gradient to every parameter.
    const double a = 0.8, t = 2.0;
    const int n = 4;
    const double ha = gate(a, t, n);
    const std::size_t N = 12;
    BudgetSpec<double> spec;
    spec.c_initial = static_cast<double>(N);
    spec.prune_rate = 1.0 - ha;
    spec.lambda = 5.0;

    Graph<double> g;
    Ref w = g.leaf(Tensor<double>::full({N}, a));
    Ref tau = g.leaf(Tensor<double>::scalar(std::log(t)));
    std::vector<Ref> gates{g.stopband_gate(w, tau, n)};
    Ref cost = surrogate_cost(g, gates);
    Ref bl = budget_loss(g, cost, spec);
    CHECK(close(g.value(bl).item(), 0.0, 0.0, 1e-28));
    g.backward(g.scale(bl, spec.lambda));
    for (std::size_t i = 0; i < N; ++i) CHECK(close(g.grad(w)[i], 0.0, 0.0, 1e-14));
    CHECK(close(g.grad(tau)[0], 0.0, 0.0, 1e-13));
}

TEST_CASE("optimizing the budget alone reaches the target on a toy layer") {
    // 1000 weights, p = 0.9: gradient descent on (w, tau) against the budget
    // loss only must bring |C - C_target| / C_initial under 1% in 200 steps.
    const std::size_t N = 1000;
    Rng rng(37);
    Tensor<double> w({N});
    for (std::size_t i = 0; i < N; ++i) w[i] = rng.uniform(-0.1, 0.1);
    Tensor<double> tau = Tensor<double>::scalar(std::log(100.0));

    BudgetSpec<double> spec;
    spec.c_initial = static_cast<double>(N);
    spec.prune_rate = 0.9;
    spec.lambda = 1.0;

    // The loss is normalized by c_initial^2, so raw gradients are small;
    // unit step size suits this toy problem (converges in ~20 steps).
    const double lr = 1.0;
    double gap = 1.0;
    for (int step = 0; step < 200; ++step) {
        Graph<double> g;
        Ref rw = g.leaf(w), rt = g.leaf(tau);
        std::vector<Ref> gates{g.stopband_gate(rw, rt, 4)};
        Ref cost = surrogate_cost(g, gates);
        Ref loss = budget_loss(g, cost, spec);
        g.backward(loss);
        gap = std::fabs(g.value(cost).item() - spec.c_target()) / spec.c_initial;
        if (gap <= 0.01) break;
        for (std::size_t i = 0; i < N; ++i) w[i] -= lr * g.grad(rw)[i];
        tau[0] -= lr * g.grad(rt)[0];
    }
    CHECK(gap <= 0.01);
}
