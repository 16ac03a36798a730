#pragma once

#include <cstddef>
#include <vector>

#include "stopband/errors.hpp"
#include "stopband/graph.hpp"

namespace stopband {

// The pruning budget. c_initial is the number of gateable weights, prune_rate
// the fraction of them that should end up removed, so the surrogate cost is
// steered toward (1 - prune_rate) * c_initial. The quadratic penalty is
// normalized by c_initial so lambda means the same thing across model sizes.
template <typename S = double>
struct BudgetSpec {
    S c_initial = 0;
    S prune_rate = 0;
    S lambda = 5;

    S c_target() const { return (S(1) - prune_rate) * c_initial; }

    void validate() const {
        if (!(c_initial > 0)) throw UsageError("budget needs a positive initial cost");
        if (!(prune_rate >= 0 && prune_rate < 1))
            throw UsageError("prune rate must lie in [0, 1)");
        if (!(lambda >= 0)) throw UsageError("lambda must be non-negative");
    }

    S loss_value(S cost) const {
        const S r = (cost - c_target()) / c_initial;
        return r * r;
    }
};

// Sum of all gate activations currently on the tape.
template <typename S>
typename Graph<S>::NodeRef surrogate_cost(Graph<S>& g,
                                          const std::vector<typename Graph<S>::NodeRef>& gates) {
    if (gates.empty()) throw UsageError("no gated tensors to sum");
    auto acc = g.sum(gates[0]);
    for (std::size_t i = 1; i < gates.size(); ++i) acc = g.add(acc, g.sum(gates[i]));
    return acc;
}

// ((C - C_target) / C_initial)^2 as a tape node.
template <typename S>
typename Graph<S>::NodeRef budget_loss(Graph<S>& g, typename Graph<S>::NodeRef cost,
                                       const BudgetSpec<S>& spec) {
    spec.validate();
    auto centered = g.add_const(cost, -spec.c_target());
    return g.square(g.scale(centered, S(1) / spec.c_initial));
}

// task + lambda * budget.
template <typename S>
typename Graph<S>::NodeRef total_loss(Graph<S>& g, typename Graph<S>::NodeRef task,
                                      typename Graph<S>::NodeRef budget,
                                      const BudgetSpec<S>& spec) {
    return g.add(task, g.scale(budget, spec.lambda));
}

} // namespace stopband
