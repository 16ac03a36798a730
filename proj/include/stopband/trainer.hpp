#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "stopband/budget.hpp"
#include "stopband/data.hpp"
#include "stopband/errors.hpp"
#include "stopband/graph.hpp"
#include "stopband/model.hpp"
#include "stopband/rng.hpp"

namespace stopband {

// Reparam trains gated weights plus temperatures against task + budget loss.
// Plain is ordinary training of the same architecture. Finetune continues
// plain training under a fixed sparsity mask: masked weights receive no
// gradient and are re-zeroed after every step.
enum class TrainMode { Reparam, Plain, Finetune };

inline const char* train_mode_name(TrainMode m) {
    switch (m) {
    case TrainMode::Reparam: return "reparam";
    case TrainMode::Plain: return "plain";
    default: return "finetune";
    }
}

struct TrainConfig {
    TrainMode mode = TrainMode::Reparam;
    int epochs = 300;
    std::size_t batch_size = 128;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-5;
    double plateau_factor = 0.3;
    int plateau_patience = 10;
    int early_stop_patience = 60;
    double lambda = 5.0;
    double prune_rate = 0.9;
    std::uint64_t seed = 1;
    bool augment = false;

    void validate() const {
        if (epochs < 1) throw UsageError("epochs must be positive");
        if (batch_size == 0) throw UsageError("batch size must be positive");
        if (!(lr > 0)) throw UsageError("learning rate must be positive");
        if (!(momentum >= 0 && momentum < 1)) throw UsageError("momentum must lie in [0, 1)");
        if (!(weight_decay >= 0)) throw UsageError("weight decay must be non-negative");
        if (!(plateau_factor > 0 && plateau_factor < 1))
            throw UsageError("plateau factor must lie in (0, 1)");
        if (plateau_patience < 1 || early_stop_patience < 1)
            throw UsageError("patience values must be positive");
    }
};

// Multiplies the learning rate by `factor` once the tracked metric has gone
// `patience` consecutive epochs without a strict improvement. The counter
// restarts after a decay so decays are at least `patience` epochs apart.
struct PlateauScheduler {
    double factor;
    int patience;
    double best = -1e300;
    int stale = 0;

    PlateauScheduler(double f, int p) : factor(f), patience(p) {}

    bool step(double metric, double& lr) {
        if (metric > best) {
            best = metric;
            stale = 0;
            return false;
        }
        if (++stale >= patience) {
            lr *= factor;
            stale = 0;
            return true;
        }
        return false;
    }
};

// True once `patience` epochs have elapsed since the best-metric epoch.
inline bool should_stop_early(int epoch, int best_epoch, int patience) {
    return best_epoch >= 0 && epoch - best_epoch >= patience;
}

struct EpochStats {
    int epoch = 0;
    double lr = 0;
    double task_loss = 0;
    double budget_loss = 0;
    double total_loss = 0;
    double cost_fraction = 0;  // surrogate cost / C_initial
    double test_accuracy = 0;  // percent
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    double best_test_accuracy = 0;
    int best_epoch = -1;

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw FormatError("cannot write " + path);
        f << "# epoch lr task_loss budget_loss total_loss cost_fraction test_accuracy\n";
        char line[512];
        for (const EpochStats& e : epochs) {
            std::snprintf(line, sizeof line,
                          "%d %.17g %.17g %.17g %.17g %.17g %.17g\n", e.epoch, e.lr,
                          e.task_loss, e.budget_loss, e.total_loss, e.cost_fraction,
                          e.test_accuracy);
            f << line;
        }
    }
};

// Accuracy in percent over a full dataset, evaluated in fixed-size chunks.
template <typename S>
double evaluate(Model<S>& m, const Dataset& d, std::size_t batch_size = 256) {
    if (d.size() == 0) throw UsageError("cannot evaluate on an empty dataset");
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    std::vector<int> labels;
    for (std::size_t start = 0; start < d.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, d.size() - start);
        idx.resize(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
        Tensor<S> batch = make_batch<S>(d, idx, &labels);
        Tensor<S> logits = forward_eval(m, batch);
        const std::size_t k = logits.dim(1);
        for (std::size_t i = 0; i < n; ++i) {
            const S* row = logits.data() + i * k;
            std::size_t arg = 0;
            for (std::size_t j = 1; j < k; ++j)
                if (row[j] > row[arg]) arg = j;
            if (static_cast<int>(arg) == labels[i]) ++correct;
        }
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(d.size());
}

namespace detail {

template <typename S>
struct ParamState {
    std::vector<std::vector<S>> velocity;

    explicit ParamState(const std::vector<ParamRef<S>>& params) {
        velocity.reserve(params.size());
        for (const ParamRef<S>& p : params)
            velocity.emplace_back(p.kind == ParamKind::Temperature ? 1 : p.tensor->size(), S(0));
    }
};

template <typename S>
std::vector<Tensor<S>> snapshot(Model<S>& m) {
    std::vector<Tensor<S>> out;
    for (const ParamRef<S>& p : parameters(m, /*with_tau=*/true))
        out.push_back(p.kind == ParamKind::Temperature ? Tensor<S>::scalar(*p.tau) : *p.tensor);
    return out;
}

template <typename S>
void restore(Model<S>& m, const std::vector<Tensor<S>>& snap) {
    std::size_t i = 0;
    for (const ParamRef<S>& p : parameters(m, /*with_tau=*/true)) {
        if (p.kind == ParamKind::Temperature)
            *p.tau = snap[i++].item();
        else
            *p.tensor = snap[i++];
    }
}

} // namespace detail

template <typename S = double>
struct TrainResult {
    TrainHistory history;
    double best_test_accuracy = 0;
    int best_epoch = -1;
    int epochs_run = 0;
};

// One optimization step: build the tape, run forward and backward, apply SGD
// with momentum. Returns (task loss, budget loss, cost fraction).
template <typename S>
std::array<double, 3> train_step(Model<S>& m, const Tensor<S>& batch,
                                 const std::vector<int>& labels, const TrainConfig& cfg,
                                 const BudgetSpec<S>* budget, detail::ParamState<S>& state,
                                 double lr) {
    Graph<S> g;
    GraphBinding<S> bind = bind_parameters(g, m);
    auto input = g.leaf(batch);
    auto logits = forward(g, m, bind, input, /*training=*/true);
    auto task = g.softmax_cross_entropy(logits, labels);
    auto loss = task;
    double budget_value = 0, cost_fraction = 0;
    if (m.reparam) {
        if (!budget) throw UsageError("reparam training needs a budget");
        auto cost = surrogate_cost(g, bind.gates);
        auto bl = budget_loss(g, cost, *budget);
        loss = total_loss(g, task, bl, *budget);
        budget_value = static_cast<double>(g.value(bl).item());
        cost_fraction = static_cast<double>(g.value(cost).item() / budget->c_initial);
    }
    const double task_value = static_cast<double>(g.value(task).item());
    if (!std::isfinite(task_value) || !std::isfinite(budget_value))
        throw DivergenceError("loss is not finite");
    g.backward(loss);

    const S mu = static_cast<S>(cfg.momentum);
    const S wd = static_cast<S>(cfg.weight_decay);
    const S step = static_cast<S>(lr);
    for (std::size_t pi = 0; pi < bind.params.size(); ++pi) {
        const ParamRef<S>& p = bind.params[pi];
        const Tensor<S>& grad = g.grad(bind.nodes[pi]);
        std::vector<S>& vel = state.velocity[pi];
        if (p.kind == ParamKind::Temperature) {
            S gv = grad[0];
            if (!std::isfinite(static_cast<double>(gv)))
                throw DivergenceError("temperature gradient is not finite");
            vel[0] = mu * vel[0] + gv;
            *p.tau -= step * vel[0];
            continue;
        }
        Tensor<S>& w = *p.tensor;
        const bool masked = cfg.mode == TrainMode::Finetune && p.kind == ParamKind::Weight &&
                            p.mask && !p.mask->empty();
        for (std::size_t i = 0; i < w.size(); ++i) {
            S gv = grad[i];
            if (masked && (*p.mask)[i] == S(0)) gv = S(0);
            if (p.decay) gv += wd * w[i];
            vel[i] = mu * vel[i] + gv;
            w[i] -= step * vel[i];
            if (masked) w[i] *= (*p.mask)[i];
        }
    }
    return {task_value, budget_value, cost_fraction};
}

// Full training loop. Tracks the best test accuracy seen, restores that
// checkpoint before returning, decays the learning rate on plateaus and stops
// once the metric has been flat for early_stop_patience epochs.
template <typename S = double>
TrainResult<S> train(Model<S>& m, const Dataset& train_set, const Dataset& test_set,
                     const TrainConfig& cfg,
                     std::ostream* log = nullptr) {
    cfg.validate();
    m.reparam = cfg.mode == TrainMode::Reparam;

    BudgetSpec<S> budget;
    if (m.reparam) {
        budget.c_initial = static_cast<S>(count_prunable(m));
        budget.prune_rate = static_cast<S>(cfg.prune_rate);
        budget.lambda = static_cast<S>(cfg.lambda);
        budget.validate();
    }

    std::vector<ParamRef<S>> params = parameters(m, /*with_tau=*/m.reparam);
    detail::ParamState<S> state(params);
    Rng order_rng(Rng::mix(cfg.seed, 0x6f72646572ull));
    Rng augment_rng(Rng::mix(cfg.seed, 0x617567ull));

    TrainResult<S> result;
    PlateauScheduler plateau(cfg.plateau_factor, cfg.plateau_patience);
    double lr = cfg.lr;
    std::vector<Tensor<S>> best;

    std::vector<std::size_t> batch_idx;
    std::vector<int> labels;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(train_set.size(), order_rng);
        double task_sum = 0, budget_sum = 0, cost_last = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - start);
            batch_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(start + n));
            Tensor<S> batch = make_batch<S>(train_set, batch_idx, &labels);
            if (cfg.augment) augment_batch(batch, augment_rng);
            auto [task_v, budget_v, cost_f] =
                train_step(m, batch, labels, cfg, m.reparam ? &budget : nullptr, state, lr);
            task_sum += task_v;
            budget_sum += budget_v;
            cost_last = cost_f;
            ++batches;
        }

        EpochStats st;
        st.epoch = epoch;
        st.lr = lr;
        st.task_loss = task_sum / static_cast<double>(batches);
        st.budget_loss = budget_sum / static_cast<double>(batches);
        st.total_loss = st.task_loss + cfg.lambda * st.budget_loss;
        st.cost_fraction = cost_last;
        st.test_accuracy = evaluate(m, test_set);
        result.history.epochs.push_back(st);
        result.epochs_run = epoch + 1;

        if (st.test_accuracy > result.best_test_accuracy || result.best_epoch < 0) {
            result.best_test_accuracy = st.test_accuracy;
            result.best_epoch = epoch;
            best = detail::snapshot(m);
        }
        if (log) {
            *log << "epoch " << epoch << " lr " << lr << " task " << st.task_loss;
            if (m.reparam)
                *log << " budget " << st.budget_loss << " cost " << st.cost_fraction;
            *log << " acc " << st.test_accuracy << "\n";
        }
        plateau.step(st.test_accuracy, lr);
        if (should_stop_early(epoch, result.best_epoch, cfg.early_stop_patience)) break;
    }

    if (!best.empty()) detail::restore(m, best);
    result.history.best_test_accuracy = result.best_test_accuracy;
    result.history.best_epoch = result.best_epoch;
    return result;
}

} // namespace stopband
