#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stopband/errors.hpp"
#include "stopband/model.hpp"
#include "stopband/reparam.hpp"

namespace stopband {

namespace detail {

template <typename S>
void collect_prunable(std::vector<Layer<S>>& layers, std::vector<Layer<S>*>& out) {
    for (Layer<S>& l : layers) {
        if (l.is_prunable()) out.push_back(&l);
        if (l.kind == LayerKind::Residual) {
            collect_prunable(l.body, out);
            collect_prunable(l.shortcut, out);
        }
    }
}

// Zeroes the floor(rate * total) weights with the smallest keys across all
// prunable tensors. Ties resolve toward the lower flat index, so repeated
// calls are deterministic: weights that are already zero have key zero and
// are always selected first, which makes pruning idempotent at a fixed rate
// and nested across increasing rates.
template <typename S, typename KeyFn>
std::size_t prune_by_key(Model<S>& m, double rate, KeyFn&& key) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw UsageError("prune rate must lie in [0, 1]");
    std::vector<Layer<S>*> prunable;
    collect_prunable(m.layers, prunable);
    std::size_t total = 0;
    for (Layer<S>* l : prunable) total += l->w.size();
    const std::size_t remove = static_cast<std::size_t>(rate * static_cast<double>(total));

    std::vector<std::pair<S, std::size_t>> ranked;
    ranked.reserve(total);
    std::size_t base = 0;
    for (Layer<S>* l : prunable) {
        for (std::size_t i = 0; i < l->w.size(); ++i)
            ranked.push_back({key(*l, l->w[i]), base + i});
        base += l->w.size();
    }
    std::sort(ranked.begin(), ranked.end());

    std::vector<bool> drop(total, false);
    for (std::size_t i = 0; i < remove; ++i) drop[ranked[i].second] = true;

    base = 0;
    for (Layer<S>* l : prunable) {
        if (l->mask.empty()) l->mask = Tensor<S>::full(l->w.shape(), S(1));
        for (std::size_t i = 0; i < l->w.size(); ++i) {
            if (drop[base + i]) {
                l->w[i] = S(0);
                l->mask[i] = S(0);
            } else {
                l->mask[i] = S(1);
            }
        }
        base += l->w.size();
    }
    return remove;
}

} // namespace detail

// Ranks weights by their apparent magnitude |w| * h(w): what the gated
// forward pass actually multiplies by. Each layer uses its own temperature.
template <typename S>
std::size_t effective_prune(Model<S>& m, double rate) {
    const int n = m.reparam_cfg.crispness;
    return detail::prune_by_key(m, rate, [n](const Layer<S>& l, S w) {
        return std::abs(w) * gate(w, l.temp.t(), n);
    });
}

// Classic one-shot magnitude pruning on the raw weights.
template <typename S>
std::size_t magnitude_prune(Model<S>& m, double rate) {
    return detail::prune_by_key(m, rate, [](const Layer<S>&, S w) { return std::abs(w); });
}

// Fraction of prunable weights that are exactly zero.
template <typename S>
double sparsity(Model<S>& m) {
    std::vector<Layer<S>*> prunable;
    detail::collect_prunable(m.layers, prunable);
    std::size_t total = 0, zeros = 0;
    for (Layer<S>* l : prunable) {
        total += l->w.size();
        for (std::size_t i = 0; i < l->w.size(); ++i)
            if (l->w[i] == S(0)) ++zeros;
    }
    if (total == 0) throw UsageError("model has no prunable weights");
    return static_cast<double>(zeros) / static_cast<double>(total);
}

// ---- reporting ----

struct PruneReport {
    std::string model;
    std::string method;  // "effective" or "magnitude"
    double prune_rate = 0;          // requested fraction in [0, 1]
    double achieved_sparsity = 0;   // measured fraction in [0, 1]
    double surrogate_fraction = 0;  // gate-sum remaining fraction in [0, 1]
    std::size_t weights_total = 0;
    std::size_t weights_removed = 0;
    double accuracy_before = 0;  // percent
    double accuracy_after = 0;   // percent

    double accuracy_drop() const { return accuracy_before - accuracy_after; }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw FormatError("cannot write " + path);
        char buf[128];
        auto num = [&](double v) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            return std::string(buf);
        };
        f << "model=" << model << "\n";
        f << "method=" << method << "\n";
        f << "prune_rate=" << num(prune_rate) << "\n";
        f << "achieved_sparsity=" << num(achieved_sparsity) << "\n";
        f << "surrogate_fraction=" << num(surrogate_fraction) << "\n";
        f << "weights_total=" << weights_total << "\n";
        f << "weights_removed=" << weights_removed << "\n";
        f << "accuracy_before=" << num(accuracy_before) << "\n";
        f << "accuracy_after=" << num(accuracy_after) << "\n";
    }

    static PruneReport load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw FormatError("cannot open " + path);
        PruneReport r;
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw FormatError(path + ":" + std::to_string(lineno) + ": expected key=value");
            const std::string key = line.substr(0, eq);
            const std::string val = line.substr(eq + 1);
            if (key == "model") r.model = val;
            else if (key == "method") r.method = val;
            else if (key == "prune_rate") r.prune_rate = std::stod(val);
            else if (key == "achieved_sparsity") r.achieved_sparsity = std::stod(val);
            else if (key == "surrogate_fraction") r.surrogate_fraction = std::stod(val);
            else if (key == "weights_total") r.weights_total = std::stoul(val);
            else if (key == "weights_removed") r.weights_removed = std::stoul(val);
            else if (key == "accuracy_before") r.accuracy_before = std::stod(val);
            else if (key == "accuracy_after") r.accuracy_after = std::stod(val);
            else throw FormatError(path + ":" + std::to_string(lineno) + ": unknown key " + key);
        }
        return r;
    }
};

} // namespace stopband
