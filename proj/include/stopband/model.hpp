#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stopband/graph.hpp"
#include "stopband/kernels.hpp"
#include "stopband/reparam.hpp"
#include "stopband/rng.hpp"
#include "stopband/tensor.hpp"

namespace stopband {

enum class LayerKind { Conv, Linear, Relu, MaxPool, BatchNorm, Flatten, GlobalAvgPool, Residual };

// One layer of the network. Conv and Linear layers own a weight tensor, an
// optional bias, a learnable temperature and an optional pruning mask; only
// their weight tensors are ever gated or counted toward the budget.
// Linear weights are stored [in x out] so the forward pass is x * W.
template <typename S = double>
struct Layer {
    LayerKind kind;

    Tensor<S> w;
    bool has_bias = false;
    Tensor<S> b;
    Temperature<S> temp;
    Tensor<S> mask;  // same shape as w when set; empty means unmasked
    int stride = 1;
    int pad = 0;

    Tensor<S> gamma, beta, running_mean, running_var;

    // Residual only: out = relu(body(x) + shortcut(x)).
    std::vector<Layer<S>> body;
    std::vector<Layer<S>> shortcut;  // empty means identity

    bool is_prunable() const { return kind == LayerKind::Conv || kind == LayerKind::Linear; }
};

template <typename S = double>
struct Model {
    std::string name;
    int num_classes = 10;
    Shape input_shape;  // C,H,W (or a single feature dimension)
    ReparamConfig reparam_cfg;
    bool reparam = true;  // gated (surrogate) forward vs plain forward
    std::vector<Layer<S>> layers;
};

// ---- parameter enumeration ----

enum class ParamKind { Weight, Bias, Gamma, Beta, Temperature };

template <typename S>
struct ParamRef {
    std::string name;
    ParamKind kind;
    Tensor<S>* tensor = nullptr;  // null for Temperature
    S* tau = nullptr;             // Temperature only
    Tensor<S>* mask = nullptr;    // Weight only, may point at an empty tensor
    bool decay = false;           // weight decay applies to conv/linear weights only
};

namespace detail {

template <typename S>
void collect_params(std::vector<Layer<S>>& layers, const std::string& prefix, bool with_tau,
                    std::vector<ParamRef<S>>& out) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        Layer<S>& l = layers[i];
        const std::string base = prefix + "layer" + std::to_string(i);
        switch (l.kind) {
        case LayerKind::Conv:
        case LayerKind::Linear:
            out.push_back({base + ".w", ParamKind::Weight, &l.w, nullptr, &l.mask, true});
            if (l.has_bias)
                out.push_back({base + ".b", ParamKind::Bias, &l.b, nullptr, nullptr, false});
            if (with_tau)
                out.push_back(
                    {base + ".tau", ParamKind::Temperature, nullptr, &l.temp.tau, nullptr, false});
            break;
        case LayerKind::BatchNorm:
            out.push_back({base + ".gamma", ParamKind::Gamma, &l.gamma, nullptr, nullptr, false});
            out.push_back({base + ".beta", ParamKind::Beta, &l.beta, nullptr, nullptr, false});
            break;
        case LayerKind::Residual:
            collect_params(l.body, base + ".body.", with_tau, out);
            collect_params(l.shortcut, base + ".shortcut.", with_tau, out);
            break;
        default:
            break;
        }
    }
}

template <typename S>
void collect_buffers(std::vector<Layer<S>>& layers, const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor<S>*>>& out) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        Layer<S>& l = layers[i];
        const std::string base = prefix + "layer" + std::to_string(i);
        switch (l.kind) {
        case LayerKind::Conv:
        case LayerKind::Linear:
            if (!l.mask.empty()) out.push_back({base + ".mask", &l.mask});
            break;
        case LayerKind::BatchNorm:
            out.push_back({base + ".running_mean", &l.running_mean});
            out.push_back({base + ".running_var", &l.running_var});
            break;
        case LayerKind::Residual:
            collect_buffers(l.body, base + ".body.", out);
            collect_buffers(l.shortcut, base + ".shortcut.", out);
            break;
        default:
            break;
        }
    }
}

} // namespace detail

// Trainable parameters in a fixed recursion order. with_tau selects whether
// temperatures are exposed (they are trained only in reparam mode).
template <typename S>
std::vector<ParamRef<S>> parameters(Model<S>& m, bool with_tau) {
    std::vector<ParamRef<S>> out;
    detail::collect_params(m.layers, "", with_tau, out);
    return out;
}

// Non-trainable state that still belongs in a checkpoint: batchnorm running
// statistics and pruning masks.
template <typename S>
std::vector<std::pair<std::string, Tensor<S>*>> buffers(Model<S>& m) {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    detail::collect_buffers(m.layers, "", out);
    return out;
}

// Exact count of gateable weight elements; this is C_initial.
template <typename S>
std::size_t count_prunable(const Model<S>& m) {
    std::size_t acc = 0;
    auto walk = [&](auto&& self, const std::vector<Layer<S>>& layers) -> void {
        for (const Layer<S>& l : layers) {
            if (l.is_prunable()) acc += l.w.size();
            if (l.kind == LayerKind::Residual) {
                self(self, l.body);
                self(self, l.shortcut);
            }
        }
    };
    walk(walk, m.layers);
    return acc;
}

// ---- construction ----

namespace detail {

template <typename S>
Layer<S> make_conv(std::size_t cin, std::size_t cout, std::size_t k, int stride, int pad,
                   bool bias, const ReparamConfig& rc, Rng& rng) {
    Layer<S> l;
    l.kind = LayerKind::Conv;
    l.stride = stride;
    l.pad = pad;
    l.w = Tensor<S>({cout, cin, k, k});
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    for (std::size_t i = 0; i < l.w.size(); ++i)
        l.w[i] = static_cast<S>(rng.uniform(-bound, bound));
    l.has_bias = bias;
    if (bias) l.b = Tensor<S>({cout});
    l.temp = Temperature<S>::from_t(static_cast<S>(rc.t_init));
    return l;
}

template <typename S>
Layer<S> make_linear(std::size_t in, std::size_t out, const ReparamConfig& rc, Rng& rng) {
    Layer<S> l;
    l.kind = LayerKind::Linear;
    l.w = Tensor<S>({in, out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (std::size_t i = 0; i < l.w.size(); ++i)
        l.w[i] = static_cast<S>(rng.uniform(-bound, bound));
    l.has_bias = true;
    l.b = Tensor<S>({out});
    l.temp = Temperature<S>::from_t(static_cast<S>(rc.t_init));
    return l;
}

template <typename S>
Layer<S> make_bn(std::size_t c) {
    Layer<S> l;
    l.kind = LayerKind::BatchNorm;
    l.gamma = Tensor<S>::full({c}, S(1));
    l.beta = Tensor<S>({c});
    l.running_mean = Tensor<S>({c});
    l.running_var = Tensor<S>::full({c}, S(1));
    return l;
}

template <typename S>
Layer<S> make_plain(LayerKind kind) {
    Layer<S> l;
    l.kind = kind;
    return l;
}

template <typename S>
Layer<S> make_basic_block(std::size_t cin, std::size_t cout, int stride, const ReparamConfig& rc,
                          Rng& rng) {
    Layer<S> l;
    l.kind = LayerKind::Residual;
    l.body.push_back(make_conv<S>(cin, cout, 3, stride, 1, false, rc, rng));
    l.body.push_back(make_bn<S>(cout));
    l.body.push_back(make_plain<S>(LayerKind::Relu));
    l.body.push_back(make_conv<S>(cout, cout, 3, 1, 1, false, rc, rng));
    l.body.push_back(make_bn<S>(cout));
    if (stride != 1 || cin != cout) {
        l.shortcut.push_back(make_conv<S>(cin, cout, 1, stride, 0, false, rc, rng));
        l.shortcut.push_back(make_bn<S>(cout));
    }
    return l;
}

// conv-relu stacks with 2x2 pooling, then a fully connected head. Widths
// follow the small VGG-style network common in pruning studies.
template <typename S>
void build_conv4(Model<S>& m, std::size_t base_width, std::size_t fc_width, Rng& rng) {
    const ReparamConfig& rc = m.reparam_cfg;
    const std::size_t cin = m.input_shape[0];
    const std::size_t w1 = base_width, w2 = base_width * 2;
    m.layers.push_back(make_conv<S>(cin, w1, 3, 1, 1, true, rc, rng));
    m.layers.push_back(make_plain<S>(LayerKind::Relu));
    m.layers.push_back(make_conv<S>(w1, w1, 3, 1, 1, true, rc, rng));
    m.layers.push_back(make_plain<S>(LayerKind::Relu));
    m.layers.push_back(make_plain<S>(LayerKind::MaxPool));
    m.layers.push_back(make_conv<S>(w1, w2, 3, 1, 1, true, rc, rng));
    m.layers.push_back(make_plain<S>(LayerKind::Relu));
    m.layers.push_back(make_conv<S>(w2, w2, 3, 1, 1, true, rc, rng));
    m.layers.push_back(make_plain<S>(LayerKind::Relu));
    m.layers.push_back(make_plain<S>(LayerKind::MaxPool));
    m.layers.push_back(make_plain<S>(LayerKind::Flatten));
    const std::size_t spatial = (m.input_shape[1] / 4) * (m.input_shape[2] / 4);
    m.layers.push_back(make_linear<S>(w2 * spatial, fc_width, rc, rng));
    m.layers.push_back(make_plain<S>(LayerKind::Relu));
    m.layers.push_back(make_linear<S>(fc_width, fc_width, rc, rng));
    m.layers.push_back(make_plain<S>(LayerKind::Relu));
    m.layers.push_back(make_linear<S>(fc_width, static_cast<std::size_t>(m.num_classes), rc, rng));
}

template <typename S>
void build_vgg19(Model<S>& m, Rng& rng) {
    const ReparamConfig& rc = m.reparam_cfg;
    const int cfg[] = {64, 64, -1, 128, 128, -1, 256, 256, 256, 256, -1,
                       512, 512, 512, 512, -1, 512, 512, 512, 512, -1};
    std::size_t c = m.input_shape[0];
    for (int v : cfg) {
        if (v < 0) {
            m.layers.push_back(make_plain<S>(LayerKind::MaxPool));
            continue;
        }
        m.layers.push_back(make_conv<S>(c, static_cast<std::size_t>(v), 3, 1, 1, false, rc, rng));
        m.layers.push_back(make_bn<S>(static_cast<std::size_t>(v)));
        m.layers.push_back(make_plain<S>(LayerKind::Relu));
        c = static_cast<std::size_t>(v);
    }
    m.layers.push_back(make_plain<S>(LayerKind::Flatten));
    const std::size_t spatial = (m.input_shape[1] / 32) * (m.input_shape[2] / 32);
    m.layers.push_back(make_linear<S>(c * spatial, static_cast<std::size_t>(m.num_classes), rc, rng));
}

template <typename S>
void build_resnet18(Model<S>& m, Rng& rng) {
    const ReparamConfig& rc = m.reparam_cfg;
    m.layers.push_back(make_conv<S>(m.input_shape[0], 64, 3, 1, 1, false, rc, rng));
    m.layers.push_back(make_bn<S>(64));
    m.layers.push_back(make_plain<S>(LayerKind::Relu));
    const std::size_t widths[] = {64, 128, 256, 512};
    std::size_t cin = 64;
    for (int stage = 0; stage < 4; ++stage) {
        const std::size_t cout = widths[stage];
        const int stride = stage == 0 ? 1 : 2;
        m.layers.push_back(make_basic_block<S>(cin, cout, stride, rc, rng));
        m.layers.push_back(make_basic_block<S>(cout, cout, 1, rc, rng));
        cin = cout;
    }
    m.layers.push_back(make_plain<S>(LayerKind::GlobalAvgPool));
    m.layers.push_back(make_linear<S>(cin, static_cast<std::size_t>(m.num_classes), rc, rng));
}

} // namespace detail

// Builds a named architecture with fan-in scaled uniform weights drawn from a
// fixed seed. The same (name, shape, seed) always yields bit-identical
// parameters.
template <typename S = double>
Model<S> build(const std::string& name, int num_classes, Shape input_shape,
               const ReparamConfig& rc, std::uint64_t seed, bool reparam_mode = true) {
    rc.validate();
    if (num_classes < 2) throw UsageError("num_classes must be >= 2");
    Model<S> m;
    m.name = name;
    m.num_classes = num_classes;
    m.input_shape = std::move(input_shape);
    m.reparam_cfg = rc;
    m.reparam = reparam_mode;
    Rng rng(Rng::mix(seed, 0x6d6f64656cull));  // init stream

    auto features = [&] {
        std::size_t n = 1;
        for (std::size_t d : m.input_shape) n *= d;
        return n;
    };

    if (name == "mlp-toy") {
        m.layers.push_back(detail::make_plain<S>(LayerKind::Flatten));
        m.layers.push_back(detail::make_linear<S>(features(), 64, rc, rng));
        m.layers.push_back(detail::make_plain<S>(LayerKind::Relu));
        m.layers.push_back(detail::make_linear<S>(64, static_cast<std::size_t>(num_classes), rc, rng));
    } else if (name == "linear-toy") {
        m.layers.push_back(detail::make_plain<S>(LayerKind::Flatten));
        m.layers.push_back(detail::make_linear<S>(features(), static_cast<std::size_t>(num_classes), rc, rng));
    } else if (name == "conv4" || name == "conv4-small") {
        if (m.input_shape.size() != 3) throw UsageError(name + " expects a C,H,W input shape");
        if (m.input_shape[1] % 4 != 0 || m.input_shape[2] % 4 != 0)
            throw UsageError(name + " needs spatial dimensions divisible by 4");
        if (name == "conv4")
            detail::build_conv4(m, 64, 256, rng);
        else
            detail::build_conv4(m, 32, 128, rng);
    } else if (name == "vgg19") {
        if (m.input_shape.size() != 3 || m.input_shape[1] % 32 != 0 || m.input_shape[2] % 32 != 0)
            throw UsageError("vgg19 needs a C,H,W input with spatial dimensions divisible by 32");
        detail::build_vgg19(m, rng);
    } else if (name == "resnet18") {
        if (m.input_shape.size() != 3 || m.input_shape[1] % 8 != 0 || m.input_shape[2] % 8 != 0)
            throw UsageError("resnet18 needs a C,H,W input with spatial dimensions divisible by 8");
        detail::build_resnet18(m, rng);
    } else {
        throw UsageError("unknown model '" + name + "'");
    }
    return m;
}

// ---- graph forward (training path) ----

// Leaf nodes created for one optimization step, aligned with parameters().
template <typename S>
struct GraphBinding {
    std::vector<ParamRef<S>> params;
    std::vector<typename Graph<S>::NodeRef> nodes;
    std::vector<typename Graph<S>::NodeRef> gates;  // one per prunable layer, reparam mode only
};

namespace detail {

template <typename S>
typename Graph<S>::NodeRef forward_layers(Graph<S>& g, std::vector<Layer<S>>& layers,
                                          typename Graph<S>::NodeRef x, const Model<S>& m,
                                          GraphBinding<S>& bind, std::size_t& cursor,
                                          bool training) {
    using Ref = typename Graph<S>::NodeRef;
    auto next_node = [&](ParamKind kind) {
        // parameters() emits in the same recursion order as this walk
        const ParamRef<S>& p = bind.params[cursor];
        if (p.kind != kind) throw UsageError("parameter walk out of sync");
        return bind.nodes[cursor++];
    };
    for (Layer<S>& l : layers) {
        switch (l.kind) {
        case LayerKind::Conv:
        case LayerKind::Linear: {
            Ref w = next_node(ParamKind::Weight);
            Ref b{};
            if (l.has_bias) b = next_node(ParamKind::Bias);
            Ref weights = w;
            if (m.reparam) {
                Ref tau = next_node(ParamKind::Temperature);
                Ref gate = g.stopband_gate(w, tau, m.reparam_cfg.crispness);
                bind.gates.push_back(gate);
                weights = g.mul(w, gate);
            }
            if (l.kind == LayerKind::Conv) {
                x = g.conv2d(x, weights, l.stride, l.pad);
            } else {
                x = g.matmul(x, weights);
            }
            if (l.has_bias) x = g.add_bias(x, b);
            break;
        }
        case LayerKind::BatchNorm: {
            Ref gamma = next_node(ParamKind::Gamma);
            Ref beta = next_node(ParamKind::Beta);
            x = g.batchnorm2d(x, gamma, beta, l.running_mean, l.running_var, training, S(0.1),
                              S(1e-5));
            break;
        }
        case LayerKind::Relu:
            x = g.relu(x);
            break;
        case LayerKind::MaxPool:
            x = g.maxpool2d(x);
            break;
        case LayerKind::Flatten:
            x = g.flatten(x);
            break;
        case LayerKind::GlobalAvgPool:
            x = g.global_avg_pool(x);
            break;
        case LayerKind::Residual: {
            Ref y = forward_layers(g, l.body, x, m, bind, cursor, training);
            Ref s = l.shortcut.empty()
                        ? x
                        : forward_layers(g, l.shortcut, x, m, bind, cursor, training);
            x = g.relu(g.add(y, s));
            break;
        }
        }
    }
    return x;
}

} // namespace detail

// Copies every trainable parameter into the tape as a leaf. Gradients are
// read back from the returned binding after backward().
template <typename S>
GraphBinding<S> bind_parameters(Graph<S>& g, Model<S>& m) {
    GraphBinding<S> bind;
    bind.params = parameters(m, /*with_tau=*/m.reparam);
    bind.nodes.reserve(bind.params.size());
    for (const ParamRef<S>& p : bind.params) {
        if (p.kind == ParamKind::Temperature)
            bind.nodes.push_back(g.leaf(Tensor<S>::scalar(*p.tau)));
        else
            bind.nodes.push_back(g.leaf(*p.tensor));
    }
    return bind;
}

// Forward pass over the tape. In reparam mode every conv/linear weight is
// gated elementwise before use and the gate nodes are collected for the
// budget term.
template <typename S>
typename Graph<S>::NodeRef forward(Graph<S>& g, Model<S>& m, GraphBinding<S>& bind,
                                   typename Graph<S>::NodeRef input, bool training = true) {
    std::size_t cursor = 0;
    auto out = detail::forward_layers(g, m.layers, input, m, bind, cursor, training);
    if (cursor != bind.params.size()) throw UsageError("parameter walk incomplete");
    return out;
}

// ---- eval forward (no tape, running batchnorm statistics) ----

namespace detail {

template <typename S>
Tensor<S> eval_layers(const std::vector<Layer<S>>& layers, Tensor<S> x, const Model<S>& m) {
    for (const Layer<S>& l : layers) {
        switch (l.kind) {
        case LayerKind::Conv:
        case LayerKind::Linear: {
            const Tensor<S>* weights = &l.w;
            Tensor<S> gated;
            if (m.reparam) {
                gated = apparent_weights(l.w, l.temp.t(), m.reparam_cfg.crispness);
                weights = &gated;
            }
            x = l.kind == LayerKind::Conv ? kernels::conv2d(x, *weights, l.stride, l.pad)
                                          : kernels::matmul(x, *weights);
            if (l.has_bias) x = kernels::add_bias(x, l.b);
            break;
        }
        case LayerKind::BatchNorm: {
            auto& rm = const_cast<Tensor<S>&>(l.running_mean);
            auto& rv = const_cast<Tensor<S>&>(l.running_var);
            x = kernels::batchnorm2d(x, l.gamma, l.beta, rm, rv, /*training=*/false, S(0.1),
                                     S(1e-5), static_cast<kernels::BatchNormCache<S>*>(nullptr));
            break;
        }
        case LayerKind::Relu:
            x = kernels::relu(x);
            break;
        case LayerKind::MaxPool:
            x = kernels::maxpool2d(x, static_cast<std::vector<std::size_t>*>(nullptr));
            break;
        case LayerKind::Flatten:
            x = x.reshaped({x.dim(0), x.size() / x.dim(0)});
            break;
        case LayerKind::GlobalAvgPool:
            x = kernels::global_avg_pool(x);
            break;
        case LayerKind::Residual: {
            Tensor<S> y = eval_layers(l.body, x, m);
            Tensor<S> s = l.shortcut.empty() ? x : eval_layers(l.shortcut, x, m);
            for (std::size_t i = 0; i < y.size(); ++i) y[i] += s[i];
            x = kernels::relu(y);
            break;
        }
        }
    }
    return x;
}

} // namespace detail

template <typename S>
Tensor<S> forward_eval(const Model<S>& m, const Tensor<S>& batch) {
    return detail::eval_layers(m.layers, batch, m);
}

// Total gate response over all prunable tensors: the differentiable stand-in
// for the number of surviving weights.
template <typename S>
S surrogate_cost_value(const Model<S>& m) {
    S acc = 0;
    auto walk = [&](auto&& self, const std::vector<Layer<S>>& layers) -> void {
        for (const Layer<S>& l : layers) {
            if (l.is_prunable()) acc += gate_sum(l.w, l.temp.t(), m.reparam_cfg.crispness);
            if (l.kind == LayerKind::Residual) {
                self(self, l.body);
                self(self, l.shortcut);
            }
        }
    };
    walk(walk, m.layers);
    return acc;
}

} // namespace stopband
