#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "stopband/kernels.hpp"
#include "stopband/reparam.hpp"
#include "stopband/tensor.hpp"

namespace stopband {

// Reverse-mode tape. Ops append nodes in execution order, so walking the
// node list backwards from the loss is an exact reverse topological order.
// The tape is rebuilt every optimization step; backward() accumulates into
// node gradients, so calling it twice on the same tape doubles them.
template <typename S>
class Graph {
public:
    struct NodeRef {
        std::uint32_t i = 0;
    };

    NodeRef leaf(Tensor<S> v) { return push(std::move(v), nullptr); }

    const Tensor<S>& value(NodeRef r) const { return nodes_[r.i].value; }
    const Tensor<S>& grad(NodeRef r) const { return nodes_[r.i].grad; }
    std::size_t node_count() const { return nodes_.size(); }

    // ---- elementwise ----

    NodeRef add(NodeRef a, NodeRef b) {
        require_same_shape(a, b, "add");
        Tensor<S> out = value(a);
        const Tensor<S>& vb = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
        return push(std::move(out), [a, b](Graph& g, const Tensor<S>& go) {
            g.axpy(go, a);
            g.axpy(go, b);
        });
    }

    NodeRef sub(NodeRef a, NodeRef b) {
        require_same_shape(a, b, "sub");
        Tensor<S> out = value(a);
        const Tensor<S>& vb = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
        return push(std::move(out), [a, b](Graph& g, const Tensor<S>& go) {
            g.axpy(go, a);
            Tensor<S>& gb = g.nodes_[b.i].grad;
            for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
        });
    }

    NodeRef mul(NodeRef a, NodeRef b) {
        require_same_shape(a, b, "mul");
        Tensor<S> out = value(a);
        const Tensor<S>& vb = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
        return push(std::move(out), [a, b](Graph& g, const Tensor<S>& go) {
            const Tensor<S>& va = g.value(a);
            const Tensor<S>& vb2 = g.value(b);
            Tensor<S>& ga = g.nodes_[a.i].grad;
            Tensor<S>& gb = g.nodes_[b.i].grad;
            for (std::size_t i = 0; i < go.size(); ++i) {
                ga[i] += go[i] * vb2[i];
                gb[i] += go[i] * va[i];
            }
        });
    }

    NodeRef scale(NodeRef a, S c) {
        Tensor<S> out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
        return push(std::move(out), [a, c](Graph& g, const Tensor<S>& go) {
            Tensor<S>& ga = g.nodes_[a.i].grad;
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += c * go[i];
        });
    }

    NodeRef add_const(NodeRef a, S c) {
        Tensor<S> out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += c;
        return push(std::move(out),
                    [a](Graph& g, const Tensor<S>& go) { g.axpy(go, a); });
    }

    NodeRef square(NodeRef a) {
        Tensor<S> out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= out[i];
        return push(std::move(out), [a](Graph& g, const Tensor<S>& go) {
            const Tensor<S>& va = g.value(a);
            Tensor<S>& ga = g.nodes_[a.i].grad;
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += S(2) * va[i] * go[i];
        });
    }

    NodeRef exp(NodeRef a) {
        Tensor<S> out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
        NodeRef r = push(std::move(out), nullptr);
        nodes_[r.i].backprop = [a, r](Graph& g, const Tensor<S>& go) {
            const Tensor<S>& vy = g.value(r);
            Tensor<S>& ga = g.nodes_[a.i].grad;
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += vy[i] * go[i];
        };
        return r;
    }

    NodeRef reciprocal(NodeRef a) {
        Tensor<S> out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = S(1) / out[i];
        NodeRef r = push(std::move(out), nullptr);
        nodes_[r.i].backprop = [a, r](Graph& g, const Tensor<S>& go) {
            const Tensor<S>& vy = g.value(r);
            Tensor<S>& ga = g.nodes_[a.i].grad;
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] -= vy[i] * vy[i] * go[i];
        };
        return r;
    }

    NodeRef abs(NodeRef a) {
        Tensor<S> out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] < S(0) ? -out[i] : out[i];
        return push(std::move(out), [a](Graph& g, const Tensor<S>& go) {
            const Tensor<S>& va = g.value(a);
            Tensor<S>& ga = g.nodes_[a.i].grad;
            for (std::size_t i = 0; i < go.size(); ++i) {
                if (va[i] > S(0)) ga[i] += go[i];
                else if (va[i] < S(0)) ga[i] -= go[i];
                // subgradient at 0 is 0
            }
        });
    }

    NodeRef even_power(NodeRef a, int n) {
        if (n < 2 || n % 2 != 0) throw UsageError("even_power requires a positive even exponent");
        Tensor<S> out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = pow_even(out[i], n);
        NodeRef r = push(std::move(out), nullptr);
        nodes_[r.i].backprop = [a, r, n](Graph& g, const Tensor<S>& go) {
            const Tensor<S>& va = g.value(a);
            const Tensor<S>& vy = g.value(r);
            Tensor<S>& ga = g.nodes_[a.i].grad;
            for (std::size_t i = 0; i < go.size(); ++i) {
                if (va[i] == S(0)) continue;  // n >= 2, derivative is 0 at the origin
                ga[i] += go[i] * static_cast<S>(n) * vy[i] / va[i];
            }
        };
        return r;
    }

    // ---- reductions ----

    NodeRef sum(NodeRef a) {
        S acc = 0;
        const Tensor<S>& va = value(a);
        for (std::size_t i = 0; i < va.size(); ++i) acc += va[i];
        return push(Tensor<S>::scalar(acc), [a](Graph& g, const Tensor<S>& go) {
            Tensor<S>& ga = g.nodes_[a.i].grad;
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[0];
        });
    }

    NodeRef mean(NodeRef a) {
        S acc = 0;
        const Tensor<S>& va = value(a);
        for (std::size_t i = 0; i < va.size(); ++i) acc += va[i];
        const S inv = S(1) / static_cast<S>(va.size());
        return push(Tensor<S>::scalar(acc * inv), [a, inv](Graph& g, const Tensor<S>& go) {
            Tensor<S>& ga = g.nodes_[a.i].grad;
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[0] * inv;
        });
    }

    // ---- linear algebra / network layers ----

    NodeRef matmul(NodeRef a, NodeRef b) {
        Tensor<S> out = kernels::matmul(value(a), value(b));
        return push(std::move(out), [a, b](Graph& g, const Tensor<S>& go) {
            kernels::matmul_backward(g.value(a), g.value(b), go, g.nodes_[a.i].grad,
                                     g.nodes_[b.i].grad);
        });
    }

    NodeRef conv2d(NodeRef x, NodeRef k, int stride, int pad) {
        Tensor<S> out = kernels::conv2d(value(x), value(k), stride, pad);
        return push(std::move(out), [x, k, stride, pad](Graph& g, const Tensor<S>& go) {
            kernels::conv2d_backward(g.value(x), g.value(k), go, stride, pad, g.nodes_[x.i].grad,
                                     g.nodes_[k.i].grad);
        });
    }

    NodeRef add_bias(NodeRef x, NodeRef b) {
        Tensor<S> out = kernels::add_bias(value(x), value(b));
        Shape xshape = value(x).shape();
        return push(std::move(out), [x, b, xshape](Graph& g, const Tensor<S>& go) {
            kernels::add_bias_backward(xshape, go, g.nodes_[x.i].grad, g.nodes_[b.i].grad);
        });
    }

    NodeRef relu(NodeRef x) {
        Tensor<S> out = kernels::relu(value(x));
        return push(std::move(out), [x](Graph& g, const Tensor<S>& go) {
            kernels::relu_backward(g.value(x), go, g.nodes_[x.i].grad);
        });
    }

    NodeRef maxpool2d(NodeRef x) {
        std::vector<std::size_t> argmax;
        Tensor<S> out = kernels::maxpool2d(value(x), &argmax);
        return push(std::move(out),
                    [x, argmax = std::move(argmax)](Graph& g, const Tensor<S>& go) {
                        kernels::maxpool2d_backward(argmax, go, g.nodes_[x.i].grad);
                    });
    }

    NodeRef batchnorm2d(NodeRef x, NodeRef gamma, NodeRef beta, Tensor<S>& running_mean,
                        Tensor<S>& running_var, bool training, S momentum, S eps) {
        kernels::BatchNormCache<S> cache;
        Tensor<S> out = kernels::batchnorm2d(value(x), value(gamma), value(beta), running_mean,
                                             running_var, training, momentum, eps, &cache);
        return push(std::move(out), [x, gamma, beta, training,
                                     cache = std::move(cache)](Graph& g, const Tensor<S>& go) {
            if (training) {
                kernels::batchnorm2d_backward(g.value(x), g.value(gamma), cache, go,
                                              g.nodes_[x.i].grad, g.nodes_[gamma.i].grad,
                                              g.nodes_[beta.i].grad);
            } else {
                // Running statistics are constants; normalization is affine.
                const Tensor<S>& vx = g.value(x);
                const Tensor<S>& vg = g.value(gamma);
                Tensor<S>& gx = g.nodes_[x.i].grad;
                Tensor<S>& gg = g.nodes_[gamma.i].grad;
                Tensor<S>& gb = g.nodes_[beta.i].grad;
                const std::size_t n = vx.dim(0), c = vx.dim(1), hw = vx.dim(2) * vx.dim(3);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const S mu = cache.mean[ch], invstd = cache.invstd[ch];
                    for (std::size_t b = 0; b < n; ++b) {
                        const std::size_t off = (b * c + ch) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                            const S xhat = (vx[off + i] - mu) * invstd;
                            gx[off + i] += go[off + i] * vg[ch] * invstd;
                            gg[ch] += go[off + i] * xhat;
                            gb[ch] += go[off + i];
                        }
                    }
                }
            }
        });
    }

    NodeRef flatten(NodeRef x) {
        const Tensor<S>& vx = value(x);
        if (vx.rank() < 2) throw ShapeError("flatten expects rank >= 2");
        Tensor<S> out = vx.reshaped({vx.dim(0), vx.size() / vx.dim(0)});
        return push(std::move(out),
                    [x](Graph& g, const Tensor<S>& go) { g.axpy(go, x); });
    }

    NodeRef global_avg_pool(NodeRef x) {
        Tensor<S> out = kernels::global_avg_pool(value(x));
        Shape xshape = value(x).shape();
        return push(std::move(out), [x, xshape](Graph& g, const Tensor<S>& go) {
            kernels::global_avg_pool_backward(xshape, go, g.nodes_[x.i].grad);
        });
    }

    NodeRef softmax_cross_entropy(NodeRef logits, std::vector<int> labels) {
        Tensor<S> probs;
        S loss = kernels::softmax_cross_entropy(value(logits), labels, &probs);
        return push(Tensor<S>::scalar(loss),
                    [logits, labels = std::move(labels),
                     probs = std::move(probs)](Graph& g, const Tensor<S>& go) {
                        kernels::softmax_cross_entropy_backward(probs, labels, go[0],
                                                                g.nodes_[logits.i].grad);
                    });
    }

    // ---- reparametrization ----

    // Elementwise stopband gate h(w; t, n) with t = exp(tau), tau a scalar
    // leaf. Gradients flow to both the weights and the temperature.
    NodeRef stopband_gate(NodeRef w, NodeRef tau, int n) {
        if (value(tau).size() != 1) throw UsageError("stopband_gate expects scalar tau");
        const Tensor<S>& vw = value(w);
        const S t = std::exp(value(tau)[0]);
        check_gate_args(t, n);
        Tensor<S> out(vw.shape());
        std::vector<S> dx(vw.size());
        std::vector<S> dtau(vw.size());  // dh/dtau = dh/dt * t
        for (std::size_t i = 0; i < vw.size(); ++i) {
            GateEval<S> e = gate_eval(vw[i], t, n);
            out[i] = e.h;
            dx[i] = e.dh_dx;
            dtau[i] = e.dh_dt * t;
        }
        return push(std::move(out), [w, tau, dx = std::move(dx),
                                     dtau = std::move(dtau)](Graph& g, const Tensor<S>& go) {
            Tensor<S>& gw = g.nodes_[w.i].grad;
            Tensor<S>& gt = g.nodes_[tau.i].grad;
            S acc = 0;
            for (std::size_t i = 0; i < go.size(); ++i) {
                gw[i] += go[i] * dx[i];
                acc += go[i] * dtau[i];
            }
            gt[0] += acc;
        });
    }

    // Naive gate of the unstable formulation, fixed temperature. Produces
    // non-finite gradients around w = 0; for demonstration only.
    NodeRef unstable_gate(NodeRef w, S t, int n) {
        check_gate_args(t, n);
        const Tensor<S>& vw = value(w);
        Tensor<S> out(vw.shape());
        for (std::size_t i = 0; i < vw.size(); ++i) out[i] = gate_unstable(vw[i], t, n);
        return push(std::move(out), [w, t, n](Graph& g, const Tensor<S>& go) {
            const Tensor<S>& vw2 = g.value(w);
            Tensor<S>& gw = g.nodes_[w.i].grad;
            for (std::size_t i = 0; i < go.size(); ++i)
                gw[i] += go[i] * gate_unstable_dx(vw2[i], t, n);
        });
    }

    // ---- backward ----

    void backward(NodeRef loss) {
        if (value(loss).size() != 1)
            throw UsageError("backward: loss must be scalar, got shape " +
                             shape_str(value(loss).shape()));
        nodes_[loss.i].grad[0] += S(1);
        for (std::uint32_t i = loss.i + 1; i-- > 0;) {
            Node& node = nodes_[i];
            if (node.backprop) node.backprop(*this, node.grad);
        }
    }

private:
    struct Node {
        Tensor<S> value;
        Tensor<S> grad;
        std::function<void(Graph&, const Tensor<S>&)> backprop;
    };

    void require_same_shape(NodeRef a, NodeRef b, const char* op) const {
        if (!value(a).same_shape(value(b)))
            throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(value(a).shape()) +
                             " vs " + shape_str(value(b).shape()));
    }

    void axpy(const Tensor<S>& go, NodeRef a) {
        Tensor<S>& ga = nodes_[a.i].grad;
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }

    NodeRef push(Tensor<S> v, std::function<void(Graph&, const Tensor<S>&)> fn) {
        Node node;
        node.grad = Tensor<S>(v.shape());
        node.value = std::move(v);
        node.backprop = std::move(fn);
        nodes_.push_back(std::move(node));
        return NodeRef{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    std::vector<Node> nodes_;
};

} // namespace stopband
