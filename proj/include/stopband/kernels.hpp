#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "stopband/errors.hpp"
#include "stopband/tensor.hpp"

// Dense CPU kernels. Every forward has a matching backward that accumulates
// into caller-owned gradient buffers. All loops are single threaded with a
// fixed iteration order so results are bitwise reproducible.

namespace stopband::kernels {

// ---- small gemm helpers (row major) ----

// C (+)= A[m x k] * B[k x p]
template <typename S>
void gemm_nn(std::size_t m, std::size_t k, std::size_t p, const S* A, const S* B, S* C,
             bool accumulate) {
    if (!accumulate) std::fill(C, C + m * p, S(0));
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = A + i * k;
        S* crow = C + i * p;
        for (std::size_t l = 0; l < k; ++l) {
            S a = arow[l];
            if (a == S(0)) continue;
            const S* brow = B + l * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += a * brow[j];
        }
    }
}

// C (+)= A[m x k] * B[p x k]^T
template <typename S>
void gemm_nt(std::size_t m, std::size_t k, std::size_t p, const S* A, const S* B, S* C,
             bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = A + i * k;
        S* crow = C + i * p;
        for (std::size_t j = 0; j < p; ++j) {
            const S* brow = B + j * k;
            S acc = 0;
            for (std::size_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

// C (+)= A[k x m]^T * B[k x p]
template <typename S>
void gemm_tn(std::size_t m, std::size_t k, std::size_t p, const S* A, const S* B, S* C,
             bool accumulate) {
    if (!accumulate) std::fill(C, C + m * p, S(0));
    for (std::size_t l = 0; l < k; ++l) {
        const S* arow = A + l * m;
        const S* brow = B + l * p;
        for (std::size_t i = 0; i < m; ++i) {
            S a = arow[i];
            if (a == S(0)) continue;
            S* crow = C + i * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += a * brow[j];
        }
    }
}

// ---- matmul ----

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<S> c({a.dim(0), b.dim(1)});
    gemm_nn(a.dim(0), a.dim(1), b.dim(1), a.data(), b.data(), c.data(), false);
    return c;
}

template <typename S>
void matmul_backward(const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& gout, Tensor<S>& ga,
                     Tensor<S>& gb) {
    // dA += dC * B^T ; dB += A^T * dC
    gemm_nt(a.dim(0), b.dim(1), a.dim(1), gout.data(), b.data(), ga.data(), true);
    gemm_tn(a.dim(1), a.dim(0), b.dim(1), a.data(), gout.data(), gb.data(), true);
}

// ---- conv2d (cross-correlation, NCHW input, FCHW kernel) ----

struct ConvDims {
    std::size_t n, c, h, w;    // input
    std::size_t f, kh, kw;     // kernel
    std::size_t oh, ow;        // output
    int stride, pad;
};

template <typename S>
ConvDims conv2d_dims(const Tensor<S>& x, const Tensor<S>& k, int stride, int pad) {
    if (x.rank() != 4 || k.rank() != 4)
        throw ShapeError("conv2d expects NCHW input and FCHW kernel");
    if (stride < 1) throw UsageError("conv2d stride must be >= 1");
    if (pad < 0) throw UsageError("conv2d padding must be >= 0");
    ConvDims d;
    d.n = x.dim(0); d.c = x.dim(1); d.h = x.dim(2); d.w = x.dim(3);
    d.f = k.dim(0); d.kh = k.dim(2); d.kw = k.dim(3);
    d.stride = stride; d.pad = pad;
    if (k.dim(1) != d.c)
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", kernel " +
                         shape_str(k.shape()));
    std::size_t ph = d.h + 2 * static_cast<std::size_t>(pad);
    std::size_t pw = d.w + 2 * static_cast<std::size_t>(pad);
    if (d.kh > ph || d.kw > pw)
        throw ShapeError("conv2d kernel " + shape_str(k.shape()) + " larger than padded input");
    d.oh = (ph - d.kh) / static_cast<std::size_t>(stride) + 1;
    d.ow = (pw - d.kw) / static_cast<std::size_t>(stride) + 1;
    return d;
}

// cols layout: [C*KH*KW, OH*OW]
template <typename S>
void im2col(const S* x, const ConvDims& d, S* cols) {
    const std::size_t ohw = d.oh * d.ow;
    for (std::size_t c = 0; c < d.c; ++c) {
        const S* plane = x + c * d.h * d.w;
        for (std::size_t kh = 0; kh < d.kh; ++kh) {
            for (std::size_t kw = 0; kw < d.kw; ++kw) {
                S* dst = cols + ((c * d.kh + kh) * d.kw + kw) * ohw;
                for (std::size_t oh = 0; oh < d.oh; ++oh) {
                    long ih = static_cast<long>(oh) * d.stride - d.pad + static_cast<long>(kh);
                    if (ih < 0 || ih >= static_cast<long>(d.h)) {
                        std::fill(dst, dst + d.ow, S(0));
                        dst += d.ow;
                        continue;
                    }
                    const S* srow = plane + static_cast<std::size_t>(ih) * d.w;
                    for (std::size_t ow = 0; ow < d.ow; ++ow) {
                        long iw = static_cast<long>(ow) * d.stride - d.pad + static_cast<long>(kw);
                        *dst++ = (iw < 0 || iw >= static_cast<long>(d.w))
                                     ? S(0)
                                     : srow[static_cast<std::size_t>(iw)];
                    }
                }
            }
        }
    }
}

template <typename S>
void col2im_acc(const S* cols, const ConvDims& d, S* gx) {
    const std::size_t ohw = d.oh * d.ow;
    for (std::size_t c = 0; c < d.c; ++c) {
        S* plane = gx + c * d.h * d.w;
        for (std::size_t kh = 0; kh < d.kh; ++kh) {
            for (std::size_t kw = 0; kw < d.kw; ++kw) {
                const S* src = cols + ((c * d.kh + kh) * d.kw + kw) * ohw;
                for (std::size_t oh = 0; oh < d.oh; ++oh) {
                    long ih = static_cast<long>(oh) * d.stride - d.pad + static_cast<long>(kh);
                    if (ih < 0 || ih >= static_cast<long>(d.h)) {
                        src += d.ow;
                        continue;
                    }
                    S* drow = plane + static_cast<std::size_t>(ih) * d.w;
                    for (std::size_t ow = 0; ow < d.ow; ++ow) {
                        long iw = static_cast<long>(ow) * d.stride - d.pad + static_cast<long>(kw);
                        if (iw >= 0 && iw < static_cast<long>(d.w))
                            drow[static_cast<std::size_t>(iw)] += src[ow];
                    }
                    src += d.ow;
                }
            }
        }
    }
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& k, int stride, int pad) {
    ConvDims d = conv2d_dims(x, k, stride, pad);
    Tensor<S> out({d.n, d.f, d.oh, d.ow});
    const std::size_t ckk = d.c * d.kh * d.kw;
    const std::size_t ohw = d.oh * d.ow;
    std::vector<S> cols(ckk * ohw);
    for (std::size_t n = 0; n < d.n; ++n) {
        im2col(x.data() + n * d.c * d.h * d.w, d, cols.data());
        gemm_nn(d.f, ckk, ohw, k.data(), cols.data(), out.data() + n * d.f * ohw, false);
    }
    return out;
}

template <typename S>
void conv2d_backward(const Tensor<S>& x, const Tensor<S>& k, const Tensor<S>& gout, int stride,
                     int pad, Tensor<S>& gx, Tensor<S>& gk) {
    ConvDims d = conv2d_dims(x, k, stride, pad);
    const std::size_t ckk = d.c * d.kh * d.kw;
    const std::size_t ohw = d.oh * d.ow;
    std::vector<S> cols(ckk * ohw);
    std::vector<S> gcols(ckk * ohw);
    for (std::size_t n = 0; n < d.n; ++n) {
        const S* go = gout.data() + n * d.f * ohw;
        im2col(x.data() + n * d.c * d.h * d.w, d, cols.data());
        // dK += dOut * cols^T
        gemm_nt(d.f, ohw, ckk, go, cols.data(), gk.data(), true);
        // dcols = K^T * dOut, scattered back to dX
        gemm_tn(ckk, d.f, ohw, k.data(), go, gcols.data(), false);
        col2im_acc(gcols.data(), d, gx.data() + n * d.c * d.h * d.w);
    }
}

// ---- relu ----

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > S(0) ? x[i] : S(0);
    return out;
}

// Subgradient at 0 is 0.
template <typename S>
void relu_backward(const Tensor<S>& x, const Tensor<S>& gout, Tensor<S>& gx) {
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] > S(0)) gx[i] += gout[i];
}

// ---- maxpool 2x2 stride 2, ties to the first element in row-major order ----

template <typename S>
Tensor<S> maxpool2d(const Tensor<S>& x, std::vector<std::size_t>* argmax) {
    if (x.rank() != 4) throw ShapeError("maxpool2d expects NCHW input");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h < 2 || w < 2) throw ShapeError("maxpool2d input smaller than 2x2 window");
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor<S> out({n, c, oh, ow});
    if (argmax) argmax->resize(out.size());
    std::size_t oi = 0;
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        const S* plane = x.data() + nc * h * w;
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t base = (2 * i) * w + 2 * j;
                std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
                std::size_t best = cand[0];
                for (int q = 1; q < 4; ++q)
                    if (plane[cand[q]] > plane[best]) best = cand[q];
                out[oi] = plane[best];
                if (argmax) (*argmax)[oi] = nc * h * w + best;
                ++oi;
            }
        }
    }
    return out;
}

template <typename S>
void maxpool2d_backward(const std::vector<std::size_t>& argmax, const Tensor<S>& gout,
                        Tensor<S>& gx) {
    for (std::size_t i = 0; i < gout.size(); ++i) gx[argmax[i]] += gout[i];
}

// ---- batchnorm2d ----

template <typename S>
struct BatchNormCache {
    std::vector<S> mean, invstd;  // per channel, training mode
};

// Training mode normalizes with batch statistics and updates running stats in
// place (biased variance for normalization, unbiased for the running buffer).
// Eval mode uses the running statistics.
template <typename S>
Tensor<S> batchnorm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                      Tensor<S>& running_mean, Tensor<S>& running_var, bool training, S momentum,
                      S eps, BatchNormCache<S>* cache) {
    if (x.rank() != 4) throw ShapeError("batchnorm2d expects NCHW input");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.size() != c || beta.size() != c)
        throw ShapeError("batchnorm2d parameter size mismatch");
    Tensor<S> out(x.shape());
    const std::size_t m = n * hw;
    for (std::size_t ch = 0; ch < c; ++ch) {
        S mu, invstd;
        if (training) {
            S sum = 0;
            for (std::size_t b = 0; b < n; ++b) {
                const S* p = x.data() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) sum += p[i];
            }
            mu = sum / static_cast<S>(m);
            S var = 0;
            for (std::size_t b = 0; b < n; ++b) {
                const S* p = x.data() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    S dvi = p[i] - mu;
                    var += dvi * dvi;
                }
            }
            var /= static_cast<S>(m);
            invstd = S(1) / std::sqrt(var + eps);
            S unbiased = m > 1 ? var * static_cast<S>(m) / static_cast<S>(m - 1) : var;
            running_mean[ch] = (S(1) - momentum) * running_mean[ch] + momentum * mu;
            running_var[ch] = (S(1) - momentum) * running_var[ch] + momentum * unbiased;
            if (cache) {
                if (cache->mean.size() != c) { cache->mean.resize(c); cache->invstd.resize(c); }
                cache->mean[ch] = mu;
                cache->invstd[ch] = invstd;
            }
        } else {
            mu = running_mean[ch];
            invstd = S(1) / std::sqrt(running_var[ch] + eps);
            if (cache) {
                if (cache->mean.size() != c) { cache->mean.resize(c); cache->invstd.resize(c); }
                cache->mean[ch] = mu;
                cache->invstd[ch] = invstd;
            }
        }
        const S g = gamma[ch], b0 = beta[ch];
        for (std::size_t b = 0; b < n; ++b) {
            const S* p = x.data() + (b * c + ch) * hw;
            S* q = out.data() + (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) q[i] = g * (p[i] - mu) * invstd + b0;
        }
    }
    return out;
}

template <typename S>
void batchnorm2d_backward(const Tensor<S>& x, const Tensor<S>& gamma,
                          const BatchNormCache<S>& cache, const Tensor<S>& gout, Tensor<S>& gx,
                          Tensor<S>& ggamma, Tensor<S>& gbeta) {
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const std::size_t m = n * hw;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const S mu = cache.mean[ch], invstd = cache.invstd[ch], g = gamma[ch];
        S sum_dy = 0, sum_dy_xhat = 0;
        for (std::size_t b = 0; b < n; ++b) {
            const S* px = x.data() + (b * c + ch) * hw;
            const S* pg = gout.data() + (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                S xhat = (px[i] - mu) * invstd;
                sum_dy += pg[i];
                sum_dy_xhat += pg[i] * xhat;
            }
        }
        ggamma[ch] += sum_dy_xhat;
        gbeta[ch] += sum_dy;
        const S scale = g * invstd / static_cast<S>(m);
        for (std::size_t b = 0; b < n; ++b) {
            const S* px = x.data() + (b * c + ch) * hw;
            const S* pg = gout.data() + (b * c + ch) * hw;
            S* pgx = gx.data() + (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                S xhat = (px[i] - mu) * invstd;
                pgx[i] += scale * (static_cast<S>(m) * pg[i] - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
}

// ---- softmax cross entropy (mean over batch) ----

template <typename S>
S softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels,
                        Tensor<S>* probs_out) {
    if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy expects [batch x classes]");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (labels.size() != n) throw ShapeError("label count does not match batch size");
    Tensor<S> probs(logits.shape());
    S total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
            throw UsageError("label " + std::to_string(labels[i]) + " out of range [0," +
                             std::to_string(k) + ")");
        const S* row = logits.data() + i * k;
        S* prow = probs.data() + i * k;
        S mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        S sum = 0;
        for (std::size_t j = 0; j < k; ++j) {
            prow[j] = std::exp(row[j] - mx);
            sum += prow[j];
        }
        for (std::size_t j = 0; j < k; ++j) prow[j] /= sum;
        total += std::log(sum) - (row[static_cast<std::size_t>(labels[i])] - mx);
    }
    if (probs_out) *probs_out = std::move(probs);
    return total / static_cast<S>(n);
}

template <typename S>
void softmax_cross_entropy_backward(const Tensor<S>& probs, const std::vector<int>& labels,
                                    S gout, Tensor<S>& glogits) {
    const std::size_t n = probs.dim(0), k = probs.dim(1);
    const S scale = gout / static_cast<S>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const S* prow = probs.data() + i * k;
        S* grow = glogits.data() + i * k;
        for (std::size_t j = 0; j < k; ++j) grow[j] += scale * prow[j];
        grow[static_cast<std::size_t>(labels[i])] -= scale;
    }
}

// ---- global average pool ----

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool expects NCHW input");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<S> out({n, c});
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        const S* p = x.data() + nc * hw;
        S sum = 0;
        for (std::size_t i = 0; i < hw; ++i) sum += p[i];
        out[nc] = sum / static_cast<S>(hw);
    }
    return out;
}

template <typename S>
void global_avg_pool_backward(const Shape& xshape, const Tensor<S>& gout, Tensor<S>& gx) {
    const std::size_t hw = xshape[2] * xshape[3];
    for (std::size_t nc = 0; nc < gout.size(); ++nc) {
        S g = gout[nc] / static_cast<S>(hw);
        S* p = gx.data() + nc * hw;
        for (std::size_t i = 0; i < hw; ++i) p[i] += g;
    }
}

// ---- bias broadcast: x[N,K] + b[K] or x[N,C,H,W] + b[C] ----

template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
    Tensor<S> out = x;
    if (x.rank() == 2) {
        if (b.size() != x.dim(1)) throw ShapeError("bias size does not match columns");
        for (std::size_t i = 0; i < x.dim(0); ++i)
            for (std::size_t j = 0; j < x.dim(1); ++j) out[i * x.dim(1) + j] += b[j];
    } else if (x.rank() == 4) {
        if (b.size() != x.dim(1)) throw ShapeError("bias size does not match channels");
        const std::size_t hw = x.dim(2) * x.dim(3);
        for (std::size_t n = 0; n < x.dim(0); ++n)
            for (std::size_t c = 0; c < x.dim(1); ++c) {
                S* p = out.data() + (n * x.dim(1) + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) p[i] += b[c];
            }
    } else {
        throw ShapeError("add_bias supports rank-2 and rank-4 inputs");
    }
    return out;
}

template <typename S>
void add_bias_backward(const Shape& xshape, const Tensor<S>& gout, Tensor<S>& gx, Tensor<S>& gb) {
    for (std::size_t i = 0; i < gout.size(); ++i) gx[i] += gout[i];
    if (xshape.size() == 2) {
        for (std::size_t i = 0; i < xshape[0]; ++i)
            for (std::size_t j = 0; j < xshape[1]; ++j) gb[j] += gout[i * xshape[1] + j];
    } else {
        const std::size_t hw = xshape[2] * xshape[3];
        for (std::size_t n = 0; n < xshape[0]; ++n)
            for (std::size_t c = 0; c < xshape[1]; ++c) {
                const S* p = gout.data() + (n * xshape[1] + c) * hw;
                S acc = 0;
                for (std::size_t i = 0; i < hw; ++i) acc += p[i];
                gb[c] += acc;
            }
    }
}

} // namespace stopband::kernels
