#pragma once

#include <cmath>
#include <limits>

#include "stopband/errors.hpp"
#include "stopband/tensor.hpp"

namespace stopband {

// Smooth stopband gate used to reparametrize network weights as
//
//     w_hat = w * h(w; t, n)
//
// h maps weights of small magnitude toward 0 and large ones toward 1, so the
// gated weight carries an implicit, differentiable pruning mask. t > 0 is a
// learnable per-layer temperature controlling the width of the suppressed
// band around zero; n (even) controls how sharply the gate transitions.
//
//     h(x) = C1 * (exp(-1 / ((t*x)^n + 1)) - C2)
//
// with C1 = 1/(1 - e^-1), C2 = e^-1. The +1 in the denominator keeps the
// exponent bounded for all finite x, and the constants pin h(0) = 0 and
// sup h = 1. The naive form without the +1 (h_unstable below) blows up
// around x = 0 and is retained only to demonstrate the failure mode.

// Saturation guard: for (t*x)^n above this the exponent is within rounding
// of zero, so h is exactly 1 and its derivatives are exactly 0.
inline constexpr double kGateSaturation = 1e15;

// Computed through the same libm exp() the gate itself uses, so that
// exp(-1/(0+1)) - C2 cancels bitwise and h(0) is exactly zero.
template <typename S>
inline const S kGateC2 = std::exp(S(-1));

template <typename S>
inline const S kGateC1 = S(1) / (S(1) - kGateC2<S>);

template <typename S>
S gate_c2() { return kGateC2<S>; }

template <typename S>
S gate_c1() { return kGateC1<S>; }

// x^n for even n, computed as ((x*x))^(n/2) so the result is bit-exact even
// in x. Exponentiation by squaring on the integer half-exponent.
template <typename S>
S pow_even(S x, int n) {
    S u = x * x;
    int k = n / 2;
    S result = S(1);
    while (k > 0) {
        if (k & 1) result *= u;
        u *= u;
        k >>= 1;
    }
    return result;
}

template <typename S>
void check_gate_args(S t, int n) {
    if (!(t > S(0))) throw UsageError("gate temperature must be positive");
    if (n < 2 || n % 2 != 0) throw UsageError("gate crispness must be a positive even integer");
}

// Value together with both partial derivatives; they share most of the work.
template <typename S>
struct GateEval {
    S h, dh_dx, dh_dt;
};

template <typename S>
GateEval<S> gate_eval(S x, S t, int n) {
    const S u = pow_even(t * x, n);
    if (!(u <= S(kGateSaturation))) return {S(1), S(0), S(0)};
    const S d = u + S(1);
    const S e = std::exp(S(-1) / d);
    const S h = gate_c1<S>() * (e - gate_c2<S>());
    // dh/dx = C1 e n t^n x^(n-1) / d^2 and t^n x^(n-1) = u/x; likewise
    // t^(n-1) x^n = u/t for dh/dt.
    const S common = gate_c1<S>() * e * static_cast<S>(n) * u / (d * d);
    return {h, x == S(0) ? S(0) : common / x, common / t};
}

template <typename S>
S gate(S x, S t, int n) {
    const S u = pow_even(t * x, n);
    if (!(u <= S(kGateSaturation))) return S(1);
    return gate_c1<S>() * (std::exp(S(-1) / (u + S(1))) - gate_c2<S>());
}

template <typename S>
S gate_dx(S x, S t, int n) { return gate_eval(x, t, n).dh_dx; }

template <typename S>
S gate_dt(S x, S t, int n) { return gate_eval(x, t, n).dh_dt; }

// The naive gate exp(-1/(t*x)^n). Mathematically fine away from zero, but at
// x = 0 the exponent divides by zero: the function is undefined there, and
// its derivative evaluates to 0/0. Both are reported as NaN rather than
// papering over the singularity with the IEEE convention exp(-inf) = 0;
// this is exactly the failure mode the +1 in the stable gate removes. Kept
// for demonstration and comparison plots only.
template <typename S>
S gate_unstable(S x, S t, int n) {
    const S u = pow_even(t * x, n);
    if (u == S(0)) return std::numeric_limits<S>::quiet_NaN();
    return std::exp(S(-1) / u);
}

template <typename S>
S gate_unstable_dx(S x, S t, int n) {
    const S u = pow_even(t * x, n);
    const S e = std::exp(S(-1) / u);
    return e * static_cast<S>(n) * (u / x) / (u * u);  // 0/0 at x = 0
}

// Learnable temperature, stored as tau with t = exp(tau) so positivity holds
// under unconstrained gradient descent.
template <typename S>
struct Temperature {
    S tau = S(0);

    S t() const { return std::exp(tau); }

    static Temperature from_t(S t0) {
        if (!(t0 > S(0))) throw UsageError("temperature must be positive");
        return Temperature{std::log(t0)};
    }
};

// Static gate configuration shared by every reparametrized layer of a model.
struct ReparamConfig {
    int crispness = 4;     // n, even, >= 2
    double t_init = 100.0; // initial temperature per layer

    void validate() const {
        if (crispness < 2 || crispness % 2 != 0)
            throw UsageError("crispness must be a positive even integer");
        if (!(t_init > 0.0)) throw UsageError("t_init must be positive");
    }
};

// ---- tensor-level helpers (no-grad paths for eval, pruning, reporting) ----

// w_hat = w * h(w); |w_hat| <= |w| elementwise and signs never flip.
template <typename S>
Tensor<S> apparent_weights(const Tensor<S>& w, S t, int n) {
    check_gate_args(t, n);
    Tensor<S> out(w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] * gate(w[i], t, n);
    return out;
}

// Sum of gate responses over a weight tensor: this layer's contribution to
// the differentiable parameter-count surrogate.
template <typename S>
S gate_sum(const Tensor<S>& w, S t, int n) {
    check_gate_args(t, n);
    S acc = 0;
    for (std::size_t i = 0; i < w.size(); ++i) acc += gate(w[i], t, n);
    return acc;
}

} // namespace stopband
