#pragma once

#include "emdt/ops.hpp"

namespace emdt {

/// Two linear layers with a GELU between them.
template <std::floating_point S>
struct Mlp {
    Tensor<S> w1, b1, w2, b2;

    int64_t in_width() const { return w1.dim(1); }
    int64_t hidden_width() const { return w1.dim(0); }
    int64_t out_width() const { return w2.dim(0); }

    static Mlp make(int64_t in, int64_t hidden, int64_t out, Rng& rng, S init_std = S(0.02),
                    bool zero_final = false) {
        Mlp m;
        m.w1 = Tensor<S>::randn({hidden, in}, rng, init_std, true);
        m.b1 = Tensor<S>::zeros({hidden}, true);
        m.w2 = zero_final ? Tensor<S>::zeros({out, hidden}, true) : Tensor<S>::randn({out, hidden}, rng, init_std, true);
        m.b2 = Tensor<S>::zeros({out}, true);
        return m;
    }
};

template <std::floating_point S>
Tensor<S> mlp_forward(const Tensor<S>& x, const Mlp<S>& m) {
    return linear(gelu(linear(x, m.w1, &m.b1)), m.w2, &m.b2);
}

}  // namespace emdt
