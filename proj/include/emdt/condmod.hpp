#pragma once

#include "emdt/ops.hpp"
#include "emdt/tokenpath.hpp"

namespace emdt {

/// Sinusoidal features of scalar timesteps in [0,1]: [B] -> [B, freq_dim].
/// Timesteps are scaled by 1000 so the geometric frequency ladder (base
/// 10000) resolves the unit interval.
template <std::floating_point S>
Tensor<S> timestep_features(const Tensor<S>& t, int64_t freq_dim) {
    if (t.ndim() != 1) throw ShapeError("timestep_features: expected [B], got " + shape_str(t.shape()));
    for (const S v : t.data())
        if (!std::isfinite(v)) throw NumericsError("timestep_features: non-finite timestep");
    const int64_t B = t.dim(0);
    const int64_t half = freq_dim / 2;
    Tensor<S> out = Tensor<S>::zeros({B, freq_dim});
    for (int64_t b = 0; b < B; ++b) {
        const S pos = t.data()[static_cast<size_t>(b)] * S(1000);
        for (int64_t i = 0; i < half; ++i) {
            const S freq = std::exp(-std::log(S(10000)) * static_cast<S>(i) / static_cast<S>(half));
            out.data()[static_cast<size_t>(b * freq_dim + i)] = std::cos(pos * freq);
            out.data()[static_cast<size_t>(b * freq_dim + half + i)] = std::sin(pos * freq);
        }
    }
    // Frequencies are a fixed function of the timestep; gradients w.r.t. t
    // are not needed (t is never a trainable input).
    return out;
}

/// Global modulation vector shared by every block.
template <std::floating_point S>
struct GlobalModulation {
    Tensor<S> s_hat;  // [B, 6C]
};

/// Frequency features followed by a two-layer MLP with SiLU, producing the
/// 6C-wide shared modulation vector. An optional conditioning embedding
/// (class or pooled text) is added to the hidden state before the
/// nonlinearity.
template <std::floating_point S>
struct TimestepEmbedder {
    Tensor<S> w1, b1;  // [C, F]
    Tensor<S> w2, b2;  // [out, C]
    int64_t freq_dim = 256;

    static TimestepEmbedder make(int64_t freq_dim, int64_t width, int64_t out, Rng& rng, S init_std = S(0.02),
                                 bool zero_final = true) {
        TimestepEmbedder e;
        e.freq_dim = freq_dim;
        e.w1 = Tensor<S>::randn({width, freq_dim}, rng, init_std, true);
        e.b1 = Tensor<S>::zeros({width}, true);
        e.w2 = zero_final ? Tensor<S>::zeros({out, width}, true) : Tensor<S>::randn({out, width}, rng, init_std, true);
        e.b2 = Tensor<S>::zeros({out}, true);
        return e;
    }

    Tensor<S> forward(const Tensor<S>& t, const Tensor<S>* cond_emb = nullptr) const {
        Tensor<S> h = linear(timestep_features(t, freq_dim), w1, &b1);
        if (cond_emb) h = add(h, *cond_emb);
        return linear(silu(h), w2, &b2);
    }
};

/// timestep -> shared 6C modulation vector.
template <std::floating_point S>
GlobalModulation<S> timestep_embed(const Tensor<S>& t, const TimestepEmbedder<S>& embedder,
                                   const Tensor<S>* cond_emb = nullptr) {
    return {embedder.forward(t, cond_emb)};
}

/// Per-block learned affine on the shared vector. Zero-initialized so every
/// block starts from the shared modulation unchanged.
template <std::floating_point S>
struct BlockAffine {
    Tensor<S> gamma;  // [6C]
    Tensor<S> beta;   // [6C]

    static BlockAffine make(int64_t width6) {
        return {Tensor<S>::zeros({width6}, true), Tensor<S>::zeros({width6}, true)};
    }
};

/// S_i = S_hat * (1 + gamma_i) + beta_i.
template <std::floating_point S>
Tensor<S> block_modulation(const GlobalModulation<S>& g, const BlockAffine<S>& a) {
    if (a.gamma.numel() != g.s_hat.dim(-1) || a.beta.numel() != g.s_hat.dim(-1))
        throw ShapeError("block_modulation: width mismatch, s_hat " + shape_str(g.s_hat.shape()) + " vs gamma " +
                         shape_str(a.gamma.shape()));
    return add(mul(g.s_hat, add_scalar(a.gamma, S(1))), a.beta);
}

/// Fixed 2-D sine/cosine table. The first C/2 channels encode the row, the
/// second C/2 the column, each as [sin..., cos...] over a geometric
/// frequency ladder (base 10000).
template <std::floating_point S>
struct PositionalTable {
    Tensor<S> pe;  // [H*W, C]
    int64_t height = 0;
    int64_t width = 0;

    static PositionalTable make(int64_t height, int64_t width, int64_t channels) {
        if (channels % 4 != 0)
            throw ConfigError("positional table: channels " + std::to_string(channels) + " must be divisible by 4");
        const int64_t axis_dim = channels / 2;
        const int64_t quarter = axis_dim / 2;
        Tensor<S> pe = Tensor<S>::zeros({height * width, channels});
        for (int64_t y = 0; y < height; ++y) {
            for (int64_t x = 0; x < width; ++x) {
                S* row = pe.ptr() + (y * width + x) * channels;
                for (int64_t i = 0; i < quarter; ++i) {
                    const S freq = std::exp(-std::log(S(10000)) * static_cast<S>(i) / static_cast<S>(quarter));
                    row[i] = std::sin(static_cast<S>(y) * freq);
                    row[quarter + i] = std::cos(static_cast<S>(y) * freq);
                    row[axis_dim + i] = std::sin(static_cast<S>(x) * freq);
                    row[axis_dim + quarter + i] = std::cos(static_cast<S>(x) * freq);
                }
            }
        }
        return {pe, height, width};
    }
};

/// Adds the positional table to the tokens. Callers apply this once at the
/// input stage and once more on reconstructed tokens (position
/// reinforcement); the op itself is plain addition, not idempotent.
template <std::floating_point S>
TokenGrid<S> apply_pe(const TokenGrid<S>& g, const PositionalTable<S>& table) {
    g.validate();
    if (table.height != g.height || table.width != g.width || table.pe.dim(1) != g.channels())
        throw ShapeError("apply_pe: table " + std::to_string(table.height) + "x" + std::to_string(table.width) +
                         " width " + std::to_string(table.pe.dim(1)) + " does not match grid");
    return {add(g.tokens, table.pe), g.height, g.width};
}

}  // namespace emdt
