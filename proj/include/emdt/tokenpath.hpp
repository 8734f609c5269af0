#pragma once

#include <utility>

#include "emdt/nn.hpp"
#include "emdt/ops.hpp"

namespace emdt {

/// Token sequence annotated with its 2-D extent. Flattening is row-major:
/// grid position (y, x) lives at sequence index y * width + x.
template <std::floating_point S>
struct TokenGrid {
    Tensor<S> tokens;  // [B, height*width, C]
    int64_t height = 0;
    int64_t width = 0;

    int64_t batch() const { return tokens.dim(0); }
    int64_t seq_len() const { return height * width; }
    int64_t channels() const { return tokens.dim(2); }

    void validate() const {
        if (tokens.ndim() != 3 || tokens.dim(1) != height * width)
            throw ShapeError("token grid: tokens " + shape_str(tokens.shape()) + " do not match " +
                             std::to_string(height) + "x" + std::to_string(width));
    }
};

/// Merges each non-overlapping r x r window channel-wise (row-major window
/// order): [B, H*W, C] -> [B, (H/r)*(W/r), r*r*C]. Pure rearrangement.
template <std::floating_point S>
Tensor<S> window_merge(const TokenGrid<S>& g, int64_t r) {
    g.validate();
    if (g.height % r != 0 || g.width % r != 0)
        throw ConfigError("window_merge: grid " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                          " not divisible by r=" + std::to_string(r));
    const int64_t B = g.batch(), C = g.channels();
    const int64_t Hr = g.height / r, Wr = g.width / r;
    Tensor<S> x = reshape(g.tokens, {B, Hr, r, Wr, r, C});
    x = transpose(x, {0, 1, 3, 2, 4, 5});
    return reshape(x, {B, Hr * Wr, r * r * C});
}

/// Inverse of window_merge.
template <std::floating_point S>
TokenGrid<S> window_unmerge(const Tensor<S>& x, int64_t r, int64_t height, int64_t width) {
    if (x.ndim() != 3) throw ShapeError("window_unmerge: expected rank 3, got " + shape_str(x.shape()));
    const int64_t B = x.dim(0);
    const int64_t Hr = height / r, Wr = width / r;
    if (Hr * Wr != x.dim(1) || x.dim(2) % (r * r) != 0)
        throw ShapeError("window_unmerge: input " + shape_str(x.shape()) + " does not unmerge to " +
                         std::to_string(height) + "x" + std::to_string(width) + " with r=" + std::to_string(r));
    const int64_t C = x.dim(2) / (r * r);
    Tensor<S> t = reshape(x, {B, Hr, Wr, r, r, C});
    t = transpose(t, {0, 1, 3, 2, 4, 5});
    return {reshape(t, {B, height * width, C}), height, width};
}

/// Per-branch compression MLPs. Each branch maps merged windows
/// (r*r*C channels) back to width C.
template <std::floating_point S>
struct CompressorWeights {
    Mlp<S> mlp2;  // in 4C
    Mlp<S> mlp4;  // in 16C

    static CompressorWeights make(int64_t width, int64_t hidden, Rng& rng, S init_std = S(0.02)) {
        CompressorWeights w;
        w.mlp2 = Mlp<S>::make(4 * width, hidden, width, rng, init_std);
        w.mlp4 = Mlp<S>::make(16 * width, hidden, width, rng, init_std);
        return w;
    }
};

/// Upsampling + fusing MLPs. up2/up4 map C -> r*r*C for the window
/// un-merge; fuse maps the concatenated [recon2, recon4, skip] (3C) back to
/// C and carries an additive skip term so reconstruction starts at the skip.
template <std::floating_point S>
struct ReconstructorWeights {
    Mlp<S> up2;
    Mlp<S> up4;
    Mlp<S> fuse;

    static ReconstructorWeights make(int64_t width, int64_t hidden, int64_t fuse_hidden, Rng& rng,
                                     S init_std = S(0.02), bool zero_fuse = true) {
        ReconstructorWeights w;
        w.up2 = Mlp<S>::make(width, hidden, 4 * width, rng, init_std);
        w.up4 = Mlp<S>::make(width, hidden, 16 * width, rng, init_std);
        w.fuse = Mlp<S>::make(3 * width, fuse_hidden, width, rng, init_std, zero_fuse);
        return w;
    }
};

/// Single-ratio compression: merge r x r windows, project back to C.
template <std::floating_point S>
TokenGrid<S> compress_single(const TokenGrid<S>& g, const Mlp<S>& mlp, int64_t r) {
    Tensor<S> merged = window_merge(g, r);
    return {mlp_forward(merged, mlp), g.height / r, g.width / r};
}

/// Multi-path compression with ratios 2x and 4x.
template <std::floating_point S>
std::pair<TokenGrid<S>, TokenGrid<S>> compress(const TokenGrid<S>& g, const CompressorWeights<S>& w) {
    if (g.height % 4 != 0 || g.width % 4 != 0)
        throw ConfigError("compress: grid " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                          " must be divisible by 4");
    return {compress_single(g, w.mlp2, 2), compress_single(g, w.mlp4, 4)};
}

/// Joint token set: c2 first, then c4, along the sequence axis. The
/// ordering is normative; subregion patterns are sensitive to it.
template <std::floating_point S>
Tensor<S> joint_tokens(const TokenGrid<S>& c2, const TokenGrid<S>& c4) {
    if (c2.channels() != c4.channels())
        throw ShapeError("joint_tokens: channel mismatch " + shape_str(c2.tokens.shape()) + " vs " +
                         shape_str(c4.tokens.shape()));
    return concat<S>({c2.tokens, c4.tokens}, 1);
}

/// Upsample one branch back to the full grid: C -> r*r*C, then un-merge.
template <std::floating_point S>
TokenGrid<S> upsample_single(const Tensor<S>& tokens, const Mlp<S>& up, int64_t r, int64_t height, int64_t width) {
    return window_unmerge(mlp_forward(tokens, up), r, height, width);
}

/// Reconstruction for the two-branch path: split the joint set, upsample
/// both branches, fuse with the skip stream (plus skip residual).
template <std::floating_point S>
TokenGrid<S> reconstruct(const Tensor<S>& joint, const TokenGrid<S>& skip, const ReconstructorWeights<S>& w) {
    skip.validate();
    const int64_t n2 = (skip.height / 2) * (skip.width / 2);
    const int64_t n4 = (skip.height / 4) * (skip.width / 4);
    if (joint.dim(1) != n2 + n4)
        throw ShapeError("reconstruct: joint length " + std::to_string(joint.dim(1)) + " does not match skip grid " +
                         std::to_string(skip.height) + "x" + std::to_string(skip.width));
    auto parts = split(joint, {n2, n4}, 1);
    TokenGrid<S> r2 = upsample_single(parts[0], w.up2, 2, skip.height, skip.width);
    TokenGrid<S> r4 = upsample_single(parts[1], w.up4, 4, skip.height, skip.width);
    Tensor<S> fused = mlp_forward(concat<S>({r2.tokens, r4.tokens, skip.tokens}, 2), w.fuse);
    return {add(fused, skip.tokens), skip.height, skip.width};
}

/// Reconstruction when only one branch exists (2x-only / 4x-only / stacked
/// levels): fuse input is [recon, skip] (2C), same skip residual.
template <std::floating_point S>
TokenGrid<S> reconstruct_single(const Tensor<S>& tokens, const TokenGrid<S>& skip, const Mlp<S>& up,
                                const Mlp<S>& fuse, int64_t r) {
    skip.validate();
    TokenGrid<S> rec = upsample_single(tokens, up, r, skip.height, skip.width);
    Tensor<S> fused = mlp_forward(concat<S>({rec.tokens, skip.tokens}, 2), fuse);
    return {add(fused, skip.tokens), skip.height, skip.width};
}

/// Variant of reconstruct without the skip: fuse input is [recon2, recon4]
/// (2C), no residual.
template <std::floating_point S>
TokenGrid<S> reconstruct_no_skip(const Tensor<S>& joint, int64_t height, int64_t width,
                                 const ReconstructorWeights<S>& w) {
    const int64_t n2 = (height / 2) * (width / 2);
    const int64_t n4 = (height / 4) * (width / 4);
    if (joint.dim(1) != n2 + n4)
        throw ShapeError("reconstruct: joint length " + std::to_string(joint.dim(1)) + " does not match grid " +
                         std::to_string(height) + "x" + std::to_string(width));
    auto parts = split(joint, {n2, n4}, 1);
    TokenGrid<S> r2 = upsample_single(parts[0], w.up2, 2, height, width);
    TokenGrid<S> r4 = upsample_single(parts[1], w.up4, 4, height, width);
    Tensor<S> fused = mlp_forward(concat<S>({r2.tokens, r4.tokens}, 2), w.fuse);
    return {fused, height, width};
}

}  // namespace emdt
