#pragma once

#include <cstdint>
#include <type_traits>
#include <vector>

#include "emdt/ops.hpp"

namespace emdt {

/// Subregion grouping parameters: region_num subregions, built from chunks
/// of chunk_size consecutive tokens. (1,1) is full attention.
struct AsaPattern {
    int64_t region_num = 1;
    int64_t chunk_size = 1;

    bool is_full() const { return region_num == 1; }
    int64_t period() const { return region_num * chunk_size; }

    bool operator==(const AsaPattern&) const = default;

    void validate(int64_t seq_len) const {
        if (region_num < 1 || chunk_size < 1)
            throw ConfigError("asa: pattern (" + std::to_string(region_num) + "," + std::to_string(chunk_size) +
                              ") must be positive");
        if (seq_len % period() != 0)
            throw ConfigError("asa: sequence length L=" + std::to_string(seq_len) + " not divisible by region_num=" +
                              std::to_string(region_num) + " x chunk_size=" + std::to_string(chunk_size));
    }
};

/// Per-block pattern assignment: the cycle repeats across block indices.
struct AsaSchedule {
    std::vector<AsaPattern> cycle{{1, 1}, {4, 1}, {4, 4}};

    const AsaPattern& pattern_for_block(int block) const {
        return cycle[static_cast<size_t>(block) % cycle.size()];
    }

    std::vector<AsaPattern> resolve(int num_blocks) const {
        std::vector<AsaPattern> out;
        out.reserve(static_cast<size_t>(num_blocks));
        for (int i = 0; i < num_blocks; ++i) out.push_back(pattern_for_block(i));
        return out;
    }
};

namespace detail {

/// Flat token source index for output row r of the division
/// b (l s n) c -> (b s) (l n) c.
inline std::vector<int64_t> divide_index(int64_t batch, int64_t seq_len, const AsaPattern& p) {
    const int64_t s = p.region_num, n = p.chunk_size;
    const int64_t l_count = seq_len / (s * n);
    std::vector<int64_t> idx(static_cast<size_t>(batch * seq_len));
    int64_t r = 0;
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t j = 0; j < s; ++j)
            for (int64_t l = 0; l < l_count; ++l)
                for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(r++)] = b * seq_len + (l * s + j) * n + i;
    return idx;
}

inline std::vector<int64_t> invert_perm(const std::vector<int64_t>& perm) {
    std::vector<int64_t> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
    return inv;
}

}  // namespace detail

/// Subregion division: [B, L, C] -> [B*s, L/s, C]. Pure index permutation.
template <std::floating_point S>
Tensor<S> divide(const Tensor<S>& x, const AsaPattern& pattern) {
    if (x.ndim() != 3) throw ShapeError("divide: expected [B,L,C], got " + shape_str(x.shape()));
    const int64_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    pattern.validate(L);
    const int64_t s = pattern.region_num;
    Tensor<S> flat = reshape(x, {B * L, C});
    Tensor<S> perm = gather_rows(flat, detail::divide_index(B, L, pattern));
    return reshape(perm, {B * s, L / s, C});
}

/// Inverse of divide for the same pattern; batch is the pre-division batch.
template <std::floating_point S>
Tensor<S> undivide(const Tensor<S>& x, const AsaPattern& pattern, int64_t batch) {
    if (x.ndim() != 3) throw ShapeError("undivide: expected [B*s,L/s,C], got " + shape_str(x.shape()));
    const int64_t s = pattern.region_num;
    if (x.dim(0) % s != 0 || x.dim(0) / s != batch)
        throw ConfigError("undivide: batch " + std::to_string(x.dim(0)) + " is not " + std::to_string(batch) + " x s=" +
                          std::to_string(s));
    const int64_t L = x.dim(1) * s, C = x.dim(2);
    pattern.validate(L);
    Tensor<S> flat = reshape(x, {batch * L, C});
    Tensor<S> perm = gather_rows(flat, detail::invert_perm(detail::divide_index(batch, L, pattern)));
    return reshape(perm, {batch, L, C});
}

/// Projection weights for one attention operator. width == heads * head_dim.
template <std::floating_point S>
struct AttentionWeights {
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
    int heads = 1;
    int64_t head_dim() const { return wq.dim(0) / heads; }

    static AttentionWeights make(int64_t width, int heads, Rng& rng, S init_std = S(0.02)) {
        if (width % heads != 0)
            throw ConfigError("attention: width " + std::to_string(width) + " not divisible by heads " +
                              std::to_string(heads));
        AttentionWeights w;
        w.heads = heads;
        w.wq = Tensor<S>::randn({width, width}, rng, init_std, true);
        w.bq = Tensor<S>::zeros({width}, true);
        w.wk = Tensor<S>::randn({width, width}, rng, init_std, true);
        w.bk = Tensor<S>::zeros({width}, true);
        w.wv = Tensor<S>::randn({width, width}, rng, init_std, true);
        w.bv = Tensor<S>::zeros({width}, true);
        w.wo = Tensor<S>::randn({width, width}, rng, init_std, true);
        w.bo = Tensor<S>::zeros({width}, true);
        return w;
    }
};

/// Optional capture of the post-softmax attention weights (test hook).
template <std::floating_point S>
struct AttnProbe {
    Tensor<S> weights;  // [B*s, H, Lq, Lk]
};

template <std::floating_point S>
struct JointAttendResult {
    Tensor<S> image;
    Tensor<S> context;
};

namespace detail {

/// Heads-split scaled dot-product attention over already-divided inputs
/// q,k,v: [B', T, C]. Returns [B', T, C] pre-output-projection.
template <std::floating_point S>
Tensor<S> sdpa(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int heads, AttnProbe<S>* probe) {
    const int64_t Bp = q.dim(0), Tq = q.dim(1), C = q.dim(2);
    const int64_t Tk = k.dim(1);
    const int64_t D = C / heads;
    auto heads_first = [&](const Tensor<S>& t, int64_t T) {
        return transpose(reshape(t, {Bp, T, heads, D}), {0, 2, 1, 3});
    };
    Tensor<S> qh = heads_first(q, Tq);
    Tensor<S> kh = heads_first(k, Tk);
    Tensor<S> vh = heads_first(v, Tk);
    const S scl = S(1) / std::sqrt(static_cast<S>(D));
    Tensor<S> scores = matmul(scale(qh, scl), kh, false, true);  // [B',H,Tq,Tk]
    Tensor<S> attn = softmax(scores);
    if (probe) probe->weights = attn.detach();
    Tensor<S> ctx = matmul(attn, vh);  // [B',H,Tq,D]
    return reshape(transpose(ctx, {0, 2, 1, 3}), {Bp, Tq, C});
}

template <std::floating_point S>
std::vector<int64_t> replicate_index(int64_t batch, int64_t regions, int64_t rows_per_batch) {
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(batch * regions * rows_per_batch));
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t j = 0; j < regions; ++j)
            for (int64_t r = 0; r < rows_per_batch; ++r) idx.push_back(b * rows_per_batch + r);
    return idx;
}

}  // namespace detail

/// Joint subregion attention. Image tokens are divided per the pattern;
/// context tokens (their own projection weights) are replicated into every
/// region, attended jointly, and their outputs averaged back across regions.
template <std::floating_point S>
JointAttendResult<S> attend_joint(const Tensor<S>& x, const AttentionWeights<S>& w, const AsaPattern& pattern,
                                  const Tensor<S>& context, const AttentionWeights<S>& w_ctx,
                                  AttnProbe<S>* probe = nullptr) {
    const int64_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    if (context.dim(0) != B || context.dim(2) != C)
        throw ShapeError("attend: context " + shape_str(context.shape()) + " incompatible with image " +
                         shape_str(x.shape()));
    pattern.validate(L);
    const int64_t s = pattern.region_num;
    const int64_t T = context.dim(1);
    const int64_t Lr = L / s;

    Tensor<S> xr = divide(x, pattern);
    Tensor<S> q = linear(xr, w.wq, &w.bq);
    Tensor<S> k = linear(xr, w.wk, &w.bk);
    Tensor<S> v = linear(xr, w.wv, &w.bv);

    Tensor<S> cq = linear(context, w_ctx.wq, &w_ctx.bq);
    Tensor<S> ck = linear(context, w_ctx.wk, &w_ctx.bk);
    Tensor<S> cv = linear(context, w_ctx.wv, &w_ctx.bv);
    const auto rep = detail::replicate_index<S>(B, s, T);
    auto replicate = [&](const Tensor<S>& t) {
        return reshape(gather_rows(reshape(t, {B * T, C}), rep), {B * s, T, C});
    };
    q = concat<S>({q, replicate(cq)}, 1);
    k = concat<S>({k, replicate(ck)}, 1);
    v = concat<S>({v, replicate(cv)}, 1);

    Tensor<S> attn = detail::sdpa(q, k, v, w.heads, probe);
    Tensor<S> img = slice(attn, 1, 0, Lr);
    Tensor<S> ctx = slice(attn, 1, Lr, T);
    JointAttendResult<S> out;
    out.image = linear(undivide(img, pattern, B), w.wo, &w.bo);
    out.context = linear(mean_axis(reshape(ctx, {B, s, T, C}), 1), w_ctx.wo, &w_ctx.bo);
    return out;
}

/// Subregion multi-head attention on a single stream, optionally with
/// context tokens sharing the same projection weights.
template <std::floating_point S>
Tensor<S> attend(const Tensor<S>& x, const AttentionWeights<S>& w, const AsaPattern& pattern,
                 std::type_identity_t<const Tensor<S>*> context = nullptr, AttnProbe<S>* probe = nullptr) {
    if (x.ndim() != 3) throw ShapeError("attend: expected [B,L,C], got " + shape_str(x.shape()));
    if (x.dim(2) % w.heads != 0)
        throw ShapeError("attend: width " + std::to_string(x.dim(2)) + " not divisible by heads " +
                         std::to_string(w.heads));
    if (context) return attend_joint(x, w, pattern, *context, w, probe).image;
    const int64_t B = x.dim(0), L = x.dim(1);
    pattern.validate(L);
    Tensor<S> xr = divide(x, pattern);
    Tensor<S> q = linear(xr, w.wq, &w.bq);
    Tensor<S> k = linear(xr, w.wk, &w.bk);
    Tensor<S> v = linear(xr, w.wv, &w.bv);
    Tensor<S> attn = detail::sdpa(q, k, v, w.heads, probe);
    return linear(undivide(attn, pattern, B), w.wo, &w.bo);
}

// ---------------------------------------------------------------------------
// Interaction graph
// ---------------------------------------------------------------------------

/// Direct co-region adjacency: tokens are connected when any of the first
/// `depth` blocks places them in the same subregion.
inline std::vector<std::vector<bool>> interaction_adjacency(const AsaSchedule& schedule, int64_t seq_len, int depth) {
    std::vector<std::vector<bool>> adj(static_cast<size_t>(seq_len),
                                       std::vector<bool>(static_cast<size_t>(seq_len), false));
    for (int64_t t = 0; t < seq_len; ++t) adj[static_cast<size_t>(t)][static_cast<size_t>(t)] = true;
    for (int block = 0; block < depth; ++block) {
        const AsaPattern& p = schedule.pattern_for_block(block);
        p.validate(seq_len);
        const auto idx = detail::divide_index(1, seq_len, p);
        const int64_t region_len = seq_len / p.region_num;
        for (int64_t j = 0; j < p.region_num; ++j) {
            for (int64_t a = 0; a < region_len; ++a)
                for (int64_t b = a + 1; b < region_len; ++b) {
                    const int64_t ta = idx[static_cast<size_t>(j * region_len + a)];
                    const int64_t tb = idx[static_cast<size_t>(j * region_len + b)];
                    adj[static_cast<size_t>(ta)][static_cast<size_t>(tb)] = true;
                    adj[static_cast<size_t>(tb)][static_cast<size_t>(ta)] = true;
                }
        }
    }
    return adj;
}

/// Component label per token of the transitive closure (multi-hop
/// reachability) of the first `depth` blocks' adjacency.
inline std::vector<int> interaction_components(const AsaSchedule& schedule, int64_t seq_len, int depth) {
    const auto adj = interaction_adjacency(schedule, seq_len, depth);
    std::vector<int> comp(static_cast<size_t>(seq_len), -1);
    int next = 0;
    std::vector<int64_t> stack;
    for (int64_t root = 0; root < seq_len; ++root) {
        if (comp[static_cast<size_t>(root)] >= 0) continue;
        comp[static_cast<size_t>(root)] = next;
        stack.push_back(root);
        while (!stack.empty()) {
            const int64_t t = stack.back();
            stack.pop_back();
            for (int64_t u = 0; u < seq_len; ++u) {
                if (adj[static_cast<size_t>(t)][static_cast<size_t>(u)] && comp[static_cast<size_t>(u)] < 0) {
                    comp[static_cast<size_t>(u)] = next;
                    stack.push_back(u);
                }
            }
        }
        ++next;
    }
    return comp;
}

inline bool interaction_connected(const AsaSchedule& schedule, int64_t seq_len, int depth) {
    const auto comp = interaction_components(schedule, seq_len, depth);
    for (int c : comp)
        if (c != 0) return false;
    return true;
}

inline bool interaction_complete(const AsaSchedule& schedule, int64_t seq_len, int depth) {
    const auto adj = interaction_adjacency(schedule, seq_len, depth);
    for (const auto& row : adj)
        for (bool v : row)
            if (!v) return false;
    return true;
}

}  // namespace emdt
