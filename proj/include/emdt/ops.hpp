#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "emdt/parallel.hpp"
#include "emdt/tensor.hpp"

namespace emdt {

// ---------------------------------------------------------------------------
// gemm kernels
//
// All variants reduce to loop orders whose accumulation order per output
// element is a fixed sequential walk over the contraction axis, so results
// do not depend on how rows are distributed across workers.
// ---------------------------------------------------------------------------

namespace detail {

// Serial panel: C[i0..i1) += A-rows * B, four output rows per pass so each
// B row is reused from registers/L1.
template <std::floating_point S>
void gemm_nn_panel(int64_t i0, int64_t i1, int64_t n, int64_t k, const S* a, const S* b, S* c) {
    int64_t i = i0;
    for (; i + 4 <= i1; i += 4) {
        const S* a0 = a + i * k;
        const S* a1 = a0 + k;
        const S* a2 = a1 + k;
        const S* a3 = a2 + k;
        S* c0 = c + i * n;
        S* c1 = c0 + n;
        S* c2 = c1 + n;
        S* c3 = c2 + n;
        for (int64_t p = 0; p < k; ++p) {
            const S v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
            const S* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) {
                const S bj = brow[j];
                c0[j] += v0 * bj;
                c1[j] += v1 * bj;
                c2[j] += v2 * bj;
                c3[j] += v3 * bj;
            }
        }
    }
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (; i < i1; ++i, arow += k, crow += n) {
        for (int64_t p = 0; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Serial panel for C[i0..i1) += A[k,m]^T * B[k,n] (A accessed column-wise).
template <std::floating_point S>
void gemm_tn_panel(int64_t i0, int64_t i1, int64_t m, int64_t n, int64_t k, const S* a, const S* b, S* c) {
    int64_t i = i0;
    for (; i + 4 <= i1; i += 4) {
        S* c0 = c + i * n;
        S* c1 = c0 + n;
        S* c2 = c1 + n;
        S* c3 = c2 + n;
        for (int64_t p = 0; p < k; ++p) {
            const S* acol = a + p * m + i;
            const S v0 = acol[0], v1 = acol[1], v2 = acol[2], v3 = acol[3];
            const S* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) {
                const S bj = brow[j];
                c0[j] += v0 * bj;
                c1[j] += v1 * bj;
                c2[j] += v2 * bj;
                c3[j] += v3 * bj;
            }
        }
    }
    for (; i < i1; ++i) {
        S* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const S av = a[p * m + i];
            const S* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[k,n]
template <std::floating_point S>
void gemm_nn(int64_t m, int64_t n, int64_t k, const S* a, const S* b, S* c) {
    parallel_for(m, std::max<int64_t>(int64_t(1), (1 << 18) / std::max<int64_t>(1, n * k)),
                 [=](int64_t i0, int64_t i1) { gemm_nn_panel(i0, i1, n, k, a, b, c); });
}

// C[m,n] += A[k,m]^T * B[k,n]  (workers own row ranges of C)
template <std::floating_point S>
void gemm_tn(int64_t m, int64_t n, int64_t k, const S* a, const S* b, S* c) {
    parallel_for(m, std::max<int64_t>(int64_t(1), (1 << 18) / std::max<int64_t>(1, n * k)),
                 [=](int64_t i0, int64_t i1) { gemm_tn_panel(i0, i1, m, n, k, a, b, c); });
}

template <std::floating_point S>
void transpose_2d(int64_t rows, int64_t cols, const S* src, S* dst) {
    constexpr int64_t kTile = 32;
    for (int64_t i0 = 0; i0 < rows; i0 += kTile) {
        const int64_t i1 = std::min(rows, i0 + kTile);
        for (int64_t j0 = 0; j0 < cols; j0 += kTile) {
            const int64_t j1 = std::min(cols, j0 + kTile);
            for (int64_t i = i0; i < i1; ++i)
                for (int64_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// C[m,n] += op(A) * op(B). Transposed operands are materialized into
/// scratch so the inner kernels stay in the two fast layouts above.
template <std::floating_point S>
void gemm_acc(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const S* a, const S* b, S* c,
              std::vector<S>* scratch = nullptr) {
    std::vector<S> local;
    std::vector<S>& tmp = scratch ? *scratch : local;
    if (trans_b) {
        // B is [n,k]; materialize B^T as [k,n].
        tmp.resize(static_cast<size_t>(k * n));
        transpose_2d(n, k, b, tmp.data());
        b = tmp.data();
    }
    if (trans_a) {
        gemm_tn(m, n, k, a, b, c);
    } else {
        gemm_nn(m, n, k, a, b, c);
    }
}

// Broadcast helpers (numpy trailing-dimension rules).

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    const size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (size_t i = 0; i < nd; ++i) {
        const int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

/// Strides of `shape` padded/broadcast against `out`, 0 where broadcast.
inline std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
    std::vector<int64_t> strides(out.size(), 0);
    int64_t s = 1;
    const size_t off = out.size() - shape.size();
    for (size_t i = shape.size(); i-- > 0;) {
        if (shape[i] == out[i + off]) {
            strides[i + off] = s;
        } else {
            strides[i + off] = 0;  // broadcast dim
        }
        s *= shape[i];
    }
    return strides;
}

/// Iterates an output shape applying fn(out_index, a_offset, b_offset), with
/// the largest contiguous common suffix run reported as run_len so callers
/// can use tight inner loops.
template <typename F>
void broadcast_iterate(const Shape& out, const std::vector<int64_t>& sa, const std::vector<int64_t>& sb, F&& fn) {
    const size_t nd = out.size();
    // Find suffix where both operands advance contiguously.
    int64_t run = 1;
    size_t split = nd;
    int64_t expect_a = 1, expect_b = 1;
    while (split > 0) {
        const size_t i = split - 1;
        if (sa[i] == expect_a && sb[i] == expect_b) {
            run *= out[i];
            expect_a *= out[i];
            expect_b *= out[i];
            --split;
        } else {
            break;
        }
    }
    int64_t outer = 1;
    for (size_t i = 0; i < split; ++i) outer *= out[i];
    std::vector<int64_t> idx(split, 0);
    int64_t off_a = 0, off_b = 0, out_off = 0;
    for (int64_t it = 0; it < outer; ++it) {
        fn(out_off, off_a, off_b, run);
        out_off += run;
        for (size_t i = split; i-- > 0;) {
            ++idx[i];
            off_a += sa[i];
            off_b += sb[i];
            if (idx[i] < out[i]) break;
            off_a -= sa[i] * out[i];
            off_b -= sb[i] * out[i];
            idx[i] = 0;
        }
    }
}

/// Sum-reduces a gradient shaped like `out` onto a possibly-broadcast
/// operand. The longest contiguous target suffix is accumulated with tight
/// inner loops; remaining outer dims walk with stride bookkeeping.
template <std::floating_point S>
void reduce_grad_strided(Tensor<S>& target, const std::vector<S>& grad, const Shape& out) {
    target.ensure_grad();
    auto& tg = target.grad();
    if (target.shape() == out) {
        for (size_t i = 0; i < tg.size(); ++i) tg[i] += grad[i];
        return;
    }
    const auto st = broadcast_strides(target.shape(), out);
    const size_t nd = out.size();
    int64_t run = 1;
    size_t split = nd;
    int64_t expect = 1;
    while (split > 0) {
        const size_t i = split - 1;
        if (st[i] == expect) {
            run *= out[i];
            expect *= out[i];
            --split;
        } else {
            break;
        }
    }
    int64_t outer = 1;
    for (size_t i = 0; i < split; ++i) outer *= out[i];
    std::vector<int64_t> idx(split, 0);
    int64_t toff = 0, goff = 0;
    for (int64_t it = 0; it < outer; ++it) {
        S* dst = tg.data() + toff;
        const S* src = grad.data() + goff;
        for (int64_t r = 0; r < run; ++r) dst[r] += src[r];
        goff += run;
        for (size_t i = split; i-- > 0;) {
            ++idx[i];
            toff += st[i];
            if (idx[i] < out[i]) break;
            toff -= st[i] * out[i];
            idx[i] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary primitives
// ---------------------------------------------------------------------------

namespace detail {

template <std::floating_point S, typename FwdFn>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b, FwdFn&& fwd) {
    const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), name);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    const S* pa = a.ptr();
    const S* pb = b.ptr();
    S* po = out.ptr();
    broadcast_iterate(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib, int64_t run) {
        parallel_for(run, 1 << 16, [&](int64_t lo, int64_t hi) { fwd(po + o + lo, pa + ia + lo, pb + ib + lo, hi - lo); });
    });
    return out;
}

}  // namespace detail

template <std::floating_point S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> out = detail::binary_op<S>(
        "add", a, b, [](S* o, const S* x, const S* y, int64_t n) { for (int64_t i = 0; i < n; ++i) o[i] = x[i] + y[i]; });
    ensure_finite(out, "add");
    attach_node<S>(out, "add", {a, b}, [](const Tensor<S>& o) {
        auto& node = *o.node;
        const auto& g = o.grad();
        if (node.parents[0].requires_grad()) detail::reduce_grad_strided(node.parents[0], g, o.shape());
        if (node.parents[1].requires_grad()) detail::reduce_grad_strided(node.parents[1], g, o.shape());
    });
    return out;
}

template <std::floating_point S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> out = detail::binary_op<S>(
        "sub", a, b, [](S* o, const S* x, const S* y, int64_t n) { for (int64_t i = 0; i < n; ++i) o[i] = x[i] - y[i]; });
    ensure_finite(out, "sub");
    attach_node<S>(out, "sub", {a, b}, [](const Tensor<S>& o) {
        auto& node = *o.node;
        const auto& g = o.grad();
        if (node.parents[0].requires_grad()) detail::reduce_grad_strided(node.parents[0], g, o.shape());
        if (node.parents[1].requires_grad()) {
            std::vector<S> neg(g.size());
            for (size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
            detail::reduce_grad_strided(node.parents[1], neg, o.shape());
        }
    });
    return out;
}

namespace detail {

/// Materializes op(a_broadcast, b_broadcast) element products needed by the
/// multiplicative backward rules.
template <std::floating_point S, typename Fn>
std::vector<S> broadcast_apply(const Tensor<S>& a, const Tensor<S>& b, const Shape& out_shape, Fn&& fn) {
    std::vector<S> out(static_cast<size_t>(numel_of(out_shape)));
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    const S* pa = a.ptr();
    const S* pb = b.ptr();
    broadcast_iterate(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib, int64_t run) {
        for (int64_t i = 0; i < run; ++i) out[static_cast<size_t>(o + i)] = fn(pa[ia + i], pb[ib + i]);
    });
    return out;
}

}  // namespace detail

template <std::floating_point S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> out = detail::binary_op<S>(
        "mul", a, b, [](S* o, const S* x, const S* y, int64_t n) { for (int64_t i = 0; i < n; ++i) o[i] = x[i] * y[i]; });
    ensure_finite(out, "mul");
    attach_node<S>(out, "mul", {a, b}, [](const Tensor<S>& o) {
        auto& node = *o.node;
        const auto& g = o.grad();
        Tensor<S>& a_ = node.parents[0];
        Tensor<S>& b_ = node.parents[1];
        if (a_.requires_grad()) {
            auto gb = detail::broadcast_apply<S>(b_, b_, o.shape(), [](S x, S) { return x; });
            for (size_t i = 0; i < gb.size(); ++i) gb[i] *= g[i];
            detail::reduce_grad_strided(a_, gb, o.shape());
        }
        if (b_.requires_grad()) {
            auto ga = detail::broadcast_apply<S>(a_, a_, o.shape(), [](S x, S) { return x; });
            for (size_t i = 0; i < ga.size(); ++i) ga[i] *= g[i];
            detail::reduce_grad_strided(b_, ga, o.shape());
        }
    });
    return out;
}

template <std::floating_point S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> out = detail::binary_op<S>(
        "div", a, b, [](S* o, const S* x, const S* y, int64_t n) { for (int64_t i = 0; i < n; ++i) o[i] = x[i] / y[i]; });
    ensure_finite(out, "div");
    attach_node<S>(out, "div", {a, b}, [](const Tensor<S>& o) {
        auto& node = *o.node;
        const auto& g = o.grad();
        Tensor<S>& a_ = node.parents[0];
        Tensor<S>& b_ = node.parents[1];
        if (a_.requires_grad()) {
            auto gb = detail::broadcast_apply<S>(b_, b_, o.shape(), [](S x, S) { return S(1) / x; });
            for (size_t i = 0; i < gb.size(); ++i) gb[i] *= g[i];
            detail::reduce_grad_strided(a_, gb, o.shape());
        }
        if (b_.requires_grad()) {
            auto q = detail::broadcast_apply<S>(a_, b_, o.shape(), [](S x, S y) { return -x / (y * y); });
            for (size_t i = 0; i < q.size(); ++i) q[i] *= g[i];
            detail::reduce_grad_strided(b_, q, o.shape());
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise unary primitives
// ---------------------------------------------------------------------------

namespace detail {

template <std::floating_point S, typename Fwd>
Tensor<S> unary_map(const Tensor<S>& x, Fwd&& f) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const S* px = x.ptr();
    S* po = out.ptr();
    const int64_t n = x.numel();
    parallel_for(n, 1 << 15, [&](int64_t b, int64_t e) {
        for (int64_t i = b; i < e; ++i) po[i] = f(px[i]);
    });
    return out;
}

}  // namespace detail

template <std::floating_point S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
    Tensor<S> out = detail::unary_map(x, [factor](S v) { return v * factor; });
    ensure_finite(out, "scale");
    attach_node<S>(out, "scale", {x}, [factor](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        p.ensure_grad();
        auto& pg = p.grad();
        const auto& g = o.grad();
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += factor * g[i];
    });
    return out;
}

template <std::floating_point S>
Tensor<S> add_scalar(const Tensor<S>& x, S constant) {
    Tensor<S> out = detail::unary_map(x, [constant](S v) { return v + constant; });
    ensure_finite(out, "add_scalar");
    attach_node<S>(out, "add_scalar", {x}, [](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        detail::accumulate(p, o.grad());
    });
    return out;
}

template <std::floating_point S>
Tensor<S> neg(const Tensor<S>& x) {
    return scale(x, S(-1));
}

namespace detail {

/// Rational tanh approximation (error < 1e-7 on the clamp range), written
/// so the compiler can vectorize the surrounding loops. Used for the
/// standard (float) width; the wide path keeps std::tanh.
inline float fast_tanh(float x) {
    x = std::clamp(x, -9.0f, 9.0f);
    const float x2 = x * x;
    float p = -2.76076847742355e-16f;
    p = p * x2 + 2.00018790482477e-13f;
    p = p * x2 + -8.60467152213735e-11f;
    p = p * x2 + 5.12229709037114e-08f;
    p = p * x2 + 1.48572235717979e-05f;
    p = p * x2 + 6.37261928875436e-04f;
    p = p * x2 + 4.89352455891786e-03f;
    float q = 1.19825839466702e-06f;
    q = q * x2 + 1.18534705686654e-04f;
    q = q * x2 + 2.26843463243900e-03f;
    q = q * x2 + 4.89352518554385e-03f;
    return x * p / q;
}

template <std::floating_point S>
S tanh_of(S v) {
    if constexpr (std::is_same_v<S, float>) {
        return fast_tanh(v);
    } else {
        return std::tanh(v);
    }
}

}  // namespace detail

template <std::floating_point S>
Tensor<S> gelu(const Tensor<S>& x) {
    // tanh form; the tanh values are saved for the backward rule.
    const S kAlpha = static_cast<S>(0.7978845608028653558798921198687);  // sqrt(2/pi)
    const S kCubic = static_cast<S>(0.044715);
    auto saved = std::make_shared<std::vector<S>>(x.data().size());
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const S* px = x.ptr();
    S* po = out.ptr();
    S* pt = saved->data();
    parallel_for(x.numel(), 1 << 14, [&](int64_t b, int64_t e) {
        for (int64_t i = b; i < e; ++i) {
            const S v = px[i];
            const S t = detail::tanh_of(kAlpha * (v + kCubic * v * v * v));
            pt[i] = t;
            po[i] = S(0.5) * v * (S(1) + t);
        }
    });
    ensure_finite(out, "gelu");
    attach_node<S>(out, "gelu", {x}, [saved, kAlpha, kCubic](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        p.ensure_grad();
        auto& pg = p.grad();
        const auto& g = o.grad();
        const auto& xv = p.data();
        const auto& tv = *saved;
        parallel_for(static_cast<int64_t>(pg.size()), 1 << 14, [&](int64_t b, int64_t e) {
            for (int64_t i = b; i < e; ++i) {
                const S v = xv[i];
                const S t = tv[i];
                const S sech2 = S(1) - t * t;
                const S du = kAlpha * (S(1) + S(3) * kCubic * v * v);
                pg[i] += g[i] * (S(0.5) * (S(1) + t) + S(0.5) * v * sech2 * du);
            }
        });
    });
    return out;
}

template <std::floating_point S>
Tensor<S> silu(const Tensor<S>& x) {
    auto sig = std::make_shared<std::vector<S>>(x.data().size());
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const S* px = x.ptr();
    S* po = out.ptr();
    S* ps = sig->data();
    parallel_for(x.numel(), 1 << 14, [&](int64_t b, int64_t e) {
        for (int64_t i = b; i < e; ++i) {
            const S s = S(1) / (S(1) + std::exp(-px[i]));
            ps[i] = s;
            po[i] = px[i] * s;
        }
    });
    ensure_finite(out, "silu");
    attach_node<S>(out, "silu", {x}, [sig](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        p.ensure_grad();
        auto& pg = p.grad();
        const auto& g = o.grad();
        const auto& xv = p.data();
        const auto& sv = *sig;
        for (size_t i = 0; i < pg.size(); ++i) {
            const S s = sv[i];
            pg[i] += g[i] * (s + xv[i] * s * (S(1) - s));
        }
    });
    return out;
}

template <std::floating_point S>
Tensor<S> sqrt_op(const Tensor<S>& x) {
    Tensor<S> out = detail::unary_map(x, [](S v) { return std::sqrt(v); });
    ensure_finite(out, "sqrt");
    auto saved = std::make_shared<std::vector<S>>(out.data());
    attach_node<S>(out, "sqrt", {x}, [saved](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        p.ensure_grad();
        auto& pg = p.grad();
        const auto& g = o.grad();
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += g[i] / (S(2) * (*saved)[i]);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Shape primitives (always copies; no views in v1)
// ---------------------------------------------------------------------------

template <std::floating_point S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
    // One -1 dim is inferred.
    int64_t known = 1;
    int infer = -1;
    for (size_t i = 0; i < new_shape.size(); ++i) {
        if (new_shape[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape: more than one inferred dim");
            infer = static_cast<int>(i);
        } else {
            known *= new_shape[i];
        }
    }
    if (infer >= 0) new_shape[static_cast<size_t>(infer)] = x.numel() / known;
    if (numel_of(new_shape) != x.numel())
        throw ShapeError("reshape: cannot reshape " + shape_str(x.shape()) + " to " + shape_str(new_shape));
    Tensor<S> out(new_shape, x.data());
    attach_node<S>(out, "reshape", {x}, [](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        detail::accumulate(p, o.grad());
    });
    return out;
}

template <std::floating_point S>
Tensor<S> transpose(const Tensor<S>& x, const std::vector<int>& perm) {
    const int nd = x.ndim();
    if (static_cast<int>(perm.size()) != nd) throw ShapeError("transpose: perm rank mismatch");
    Shape out_shape(nd);
    std::vector<int64_t> in_strides(nd, 1), perm_strides(nd);
    for (int i = nd - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x.shape()[i + 1];
    for (int i = 0; i < nd; ++i) {
        out_shape[i] = x.shape()[perm[i]];
        perm_strides[i] = in_strides[perm[i]];
    }
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    const S* px = x.ptr();
    S* po = out.ptr();
    const int64_t total = x.numel();
    const int64_t inner = out_shape.empty() ? 1 : out_shape[static_cast<size_t>(nd - 1)];
    const int64_t inner_stride = perm_strides[static_cast<size_t>(nd - 1)];
    const int64_t outer = total / std::max<int64_t>(1, inner);
    parallel_for(outer, 1 << 12, [&](int64_t b, int64_t e) {
        std::vector<int64_t> idx(nd, 0);
        // position the multi-index at outer iteration b
        int64_t rem = b;
        for (int i = nd - 2; i >= 0; --i) {
            idx[i] = rem % out_shape[i];
            rem /= out_shape[i];
        }
        int64_t src = 0;
        for (int i = 0; i < nd - 1; ++i) src += idx[i] * perm_strides[i];
        for (int64_t it = b; it < e; ++it) {
            S* dst = po + it * inner;
            if (inner_stride == 1) {
                std::memcpy(dst, px + src, static_cast<size_t>(inner) * sizeof(S));
            } else {
                for (int64_t j = 0; j < inner; ++j) dst[j] = px[src + j * inner_stride];
            }
            for (int i = nd - 2; i >= 0; --i) {
                ++idx[i];
                src += perm_strides[i];
                if (idx[i] < out_shape[i]) break;
                src -= perm_strides[i] * out_shape[i];
                idx[i] = 0;
            }
        }
    });
    attach_node<S>(out, "transpose", {x}, [perm](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        std::vector<int> inv(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
        autograd::NoGradGuard ng;
        Tensor<S> go(o.shape(), o.grad());
        Tensor<S> gt = transpose(go, inv);
        detail::accumulate(p, gt.data());
    });
    return out;
}

template <std::floating_point S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int nd = parts[0].ndim();
    if (axis < 0) axis += nd;
    Shape out_shape = parts[0].shape();
    int64_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != nd) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            if (i != axis && p.shape()[i] != out_shape[i])
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(out_shape));
        axis_total += p.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = axis_total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[i];
    for (int i = axis + 1; i < nd; ++i) inner *= out_shape[i];
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    S* po = out.ptr();
    int64_t axis_off = 0;
    for (const auto& p : parts) {
        const int64_t rows = p.dim(axis);
        const S* pp = p.ptr();
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(po + (o * axis_total + axis_off) * inner, pp + o * rows * inner,
                        static_cast<size_t>(rows * inner) * sizeof(S));
        }
        axis_off += rows;
    }
    std::vector<Tensor<S>> parents = parts;
    attach_node<S>(out, "concat", parents, [axis, outer, inner, axis_total](const Tensor<S>& o) {
        const auto& g = o.grad();
        int64_t axis_off = 0;
        for (auto& p : o.node->parents) {
            const int64_t rows = p.dim(axis);
            if (p.requires_grad()) {
                p.ensure_grad();
                auto& pg = p.grad();
                for (int64_t ou = 0; ou < outer; ++ou) {
                    const S* src = g.data() + (ou * axis_total + axis_off) * inner;
                    S* dst = pg.data() + ou * rows * inner;
                    for (int64_t i = 0; i < rows * inner; ++i) dst[i] += src[i];
                }
            }
            axis_off += rows;
        }
    });
    return out;
}

template <std::floating_point S>
Tensor<S> slice(const Tensor<S>& x, int axis, int64_t start, int64_t len) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ShapeError("slice: bad axis");
    if (start < 0 || len <= 0 || start + len > x.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of bounds for dim " + std::to_string(x.dim(axis)));
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[i];
    const int64_t full = x.dim(axis);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    S* po = out.ptr();
    const S* px = x.ptr();
    for (int64_t o = 0; o < outer; ++o) {
        std::memcpy(po + o * len * inner, px + (o * full + start) * inner, static_cast<size_t>(len * inner) * sizeof(S));
    }
    attach_node<S>(out, "slice", {x}, [axis, start, len, outer, inner, full](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        p.ensure_grad();
        auto& pg = p.grad();
        const auto& g = o.grad();
        for (int64_t ou = 0; ou < outer; ++ou) {
            const S* src = g.data() + ou * len * inner;
            S* dst = pg.data() + (ou * full + start) * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
    });
    return out;
}

template <std::floating_point S>
std::vector<Tensor<S>> split(const Tensor<S>& x, const std::vector<int64_t>& sizes, int axis) {
    int64_t total = 0;
    for (int64_t s : sizes) total += s;
    const int nd = x.ndim();
    const int ax = axis < 0 ? axis + nd : axis;
    if (total != x.dim(ax))
        throw ShapeError("split: sizes sum " + std::to_string(total) + " != dim " + std::to_string(x.dim(ax)));
    std::vector<Tensor<S>> parts;
    int64_t off = 0;
    for (int64_t s : sizes) {
        parts.push_back(slice(x, ax, off, s));
        off += s;
    }
    return parts;
}

/// out[r, :] = x[index[r], :] for 2-D x. Covers permutations (subregion
/// division) and repeats (context replication); backward scatter-adds.
template <std::floating_point S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int64_t>& index) {
    if (x.ndim() != 2) throw ShapeError("gather_rows: expected 2-D, got " + shape_str(x.shape()));
    const int64_t rows = x.dim(0), cols = x.dim(1);
    for (int64_t r : index)
        if (r < 0 || r >= rows) throw ShapeError("gather_rows: index " + std::to_string(r) + " out of range");
    Tensor<S> out = Tensor<S>::zeros({static_cast<int64_t>(index.size()), cols});
    S* po = out.ptr();
    const S* px = x.ptr();
    parallel_for(static_cast<int64_t>(index.size()), 1 << 12, [&](int64_t b, int64_t e) {
        for (int64_t r = b; r < e; ++r)
            std::memcpy(po + r * cols, px + index[r] * cols, static_cast<size_t>(cols) * sizeof(S));
    });
    auto idx = std::make_shared<std::vector<int64_t>>(index);
    attach_node<S>(out, "gather_rows", {x}, [idx, cols](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        p.ensure_grad();
        auto& pg = p.grad();
        const auto& g = o.grad();
        for (size_t r = 0; r < idx->size(); ++r) {
            const S* src = g.data() + static_cast<int64_t>(r) * cols;
            S* dst = pg.data() + (*idx)[r] * cols;
            for (int64_t c = 0; c < cols; ++c) dst[c] += src[c];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <std::floating_point S>
Tensor<S> sum_all(const Tensor<S>& x) {
    if (x.numel() == 0) throw ShapeError("sum: empty tensor");
    // Pairwise reduction keeps the result independent of any chunking.
    const auto& v = x.data();
    std::function<S(int64_t, int64_t)> rec = [&](int64_t b, int64_t e) -> S {
        if (e - b <= 8) {
            S acc = 0;
            for (int64_t i = b; i < e; ++i) acc += v[static_cast<size_t>(i)];
            return acc;
        }
        const int64_t mid = b + (e - b) / 2;
        return rec(b, mid) + rec(mid, e);
    };
    Tensor<S> out = Tensor<S>::scalar(rec(0, x.numel()));
    ensure_finite(out, "sum");
    attach_node<S>(out, "sum", {x}, [](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        p.ensure_grad();
        const S g = o.grad()[0];
        for (auto& gv : p.grad()) gv += g;
    });
    return out;
}

template <std::floating_point S>
Tensor<S> mean_all(const Tensor<S>& x) {
    return scale(sum_all(x), S(1) / static_cast<S>(x.numel()));
}

template <std::floating_point S>
Tensor<S> sum_axis(const Tensor<S>& x, int axis) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ShapeError("sum_axis: bad axis");
    Shape out_shape = x.shape();
    const int64_t reduce_n = out_shape[static_cast<size_t>(axis)];
    out_shape.erase(out_shape.begin() + axis);
    if (out_shape.empty()) out_shape = {1};
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[i];
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    S* po = out.ptr();
    const S* px = x.ptr();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t r = 0; r < reduce_n; ++r) {
            const S* src = px + (o * reduce_n + r) * inner;
            S* dst = po + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    }
    ensure_finite(out, "sum_axis");
    attach_node<S>(out, "sum_axis", {x}, [outer, inner, reduce_n](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        p.ensure_grad();
        auto& pg = p.grad();
        const auto& g = o.grad();
        for (int64_t ou = 0; ou < outer; ++ou)
            for (int64_t r = 0; r < reduce_n; ++r) {
                S* dst = pg.data() + (ou * reduce_n + r) * inner;
                const S* src = g.data() + ou * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
    return out;
}

template <std::floating_point S>
Tensor<S> mean_axis(const Tensor<S>& x, int axis) {
    const int nd = x.ndim();
    const int ax = axis < 0 ? axis + nd : axis;
    return scale(sum_axis(x, ax), S(1) / static_cast<S>(x.dim(ax)));
}

// ---------------------------------------------------------------------------
// Normalization / softmax (last axis)
// ---------------------------------------------------------------------------

template <std::floating_point S>
Tensor<S> layer_norm(const Tensor<S>& x, S eps = S(1e-6)) {
    if (x.numel() == 0) throw ShapeError("layer_norm: empty tensor");
    const int64_t cols = x.dim(-1);
    const int64_t rows = x.numel() / cols;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
    auto mean_v = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
    const S* px = x.ptr();
    S* po = out.ptr();
    parallel_for(rows, std::max<int64_t>(1, (1 << 14) / cols), [&](int64_t b, int64_t e) {
        for (int64_t r = b; r < e; ++r) {
            const S* row = px + r * cols;
            S m = 0;
            for (int64_t c = 0; c < cols; ++c) m += row[c];
            m /= static_cast<S>(cols);
            S var = 0;
            for (int64_t c = 0; c < cols; ++c) {
                const S d = row[c] - m;
                var += d * d;
            }
            var /= static_cast<S>(cols);
            const S is = S(1) / std::sqrt(var + eps);
            (*mean_v)[static_cast<size_t>(r)] = m;
            (*inv_std)[static_cast<size_t>(r)] = is;
            S* orow = po + r * cols;
            for (int64_t c = 0; c < cols; ++c) orow[c] = (row[c] - m) * is;
        }
    });
    ensure_finite(out, "layer_norm");
    attach_node<S>(out, "layer_norm", {x}, [rows, cols, inv_std, mean_v](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        p.ensure_grad();
        auto& pg = p.grad();
        const auto& g = o.grad();
        const auto& xv = p.data();
        parallel_for(rows, std::max<int64_t>(1, (1 << 13) / cols), [&](int64_t b, int64_t e) {
            for (int64_t r = b; r < e; ++r) {
                const S m = (*mean_v)[static_cast<size_t>(r)];
                const S is = (*inv_std)[static_cast<size_t>(r)];
                const S* grow = g.data() + r * cols;
                const S* xrow = xv.data() + r * cols;
                S g_mean = 0, gx_mean = 0;
                for (int64_t c = 0; c < cols; ++c) {
                    const S xn = (xrow[c] - m) * is;
                    g_mean += grow[c];
                    gx_mean += grow[c] * xn;
                }
                g_mean /= static_cast<S>(cols);
                gx_mean /= static_cast<S>(cols);
                S* prow = pg.data() + r * cols;
                for (int64_t c = 0; c < cols; ++c) {
                    const S xn = (xrow[c] - m) * is;
                    prow[c] += is * (grow[c] - g_mean - xn * gx_mean);
                }
            }
        });
    });
    return out;
}

template <std::floating_point S>
Tensor<S> rms_norm(const Tensor<S>& x, S eps = S(1e-6)) {
    if (x.numel() == 0) throw ShapeError("rms_norm: empty tensor");
    const int64_t cols = x.dim(-1);
    const int64_t rows = x.numel() / cols;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto inv_rms = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
    const S* px = x.ptr();
    S* po = out.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const S* row = px + r * cols;
        S ms = 0;
        for (int64_t c = 0; c < cols; ++c) ms += row[c] * row[c];
        ms /= static_cast<S>(cols);
        const S ir = S(1) / std::sqrt(ms + eps);
        (*inv_rms)[static_cast<size_t>(r)] = ir;
        S* orow = po + r * cols;
        for (int64_t c = 0; c < cols; ++c) orow[c] = row[c] * ir;
    }
    ensure_finite(out, "rms_norm");
    attach_node<S>(out, "rms_norm", {x}, [rows, cols, inv_rms](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        p.ensure_grad();
        auto& pg = p.grad();
        const auto& g = o.grad();
        const auto& xv = p.data();
        for (int64_t r = 0; r < rows; ++r) {
            const S ir = (*inv_rms)[static_cast<size_t>(r)];
            const S* grow = g.data() + r * cols;
            const S* xrow = xv.data() + r * cols;
            S gx = 0;
            for (int64_t c = 0; c < cols; ++c) gx += grow[c] * xrow[c];
            const S k = gx * ir * ir * ir / static_cast<S>(cols);
            S* prow = pg.data() + r * cols;
            for (int64_t c = 0; c < cols; ++c) prow[c] += grow[c] * ir - xrow[c] * k;
        }
    });
    return out;
}

template <std::floating_point S>
Tensor<S> softmax(const Tensor<S>& x) {
    if (x.numel() == 0) throw ShapeError("softmax: empty tensor");
    const int64_t cols = x.dim(-1);
    const int64_t rows = x.numel() / cols;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const S* px = x.ptr();
    S* po = out.ptr();
    parallel_for(rows, std::max<int64_t>(1, (1 << 13) / cols), [&](int64_t b, int64_t e) {
        for (int64_t r = b; r < e; ++r) {
            const S* row = px + r * cols;
            S mx = row[0];
            for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
            S* orow = po + r * cols;
            S z = 0;
            for (int64_t c = 0; c < cols; ++c) {
                const S ev = std::exp(row[c] - mx);
                orow[c] = ev;
                z += ev;
            }
            const S iz = S(1) / z;
            for (int64_t c = 0; c < cols; ++c) orow[c] *= iz;
        }
    });
    ensure_finite(out, "softmax");
    auto saved = std::make_shared<std::vector<S>>(out.data());
    attach_node<S>(out, "softmax", {x}, [rows, cols, saved](const Tensor<S>& o) {
        auto& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        p.ensure_grad();
        auto& pg = p.grad();
        const auto& g = o.grad();
        const auto& y = *saved;
        parallel_for(rows, std::max<int64_t>(1, (1 << 13) / cols), [&](int64_t b, int64_t e) {
            for (int64_t r = b; r < e; ++r) {
                const S* grow = g.data() + r * cols;
                const S* yrow = y.data() + r * cols;
                S dot = 0;
                for (int64_t c = 0; c < cols; ++c) dot += grow[c] * yrow[c];
                S* prow = pg.data() + r * cols;
                for (int64_t c = 0; c < cols; ++c) prow[c] += yrow[c] * (grow[c] - dot);
            }
        });
    });
    return out;
}

// ---------------------------------------------------------------------------
// matmul / linear / embedding
// ---------------------------------------------------------------------------

namespace detail {

struct MatmulDims {
    int64_t m, n, k;
    Shape batch;          // broadcast batch shape
    Shape out_shape;      // batch + [m, n]
    int64_t batch_count;
};

inline MatmulDims matmul_dims(const Shape& a, const Shape& b, bool ta, bool tb) {
    if (a.size() < 2 || b.size() < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a) + " and " + shape_str(b));
    const int64_t am = a[a.size() - 2], ak = a[a.size() - 1];
    const int64_t bk = b[b.size() - 2], bn = b[b.size() - 1];
    const int64_t m = ta ? ak : am;
    const int64_t ka = ta ? am : ak;
    const int64_t kb = tb ? bn : bk;
    const int64_t n = tb ? bk : bn;
    if (ka != kb)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a) + (ta ? "^T" : "") + " x " +
                         shape_str(b) + (tb ? "^T" : ""));
    Shape ba(a.begin(), a.end() - 2), bb(b.begin(), b.end() - 2);
    Shape batch = broadcast_shapes(ba, bb, "matmul");
    Shape out = batch;
    out.push_back(m);
    out.push_back(n);
    MatmulDims d;
    d.m = m;
    d.n = n;
    d.k = ka;
    d.batch = batch;
    d.out_shape = out;
    d.batch_count = numel_of(batch);
    return d;
}

/// Maps flat batch index in the broadcast batch shape to an operand's slice.
inline int64_t batch_offset(int64_t flat, const Shape& batch, const Shape& operand_batch) {
    if (operand_batch.empty()) return 0;
    int64_t off = 0;
    int64_t stride = 1;
    std::vector<int64_t> ostrides(operand_batch.size());
    for (size_t i = operand_batch.size(); i-- > 0;) {
        ostrides[i] = stride;
        stride *= operand_batch[i];
    }
    const size_t pad = batch.size() - operand_batch.size();
    for (size_t i = batch.size(); i-- > 0;) {
        const int64_t dim = batch[i];
        const int64_t idx = flat % dim;
        flat /= dim;
        if (i >= pad && operand_batch[i - pad] != 1) off += idx * ostrides[i - pad];
    }
    return off;
}

}  // namespace detail

/// Batched matrix product with optional transposes on the trailing two dims.
/// Leading (batch) dims broadcast.
template <std::floating_point S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false, bool trans_b = false) {
    const auto d = detail::matmul_dims(a.shape(), b.shape(), trans_a, trans_b);
    autograd::mac_counter += d.batch_count * d.m * d.n * d.k;
    Tensor<S> out = Tensor<S>::zeros(d.out_shape);
    Shape ba(a.shape().begin(), a.shape().end() - 2), bb(b.shape().begin(), b.shape().end() - 2);
    const int64_t a_slice = a.dim(-2) * a.dim(-1);
    const int64_t b_slice = b.dim(-2) * b.dim(-1);
    const S* pa = a.ptr();
    const S* pb = b.ptr();
    S* po = out.ptr();
    if (d.batch_count >= ThreadPool::instance().size() && d.batch_count > 1) {
        parallel_for(d.batch_count, 1, [&](int64_t s0, int64_t s1) {
            std::vector<S> scratch;
            for (int64_t s = s0; s < s1; ++s) {
                const int64_t ao = detail::batch_offset(s, d.batch, ba) * a_slice;
                const int64_t bo = detail::batch_offset(s, d.batch, bb) * b_slice;
                // sequential inner gemm: workers own disjoint output slices
                std::vector<S>& tmp = scratch;
                if (trans_b) {
                    tmp.resize(static_cast<size_t>(d.k * d.n));
                    detail::transpose_2d(d.n, d.k, pb + bo, tmp.data());
                }
                const S* bptr = trans_b ? tmp.data() : pb + bo;
                S* cptr = po + s * d.m * d.n;
                if (trans_a) {
                    detail::gemm_tn_panel(int64_t(0), d.m, d.m, d.n, d.k, pa + ao, bptr, cptr);
                } else {
                    detail::gemm_nn_panel(int64_t(0), d.m, d.n, d.k, pa + ao, bptr, cptr);
                }
            }
        });
    } else {
        std::vector<S> scratch;
        for (int64_t s = 0; s < d.batch_count; ++s) {
            const int64_t ao = detail::batch_offset(s, d.batch, ba) * a_slice;
            const int64_t bo = detail::batch_offset(s, d.batch, bb) * b_slice;
            detail::gemm_acc(trans_a, trans_b, d.m, d.n, d.k, pa + ao, pb + bo, po + s * d.m * d.n, &scratch);
        }
    }
    ensure_finite(out, "matmul");
    attach_node<S>(out, "matmul", {a, b}, [trans_a, trans_b](const Tensor<S>& o) {
        auto& node = *o.node;
        Tensor<S>& a_ = node.parents[0];
        Tensor<S>& b_ = node.parents[1];
        autograd::NoGradGuard ng;
        // Equal-batch case (all attention matmuls): accumulate straight
        // into the parents' gradient buffers slice by slice.
        Shape ba_(a_.shape().begin(), a_.shape().end() - 2);
        Shape bb_(b_.shape().begin(), b_.shape().end() - 2);
        if (ba_ == bb_) {
            const auto dd = detail::matmul_dims(a_.shape(), b_.shape(), trans_a, trans_b);
            const int64_t a_slice = a_.dim(-2) * a_.dim(-1);
            const int64_t b_slice = b_.dim(-2) * b_.dim(-1);
            const int64_t o_slice = dd.m * dd.n;
            const S* pg = o.grad().data();
            const S* pa = a_.ptr();
            const S* pb = b_.ptr();
            S* ga = nullptr;
            S* gb = nullptr;
            if (a_.requires_grad()) {
                a_.ensure_grad();
                ga = a_.grad().data();
            }
            if (b_.requires_grad()) {
                b_.ensure_grad();
                gb = b_.grad().data();
            }
            parallel_for(dd.batch_count, dd.batch_count >= ThreadPool::instance().size() ? 1 : dd.batch_count,
                         [&](int64_t s0, int64_t s1) {
                             std::vector<S> scratch;
                             for (int64_t s = s0; s < s1; ++s) {
                                 const S* gs = pg + s * o_slice;
                                 const S* as = pa + s * a_slice;
                                 const S* bs = pb + s * b_slice;
                                 if (ga) {
                                     S* das = ga + s * a_slice;
                                     const int64_t am = a_.dim(-2), an = a_.dim(-1);
                                     if (!trans_a) {
                                         // dA[m,k] = g . op(B)^T
                                         if (!trans_b)
                                             detail::gemm_acc(false, true, am, an, dd.n, gs, bs, das, &scratch);
                                         else
                                             detail::gemm_acc(false, false, am, an, dd.n, gs, bs, das, &scratch);
                                     } else {
                                         // dA[k,m] = op(B) . g^T
                                         if (!trans_b)
                                             detail::gemm_acc(false, true, am, an, dd.n, bs, gs, das, &scratch);
                                         else
                                             detail::gemm_acc(true, true, am, an, dd.n, bs, gs, das, &scratch);
                                     }
                                 }
                                 if (gb) {
                                     S* dbs = gb + s * b_slice;
                                     const int64_t bm = b_.dim(-2), bn = b_.dim(-1);
                                     if (!trans_b) {
                                         // dB[k,n] = op(A)^T . g
                                         if (!trans_a)
                                             detail::gemm_acc(true, false, bm, bn, dd.m, as, gs, dbs, &scratch);
                                         else
                                             detail::gemm_acc(false, false, bm, bn, dd.m, as, gs, dbs, &scratch);
                                     } else {
                                         // dB[n,k] = g^T . op(A)
                                         if (!trans_a)
                                             detail::gemm_acc(true, false, bm, bn, dd.m, gs, as, dbs, &scratch);
                                         else
                                             detail::gemm_acc(true, true, bm, bn, dd.m, gs, as, dbs, &scratch);
                                     }
                                 }
                             }
                         });
            return;
        }
        Tensor<S> g(o.shape(), o.grad());
        const Tensor<S> ad = a_.detach();
        const Tensor<S> bd = b_.detach();
        if (a_.requires_grad()) {
            Tensor<S> da = trans_a ? (trans_b ? matmul(bd, g, true, true) : matmul(bd, g, false, true))
                                   : (trans_b ? matmul(g, bd, false, false) : matmul(g, bd, false, true));
            // collapse broadcast batch dims if a had fewer
            Shape ba(a_.shape().begin(), a_.shape().end() - 2);
            Shape da_batch(da.shape().begin(), da.shape().end() - 2);
            while (da.ndim() > a_.ndim()) da = sum_axis(da, 0);
            for (int i = 0; i < da.ndim() - 2; ++i) {
                if (a_.shape()[i] == 1 && da.dim(i) != 1) {
                    Tensor<S> red = sum_axis(da, i);
                    Shape ns = da.shape();
                    ns[static_cast<size_t>(i)] = 1;
                    da = reshape(red, ns);
                }
            }
            detail::accumulate(a_, da.data());
        }
        if (b_.requires_grad()) {
            Tensor<S> db = trans_b ? (trans_a ? matmul(g, ad, true, true) : matmul(g, ad, true, false))
                                   : (trans_a ? matmul(ad, g, false, false) : matmul(ad, g, true, false));
            while (db.ndim() > b_.ndim()) db = sum_axis(db, 0);
            for (int i = 0; i < db.ndim() - 2; ++i) {
                if (b_.shape()[i] == 1 && db.dim(i) != 1) {
                    Tensor<S> red = sum_axis(db, i);
                    Shape ns = db.shape();
                    ns[static_cast<size_t>(i)] = 1;
                    db = reshape(red, ns);
                }
            }
            detail::accumulate(b_, db.data());
        }
    });
    return out;
}

/// y = x . W^T + b with x [..., in], W [out, in], b [out] (optional).
template <std::floating_point S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>* bias = nullptr) {
    if (weight.ndim() != 2) throw ShapeError("linear: weight must be 2-D, got " + shape_str(weight.shape()));
    const int64_t in = weight.dim(1), out_f = weight.dim(0);
    if (x.dim(-1) != in)
        throw ShapeError("linear: input width " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    if (bias && (bias->ndim() != 1 || bias->dim(0) != out_f))
        throw ShapeError("linear: bias shape " + shape_str(bias->shape()) + " != [" + std::to_string(out_f) + "]");
    const int64_t rows = x.numel() / in;
    autograd::mac_counter += rows * in * out_f;
    Shape out_shape = x.shape();
    out_shape.back() = out_f;
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    // y = x [rows,in] * (W^T) [in,out]
    std::vector<S> wt(static_cast<size_t>(in * out_f));
    detail::transpose_2d(out_f, in, weight.ptr(), wt.data());
    if (bias) {
        const S* pb = bias->ptr();
        S* po = out.ptr();
        parallel_for(rows, std::max<int64_t>(1, (1 << 14) / out_f), [&](int64_t b, int64_t e) {
            for (int64_t r = b; r < e; ++r) std::memcpy(po + r * out_f, pb, static_cast<size_t>(out_f) * sizeof(S));
        });
    }
    detail::gemm_nn(rows, out_f, in, x.ptr(), wt.data(), out.ptr());
    ensure_finite(out, "linear");
    std::vector<Tensor<S>> parents = {x, weight};
    if (bias) parents.push_back(*bias);
    attach_node<S>(out, "linear", parents, [rows, in, out_f](const Tensor<S>& o) {
        auto& node = *o.node;
        Tensor<S>& x_ = node.parents[0];
        Tensor<S>& w_ = node.parents[1];
        const auto& g = o.grad();
        if (x_.requires_grad()) {
            x_.ensure_grad();
            // dx [rows,in] = g [rows,out] * W [out,in]
            detail::gemm_nn(rows, in, out_f, g.data(), w_.ptr(), x_.grad().data());
        }
        if (w_.requires_grad()) {
            w_.ensure_grad();
            // dW [out,in] = g^T [out,rows] * x [rows,in]
            detail::gemm_tn(out_f, in, rows, g.data(), x_.ptr(), w_.grad().data());
        }
        if (node.parents.size() == 3 && node.parents[2].requires_grad()) {
            Tensor<S>& b_ = node.parents[2];
            b_.ensure_grad();
            auto& bg = b_.grad();
            for (int64_t r = 0; r < rows; ++r) {
                const S* grow = g.data() + r * out_f;
                for (int64_t c = 0; c < out_f; ++c) bg[static_cast<size_t>(c)] += grow[c];
            }
        }
    });
    return out;
}

/// Row lookup: out[i, :] = table[ids[i], :].
template <std::floating_point S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int64_t>& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding: table must be 2-D");
    return gather_rows(table, ids);
}

// Convenience compositions used across modules (not primitives themselves).

template <std::floating_point S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> d = sub(a, b);
    return mean_all(mul(d, d));
}

}  // namespace emdt
