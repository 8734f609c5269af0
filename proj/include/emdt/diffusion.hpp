#pragma once

#include <functional>
#include <string>

#include "emdt/model.hpp"
#include "emdt/nn.hpp"

namespace emdt {

/// Monotone noise-level map sigma(t): [0,1] -> [0,1] with exact endpoints.
/// The default straight path sigma(t) = t is what the velocity objective
/// integrates exactly.
template <std::floating_point S>
struct FlowSchedule {
    std::function<S(S)> sigma = [](S t) { return t; };

    static FlowSchedule linear() { return FlowSchedule{}; }

    S operator()(S t) const { return sigma(t); }

    void validate() const {
        if (sigma(S(0)) != S(0) || sigma(S(1)) != S(1))
            throw ConfigError("flow schedule: sigma must satisfy sigma(0)=0, sigma(1)=1");
    }
};

enum class TimestepSampler { kUniform, kLogitNormal };

template <std::floating_point S>
Tensor<S> draw_timesteps(int64_t batch, TimestepSampler sampler, Rng& rng) {
    std::vector<S> t(static_cast<size_t>(batch));
    for (auto& v : t) {
        if (sampler == TimestepSampler::kUniform) {
            v = static_cast<S>(rng.uniform());
        } else {
            v = static_cast<S>(1.0 / (1.0 + std::exp(-rng.normal())));
        }
    }
    return Tensor<S>({batch}, std::move(t));
}

/// x_t = (1 - sigma_t) x0 + sigma_t eps, sigma broadcast per batch element.
template <std::floating_point S>
Tensor<S> forward_process(const Tensor<S>& x0, const Tensor<S>& eps, const Tensor<S>& t,
                          const FlowSchedule<S>& sched) {
    if (x0.shape() != eps.shape())
        throw ShapeError("forward_process: x0 " + shape_str(x0.shape()) + " vs eps " + shape_str(eps.shape()));
    if (t.dim(0) != x0.dim(0)) throw ShapeError("forward_process: timestep batch mismatch");
    const int64_t B = x0.dim(0);
    Shape bshape(static_cast<size_t>(x0.ndim()), 1);
    bshape[0] = B;
    std::vector<S> sig(static_cast<size_t>(B)), inv(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
        const S s = sched(t.data()[static_cast<size_t>(b)]);
        if (s < S(0) || s > S(1)) throw ConfigError("forward_process: sigma out of [0,1]");
        sig[static_cast<size_t>(b)] = s;
        inv[static_cast<size_t>(b)] = S(1) - s;
    }
    Tensor<S> sig_t(bshape, std::move(sig));
    Tensor<S> inv_t(bshape, std::move(inv));
    return add(mul(x0, inv_t), mul(eps, sig_t));
}

/// Velocity field queried by the sampler and the loss: (x_t, t) -> v.
template <std::floating_point S>
using VelocityFn = std::function<Tensor<S>(const Tensor<S>&, const Tensor<S>&)>;

/// Rectified-flow objective for fixed draws: mean squared error between the
/// straight-path velocity (eps - x0) and the prediction at x_t.
template <std::floating_point S>
Tensor<S> rf_loss_parts(const Tensor<S>& x0, const Tensor<S>& eps, const Tensor<S>& t, const FlowSchedule<S>& sched,
                        const VelocityFn<S>& velocity) {
    Tensor<S> x_t = forward_process(x0, eps, t, sched);
    Tensor<S> v;
    try {
        v = velocity(x_t, t);
    } catch (const NumericsError& e) {
        throw TrainError(std::string("rf_loss: non-finite forward (") + e.what() + "), batch " +
                         std::to_string(x0.dim(0)) + ", t[0]=" + std::to_string(static_cast<double>(t.data()[0])));
    }
    if (v.shape() != x0.shape())
        throw ShapeError("rf_loss: model output " + shape_str(v.shape()) + " does not match x0 " +
                         shape_str(x0.shape()));
    Tensor<S> target = sub(eps, x0);
    Tensor<S> loss = mse(target, v);
    if (!std::isfinite(loss.item()))
        throw TrainError("rf_loss: non-finite loss, batch " + std::to_string(x0.dim(0)));
    return loss;
}

template <std::floating_point S>
struct RfDraws {
    Tensor<S> t, eps;
};

template <std::floating_point S>
RfDraws<S> draw_rf(const Tensor<S>& x0, TimestepSampler sampler, Rng& rng) {
    RfDraws<S> d;
    d.t = draw_timesteps<S>(x0.dim(0), sampler, rng);
    d.eps = Tensor<S>::randn(x0.shape(), rng);
    return d;
}

/// Draws (t, eps) and evaluates the rectified-flow loss of a model.
template <std::floating_point S>
Tensor<S> rf_loss(const Model<S>& model, const Tensor<S>& x0, const Conditioning<S>& cond,
                  const FlowSchedule<S>& sched, TimestepSampler sampler, Rng& rng,
                  ForwardTrace<S>* trace = nullptr) {
    const RfDraws<S> d = draw_rf(x0, sampler, rng);
    return rf_loss_parts<S>(x0, d.eps, d.t, sched,
                            [&](const Tensor<S>& x_t, const Tensor<S>& tt) { return model.forward(x_t, tt, cond, trace); });
}

// ---------------------------------------------------------------------------
// Representation alignment
// ---------------------------------------------------------------------------

/// Frozen feature map from clean images to per-token features on the same
/// grid the model's alignment tap uses. A seed-fixed patch MLP stands in
/// for a large pretrained encoder; none of its tensors take gradients.
template <std::floating_point S>
struct ReuseEncoder {
    int64_t patch = 4;
    int64_t feat_dim = 64;
    Tensor<S> w1, b1, w2, b2;  // frozen

    static ReuseEncoder make(int64_t in_channels, int64_t patch, int64_t feat_dim, uint64_t seed) {
        ReuseEncoder e;
        e.patch = patch;
        e.feat_dim = feat_dim;
        Rng rng(seed);
        const int64_t in = in_channels * patch * patch;
        e.w1 = Tensor<S>::randn({feat_dim, in}, rng, static_cast<S>(1.0 / std::sqrt(static_cast<double>(in))));
        e.b1 = Tensor<S>::randn({feat_dim}, rng, S(0.1));
        e.w2 = Tensor<S>::randn({feat_dim, feat_dim}, rng,
                                static_cast<S>(1.0 / std::sqrt(static_cast<double>(feat_dim))));
        e.b2 = Tensor<S>::randn({feat_dim}, rng, S(0.1));
        return e;
    }

    /// [B, C, H, W] -> [B, (H/p)(W/p), feat_dim], no gradient tracking.
    Tensor<S> features(const Tensor<S>& x0) const {
        autograd::NoGradGuard ng;
        Tensor<S> tok = patchify(x0, patch);
        return linear(gelu(linear(tok, w1, &b1)), w2, &b2);
    }
};

/// Trainable projection from model features to the encoder's feature width.
template <std::floating_point S>
struct ProjectionHead {
    bool two_layer = true;
    Tensor<S> w1, b1;
    Tensor<S> w2, b2;

    static ProjectionHead make(int64_t in, int64_t out, bool two_layer, Rng& rng, S init_std = S(0.05)) {
        ProjectionHead h;
        h.two_layer = two_layer;
        if (two_layer) {
            h.w1 = Tensor<S>::randn({out, in}, rng, init_std, true);
            h.b1 = Tensor<S>::zeros({out}, true);
            h.w2 = Tensor<S>::randn({out, out}, rng, init_std, true);
            h.b2 = Tensor<S>::zeros({out}, true);
        } else {
            h.w1 = Tensor<S>::randn({out, in}, rng, init_std, true);
            h.b1 = Tensor<S>::zeros({out}, true);
        }
        return h;
    }

    Tensor<S> forward(const Tensor<S>& x) const {
        Tensor<S> y = linear(x, w1, &b1);
        if (two_layer) y = linear(gelu(y), w2, &b2);
        return y;
    }

    std::vector<Tensor<S>> parameters() const {
        if (two_layer) return {w1, b1, w2, b2};
        return {w1, b1};
    }
};

/// Negative mean cosine similarity between frozen encoder features of the
/// clean image and projected model features, token by token.
template <std::floating_point S>
Tensor<S> repa_loss(const Tensor<S>& model_features, const Tensor<S>& x0, const ReuseEncoder<S>& enc,
                    const ProjectionHead<S>& head) {
    Tensor<S> g = enc.features(x0);
    Tensor<S> z = head.forward(model_features);
    if (g.shape() != z.shape())
        throw ShapeError("repa_loss: projected features " + shape_str(z.shape()) + " vs encoder " +
                         shape_str(g.shape()));
    Tensor<S> dot = sum_axis(mul(g, z), -1);
    Tensor<S> ng = sqrt_op(sum_axis(mul(g, g), -1));
    Tensor<S> nz = sqrt_op(sum_axis(mul(z, z), -1));
    Tensor<S> cos = div(dot, mul(ng, nz));
    return neg(mean_all(cos));
}

/// L = L_RF + lambda * L_REPA. lambda = 0 disables alignment exactly.
template <std::floating_point S>
Tensor<S> total_loss(const Tensor<S>& rf, const Tensor<S>* repa, S lambda) {
    if (lambda < S(0)) throw ConfigError("total_loss: lambda must be >= 0");
    if (lambda == S(0) || repa == nullptr) return rf;
    return add(rf, scale(*repa, lambda));
}

// ---------------------------------------------------------------------------
// Euler sampler
// ---------------------------------------------------------------------------

struct SamplerConfig {
    int steps = 20;
    double guidance_scale = 1.0;
    uint64_t seed = 0;

    void validate() const {
        if (steps < 1) throw ConfigError("sampler: steps must be >= 1");
        if (guidance_scale < 1.0) throw ConfigError("sampler: guidance scale must be >= 1");
    }
};

/// Euler integration of dx = v dsigma from t=1 (pure noise) down to t=0 on
/// a uniform descending grid. For the straight path the oracle velocity
/// eps - x0 is recovered exactly for any step count.
template <std::floating_point S>
Tensor<S> sample(const VelocityFn<S>& velocity, const Shape& shape, const SamplerConfig& cfg,
                 const FlowSchedule<S>& sched, Rng& rng) {
    cfg.validate();
    sched.validate();
    autograd::NoGradGuard ng;
    Tensor<S> x = Tensor<S>::randn(shape, rng);
    const int64_t B = shape[0];
    for (int i = 0; i < cfg.steps; ++i) {
        const S t_cur = S(1) - static_cast<S>(i) / static_cast<S>(cfg.steps);
        const S t_next = S(1) - static_cast<S>(i + 1) / static_cast<S>(cfg.steps);
        Tensor<S> t_batch = Tensor<S>::full({B}, t_cur);
        try {
            Tensor<S> v = velocity(x, t_batch);
            const S dsigma = sched(t_next) - sched(t_cur);
            x = add(x, scale(v, dsigma));
        } catch (const NumericsError& e) {
            throw TrainError("sample: non-finite state at step " + std::to_string(i) + " (" + e.what() + ")");
        }
    }
    return x;
}

/// Classifier-free-guided velocity: v_u + s (v_c - v_u). At scale 1 the
/// unconditional branch is never evaluated.
template <std::floating_point S>
VelocityFn<S> guided_velocity(const Model<S>& model, const Conditioning<S>& cond, const Conditioning<S>& uncond,
                              double scale_factor) {
    if (scale_factor == 1.0) {
        return [&model, cond](const Tensor<S>& x, const Tensor<S>& t) { return model.forward(x, t, cond); };
    }
    return [&model, cond, uncond, scale_factor](const Tensor<S>& x, const Tensor<S>& t) {
        Tensor<S> vc = model.forward(x, t, cond);
        Tensor<S> vu = model.forward(x, t, uncond);
        return add(vu, scale(sub(vc, vu), static_cast<S>(scale_factor)));
    };
}

}  // namespace emdt
