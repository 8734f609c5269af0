#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "emdt/asa.hpp"
#include "emdt/condmod.hpp"
#include "emdt/config.hpp"
#include "emdt/nn.hpp"
#include "emdt/tokenpath.hpp"

namespace emdt {

/// Space-to-channel patchify: [B, Cin, H, W] -> [B, (H/p)(W/p), Cin*p*p].
/// Lossless; the per-token channel layout is (cin, dy, dx) row-major.
template <std::floating_point S>
Tensor<S> patchify(const Tensor<S>& x, int64_t p) {
    if (x.ndim() != 4) throw ShapeError("patchify: expected [B,C,H,W], got " + shape_str(x.shape()));
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % p != 0 || W % p != 0)
        throw ConfigError("patchify: image " + std::to_string(H) + "x" + std::to_string(W) +
                          " not divisible by patch " + std::to_string(p));
    Tensor<S> t = reshape(x, {B, C, H / p, p, W / p, p});
    t = transpose(t, {0, 2, 4, 1, 3, 5});
    return reshape(t, {B, (H / p) * (W / p), C * p * p});
}

/// Inverse of patchify.
template <std::floating_point S>
Tensor<S> unpatchify(const Tensor<S>& tokens, int64_t p, int64_t channels, int64_t H, int64_t W) {
    const int64_t B = tokens.dim(0);
    Tensor<S> t = reshape(tokens, {B, H / p, W / p, channels, p, p});
    t = transpose(t, {0, 3, 1, 4, 2, 5});
    return reshape(t, {B, channels, H, W});
}

/// Per-stream block modulation parameters; which fields exist depends on
/// the modulation mode.
template <std::floating_point S>
struct BlockMod {
    Tensor<S> w, b;          // adaln: per-block 6C head
    Tensor<S> gamma, beta;   // affine: both; single: beta only
};

template <std::floating_point S>
struct StreamWeights {
    AttentionWeights<S> attn;
    Mlp<S> ffn;
    BlockMod<S> mod;
};

/// Dual-stream blocks hold disjoint image and context weight sets.
template <std::floating_point S>
struct BlockWeights {
    StreamWeights<S> img;
    std::optional<StreamWeights<S>> ctx;
};

template <std::floating_point S>
struct CompressionStack {
    // two-branch
    std::optional<CompressorWeights<S>> comp;
    std::optional<ReconstructorWeights<S>> recon;
    // single-branch (2x-only / 4x-only)
    std::optional<Mlp<S>> comp_single, up_single, fuse_single;
    // stacked 2x: level a at full grid, level b at the quarter grid
    std::optional<Mlp<S>> comp_a, comp_b, up_a, up_b, fuse_a, fuse_b;
};

/// Conditioning input for one forward pass.
template <std::floating_point S>
struct Conditioning {
    std::vector<int64_t> class_ids;        // class-conditional mode
    std::optional<Tensor<S>> context;      // [B, T, C] text tokens (dual stream)
};

/// Per-forward instrumentation.
template <std::floating_point S>
struct ForwardTrace {
    std::vector<int64_t> tokens_per_block;
    Tensor<S> n1_features;  // pre-compression stream (alignment tap)
};

template <std::floating_point S>
class Model {
public:
    ModelConfig cfg;

    Tensor<S> patch_w, patch_b;
    TimestepEmbedder<S> t_embed;
    Tensor<S> label_table;                       // class mode: [classes+1, C]
    Tensor<S> ctx_table, ctx_proj_w, ctx_proj_b, ctx_null;  // text mode
    std::vector<BlockWeights<S>> blocks;
    CompressionStack<S> compression;
    Tensor<S> final_mod_w, final_mod_b;  // adaln
    Tensor<S> final_beta;                // single/affine: [2C]
    Tensor<S> final_w, final_b;

    PositionalTable<S> pe_full, pe_c2, pe_c4;

    /// Named parameters in canonical (checkpoint) order.
    std::vector<std::pair<std::string, Tensor<S>>> params;

    /// zero_init skips random initialization (all parameters zero); used
    /// where only allocated sizes matter, e.g. cost-model cross-checks of
    /// very large configs.
    static Model build(const ModelConfig& config, uint64_t seed, bool zero_init = false);

    /// Enumerates (name, shape) of every parameter the builder allocates.
    static std::vector<std::pair<std::string, Shape>> param_spec(const ModelConfig& config);

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : params) n += t.numel();
        return n;
    }

    const Tensor<S>& param(const std::string& name) const {
        for (const auto& [n, t] : params)
            if (n == name) return t;
        throw ConfigError("model: no parameter named '" + name + "'");
    }

    /// Class/caption conditioning embedding added into the timestep path.
    Tensor<S> class_embedding(const std::vector<int64_t>& ids, int64_t batch) const;

    /// Velocity prediction. x is the noised input [B, Cin, H, W], t in [0,1].
    Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& t, const Conditioning<S>& cond,
                      ForwardTrace<S>* trace = nullptr) const;

private:
    struct ModContext {
        Tensor<S> silu_c;                   // adaln: [B, C]
        std::optional<GlobalModulation<S>> global;  // single/affine
    };

    ModContext condition(const Tensor<S>& t, const Conditioning<S>& cond) const;
    Tensor<S> stream_modulation(const ModContext& mc, const BlockMod<S>& mod) const;
    Tensor<S> single_block(const StreamWeights<S>& w, Tensor<S> x, const AsaPattern& pattern,
                           const Tensor<S>& s_block) const;
    std::pair<Tensor<S>, Tensor<S>> dual_block(const BlockWeights<S>& w, Tensor<S> x, Tensor<S> ctx,
                                               const AsaPattern& pattern, const ModContext& mc) const;
    Tensor<S> run_block(int index, Tensor<S>& ctx_stream, Tensor<S> x, const AsaPattern& pattern,
                        const ModContext& mc) const;
};

namespace detail {

/// Splits a [B, 6C] modulation row into six [B, 1, C] chunks.
template <std::floating_point S>
std::vector<Tensor<S>> mod_chunks(const Tensor<S>& s, int64_t count) {
    const int64_t B = s.dim(0);
    const int64_t C = s.dim(1) / count;
    std::vector<Tensor<S>> out;
    auto parts = split(s, std::vector<int64_t>(static_cast<size_t>(count), C), 1);
    out.reserve(parts.size());
    for (auto& p : parts) out.push_back(reshape(p, {B, 1, C}));
    return out;
}

template <std::floating_point S>
Tensor<S> modulate(const Tensor<S>& x, const Tensor<S>& shift, const Tensor<S>& scale_t) {
    return add(mul(x, add_scalar(scale_t, S(1))), shift);
}

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace detail

/// Hashing text embedder: whitespace tokens hashed into the embedding
/// table, then projected. Deterministic for a fixed seed and caption.
/// Empty captions map to the learned null token.
template <std::floating_point S>
Tensor<S> context_embed(const std::string& caption, const Model<S>& model) {
    const ModelConfig& cfg = model.cfg;
    if (cfg.num_classes > 0) throw ConfigError("context_embed: model is class-conditional");
    std::vector<int64_t> ids;
    std::string word;
    std::istringstream is(caption);
    while (is >> word) ids.push_back(static_cast<int64_t>(detail::fnv1a64(word) % static_cast<uint64_t>(cfg.vocab_hash_size)));
    if (ids.empty()) {
        Tensor<S> null_tok = reshape(model.ctx_null, {1, model.cfg.width});
        return linear(null_tok, model.ctx_proj_w, &model.ctx_proj_b);
    }
    Tensor<S> rows = embedding(model.ctx_table, ids);
    return linear(rows, model.ctx_proj_w, &model.ctx_proj_b);
}

// ---------------------------------------------------------------------------
// builder
// ---------------------------------------------------------------------------

namespace detail {

enum class Init { kNormal, kZero };

template <std::floating_point S, typename Yield>
void enumerate_model_params(const ModelConfig& cfg, Yield&& yield) {
    const int64_t C = cfg.width;
    const int64_t h = cfg.comp_hidden();
    const int64_t fh = cfg.fuse_hidden_width();
    const bool shared_mod = cfg.modulation != Modulation::kAdaLN;

    yield("patch.w", Shape{C, cfg.patch_in_width()}, Init::kNormal);
    yield("patch.b", Shape{C}, Init::kZero);

    yield("tembed.w1", Shape{C, cfg.freq_dim}, Init::kNormal);
    yield("tembed.b1", Shape{C}, Init::kZero);
    yield("tembed.w2", Shape{shared_mod ? 6 * C : C, C}, Init::kZero);
    yield("tembed.b2", Shape{shared_mod ? 6 * C : C}, Init::kZero);

    if (cfg.class_conditional()) {
        yield("label.table", Shape{cfg.num_classes + 1, C}, Init::kNormal);
    } else {
        yield("ctx.table", Shape{cfg.vocab_hash_size, C}, Init::kNormal);
        yield("ctx.proj.w", Shape{C, C}, Init::kNormal);
        yield("ctx.proj.b", Shape{C}, Init::kZero);
        yield("ctx.null", Shape{C}, Init::kNormal);
    }

    auto stream = [&](const std::string& prefix) {
        yield(prefix + ".attn.wq", Shape{C, C}, Init::kNormal);
        yield(prefix + ".attn.bq", Shape{C}, Init::kZero);
        yield(prefix + ".attn.wk", Shape{C, C}, Init::kNormal);
        yield(prefix + ".attn.bk", Shape{C}, Init::kZero);
        yield(prefix + ".attn.wv", Shape{C, C}, Init::kNormal);
        yield(prefix + ".attn.bv", Shape{C}, Init::kZero);
        yield(prefix + ".attn.wo", Shape{C, C}, Init::kNormal);
        yield(prefix + ".attn.bo", Shape{C}, Init::kZero);
        yield(prefix + ".ffn.w1", Shape{cfg.ffn_multiplier * C, C}, Init::kNormal);
        yield(prefix + ".ffn.b1", Shape{cfg.ffn_multiplier * C}, Init::kZero);
        yield(prefix + ".ffn.w2", Shape{C, cfg.ffn_multiplier * C}, Init::kNormal);
        yield(prefix + ".ffn.b2", Shape{C}, Init::kZero);
        switch (cfg.modulation) {
            case Modulation::kAdaLN:
                yield(prefix + ".mod.w", Shape{6 * C, C}, Init::kZero);
                yield(prefix + ".mod.b", Shape{6 * C}, Init::kZero);
                break;
            case Modulation::kAdaLNSingle:
                yield(prefix + ".mod.beta", Shape{6 * C}, Init::kZero);
                break;
            case Modulation::kAdaLNAffine:
                yield(prefix + ".mod.gamma", Shape{6 * C}, Init::kZero);
                yield(prefix + ".mod.beta", Shape{6 * C}, Init::kZero);
                break;
        }
    };
    for (int i = 0; i < cfg.num_blocks(); ++i) {
        stream("blocks." + std::to_string(i) + ".img");
        if (cfg.variant == Variant::kDualStream) stream("blocks." + std::to_string(i) + ".ctx");
    }

    auto mlp = [&](const std::string& prefix, int64_t in, int64_t hidden, int64_t out, bool zero_final) {
        yield(prefix + ".w1", Shape{hidden, in}, Init::kNormal);
        yield(prefix + ".b1", Shape{hidden}, Init::kZero);
        yield(prefix + ".w2", Shape{out, hidden}, zero_final ? Init::kZero : Init::kNormal);
        yield(prefix + ".b2", Shape{out}, Init::kZero);
    };
    switch (cfg.compression) {
        case Compression::kNone:
            break;
        case Compression::kTwoBranch:
            mlp("compress2", 4 * C, h, C, false);
            mlp("compress4", 16 * C, h, C, false);
            mlp("recon.up2", C, h, 4 * C, false);
            mlp("recon.up4", C, h, 16 * C, false);
            mlp("recon.fuse", (cfg.skip_connection ? 3 : 2) * C, fh, C, true);
            break;
        case Compression::kTwoOnly:
            mlp("compress2", 4 * C, h, C, false);
            mlp("recon.up2", C, h, 4 * C, false);
            mlp("recon.fuse", 2 * C, fh, C, true);
            break;
        case Compression::kFourOnly:
            mlp("compress4", 16 * C, h, C, false);
            mlp("recon.up4", C, h, 16 * C, false);
            mlp("recon.fuse", 2 * C, fh, C, true);
            break;
        case Compression::kStackedTwo:
            mlp("compress2a", 4 * C, h, C, false);
            mlp("compress2b", 4 * C, h, C, false);
            mlp("recon.up2b", C, h, 4 * C, false);
            mlp("recon.fuse_b", 2 * C, fh, C, true);
            mlp("recon.up2a", C, h, 4 * C, false);
            mlp("recon.fuse_a", 2 * C, fh, C, true);
            break;
    }

    if (shared_mod) {
        yield("final.mod.beta", Shape{2 * C}, Init::kZero);
    } else {
        yield("final.mod.w", Shape{2 * C, C}, Init::kZero);
        yield("final.mod.b", Shape{2 * C}, Init::kZero);
    }
    yield("final.w", Shape{cfg.patch_size * cfg.patch_size * cfg.in_channels, C}, Init::kZero);
    yield("final.b", Shape{cfg.patch_size * cfg.patch_size * cfg.in_channels}, Init::kZero);
}

}  // namespace detail

template <std::floating_point S>
std::vector<std::pair<std::string, Shape>> Model<S>::param_spec(const ModelConfig& config) {
    config.validate();
    std::vector<std::pair<std::string, Shape>> out;
    detail::enumerate_model_params<S>(config, [&](const std::string& name, Shape shape, detail::Init) {
        out.emplace_back(name, std::move(shape));
    });
    return out;
}

template <std::floating_point S>
Model<S> Model<S>::build(const ModelConfig& config, uint64_t seed, bool zero_init) {
    config.validate();
    Model<S> m;
    m.cfg = config;
    Rng rng(seed);
    const S init_std = S(0.02);

    detail::enumerate_model_params<S>(config, [&](const std::string& name, Shape shape, detail::Init init) {
        Tensor<S> t = (zero_init || init == detail::Init::kZero) ? Tensor<S>::zeros(shape, true)
                                                                 : Tensor<S>::randn(shape, rng, init_std, true);
        m.params.emplace_back(name, t);
    });
    size_t cursor = 0;
    auto take = [&](const std::string& name) {
        if (cursor >= m.params.size() || m.params[cursor].first != name)
            throw ConfigError("model build: parameter order mismatch at '" + name + "'");
        return m.params[cursor++].second;
    };

    const int64_t C = config.width;
    m.patch_w = take("patch.w");
    m.patch_b = take("patch.b");
    m.t_embed.freq_dim = config.freq_dim;
    m.t_embed.w1 = take("tembed.w1");
    m.t_embed.b1 = take("tembed.b1");
    m.t_embed.w2 = take("tembed.w2");
    m.t_embed.b2 = take("tembed.b2");
    if (config.class_conditional()) {
        m.label_table = take("label.table");
    } else {
        m.ctx_table = take("ctx.table");
        m.ctx_proj_w = take("ctx.proj.w");
        m.ctx_proj_b = take("ctx.proj.b");
        m.ctx_null = take("ctx.null");
    }
    auto take_stream = [&](const std::string& prefix) {
        StreamWeights<S> sw;
        sw.attn.heads = config.heads;
        sw.attn.wq = take(prefix + ".attn.wq");
        sw.attn.bq = take(prefix + ".attn.bq");
        sw.attn.wk = take(prefix + ".attn.wk");
        sw.attn.bk = take(prefix + ".attn.bk");
        sw.attn.wv = take(prefix + ".attn.wv");
        sw.attn.bv = take(prefix + ".attn.bv");
        sw.attn.wo = take(prefix + ".attn.wo");
        sw.attn.bo = take(prefix + ".attn.bo");
        sw.ffn.w1 = take(prefix + ".ffn.w1");
        sw.ffn.b1 = take(prefix + ".ffn.b1");
        sw.ffn.w2 = take(prefix + ".ffn.w2");
        sw.ffn.b2 = take(prefix + ".ffn.b2");
        switch (config.modulation) {
            case Modulation::kAdaLN:
                sw.mod.w = take(prefix + ".mod.w");
                sw.mod.b = take(prefix + ".mod.b");
                break;
            case Modulation::kAdaLNSingle:
                sw.mod.beta = take(prefix + ".mod.beta");
                break;
            case Modulation::kAdaLNAffine:
                sw.mod.gamma = take(prefix + ".mod.gamma");
                sw.mod.beta = take(prefix + ".mod.beta");
                break;
        }
        return sw;
    };
    for (int i = 0; i < config.num_blocks(); ++i) {
        BlockWeights<S> bw;
        bw.img = take_stream("blocks." + std::to_string(i) + ".img");
        if (config.variant == Variant::kDualStream) bw.ctx = take_stream("blocks." + std::to_string(i) + ".ctx");
        m.blocks.push_back(std::move(bw));
    }
    auto take_mlp = [&](const std::string& prefix) {
        Mlp<S> mm;
        mm.w1 = take(prefix + ".w1");
        mm.b1 = take(prefix + ".b1");
        mm.w2 = take(prefix + ".w2");
        mm.b2 = take(prefix + ".b2");
        return mm;
    };
    switch (config.compression) {
        case Compression::kNone:
            break;
        case Compression::kTwoBranch: {
            CompressorWeights<S> cw;
            cw.mlp2 = take_mlp("compress2");
            cw.mlp4 = take_mlp("compress4");
            m.compression.comp = cw;
            ReconstructorWeights<S> rw;
            rw.up2 = take_mlp("recon.up2");
            rw.up4 = take_mlp("recon.up4");
            rw.fuse = take_mlp("recon.fuse");
            m.compression.recon = rw;
            break;
        }
        case Compression::kTwoOnly:
            m.compression.comp_single = take_mlp("compress2");
            m.compression.up_single = take_mlp("recon.up2");
            m.compression.fuse_single = take_mlp("recon.fuse");
            break;
        case Compression::kFourOnly:
            m.compression.comp_single = take_mlp("compress4");
            m.compression.up_single = take_mlp("recon.up4");
            m.compression.fuse_single = take_mlp("recon.fuse");
            break;
        case Compression::kStackedTwo:
            m.compression.comp_a = take_mlp("compress2a");
            m.compression.comp_b = take_mlp("compress2b");
            m.compression.up_b = take_mlp("recon.up2b");
            m.compression.fuse_b = take_mlp("recon.fuse_b");
            m.compression.up_a = take_mlp("recon.up2a");
            m.compression.fuse_a = take_mlp("recon.fuse_a");
            break;
    }
    if (config.modulation != Modulation::kAdaLN) {
        m.final_beta = take("final.mod.beta");
    } else {
        m.final_mod_w = take("final.mod.w");
        m.final_mod_b = take("final.mod.b");
    }
    m.final_w = take("final.w");
    m.final_b = take("final.b");
    if (cursor != m.params.size()) throw ConfigError("model build: trailing unbound parameters");

    m.pe_full = PositionalTable<S>::make(config.grid_h(), config.grid_w(), C);
    if (config.position_reinforcement == PosReinforce::kCompressedOnly ||
        config.position_reinforcement == PosReinforce::kBoth) {
        m.pe_c2 = PositionalTable<S>::make(config.grid_h() / 2, config.grid_w() / 2, C);
        m.pe_c4 = PositionalTable<S>::make(config.grid_h() / 4, config.grid_w() / 4, C);
    }
    return m;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

template <std::floating_point S>
Tensor<S> Model<S>::class_embedding(const std::vector<int64_t>& ids, int64_t batch) const {
    std::vector<int64_t> resolved = ids;
    if (resolved.empty()) resolved.assign(static_cast<size_t>(batch), cfg.num_classes);  // null class
    if (static_cast<int64_t>(resolved.size()) != batch)
        throw ShapeError("class_embedding: got " + std::to_string(resolved.size()) + " ids for batch " +
                         std::to_string(batch));
    for (int64_t id : resolved)
        if (id < 0 || id > cfg.num_classes)
            throw ConfigError("class_embedding: class id " + std::to_string(id) + " out of range");
    return embedding(label_table, resolved);
}

template <std::floating_point S>
typename Model<S>::ModContext Model<S>::condition(const Tensor<S>& t, const Conditioning<S>& cond) const {
    const int64_t B = t.dim(0);
    Tensor<S> h = linear(timestep_features(t, cfg.freq_dim), t_embed.w1, &t_embed.b1);
    if (cfg.class_conditional()) h = add(h, class_embedding(cond.class_ids, B));
    ModContext mc;
    if (cfg.modulation == Modulation::kAdaLN) {
        Tensor<S> core = linear(silu(h), t_embed.w2, &t_embed.b2);
        mc.silu_c = silu(core);
    } else {
        mc.global = GlobalModulation<S>{linear(silu(h), t_embed.w2, &t_embed.b2)};
    }
    return mc;
}

template <std::floating_point S>
Tensor<S> Model<S>::stream_modulation(const ModContext& mc, const BlockMod<S>& mod) const {
    switch (cfg.modulation) {
        case Modulation::kAdaLN:
            return linear(mc.silu_c, mod.w, &mod.b);
        case Modulation::kAdaLNSingle:
            return add(mc.global->s_hat, mod.beta);
        case Modulation::kAdaLNAffine:
            return block_modulation(*mc.global, BlockAffine<S>{mod.gamma, mod.beta});
    }
    throw ConfigError("unreachable modulation mode");
}

template <std::floating_point S>
Tensor<S> Model<S>::single_block(const StreamWeights<S>& w, Tensor<S> x, const AsaPattern& pattern,
                                 const Tensor<S>& s_block) const {
    auto ch = detail::mod_chunks(s_block, 6);
    Tensor<S> h = detail::modulate(layer_norm(x), ch[0], ch[1]);
    x = add(x, mul(ch[2], attend(h, w.attn, pattern)));
    Tensor<S> f = detail::modulate(layer_norm(x), ch[3], ch[4]);
    x = add(x, mul(ch[5], mlp_forward(f, w.ffn)));
    return x;
}

template <std::floating_point S>
std::pair<Tensor<S>, Tensor<S>> Model<S>::dual_block(const BlockWeights<S>& w, Tensor<S> x, Tensor<S> ctx,
                                                     const AsaPattern& pattern, const ModContext& mc) const {
    auto ci = detail::mod_chunks(stream_modulation(mc, w.img.mod), 6);
    auto cc = detail::mod_chunks(stream_modulation(mc, w.ctx->mod), 6);
    Tensor<S> hi = detail::modulate(layer_norm(x), ci[0], ci[1]);
    Tensor<S> hc = detail::modulate(layer_norm(ctx), cc[0], cc[1]);
    auto joint = attend_joint(hi, w.img.attn, pattern, hc, w.ctx->attn);
    x = add(x, mul(ci[2], joint.image));
    ctx = add(ctx, mul(cc[2], joint.context));
    Tensor<S> fi = detail::modulate(layer_norm(x), ci[3], ci[4]);
    x = add(x, mul(ci[5], mlp_forward(fi, w.img.ffn)));
    Tensor<S> fc = detail::modulate(layer_norm(ctx), cc[3], cc[4]);
    ctx = add(ctx, mul(cc[5], mlp_forward(fc, w.ctx->ffn)));
    return {x, ctx};
}

template <std::floating_point S>
Tensor<S> Model<S>::run_block(int index, Tensor<S>& ctx_stream, Tensor<S> x, const AsaPattern& pattern,
                              const ModContext& mc) const {
    const BlockWeights<S>& w = blocks[static_cast<size_t>(index)];
    if (cfg.variant == Variant::kDualStream) {
        auto [xi, xc] = dual_block(w, std::move(x), ctx_stream, pattern, mc);
        ctx_stream = xc;
        return xi;
    }
    return single_block(w.img, std::move(x), pattern, stream_modulation(mc, w.img.mod));
}

template <std::floating_point S>
Tensor<S> Model<S>::forward(const Tensor<S>& x, const Tensor<S>& t, const Conditioning<S>& cond,
                            ForwardTrace<S>* trace) const {
    if (x.ndim() != 4 || x.dim(1) != cfg.in_channels || x.dim(2) != cfg.image_h || x.dim(3) != cfg.image_w)
        throw ShapeError("forward: input " + shape_str(x.shape()) + " does not match config geometry");
    if (t.dim(0) != x.dim(0)) throw ShapeError("forward: timestep batch mismatch");
    const int64_t B = x.dim(0);
    const auto resolved = cfg.schedule().resolve(cfg.num_blocks());

    Tensor<S> ctx_stream;
    if (cfg.variant == Variant::kDualStream) {
        if (cond.context) {
            ctx_stream = *cond.context;
            if (ctx_stream.dim(0) != B || ctx_stream.dim(2) != cfg.width)
                throw ShapeError("forward: context " + shape_str(ctx_stream.shape()) + " incompatible");
        } else {
            // learned null token replicated per batch element
            std::vector<int64_t> zeros_idx(static_cast<size_t>(B), 0);
            ctx_stream = reshape(gather_rows(reshape(ctx_null, {1, cfg.width}), zeros_idx), {B, 1, cfg.width});
        }
    }

    ModContext mc = condition(t, cond);

    TokenGrid<S> grid{linear(patchify(x, cfg.patch_size), patch_w, &patch_b), cfg.grid_h(), cfg.grid_w()};
    grid = apply_pe(grid, pe_full);

    int block = 0;
    auto run_group = [&](Tensor<S> tokens, int count) {
        for (int i = 0; i < count; ++i, ++block) {
            if (trace) trace->tokens_per_block.push_back(tokens.dim(1));
            try {
                tokens = run_block(block, ctx_stream, std::move(tokens), resolved[static_cast<size_t>(block)], mc);
            } catch (const ConfigError& e) {
                throw ConfigError("block " + std::to_string(block) + ": " + e.what());
            }
        }
        return tokens;
    };

    grid.tokens = run_group(grid.tokens, cfg.n1);
    if (trace) trace->n1_features = grid.tokens;

    const bool pr_compressed = cfg.position_reinforcement == PosReinforce::kCompressedOnly ||
                               cfg.position_reinforcement == PosReinforce::kBoth;
    const bool pr_recon = cfg.position_reinforcement == PosReinforce::kReconOnly ||
                          cfg.position_reinforcement == PosReinforce::kBoth;

    Tensor<S> out_tokens;
    switch (cfg.compression) {
        case Compression::kNone: {
            out_tokens = run_group(run_group(grid.tokens, cfg.n2), cfg.n3);
            break;
        }
        case Compression::kTwoBranch: {
            TokenGrid<S> skip = grid;
            auto [c2, c4] = compress(grid, *compression.comp);
            if (pr_compressed) {
                c2 = apply_pe(c2, pe_c2);
                c4 = apply_pe(c4, pe_c4);
            }
            Tensor<S> mid = run_group(joint_tokens(c2, c4), cfg.n2);
            TokenGrid<S> rec = cfg.skip_connection
                                   ? reconstruct(mid, skip, *compression.recon)
                                   : reconstruct_no_skip(mid, skip.height, skip.width, *compression.recon);
            if (pr_recon) rec = apply_pe(rec, pe_full);
            out_tokens = run_group(rec.tokens, cfg.n3);
            break;
        }
        case Compression::kTwoOnly:
        case Compression::kFourOnly: {
            const int64_t r = cfg.compression == Compression::kTwoOnly ? 2 : 4;
            TokenGrid<S> skip = grid;
            TokenGrid<S> c = compress_single(grid, *compression.comp_single, r);
            if (pr_compressed && r == 2) c = apply_pe(c, pe_c2);
            if (pr_compressed && r == 4) c = apply_pe(c, pe_c4);
            Tensor<S> mid = run_group(c.tokens, cfg.n2);
            TokenGrid<S> rec = reconstruct_single(mid, skip, *compression.up_single, *compression.fuse_single, r);
            if (pr_recon) rec = apply_pe(rec, pe_full);
            out_tokens = run_group(rec.tokens, cfg.n3);
            break;
        }
        case Compression::kStackedTwo: {
            TokenGrid<S> skip_a = grid;
            TokenGrid<S> level_a = compress_single(grid, *compression.comp_a, 2);
            level_a.tokens = run_group(level_a.tokens, cfg.stacked_n2a());
            TokenGrid<S> skip_b = level_a;
            TokenGrid<S> level_b = compress_single(level_a, *compression.comp_b, 2);
            level_b.tokens = run_group(level_b.tokens, cfg.stacked_n2b());
            TokenGrid<S> rec_b = reconstruct_single(level_b.tokens, skip_b, *compression.up_b, *compression.fuse_b, 2);
            TokenGrid<S> rec_a = reconstruct_single(rec_b.tokens, skip_a, *compression.up_a, *compression.fuse_a, 2);
            if (pr_recon) rec_a = apply_pe(rec_a, pe_full);
            out_tokens = run_group(rec_a.tokens, cfg.n3);
            break;
        }
    }

    // final head: norm -> shift/scale -> zero-initialized linear
    Tensor<S> fs;
    if (cfg.modulation == Modulation::kAdaLN) {
        fs = linear(mc.silu_c, final_mod_w, &final_mod_b);
    } else {
        fs = add(slice(mc.global->s_hat, 1, 0, 2 * cfg.width), final_beta);
    }
    auto fch = detail::mod_chunks(fs, 2);
    Tensor<S> head = detail::modulate(layer_norm(out_tokens), fch[0], fch[1]);
    Tensor<S> patches = linear(head, final_w, &final_b);
    return unpatchify(patches, cfg.patch_size, cfg.in_channels, cfg.image_h, cfg.image_w);
}

}  // namespace emdt
