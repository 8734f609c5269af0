#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "emdt/checkpoint.hpp"
#include "emdt/dataset.hpp"
#include "emdt/diffusion.hpp"
#include "emdt/model.hpp"
#include "emdt/png.hpp"

namespace emdt {

struct OptimConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.01;
    double eps = 1e-8;
    enum class Schedule { kConstant, kCosine } schedule = Schedule::kConstant;
};

/// Experiment description: model + data + optimization + sampling.
struct TrainConfig {
    ModelConfig model;
    uint64_t seed = 0;
    int64_t steps = 500;
    int64_t batch = 32;
    OptimConfig optim;
    bool ema = false;
    double ema_decay = 0.999;
    double lambda_repa = 0.0;
    int64_t repa_feat_dim = 64;
    double cfg_drop_prob = 0.1;
    TimestepSampler t_sampler = TimestepSampler::kUniform;
    std::string dtype = "f32";  // "f32" (standard) or "f64" (wide)
    std::string out_dir;
    int64_t log_every = 10;
    int64_t ckpt_every = 0;    // 0: only at the end
    int64_t sample_every = 0;  // 0: never
    SamplerConfig sampler;
};

/// Decoupled-weight-decay Adam over an ordered parameter list.
template <std::floating_point S>
class AdamW {
public:
    explicit AdamW(const OptimConfig& cfg) : cfg_(cfg) {}

    void attach(const std::vector<std::pair<std::string, Tensor<S>>>& params) {
        names_.clear();
        m_.clear();
        v_.clear();
        for (const auto& [name, t] : params) {
            names_.push_back(name);
            m_.emplace_back(t.data().size(), S(0));
            v_.emplace_back(t.data().size(), S(0));
        }
    }

    int64_t step_count() const { return step_count_; }

    void step(std::vector<std::pair<std::string, Tensor<S>>>& params, double lr) {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
        for (size_t p = 0; p < params.size(); ++p) {
            Tensor<S>& t = params[p].second;
            if (!t.has_grad()) continue;
            auto& data = t.data();
            const auto& g = t.grad();
            auto& m = m_[p];
            auto& v = v_[p];
            for (size_t i = 0; i < data.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                m[i] = static_cast<S>(cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * gi);
                v[i] = static_cast<S>(cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * gi * gi);
                const double mhat = static_cast<double>(m[i]) / bc1;
                const double vhat = static_cast<double>(v[i]) / bc2;
                double x = static_cast<double>(data[i]);
                x -= lr * cfg_.weight_decay * x;
                x -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                data[i] = static_cast<S>(x);
            }
        }
    }

    std::vector<std::vector<S>>& moments_m() { return m_; }
    std::vector<std::vector<S>>& moments_v() { return v_; }
    const std::vector<std::string>& names() const { return names_; }
    void set_step_count(int64_t n) { step_count_ = n; }

private:
    OptimConfig cfg_;
    int64_t step_count_ = 0;
    std::vector<std::string> names_;
    std::vector<std::vector<S>> m_, v_;
};

template <std::floating_point S>
struct TrainState {
    TrainConfig cfg;
    Model<S> model;
    AdamW<S> opt{OptimConfig{}};
    std::vector<std::vector<S>> ema;  // parallel to model.params when enabled
    ReuseEncoder<S> encoder;          // frozen alignment target
    ProjectionHead<S> head;           // trainable projection (lambda > 0)
    Rng rng;
    int64_t step = 0;
};

struct StepLog {
    int64_t step = 0;
    double rf_loss = 0;
    double repa_loss = 0;
    double lr = 0;
    double wall_time_s = 0;
};

struct TrainResult {
    std::vector<StepLog> logs;  // one entry per step
    double step0_loss = 0;
    double final_loss = 0;
    std::string checkpoint_path;
};

namespace detail {

inline double lr_at(const OptimConfig& oc, int64_t step, int64_t total) {
    if (oc.schedule == OptimConfig::Schedule::kCosine && total > 0) {
        const double p = static_cast<double>(step) / static_cast<double>(total);
        return oc.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * p));
    }
    return oc.lr;
}

inline std::string jsonl_line(const StepLog& l) {
    std::ostringstream os;
    os << "{\"step\":" << l.step << ",\"rf_loss\":" << std::setprecision(17) << l.rf_loss
       << ",\"repa_loss\":" << l.repa_loss << ",\"lr\":" << l.lr << ",\"wall_time_s\":" << std::setprecision(6)
       << l.wall_time_s << "}";
    return os.str();
}

}  // namespace detail

template <std::floating_point S>
TrainState<S> init_train_state(const TrainConfig& cfg) {
    cfg.model.validate();
    if (cfg.batch < 1 || cfg.steps < 0) throw ConfigError("train: bad steps/batch");
    TrainState<S> st;
    st.cfg = cfg;
    st.model = Model<S>::build(cfg.model, cfg.seed);
    st.opt = AdamW<S>(cfg.optim);
    st.rng = Rng(hash_mix(cfg.seed, 0x747261696e));
    st.encoder = ReuseEncoder<S>::make(cfg.model.in_channels, cfg.model.patch_size, cfg.repa_feat_dim,
                                       hash_mix(cfg.seed, 0x656e63));
    Rng head_rng(hash_mix(cfg.seed, 0x68656164));
    st.head = ProjectionHead<S>::make(cfg.model.width, cfg.repa_feat_dim, true, head_rng);
    return st;
}

template <std::floating_point S>
std::vector<std::pair<std::string, Tensor<S>>> trainable_params(TrainState<S>& st) {
    std::vector<std::pair<std::string, Tensor<S>>> params = st.model.params;
    if (st.cfg.lambda_repa > 0) {
        params.emplace_back("repa.head.w1", st.head.w1);
        params.emplace_back("repa.head.b1", st.head.b1);
        if (st.head.two_layer) {
            params.emplace_back("repa.head.w2", st.head.w2);
            params.emplace_back("repa.head.b2", st.head.b2);
        }
    }
    return params;
}

template <std::floating_point S>
Checkpoint make_checkpoint(TrainState<S>& st) {
    Checkpoint ck;
    auto params = trainable_params(st);
    auto push_tensor = [&](const std::string& name, const Shape& shape, const std::vector<S>& vals) {
        if constexpr (std::is_same_v<S, float>) {
            ck.entries.push_back(CheckpointEntry::from_f32(name, shape, vals));
        } else {
            ck.entries.push_back(CheckpointEntry::from_f64(name, shape, vals));
        }
    };
    for (auto& [name, t] : params) push_tensor("model." + name, t.shape(), t.data());
    auto& m = st.opt.moments_m();
    auto& v = st.opt.moments_v();
    for (size_t i = 0; i < params.size() && i < m.size(); ++i) {
        push_tensor("adam.m." + params[i].first, params[i].second.shape(), m[i]);
        push_tensor("adam.v." + params[i].first, params[i].second.shape(), v[i]);
    }
    if (st.cfg.ema) {
        for (size_t i = 0; i < st.model.params.size(); ++i)
            push_tensor("ema." + st.model.params[i].first, st.model.params[i].second.shape(), st.ema[i]);
    }
    const auto rs = st.rng.state();
    ck.entries.push_back(CheckpointEntry::from_u64("trainer.rng", {4}, {rs[0], rs[1], rs[2], rs[3]}));
    ck.entries.push_back(CheckpointEntry::from_u64(
        "trainer.step", {2}, {static_cast<uint64_t>(st.step), static_cast<uint64_t>(st.opt.step_count())}));
    return ck;
}

template <std::floating_point S>
void restore_train_state(TrainState<S>& st, const Checkpoint& ck) {
    auto params = trainable_params(st);
    st.opt.attach(params);
    auto load_vec = [&](const std::string& name, std::vector<S>& dst, int64_t expect) {
        const auto& e = ck.at(name);
        if (e.numel() != expect) throw IoError("checkpoint: entry '" + name + "' has wrong element count");
        if constexpr (std::is_same_v<S, float>) {
            auto v = e.as_f32();
            dst.assign(v.begin(), v.end());
        } else {
            auto v = e.as_f64();
            dst.assign(v.begin(), v.end());
        }
    };
    for (size_t i = 0; i < params.size(); ++i) {
        load_vec("model." + params[i].first, params[i].second.data(), params[i].second.numel());
        load_vec("adam.m." + params[i].first, st.opt.moments_m()[i], params[i].second.numel());
        load_vec("adam.v." + params[i].first, st.opt.moments_v()[i], params[i].second.numel());
    }
    if (st.cfg.ema) {
        st.ema.resize(st.model.params.size());
        for (size_t i = 0; i < st.model.params.size(); ++i)
            load_vec("ema." + st.model.params[i].first, st.ema[i], st.model.params[i].second.numel());
    }
    const auto rs = ck.at("trainer.rng").as_u64();
    st.rng.set_state({rs[0], rs[1], rs[2], rs[3]});
    const auto sc = ck.at("trainer.step").as_u64();
    st.step = static_cast<int64_t>(sc[0]);
    st.opt.set_step_count(static_cast<int64_t>(sc[1]));
}

/// Writes a grid of samples from the current model as a PNG.
template <std::floating_point S>
void emit_sample_grid(const TrainState<S>& st, const std::string& path, int grid_n, uint64_t seed) {
    const ModelConfig& mc = st.cfg.model;
    SamplerConfig sc = st.cfg.sampler;
    Rng rng(seed);
    const int64_t n = grid_n * grid_n;
    std::vector<uint8_t> canvas(static_cast<size_t>(3 * grid_n * mc.image_h * grid_n * mc.image_w), 0);
    for (int64_t i = 0; i < n; ++i) {
        Conditioning<S> cond;
        Conditioning<S> uncond;
        if (mc.class_conditional()) {
            cond.class_ids = {static_cast<int64_t>(i % mc.num_classes)};
            uncond.class_ids = {mc.num_classes};
        }
        Tensor<S> img =
            sample<S>(guided_velocity(st.model, cond, uncond, sc.guidance_scale), {1, mc.in_channels, mc.image_h, mc.image_w},
                      sc, FlowSchedule<S>::linear(), rng);
        const int64_t gy = i / grid_n, gx = i % grid_n;
        const int64_t W = grid_n * mc.image_w;
        for (int64_t c = 0; c < std::min<int64_t>(3, mc.in_channels); ++c)
            for (int64_t y = 0; y < mc.image_h; ++y)
                for (int64_t x = 0; x < mc.image_w; ++x) {
                    S val = img.data()[static_cast<size_t>((c * mc.image_h + y) * mc.image_w + x)];
                    val = std::clamp((val + S(1)) / S(2), S(0), S(1));
                    const auto pix = static_cast<uint8_t>(std::lround(static_cast<double>(val) * 255.0));
                    const int64_t yy = gy * mc.image_h + y, xx = gx * mc.image_w + x;
                    // interleaved rgb for the png writer
                    canvas[static_cast<size_t>((yy * W + xx) * 3 + c)] = pix;
                }
    }
    write_png_rgb8(path, grid_n * mc.image_w, grid_n * mc.image_h, canvas);
}

/// Runs the training loop. Resumes from `resume_from` when non-empty.
template <std::floating_point S>
TrainResult train(const TrainConfig& cfg, const std::string& resume_from = "") {
    TrainState<S> st = init_train_state<S>(cfg);
    auto params = trainable_params(st);
    st.opt.attach(params);
    if (cfg.ema) {
        st.ema.clear();
        for (auto& [name, t] : st.model.params) st.ema.push_back(t.data());
    }
    if (!resume_from.empty()) restore_train_state(st, Checkpoint::load(resume_from));

    ShapesDataset data(cfg.seed, cfg.model.image_h);
    const auto sched = FlowSchedule<S>::linear();

    std::ofstream log_os;
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        log_os.open(cfg.out_dir + "/train_log.jsonl", resume_from.empty() ? std::ios::trunc : std::ios::app);
    }

    TrainResult result;
    const auto t_start = std::chrono::steady_clock::now();
    int consecutive_bad = 0;

    while (st.step < cfg.steps) {
        std::vector<int64_t> classes;
        Tensor<S> x0 = data.batch<S>(st.step, cfg.batch, &classes);

        Conditioning<S> cond;
        if (cfg.model.class_conditional()) {
            for (auto& c : classes)
                if (st.rng.uniform() < cfg.cfg_drop_prob) c = cfg.model.num_classes;  // null class
            cond.class_ids = classes;
        } else if (cfg.model.variant == Variant::kDualStream) {
            // class-name captions drive the context stream; dropped samples
            // get the null token replicated to the caption length
            std::vector<Tensor<S>> rows;
            int64_t caption_len = 0;
            for (int64_t i = 0; i < cfg.batch; ++i) {
                const bool drop = st.rng.uniform() < cfg.cfg_drop_prob;
                Tensor<S> ctx = context_embed(drop ? "" : ShapesDataset::caption_for(classes[static_cast<size_t>(i)]),
                                              st.model);
                if (caption_len == 0) caption_len = std::max<int64_t>(ctx.dim(0), 2);
                if (ctx.dim(0) < caption_len) {
                    std::vector<int64_t> rep(static_cast<size_t>(caption_len), 0);
                    ctx = gather_rows(reshape(ctx, {ctx.dim(0), cfg.model.width}), rep);
                }
                rows.push_back(reshape(ctx, {1, caption_len, cfg.model.width}));
            }
            cond.context = concat(rows, 0);
        }

        StepLog log;
        log.step = st.step;
        log.lr = detail::lr_at(cfg.optim, st.step, cfg.steps);
        try {
            ForwardTrace<S> trace;
            Tensor<S> rf = rf_loss<S>(st.model, x0, cond, sched, cfg.t_sampler, st.rng,
                                      cfg.lambda_repa > 0 ? &trace : nullptr);
            Tensor<S> total = rf;
            if (cfg.lambda_repa > 0) {
                Tensor<S> rl = repa_loss<S>(trace.n1_features, x0, st.encoder, st.head);
                log.repa_loss = static_cast<double>(rl.item());
                total = total_loss<S>(rf, &rl, static_cast<S>(cfg.lambda_repa));
            }
            log.rf_loss = static_cast<double>(rf.item());
            backward(total);
            st.opt.step(params, log.lr);
            for (auto& [name, t] : params) t.zero_grad();
            consecutive_bad = 0;
        } catch (const TrainError& e) {
            ++consecutive_bad;
            log.rf_loss = std::numeric_limits<double>::quiet_NaN();
            if (consecutive_bad >= 3)
                throw TrainError("train: non-finite loss for 3 consecutive steps at step " +
                                 std::to_string(st.step) + " (" + e.what() + ")");
        }

        if (cfg.ema) {
            const S d = static_cast<S>(cfg.ema_decay);
            for (size_t i = 0; i < st.model.params.size(); ++i) {
                const auto& src = st.model.params[i].second.data();
                auto& dst = st.ema[i];
                for (size_t j = 0; j < dst.size(); ++j) dst[j] = d * dst[j] + (S(1) - d) * src[j];
            }
        }

        log.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        result.logs.push_back(log);
        if (log_os && (st.step % std::max<int64_t>(1, cfg.log_every) == 0 || st.step + 1 == cfg.steps))
            log_os << detail::jsonl_line(log) << "\n" << std::flush;

        ++st.step;
        if (!cfg.out_dir.empty() && cfg.ckpt_every > 0 && st.step % cfg.ckpt_every == 0)
            make_checkpoint(st).save(cfg.out_dir + "/ckpt_" + std::to_string(st.step) + ".emdt");
        if (!cfg.out_dir.empty() && cfg.sample_every > 0 && st.step % cfg.sample_every == 0)
            emit_sample_grid(st, cfg.out_dir + "/samples_" + std::to_string(st.step) + ".png", 3, cfg.seed + 17);
    }

    if (!cfg.out_dir.empty()) {
        result.checkpoint_path = cfg.out_dir + "/ckpt_final.emdt";
        make_checkpoint(st).save(result.checkpoint_path);
    }
    if (!result.logs.empty()) {
        result.step0_loss = result.logs.front().rf_loss;
        result.final_loss = result.logs.back().rf_loss;
    }
    return result;
}

}  // namespace emdt
