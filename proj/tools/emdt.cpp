#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "emdt/ablation.hpp"
#include "emdt/analyzer.hpp"
#include "emdt/checks.hpp"
#include "emdt/config_io.hpp"
#include "emdt/train.hpp"

namespace {

using namespace emdt;

template <std::floating_point S>
void load_model_params(Model<S>& model, const Checkpoint& ck, const std::string& prefix) {
    for (auto& [name, t] : model.params) {
        const auto& e = ck.at(prefix + name);
        if (e.dims != t.shape())
            throw IoError("checkpoint: shape mismatch for '" + name + "': " + shape_str(e.dims) + " vs " +
                          shape_str(t.shape()));
        if constexpr (std::is_same_v<S, float>) {
            auto v = e.as_f32();
            t.data().assign(v.begin(), v.end());
        } else {
            auto v = e.as_f64();
            t.data().assign(v.begin(), v.end());
        }
    }
}

struct SampleArgs {
    std::string ckpt;
    std::string config;
    int steps = 20;
    double guidance = 1.0;
    int64_t class_id = -1;
    std::string caption;
    std::string out = "samples.png";
    uint64_t seed = 0;
    int grid = 3;
    bool use_ema = false;
};

template <std::floating_point S>
int run_sample(const TrainConfig& tc, const SampleArgs& args) {
    Model<S> model = Model<S>::build(tc.model, tc.seed);
    const Checkpoint ck = Checkpoint::load(args.ckpt);
    load_model_params(model, ck, args.use_ema ? "ema." : "model.");

    const ModelConfig& mc = tc.model;
    SamplerConfig sc;
    sc.steps = args.steps;
    sc.guidance_scale = args.guidance;
    sc.seed = args.seed;
    sc.validate();

    Conditioning<S> cond, uncond;
    if (mc.class_conditional()) {
        const int64_t cls = args.class_id >= 0 ? args.class_id : 0;
        cond.class_ids = {cls};
        uncond.class_ids = {mc.num_classes};
    } else {
        Tensor<S> ctx = context_embed(args.caption, model);
        cond.context = reshape(ctx, {1, ctx.dim(0), mc.width});
        Tensor<S> null_ctx = context_embed("", model);
        uncond.context = reshape(null_ctx, {1, null_ctx.dim(0), mc.width});
    }

    Rng rng(args.seed);
    const int n = args.grid;
    std::vector<uint8_t> canvas(static_cast<size_t>(3 * n * mc.image_h * n * mc.image_w), 0);
    for (int i = 0; i < n * n; ++i) {
        Conditioning<S> ci = cond;
        if (mc.class_conditional() && args.class_id < 0) ci.class_ids = {i % mc.num_classes};
        Tensor<S> img = sample<S>(guided_velocity(model, ci, uncond, sc.guidance_scale),
                                  {1, mc.in_channels, mc.image_h, mc.image_w}, sc, FlowSchedule<S>::linear(), rng);
        const int64_t gy = i / n, gx = i % n, W = n * mc.image_w;
        for (int64_t c = 0; c < std::min<int64_t>(3, mc.in_channels); ++c)
            for (int64_t y = 0; y < mc.image_h; ++y)
                for (int64_t x = 0; x < mc.image_w; ++x) {
                    S v = img.data()[static_cast<size_t>((c * mc.image_h + y) * mc.image_w + x)];
                    v = std::clamp((v + S(1)) / S(2), S(0), S(1));
                    canvas[static_cast<size_t>(((gy * mc.image_h + y) * W + gx * mc.image_w + x) * 3 + c)] =
                        static_cast<uint8_t>(std::lround(static_cast<double>(v) * 255.0));
                }
    }
    write_png_rgb8(args.out, n * mc.image_w, n * mc.image_h, canvas);
    std::cout << "wrote " << args.out << " (" << n << "x" << n << " grid, " << args.steps << " steps, guidance "
              << args.guidance << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"E-MMDiT: efficient multimodal diffusion transformer (desk-scale)"};
    app.require_subcommand(1);

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model on the procedural shapes dataset");
    std::string train_config_path;
    std::string train_out;
    int64_t train_steps = -1;
    int64_t train_seed = -1;
    bool train_ema = false;
    std::string resume_path;
    train_cmd->add_option("--config", train_config_path, "experiment config json")->required();
    train_cmd->add_option("--steps", train_steps, "override step count");
    train_cmd->add_option("--out", train_out, "output directory");
    train_cmd->add_option("--seed", train_seed, "override seed");
    train_cmd->add_flag("--ema", train_ema, "enable EMA of weights");
    train_cmd->add_option("--resume", resume_path, "resume from checkpoint");

    // sample
    auto* sample_cmd = app.add_subcommand("sample", "sample images from a checkpoint");
    SampleArgs sa;
    sample_cmd->add_option("--ckpt", sa.ckpt, "checkpoint path")->required();
    sample_cmd->add_option("--config", sa.config, "experiment config json (default: config.json next to ckpt)");
    sample_cmd->add_option("--steps", sa.steps, "sampling steps");
    sample_cmd->add_option("--guidance", sa.guidance, "classifier-free guidance scale");
    sample_cmd->add_option("--class", sa.class_id, "class id (class-conditional models)");
    sample_cmd->add_option("--caption", sa.caption, "text prompt (text models)");
    sample_cmd->add_option("--out", sa.out, "output png");
    sample_cmd->add_option("--seed", sa.seed, "sampling seed");
    sample_cmd->add_option("--grid", sa.grid, "grid side length");
    sample_cmd->add_flag("--ema", sa.use_ema, "sample from EMA weights");

    // analyze
    auto* analyze_cmd = app.add_subcommand("analyze", "analytical parameter/FLOPs report");
    std::string analyze_config;
    std::string analyze_grid;
    bool analyze_json = false;
    int64_t analyze_ctx = 0;
    analyze_cmd->add_option("--config", analyze_config, "experiment config json")->required();
    analyze_cmd->add_option("--grid", analyze_grid, "token grid override, e.g. 16x16");
    analyze_cmd->add_option("--context-tokens", analyze_ctx, "context tokens for dual-stream costs");
    analyze_cmd->add_flag("--json", analyze_json, "emit json");

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "reproduce resource columns of the ablation tables");
    std::string table_name = "ds";
    ablate_cmd->add_option("--table", table_name, "table: ds | blks | pos | asa | adaln | all");

    // check
    app.add_subcommand("check", "run the property suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (train_cmd->parsed()) {
            TrainConfig cfg = emdt::load_train_config(train_config_path);
            if (train_steps >= 0) cfg.steps = train_steps;
            if (train_seed >= 0) cfg.seed = static_cast<uint64_t>(train_seed);
            if (!train_out.empty()) cfg.out_dir = train_out;
            if (train_ema) cfg.ema = true;
            if (!cfg.out_dir.empty()) {
                std::filesystem::create_directories(cfg.out_dir);
                emdt::save_train_config(cfg, cfg.out_dir + "/config.json");
            }
            emdt::TrainResult res;
            if (cfg.dtype == "f64") {
                res = emdt::train<double>(cfg, resume_path);
            } else {
                res = emdt::train<float>(cfg, resume_path);
            }
            std::cout << "trained " << cfg.steps << " steps; rf_loss " << res.step0_loss << " -> " << res.final_loss
                      << "\n";
            if (!res.checkpoint_path.empty()) std::cout << "checkpoint: " << res.checkpoint_path << "\n";
            return 0;
        }
        if (sample_cmd->parsed()) {
            std::string cfg_path = sa.config;
            if (cfg_path.empty())
                cfg_path = (std::filesystem::path(sa.ckpt).parent_path() / "config.json").string();
            TrainConfig tc = emdt::load_train_config(cfg_path);
            return tc.dtype == "f64" ? run_sample<double>(tc, sa) : run_sample<float>(tc, sa);
        }
        if (analyze_cmd->parsed()) {
            TrainConfig tc = emdt::load_train_config(analyze_config);
            ModelConfig mc = tc.model;
            if (!analyze_grid.empty()) {
                const auto x = analyze_grid.find('x');
                if (x == std::string::npos) throw emdt::ConfigError("analyze: --grid expects HxW, e.g. 16x16");
                mc.image_h = std::stoll(analyze_grid.substr(0, x)) * mc.patch_size;
                mc.image_w = std::stoll(analyze_grid.substr(x + 1)) * mc.patch_size;
            }
            emdt::FlopsReport rep = emdt::count_flops(mc, analyze_ctx);
            if (analyze_json) {
                std::cout << rep.format_json() << "\n";
            } else {
                std::cout << rep.format_text() << "\n" << emdt::token_budget(mc).format_text();
            }
            return 0;
        }
        if (ablate_cmd->parsed()) {
            if (table_name == "all") {
                for (const char* t : {"ds", "blks", "pos", "asa", "adaln"}) {
                    std::cout << "== table " << t << " ==\n"
                              << emdt::run_ablation(*emdt::ablation_table_from_name(t)) << "\n";
                }
                return 0;
            }
            const auto table = emdt::ablation_table_from_name(table_name);
            if (!table) {
                std::cerr << "unknown table '" << table_name << "' (ds | blks | pos | asa | adaln | all)\n";
                return 2;
            }
            std::cout << emdt::run_ablation(*table);
            return 0;
        }
        // check
        const auto results = emdt::run_property_checks();
        bool ok = true;
        for (const auto& r : results) {
            std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name;
            if (!r.passed) std::cout << ": " << r.detail;
            std::cout << "\n";
            if (!r.passed && ok) {
                ok = false;
                std::cerr << "first failing property: " << r.name << "\n";
            }
        }
        return ok ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
