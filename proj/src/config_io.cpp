#include "emdt/config_io.hpp"

#include <fstream>

#include <json.hpp>

namespace emdt {

namespace {

using nlohmann::json;

json model_to_json(const ModelConfig& m) {
    json j;
    j["width"] = m.width;
    j["heads"] = m.heads;
    j["block_groups"] = {m.n1, m.n2, m.n3};
    j["ffn_multiplier"] = m.ffn_multiplier;
    json cyc = json::array();
    for (const auto& p : m.asa_cycle) cyc.push_back({p.region_num, p.chunk_size});
    j["asa_schedule"] = cyc;
    j["compression"] = to_string(m.compression);
    j["skip_connection"] = m.skip_connection;
    j["position_reinforcement"] = to_string(m.position_reinforcement);
    j["modulation"] = to_string(m.modulation);
    j["variant"] = to_string(m.variant);
    j["in_channels"] = m.in_channels;
    j["image_h"] = m.image_h;
    j["image_w"] = m.image_w;
    j["patch_size"] = m.patch_size;
    j["context_width"] = m.context_width;
    j["vocab_hash_size"] = m.vocab_hash_size;
    j["num_classes"] = m.num_classes;
    j["freq_dim"] = m.freq_dim;
    j["compressor_hidden"] = m.compressor_hidden;
    j["fuse_hidden"] = m.fuse_hidden;
    return j;
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

ModelConfig model_from_json(const json& j) {
    ModelConfig m;
    get_if(j, "width", m.width);
    get_if(j, "heads", m.heads);
    if (j.contains("block_groups")) {
        const auto g = j.at("block_groups");
        if (!g.is_array() || g.size() != 3) throw ConfigError("config json: block_groups must be [n1,n2,n3]");
        m.n1 = g[0].get<int>();
        m.n2 = g[1].get<int>();
        m.n3 = g[2].get<int>();
    }
    get_if(j, "ffn_multiplier", m.ffn_multiplier);
    if (j.contains("asa_schedule")) {
        m.asa_cycle.clear();
        for (const auto& p : j.at("asa_schedule")) {
            if (!p.is_array() || p.size() != 2)
                throw ConfigError("config json: asa_schedule entries must be [region_num, chunk_size]");
            m.asa_cycle.push_back({p[0].get<int64_t>(), p[1].get<int64_t>()});
        }
    }
    if (j.contains("compression")) {
        const std::string c = j.at("compression").get<std::string>();
        if (c == "none") m.compression = Compression::kNone;
        else if (c == "two_branch") m.compression = Compression::kTwoBranch;
        else if (c == "two_only") m.compression = Compression::kTwoOnly;
        else if (c == "four_only") m.compression = Compression::kFourOnly;
        else if (c == "stacked_two") m.compression = Compression::kStackedTwo;
        else throw ConfigError("config json: unknown compression '" + c + "'");
    }
    get_if(j, "skip_connection", m.skip_connection);
    if (j.contains("position_reinforcement")) {
        const std::string p = j.at("position_reinforcement").get<std::string>();
        if (p == "off") m.position_reinforcement = PosReinforce::kOff;
        else if (p == "recon_only") m.position_reinforcement = PosReinforce::kReconOnly;
        else if (p == "compressed_only") m.position_reinforcement = PosReinforce::kCompressedOnly;
        else if (p == "both") m.position_reinforcement = PosReinforce::kBoth;
        else throw ConfigError("config json: unknown position_reinforcement '" + p + "'");
    }
    if (j.contains("modulation")) {
        const std::string mo = j.at("modulation").get<std::string>();
        if (mo == "adaln") m.modulation = Modulation::kAdaLN;
        else if (mo == "adaln_single") m.modulation = Modulation::kAdaLNSingle;
        else if (mo == "adaln_affine") m.modulation = Modulation::kAdaLNAffine;
        else throw ConfigError("config json: unknown modulation '" + mo + "'");
    }
    if (j.contains("variant")) {
        const std::string v = j.at("variant").get<std::string>();
        if (v == "mmdit_dual_stream") m.variant = Variant::kDualStream;
        else if (v == "dit_single_stream") m.variant = Variant::kSingleStream;
        else throw ConfigError("config json: unknown variant '" + v + "'");
    }
    get_if(j, "in_channels", m.in_channels);
    get_if(j, "image_h", m.image_h);
    get_if(j, "image_w", m.image_w);
    get_if(j, "patch_size", m.patch_size);
    get_if(j, "context_width", m.context_width);
    get_if(j, "vocab_hash_size", m.vocab_hash_size);
    get_if(j, "num_classes", m.num_classes);
    get_if(j, "freq_dim", m.freq_dim);
    get_if(j, "compressor_hidden", m.compressor_hidden);
    get_if(j, "fuse_hidden", m.fuse_hidden);
    return m;
}

}  // namespace

std::string train_config_to_json(const TrainConfig& cfg) {
    json j;
    j["model"] = model_to_json(cfg.model);
    j["seed"] = cfg.seed;
    j["steps"] = cfg.steps;
    j["batch"] = cfg.batch;
    j["dtype"] = cfg.dtype;
    j["optim"] = {{"lr", cfg.optim.lr},
                  {"beta1", cfg.optim.beta1},
                  {"beta2", cfg.optim.beta2},
                  {"weight_decay", cfg.optim.weight_decay},
                  {"eps", cfg.optim.eps},
                  {"schedule", cfg.optim.schedule == OptimConfig::Schedule::kCosine ? "cosine" : "constant"}};
    j["ema"] = cfg.ema;
    j["ema_decay"] = cfg.ema_decay;
    j["lambda_repa"] = cfg.lambda_repa;
    j["repa_feat_dim"] = cfg.repa_feat_dim;
    j["cfg_drop_prob"] = cfg.cfg_drop_prob;
    j["t_sampler"] = cfg.t_sampler == TimestepSampler::kLogitNormal ? "logit_normal" : "uniform";
    j["out_dir"] = cfg.out_dir;
    j["log_every"] = cfg.log_every;
    j["ckpt_every"] = cfg.ckpt_every;
    j["sample_every"] = cfg.sample_every;
    j["sampler"] = {{"steps", cfg.sampler.steps}, {"guidance_scale", cfg.sampler.guidance_scale}, {"seed", cfg.sampler.seed}};
    return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config json: parse error: ") + e.what());
    }
    TrainConfig cfg;
    if (j.contains("model")) cfg.model = model_from_json(j.at("model"));
    get_if(j, "seed", cfg.seed);
    get_if(j, "steps", cfg.steps);
    get_if(j, "batch", cfg.batch);
    get_if(j, "dtype", cfg.dtype);
    if (cfg.dtype != "f32" && cfg.dtype != "f64")
        throw ConfigError("config json: dtype must be 'f32' or 'f64'");
    if (j.contains("optim")) {
        const auto& o = j.at("optim");
        get_if(o, "lr", cfg.optim.lr);
        get_if(o, "beta1", cfg.optim.beta1);
        get_if(o, "beta2", cfg.optim.beta2);
        get_if(o, "weight_decay", cfg.optim.weight_decay);
        get_if(o, "eps", cfg.optim.eps);
        if (o.contains("schedule")) {
            const std::string s = o.at("schedule").get<std::string>();
            if (s == "cosine") cfg.optim.schedule = OptimConfig::Schedule::kCosine;
            else if (s == "constant") cfg.optim.schedule = OptimConfig::Schedule::kConstant;
            else throw ConfigError("config json: unknown lr schedule '" + s + "'");
        }
    }
    get_if(j, "ema", cfg.ema);
    get_if(j, "ema_decay", cfg.ema_decay);
    get_if(j, "lambda_repa", cfg.lambda_repa);
    get_if(j, "repa_feat_dim", cfg.repa_feat_dim);
    get_if(j, "cfg_drop_prob", cfg.cfg_drop_prob);
    if (j.contains("t_sampler")) {
        const std::string s = j.at("t_sampler").get<std::string>();
        if (s == "uniform") cfg.t_sampler = TimestepSampler::kUniform;
        else if (s == "logit_normal") cfg.t_sampler = TimestepSampler::kLogitNormal;
        else throw ConfigError("config json: unknown t_sampler '" + s + "'");
    }
    get_if(j, "out_dir", cfg.out_dir);
    get_if(j, "log_every", cfg.log_every);
    get_if(j, "ckpt_every", cfg.ckpt_every);
    get_if(j, "sample_every", cfg.sample_every);
    if (j.contains("sampler")) {
        const auto& s = j.at("sampler");
        get_if(s, "steps", cfg.sampler.steps);
        get_if(s, "guidance_scale", cfg.sampler.guidance_scale);
        get_if(s, "seed", cfg.sampler.seed);
    }
    return cfg;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return train_config_from_json(text);
}

void save_train_config(const TrainConfig& cfg, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("config: cannot open '" + path + "' for writing");
    os << train_config_to_json(cfg) << "\n";
}

}  // namespace emdt
