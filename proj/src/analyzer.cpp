#include "emdt/analyzer.hpp"

#include <iomanip>
#include <sstream>

namespace emdt {

const FlopsRow& FlopsReport::row(const std::string& name) const {
    for (const auto& r : rows)
        if (r.name == name) return r;
    throw ConfigError("report: no row named '" + name + "'");
}

namespace {

struct Acc {
    FlopsReport report;

    void add(const std::string& name, int64_t params, int64_t macs) {
        for (auto& r : report.rows) {
            if (r.name == name) {
                r.params += params;
                r.macs += macs;
                return;
            }
        }
        report.rows.push_back({name, params, macs});
    }

    void finish() {
        report.total_params = 0;
        report.total_macs = 0;
        for (const auto& r : report.rows) {
            report.total_params += r.params;
            report.total_macs += r.macs;
        }
    }
};

int64_t linear_params(int64_t in, int64_t out) { return in * out + out; }
int64_t mlp_params(int64_t in, int64_t hidden, int64_t out) {
    return linear_params(in, hidden) + linear_params(hidden, out);
}
int64_t mlp_macs(int64_t tokens, int64_t in, int64_t hidden, int64_t out) {
    return tokens * (in * hidden + hidden * out);
}

}  // namespace

FlopsReport analyze(const ModelConfig& cfg, int64_t context_tokens) {
    cfg.validate();
    Acc acc;
    const int64_t C = cfg.width;
    const int64_t L = cfg.full_tokens();
    const int64_t h = cfg.comp_hidden();
    const int64_t fh = cfg.fuse_hidden_width();
    const bool shared_mod = cfg.modulation != Modulation::kAdaLN;
    const bool dual = cfg.variant == Variant::kDualStream;
    int64_t pointwise_elems = 0;

    // embedding stage
    acc.add("patch_embed", linear_params(cfg.patch_in_width(), C), L * cfg.patch_in_width() * C);
    pointwise_elems += L * C;  // positional add (input stage)

    if (shared_mod) {
        acc.add("timestep_mod", linear_params(cfg.freq_dim, C) + linear_params(C, 6 * C),
                cfg.freq_dim * C + C * 6 * C);
    } else {
        acc.add("timestep_mod", linear_params(cfg.freq_dim, C) + linear_params(C, C), cfg.freq_dim * C + C * C);
    }
    if (cfg.class_conditional()) {
        acc.add("conditioning", (cfg.num_classes + 1) * C, 0);
    } else {
        acc.add("conditioning", cfg.vocab_hash_size * C + linear_params(C, C) + C, context_tokens * C * C);
    }

    // transformer blocks
    const auto schedule = cfg.schedule().resolve(cfg.num_blocks());
    const int64_t m = cfg.ffn_multiplier;
    for (int i = 0; i < cfg.num_blocks(); ++i) {
        const int64_t Li = cfg.tokens_for_block(i);
        const int64_t s = schedule[static_cast<size_t>(i)].region_num;
        acc.add("attn_qkv", 3 * linear_params(C, C), 3 * Li * C * C);
        acc.add("attn_out", linear_params(C, C), Li * C * C);
        acc.add("attention_scores_values", 0, 2 * Li * Li * C / s);
        acc.add("ffn", mlp_params(C, m * C, C), 2 * m * Li * C * C);
        switch (cfg.modulation) {
            case Modulation::kAdaLN:
                acc.add("block_modulation", linear_params(C, 6 * C), 6 * C * C);
                break;
            case Modulation::kAdaLNSingle:
                acc.add("block_modulation", 6 * C, 0);
                break;
            case Modulation::kAdaLNAffine:
                acc.add("block_modulation", 12 * C, 0);
                break;
        }
        if (dual) {
            const int64_t T = context_tokens;
            acc.add("ctx_attn_qkv", 3 * linear_params(C, C), 3 * T * C * C);
            acc.add("ctx_attn_out", linear_params(C, C), T * C * C);
            // context keys/queries join every region: s regions of (Li/s + T)
            acc.add("attention_scores_values", 0, 2 * s * (Li / s + T) * (Li / s + T) * C - 2 * Li * Li * C / s);
            acc.add("ctx_ffn", mlp_params(C, m * C, C), 2 * m * T * C * C);
            switch (cfg.modulation) {
                case Modulation::kAdaLN:
                    acc.add("ctx_block_modulation", linear_params(C, 6 * C), 6 * C * C);
                    break;
                case Modulation::kAdaLNSingle:
                    acc.add("ctx_block_modulation", 6 * C, 0);
                    break;
                case Modulation::kAdaLNAffine:
                    acc.add("ctx_block_modulation", 12 * C, 0);
                    break;
            }
            pointwise_elems += 8 * T * C + cfg.heads * s * (Li / s + T) * (Li / s + T) - cfg.heads * Li * Li / s;
        }
        // norms (2), modulate (2), gates (2), residuals (2) on L*C; gelu on
        // m*C*L; softmax rows over the region width
        pointwise_elems += 8 * Li * C + m * Li * C + cfg.heads * Li * Li / s;
    }

    // compression path
    const int64_t L2 = L / 4, L4 = L / 16;
    const int64_t fuse_in = (cfg.skip_connection ? 3 : 2) * C;
    switch (cfg.compression) {
        case Compression::kNone:
            break;
        case Compression::kTwoBranch:
            acc.add("compressor", mlp_params(4 * C, h, C) + mlp_params(16 * C, h, C),
                    mlp_macs(L2, 4 * C, h, C) + mlp_macs(L4, 16 * C, h, C));
            acc.add("reconstructor",
                    mlp_params(C, h, 4 * C) + mlp_params(C, h, 16 * C) + mlp_params(fuse_in, fh, C),
                    mlp_macs(L2, C, h, 4 * C) + mlp_macs(L4, C, h, 16 * C) + mlp_macs(L, fuse_in, fh, C));
            break;
        case Compression::kTwoOnly:
            acc.add("compressor", mlp_params(4 * C, h, C), mlp_macs(L2, 4 * C, h, C));
            acc.add("reconstructor", mlp_params(C, h, 4 * C) + mlp_params(2 * C, fh, C),
                    mlp_macs(L2, C, h, 4 * C) + mlp_macs(L, 2 * C, fh, C));
            break;
        case Compression::kFourOnly:
            acc.add("compressor", mlp_params(16 * C, h, C), mlp_macs(L4, 16 * C, h, C));
            acc.add("reconstructor", mlp_params(C, h, 16 * C) + mlp_params(2 * C, fh, C),
                    mlp_macs(L4, C, h, 16 * C) + mlp_macs(L, 2 * C, fh, C));
            break;
        case Compression::kStackedTwo:
            acc.add("compressor", 2 * mlp_params(4 * C, h, C), mlp_macs(L2, 4 * C, h, C) + mlp_macs(L4, 4 * C, h, C));
            acc.add("reconstructor", 2 * mlp_params(C, h, 4 * C) + 2 * mlp_params(2 * C, fh, C),
                    mlp_macs(L4, C, h, 4 * C) + mlp_macs(L2, 2 * C, fh, C) + mlp_macs(L2, C, h, 4 * C) +
                        mlp_macs(L, 2 * C, fh, C));
            break;
    }
    if (cfg.compression != Compression::kNone &&
        (cfg.position_reinforcement == PosReinforce::kReconOnly ||
         cfg.position_reinforcement == PosReinforce::kBoth))
        pointwise_elems += L * C;  // reinforcement add
    if (cfg.compression != Compression::kNone &&
        (cfg.position_reinforcement == PosReinforce::kCompressedOnly ||
         cfg.position_reinforcement == PosReinforce::kBoth))
        pointwise_elems += cfg.mid_tokens() * C;

    // final head
    if (shared_mod) {
        acc.add("final_head", 2 * C + linear_params(C, cfg.patch_size * cfg.patch_size * cfg.in_channels),
                L * C * cfg.patch_size * cfg.patch_size * cfg.in_channels);
    } else {
        acc.add("final_head",
                linear_params(C, 2 * C) + linear_params(C, cfg.patch_size * cfg.patch_size * cfg.in_channels),
                2 * C * C + L * C * cfg.patch_size * cfg.patch_size * cfg.in_channels);
    }
    pointwise_elems += 3 * L * C;

    acc.finish();
    acc.report.attention_macs = acc.report.row("attention_scores_values").macs;
    acc.report.pointwise_flops = 5 * pointwise_elems;
    return acc.report;
}

FlopsReport count_params(const ModelConfig& cfg) { return analyze(cfg, 0); }

FlopsReport count_flops(const ModelConfig& cfg, int64_t context_tokens) { return analyze(cfg, context_tokens); }

TokenBudget token_budget(const ModelConfig& cfg) {
    cfg.validate();
    TokenBudget b;
    const int64_t L = cfg.full_tokens();
    b.stages.push_back({"full (n1)", L, cfg.n1});
    if (cfg.compression == Compression::kStackedTwo) {
        b.stages.push_back({"compressed 2x (n2a)", cfg.mid_tokens(), cfg.stacked_n2a()});
        b.stages.push_back({"compressed 4x (n2b)", cfg.stacked_mid2_tokens(), cfg.stacked_n2b()});
    } else {
        b.stages.push_back({"compressed (n2)", cfg.mid_tokens(), cfg.n2});
    }
    b.stages.push_back({"full (n3)", L, cfg.n3});
    b.token_block_product = 0;
    for (const auto& s : b.stages) b.token_block_product += s.tokens * s.blocks;
    b.mid_reduction_pct = 100.0 * (1.0 - static_cast<double>(cfg.mid_tokens()) / static_cast<double>(L));
    return b;
}

std::string FlopsReport::format_text() const {
    std::ostringstream os;
    os << std::left << std::setw(28) << "component" << std::right << std::setw(14) << "params" << std::setw(16)
       << "MACs" << std::setw(14) << "GFLOPs" << "\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(28) << r.name << std::right << std::setw(14) << r.params << std::setw(16)
           << r.macs << std::setw(14) << std::fixed << std::setprecision(3) << static_cast<double>(r.flops()) / 1e9
           << "\n";
    }
    os << std::left << std::setw(28) << "total" << std::right << std::setw(14) << total_params << std::setw(16)
       << total_macs << std::setw(14) << std::fixed << std::setprecision(3) << gflops() << "\n";
    os << "params: " << std::setprecision(2) << params_m() << " M\n";
    os << "flops: " << std::setprecision(2) << gflops() << " GFLOPs (2 per MAC)\n";
    os << "attention (scores+values): " << std::setprecision(3) << attention_gflops() << " GFLOPs\n";
    os << "pointwise (not in totals): " << std::setprecision(3) << static_cast<double>(pointwise_flops) / 1e9
       << " GFLOPs\n";
    return os.str();
}

std::string FlopsReport::format_json() const {
    std::ostringstream os;
    os << "{\"rows\":[";
    for (size_t i = 0; i < rows.size(); ++i) {
        if (i) os << ",";
        os << "{\"name\":\"" << rows[i].name << "\",\"params\":" << rows[i].params << ",\"macs\":" << rows[i].macs
           << ",\"flops\":" << rows[i].flops() << "}";
    }
    os << "],\"total_params\":" << total_params << ",\"total_macs\":" << total_macs
       << ",\"total_flops\":" << total_flops() << ",\"attention_flops\":" << 2 * attention_macs
       << ",\"pointwise_flops\":" << pointwise_flops << "}";
    return os.str();
}

std::string TokenBudget::format_text() const {
    std::ostringstream os;
    for (const auto& s : stages)
        os << std::left << std::setw(24) << s.name << std::right << std::setw(8) << s.tokens << " tokens x "
           << s.blocks << " blocks\n";
    os << "token-block product: " << token_block_product << "\n";
    os << "mid-stage reduction: " << std::fixed << std::setprecision(2) << mid_reduction_pct << "%\n";
    return os.str();
}

}  // namespace emdt
