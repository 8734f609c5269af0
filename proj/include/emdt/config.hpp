#pragma once

#include <string>
#include <vector>

#include "emdt/asa.hpp"
#include "emdt/common.hpp"

namespace emdt {

enum class Modulation { kAdaLN, kAdaLNSingle, kAdaLNAffine };
enum class Variant { kDualStream, kSingleStream };
enum class Compression { kNone, kTwoBranch, kTwoOnly, kFourOnly, kStackedTwo };
enum class PosReinforce { kOff, kReconOnly, kCompressedOnly, kBoth };

std::string to_string(Modulation m);
std::string to_string(Variant v);
std::string to_string(Compression c);
std::string to_string(PosReinforce p);

/// Full architecture description. Both the live model and the analytical
/// cost model are derived from this one struct.
struct ModelConfig {
    int64_t width = 768;
    int heads = 24;  // head_dim = width / heads
    int n1 = 4, n2 = 16, n3 = 4;
    int ffn_multiplier = 3;
    std::vector<AsaPattern> asa_cycle{{1, 1}, {4, 1}, {4, 4}};
    Compression compression = Compression::kTwoBranch;
    bool skip_connection = true;
    PosReinforce position_reinforcement = PosReinforce::kReconOnly;
    Modulation modulation = Modulation::kAdaLNAffine;
    Variant variant = Variant::kDualStream;

    int64_t in_channels = 3;
    int64_t image_h = 512;
    int64_t image_w = 512;
    int64_t patch_size = 32;

    int64_t context_width = 0;  // 0 -> width; joint attention requires == width
    int64_t vocab_hash_size = 4096;
    int64_t num_classes = 0;  // > 0: class-conditional (single stream)
    int64_t freq_dim = 256;

    int64_t compressor_hidden = 0;  // 0 -> width / 2
    int64_t fuse_hidden = 0;        // 0 -> width

    int num_blocks() const { return n1 + n2 + n3; }
    int64_t head_dim() const { return width / heads; }
    int64_t grid_h() const { return image_h / patch_size; }
    int64_t grid_w() const { return image_w / patch_size; }
    int64_t full_tokens() const { return grid_h() * grid_w(); }
    int64_t patch_in_width() const { return in_channels * patch_size * patch_size; }
    int64_t comp_hidden() const { return compressor_hidden > 0 ? compressor_hidden : width / 2; }
    int64_t fuse_hidden_width() const { return fuse_hidden > 0 ? fuse_hidden : width; }
    int64_t ctx_width() const { return context_width > 0 ? context_width : width; }
    AsaSchedule schedule() const { return AsaSchedule{asa_cycle}; }

    bool class_conditional() const { return num_classes > 0; }

    /// Token count of the middle (N2) stage. For the stacked variant this is
    /// the first level; stacked_mid2_tokens() is the deeper one.
    int64_t mid_tokens() const {
        const int64_t L = full_tokens();
        switch (compression) {
            case Compression::kNone: return L;
            case Compression::kTwoBranch: return L / 4 + L / 16;
            case Compression::kTwoOnly: return L / 4;
            case Compression::kFourOnly: return L / 16;
            case Compression::kStackedTwo: return L / 4;
        }
        return L;
    }
    int64_t stacked_mid2_tokens() const { return full_tokens() / 16; }
    int stacked_n2a() const { return n2 / 2; }
    int stacked_n2b() const { return n2 - n2 / 2; }

    /// Token count seen by the image stream of block `index`.
    int64_t tokens_for_block(int index) const {
        if (index < n1 || index >= n1 + n2) return full_tokens();
        if (compression == Compression::kStackedTwo && index >= n1 + stacked_n2a()) return stacked_mid2_tokens();
        return mid_tokens();
    }

    void validate() const {
        if (width <= 0 || heads <= 0 || width % heads != 0)
            throw ConfigError("config: width " + std::to_string(width) + " must be a positive multiple of heads " +
                              std::to_string(heads));
        if (width % 4 != 0) throw ConfigError("config: width must be divisible by 4 for the positional table");
        if (n1 < 0 || n2 < 0 || n3 < 0 || num_blocks() < 1) throw ConfigError("config: bad block groups");
        if (ffn_multiplier < 1) throw ConfigError("config: ffn_multiplier must be >= 1");
        if (asa_cycle.empty()) throw ConfigError("config: empty asa cycle");
        if (image_h <= 0 || image_w <= 0 || patch_size <= 0 || image_h % patch_size != 0 || image_w % patch_size != 0)
            throw ConfigError("config: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                              " must be divisible by patch " + std::to_string(patch_size));
        if (ctx_width() != width)
            throw ConfigError("config: context width must equal model width for joint attention");
        if (compression != Compression::kNone) {
            if (n2 < 1) throw ConfigError("config: compression requires n2 >= 1");
            const int64_t factor = compression == Compression::kTwoOnly ? 2 : 4;
            if (grid_h() % factor != 0 || grid_w() % factor != 0)
                throw ConfigError("config: grid " + std::to_string(grid_h()) + "x" + std::to_string(grid_w()) +
                                  " not divisible by compression factor " + std::to_string(factor));
            if (compression == Compression::kStackedTwo && n2 % 2 != 0)
                throw ConfigError("config: stacked compression needs an even n2");
        }
        if (variant == Variant::kSingleStream && num_classes == 0 && vocab_hash_size <= 0)
            throw ConfigError("config: single-stream text model needs a vocab");
        // Every pattern must divide every stage length it is applied to.
        const auto resolved = schedule().resolve(num_blocks());
        for (int i = 0; i < num_blocks(); ++i) {
            const int64_t L = tokens_for_block(i);
            try {
                resolved[static_cast<size_t>(i)].validate(L);
            } catch (const ConfigError& e) {
                throw ConfigError("config: block " + std::to_string(i) + ": " + e.what());
            }
        }
    }
};

/// Paper-default text-to-image architecture: 24 dual-stream blocks, 24
/// heads of 32 channels, groups (4,16,4).
ModelConfig default_t2i_config();

/// Class-conditional DiT-L/2 base used by the ablation tables (width 1024,
/// 16 heads, patch 2 on a 32x32 4-channel latent -> 256 tokens).
ModelConfig ablation_dit_l2_base();

/// Plain DiT-L/2: per-block adaLN, full attention, no compression.
ModelConfig ablation_dit_l2_plain();

/// Desk-scale trainable config: 32x32 RGB, patch 4 -> 8x8 grid, width 192.
/// The (2,2) pattern stands in for (4,4): the 8x8 grid's joint stage is 20
/// tokens, which (4,4) does not divide.
ModelConfig micro_config();

}  // namespace emdt
