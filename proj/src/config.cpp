#include "emdt/config.hpp"

namespace emdt {

std::string to_string(Modulation m) {
    switch (m) {
        case Modulation::kAdaLN: return "adaln";
        case Modulation::kAdaLNSingle: return "adaln_single";
        case Modulation::kAdaLNAffine: return "adaln_affine";
    }
    return "?";
}

std::string to_string(Variant v) {
    return v == Variant::kDualStream ? "mmdit_dual_stream" : "dit_single_stream";
}

std::string to_string(Compression c) {
    switch (c) {
        case Compression::kNone: return "none";
        case Compression::kTwoBranch: return "two_branch";
        case Compression::kTwoOnly: return "two_only";
        case Compression::kFourOnly: return "four_only";
        case Compression::kStackedTwo: return "stacked_two";
    }
    return "?";
}

std::string to_string(PosReinforce p) {
    switch (p) {
        case PosReinforce::kOff: return "off";
        case PosReinforce::kReconOnly: return "recon_only";
        case PosReinforce::kCompressedOnly: return "compressed_only";
        case PosReinforce::kBoth: return "both";
    }
    return "?";
}

ModelConfig default_t2i_config() {
    ModelConfig cfg;
    cfg.width = 768;
    cfg.heads = 24;  // 32 channels per head
    cfg.n1 = 4;
    cfg.n2 = 16;
    cfg.n3 = 4;
    cfg.ffn_multiplier = 3;
    cfg.asa_cycle = {{1, 1}, {4, 1}, {4, 4}};
    cfg.compression = Compression::kTwoBranch;
    cfg.modulation = Modulation::kAdaLNAffine;
    cfg.variant = Variant::kDualStream;
    cfg.position_reinforcement = PosReinforce::kReconOnly;
    cfg.in_channels = 3;
    cfg.image_h = 512;
    cfg.image_w = 512;
    cfg.patch_size = 32;  // stands in for the 32x tokenizer: 16x16 tokens
    cfg.num_classes = 0;
    cfg.vocab_hash_size = 4096;
    return cfg;
}

ModelConfig ablation_dit_l2_base() {
    ModelConfig cfg;
    cfg.width = 1024;
    cfg.heads = 16;
    cfg.n1 = 4;
    cfg.n2 = 16;
    cfg.n3 = 4;
    cfg.ffn_multiplier = 4;
    cfg.asa_cycle = {{1, 1}, {4, 1}, {4, 4}};
    cfg.compression = Compression::kTwoBranch;
    cfg.modulation = Modulation::kAdaLNAffine;
    cfg.variant = Variant::kSingleStream;
    cfg.position_reinforcement = PosReinforce::kReconOnly;
    cfg.in_channels = 4;  // 8x-latent channels
    cfg.image_h = 32;
    cfg.image_w = 32;
    cfg.patch_size = 2;  // 256 tokens
    cfg.num_classes = 1000;
    return cfg;
}

ModelConfig ablation_dit_l2_plain() {
    ModelConfig cfg = ablation_dit_l2_base();
    cfg.compression = Compression::kNone;
    cfg.modulation = Modulation::kAdaLN;
    cfg.asa_cycle = {{1, 1}};
    cfg.position_reinforcement = PosReinforce::kOff;
    return cfg;
}

ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.width = 192;
    cfg.heads = 6;
    cfg.n1 = 1;
    cfg.n2 = 4;
    cfg.n3 = 1;
    cfg.ffn_multiplier = 3;
    cfg.asa_cycle = {{1, 1}, {4, 1}, {2, 2}};
    cfg.compression = Compression::kTwoBranch;
    cfg.modulation = Modulation::kAdaLNAffine;
    cfg.variant = Variant::kSingleStream;
    cfg.position_reinforcement = PosReinforce::kReconOnly;
    cfg.in_channels = 3;
    cfg.image_h = 32;
    cfg.image_w = 32;
    cfg.patch_size = 4;  // 8x8 grid
    cfg.num_classes = 18;
    cfg.freq_dim = 256;
    return cfg;
}

}  // namespace emdt
