#pragma once

#include <optional>
#include <string>
#include <vector>

#include "emdt/analyzer.hpp"
#include "emdt/config.hpp"

namespace emdt {

enum class AblationTable { kDownsampling, kBlocks, kPosition, kAsa, kAdaln };

std::optional<AblationTable> ablation_table_from_name(const std::string& name);

/// One row of a published ablation table together with the config that
/// reproduces its resource columns. FID/IS are reference-only: they come
/// from full-scale training runs that are out of scope here.
struct AblationRow {
    std::string label;
    ModelConfig cfg;
    double ref_params_m = 0;
    double ref_flops_g = 0;      // whole-model GFLOPs, or attention-only for the ASA table
    double ref_fid = 0;
    double ref_is = 0;
    bool attention_only = false;  // reference FLOPs column isolates attention
};

std::vector<AblationRow> ablation_rows(AblationTable table);

/// All rows of all five tables.
std::vector<AblationRow> all_ablation_rows();

/// Renders one table: analyzer columns next to the reference columns with
/// deltas; quality columns are marked not reproduced.
std::string run_ablation(AblationTable table);

}  // namespace emdt
