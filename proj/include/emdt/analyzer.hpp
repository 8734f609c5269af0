#pragma once

#include <string>
#include <vector>

#include "emdt/config.hpp"

namespace emdt {

/// One component row of the cost report. flops == 2 * macs everywhere (the
/// multiply-accumulate convention); pointwise work is reported separately
/// on the report and never enters the MAC-based totals.
struct FlopsRow {
    std::string name;
    int64_t params = 0;
    int64_t macs = 0;

    int64_t flops() const { return 2 * macs; }
};

struct FlopsReport {
    std::vector<FlopsRow> rows;
    int64_t total_params = 0;
    int64_t total_macs = 0;
    int64_t attention_macs = 0;   // scores+values subtotal (isolated)
    int64_t pointwise_flops = 0;  // norms/softmax/nonlinearities at 5 ops/element

    int64_t total_flops() const { return 2 * total_macs; }
    double params_m() const { return static_cast<double>(total_params) / 1e6; }
    double gflops() const { return static_cast<double>(total_flops()) / 1e9; }
    double attention_gflops() const { return static_cast<double>(2 * attention_macs) / 1e9; }

    const FlopsRow& row(const std::string& name) const;
    std::string format_text() const;
    std::string format_json() const;
};

/// Per-stage token accounting.
struct TokenBudget {
    struct Stage {
        std::string name;
        int64_t tokens = 0;
        int blocks = 0;
    };
    std::vector<Stage> stages;
    int64_t token_block_product = 0;  // sum of tokens * blocks
    double mid_reduction_pct = 0;     // reduction of the compressed stage vs full

    std::string format_text() const;
};

/// Closed-form analytical parameter and forward-pass cost model of a
/// config, per sample. Independent of the live model builder; tests check
/// the parameter side agrees with instantiated tensors exactly.
FlopsReport analyze(const ModelConfig& cfg, int64_t context_tokens = 0);

/// Parameter counts only (same rows, macs untouched).
FlopsReport count_params(const ModelConfig& cfg);

/// Full cost report; geometry comes from the config.
FlopsReport count_flops(const ModelConfig& cfg, int64_t context_tokens = 0);

TokenBudget token_budget(const ModelConfig& cfg);

}  // namespace emdt
