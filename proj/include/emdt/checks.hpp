#pragma once

#include <functional>
#include <string>
#include <vector>

namespace emdt {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// The fast property suite behind `emdt check`: primitive gradient checks,
/// subregion-attention equivalences, rearrangement round-trips, modulation
/// degeneracies, and the oracle sampler. Runs in seconds.
std::vector<CheckResult> run_property_checks();

}  // namespace emdt
