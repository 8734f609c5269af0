#pragma once

#include <string>

#include "emdt/train.hpp"

namespace emdt {

/// JSON (de)serialization of experiment configs. Schema: docs/formats.md.
std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& json_text);
TrainConfig load_train_config(const std::string& path);
void save_train_config(const TrainConfig& cfg, const std::string& path);

}  // namespace emdt
