#pragma once

#include <json.hpp>

#include "retclip/train.hpp"

namespace retclip::config {

using nlohmann::json;

// Throws ConfigError when obj holds a key outside `allowed`.
void check_keys(const json& obj, const char* section, std::initializer_list<const char*> allowed);

json to_json(const ImageEncoderConfig& cfg);
json to_json(const TextEncoderConfig& cfg);
json to_json(const ModelConfig& cfg);
json to_json(const data::AugmentConfig& cfg);
json to_json(const data::SyntheticCohortConfig& cfg);
json to_json(const train::TrainConfig& cfg);

ModelConfig model_from_json(const json& j);
data::AugmentConfig augment_from_json(const json& j);
data::SyntheticCohortConfig cohort_from_json(const json& j);
train::TrainConfig train_from_json(const json& j);

}  // namespace retclip::config
