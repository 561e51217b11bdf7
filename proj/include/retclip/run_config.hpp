#pragma once

#include "retclip/eval.hpp"
#include "retclip/serde.hpp"

namespace retclip::config {

// One structured configuration for every command; sections model/train/data/
// eval, every key defaulted, unknown keys rejected. The root seed feeds the
// per-section seeds so a single value pins the whole run.
struct RunConfig {
    ModelConfig model;
    train::TrainConfig train;
    data::SyntheticCohortConfig data;
    eval::EvalConfig eval;
    std::array<double, 3> eval_ratios{0.56, 0.14, 0.3};
    std::uint64_t seed = 42;

    void propagate_seed();  // copies the root seed into train/data sections
};

json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace retclip::config
