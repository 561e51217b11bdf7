#pragma once

#include <filesystem>
#include <map>
#include <optional>

#include "retclip/model.hpp"

namespace retclip::train {

struct TrainConfig {
    int batch_size = 16;
    int epochs = 10;
    double peak_lr = 1e-3;
    int warmup_steps = 50;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 42;
    LossToggles toggles;
    bool cosine_decay = false;  // constant after warmup by default
    bool save_moments = false;
    data::AugmentConfig augment;

    void validate() const;
};

// Linear ramp 0 -> peak_lr over warmup_steps, then constant. With
// cosine_decay and a known total_steps, decays to 0 after the ramp.
double lr_at_step(long step, const TrainConfig& cfg, long total_steps = 0);

struct AdamState {
    std::map<std::string, std::pair<Matrix, Matrix>> moments;  // first, second
    long step = 0;                                             // completed updates
};

// Decoupled weight decay applied before the Adam delta; logit_scale is
// excluded from decay. Missing gradients count as zero.
void adamw_step(nn::ParamStore& params, AdamState& state, double lr, const TrainConfig& cfg);

struct StepLog {
    long step = 0;
    double lr = 0.0;
    double loss_left = 0.0;
    double loss_right = 0.0;
    double loss_patient = 0.0;
    double loss_total = 0.0;
};

void write_metrics_csv(const std::filesystem::path& path, std::span<const StepLog> log);

// Serialized model: "RCLP" magic, version, config JSON, tensor manifest
// (name, dtype, shape, byte offset into the payload), little-endian f32
// payload. Optimizer moments ride along as "opt.m.*" / "opt.v.*" entries
// when saved.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    ModelConfig model;
    TrainConfig train;
    std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;
    std::optional<long> optimizer_step;
};

Checkpoint make_checkpoint(const RetClipModel& model, const TrainConfig& tcfg,
                           const AdamState* opt = nullptr);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// f32 -> f64 lift of the model weights (optimizer entries ignored).
RetClipModel model_from_checkpoint(const Checkpoint& ckpt);

struct PretrainResult {
    Checkpoint checkpoint;
    std::vector<StepLog> log;
};

// epochs x shuffled batches of augment -> forward -> backward -> AdamW.
// Deterministic per (seed, config, cohort). A non-finite loss aborts with
// the last good parameter state written to checkpoint_path (when given)
// before the NumericError propagates. Empty paths skip file output.
PretrainResult pretrain(std::span<const data::PatientTriplet> cohort, const ModelConfig& mcfg,
                        const TrainConfig& tcfg,
                        const std::filesystem::path& checkpoint_path = {},
                        const std::filesystem::path& metrics_path = {});

}  // namespace retclip::train
