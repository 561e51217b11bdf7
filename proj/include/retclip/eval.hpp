#pragma once

#include <json.hpp>
#include <optional>

#include "retclip/train.hpp"

namespace retclip::eval {

enum class TaskKind { multiclass, multilabel };

struct LabeledImage {
    std::string path;  // manifest-relative, kept for reporting
    Image image;
    std::vector<int> labels;  // multiclass: exactly one entry
};

struct LabeledImageDataset {
    TaskKind kind = TaskKind::multiclass;
    int n_classes = 0;
    std::vector<LabeledImage> items;

    void validate() const;
};

// Header `#task=multiclass|multilabel n_classes=K`, then one
// `image_path<TAB>label_spec` per line (multilabel: comma-separated ids,
// possibly empty).
LabeledImageDataset load_labeled_manifest(const std::filesystem::path& path);

struct SplitSpec {
    std::array<double, 3> ratios{0.56, 0.14, 0.3};  // train, val, test
    std::uint64_t seed = 0;

    void validate() const;
};

struct Split {
    std::vector<int> train, val, test;  // dataset indices
};

// Per-stratum largest-remainder partition (strata: the class for multiclass,
// the full label-set signature for multilabel), shuffled per seed.
Split stratified_split(const LabeledImageDataset& ds, const SplitSpec& spec);

// Mann-Whitney statistic via average ranks: (wins + ties/2) / (P*N).
double auroc(std::span<const double> scores, std::span<const int> labels);
// Average precision in descending-score order, ties kept in input order.
double aupr(std::span<const double> scores, std::span<const int> labels);

struct MacroSummary {
    double value = 0.0;
    std::vector<int> excluded;  // classes with no defined metric
};
// Macro average over the defined per-class values.
MacroSummary aggregate_metrics(const std::vector<std::optional<double>>& per_class);

struct EvalConfig {
    int epochs = 50;
    int batch_size = 16;
    double probe_lr = 1e-2;
    double finetune_lr = 1e-4;
    double weight_decay = 0.0;

    void validate() const;
};

struct EvalResult {
    std::string dataset;
    std::string mode;  // "probe" | "finetune"
    std::uint64_t seed = 0;
    double auroc = 0.0;  // macro over defined classes
    double aupr = 0.0;
    std::vector<std::optional<double>> per_class_auroc;
    std::vector<std::optional<double>> per_class_aupr;
    std::vector<int> excluded_classes;
    int epochs = 0;
    int best_epoch = 0;  // 1-based validation-selected epoch
    // in-memory only (not part of the results file): whether any encoder
    // parameter moved during adaptation
    bool encoder_changed = false;

    nlohmann::json to_json() const;
};

// Frozen encoder, trained linear head with softmax (multiclass) or sigmoid
// (multilabel) loss; model selection by best validation macro AUROC.
EvalResult linear_probe(const train::Checkpoint& ckpt, const LabeledImageDataset& ds,
                        const SplitSpec& spec, const EvalConfig& cfg,
                        const std::string& dataset_name);

// Same protocol with encoder and head both trainable.
EvalResult fine_tune(const train::Checkpoint& ckpt, const LabeledImageDataset& ds,
                     const SplitSpec& spec, const EvalConfig& cfg,
                     const std::string& dataset_name);

}  // namespace retclip::eval
