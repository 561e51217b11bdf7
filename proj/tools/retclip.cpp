#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "retclip/gradcheck.hpp"
#include "retclip/run_config.hpp"

namespace fs = std::filesystem;
using namespace retclip;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
};

config::RunConfig resolve_config(const CommonArgs& common) {
    config::RunConfig cfg;
    if (!common.config_path.empty()) {
        cfg = config::load_run_config(common.config_path);
    }
    if (common.seed) {
        cfg.seed = *common.seed;
        cfg.propagate_seed();
    }
    return cfg;
}

void print_startup(const config::RunConfig& cfg) {
    std::cout << "root seed: " << cfg.seed << "\n";
    std::cout << "resolved config:\n" << config::to_json(cfg).dump(2) << "\n";
}

void add_common(CLI::App* cmd, CommonArgs& common) {
    cmd->add_option("--config", common.config_path, "JSON run configuration")
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", common.seed, "root seed override");
}

int cmd_synth(const config::RunConfig& cfg, const fs::path& out_dir, bool force) {
    if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force) {
        throw ConfigError("output directory " + out_dir.string() +
                          " is not empty (use --force to write anyway)");
    }
    fs::create_directories(out_dir);
    auto cohort = data::generate_cohort(cfg.data);
    data::Vocabulary vocab = data::Vocabulary::synthetic(cfg.data.n_conditions);
    data::write_cohort(out_dir, cohort, vocab, cfg.data.n_conditions);

    std::vector<long> freq(static_cast<std::size_t>(cfg.data.n_conditions), 0);
    for (const auto& p : cohort) {
        for (const auto& eye : p.ground_truth) {
            for (int k : eye) ++freq[static_cast<std::size_t>(k)];
        }
    }
    std::cout << "cohort: " << cohort.size() << " patients, " << 2 * cohort.size()
              << " images, vocabulary of " << vocab.size() << " tokens\n";
    for (int k = 0; k < cfg.data.n_conditions; ++k) {
        std::cout << "  condition " << k << ": " << freq[static_cast<std::size_t>(k)]
                  << " eyes\n";
    }
    std::cout << "wrote " << (out_dir / "manifest.tsv").string() << "\n";
    return kExitOk;
}

int cmd_pretrain(const config::RunConfig& cfg, const fs::path& data_dir,
                 const fs::path& out_dir) {
    const fs::path manifest = data_dir / "manifest.tsv";
    if (!fs::exists(manifest)) {
        throw IoError("missing manifest: " + manifest.string());
    }
    const fs::path vocab_path = data_dir / "vocab.txt";
    if (!fs::exists(vocab_path)) {
        throw IoError("missing vocabulary: " + vocab_path.string());
    }
    data::Vocabulary vocab = data::Vocabulary::load(vocab_path);
    if (vocab.size() > cfg.model.text.vocab_size) {
        throw ConfigError("vocabulary has " + std::to_string(vocab.size()) +
                          " tokens but model.text.vocab_size is " +
                          std::to_string(cfg.model.text.vocab_size));
    }
    auto cohort = data::load_manifest(manifest, vocab);
    fs::create_directories(out_dir);
    auto result = train::pretrain(cohort, cfg.model, cfg.train, out_dir / "checkpoint.rclp",
                                  out_dir / "metrics.csv");
    std::cout << "pretrained " << cohort.size() << " patients for " << result.log.size()
              << " steps";
    if (!result.log.empty()) {
        const auto& last = result.log.back();
        std::cout << "; final losses: left " << last.loss_left << ", right "
                  << last.loss_right << ", patient " << last.loss_patient << ", total "
                  << last.loss_total;
    }
    std::cout << "\n";
    std::cout << "wrote " << (out_dir / "checkpoint.rclp").string() << " and "
              << (out_dir / "metrics.csv").string() << "\n";
    return kExitOk;
}

int cmd_adapt(const config::RunConfig& cfg, const fs::path& checkpoint_path,
              const fs::path& manifest_path, const fs::path& out_path, int seeds,
              const std::string& task_override, bool finetune) {
    if (!fs::exists(checkpoint_path)) {
        throw IoError("missing checkpoint: " + checkpoint_path.string());
    }
    if (!fs::exists(manifest_path)) {
        throw IoError("missing dataset manifest: " + manifest_path.string());
    }
    train::Checkpoint ckpt = train::load_checkpoint(checkpoint_path);
    eval::LabeledImageDataset ds = eval::load_labeled_manifest(manifest_path);
    if (!task_override.empty()) {
        const bool want_multiclass = task_override == "multiclass";
        if (want_multiclass != (ds.kind == eval::TaskKind::multiclass)) {
            throw ConfigError("requested a " + task_override +
                              " head but the manifest declares the other task kind");
        }
    }
    nlohmann::json records = nlohmann::json::array();
    double auroc_sum = 0.0, aupr_sum = 0.0;
    for (int i = 0; i < seeds; ++i) {
        eval::SplitSpec spec;
        spec.ratios = cfg.eval_ratios;
        spec.seed = cfg.seed + static_cast<std::uint64_t>(i);
        eval::EvalResult r = finetune
                                 ? eval::fine_tune(ckpt, ds, spec, cfg.eval,
                                                   manifest_path.stem().string())
                                 : eval::linear_probe(ckpt, ds, spec, cfg.eval,
                                                      manifest_path.stem().string());
        auroc_sum += r.auroc;
        aupr_sum += r.aupr;
        records.push_back(r.to_json());
        std::cout << "seed " << spec.seed << ": auroc " << r.auroc << ", aupr " << r.aupr
                  << ", best epoch " << r.best_epoch << "\n";
    }
    nlohmann::json out;
    out["records"] = std::move(records);
    out["mean"] = {{"auroc", auroc_sum / seeds}, {"aupr", aupr_sum / seeds}};
    std::cout << "mean over " << seeds << " seed(s): auroc " << auroc_sum / seeds << ", aupr "
              << aupr_sum / seeds << "\n";
    if (!out_path.empty()) {
        std::ofstream f(out_path);
        if (!f) {
            throw IoError("cannot write results: " + out_path.string());
        }
        f << out.dump(2) << "\n";
        std::cout << "wrote " << out_path.string() << "\n";
    }
    return kExitOk;
}

int cmd_gradcheck(double eps, double threshold, bool corrupt) {
    gradcheck::Report report = gradcheck::run_all(eps, threshold, corrupt);
    gradcheck::print(report, std::cout);
    return report.passed() ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale binocular image-text contrastive pre-training"};
    app.require_subcommand(1);

    CommonArgs common;

    auto* synth = app.add_subcommand("synth", "generate a synthetic cohort on disk");
    add_common(synth, common);
    std::string synth_out;
    bool synth_force = false;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_flag("--force", synth_force, "write into a non-empty directory");

    auto* pre = app.add_subcommand("pretrain", "run contrastive pre-training");
    add_common(pre, common);
    std::string pre_data, pre_out, pre_loss;
    std::optional<double> pre_fixed_scale;
    pre->add_option("--data", pre_data, "cohort directory (manifest.tsv + vocab.txt)")
        ->required();
    pre->add_option("--out", pre_out, "output directory")->required();
    pre->add_option("--loss", pre_loss, "loss levels: full|monocular|patient|left|right");
    pre->add_option("--fixed-scale", pre_fixed_scale,
                    "use a constant similarity multiplier instead of the learnable scale");

    std::string adapt_ckpt, adapt_data, adapt_out, adapt_task;
    int adapt_seeds = 1;
    auto add_adapt_options = [&](CLI::App* cmd) {
        add_common(cmd, common);
        cmd->add_option("--checkpoint", adapt_ckpt, "pre-trained checkpoint")->required();
        cmd->add_option("--data", adapt_data, "labeled dataset manifest")->required();
        cmd->add_option("--out", adapt_out, "results JSON path");
        cmd->add_option("--seeds", adapt_seeds, "number of evaluation seeds")
            ->check(CLI::PositiveNumber);
        cmd->add_option("--task", adapt_task, "expected task kind: multiclass|multilabel")
            ->check(CLI::IsMember({"multiclass", "multilabel"}));
    };
    auto* probe = app.add_subcommand("probe", "linear probe with a frozen encoder");
    add_adapt_options(probe);
    auto* finetune = app.add_subcommand("finetune", "fine-tune encoder and classifier");
    add_adapt_options(finetune);

    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    double grad_eps = 1e-5, grad_threshold = 1e-4;
    bool grad_corrupt = false;
    grad->add_option("--eps", grad_eps, "central-difference step size");
    grad->add_option("--threshold", grad_threshold, "max allowed relative error");
    grad->add_flag("--corrupt", grad_corrupt, "negative control: inject a gradient error")
        ->group("");  // hidden

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (grad->parsed()) {
            // gradcheck has no run configuration; only the seed line applies
            std::cout << "eps " << grad_eps << ", threshold " << grad_threshold << "\n";
            return cmd_gradcheck(grad_eps, grad_threshold, grad_corrupt);
        }
        config::RunConfig cfg = resolve_config(common);
        if (pre->parsed()) {
            if (!pre_loss.empty()) {
                nlohmann::json patch = config::to_json(cfg.train);
                patch["loss"] = pre_loss;
                cfg.train = config::train_from_json(patch);
                cfg.propagate_seed();
            }
            if (pre_fixed_scale) cfg.model.fixed_scale = *pre_fixed_scale;
        }
        print_startup(cfg);
        if (synth->parsed()) return cmd_synth(cfg, synth_out, synth_force);
        if (pre->parsed()) return cmd_pretrain(cfg, pre_data, pre_out);
        if (probe->parsed()) {
            return cmd_adapt(cfg, adapt_ckpt, adapt_data, adapt_out, adapt_seeds, adapt_task,
                             false);
        }
        if (finetune->parsed()) {
            return cmd_adapt(cfg, adapt_ckpt, adapt_data, adapt_out, adapt_seeds, adapt_task,
                             true);
        }
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const VocabError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
