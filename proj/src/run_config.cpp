#include "retclip/run_config.hpp"

#include <fstream>

namespace retclip::config {

namespace {

template <typename T>
T get_or(const json& j, const char* section, const char* key, T def) {
    if (!j.contains(key) || j.at(key).is_null()) return def;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string(section) + "." + key + ": wrong value type");
    }
}

std::string toggles_to_string(const LossToggles& t) {
    if (t.left && t.right && t.patient) return "full";
    if (t.left && t.right && !t.patient) return "monocular";
    if (!t.left && !t.right && t.patient) return "patient";
    if (t.left && !t.right && !t.patient) return "left";
    if (!t.left && t.right && !t.patient) return "right";
    throw ConfigError("train.loss: unsupported toggle combination");
}

LossToggles toggles_from_string(const std::string& s) {
    if (s == "full") return LossToggles::full();
    if (s == "monocular") return LossToggles::monocular_only();
    if (s == "patient") return LossToggles::patient_only();
    if (s == "left") return {true, false, false};
    if (s == "right") return {false, true, false};
    throw ConfigError("train.loss: unknown value '" + s +
                      "' (expected full|monocular|patient|left|right)");
}

}  // namespace

void check_keys(const json& obj, const char* section,
                std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) {
        throw ConfigError(std::string(section) + ": expected an object");
    }
    for (const auto& [key, value] : obj.items()) {
        bool known = false;
        for (const char* a : allowed) known = known || key == a;
        if (!known) {
            throw ConfigError(std::string(section) + ": unknown key '" + key + "'");
        }
    }
}

json to_json(const ImageEncoderConfig& cfg) {
    json j;
    j["image_size"] = cfg.image_size;
    j["patch_size"] = cfg.patch_size;
    j["d_model"] = cfg.d_model;
    j["n_blocks"] = cfg.n_blocks;
    j["n_heads"] = cfg.n_heads;
    j["mlp_ratio"] = cfg.mlp_ratio;
    j["projection"] = cfg.use_projection;
    return j;
}

json to_json(const TextEncoderConfig& cfg) {
    json j;
    j["vocab_size"] = cfg.vocab_size;
    j["max_len"] = cfg.max_len;
    j["d_model"] = cfg.d_model;
    j["n_blocks"] = cfg.n_blocks;
    j["n_heads"] = cfg.n_heads;
    j["mlp_ratio"] = cfg.mlp_ratio;
    return j;
}

json to_json(const ModelConfig& cfg) {
    json j;
    j["image"] = to_json(cfg.image);
    j["text"] = to_json(cfg.text);
    j["logit_scale_init"] = cfg.logit_scale_init;
    j["fixed_scale"] = cfg.fixed_scale ? json(*cfg.fixed_scale) : json(nullptr);
    return j;
}

ModelConfig model_from_json(const json& j) {
    check_keys(j, "model", {"image", "text", "logit_scale_init", "fixed_scale"});
    ModelConfig cfg;
    if (j.contains("image")) {
        const json& ji = j.at("image");
        check_keys(ji, "model.image",
                   {"image_size", "patch_size", "d_model", "n_blocks", "n_heads", "mlp_ratio",
                    "projection"});
        cfg.image.image_size = get_or<Index>(ji, "model.image", "image_size",
                                             cfg.image.image_size);
        cfg.image.patch_size = get_or<Index>(ji, "model.image", "patch_size",
                                             cfg.image.patch_size);
        cfg.image.d_model = get_or<Index>(ji, "model.image", "d_model", cfg.image.d_model);
        cfg.image.n_blocks = get_or<int>(ji, "model.image", "n_blocks", cfg.image.n_blocks);
        cfg.image.n_heads = get_or<int>(ji, "model.image", "n_heads", cfg.image.n_heads);
        cfg.image.mlp_ratio = get_or<double>(ji, "model.image", "mlp_ratio",
                                             cfg.image.mlp_ratio);
        cfg.image.use_projection = get_or<bool>(ji, "model.image", "projection",
                                                cfg.image.use_projection);
    }
    if (j.contains("text")) {
        const json& jt = j.at("text");
        check_keys(jt, "model.text",
                   {"vocab_size", "max_len", "d_model", "n_blocks", "n_heads", "mlp_ratio"});
        cfg.text.vocab_size = get_or<int>(jt, "model.text", "vocab_size", cfg.text.vocab_size);
        cfg.text.max_len = get_or<Index>(jt, "model.text", "max_len", cfg.text.max_len);
        cfg.text.d_model = get_or<Index>(jt, "model.text", "d_model", cfg.text.d_model);
        cfg.text.n_blocks = get_or<int>(jt, "model.text", "n_blocks", cfg.text.n_blocks);
        cfg.text.n_heads = get_or<int>(jt, "model.text", "n_heads", cfg.text.n_heads);
        cfg.text.mlp_ratio = get_or<double>(jt, "model.text", "mlp_ratio", cfg.text.mlp_ratio);
    }
    cfg.logit_scale_init = get_or<double>(j, "model", "logit_scale_init", cfg.logit_scale_init);
    if (j.contains("fixed_scale") && !j.at("fixed_scale").is_null()) {
        cfg.fixed_scale = get_or<double>(j, "model", "fixed_scale", 1.0);
    }
    return cfg;
}

json to_json(const data::AugmentConfig& cfg) {
    json j;
    j["crop_lo"] = cfg.crop_lo;
    j["crop_hi"] = cfg.crop_hi;
    j["out_size"] = cfg.out_size;
    j["hflip_prob"] = cfg.hflip_prob;
    j["brightness"] = cfg.brightness;
    j["contrast"] = cfg.contrast;
    j["saturation"] = cfg.saturation;
    j["norm_mean"] = cfg.norm_mean;
    j["norm_std"] = cfg.norm_std;
    return j;
}

data::AugmentConfig augment_from_json(const json& j) {
    check_keys(j, "train.augment",
               {"crop_lo", "crop_hi", "out_size", "hflip_prob", "brightness", "contrast",
                "saturation", "norm_mean", "norm_std"});
    data::AugmentConfig cfg;
    cfg.crop_lo = get_or<double>(j, "train.augment", "crop_lo", cfg.crop_lo);
    cfg.crop_hi = get_or<double>(j, "train.augment", "crop_hi", cfg.crop_hi);
    cfg.out_size = get_or<Index>(j, "train.augment", "out_size", cfg.out_size);
    cfg.hflip_prob = get_or<double>(j, "train.augment", "hflip_prob", cfg.hflip_prob);
    cfg.brightness = get_or<double>(j, "train.augment", "brightness", cfg.brightness);
    cfg.contrast = get_or<double>(j, "train.augment", "contrast", cfg.contrast);
    cfg.saturation = get_or<double>(j, "train.augment", "saturation", cfg.saturation);
    cfg.norm_mean = get_or<std::array<double, 3>>(j, "train.augment", "norm_mean",
                                                  cfg.norm_mean);
    cfg.norm_std = get_or<std::array<double, 3>>(j, "train.augment", "norm_std", cfg.norm_std);
    return cfg;
}

json to_json(const data::SyntheticCohortConfig& cfg) {
    json j;
    j["n_patients"] = cfg.n_patients;
    j["image_size"] = cfg.image_size;
    j["n_conditions"] = cfg.n_conditions;
    j["condition_prior"] = cfg.condition_prior;
    j["noise_std"] = cfg.noise_std;
    j["template_mix"] = cfg.template_mix;
    return j;
}

data::SyntheticCohortConfig cohort_from_json(const json& j) {
    check_keys(j, "data",
               {"n_patients", "image_size", "n_conditions", "condition_prior", "noise_std",
                "template_mix"});
    data::SyntheticCohortConfig cfg;
    cfg.n_patients = get_or<int>(j, "data", "n_patients", cfg.n_patients);
    cfg.image_size = get_or<Index>(j, "data", "image_size", cfg.image_size);
    cfg.n_conditions = get_or<int>(j, "data", "n_conditions", cfg.n_conditions);
    cfg.condition_prior = get_or<double>(j, "data", "condition_prior", cfg.condition_prior);
    cfg.noise_std = get_or<double>(j, "data", "noise_std", cfg.noise_std);
    cfg.template_mix = get_or<bool>(j, "data", "template_mix", cfg.template_mix);
    return cfg;
}

json to_json(const train::TrainConfig& cfg) {
    json j;
    j["batch_size"] = cfg.batch_size;
    j["epochs"] = cfg.epochs;
    j["peak_lr"] = cfg.peak_lr;
    j["warmup_steps"] = cfg.warmup_steps;
    j["weight_decay"] = cfg.weight_decay;
    j["beta1"] = cfg.beta1;
    j["beta2"] = cfg.beta2;
    j["eps"] = cfg.eps;
    j["loss"] = toggles_to_string(cfg.toggles);
    j["cosine_decay"] = cfg.cosine_decay;
    j["save_moments"] = cfg.save_moments;
    j["augment"] = to_json(cfg.augment);
    return j;
}

train::TrainConfig train_from_json(const json& j) {
    check_keys(j, "train",
               {"batch_size", "epochs", "peak_lr", "warmup_steps", "weight_decay", "beta1",
                "beta2", "eps", "loss", "cosine_decay", "save_moments", "augment"});
    train::TrainConfig cfg;
    cfg.batch_size = get_or<int>(j, "train", "batch_size", cfg.batch_size);
    cfg.epochs = get_or<int>(j, "train", "epochs", cfg.epochs);
    cfg.peak_lr = get_or<double>(j, "train", "peak_lr", cfg.peak_lr);
    cfg.warmup_steps = get_or<int>(j, "train", "warmup_steps", cfg.warmup_steps);
    cfg.weight_decay = get_or<double>(j, "train", "weight_decay", cfg.weight_decay);
    cfg.beta1 = get_or<double>(j, "train", "beta1", cfg.beta1);
    cfg.beta2 = get_or<double>(j, "train", "beta2", cfg.beta2);
    cfg.eps = get_or<double>(j, "train", "eps", cfg.eps);
    cfg.toggles = toggles_from_string(get_or<std::string>(j, "train", "loss", "full"));
    cfg.cosine_decay = get_or<bool>(j, "train", "cosine_decay", cfg.cosine_decay);
    cfg.save_moments = get_or<bool>(j, "train", "save_moments", cfg.save_moments);
    if (j.contains("augment")) cfg.augment = augment_from_json(j.at("augment"));
    return cfg;
}

namespace {

json eval_to_json(const RunConfig& cfg) {
    json j;
    j["epochs"] = cfg.eval.epochs;
    j["batch_size"] = cfg.eval.batch_size;
    j["probe_lr"] = cfg.eval.probe_lr;
    j["finetune_lr"] = cfg.eval.finetune_lr;
    j["weight_decay"] = cfg.eval.weight_decay;
    j["ratios"] = cfg.eval_ratios;
    return j;
}

}  // namespace

void RunConfig::propagate_seed() {
    train.seed = seed;
    data.seed = seed;
}

json to_json(const RunConfig& cfg) {
    json j;
    j["model"] = to_json(cfg.model);
    j["train"] = to_json(cfg.train);
    j["data"] = to_json(cfg.data);
    j["eval"] = eval_to_json(cfg);
    j["seed"] = cfg.seed;
    return j;
}

RunConfig run_config_from_json(const json& j) {
    check_keys(j, "config", {"model", "train", "data", "eval", "seed"});
    RunConfig cfg;
    if (j.contains("model")) cfg.model = model_from_json(j.at("model"));
    if (j.contains("train")) cfg.train = train_from_json(j.at("train"));
    if (j.contains("data")) cfg.data = cohort_from_json(j.at("data"));
    if (j.contains("eval")) {
        const json& je = j.at("eval");
        check_keys(je, "eval",
                   {"epochs", "batch_size", "probe_lr", "finetune_lr", "weight_decay",
                    "ratios"});
        cfg.eval.epochs = get_or<int>(je, "eval", "epochs", cfg.eval.epochs);
        cfg.eval.batch_size = get_or<int>(je, "eval", "batch_size", cfg.eval.batch_size);
        cfg.eval.probe_lr = get_or<double>(je, "eval", "probe_lr", cfg.eval.probe_lr);
        cfg.eval.finetune_lr = get_or<double>(je, "eval", "finetune_lr", cfg.eval.finetune_lr);
        cfg.eval.weight_decay = get_or<double>(je, "eval", "weight_decay",
                                               cfg.eval.weight_decay);
        cfg.eval_ratios = get_or<std::array<double, 3>>(je, "eval", "ratios", cfg.eval_ratios);
    }
    cfg.seed = get_or<std::uint64_t>(j, "config", "seed", cfg.seed);
    cfg.propagate_seed();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config: " + path.string());
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError("config " + path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace retclip::config
