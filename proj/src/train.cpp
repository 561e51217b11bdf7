#include "retclip/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "retclip/serde.hpp"

namespace retclip::train {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::mt19937_64 stream_for(std::uint64_t seed, std::uint64_t domain, std::uint64_t index) {
    return std::mt19937_64(splitmix64(seed ^ splitmix64(domain ^ splitmix64(index))));
}

constexpr std::uint64_t kShuffleDomain = 0x51;
constexpr std::uint64_t kAugmentDomain = 0xA6;

}  // namespace

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
    if (epochs < 0) throw ConfigError("train: epochs must be non-negative");
    if (!(peak_lr > 0)) throw ConfigError("train: peak_lr must be positive");
    if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be non-negative");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be non-negative");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
        throw ConfigError("train: betas must lie in [0, 1)");
    }
    if (!(eps > 0)) throw ConfigError("train: eps must be positive");
    toggles.validate();
    augment.validate();
}

double lr_at_step(long step, const TrainConfig& cfg, long total_steps) {
    if (step < 0) throw ContractError("lr_at_step: step must be non-negative");
    if (step < cfg.warmup_steps) {
        return cfg.peak_lr * static_cast<double>(step) /
               static_cast<double>(cfg.warmup_steps);
    }
    if (cfg.cosine_decay && total_steps > cfg.warmup_steps) {
        const double t = static_cast<double>(step - cfg.warmup_steps) /
                         static_cast<double>(total_steps - cfg.warmup_steps);
        return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::acos(-1.0) * std::min(t, 1.0)));
    }
    return cfg.peak_lr;
}

void adamw_step(nn::ParamStore& params, AdamState& state, double lr, const TrainConfig& cfg) {
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (const auto& [name, p] : params) {
        Matrix g = p.grad();
        if (g.hasNaN()) {
            throw NumericError("adamw_step: NaN gradient in parameter " + name);
        }
        auto [it, fresh] = state.moments.try_emplace(
            name, std::make_pair(Matrix::Zero(p.rows(), p.cols()),
                                 Matrix::Zero(p.rows(), p.cols())));
        Matrix& m = it->second.first;
        Matrix& v = it->second.second;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        Matrix& value = const_cast<Tensor&>(p).mutable_value();
        // decoupled decay before the Adam delta; logit_scale is exempt
        if (cfg.weight_decay > 0 && name != "logit_scale") {
            value *= (1.0 - lr * cfg.weight_decay);
        }
        value -= lr * ((m / bc1).array() / ((v / bc2).array().sqrt() + cfg.eps)).matrix();
    }
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const StepLog> log) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write metrics log: " + path.string());
    }
    out << "step,lr,loss_left,loss_right,loss_patient,loss_total\n";
    char buf[192];
    for (const StepLog& s : log) {
        std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g,%.17g\n", s.step, s.lr,
                      s.loss_left, s.loss_right, s.loss_patient, s.loss_total);
        out << buf;
    }
}

// ---- checkpoint ---------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'R', 'C', 'L', 'P'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::string& in, std::size_t& at) {
    if (at + 4 > in.size()) throw FormatError("checkpoint: truncated while reading u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + static_cast<
                 std::size_t>(i)]))
             << (8 * i);
    }
    at += 4;
    return v;
}

std::uint64_t get_u64(const std::string& in, std::size_t& at) {
    if (at + 8 > in.size()) throw FormatError("checkpoint: truncated while reading u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + static_cast<
                 std::size_t>(i)]))
             << (8 * i);
    }
    at += 8;
    return v;
}

std::vector<float> to_f32(const Matrix& m) {
    std::vector<float> out(static_cast<std::size_t>(m.size()));
    std::size_t k = 0;
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) out[k++] = static_cast<float>(m(i, j));
    }
    return out;
}

Index shape_elems(const Shape& s) {
    Index n = 1;
    for (Index d : s) n *= d;
    return n;
}

}  // namespace

Checkpoint make_checkpoint(const RetClipModel& model, const TrainConfig& tcfg,
                           const AdamState* opt) {
    Checkpoint ckpt;
    ckpt.model = model.config();
    ckpt.train = tcfg;
    for (const auto& [name, t] : model.params()) {
        ckpt.tensors.emplace(name, std::make_pair(t.shape(), to_f32(t.value())));
    }
    if (opt != nullptr && tcfg.save_moments) {
        ckpt.optimizer_step = opt->step;
        for (const auto& [name, mv] : opt->moments) {
            Shape s{mv.first.rows(), mv.first.cols()};
            ckpt.tensors.emplace("opt.m." + name, std::make_pair(s, to_f32(mv.first)));
            ckpt.tensors.emplace("opt.v." + name, std::make_pair(s, to_f32(mv.second)));
        }
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    config::json cfg;
    cfg["model"] = config::to_json(ckpt.model);
    cfg["train"] = config::to_json(ckpt.train);
    cfg["optimizer_step"] =
        ckpt.optimizer_step ? config::json(*ckpt.optimizer_step) : config::json(nullptr);
    const std::string cfg_bytes = cfg.dump();

    config::json manifest = config::json::array();
    std::string payload;
    for (const auto& [name, entry] : ckpt.tensors) {
        const auto& [shape, values] = entry;
        if (shape_elems(shape) != static_cast<Index>(values.size())) {
            throw FormatError("checkpoint: tensor " + name + " shape/payload mismatch");
        }
        config::json e;
        e["name"] = name;
        e["dtype"] = "f32";
        e["shape"] = shape;
        e["offset"] = payload.size();
        e["nbytes"] = values.size() * 4;
        manifest.push_back(std::move(e));
        for (float f : values) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(payload, bits);
        }
    }
    const std::string manifest_bytes = manifest.dump();

    std::string out;
    out.append(kMagic, 4);
    put_u32(out, Checkpoint::kVersion);
    put_u64(out, cfg_bytes.size());
    out += cfg_bytes;
    put_u64(out, manifest_bytes.size());
    out += manifest_bytes;
    put_u64(out, payload.size());
    out += payload;

    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot write checkpoint: " + path.string());
    }
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open checkpoint: " + path.string());
    }
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError("checkpoint: bad magic in " + path.string());
    }
    std::size_t at = 4;
    const std::uint32_t version = get_u32(bytes, at);
    if (version != Checkpoint::kVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) +
                          " (expected " + std::to_string(Checkpoint::kVersion) + ")");
    }
    const std::uint64_t cfg_len = get_u64(bytes, at);
    if (at + cfg_len > bytes.size()) throw FormatError("checkpoint: truncated config block");
    config::json cfg = config::json::parse(bytes.substr(at, cfg_len));
    at += cfg_len;
    const std::uint64_t man_len = get_u64(bytes, at);
    if (at + man_len > bytes.size()) throw FormatError("checkpoint: truncated manifest block");
    config::json manifest = config::json::parse(bytes.substr(at, man_len));
    at += man_len;
    const std::uint64_t payload_len = get_u64(bytes, at);
    if (at + payload_len > bytes.size()) throw FormatError("checkpoint: truncated payload");
    const char* payload = bytes.data() + at;

    Checkpoint ckpt;
    config::check_keys(cfg, "checkpoint", {"model", "train", "optimizer_step"});
    ckpt.model = config::model_from_json(cfg.at("model"));
    ckpt.train = config::train_from_json(cfg.at("train"));
    if (!cfg.at("optimizer_step").is_null()) {
        ckpt.optimizer_step = cfg.at("optimizer_step").get<long>();
    }

    std::uint64_t prev_end = 0;
    for (const auto& e : manifest) {
        config::check_keys(e, "checkpoint manifest",
                           {"name", "dtype", "shape", "offset", "nbytes"});
        const std::string name = e.at("name").get<std::string>();
        if (e.at("dtype").get<std::string>() != "f32") {
            throw FormatError("checkpoint: unsupported dtype for " + name);
        }
        Shape shape = e.at("shape").get<Shape>();
        const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
        const std::uint64_t nbytes = e.at("nbytes").get<std::uint64_t>();
        if (offset < prev_end) {
            throw FormatError("checkpoint: overlapping manifest entries at " + name);
        }
        if (offset + nbytes > payload_len) {
            throw FormatError("checkpoint: manifest entry " + name + " exceeds payload");
        }
        if (nbytes != static_cast<std::uint64_t>(shape_elems(shape)) * 4) {
            throw FormatError("checkpoint: manifest entry " + name + " size mismatch");
        }
        prev_end = offset + nbytes;
        std::vector<float> values(nbytes / 4);
        for (std::size_t i = 0; i < values.size(); ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) {
                bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(
                            payload[offset + i * 4 + static_cast<std::size_t>(b)]))
                        << (8 * b);
            }
            float fv;
            std::memcpy(&fv, &bits, 4);
            values[i] = fv;
        }
        ckpt.tensors.emplace(name, std::make_pair(std::move(shape), std::move(values)));
    }
    return ckpt;
}

RetClipModel model_from_checkpoint(const Checkpoint& ckpt) {
    nn::ParamStore ps;
    for (const auto& [name, entry] : ckpt.tensors) {
        if (name.starts_with("opt.")) continue;
        const auto& [shape, values] = entry;
        if (shape.empty()) {
            ps.add_scalar(name, static_cast<double>(values.at(0)));
            continue;
        }
        const Index rows = shape.size() == 1 ? 1 : shape[0];
        const Index cols = shape.size() == 1 ? shape[0] : shape[1];
        Matrix m(rows, cols);
        std::size_t k = 0;
        for (Index i = 0; i < rows; ++i) {
            for (Index j = 0; j < cols; ++j) m(i, j) = static_cast<double>(values[k++]);
        }
        if (shape.size() == 1) {
            ps.add_row(name, std::move(m));
        } else {
            ps.add(name, std::move(m));
        }
    }
    return RetClipModel(ckpt.model, std::move(ps));
}

// ---- pre-training loop ------------------------------------------------

PretrainResult pretrain(std::span<const data::PatientTriplet> cohort, const ModelConfig& mcfg,
                        const TrainConfig& tcfg_in,
                        const std::filesystem::path& checkpoint_path,
                        const std::filesystem::path& metrics_path) {
    if (cohort.empty()) {
        throw ContractError("pretrain: cohort must be non-empty");
    }
    mcfg.validate();
    TrainConfig tcfg = tcfg_in;
    tcfg.augment.out_size = mcfg.image.image_size;  // the model input size wins
    tcfg.validate();

    RetClipModel model(mcfg, tcfg.seed);
    AdamState opt;
    std::vector<StepLog> log;

    const long n = static_cast<long>(cohort.size());
    const long batches_per_epoch = (n + tcfg.batch_size - 1) / tcfg.batch_size;
    const long total_steps = static_cast<long>(tcfg.epochs) * batches_per_epoch;

    // parameter state after the last step whose loss was finite
    std::map<std::string, Matrix> last_good;
    auto snapshot = [&]() {
        for (const auto& [name, t] : model.params()) last_good[name] = t.value();
    };
    snapshot();
    auto write_last_good = [&]() {
        if (checkpoint_path.empty()) return;
        RetClipModel good(mcfg, tcfg.seed);
        for (auto& [name, value] : last_good) {
            const_cast<Tensor&>(good.params().at(name)).mutable_value() = value;
        }
        save_checkpoint(make_checkpoint(good, tcfg), checkpoint_path);
    };

    std::vector<std::size_t> order(cohort.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    long step = 0;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        auto shuffle_rng =
            stream_for(tcfg.seed, kShuffleDomain, static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (long b = 0; b < batches_per_epoch; ++b, ++step) {
            const double lr = lr_at_step(step, tcfg, total_steps);
            auto aug_rng =
                stream_for(tcfg.seed, kAugmentDomain, static_cast<std::uint64_t>(step));
            std::vector<data::PatientTriplet> batch;
            const long lo = b * tcfg.batch_size;
            const long hi = std::min<long>(lo + tcfg.batch_size, n);
            batch.reserve(static_cast<std::size_t>(hi - lo));
            for (long i = lo; i < hi; ++i) {
                data::PatientTriplet t = cohort[order[static_cast<std::size_t>(i)]];
                t.left_image = data::augment(t.left_image, tcfg.augment, aug_rng);
                t.right_image = data::augment(t.right_image, tcfg.augment, aug_rng);
                batch.push_back(std::move(t));
            }

            LossBreakdown values;
            try {
                Tape tape;
                auto [feats, loss] = forward_batch(model, batch, tcfg.toggles);
                values = loss.values();
                if (!std::isfinite(values.total)) {
                    throw NumericError("pretrain: non-finite loss at step " +
                                       std::to_string(step));
                }
                snapshot();  // these parameters produced a finite loss
                tape.backward(loss.total);
                adamw_step(model.params(), opt, lr, tcfg);
            } catch (const NumericError&) {
                write_last_good();
                throw;
            }
            model.params().clear_grads();
            log.push_back(
                StepLog{step, lr, values.left, values.right, values.patient, values.total});
        }
    }

    PretrainResult result;
    result.checkpoint = make_checkpoint(model, tcfg, &opt);
    result.log = std::move(log);
    if (!checkpoint_path.empty()) save_checkpoint(result.checkpoint, checkpoint_path);
    if (!metrics_path.empty()) write_metrics_csv(metrics_path, result.log);
    return result;
}

}  // namespace retclip::train
