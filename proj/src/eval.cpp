#include "retclip/eval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace retclip::eval {

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

constexpr std::uint64_t kStratumDomain = 0x57;
constexpr std::uint64_t kBucketDomain = 0xB0;
constexpr std::uint64_t kHeadDomain = 0xEA;
constexpr std::uint64_t kEpochDomain = 0xE7;

}  // namespace

void LabeledImageDataset::validate() const {
    if (n_classes < 1) {
        throw ConfigError("dataset: n_classes must be positive");
    }
    for (const LabeledImage& item : items) {
        if (kind == TaskKind::multiclass && item.labels.size() != 1) {
            throw ConfigError("dataset: multiclass item " + item.path +
                              " must carry exactly one label");
        }
        for (int l : item.labels) {
            if (l < 0 || l >= n_classes) {
                throw ConfigError("dataset: label " + std::to_string(l) + " of " + item.path +
                                  " outside [0, " + std::to_string(n_classes) + ")");
            }
        }
    }
}

LabeledImageDataset load_labeled_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open dataset manifest: " + path.string());
    }
    std::string header;
    if (!std::getline(in, header)) {
        throw ParseError("dataset manifest " + path.string() + ": missing header line");
    }
    LabeledImageDataset ds;
    {
        std::istringstream hs(header);
        std::string task_field, classes_field;
        hs >> task_field >> classes_field;
        const std::string task_prefix = "#task=";
        const std::string classes_prefix = "n_classes=";
        if (!task_field.starts_with(task_prefix) ||
            !classes_field.starts_with(classes_prefix)) {
            throw ParseError("dataset manifest line 1: expected '#task=<kind> n_classes=<K>'");
        }
        const std::string kind = task_field.substr(task_prefix.size());
        if (kind == "multiclass") {
            ds.kind = TaskKind::multiclass;
        } else if (kind == "multilabel") {
            ds.kind = TaskKind::multilabel;
        } else {
            throw ParseError("dataset manifest line 1: unknown task kind '" + kind + "'");
        }
        try {
            ds.n_classes = std::stoi(classes_field.substr(classes_prefix.size()));
        } catch (const std::exception&) {
            throw ParseError("dataset manifest line 1: bad n_classes");
        }
    }
    const std::filesystem::path base = path.parent_path();
    std::string line;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
            throw ParseError("dataset manifest line " + std::to_string(line_no) +
                             ": expected 'image_path<TAB>label_spec'");
        }
        LabeledImage item;
        item.path = line.substr(0, tab);
        const std::string spec = line.substr(tab + 1);
        try {
            if (ds.kind == TaskKind::multiclass) {
                item.labels.push_back(std::stoi(spec));
            } else if (!spec.empty()) {
                std::istringstream ls(spec);
                std::string tok;
                while (std::getline(ls, tok, ',')) item.labels.push_back(std::stoi(tok));
            }
        } catch (const std::exception&) {
            throw ParseError("dataset manifest line " + std::to_string(line_no) +
                             ": bad label spec '" + spec + "'");
        }
        const std::filesystem::path img = base / item.path;
        if (!std::filesystem::exists(img)) {
            throw IoError("dataset manifest line " + std::to_string(line_no) +
                          ": missing image " + img.string());
        }
        item.image = read_png(img);
        ds.items.push_back(std::move(item));
    }
    ds.validate();
    return ds;
}

void SplitSpec::validate() const {
    double sum = 0.0;
    for (double r : ratios) {
        if (r < 0.0) throw ConfigError("split: ratios must be non-negative");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw ConfigError("split: ratios must sum to 1");
    }
}

Split stratified_split(const LabeledImageDataset& ds, const SplitSpec& spec) {
    spec.validate();
    ds.validate();
    // every class must be populated
    std::vector<int> class_count(static_cast<std::size_t>(ds.n_classes), 0);
    for (const LabeledImage& item : ds.items) {
        for (int l : item.labels) ++class_count[static_cast<std::size_t>(l)];
    }
    for (int c = 0; c < ds.n_classes; ++c) {
        if (class_count[static_cast<std::size_t>(c)] == 0) {
            throw SplitError("stratified_split: class " + std::to_string(c) +
                             " has no samples");
        }
    }
    // strata: class id (multiclass) or full label-set signature (multilabel)
    std::map<std::string, std::vector<int>> strata;
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
        std::string key;
        if (ds.kind == TaskKind::multiclass) {
            key = std::to_string(ds.items[i].labels[0]);
        } else {
            std::vector<int> sorted = ds.items[i].labels;
            std::sort(sorted.begin(), sorted.end());
            for (int l : sorted) key += std::to_string(l) + ",";
        }
        strata[key].push_back(static_cast<int>(i));
    }

    Split split;
    std::uint64_t stratum_no = 0;
    for (auto& [key, members] : strata) {
        auto rng = stream_for(spec.seed, kStratumDomain, stratum_no++);
        std::shuffle(members.begin(), members.end(), rng);
        const std::size_t n = members.size();
        std::array<std::size_t, 3> quota{};
        std::array<double, 3> frac{};
        std::size_t assigned = 0;
        for (int b = 0; b < 3; ++b) {
            const double exact = static_cast<double>(n) * spec.ratios[static_cast<
                                     std::size_t>(b)];
            quota[static_cast<std::size_t>(b)] = static_cast<std::size_t>(exact);
            frac[static_cast<std::size_t>(b)] = exact - std::floor(exact);
            assigned += quota[static_cast<std::size_t>(b)];
        }
        // largest remainder; ties resolved toward the earlier bucket
        std::array<int, 3> bucket_order{0, 1, 2};
        std::stable_sort(bucket_order.begin(), bucket_order.end(), [&frac](int a, int b) {
            return frac[static_cast<std::size_t>(a)] > frac[static_cast<std::size_t>(b)];
        });
        for (std::size_t leftover = n - assigned, k = 0; leftover > 0; --leftover, ++k) {
            ++quota[static_cast<std::size_t>(bucket_order[k % 3])];
        }
        std::size_t at = 0;
        for (int b = 0; b < 3; ++b) {
            auto& bucket = b == 0 ? split.train : (b == 1 ? split.val : split.test);
            for (std::size_t k = 0; k < quota[static_cast<std::size_t>(b)]; ++k) {
                bucket.push_back(members[at++]);
            }
        }
    }
    for (int b = 0; b < 3; ++b) {
        auto& bucket = b == 0 ? split.train : (b == 1 ? split.val : split.test);
        auto rng = stream_for(spec.seed, kBucketDomain, static_cast<std::uint64_t>(b));
        std::shuffle(bucket.begin(), bucket.end(), rng);
    }
    return split;
}

// ---- metrics -------------------------------------------------------------

double auroc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw ContractError("auroc: scores and labels differ in length");
    }
    const std::size_t n = scores.size();
    std::size_t pos = 0;
    for (int l : labels) pos += l != 0;
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) {
        throw MetricError("auroc: undefined without both a positive and a negative");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // average ranks over tie groups
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // ranks are 1-based
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double rank_sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        if (labels[k] != 0) rank_sum += rank[k];
    }
    const double p = static_cast<double>(pos);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

double aupr(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw ContractError("aupr: scores and labels differ in length");
    }
    const std::size_t n = scores.size();
    std::size_t pos = 0;
    for (int l : labels) pos += l != 0;
    if (pos == 0) {
        throw MetricError("aupr: undefined without a positive");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double sum = 0.0;
    std::size_t tp = 0;
    for (std::size_t r = 0; r < n; ++r) {
        if (labels[order[r]] != 0) {
            ++tp;
            sum += static_cast<double>(tp) / static_cast<double>(r + 1);
        }
    }
    return sum / static_cast<double>(pos);
}

MacroSummary aggregate_metrics(const std::vector<std::optional<double>>& per_class) {
    MacroSummary out;
    double sum = 0.0;
    int defined = 0;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        if (per_class[c]) {
            sum += *per_class[c];
            ++defined;
        } else {
            out.excluded.push_back(static_cast<int>(c));
        }
    }
    if (defined == 0) {
        throw MetricError("aggregate_metrics: no class has a defined metric");
    }
    out.value = sum / static_cast<double>(defined);
    return out;
}

void EvalConfig::validate() const {
    if (epochs < 1 || batch_size < 1) {
        throw ConfigError("eval: epochs and batch_size must be positive");
    }
    if (!(probe_lr > 0) || !(finetune_lr > 0) || weight_decay < 0) {
        throw ConfigError("eval: bad optimizer settings");
    }
}

nlohmann::json EvalResult::to_json() const {
    nlohmann::json per_class = nlohmann::json::array();
    for (std::size_t c = 0; c < per_class_auroc.size(); ++c) {
        nlohmann::json e;
        e["class"] = c;
        e["auroc"] = per_class_auroc[c] ? nlohmann::json(*per_class_auroc[c])
                                        : nlohmann::json(nullptr);
        e["aupr"] = per_class_aupr[c] ? nlohmann::json(*per_class_aupr[c])
                                      : nlohmann::json(nullptr);
        per_class.push_back(std::move(e));
    }
    nlohmann::json j;
    j["dataset"] = dataset;
    j["mode"] = mode;
    j["seed"] = seed;
    j["auroc"] = auroc;
    j["aupr"] = aupr;
    j["per_class"] = std::move(per_class);
    j["excluded_classes"] = excluded_classes;
    j["epochs"] = epochs;
    j["best_epoch"] = best_epoch;
    return j;
}

// ---- adaptation ----------------------------------------------------------

namespace {

struct ScoredMetrics {
    std::vector<std::optional<double>> auroc_per_class;
    std::vector<std::optional<double>> aupr_per_class;
};

// One-vs-rest per-class metrics over a score matrix [n x K].
ScoredMetrics per_class_metrics(const Matrix& scores, const LabeledImageDataset& ds,
                                std::span<const int> indices) {
    ScoredMetrics out;
    for (int c = 0; c < ds.n_classes; ++c) {
        std::vector<double> s;
        std::vector<int> y;
        s.reserve(indices.size());
        y.reserve(indices.size());
        for (std::size_t k = 0; k < indices.size(); ++k) {
            const LabeledImage& item = ds.items[static_cast<std::size_t>(indices[k])];
            const bool has = std::count(item.labels.begin(), item.labels.end(), c) > 0;
            s.push_back(scores(static_cast<Index>(k), c));
            y.push_back(has ? 1 : 0);
        }
        try {
            out.auroc_per_class.emplace_back(auroc(s, y));
        } catch (const MetricError&) {
            out.auroc_per_class.emplace_back(std::nullopt);
        }
        try {
            out.aupr_per_class.emplace_back(aupr(s, y));
        } catch (const MetricError&) {
            out.aupr_per_class.emplace_back(std::nullopt);
        }
    }
    return out;
}

Matrix row_softmax_probs(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp();
        out.row(i) = e / e.sum();
    }
    return out;
}

Matrix sigmoid_probs(const Matrix& logits) {
    return (1.0 / (1.0 + (-logits.array()).exp())).matrix();
}

std::vector<std::uint8_t> serialize_encoder(const nn::ParamStore& ps) {
    std::vector<std::uint8_t> bytes;
    for (const auto& [name, t] : ps) {
        if (!name.starts_with("img_enc.")) continue;
        const Matrix& m = t.value();
        const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
        bytes.insert(bytes.end(), p, p + m.size() * static_cast<Index>(sizeof(double)));
    }
    return bytes;
}

struct Head {
    nn::ParamStore params;
};

Head make_head(Index d, int n_classes, std::uint64_t seed) {
    Head head;
    nn::Initializer init(splitmix64(seed ^ kHeadDomain));
    nn::add_linear(head.params, "head", d, n_classes, init);
    return head;
}

Tensor head_logits(const Head& head, const Tensor& features) {
    return nn::linear(head.params, "head", features);
}

Tensor adaptation_loss(const LabeledImageDataset& ds, const Tensor& logits,
                       std::span<const int> indices, std::span<const int> batch_rows) {
    if (ds.kind == TaskKind::multiclass) {
        std::vector<int> targets;
        targets.reserve(batch_rows.size());
        for (int r : batch_rows) {
            targets.push_back(ds.items[static_cast<std::size_t>(indices[static_cast<
                                 std::size_t>(r)])].labels[0]);
        }
        return softmax_cross_entropy(logits, targets);
    }
    Matrix targets = Matrix::Zero(static_cast<Index>(batch_rows.size()), ds.n_classes);
    for (std::size_t k = 0; k < batch_rows.size(); ++k) {
        const auto& labels = ds.items[static_cast<std::size_t>(
                                          indices[static_cast<std::size_t>(batch_rows[k])])]
                                 .labels;
        for (int l : labels) targets(static_cast<Index>(k), l) = 1.0;
    }
    return sigmoid_bce(logits, targets);
}

train::TrainConfig optimizer_settings(const EvalConfig& cfg) {
    train::TrainConfig opt;
    opt.weight_decay = cfg.weight_decay;
    return opt;  // betas/eps keep their AdamW defaults
}

EvalResult run_adaptation(const train::Checkpoint& ckpt, const LabeledImageDataset& ds,
                          const SplitSpec& spec, const EvalConfig& cfg,
                          const std::string& dataset_name, bool freeze_encoder) {
    cfg.validate();
    ds.validate();
    RetClipModel model = train::model_from_checkpoint(ckpt);
    const Index d = model.config().d_model();
    const Index img_size = model.config().image.image_size;
    const auto& mean = ckpt.train.augment.norm_mean;
    const auto& std_dev = ckpt.train.augment.norm_std;

    const std::vector<std::uint8_t> encoder_before = serialize_encoder(model.params());

    // deterministic eval-time preprocessing
    std::vector<Image> prepared;
    prepared.reserve(ds.items.size());
    for (const LabeledImage& item : ds.items) {
        prepared.push_back(data::prepare_eval_image(item.image, img_size, mean, std_dev));
    }

    Split split = stratified_split(ds, spec);
    Head head = make_head(d, ds.n_classes, spec.seed);
    train::AdamState head_opt, encoder_opt;
    const train::TrainConfig opt_cfg = optimizer_settings(cfg);
    const double lr = freeze_encoder ? cfg.probe_lr : cfg.finetune_lr;

    // frozen path: encode once, reuse across epochs
    auto encode_all = [&](std::span<const int> indices) {
        std::vector<Tensor> rows;
        rows.reserve(indices.size());
        for (int i : indices) {
            rows.push_back(model.encode_image(prepared[static_cast<std::size_t>(i)]));
        }
        return concat_rows(rows);
    };
    Matrix frozen_train, frozen_val, frozen_test;
    if (freeze_encoder) {
        auto encode_bucket = [&](const std::vector<int>& bucket) {
            return bucket.empty() ? Matrix(0, d) : encode_all(bucket).value();
        };
        frozen_train = encode_bucket(split.train);
        frozen_val = encode_bucket(split.val);
        frozen_test = encode_bucket(split.test);
    }

    auto scores_for = [&](std::span<const int> indices, const Matrix* frozen) {
        if (indices.empty()) return Matrix(0, ds.n_classes);
        Matrix logits;
        if (frozen != nullptr) {
            logits = head_logits(head, Tensor::from_matrix(*frozen)).value();
        } else {
            logits = head_logits(head, encode_all(indices)).value();
        }
        return ds.kind == TaskKind::multiclass ? row_softmax_probs(logits)
                                               : sigmoid_probs(logits);
    };

    double best_val = -1.0;
    int best_epoch = 0;
    std::map<std::string, Matrix> best_params;
    auto save_best = [&]() {
        best_params.clear();
        for (const auto& [name, t] : head.params) best_params[name] = t.value();
        if (!freeze_encoder) {
            for (const auto& [name, t] : model.params()) best_params["M." + name] = t.value();
        }
    };
    auto restore_best = [&]() {
        for (const auto& [name, t] : head.params) {
            const_cast<Tensor&>(t).mutable_value() = best_params.at(name);
        }
        if (!freeze_encoder) {
            for (const auto& [name, t] : model.params()) {
                const_cast<Tensor&>(t).mutable_value() = best_params.at("M." + name);
            }
        }
    };

    std::vector<int> train_rows(split.train.size());
    std::iota(train_rows.begin(), train_rows.end(), 0);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto rng = stream_for(spec.seed, kEpochDomain, static_cast<std::uint64_t>(epoch));
        std::shuffle(train_rows.begin(), train_rows.end(), rng);
        for (std::size_t at = 0; at < train_rows.size();
             at += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t hi =
                std::min(at + static_cast<std::size_t>(cfg.batch_size), train_rows.size());
            std::vector<int> batch_rows(train_rows.begin() + static_cast<std::ptrdiff_t>(at),
                                        train_rows.begin() + static_cast<std::ptrdiff_t>(hi));
            Tape tape;
            Tensor features;
            if (freeze_encoder) {
                Matrix x(static_cast<Index>(batch_rows.size()), d);
                for (std::size_t k = 0; k < batch_rows.size(); ++k) {
                    x.row(static_cast<Index>(k)) = frozen_train.row(batch_rows[k]);
                }
                features = Tensor::from_matrix(std::move(x));
            } else {
                std::vector<Tensor> rows;
                rows.reserve(batch_rows.size());
                for (int r : batch_rows) {
                    const int item = split.train[static_cast<std::size_t>(r)];
                    rows.push_back(
                        model.encode_image(prepared[static_cast<std::size_t>(item)]));
                }
                features = concat_rows(rows);
            }
            Tensor loss = adaptation_loss(ds, head_logits(head, features), split.train,
                                          batch_rows);
            tape.backward(loss);
            train::adamw_step(head.params, head_opt, lr, opt_cfg);
            head.params.clear_grads();
            if (!freeze_encoder) {
                train::adamw_step(model.params(), encoder_opt, lr, opt_cfg);
                model.params().clear_grads();
            }
        }
        // validation selection on macro AUROC
        Matrix val_scores = scores_for(split.val, freeze_encoder ? &frozen_val : nullptr);
        ScoredMetrics vm = per_class_metrics(val_scores, ds, split.val);
        double val_auroc;
        try {
            val_auroc = aggregate_metrics(vm.auroc_per_class).value;
        } catch (const MetricError&) {
            val_auroc = 0.0;  // no defined class this epoch
        }
        if (val_auroc > best_val) {
            best_val = val_auroc;
            best_epoch = epoch;
            save_best();
        }
    }
    restore_best();

    Matrix test_scores = scores_for(split.test, freeze_encoder ? &frozen_test : nullptr);
    ScoredMetrics tm = per_class_metrics(test_scores, ds, split.test);

    EvalResult result;
    result.dataset = dataset_name;
    result.mode = freeze_encoder ? "probe" : "finetune";
    result.seed = spec.seed;
    result.per_class_auroc = tm.auroc_per_class;
    result.per_class_aupr = tm.aupr_per_class;
    MacroSummary auroc_summary = aggregate_metrics(tm.auroc_per_class);
    result.auroc = auroc_summary.value;
    MacroSummary aupr_summary = aggregate_metrics(tm.aupr_per_class);
    result.aupr = aupr_summary.value;
    // excluded: undefined under either metric
    std::vector<int> excluded = auroc_summary.excluded;
    for (int c : aupr_summary.excluded) {
        if (std::count(excluded.begin(), excluded.end(), c) == 0) excluded.push_back(c);
    }
    std::sort(excluded.begin(), excluded.end());
    result.excluded_classes = std::move(excluded);
    result.epochs = cfg.epochs;
    result.best_epoch = best_epoch;

    const std::vector<std::uint8_t> encoder_after = serialize_encoder(model.params());
    result.encoder_changed = encoder_after != encoder_before;
    if (freeze_encoder && result.encoder_changed) {
        throw Error("linear_probe: encoder parameters changed despite freezing");
    }
    return result;
}

}  // namespace

EvalResult linear_probe(const train::Checkpoint& ckpt, const LabeledImageDataset& ds,
                        const SplitSpec& spec, const EvalConfig& cfg,
                        const std::string& dataset_name) {
    return run_adaptation(ckpt, ds, spec, cfg, dataset_name, /*freeze_encoder=*/true);
}

EvalResult fine_tune(const train::Checkpoint& ckpt, const LabeledImageDataset& ds,
                     const SplitSpec& spec, const EvalConfig& cfg,
                     const std::string& dataset_name) {
    return run_adaptation(ckpt, ds, spec, cfg, dataset_name, /*freeze_encoder=*/false);
}

}  // namespace retclip::eval
