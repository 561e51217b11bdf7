#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "retclip/eval.hpp"

using namespace retclip;
using namespace retclip::eval;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("retclip_eval_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// O(P*N) pair-counting oracle: (wins + ties/2) / (P*N).
double auroc_oracle(std::span<const double> scores, std::span<const int> labels) {
    double wins = 0.0, ties = 0.0;
    long pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 0) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            if (scores[i] == scores[j]) ties += 1.0;
        }
    }
    return (wins + 0.5 * ties) / static_cast<double>(pairs);
}

// Average-precision oracle walking the stable descending order.
double aupr_oracle(std::span<const double> scores, std::span<const int> labels) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double sum = 0.0;
    long tp = 0, pos = 0;
    for (int l : labels) pos += l != 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
        if (labels[order[r]] != 0) {
            ++tp;
            sum += static_cast<double>(tp) / static_cast<double>(r + 1);
        }
    }
    return sum / static_cast<double>(pos);
}

LabeledImageDataset per_class_dataset(int per_class, int n_classes, Index image_size) {
    LabeledImageDataset ds;
    ds.kind = TaskKind::multiclass;
    ds.n_classes = n_classes;
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (int c = 0; c < n_classes; ++c) {
        for (int i = 0; i < per_class; ++i) {
            LabeledImage item;
            item.path = "img_" + std::to_string(c) + "_" + std::to_string(i);
            item.image = Image::constant(image_size, image_size, dist(rng), dist(rng),
                                         dist(rng));
            item.labels = {c};
            ds.items.push_back(std::move(item));
        }
    }
    return ds;
}

// In-memory eval dataset over the synthetic cohort's per-eye labels.
LabeledImageDataset cohort_eye_dataset(const std::vector<data::PatientTriplet>& cohort,
                                       int n_conditions) {
    LabeledImageDataset ds;
    ds.kind = TaskKind::multilabel;
    ds.n_classes = n_conditions;
    for (const auto& p : cohort) {
        for (int e = 0; e < 2; ++e) {
            LabeledImage item;
            item.path = p.patient_id + (e == 0 ? "_L" : "_R");
            item.image = e == 0 ? p.left_image : p.right_image;
            item.labels = p.ground_truth[static_cast<std::size_t>(e)];
            ds.items.push_back(std::move(item));
        }
    }
    return ds;
}

// A small pre-trained checkpoint shared by the adaptation tests.
const train::Checkpoint& pretrained_fixture() {
    static train::Checkpoint ckpt = []() {
        ModelConfig mcfg;
        mcfg.image.image_size = 16;
        mcfg.image.patch_size = 4;
        mcfg.image.d_model = 32;
        mcfg.image.n_blocks = 1;
        mcfg.image.n_heads = 2;
        mcfg.text.vocab_size = 32;
        mcfg.text.max_len = 16;
        mcfg.text.d_model = 32;
        mcfg.text.n_blocks = 1;
        mcfg.text.n_heads = 2;
        train::TrainConfig tcfg;
        tcfg.batch_size = 8;
        tcfg.epochs = 60;
        tcfg.peak_lr = 3e-4;
        tcfg.warmup_steps = 50;
        tcfg.seed = 11;
        tcfg.augment.crop_lo = tcfg.augment.crop_hi = 1.0;
        tcfg.augment.hflip_prob = 0.0;
        tcfg.augment.brightness = tcfg.augment.contrast = tcfg.augment.saturation = 0.0;
        data::SyntheticCohortConfig dcfg;
        dcfg.n_patients = 48;
        dcfg.image_size = 16;
        dcfg.seed = 9;
        auto cohort = data::generate_cohort(dcfg);
        return train::pretrain(cohort, mcfg, tcfg).checkpoint;
    }();
    return ckpt;
}

std::vector<data::PatientTriplet> fixture_cohort() {
    data::SyntheticCohortConfig dcfg;
    dcfg.n_patients = 48;
    dcfg.image_size = 16;
    dcfg.seed = 9;
    return data::generate_cohort(dcfg);
}

}  // namespace

TEST_CASE("stratified_split oracle: largest remainder at 0.56/0.14/0.3") {
    LabeledImageDataset ds = per_class_dataset(10, 3, 4);
    SplitSpec spec;
    spec.seed = 3;
    Split split = stratified_split(ds, spec);
    CHECK(split.train.size() == 18);  // 6 per class
    CHECK(split.val.size() == 3);     // 1 per class
    CHECK(split.test.size() == 9);    // 3 per class
    // per-class counts deviate from the exact ratio by < 1 sample
    for (int c = 0; c < 3; ++c) {
        int in_train = 0;
        for (int i : split.train)
            in_train += ds.items[static_cast<std::size_t>(i)].labels[0] == c;
        CHECK(std::abs(in_train - 5.6) < 1.0);
    }
}

TEST_CASE("stratified_split: degenerate ratios, determinism, partition property") {
    LabeledImageDataset ds = per_class_dataset(7, 4, 4);
    SUBCASE("ratios (1,0,0) put everything in train") {
        SplitSpec spec;
        spec.ratios = {1.0, 0.0, 0.0};
        Split split = stratified_split(ds, spec);
        CHECK(split.train.size() == ds.items.size());
        CHECK(split.val.empty());
        CHECK(split.test.empty());
    }
    SUBCASE("same seed twice gives identical splits") {
        SplitSpec spec;
        spec.seed = 17;
        Split a = stratified_split(ds, spec);
        Split b = stratified_split(ds, spec);
        CHECK(a.train == b.train);
        CHECK(a.val == b.val);
        CHECK(a.test == b.test);
    }
    SUBCASE("buckets form a disjoint, exhaustive partition") {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            SplitSpec spec;
            spec.seed = seed;
            Split split = stratified_split(ds, spec);
            std::vector<int> all;
            all.insert(all.end(), split.train.begin(), split.train.end());
            all.insert(all.end(), split.val.begin(), split.val.end());
            all.insert(all.end(), split.test.begin(), split.test.end());
            std::sort(all.begin(), all.end());
            std::vector<int> expect(ds.items.size());
            std::iota(expect.begin(), expect.end(), 0);
            CHECK(all == expect);
        }
    }
    SUBCASE("empty class is a split error naming the class") {
        LabeledImageDataset missing = ds;
        missing.n_classes = 5;  // class 4 has no samples
        SplitSpec spec;
        try {
            stratified_split(missing, spec);
            FAIL("expected SplitError");
        } catch (const SplitError& e) {
            CHECK(std::string(e.what()).find("4") != std::string::npos);
        }
    }
    SUBCASE("ratios must sum to one") {
        SplitSpec bad;
        bad.ratios = {0.5, 0.2, 0.2};
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }
}

TEST_CASE("auroc oracle values") {
    SUBCASE("perfect separation") {
        std::vector<double> s{0.9, 0.8, 0.3, 0.1};
        std::vector<int> y{1, 1, 0, 0};
        CHECK(auroc(s, y) == 1.0);
    }
    SUBCASE("two wins, two losses of four pairs") {
        std::vector<double> s{0.8, 0.9, 0.6, 0.1};
        std::vector<int> y{1, 0, 1, 0};
        CHECK(auroc(s, y) == 0.5);
    }
    SUBCASE("all scores equal -> 0.5 via tie handling") {
        std::vector<double> s{0.4, 0.4, 0.4, 0.4};
        std::vector<int> y{1, 0, 1, 0};
        CHECK(auroc(s, y) == 0.5);
    }
    SUBCASE("single-class labels are undefined") {
        std::vector<double> s{0.4, 0.5};
        std::vector<int> pos_only{1, 1}, neg_only{0, 0};
        CHECK_THROWS_AS(auroc(s, pos_only), MetricError);
        CHECK_THROWS_AS(auroc(s, neg_only), MetricError);
    }
}

TEST_CASE("aupr oracle values") {
    SUBCASE("perfect ranking, 2 positives of 4") {
        std::vector<double> s{0.9, 0.8, 0.3, 0.1};
        std::vector<int> y{1, 1, 0, 0};
        CHECK(aupr(s, y) == 1.0);
    }
    SUBCASE("all labels positive -> 1.0 regardless of scores") {
        std::vector<double> s{0.2, 0.9, 0.5};
        std::vector<int> y{1, 1, 1};
        CHECK(aupr(s, y) == 1.0);
    }
    SUBCASE("hand average precision: (1 + 2/3) / 2") {
        std::vector<double> s{0.9, 0.7, 0.5};
        std::vector<int> y{1, 0, 1};
        CHECK(aupr(s, y) == doctest::Approx(0.5 * (1.0 + 2.0 / 3.0)).epsilon(1e-15));
    }
    SUBCASE("no positives is undefined") {
        std::vector<double> s{0.4, 0.5};
        std::vector<int> y{0, 0};
        CHECK_THROWS_AS(aupr(s, y), MetricError);
    }
}

TEST_CASE("auroc/aupr match brute-force oracles exactly on 200 random instances") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng() % 49;
        std::vector<double> s(n);
        std::vector<int> y(n);
        // quantized scores force ties regularly
        std::uniform_int_distribution<int> q(0, 7);
        bool has_pos = false, has_neg = false;
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = q(rng) / 7.0;
            y[i] = static_cast<int>(rng() % 2);
            has_pos = has_pos || y[i] == 1;
            has_neg = has_neg || y[i] == 0;
        }
        if (!has_pos) y[0] = 1;
        if (!has_neg) y[n - 1] = 0;
        CHECK(auroc(s, y) == auroc_oracle(s, y));
        CHECK(aupr(s, y) == aupr_oracle(s, y));
    }
}

TEST_CASE("auroc properties: monotone-transform invariance and score negation") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 3 + rng() % 30;
        std::vector<double> s(n), s_affine(n), s_exp(n), s_neg(n);
        std::vector<int> y(n);
        std::uniform_real_distribution<double> dist(-2.0, 2.0);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = dist(rng);
            y[i] = static_cast<int>(rng() % 2);
            s_affine[i] = 3.0 * s[i] + 10.0;
            s_exp[i] = std::exp(s[i]);
            s_neg[i] = -s[i];
        }
        y[0] = 1;
        y[1] = 0;
        const double base = auroc(s, y);
        CHECK(auroc(s_affine, y) == base);  // exact
        CHECK(auroc(s_exp, y) == base);
        // continuous scores: no ties with probability 1
        CHECK(auroc(s_neg, y) == doctest::Approx(1.0 - base).epsilon(1e-15));
    }
}

TEST_CASE("aggregate_metrics: passthrough, averaging, exclusions") {
    CHECK(aggregate_metrics({0.7}).value == 0.7);
    MacroSummary two = aggregate_metrics({1.0, 0.5});
    CHECK(two.value == 0.75);
    CHECK(two.excluded.empty());
    MacroSummary with_gap = aggregate_metrics({1.0, std::nullopt, 0.5});
    CHECK(with_gap.value == 0.75);
    CHECK(with_gap.excluded == std::vector<int>{1});
    CHECK_THROWS_AS(aggregate_metrics({std::nullopt, std::nullopt}), MetricError);
}

TEST_CASE("labeled manifest parsing") {
    TempDir tmp;
    // two tiny PNGs
    write_png(tmp.path / "a.png", Image::constant(4, 4, 0.1, 0.2, 0.3));
    write_png(tmp.path / "b.png", Image::constant(4, 4, 0.5, 0.6, 0.7));

    SUBCASE("multiclass") {
        std::ofstream out(tmp.path / "m.tsv");
        out << "#task=multiclass n_classes=3\n";
        out << "a.png\t2\n";
        out << "b.png\t0\n";
        out.close();
        LabeledImageDataset ds = load_labeled_manifest(tmp.path / "m.tsv");
        CHECK(ds.kind == TaskKind::multiclass);
        CHECK(ds.n_classes == 3);
        REQUIRE(ds.items.size() == 2);
        CHECK(ds.items[0].labels == std::vector<int>{2});
    }
    SUBCASE("multilabel with an empty label set") {
        std::ofstream out(tmp.path / "m.tsv");
        out << "#task=multilabel n_classes=4\n";
        out << "a.png\t1,3\n";
        out << "b.png\t\n";
        out.close();
        LabeledImageDataset ds = load_labeled_manifest(tmp.path / "m.tsv");
        CHECK(ds.items[0].labels == std::vector<int>{1, 3});
        CHECK(ds.items[1].labels.empty());
    }
    SUBCASE("bad header is a parse error") {
        std::ofstream out(tmp.path / "m.tsv");
        out << "task=multiclass n_classes=3\n";
        out.close();
        CHECK_THROWS_AS(load_labeled_manifest(tmp.path / "m.tsv"), ParseError);
    }
    SUBCASE("missing image is an io error") {
        std::ofstream out(tmp.path / "m.tsv");
        out << "#task=multiclass n_classes=2\n";
        out << "nope.png\t1\n";
        out.close();
        CHECK_THROWS_AS(load_labeled_manifest(tmp.path / "m.tsv"), IoError);
    }
}

TEST_CASE("linear probe freezes the encoder and recovers the planted labels") {
    const train::Checkpoint& ckpt = pretrained_fixture();
    LabeledImageDataset ds = cohort_eye_dataset(fixture_cohort(), 4);
    SplitSpec spec;
    spec.ratios = {0.6, 0.2, 0.2};
    spec.seed = 2;
    EvalConfig cfg;
    EvalResult r = linear_probe(ckpt, ds, spec, cfg, "cohort-eyes");
    CHECK_FALSE(r.encoder_changed);  // byte-identical encoder (probe asserts internally too)
    CHECK(r.auroc > 0.9);            // planted signal is recoverable
    CHECK(r.mode == "probe");
    CHECK(r.best_epoch >= 1);
    CHECK(r.best_epoch <= cfg.epochs);
    CHECK(r.per_class_auroc.size() == 4);

    // same seed reproduces the metrics exactly
    EvalResult r2 = linear_probe(ckpt, ds, spec, cfg, "cohort-eyes");
    CHECK(r2.auroc == r.auroc);
    CHECK(r2.aupr == r.aupr);
    CHECK(r2.best_epoch == r.best_epoch);
}

TEST_CASE("probe on label-independent features stays near chance") {
    // untrained encoder, labels drawn independently of the images
    ModelConfig mcfg;
    mcfg.image.image_size = 16;
    mcfg.image.patch_size = 4;
    mcfg.image.d_model = 32;
    mcfg.image.n_blocks = 1;
    mcfg.image.n_heads = 2;
    mcfg.text.vocab_size = 32;
    mcfg.text.max_len = 16;
    mcfg.text.d_model = 32;
    mcfg.text.n_blocks = 1;
    mcfg.text.n_heads = 2;
    RetClipModel model(mcfg, 50);
    train::TrainConfig tcfg;
    train::Checkpoint ckpt = train::make_checkpoint(model, tcfg);

    LabeledImageDataset ds;
    ds.kind = TaskKind::multiclass;
    ds.n_classes = 2;
    std::mt19937_64 rng(123);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (int i = 0; i < 100; ++i) {
        LabeledImage item;
        item.path = "noise" + std::to_string(i);
        item.image = Image::zero(16, 16);
        for (auto& ch : item.image.channels)
            for (Index y = 0; y < 16; ++y)
                for (Index x = 0; x < 16; ++x) ch(y, x) = dist(rng);
        item.labels = {static_cast<int>(rng() % 2)};
        ds.items.push_back(std::move(item));
    }
    EvalConfig cfg;
    cfg.epochs = 10;
    double mean_auroc = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SplitSpec spec;
        spec.ratios = {0.4, 0.2, 0.4};
        spec.seed = seed;
        mean_auroc += linear_probe(ckpt, ds, spec, cfg, "noise").auroc;
    }
    mean_auroc /= 5.0;
    CHECK(mean_auroc >= 0.35);
    CHECK(mean_auroc <= 0.65);
}

TEST_CASE("fine-tune changes the encoder and keeps pace with the probe") {
    const train::Checkpoint& ckpt = pretrained_fixture();
    LabeledImageDataset ds = cohort_eye_dataset(fixture_cohort(), 4);
    SplitSpec spec;
    spec.ratios = {0.6, 0.2, 0.2};
    spec.seed = 2;
    EvalConfig cfg;  // the protocol's 50 epochs
    EvalResult probe = linear_probe(ckpt, ds, spec, cfg, "cohort-eyes");
    EvalResult ft = fine_tune(ckpt, ds, spec, cfg, "cohort-eyes");
    CHECK(ft.encoder_changed);
    CHECK(ft.mode == "finetune");
    CHECK(ft.auroc >= probe.auroc - 0.02);
}

TEST_CASE("one-epoch fine-tune smoke: emits every result field") {
    const train::Checkpoint& ckpt = pretrained_fixture();
    LabeledImageDataset ds = cohort_eye_dataset(fixture_cohort(), 4);
    SplitSpec spec;
    spec.ratios = {0.6, 0.2, 0.2};
    spec.seed = 3;
    EvalConfig cfg;
    cfg.epochs = 1;
    EvalResult r = fine_tune(ckpt, ds, spec, cfg, "smoke");
    CHECK(r.dataset == "smoke");
    CHECK(r.seed == 3);
    CHECK(r.epochs == 1);
    CHECK(r.best_epoch == 1);
    auto j = r.to_json();
    for (const char* key : {"dataset", "mode", "seed", "auroc", "aupr", "per_class",
                            "excluded_classes", "epochs", "best_epoch"}) {
        CHECK(j.contains(key));
    }
}

TEST_CASE("probe degrades gracefully without a validation bucket") {
    const train::Checkpoint& ckpt = pretrained_fixture();
    LabeledImageDataset ds = cohort_eye_dataset(fixture_cohort(), 4);
    SplitSpec spec;
    spec.ratios = {0.7, 0.0, 0.3};  // no validation samples
    spec.seed = 5;
    EvalConfig cfg;
    cfg.epochs = 3;
    EvalResult r = linear_probe(ckpt, ds, spec, cfg, "no-val");
    CHECK(r.best_epoch == 1);  // nothing to select on, first epoch wins
    CHECK(r.auroc > 0.0);
}

TEST_CASE("multiclass dataset validation") {
    LabeledImageDataset ds;
    ds.kind = TaskKind::multiclass;
    ds.n_classes = 2;
    LabeledImage bad;
    bad.path = "x";
    bad.image = Image::zero(4, 4);
    bad.labels = {0, 1};  // two labels on a multiclass item
    ds.items.push_back(bad);
    CHECK_THROWS_AS(ds.validate(), ConfigError);
}
