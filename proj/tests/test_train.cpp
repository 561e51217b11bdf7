#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "retclip/train.hpp"

using namespace retclip;
using namespace retclip::train;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("retclip_train_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ModelConfig small_model() {
    ModelConfig cfg;
    cfg.image.image_size = 16;
    cfg.image.patch_size = 4;
    cfg.image.d_model = 32;
    cfg.image.n_blocks = 1;
    cfg.image.n_heads = 2;
    cfg.text.vocab_size = 32;
    cfg.text.max_len = 16;
    cfg.text.d_model = 32;
    cfg.text.n_blocks = 1;
    cfg.text.n_heads = 2;
    return cfg;
}

data::AugmentConfig identity_augment() {
    data::AugmentConfig aug;
    aug.crop_lo = aug.crop_hi = 1.0;
    aug.hflip_prob = 0.0;
    aug.brightness = aug.contrast = aug.saturation = 0.0;
    return aug;
}

std::vector<data::PatientTriplet> small_cohort(int n, Index image_size, std::uint64_t seed) {
    data::SyntheticCohortConfig cfg;
    cfg.n_patients = n;
    cfg.image_size = image_size;
    cfg.seed = seed;
    return data::generate_cohort(cfg);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("lr schedule: paper warmup constants and shape") {
    TrainConfig cfg;
    cfg.peak_lr = 3e-5;
    cfg.warmup_steps = 50;
    CHECK(lr_at_step(0, cfg) == 0.0);
    CHECK(lr_at_step(50, cfg) == doctest::Approx(3e-5).epsilon(1e-15));
    CHECK(lr_at_step(25, cfg) == doctest::Approx(1.5e-5).epsilon(1e-15));
    // non-decreasing on the ramp, constant after
    double prev = -1.0;
    for (long s = 0; s <= 50; ++s) {
        double lr = lr_at_step(s, cfg);
        CHECK(lr >= prev);
        prev = lr;
    }
    for (long s = 51; s < 200; s += 13) {
        CHECK(lr_at_step(s, cfg) == cfg.peak_lr);
    }
    CHECK_THROWS_AS(lr_at_step(-1, cfg), ContractError);
}

TEST_CASE("lr schedule: optional cosine decay stays behind its flag") {
    TrainConfig cfg;
    cfg.peak_lr = 1e-3;
    cfg.warmup_steps = 10;
    cfg.cosine_decay = true;
    CHECK(lr_at_step(10, cfg, 110) == doctest::Approx(1e-3));
    CHECK(lr_at_step(60, cfg, 110) == doctest::Approx(5e-4).epsilon(1e-9));
    CHECK(lr_at_step(110, cfg, 110) == doctest::Approx(0.0));
    // without total_steps the schedule is constant after warmup
    CHECK(lr_at_step(60, cfg) == doctest::Approx(1e-3));
}

TEST_CASE("adamw oracle cases") {
    SUBCASE("zero gradient and zero decay leave parameters unchanged") {
        nn::ParamStore ps;
        ps.add("w", Matrix::Constant(2, 2, 1.5));
        AdamState state;
        TrainConfig cfg;
        cfg.weight_decay = 0.0;
        adamw_step(ps, state, 1e-3, cfg);
        CHECK((ps.at("w").value().array() == 1.5).all());
        CHECK(state.step == 1);
    }
    SUBCASE("single scalar with unit gradient matches the hand formula") {
        nn::ParamStore ps;
        ps.add_scalar("w", 2.0);
        ps.at("w").accumulate_grad(Matrix::Ones(1, 1));
        AdamState state;
        TrainConfig cfg;
        cfg.weight_decay = 0.0;
        const double lr = 1e-2;
        adamw_step(ps, state, lr, cfg);
        // m_hat = 1, v_hat = 1 after bias correction at t=1
        const double expected = 2.0 - lr * (1.0 / (1.0 + cfg.eps));
        CHECK(ps.at("w").item() == doctest::Approx(expected).epsilon(1e-15));
    }
    SUBCASE("decoupled decay: zero gradient shrinks by (1 - lr*wd)") {
        nn::ParamStore ps;
        ps.add("w", Matrix::Constant(2, 3, 4.0));
        AdamState state;
        TrainConfig cfg;
        cfg.weight_decay = 0.1;
        adamw_step(ps, state, 1e-2, cfg);
        CHECK(ps.at("w").value()(0, 0) == doctest::Approx(4.0 * (1.0 - 1e-2 * 0.1)));
    }
    SUBCASE("logit_scale is exempt from decay") {
        nn::ParamStore ps;
        ps.add_scalar("logit_scale", 2.0);
        AdamState state;
        TrainConfig cfg;
        cfg.weight_decay = 0.5;
        adamw_step(ps, state, 1e-2, cfg);
        CHECK(ps.at("logit_scale").item() == 2.0);
    }
    SUBCASE("NaN gradient names the parameter") {
        nn::ParamStore ps;
        ps.add("w.bad", Matrix::Ones(1, 1));
        Matrix g(1, 1);
        g(0, 0) = std::nan("");
        ps.at("w.bad").accumulate_grad(g);
        AdamState state;
        TrainConfig cfg;
        try {
            adamw_step(ps, state, 1e-3, cfg);
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("w.bad") != std::string::npos);
        }
    }
}

TEST_CASE("checkpoint round trip: save -> load -> save is byte-identical") {
    TempDir tmp;
    ModelConfig mcfg = small_model();
    RetClipModel model(mcfg, 5);
    TrainConfig tcfg;
    tcfg.seed = 5;
    Checkpoint ckpt = make_checkpoint(model, tcfg);
    save_checkpoint(ckpt, tmp.path / "a.rclp");
    Checkpoint loaded = load_checkpoint(tmp.path / "a.rclp");
    save_checkpoint(loaded, tmp.path / "b.rclp");
    CHECK(slurp(tmp.path / "a.rclp") == slurp(tmp.path / "b.rclp"));
    CHECK(loaded.tensors.size() == ckpt.tensors.size());
    CHECK_FALSE(loaded.optimizer_step.has_value());
}

TEST_CASE("checkpoint format violations raise distinct errors") {
    TempDir tmp;
    ModelConfig mcfg = small_model();
    RetClipModel model(mcfg, 6);
    TrainConfig tcfg;
    const fs::path good = tmp.path / "good.rclp";
    save_checkpoint(make_checkpoint(model, tcfg), good);
    std::string bytes = slurp(good);

    SUBCASE("corrupted magic") {
        std::string bad = bytes;
        bad[0] = 'X';
        std::ofstream(tmp.path / "bad.rclp", std::ios::binary) << bad;
        CHECK_THROWS_AS(load_checkpoint(tmp.path / "bad.rclp"), FormatError);
    }
    SUBCASE("version mismatch") {
        std::string bad = bytes;
        bad[4] = 99;  // little-endian version field
        std::ofstream(tmp.path / "bad.rclp", std::ios::binary) << bad;
        try {
            load_checkpoint(tmp.path / "bad.rclp");
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("version") != std::string::npos);
        }
    }
    SUBCASE("truncated payload") {
        std::string bad = bytes.substr(0, bytes.size() - 16);
        std::ofstream(tmp.path / "bad.rclp", std::ios::binary) << bad;
        CHECK_THROWS_AS(load_checkpoint(tmp.path / "bad.rclp"), FormatError);
    }
    SUBCASE("manifest entry past the end of the payload") {
        // shrink the trailing payload-length word and cut the payload
        std::string bad = bytes;
        std::size_t at = 4 + 4;
        auto read_u64 = [&bad](std::size_t pos) {
            std::uint64_t v = 0;
            for (int i = 0; i < 8; ++i)
                v |= static_cast<std::uint64_t>(static_cast<unsigned char>(
                         bad[pos + static_cast<std::size_t>(i)]))
                     << (8 * i);
            return v;
        };
        const std::uint64_t cfg_len = read_u64(at);
        at += 8 + cfg_len;
        const std::uint64_t man_len = read_u64(at);
        at += 8 + man_len;
        const std::uint64_t payload_len = read_u64(at);
        const std::uint64_t shrunk = payload_len - 8;
        for (int i = 0; i < 8; ++i) {
            bad[at + static_cast<std::size_t>(i)] =
                static_cast<char>((shrunk >> (8 * i)) & 0xFF);
        }
        bad.resize(bad.size() - 8);
        std::ofstream(tmp.path / "bad.rclp", std::ios::binary) << bad;
        try {
            load_checkpoint(tmp.path / "bad.rclp");
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("exceeds payload") != std::string::npos);
        }
    }
}

TEST_CASE("reloaded checkpoint reproduces forward outputs within the f32 cast") {
    ModelConfig mcfg = small_model();
    RetClipModel model(mcfg, 9);
    TrainConfig tcfg;
    auto cohort = small_cohort(3, mcfg.image.image_size, 31);
    auto [feats_a, loss_a] = forward_batch(model, cohort);
    RetClipModel reloaded = model_from_checkpoint(make_checkpoint(model, tcfg));
    auto [feats_b, loss_b] = forward_batch(reloaded, cohort);
    const double rel = std::abs(loss_a.values().total - loss_b.values().total) /
                       std::max(1.0, std::abs(loss_a.values().total));
    CHECK(rel <= 1e-6);
    CHECK(((feats_a.v_patient.value() - feats_b.v_patient.value()).array().abs() <=
           1e-6 * feats_a.v_patient.value().array().abs().max(1.0))
              .all());
}

TEST_CASE("optimizer moments ride along when save_moments is set") {
    TempDir tmp;
    ModelConfig mcfg = small_model();
    TrainConfig tcfg;
    tcfg.epochs = 1;
    tcfg.batch_size = 4;
    tcfg.warmup_steps = 0;
    tcfg.save_moments = true;
    tcfg.augment = identity_augment();
    auto cohort = small_cohort(4, mcfg.image.image_size, 1);
    auto result = pretrain(cohort, mcfg, tcfg, tmp.path / "ck.rclp");
    Checkpoint loaded = load_checkpoint(tmp.path / "ck.rclp");
    CHECK(loaded.optimizer_step.has_value());
    CHECK(*loaded.optimizer_step == 1);
    CHECK(loaded.tensors.count("opt.m.fuse.fc1.w") == 1);
    CHECK(loaded.tensors.count("opt.v.fuse.fc1.w") == 1);
    // moments do not leak into the restored model
    RetClipModel m = model_from_checkpoint(loaded);
    CHECK_FALSE(m.params().contains("opt.m.fuse.fc1.w"));
}

TEST_CASE("pretrain determinism: identical runs produce identical artifacts") {
    TempDir tmp;
    ModelConfig mcfg = small_model();
    TrainConfig tcfg;
    tcfg.epochs = 2;
    tcfg.batch_size = 4;
    tcfg.warmup_steps = 2;
    tcfg.seed = 77;
    auto cohort = small_cohort(6, mcfg.image.image_size, 13);
    pretrain(cohort, mcfg, tcfg, tmp.path / "a.rclp", tmp.path / "a.csv");
    pretrain(cohort, mcfg, tcfg, tmp.path / "b.rclp", tmp.path / "b.csv");
    CHECK(slurp(tmp.path / "a.rclp") == slurp(tmp.path / "b.rclp"));
    CHECK(slurp(tmp.path / "a.csv") == slurp(tmp.path / "b.csv"));
    std::ifstream csv(tmp.path / "a.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "step,lr,loss_left,loss_right,loss_patient,loss_total");
}

TEST_CASE("patient-only toggle: monocular heads receive no gradient") {
    ModelConfig mcfg = small_model();
    RetClipModel model(mcfg, 3);
    auto cohort = small_cohort(4, mcfg.image.image_size, 2);
    Tape tape;
    auto [feats, loss] = forward_batch(model, cohort, LossToggles::patient_only());
    // disabled levels are still evaluated for the log
    CHECK(loss.values().left > 0.0);
    CHECK(loss.values().right > 0.0);
    tape.backward(loss.total);
    for (const auto& [name, t] : model.params()) {
        if (name.starts_with("dec_left.") || name.starts_with("dec_right.")) {
            CHECK_FALSE(t.has_grad());
        }
    }
    // the patient path does receive gradient
    CHECK(model.params().at("dec_patient.fc1.w").has_grad());
    CHECK(model.params().at("fuse.fc1.w").has_grad());
}

TEST_CASE("overfit fixture: loss collapses and retrieval saturates") {
    ModelConfig mcfg = small_model();
    TrainConfig tcfg;
    tcfg.batch_size = 6;
    tcfg.epochs = 200;  // one batch per epoch
    tcfg.peak_lr = 3e-4;
    tcfg.warmup_steps = 50;
    tcfg.seed = 7;
    tcfg.augment = identity_augment();
    auto cohort = small_cohort(6, mcfg.image.image_size, 5);
    auto result = pretrain(cohort, mcfg, tcfg);
    CHECK(result.log.back().loss_total < 0.1);

    // evaluate retrieval on the normalized clean images
    RetClipModel model = model_from_checkpoint(result.checkpoint);
    std::vector<data::PatientTriplet> eval_batch = cohort;
    for (auto& p : eval_batch) {
        p.left_image = data::prepare_eval_image(p.left_image, mcfg.image.image_size,
                                                tcfg.augment.norm_mean, tcfg.augment.norm_std);
        p.right_image = data::prepare_eval_image(p.right_image, mcfg.image.image_size,
                                                 tcfg.augment.norm_mean, tcfg.augment.norm_std);
    }
    auto [feats, loss] = forward_batch(model, eval_batch);
    CHECK(in_batch_retrieval(feats).all_perfect());
    // loss trajectory is monotone non-increasing when smoothed over windows
    const auto& log = result.log;
    const std::size_t window = 20;
    double prev_mean = 1e9;
    for (std::size_t at = 0; at + window <= log.size(); at += window) {
        double mean = 0.0;
        for (std::size_t k = at; k < at + window; ++k) mean += log[k].loss_total;
        mean /= static_cast<double>(window);
        CHECK(mean <= prev_mean + 0.05);  // noise guard
        prev_mean = mean;
    }
}

TEST_CASE("non-finite loss aborts and retains the last good checkpoint") {
    TempDir tmp;
    ModelConfig mcfg = small_model();
    TrainConfig tcfg;
    tcfg.batch_size = 4;
    tcfg.epochs = 60;  // enough steps at this lr to overflow into NaN
    tcfg.warmup_steps = 0;
    tcfg.peak_lr = 1e14;
    tcfg.augment = identity_augment();
    auto cohort = small_cohort(4, mcfg.image.image_size, 6);
    CHECK_THROWS_AS(pretrain(cohort, mcfg, tcfg, tmp.path / "aborted.rclp"), NumericError);
    CHECK(fs::exists(tmp.path / "aborted.rclp"));
    // the retained checkpoint is structurally intact and restorable
    RetClipModel recovered = model_from_checkpoint(load_checkpoint(tmp.path / "aborted.rclp"));
    RetClipModel fresh(mcfg, tcfg.seed);
    CHECK(recovered.params().tensor_count() == fresh.params().tensor_count());
}

TEST_CASE("pretrain rejects an empty cohort") {
    ModelConfig mcfg = small_model();
    TrainConfig tcfg;
    std::vector<data::PatientTriplet> none;
    CHECK_THROWS_AS(pretrain(none, mcfg, tcfg), ContractError);
}
