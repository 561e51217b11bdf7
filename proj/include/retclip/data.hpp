#pragma once

#include <array>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "retclip/image.hpp"

namespace retclip::data {

// Whitespace token vocabulary; line number in the vocab file is the token id.
// Ids 0/1/2 are reserved for cls/pad/unk.
struct Vocabulary {
    static constexpr int kCls = 0;
    static constexpr int kPad = 1;
    static constexpr int kUnk = 2;

    std::vector<std::string> words;
    std::unordered_map<std::string, int> index;

    static Vocabulary from_words(std::vector<std::string> words);
    // The fixed vocabulary of the synthetic report language.
    static Vocabulary synthetic(int n_conditions);
    static Vocabulary load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    int id(const std::string& word) const;  // kUnk for unknown words
    int size() const { return static_cast<int>(words.size()); }
};

// cls + word ids; unknown words map to unk, nothing is ever rejected.
// With pad_to > 0 the sequence is truncated to pad_to - 1 tokens and
// right-padded with pad to exactly pad_to ids.
std::vector<int> tokenize(const Vocabulary& vocab, const std::string& text, Index pad_to = 0);
// Drops cls/pad; inverse of tokenize on in-vocabulary text.
std::string detokenize(const Vocabulary& vocab, std::span<const int> ids);

// One pre-training sample: both eyes plus the patient-level report.
// ground_truth carries the per-eye condition ids for synthetic cohorts only;
// pre-training never reads it.
struct PatientTriplet {
    std::string patient_id;
    Image left_image;
    Image right_image;
    std::vector<int> report_tokens;  // starts with cls_id
    std::string report_text;
    std::array<std::vector<int>, 2> ground_truth;  // [left, right]
};

struct SyntheticCohortConfig {
    int n_patients = 64;
    Index image_size = 32;
    int n_conditions = 4;
    double condition_prior = 0.3;
    double noise_std = 0.05;
    bool template_mix = true;
    std::uint64_t seed = 0;

    void validate() const;
};

// Deterministic per (config.seed, patient index). Each eye independently
// draws conditions; every condition renders a fixed disk signature.
std::vector<PatientTriplet> generate_cohort(const SyntheticCohortConfig& cfg);

// Exposed for the planted-signal oracle: the clean (pre-noise) rendering of
// an eye with the given condition set.
Image render_eye_clean(const SyntheticCohortConfig& cfg, const std::vector<int>& conditions);

struct AugmentConfig {
    double crop_lo = 0.9;  // area fractions
    double crop_hi = 1.0;
    Index out_size = 32;
    double hflip_prob = 0.5;
    double brightness = 0.2;
    double contrast = 0.2;
    double saturation = 0.1;
    std::array<double, 3> norm_mean{0.5, 0.5, 0.5};
    std::array<double, 3> norm_std{0.5, 0.5, 0.5};

    void validate() const;
};

Image resize_bilinear(const Image& img, Index out_h, Index out_w);
Image hflip(const Image& img);
Image normalize(const Image& img, const std::array<double, 3>& mean,
                const std::array<double, 3>& std_dev);

// random area crop -> bilinear resize -> horizontal flip -> color jitter
// (clamped to [0,1]) -> per-channel normalization.
Image augment(const Image& img, const AugmentConfig& cfg, std::mt19937_64& rng);

// Deterministic eval-time preprocessing: resize + normalize only.
Image prepare_eval_image(const Image& img, Index out_size, const std::array<double, 3>& mean,
                         const std::array<double, 3>& std_dev);

// Manifest: one patient per line,
//   patient_id<TAB>left_image_path<TAB>right_image_path<TAB>report text
// image paths are relative to the manifest's directory.
std::vector<PatientTriplet> load_manifest(const std::filesystem::path& manifest_path,
                                          const Vocabulary& vocab);
// Writes images/, manifest.tsv, vocab.txt and a per-eye labels.tsv
// (multilabel eval manifest over the synthetic conditions).
void write_cohort(const std::filesystem::path& out_dir,
                  std::span<const PatientTriplet> cohort, const Vocabulary& vocab,
                  int n_conditions);

}  // namespace retclip::data
