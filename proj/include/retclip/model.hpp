#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <utility>

#include "retclip/data.hpp"
#include "retclip/encoders.hpp"

namespace retclip {

// Per-level contrastive loss switches (left/right together form the
// monocular level of the ablation).
struct LossToggles {
    bool left = true;
    bool right = true;
    bool patient = true;

    void validate() const {
        if (!left && !right && !patient) {
            throw ConfigError("loss toggles: at least one level must be enabled");
        }
    }
    static LossToggles full() { return {true, true, true}; }
    static LossToggles monocular_only() { return {true, true, false}; }
    static LossToggles patient_only() { return {false, false, true}; }
};

struct ModelConfig {
    ImageEncoderConfig image;
    TextEncoderConfig text;
    // log-temperature; exp(logit_scale) is clamped to (0, 100]
    double logit_scale_init = std::log(1.0 / 0.07);
    // When set, the similarity multiplier is the constant exp(log(fixed)) =
    // fixed and the learnable scale is ignored; 1.0 reproduces raw cosines.
    std::optional<double> fixed_scale;

    void validate() const;
    Index d_model() const { return image.d_model; }
};

// The six per-patient embeddings plus the raw class-token embedding, rows
// aligned with the input batch order.
struct BatchFeatures {
    Tensor v_left, v_right, v_patient;  // [N x d]
    Tensor t0;                          // [N x d]
    Tensor t_left, t_right, t_patient;  // [N x d]

    Index batch_size() const { return v_left.rows(); }
};

struct SimilarityPair {
    Tensor v2t;  // [N x N]
    Tensor t2v;  // transpose(v2t)
};

struct LossBreakdown {
    double left = 0.0;
    double right = 0.0;
    double patient = 0.0;
    double total = 0.0;
};

// Loss terms as tape tensors; `total` sums the enabled levels only, the
// disabled ones are still evaluated for logging.
struct LossOutput {
    Tensor left, right, patient, total;
    LossToggles toggles;
    LossBreakdown values() const;
};

class RetClipModel {
  public:
    RetClipModel(ModelConfig cfg, std::uint64_t seed);
    RetClipModel(ModelConfig cfg, nn::ParamStore params);  // checkpoint restore

    const ModelConfig& config() const { return cfg_; }
    const nn::ParamStore& params() const { return params_; }
    nn::ParamStore& params() { return params_; }

    Tensor encode_image(const Image& image) const;
    EncodedText encode_text(const std::vector<int>& tokens) const;

    // Log-scale tensor feeding similarity_pair: the learnable parameter, or
    // a constant when fixed_scale is configured.
    Tensor logit_scale() const;

    // Row-wise left-then-right concat through the fusion MLP.
    Tensor fuse_patient(const Tensor& v_left, const Tensor& v_right) const;
    // Three independent MLP heads over the same t0: {left, right, patient}.
    std::array<Tensor, 3> decouple_text(const Tensor& t0) const;

    BatchFeatures encode_batch(std::span<const data::PatientTriplet> batch) const;

  private:
    ModelConfig cfg_;
    nn::ParamStore params_;
};

nn::ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed);

// Rows of v and t are L2-normalized; entries are exp(log_scale) * cosine,
// with exp clamped to 100.
SimilarityPair similarity_pair(const Tensor& v, const Tensor& t, const Tensor& log_scale);

// Symmetric InfoNCE with diagonal one-hot targets:
// (mean_i -log softmax(v2t)[i,i] + mean_i -log softmax(t2v)[i,i]) / 2.
Tensor infonce_symmetric(const SimilarityPair& sim);

LossOutput tripartite_loss(const BatchFeatures& feats, const Tensor& log_scale,
                           const LossToggles& toggles = {});

std::pair<BatchFeatures, LossOutput> forward_batch(const RetClipModel& model,
                                                   std::span<const data::PatientTriplet> batch,
                                                   const LossToggles& toggles = {});

struct RetrievalLevel {
    double v2t_top1 = 0.0;
    double t2v_top1 = 0.0;
};
struct RetrievalReport {
    RetrievalLevel left, right, patient;
    bool all_perfect() const;
};
// Fraction of rows whose cosine argmax is the matched pair, per level and
// direction.
RetrievalReport in_batch_retrieval(const BatchFeatures& feats);

}  // namespace retclip
