#include "retclip/model.hpp"

namespace retclip {

namespace {

constexpr const char* kImagePrefix = "img_enc";
constexpr const char* kTextPrefix = "txt_enc";
constexpr const char* kFusePrefix = "fuse";
constexpr const char* kDecoupleLeft = "dec_left";
constexpr const char* kDecoupleRight = "dec_right";
constexpr const char* kDecouplePatient = "dec_patient";
constexpr const char* kLogitScale = "logit_scale";
constexpr double kMaxScale = 100.0;

Tensor ce_diag(const Tensor& p) {
    // mean over rows of -log softmax(p)[i, i]
    return scale(mean_all(diag(log_softmax_rows(p))), -1.0);
}

}  // namespace

void ModelConfig::validate() const {
    image.validate();
    text.validate();
    if (image.d_model != text.d_model) {
        throw ConfigError("model: image and text encoders must share d_model, got " +
                          std::to_string(image.d_model) + " vs " +
                          std::to_string(text.d_model));
    }
    if (fixed_scale && *fixed_scale <= 0) {
        throw ConfigError("model: fixed_scale must be positive");
    }
}

LossBreakdown LossOutput::values() const {
    LossBreakdown b;
    b.left = left.item();
    b.right = right.item();
    b.patient = patient.item();
    b.total = total.item();
    return b;
}

nn::ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    nn::ParamStore ps;
    nn::Initializer init(seed);
    add_image_encoder_params(ps, kImagePrefix, cfg.image, init);
    add_text_encoder_params(ps, kTextPrefix, cfg.text, init);
    const Index d = cfg.d_model();
    nn::add_mlp(ps, kFusePrefix, 2 * d, d, d, init);
    nn::add_mlp(ps, kDecoupleLeft, d, d, d, init);
    nn::add_mlp(ps, kDecoupleRight, d, d, d, init);
    nn::add_mlp(ps, kDecouplePatient, d, d, d, init);
    ps.add_scalar(kLogitScale, cfg.logit_scale_init);
    return ps;
}

RetClipModel::RetClipModel(ModelConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), params_(init_params(cfg_, seed)) {}

RetClipModel::RetClipModel(ModelConfig cfg, nn::ParamStore params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    if (!params_.contains(kLogitScale)) {
        throw ConfigError("model: parameter store is missing logit_scale");
    }
}

Tensor RetClipModel::encode_image(const Image& image) const {
    return retclip::encode_image(params_, kImagePrefix, cfg_.image, image);
}

EncodedText RetClipModel::encode_text(const std::vector<int>& tokens) const {
    return retclip::encode_text(params_, kTextPrefix, cfg_.text, tokens);
}

Tensor RetClipModel::logit_scale() const {
    if (cfg_.fixed_scale) {
        return Tensor::scalar(std::log(*cfg_.fixed_scale));
    }
    return params_.at(kLogitScale);
}

Tensor RetClipModel::fuse_patient(const Tensor& v_left, const Tensor& v_right) const {
    if (v_left.shape() != v_right.shape()) {
        throw ShapeError("fuse_patient: eye feature shapes differ: " +
                         shape_to_string(v_left.shape()) + " vs " +
                         shape_to_string(v_right.shape()));
    }
    return nn::two_layer_mlp(params_, kFusePrefix, concat_last(v_left, v_right));
}

std::array<Tensor, 3> RetClipModel::decouple_text(const Tensor& t0) const {
    return {nn::two_layer_mlp(params_, kDecoupleLeft, t0),
            nn::two_layer_mlp(params_, kDecoupleRight, t0),
            nn::two_layer_mlp(params_, kDecouplePatient, t0)};
}

BatchFeatures RetClipModel::encode_batch(std::span<const data::PatientTriplet> batch) const {
    if (batch.empty()) {
        throw ContractError("encode_batch: batch must be non-empty");
    }
    std::vector<Tensor> lefts, rights, t0s;
    lefts.reserve(batch.size());
    rights.reserve(batch.size());
    t0s.reserve(batch.size());
    for (const data::PatientTriplet& p : batch) {
        lefts.push_back(encode_image(p.left_image));
        rights.push_back(encode_image(p.right_image));
        t0s.push_back(encode_text(p.report_tokens).t0);
    }
    BatchFeatures f;
    f.v_left = concat_rows(lefts);
    f.v_right = concat_rows(rights);
    f.t0 = concat_rows(t0s);
    f.v_patient = fuse_patient(f.v_left, f.v_right);
    auto [tl, tr, tp] = decouple_text(f.t0);
    f.t_left = tl;
    f.t_right = tr;
    f.t_patient = tp;
    return f;
}

SimilarityPair similarity_pair(const Tensor& v, const Tensor& t, const Tensor& log_scale) {
    if (v.rank() != 2 || t.rank() != 2 || v.rows() != t.rows() || v.cols() != t.cols()) {
        throw ShapeError("similarity_pair: feature shapes differ: " +
                         shape_to_string(v.shape()) + " vs " + shape_to_string(t.shape()));
    }
    Tensor scale_val = clamp_max(exp_elem(log_scale), kMaxScale);
    Tensor logits = scale_by(matmul(l2_normalize_rows(v), transpose(l2_normalize_rows(t))),
                             scale_val);
    return SimilarityPair{logits, transpose(logits)};
}

Tensor infonce_symmetric(const SimilarityPair& sim) {
    if (sim.v2t.rank() != 2 || sim.v2t.rows() != sim.v2t.cols() ||
        sim.t2v.rows() != sim.t2v.cols() || sim.t2v.rows() != sim.v2t.rows()) {
        throw ShapeError("infonce_symmetric: similarity matrices must be square, got " +
                         shape_to_string(sim.v2t.shape()) + " and " +
                         shape_to_string(sim.t2v.shape()));
    }
    return scale(add(ce_diag(sim.v2t), ce_diag(sim.t2v)), 0.5);
}

LossOutput tripartite_loss(const BatchFeatures& feats, const Tensor& log_scale,
                           const LossToggles& toggles) {
    toggles.validate();
    LossOutput out;
    out.toggles = toggles;
    out.left = infonce_symmetric(similarity_pair(feats.v_left, feats.t_left, log_scale));
    out.right = infonce_symmetric(similarity_pair(feats.v_right, feats.t_right, log_scale));
    out.patient =
        infonce_symmetric(similarity_pair(feats.v_patient, feats.t_patient, log_scale));
    Tensor total;
    auto accumulate = [&total](const Tensor& term) {
        total = total.defined() ? add(total, term) : term;
    };
    if (toggles.left) accumulate(out.left);
    if (toggles.right) accumulate(out.right);
    if (toggles.patient) accumulate(out.patient);
    out.total = total;
    return out;
}

std::pair<BatchFeatures, LossOutput> forward_batch(const RetClipModel& model,
                                                   std::span<const data::PatientTriplet> batch,
                                                   const LossToggles& toggles) {
    BatchFeatures feats = model.encode_batch(batch);
    LossOutput loss = tripartite_loss(feats, model.logit_scale(), toggles);
    return {std::move(feats), std::move(loss)};
}

namespace {

RetrievalLevel retrieval_level(const Matrix& v, const Matrix& t) {
    Matrix vn = v;
    Matrix tn = t;
    for (Index r = 0; r < vn.rows(); ++r) {
        if (vn.row(r).norm() > 0) vn.row(r).normalize();
        if (tn.row(r).norm() > 0) tn.row(r).normalize();
    }
    Matrix cos = vn * tn.transpose();
    RetrievalLevel lvl;
    const Index n = cos.rows();
    Index v2t_hits = 0, t2v_hits = 0;
    for (Index i = 0; i < n; ++i) {
        Index best;
        cos.row(i).maxCoeff(&best);
        if (best == i) ++v2t_hits;
        cos.col(i).maxCoeff(&best);
        if (best == i) ++t2v_hits;
    }
    lvl.v2t_top1 = static_cast<double>(v2t_hits) / static_cast<double>(n);
    lvl.t2v_top1 = static_cast<double>(t2v_hits) / static_cast<double>(n);
    return lvl;
}

}  // namespace

bool RetrievalReport::all_perfect() const {
    return left.v2t_top1 == 1.0 && left.t2v_top1 == 1.0 && right.v2t_top1 == 1.0 &&
           right.t2v_top1 == 1.0 && patient.v2t_top1 == 1.0 && patient.t2v_top1 == 1.0;
}

RetrievalReport in_batch_retrieval(const BatchFeatures& feats) {
    RetrievalReport rep;
    rep.left = retrieval_level(feats.v_left.value(), feats.t_left.value());
    rep.right = retrieval_level(feats.v_right.value(), feats.t_right.value());
    rep.patient = retrieval_level(feats.v_patient.value(), feats.t_patient.value());
    return rep;
}

}  // namespace retclip
