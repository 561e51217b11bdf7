#include "retclip/gradcheck.hpp"

#include <ostream>
#include <random>

#include "retclip/model.hpp"

namespace retclip::gradcheck {

namespace {

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    Matrix m(r, c);
    for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) m(i, j) = dist(rng);
    return m;
}

Image random_image(Index size, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    Image img = Image::zero(size, size);
    for (auto& ch : img.channels)
        for (Index y = 0; y < size; ++y)
            for (Index x = 0; x < size; ++x) ch(y, x) = dist(rng);
    return img;
}

struct Runner {
    double eps;
    std::vector<ComponentResult> results;

    void check(const std::string& name, const std::function<Tensor()>& f,
               std::vector<Tensor> params) {
        results.push_back({name, finite_difference_check(f, params, eps)});
    }
};

ModelConfig gradcheck_model_config() {
    ModelConfig cfg;
    cfg.image.image_size = 8;
    cfg.image.patch_size = 4;
    cfg.image.d_model = 8;
    cfg.image.n_blocks = 1;
    cfg.image.n_heads = 2;
    cfg.text.vocab_size = 12;
    cfg.text.max_len = 5;
    cfg.text.d_model = 8;
    cfg.text.n_blocks = 1;
    cfg.text.n_heads = 2;
    // moderate temperature: the CLIP-style exp(2.66) softmax has a third
    // derivative large enough that central-difference truncation alone
    // exceeds 1e-4 at eps=1e-5; the analytic path is identical either way
    cfg.logit_scale_init = std::log(2.0);
    return cfg;
}

}  // namespace

bool Report::passed() const {
    for (const ComponentResult& c : components) {
        if (!(c.max_rel_error <= threshold)) return false;
    }
    return true;
}

double Report::worst() const {
    double w = 0.0;
    for (const ComponentResult& c : components) w = std::max(w, c.max_rel_error);
    return w;
}

Report run_all(double eps, double threshold, bool corrupt) {
    Report report;
    report.eps = eps;
    report.threshold = threshold;
    Runner run{eps, {}};
    std::mt19937_64 rng(0xC0FFEE);

    // ---- elementary ops -------------------------------------------------
    {
        Tensor a = Tensor::param(random_matrix(3, 4, rng));
        Tensor b = Tensor::param(random_matrix(4, 2, rng));
        run.check("matmul", [&]() { return mean_all(matmul(a, b)); }, {a, b});
    }
    {
        Tensor a = Tensor::param(random_matrix(3, 4, rng));
        run.check("transpose", [&]() { return mean_all(mul(transpose(a), transpose(a))); },
                  {a});
    }
    {
        Tensor a = Tensor::param(random_matrix(3, 4, rng));
        Tensor b = Tensor::param(random_matrix(3, 4, rng));
        run.check("add", [&]() { return mean_all(mul(add(a, b), add(a, b))); }, {a, b});
    }
    {
        Tensor a = Tensor::param(random_matrix(3, 4, rng));
        Tensor bias = Tensor::from_row(random_matrix(1, 4, rng), true);
        run.check("add_bias", [&]() { return mean_all(mul(add(a, bias), add(a, bias))); },
                  {a, bias});
    }
    {
        Tensor a = Tensor::param(random_matrix(3, 3, rng));
        Tensor b = Tensor::param(random_matrix(3, 3, rng));
        run.check("mul", [&]() { return mean_all(mul(a, b)); }, {a, b});
    }
    {
        Tensor a = Tensor::param(random_matrix(2, 5, rng));
        run.check("scale", [&]() { return mean_all(mul(scale(a, -1.7), scale(a, 0.3))); },
                  {a});
    }
    {
        Tensor a = Tensor::param(random_matrix(2, 3, rng));
        Tensor s = Tensor::scalar(0.8, true);
        run.check("scale_by", [&]() { return mean_all(mul(scale_by(a, s), a)); }, {a, s});
    }
    {
        Tensor a = Tensor::param(random_matrix(2, 3, rng, 0.5));
        run.check("exp", [&]() { return mean_all(exp_elem(a)); }, {a});
    }
    {
        Tensor a = Tensor::param(random_matrix(2, 4, rng));
        run.check("clamp_max", [&]() { return mean_all(mul(clamp_max(a, 0.4), a)); }, {a});
    }
    {
        Tensor a = Tensor::param(random_matrix(3, 3, rng));
        run.check("gelu", [&]() { return mean_all(gelu(a)); }, {a});
    }
    {
        Tensor a = Tensor::param(random_matrix(3, 5, rng, 1.5));
        run.check("softmax_rows", [&]() { return mean_all(mul(softmax_rows(a), a)); }, {a});
    }
    {
        Tensor a = Tensor::param(random_matrix(3, 5, rng, 1.5));
        run.check("log_softmax_rows",
                  [&]() { return mean_all(mul(log_softmax_rows(a), a)); }, {a});
    }
    {
        Tensor x = Tensor::param(random_matrix(3, 6, rng));
        Tensor gain = Tensor::from_row(Matrix::Ones(1, 6) + random_matrix(1, 6, rng, 0.2),
                                       true);
        Tensor bias = Tensor::from_row(random_matrix(1, 6, rng, 0.2), true);
        run.check("layer_norm",
                  [&]() { return mean_all(mul(layer_norm(x, gain, bias, 1e-5), x)); },
                  {x, gain, bias});
    }
    {
        Tensor a = Tensor::param(random_matrix(3, 4, rng) + Matrix::Constant(3, 4, 0.5));
        run.check("l2_normalize_rows",
                  [&]() { return mean_all(mul(l2_normalize_rows(a), a)); }, {a});
    }
    {
        Tensor a = Tensor::param(random_matrix(3, 2, rng));
        Tensor b = Tensor::param(random_matrix(3, 3, rng));
        run.check("concat_last",
                  [&]() {
                      Tensor c = concat_last(a, b);
                      return mean_all(mul(c, c));
                  },
                  {a, b});
    }
    {
        Tensor a = Tensor::param(random_matrix(2, 4, rng));
        Tensor b = Tensor::param(random_matrix(3, 4, rng));
        run.check("concat_rows",
                  [&]() {
                      Tensor c = concat_rows({a, b});
                      return mean_all(mul(c, c));
                  },
                  {a, b});
    }
    {
        Tensor a = Tensor::param(random_matrix(4, 3, rng));
        run.check("row",
                  [&]() { return mean_all(mul(row(a, 2), row(a, 0))); }, {a});
    }
    {
        Tensor a = Tensor::param(random_matrix(3, 6, rng));
        run.check("col_block",
                  [&]() { return mean_all(mul(col_block(a, 1, 3), col_block(a, 2, 3))); },
                  {a});
    }
    {
        Tensor a = Tensor::param(random_matrix(4, 4, rng));
        run.check("diag", [&]() { return mean_all(mul(diag(a), diag(a))); }, {a});
    }
    {
        Tensor a = Tensor::param(random_matrix(3, 4, rng));
        run.check("mean_all", [&]() { return mean_all(a); }, {a});
    }
    {
        Tensor table = Tensor::param(random_matrix(7, 4, rng));
        std::vector<int> ids{2, 5, 5, 0};
        run.check("embedding_rows",
                  [&]() {
                      Tensor e = embedding_rows(table, ids);
                      return mean_all(mul(e, e));
                  },
                  {table});
    }
    {
        Tensor logits = Tensor::param(random_matrix(4, 3, rng));
        std::vector<int> targets{0, 2, 1, 1};
        run.check("softmax_cross_entropy",
                  [&]() { return softmax_cross_entropy(logits, targets); }, {logits});
    }
    {
        Tensor logits = Tensor::param(random_matrix(4, 3, rng));
        Matrix targets = (random_matrix(4, 3, rng).array() > 0).cast<double>().matrix();
        run.check("sigmoid_bce", [&]() { return sigmoid_bce(logits, targets); }, {logits});
    }

    // ---- nn layers ------------------------------------------------------
    {
        nn::ParamStore ps;
        nn::Initializer init(11);
        nn::add_linear(ps, "lin", 5, 3, init);
        Tensor x = Tensor::from_matrix(random_matrix(4, 5, rng));
        std::vector<Tensor> params;
        for (const auto& [name, t] : ps) params.push_back(t);
        run.check("linear",
                  [&]() {
                      Tensor y = nn::linear(ps, "lin", x);
                      return mean_all(mul(y, y));
                  },
                  params);
    }
    {
        nn::ParamStore ps;
        nn::Initializer init(12);
        nn::add_mlp(ps, "mlp", 4, 6, 4, init);
        Tensor x = Tensor::from_matrix(random_matrix(3, 4, rng));
        std::vector<Tensor> params;
        for (const auto& [name, t] : ps) params.push_back(t);
        run.check("two_layer_mlp",
                  [&]() {
                      Tensor y = nn::two_layer_mlp(ps, "mlp", x);
                      return mean_all(mul(y, y));
                  },
                  params);
    }
    {
        nn::ParamStore ps;
        nn::Initializer init(13);
        nn::add_linear(ps, "attn.q", 8, 8, init);
        nn::add_linear(ps, "attn.k", 8, 8, init);
        nn::add_linear(ps, "attn.v", 8, 8, init);
        nn::add_linear(ps, "attn.out", 8, 8, init);
        Tensor x = Tensor::from_matrix(random_matrix(4, 8, rng, 0.7));
        std::vector<Tensor> params;
        for (const auto& [name, t] : ps) params.push_back(t);
        run.check("multi_head_attention",
                  [&]() {
                      Tensor y = nn::multi_head_attention(ps, "attn", x, 2);
                      return mean_all(mul(y, y));
                  },
                  params);
    }
    {
        nn::ParamStore ps;
        nn::TransformerBlockConfig cfg(8, 2);
        nn::Initializer init(14);
        nn::add_transformer_block(ps, "blk", cfg, init);
        Tensor x = Tensor::from_matrix(random_matrix(3, 8, rng, 0.7));
        std::vector<Tensor> params;
        for (const auto& [name, t] : ps) params.push_back(t);
        run.check("transformer_block",
                  [&]() {
                      Tensor y = nn::transformer_block(ps, "blk", x, cfg);
                      return mean_all(mul(y, y));
                  },
                  params);
    }

    // ---- encoders and heads --------------------------------------------
    ModelConfig mcfg = gradcheck_model_config();
    {
        nn::ParamStore ps;
        nn::Initializer init(15);
        add_image_encoder_params(ps, "img", mcfg.image, init);
        Image img = random_image(mcfg.image.image_size, rng);
        std::vector<Tensor> params;
        for (const auto& [name, t] : ps) params.push_back(t);
        run.check("encode_image",
                  [&]() {
                      Tensor v = encode_image(ps, "img", mcfg.image, img);
                      return mean_all(mul(v, v));
                  },
                  params);
    }
    {
        nn::ParamStore ps;
        nn::Initializer init(16);
        add_text_encoder_params(ps, "txt", mcfg.text, init);
        std::vector<int> tokens{mcfg.text.cls_id, 4, 7, 9};
        std::vector<Tensor> params;
        for (const auto& [name, t] : ps) params.push_back(t);
        run.check("encode_text",
                  [&]() {
                      EncodedText e = encode_text(ps, "txt", mcfg.text, tokens);
                      return mean_all(mul(e.t0, e.t0));
                  },
                  params);
    }
    {
        RetClipModel model(mcfg, 17);
        Tensor vl = Tensor::from_matrix(random_matrix(3, 8, rng));
        Tensor vr = Tensor::from_matrix(random_matrix(3, 8, rng));
        Tensor t0 = Tensor::from_matrix(random_matrix(3, 8, rng));
        std::vector<Tensor> params;
        for (const auto& [name, t] : model.params()) {
            if (name.starts_with("fuse.") || name.starts_with("dec_")) params.push_back(t);
        }
        run.check("fuse_and_decouple",
                  [&]() {
                      Tensor vp = model.fuse_patient(vl, vr);
                      auto [tl, tr, tp] = model.decouple_text(t0);
                      return mean_all(mul(vp, add(tl, add(tr, tp))));
                  },
                  params);
    }
    {
        Tensor v = Tensor::param(random_matrix(3, 6, rng));
        Tensor t = Tensor::param(random_matrix(3, 6, rng));
        Tensor ls = Tensor::scalar(std::log(5.0), true);
        run.check("similarity_infonce",
                  [&]() { return infonce_symmetric(similarity_pair(v, t, ls)); }, {v, t, ls});
    }
    {
        // the full model composed end to end at d=8, N=2
        RetClipModel model(mcfg, 18);
        std::vector<data::PatientTriplet> batch(2);
        for (int i = 0; i < 2; ++i) {
            batch[static_cast<std::size_t>(i)].patient_id = "p" + std::to_string(i);
            batch[static_cast<std::size_t>(i)].left_image =
                random_image(mcfg.image.image_size, rng);
            batch[static_cast<std::size_t>(i)].right_image =
                random_image(mcfg.image.image_size, rng);
            batch[static_cast<std::size_t>(i)].report_tokens = {
                mcfg.text.cls_id, 3 + i, 5, static_cast<int>(rng() % 6) + 4};
        }
        std::vector<Tensor> params;
        for (const auto& [name, t] : model.params()) params.push_back(t);
        run.check("tripartite_end_to_end",
                  [&]() { return forward_batch(model, batch).second.total; }, params);
    }

    if (corrupt && !run.results.empty()) {
        run.results.front().max_rel_error += 1.0;  // negative-control hook
    }
    report.components = std::move(run.results);
    return report;
}

void print(const Report& report, std::ostream& os) {
    for (const ComponentResult& c : report.components) {
        const bool ok = c.max_rel_error <= report.threshold;
        os << (ok ? "[PASS] " : "[FAIL] ") << c.name << "  max_rel_err=" << c.max_rel_error
           << "\n";
    }
    os << (report.passed() ? "gradcheck OK" : "gradcheck FAILED") << " (worst "
       << report.worst() << ", threshold " << report.threshold << ", eps " << report.eps
       << ")\n";
}

}  // namespace retclip::gradcheck
