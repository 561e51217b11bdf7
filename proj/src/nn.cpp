#include "retclip/nn.hpp"

#include <cmath>

namespace retclip::nn {

// ---- ParamStore --------------------------------------------------------

Tensor& ParamStore::insert(const std::string& name, Tensor t) {
    auto [it, inserted] = params_.emplace(name, std::move(t));
    if (!inserted) {
        throw ConfigError("duplicate parameter name: " + name);
    }
    return it->second;
}

Tensor& ParamStore::add(const std::string& name, Matrix value) {
    return insert(name, Tensor::param(std::move(value)));
}

Tensor& ParamStore::add_row(const std::string& name, Matrix value) {
    return insert(name, Tensor::from_row(std::move(value), true));
}

Tensor& ParamStore::add_scalar(const std::string& name, double value) {
    return insert(name, Tensor::scalar(value, true));
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw ConfigError("unknown parameter: " + name);
    }
    return it->second;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, t] : params_) out.push_back(name);
    return out;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += static_cast<std::size_t>(t.size());
    return n;
}

void ParamStore::clear_grads() const {
    for (const auto& [name, t] : params_) t.clear_grad();
}

// ---- config / init ------------------------------------------------------

TransformerBlockConfig::TransformerBlockConfig(Index d, int heads, double ratio)
    : d_model(d), n_heads(heads), mlp_ratio(ratio) {
    if (d <= 0 || heads <= 0 || ratio <= 0) {
        throw ConfigError("transformer block: dimensions must be positive");
    }
    if (d % heads != 0) {
        throw ConfigError("transformer block: d_model " + std::to_string(d) +
                          " not divisible by n_heads " + std::to_string(heads));
    }
}

Matrix Initializer::trunc_normal(Index rows, Index cols, double std_dev) {
    std::normal_distribution<double> dist(0.0, std_dev);
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        for (Index j = 0; j < cols; ++j) {
            double v = dist(rng_);
            while (std::abs(v) > 2.0 * std_dev) v = dist(rng_);
            m(i, j) = v;
        }
    }
    return m;
}

void add_linear(ParamStore& ps, const std::string& name, Index in, Index out, Initializer& init) {
    ps.add(name + ".w", init.trunc_normal(in, out));
    ps.add_row(name + ".b", Matrix::Zero(1, out));
}

void add_layer_norm(ParamStore& ps, const std::string& name, Index d) {
    ps.add_row(name + ".gain", Matrix::Ones(1, d));
    ps.add_row(name + ".bias", Matrix::Zero(1, d));
}

void add_mlp(ParamStore& ps, const std::string& name, Index in, Index hidden, Index out,
             Initializer& init) {
    add_linear(ps, name + ".fc1", in, hidden, init);
    add_linear(ps, name + ".fc2", hidden, out, init);
}

void add_transformer_block(ParamStore& ps, const std::string& name,
                           const TransformerBlockConfig& cfg, Initializer& init) {
    add_layer_norm(ps, name + ".ln1", cfg.d_model);
    add_linear(ps, name + ".attn.q", cfg.d_model, cfg.d_model, init);
    add_linear(ps, name + ".attn.k", cfg.d_model, cfg.d_model, init);
    add_linear(ps, name + ".attn.v", cfg.d_model, cfg.d_model, init);
    add_linear(ps, name + ".attn.out", cfg.d_model, cfg.d_model, init);
    add_layer_norm(ps, name + ".ln2", cfg.d_model);
    add_mlp(ps, name + ".mlp", cfg.d_model, cfg.mlp_hidden(), cfg.d_model, init);
}

void add_embedding(ParamStore& ps, const std::string& name, Index rows, Index d,
                   Initializer& init) {
    ps.add(name, init.trunc_normal(rows, d));
}

// ---- forward ------------------------------------------------------------

Tensor linear(const ParamStore& ps, const std::string& name, const Tensor& x) {
    return add(matmul(x, ps.at(name + ".w")), ps.at(name + ".b"));
}

Tensor layer_norm_at(const ParamStore& ps, const std::string& name, const Tensor& x) {
    return layer_norm(x, ps.at(name + ".gain"), ps.at(name + ".bias"), kLayerNormEps);
}

Tensor two_layer_mlp(const ParamStore& ps, const std::string& name, const Tensor& x) {
    return linear(ps, name + ".fc2", gelu(linear(ps, name + ".fc1", x)));
}

Tensor multi_head_attention(const ParamStore& ps, const std::string& name, const Tensor& x,
                            int n_heads) {
    const Index d = x.cols();
    if (n_heads <= 0 || d % n_heads != 0) {
        throw ConfigError("multi_head_attention: d " + std::to_string(d) +
                          " not divisible by n_heads " + std::to_string(n_heads));
    }
    const Index hd = d / n_heads;
    Tensor q = linear(ps, name + ".q", x);
    Tensor k = linear(ps, name + ".k", x);
    Tensor v = linear(ps, name + ".v", x);
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Tensor> heads;
    heads.reserve(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        Tensor qh = col_block(q, h * hd, hd);
        Tensor kh = col_block(k, h * hd, hd);
        Tensor vh = col_block(v, h * hd, hd);
        Tensor weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_hd));
        heads.push_back(matmul(weights, vh));
    }
    Tensor merged = heads.front();
    for (std::size_t h = 1; h < heads.size(); ++h) merged = concat_last(merged, heads[h]);
    return linear(ps, name + ".out", merged);
}

Tensor transformer_block(const ParamStore& ps, const std::string& name, const Tensor& x,
                         const TransformerBlockConfig& cfg) {
    Tensor h = add(x, multi_head_attention(ps, name + ".attn",
                                           layer_norm_at(ps, name + ".ln1", x), cfg.n_heads));
    return add(h, two_layer_mlp(ps, name + ".mlp", layer_norm_at(ps, name + ".ln2", h)));
}

Tensor embedding_lookup(const ParamStore& ps, const std::string& name,
                        const std::vector<int>& ids) {
    return embedding_rows(ps.at(name), ids);
}

}  // namespace retclip::nn
