#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "retclip/tensor.hpp"

namespace retclip::nn {

inline constexpr double kLayerNormEps = 1e-5;

// Named-parameter registry. Iteration order is lexicographic (std::map), so
// optimizer sweeps and checkpoint layouts are deterministic.
class ParamStore {
  public:
    Tensor& add(const std::string& name, Matrix value);      // rank-2 parameter
    Tensor& add_row(const std::string& name, Matrix value);  // rank-1 parameter (1 x n)
    Tensor& add_scalar(const std::string& name, double value);

    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    std::vector<std::string> names() const;
    std::size_t tensor_count() const { return params_.size(); }
    std::size_t scalar_count() const;
    void clear_grads() const;

    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

  private:
    Tensor& insert(const std::string& name, Tensor t);
    std::map<std::string, Tensor> params_;
};

struct TransformerBlockConfig {
    TransformerBlockConfig(Index d_model, int n_heads, double mlp_ratio = 4.0);
    Index d_model;
    int n_heads;
    double mlp_ratio;
    Index head_dim() const { return d_model / n_heads; }
    Index mlp_hidden() const { return static_cast<Index>(d_model * mlp_ratio); }
};

// Deterministic weight initialization: truncated normal (resampled beyond
// two standard deviations), std 0.02 by default.
class Initializer {
  public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}
    Matrix trunc_normal(Index rows, Index cols, double std_dev = 0.02);
    std::mt19937_64& rng() { return rng_; }

  private:
    std::mt19937_64 rng_;
};

// Parameter registration. Weights are truncated-normal, biases zero,
// layer-norm gains one.
void add_linear(ParamStore& ps, const std::string& name, Index in, Index out, Initializer& init);
void add_layer_norm(ParamStore& ps, const std::string& name, Index d);
void add_mlp(ParamStore& ps, const std::string& name, Index in, Index hidden, Index out,
             Initializer& init);
void add_transformer_block(ParamStore& ps, const std::string& name,
                           const TransformerBlockConfig& cfg, Initializer& init);
void add_embedding(ParamStore& ps, const std::string& name, Index rows, Index d,
                   Initializer& init);

// Forward passes; x may be rank-1 (single row) or rank-2.
Tensor linear(const ParamStore& ps, const std::string& name, const Tensor& x);
Tensor layer_norm_at(const ParamStore& ps, const std::string& name, const Tensor& x);
// linear -> GELU -> linear
Tensor two_layer_mlp(const ParamStore& ps, const std::string& name, const Tensor& x);
// Self-attention over a [l x d] sequence; no masking.
Tensor multi_head_attention(const ParamStore& ps, const std::string& name, const Tensor& x,
                            int n_heads);
// Pre-norm: x + attn(ln1(x)), then + mlp(ln2(.)).
Tensor transformer_block(const ParamStore& ps, const std::string& name, const Tensor& x,
                         const TransformerBlockConfig& cfg);
Tensor embedding_lookup(const ParamStore& ps, const std::string& name,
                        const std::vector<int>& ids);

}  // namespace retclip::nn
