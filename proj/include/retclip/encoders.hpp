#pragma once

#include <string>
#include <vector>

#include "retclip/image.hpp"
#include "retclip/nn.hpp"

namespace retclip {

// Desk-scale defaults throughout: 32x32 images, 8x8 patches, d=64, 2 blocks.
struct ImageEncoderConfig {
    Index image_size = 32;
    Index patch_size = 8;
    int channels = 3;
    Index d_model = 64;
    int n_blocks = 2;
    int n_heads = 2;
    double mlp_ratio = 4.0;
    // Optional linear projection of the class token before contrastive
    // alignment (CLIP convention); off by default.
    bool use_projection = false;

    void validate() const;
    Index n_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
    Index patch_dim() const { return patch_size * patch_size * channels; }
    Index seq_len() const { return n_patches() + 1; }
    nn::TransformerBlockConfig block() const {
        return nn::TransformerBlockConfig(d_model, n_heads, mlp_ratio);
    }
};

struct TextEncoderConfig {
    int vocab_size = 256;
    Index max_len = 16;
    Index d_model = 64;
    int n_blocks = 2;
    int n_heads = 2;
    double mlp_ratio = 4.0;
    int cls_id = 0;
    int pad_id = 1;

    void validate() const;
    nn::TransformerBlockConfig block() const {
        return nn::TransformerBlockConfig(d_model, n_heads, mlp_ratio);
    }
};

struct EncodedText {
    Tensor t_seq;  // [l x d]
    Tensor t0;     // row 0 of t_seq, the classification embedding
};

// Non-overlapping row-major patches, each flattened pixel-major with
// channel-last ordering: [n_patches x (p*p*3)].
Matrix patchify(const Image& image, Index patch_size);

void add_image_encoder_params(nn::ParamStore& ps, const std::string& prefix,
                              const ImageEncoderConfig& cfg, nn::Initializer& init);
void add_text_encoder_params(nn::ParamStore& ps, const std::string& prefix,
                             const TextEncoderConfig& cfg, nn::Initializer& init);

// patchify -> patch embedding -> class token -> positions -> blocks ->
// final layer norm -> class-token row (optionally projected).
Tensor encode_image(const nn::ParamStore& ps, const std::string& prefix,
                    const ImageEncoderConfig& cfg, const Image& image);

// Normalizes a token sequence to exactly max_len: sequences longer than
// max_len - 1 keep their first max_len - 1 tokens, then pad_id fills the rest.
std::vector<int> pad_tokens(const TextEncoderConfig& cfg, const std::vector<int>& tokens);

// token + position embeddings -> blocks -> final layer norm.
EncodedText encode_text(const nn::ParamStore& ps, const std::string& prefix,
                        const TextEncoderConfig& cfg, const std::vector<int>& tokens);

}  // namespace retclip
