#include "retclip/encoders.hpp"

namespace retclip {

void ImageEncoderConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || d_model <= 0 || n_blocks <= 0) {
        throw ConfigError("image encoder: dimensions must be positive");
    }
    if (channels != 3) {
        throw ConfigError("image encoder: only 3-channel input is supported");
    }
    if (image_size % patch_size != 0) {
        throw ConfigError("image encoder: image_size " + std::to_string(image_size) +
                          " not divisible by patch_size " + std::to_string(patch_size));
    }
    block();  // validates d_model % n_heads
}

void TextEncoderConfig::validate() const {
    if (vocab_size <= 0 || max_len <= 0 || d_model <= 0 || n_blocks <= 0) {
        throw ConfigError("text encoder: dimensions must be positive");
    }
    if (cls_id == pad_id) {
        throw ConfigError("text encoder: cls_id and pad_id must differ");
    }
    if (cls_id < 0 || pad_id < 0 || cls_id >= vocab_size || pad_id >= vocab_size) {
        throw ConfigError("text encoder: reserved token ids must lie in the vocabulary");
    }
    block();
}

Matrix patchify(const Image& image, Index patch_size) {
    if (image.height != image.width || image.height % patch_size != 0) {
        throw ShapeError("patchify: image " + std::to_string(image.height) + "x" +
                         std::to_string(image.width) + " incompatible with patch size " +
                         std::to_string(patch_size));
    }
    const Index grid = image.height / patch_size;
    Matrix out(grid * grid, patch_size * patch_size * 3);
    for (Index py = 0; py < grid; ++py) {
        for (Index px = 0; px < grid; ++px) {
            const Index p = py * grid + px;
            Index k = 0;
            for (Index dy = 0; dy < patch_size; ++dy) {
                for (Index dx = 0; dx < patch_size; ++dx) {
                    const Index y = py * patch_size + dy;
                    const Index x = px * patch_size + dx;
                    out(p, k++) = image.channels[0](y, x);
                    out(p, k++) = image.channels[1](y, x);
                    out(p, k++) = image.channels[2](y, x);
                }
            }
        }
    }
    return out;
}

void add_image_encoder_params(nn::ParamStore& ps, const std::string& prefix,
                              const ImageEncoderConfig& cfg, nn::Initializer& init) {
    cfg.validate();
    nn::add_linear(ps, prefix + ".patch", cfg.patch_dim(), cfg.d_model, init);
    ps.add(prefix + ".cls", init.trunc_normal(1, cfg.d_model));
    ps.add(prefix + ".pos", init.trunc_normal(cfg.seq_len(), cfg.d_model));
    for (int b = 0; b < cfg.n_blocks; ++b) {
        nn::add_transformer_block(ps, prefix + ".block" + std::to_string(b), cfg.block(), init);
    }
    nn::add_layer_norm(ps, prefix + ".ln_final", cfg.d_model);
    if (cfg.use_projection) {
        nn::add_linear(ps, prefix + ".proj", cfg.d_model, cfg.d_model, init);
    }
}

void add_text_encoder_params(nn::ParamStore& ps, const std::string& prefix,
                             const TextEncoderConfig& cfg, nn::Initializer& init) {
    cfg.validate();
    nn::add_embedding(ps, prefix + ".tok", cfg.vocab_size, cfg.d_model, init);
    ps.add(prefix + ".pos", init.trunc_normal(cfg.max_len, cfg.d_model));
    for (int b = 0; b < cfg.n_blocks; ++b) {
        nn::add_transformer_block(ps, prefix + ".block" + std::to_string(b), cfg.block(), init);
    }
    nn::add_layer_norm(ps, prefix + ".ln_final", cfg.d_model);
}

Tensor encode_image(const nn::ParamStore& ps, const std::string& prefix,
                    const ImageEncoderConfig& cfg, const Image& image) {
    if (image.height != cfg.image_size || image.width != cfg.image_size) {
        throw ShapeError("encode_image: expected " + std::to_string(cfg.image_size) + "x" +
                         std::to_string(cfg.image_size) + " image, got " +
                         std::to_string(image.height) + "x" + std::to_string(image.width));
    }
    Tensor patches = Tensor::from_matrix(patchify(image, cfg.patch_size));
    Tensor x = nn::linear(ps, prefix + ".patch", patches);
    x = concat_rows({ps.at(prefix + ".cls"), x});
    x = add(x, ps.at(prefix + ".pos"));
    for (int b = 0; b < cfg.n_blocks; ++b) {
        x = nn::transformer_block(ps, prefix + ".block" + std::to_string(b), x, cfg.block());
    }
    x = nn::layer_norm_at(ps, prefix + ".ln_final", x);
    Tensor v = row(x, 0);
    if (cfg.use_projection) {
        v = nn::linear(ps, prefix + ".proj", v);
    }
    return v;
}

std::vector<int> pad_tokens(const TextEncoderConfig& cfg, const std::vector<int>& tokens) {
    if (tokens.empty() || tokens.front() != cfg.cls_id) {
        throw ContractError("encode_text: token sequence must start with cls_id");
    }
    for (int id : tokens) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw VocabError("encode_text: token id " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(cfg.vocab_size));
        }
    }
    std::vector<int> padded = tokens;
    const std::size_t keep = static_cast<std::size_t>(cfg.max_len) - 1;
    if (padded.size() > keep) padded.resize(keep);
    padded.resize(static_cast<std::size_t>(cfg.max_len), cfg.pad_id);
    return padded;
}

EncodedText encode_text(const nn::ParamStore& ps, const std::string& prefix,
                        const TextEncoderConfig& cfg, const std::vector<int>& tokens) {
    std::vector<int> padded = pad_tokens(cfg, tokens);
    Tensor x = nn::embedding_lookup(ps, prefix + ".tok", padded);
    x = add(x, ps.at(prefix + ".pos"));
    for (int b = 0; b < cfg.n_blocks; ++b) {
        x = nn::transformer_block(ps, prefix + ".block" + std::to_string(b), x, cfg.block());
    }
    x = nn::layer_norm_at(ps, prefix + ".ln_final", x);
    return EncodedText{x, row(x, 0)};
}

}  // namespace retclip
