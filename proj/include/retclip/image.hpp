#pragma once

#include <array>
#include <filesystem>

#include "retclip/tensor.hpp"

namespace retclip {

// Channel-planar RGB raster. Values are doubles, nominally in [0, 1] for
// stored images; normalized images may leave that range.
struct Image {
    Index height = 0;
    Index width = 0;
    std::array<Matrix, 3> channels;

    static Image zero(Index h, Index w);
    static Image constant(Index h, Index w, double r, double g, double b);

    bool same_size(const Image& o) const { return height == o.height && width == o.width; }
    bool all_finite() const;
};

// 8-bit RGB PNG. Writing quantizes with round(clamp(v, 0, 1) * 255).
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

}  // namespace retclip
