#include "retclip/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace retclip {

Image Image::zero(Index h, Index w) {
    Image img;
    img.height = h;
    img.width = w;
    for (auto& ch : img.channels) ch = Matrix::Zero(h, w);
    return img;
}

Image Image::constant(Index h, Index w, double r, double g, double b) {
    Image img;
    img.height = h;
    img.width = w;
    img.channels[0] = Matrix::Constant(h, w, r);
    img.channels[1] = Matrix::Constant(h, w, g);
    img.channels[2] = Matrix::Constant(h, w, b);
    return img;
}

bool Image::all_finite() const {
    return channels[0].allFinite() && channels[1].allFinite() && channels[2].allFinite();
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

unsigned char quantize(double v) {
    double c = std::clamp(v, 0.0, 1.0);
    return static_cast<unsigned char>(std::lround(c * 255.0));
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) {
        throw IoError("cannot open for writing: " + path.string());
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG write failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> rowbuf(static_cast<std::size_t>(img.width) * 3);
    for (Index y = 0; y < img.height; ++y) {
        for (Index x = 0; x < img.width; ++x) {
            rowbuf[static_cast<std::size_t>(x) * 3 + 0] = quantize(img.channels[0](y, x));
            rowbuf[static_cast<std::size_t>(x) * 3 + 1] = quantize(img.channels[1](y, x));
            rowbuf[static_cast<std::size_t>(x) * 3 + 2] = quantize(img.channels[2](y, x));
        }
        png_write_row(png, rowbuf.data());
    }
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) {
        throw IoError("cannot open for reading: " + path.string());
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("PNG read failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    // normalize to 8-bit RGB regardless of on-disk layout
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    if (png_get_channels(png, info) != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unexpected channel count in " + path.string());
    }
    Image img = Image::zero(static_cast<Index>(h), static_cast<Index>(w));
    std::vector<unsigned char> rowbuf(static_cast<std::size_t>(w) * 3);
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, rowbuf.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x) {
            img.channels[0](y, x) = rowbuf[x * 3 + 0] / 255.0;
            img.channels[1](y, x) = rowbuf[x * 3 + 1] / 255.0;
            img.channels[2](y, x) = rowbuf[x * 3 + 2] / 255.0;
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

}  // namespace retclip
