#include "numsnet/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

#include "numsnet/common.hpp"

namespace numsnet {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

GrayImage read_png_gray(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open image: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_read_png(png, info,
                 PNG_TRANSFORM_STRIP_ALPHA | PNG_TRANSFORM_PACKING | PNG_TRANSFORM_EXPAND |
                     PNG_TRANSFORM_SWAP_ENDIAN,
                 nullptr);

    GrayImage img;
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.bits = png_get_bit_depth(png, info);
    const auto color = png_get_color_type(png, info);
    if (color != PNG_COLOR_TYPE_GRAY || (img.bits != 8 && img.bits != 16)) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("image must be 8- or 16-bit grayscale: " + path);
    }
    png_bytepp rows = png_get_rows(png, info);
    img.v.resize(static_cast<std::size_t>(img.height) * img.width);
    for (int y = 0; y < img.height; ++y) {
        if (img.bits == 8) {
            const std::uint8_t* r = rows[y];
            for (int x = 0; x < img.width; ++x) img.v[y * img.width + x] = r[x];
        } else {
            const std::uint16_t* r = reinterpret_cast<const std::uint16_t*>(rows[y]);
            for (int x = 0; x < img.width; ++x) img.v[y * img.width + x] = r[x];
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

namespace {

void write_png(const std::string& path, int height, int width, int bits, int color_type,
               const std::uint8_t* bytes, std::size_t row_bytes) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open image for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to encode PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
                 bits, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y)
        rows[y] = const_cast<png_bytep>(bytes + static_cast<std::size_t>(y) * row_bytes);
    png_set_rows(png, info, rows.data());
    png_write_png(png, info, bits == 16 ? PNG_TRANSFORM_SWAP_ENDIAN : PNG_TRANSFORM_IDENTITY,
                  nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png_gray8(const std::string& path, int height, int width, const std::uint8_t* data) {
    write_png(path, height, width, 8, PNG_COLOR_TYPE_GRAY, data,
              static_cast<std::size_t>(width));
}

void write_png_gray16(const std::string& path, int height, int width, const std::uint16_t* data) {
    write_png(path, height, width, 16, PNG_COLOR_TYPE_GRAY,
              reinterpret_cast<const std::uint8_t*>(data), static_cast<std::size_t>(width) * 2);
}

void write_png_rgb8(const std::string& path, int height, int width, const std::uint8_t* data) {
    write_png(path, height, width, 8, PNG_COLOR_TYPE_RGB, data,
              static_cast<std::size_t>(width) * 3);
}

}  // namespace numsnet
