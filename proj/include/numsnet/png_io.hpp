#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace numsnet {

// Minimal grayscale / RGB PNG codec for slice images, 16-bit label masks and
// overlay exports.

struct GrayImage {
    int height = 0;
    int width = 0;
    int bits = 8;  // 8 or 16
    std::vector<std::uint16_t> v;
};

GrayImage read_png_gray(const std::string& path);
void write_png_gray8(const std::string& path, int height, int width, const std::uint8_t* data);
void write_png_gray16(const std::string& path, int height, int width, const std::uint16_t* data);
// Interleaved RGB, 3 bytes per pixel.
void write_png_rgb8(const std::string& path, int height, int width, const std::uint8_t* data);

}  // namespace numsnet
