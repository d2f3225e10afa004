#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vesselnet/common.hpp"

namespace vesselnet {

// 8-bit interleaved pixels, row-major; channels is 1 (gray) or 3 (rgb).
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;

    std::size_t size_bytes() const {
        return std::size_t(width) * height * channels;
    }
};

// Dispatches on magic bytes: PNG signature, or NetPBM "P5"/"P6".
// 8-bit PNGs only; gray-alpha and RGBA drop alpha, palettes expand to RGB.
ImageU8 read_image(const std::string& path);

void write_png(const std::string& path, const ImageU8& img);
void write_pnm(const std::string& path, const ImageU8& img);

}  // namespace vesselnet
