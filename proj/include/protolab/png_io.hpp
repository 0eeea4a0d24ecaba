#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace protolab {

struct PngImage {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 (gray) or 3 (rgb)
    std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

PngImage read_png(const std::string& path);
void write_png(const std::string& path, const PngImage& img);

}  // namespace protolab
