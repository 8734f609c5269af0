#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace emdt {

/// Serializes 8-bit RGB pixels (row-major, interleaved r,g,b) to a PNG
/// byte stream using stored (uncompressed) deflate blocks. The output is a
/// pure function of the pixels.
std::vector<uint8_t> encode_png_rgb8(int64_t width, int64_t height, const std::vector<uint8_t>& rgb);

void write_png_rgb8(const std::string& path, int64_t width, int64_t height, const std::vector<uint8_t>& rgb);

}  // namespace emdt
