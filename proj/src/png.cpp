#include "emdt/png.hpp"

#include <array>
#include <fstream>

#include "emdt/common.hpp"

namespace emdt {

namespace {

uint32_t crc32_table_entry(uint32_t n) {
    uint32_t c = n;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
    return c;
}

uint32_t crc32(const uint8_t* data, size_t len, uint32_t crc = 0xffffffffu) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t n = 0; n < 256; ++n) t[n] = crc32_table_entry(n);
        return t;
    }();
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    return crc;
}

uint32_t adler32(const uint8_t* data, size_t len) {
    uint32_t a = 1, b = 0;
    for (size_t i = 0; i < len; ++i) {
        a = (a + data[i]) % 65521u;
        b = (b + a) % 65521u;
    }
    return (b << 16) | a;
}

void push_u32be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void push_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& payload) {
    push_u32be(out, static_cast<uint32_t>(payload.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const uint32_t crc = crc32(out.data() + start, out.size() - start) ^ 0xffffffffu;
    push_u32be(out, crc);
}

/// zlib stream made of stored deflate blocks (max 65535 bytes each).
std::vector<uint8_t> zlib_stored(const std::vector<uint8_t>& raw) {
    std::vector<uint8_t> z;
    z.push_back(0x78);  // 32K window, deflate
    z.push_back(0x01);  // fastest, no dict; (0x7801 % 31 == 0)
    size_t off = 0;
    do {
        const size_t n = std::min<size_t>(65535, raw.size() - off);
        const bool final = off + n == raw.size();
        z.push_back(final ? 1 : 0);
        z.push_back(static_cast<uint8_t>(n & 0xff));
        z.push_back(static_cast<uint8_t>(n >> 8));
        z.push_back(static_cast<uint8_t>(~n & 0xff));
        z.push_back(static_cast<uint8_t>((~n >> 8) & 0xff));
        z.insert(z.end(), raw.begin() + static_cast<ptrdiff_t>(off), raw.begin() + static_cast<ptrdiff_t>(off + n));
        off += n;
    } while (off < raw.size());
    push_u32be(z, adler32(raw.data(), raw.size()));
    return z;
}

}  // namespace

std::vector<uint8_t> encode_png_rgb8(int64_t width, int64_t height, const std::vector<uint8_t>& rgb) {
    if (static_cast<int64_t>(rgb.size()) != width * height * 3)
        throw IoError("png: pixel buffer size does not match " + std::to_string(width) + "x" + std::to_string(height));
    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

    std::vector<uint8_t> ihdr;
    push_u32be(ihdr, static_cast<uint32_t>(width));
    push_u32be(ihdr, static_cast<uint32_t>(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // color type: truecolor
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter
    ihdr.push_back(0);  // interlace
    push_chunk(out, "IHDR", ihdr);

    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(height * (1 + width * 3)));
    for (int64_t y = 0; y < height; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), rgb.begin() + static_cast<ptrdiff_t>(y * width * 3),
                   rgb.begin() + static_cast<ptrdiff_t>((y + 1) * width * 3));
    }
    push_chunk(out, "IDAT", zlib_stored(raw));
    push_chunk(out, "IEND", {});
    return out;
}

void write_png_rgb8(const std::string& path, int64_t width, int64_t height, const std::vector<uint8_t>& rgb) {
    const auto bytes = encode_png_rgb8(width, height, rgb);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("png: cannot open '" + path + "'");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("png: short write to '" + path + "'");
}

}  // namespace emdt
