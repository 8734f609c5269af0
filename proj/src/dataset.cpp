#include "emdt/dataset.hpp"

namespace emdt {

namespace {

struct Rgb {
    uint8_t r, g, b;
};

constexpr Rgb kPalette[ShapesDataset::kColors] = {
    {230, 60, 50},    // red
    {60, 200, 80},    // green
    {60, 110, 235},   // blue
    {240, 200, 40},   // yellow
    {200, 70, 220},   // magenta
    {60, 210, 210},   // cyan
};

constexpr Rgb kBackground = {20, 20, 24};

constexpr const char* kColorNames[ShapesDataset::kColors] = {"red", "green", "blue",
                                                             "yellow", "magenta", "cyan"};
constexpr const char* kShapeNames[ShapesDataset::kShapes] = {"square", "circle", "triangle"};

}  // namespace

std::string ShapesDataset::caption_for(int64_t cls) {
    const int64_t shape = cls / kColors;
    const int64_t color = cls % kColors;
    return std::string(kColorNames[color]) + " " + kShapeNames[shape];
}

std::vector<uint8_t> ShapesDataset::render(int64_t cls, int64_t instance) const {
    const int64_t shape = cls / kColors;   // 0 square, 1 circle, 2 triangle
    const int64_t color = cls % kColors;
    const Rgb fg = kPalette[color];

    // geometry from a stateless hash of (seed, class, instance)
    const uint64_t h = hash_mix(seed_, 0x7278 /*geometry tag*/, static_cast<uint64_t>(cls),
                                static_cast<uint64_t>(instance));
    const int64_t quarter = size_ / 4;
    const int64_t cx = quarter + static_cast<int64_t>(h % static_cast<uint64_t>(size_ / 2));
    const int64_t cy = quarter + static_cast<int64_t>((h >> 16) % static_cast<uint64_t>(size_ / 2));
    const int64_t r = size_ / 6 + static_cast<int64_t>((h >> 32) % static_cast<uint64_t>(size_ / 6));

    std::vector<uint8_t> px(static_cast<size_t>(3 * size_ * size_));
    auto put = [&](int64_t y, int64_t x, Rgb c) {
        px[static_cast<size_t>(0 * size_ * size_ + y * size_ + x)] = c.r;
        px[static_cast<size_t>(1 * size_ * size_ + y * size_ + x)] = c.g;
        px[static_cast<size_t>(2 * size_ * size_ + y * size_ + x)] = c.b;
    };

    for (int64_t y = 0; y < size_; ++y) {
        for (int64_t x = 0; x < size_; ++x) {
            bool inside = false;
            const int64_t dx = x - cx, dy = y - cy;
            switch (shape) {
                case 0:  // square
                    inside = dx >= -r && dx <= r && dy >= -r && dy <= r;
                    break;
                case 1:  // circle
                    inside = dx * dx + dy * dy <= r * r;
                    break;
                default: {  // triangle: apex up at (cx, cy-r), base at cy+r
                    // integer half-plane tests against the three edges
                    const int64_t ax = cx, ay = cy - r;
                    const int64_t bx = cx - r, by = cy + r;
                    const int64_t ccx = cx + r, ccy = cy + r;
                    const int64_t e0 = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                    const int64_t e1 = (ccx - bx) * (y - by) - (ccy - by) * (x - bx);
                    const int64_t e2 = (ax - ccx) * (y - ccy) - (ay - ccy) * (x - ccx);
                    inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
                    break;
                }
            }
            put(y, x, inside ? fg : kBackground);
        }
    }
    return px;
}

}  // namespace emdt
