#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emdt/random.hpp"
#include "emdt/tensor.hpp"

namespace emdt {

/// Procedural dataset: {square, circle, triangle} x 6 colors = 18 classes.
/// Pixels are a pure function of (seed, class, instance) using integer
/// rasterization only, so content is identical across runs and platforms.
/// Images are normalized to [-1, 1].
class ShapesDataset {
public:
    static constexpr int kNumClasses = 18;
    static constexpr int kShapes = 3;
    static constexpr int kColors = 6;

    explicit ShapesDataset(uint64_t seed = 0, int64_t image_size = 32) : seed_(seed), size_(image_size) {}

    int64_t image_size() const { return size_; }
    uint64_t seed() const { return seed_; }

    /// "color shape" caption for a class, e.g. "red square". Two whitespace
    /// tokens for every class, so caption batches stack without padding.
    static std::string caption_for(int64_t cls);

    /// 8-bit RGB pixels, channel-major [3, size, size].
    std::vector<uint8_t> render(int64_t cls, int64_t instance) const;

    template <std::floating_point S>
    Tensor<S> image(int64_t cls, int64_t instance) const {
        const auto px = render(cls, instance);
        std::vector<S> v(px.size());
        for (size_t i = 0; i < px.size(); ++i) v[i] = (S(2) * static_cast<S>(px[i]) - S(255)) / S(255);
        return Tensor<S>({3, size_, size_}, std::move(v));
    }

    /// Deterministic batch for a training step: class labels and stacked
    /// images. Instance indices advance with the step so the stream never
    /// repeats.
    int64_t class_for(int64_t step, int64_t index_in_batch) const {
        return static_cast<int64_t>(hash_mix(seed_, 0x636c73, static_cast<uint64_t>(step),
                                             static_cast<uint64_t>(index_in_batch)) %
                                    kNumClasses);
    }

    template <std::floating_point S>
    Tensor<S> batch(int64_t step, int64_t batch_size, std::vector<int64_t>* classes_out) const {
        std::vector<S> data;
        data.reserve(static_cast<size_t>(batch_size * 3 * size_ * size_));
        if (classes_out) classes_out->clear();
        for (int64_t i = 0; i < batch_size; ++i) {
            const int64_t cls = class_for(step, i);
            if (classes_out) classes_out->push_back(cls);
            Tensor<S> img = image<S>(cls, step * batch_size + i);
            data.insert(data.end(), img.data().begin(), img.data().end());
        }
        return Tensor<S>({batch_size, 3, size_, size_}, std::move(data));
    }

private:
    uint64_t seed_;
    int64_t size_;
};

}  // namespace emdt
