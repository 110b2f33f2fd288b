#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "aimv2/tensor.hpp"

namespace aimv2 {

// I flattened patches in raster (row-major) order over the grid. `valid`
// is false for patches that are pure zero padding in native-resolution
// mode; fixed-resolution batches have every patch valid.
struct PatchSequence {
    Tensor patches; // [I, p*p*C]
    int64_t rows = 0;
    int64_t cols = 0;
    int64_t patch_size = 0;
    int64_t channels = 0;
    std::vector<uint8_t> valid;

    int64_t count() const { return rows * cols; }
};

inline PatchSequence patchify(const Tensor& image, int64_t p) {
    if (image.rank() != 3) {
        throw std::invalid_argument("patchify: image must be [H, W, C]");
    }
    const int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (p <= 0 || h % p != 0 || w % p != 0) {
        throw std::invalid_argument("patchify: image dimensions not divisible by patch size");
    }
    PatchSequence seq;
    seq.rows = h / p;
    seq.cols = w / p;
    seq.patch_size = p;
    seq.channels = c;
    seq.valid.assign(static_cast<size_t>(seq.count()), 1);
    seq.patches = Tensor({seq.count(), p * p * c});

    const real* img = image.data();
    for (int64_t pr = 0; pr < seq.rows; ++pr) {
        for (int64_t pc = 0; pc < seq.cols; ++pc) {
            real* dst = seq.patches.data() + (pr * seq.cols + pc) * p * p * c;
            for (int64_t y = 0; y < p; ++y) {
                const real* src = img + ((pr * p + y) * w + pc * p) * c;
                for (int64_t i = 0; i < p * c; ++i) {
                    dst[y * p * c + i] = src[i];
                }
            }
        }
    }
    return seq;
}

inline Tensor unpatchify(const PatchSequence& seq, int64_t p) {
    if (p != seq.patch_size) {
        throw std::invalid_argument("unpatchify: patch size disagrees with sequence");
    }
    const int64_t c = seq.channels;
    if (seq.patches.rows() != seq.count() || seq.patches.cols() != p * p * c) {
        throw std::invalid_argument("unpatchify: inconsistent grid metadata");
    }
    const int64_t h = seq.rows * p, w = seq.cols * p;
    Tensor image({h, w, c}); // zero-filled, so padding patches restore as zeros
    for (int64_t pr = 0; pr < seq.rows; ++pr) {
        for (int64_t pc = 0; pc < seq.cols; ++pc) {
            const int64_t idx = pr * seq.cols + pc;
            if (!seq.valid[static_cast<size_t>(idx)]) {
                continue;
            }
            const real* src = seq.patches.data() + idx * p * p * c;
            for (int64_t y = 0; y < p; ++y) {
                real* dst = image.data() + ((pr * p + y) * w + pc * p) * c;
                for (int64_t i = 0; i < p * c; ++i) {
                    dst[i] = src[y * p * c + i];
                }
            }
        }
    }
    return image;
}

// MAE-style per-patch normalization: subtract the patch mean and divide by
// the patch's population standard deviation. These are the regression
// targets; encoder inputs stay raw.
inline Tensor normalize_patch_targets(const PatchSequence& seq, double eps) {
    const int64_t n = seq.patches.rows(), d = seq.patches.cols();
    Tensor out({n, d});
    for (int64_t i = 0; i < n; ++i) {
        const real* x = seq.patches.data() + i * d;
        real* y = out.data() + i * d;
        real mean = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            mean += x[j];
        }
        mean /= static_cast<real>(d);
        real var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const real dx = x[j] - mean;
            var += dx * dx;
        }
        var /= static_cast<real>(d);
        const real inv = 1.0 / std::sqrt(var + eps);
        for (int64_t j = 0; j < d; ++j) {
            y[j] = (x[j] - mean) * inv;
        }
    }
    return out;
}

} // namespace aimv2
