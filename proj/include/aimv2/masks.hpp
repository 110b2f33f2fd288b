#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "aimv2/patchify.hpp"
#include "aimv2/rng.hpp"
#include "aimv2/tensor.hpp"

namespace aimv2 {

// Boolean allow-matrix: allow(i, j) means position i may attend to j.
// Invariant: the diagonal is always allowed, so every row has at least one
// permitted column.
struct AttentionMask {
    int64_t size = 0;
    std::vector<uint8_t> allow;

    AttentionMask() = default;
    explicit AttentionMask(int64_t n) : size(n), allow(static_cast<size_t>(n * n), 0) {}

    bool allowed(int64_t i, int64_t j) const {
        return allow[static_cast<size_t>(i * size + j)] != 0;
    }
    void set(int64_t i, int64_t j, bool v) {
        allow[static_cast<size_t>(i * size + j)] = v ? 1 : 0;
    }

    bool operator==(const AttentionMask&) const = default;
};

// M ~ U{1, ..., I-1}
inline int64_t sample_prefix_len(int64_t num_patches, Rng& rng) {
    if (num_patches < 2) {
        throw std::invalid_argument("sample_prefix_len: need at least 2 patches");
    }
    return rng.uniform_int(1, num_patches - 1);
}

// Positions 1..M attend bidirectionally among themselves; positions past M
// attend to the prefix and their causal past. M = I degenerates to
// all-allow, the bidirectional inference mode.
inline AttentionMask build_prefix_mask(int64_t num_patches, int64_t prefix_len) {
    if (prefix_len < 1 || prefix_len > num_patches) {
        throw std::invalid_argument("build_prefix_mask: prefix length out of range");
    }
    AttentionMask mask(num_patches);
    for (int64_t i = 0; i < num_patches; ++i) {
        const int64_t reach = (i < prefix_len) ? prefix_len : i + 1;
        for (int64_t j = 0; j < reach; ++j) {
            mask.set(i, j, true);
        }
    }
    return mask;
}

inline AttentionMask build_causal_mask(int64_t len) {
    if (len < 1) {
        throw std::invalid_argument("build_causal_mask: length must be >= 1");
    }
    AttentionMask mask(len);
    for (int64_t i = 0; i < len; ++i) {
        for (int64_t j = 0; j <= i; ++j) {
            mask.set(i, j, true);
        }
    }
    return mask;
}

// Remove padding patches from everyone's view. The diagonal stays allowed
// so invalid rows keep a nonempty attention set; their outputs are excluded
// from every loss anyway.
inline void forbid_invalid_columns(AttentionMask& mask, const std::vector<uint8_t>& valid) {
    if (static_cast<int64_t>(valid.size()) != mask.size) {
        throw std::invalid_argument("forbid_invalid_columns: valid length mismatch");
    }
    for (int64_t j = 0; j < mask.size; ++j) {
        if (valid[static_cast<size_t>(j)]) {
            continue;
        }
        for (int64_t i = 0; i < mask.size; ++i) {
            if (i != j) {
                mask.set(i, j, false);
            }
        }
    }
}

// Shift-left targets plus their loss-inclusion flags. pixel_targets[i] is
// the normalized patch i+1; the flag enforces target-index > M, drops the
// final image position (no next patch) and anything touching padding.
struct TargetPack {
    Tensor pixel_targets;                 // [I, p*p*C]
    std::vector<uint8_t> pixel_loss_mask; // [I]
    std::vector<int32_t> text_targets;    // [T]
    std::vector<uint8_t> text_loss_mask;  // [T]
};

inline TargetPack make_targets(const PatchSequence& patches, const std::vector<int32_t>& tokens,
                               int64_t prefix_len, int32_t pad_id, int32_t eot_id,
                               double norm_eps = 1e-6) {
    const int64_t n = patches.count();
    if (prefix_len < 1 || prefix_len > n - 1) {
        throw std::invalid_argument("make_targets: prefix length out of range");
    }

    TargetPack pack;
    const Tensor normalized = normalize_patch_targets(patches, norm_eps);
    const int64_t d = normalized.cols();
    pack.pixel_targets = Tensor({n, d});
    pack.pixel_loss_mask.assign(static_cast<size_t>(n), 0);
    for (int64_t i = 0; i + 1 < n; ++i) {
        // output position i (0-based) is paired with patch i+1
        for (int64_t j = 0; j < d; ++j) {
            pack.pixel_targets.at(i, j) = normalized.at(i + 1, j);
        }
        const bool target_past_prefix = (i + 2) > prefix_len; // 1-based target index
        const bool both_valid = patches.valid[static_cast<size_t>(i)] &&
                                patches.valid[static_cast<size_t>(i + 1)];
        pack.pixel_loss_mask[static_cast<size_t>(i)] = (target_past_prefix && both_valid) ? 1 : 0;
    }

    const int64_t t_len = static_cast<int64_t>(tokens.size());
    pack.text_targets.assign(static_cast<size_t>(t_len), pad_id);
    pack.text_loss_mask.assign(static_cast<size_t>(t_len), 0);
    for (int64_t t = 0; t < t_len; ++t) {
        const int32_t tok = tokens[static_cast<size_t>(t)];
        if (tok == pad_id || tok == eot_id) {
            continue; // nothing to predict from padding or past the terminator
        }
        int32_t target;
        if (t + 1 < t_len && tokens[static_cast<size_t>(t + 1)] != pad_id) {
            target = tokens[static_cast<size_t>(t + 1)];
        } else {
            target = eot_id; // appended end-of-text so the last token has a target
        }
        pack.text_targets[static_cast<size_t>(t)] = target;
        pack.text_loss_mask[static_cast<size_t>(t)] = 1;
    }
    return pack;
}

} // namespace aimv2
