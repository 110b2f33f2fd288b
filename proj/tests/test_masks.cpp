#include <catch2/catch.hpp>

#include "aimv2/data.hpp"
#include "aimv2/masks.hpp"
#include "aimv2/rng.hpp"

using namespace aimv2;

namespace {

// Independent statement of the prefix-attention rule: bidirectional inside
// the prefix, causal (prefix + past + self) after it. 0-based.
bool prefix_rule(int64_t i, int64_t j, int64_t m) {
    if (i < m) {
        return j < m;
    }
    return j <= i;
}

PatchSequence fake_patches(int64_t count, Rng& rng) {
    PatchSequence seq;
    seq.rows = count;
    seq.cols = 1;
    seq.patch_size = 1;
    seq.channels = 4;
    seq.valid.assign(static_cast<size_t>(count), 1);
    seq.patches = Tensor({count, 4});
    for (int64_t i = 0; i < seq.patches.numel(); ++i) {
        seq.patches[i] = rng.normal();
    }
    return seq;
}

} // namespace

TEST_CASE("prefix masks match brute-force enumeration for all I <= 6") {
    for (int64_t n = 1; n <= 6; ++n) {
        for (int64_t m = 1; m <= n; ++m) {
            const AttentionMask mask = build_prefix_mask(n, m);
            for (int64_t i = 0; i < n; ++i) {
                for (int64_t j = 0; j < n; ++j) {
                    INFO("I=" << n << " M=" << m << " i=" << i << " j=" << j);
                    CHECK(mask.allowed(i, j) == prefix_rule(i, j, m));
                }
            }
            // diagonal invariant
            for (int64_t i = 0; i < n; ++i) {
                CHECK(mask.allowed(i, i));
            }
        }
    }
}

TEST_CASE("spec'd prefix mask rows for I=3") {
    const AttentionMask m2 = build_prefix_mask(3, 2);
    // rows: {1,2}, {1,2}, {1,2,3} in 1-based terms
    CHECK(m2.allowed(0, 0));
    CHECK(m2.allowed(0, 1));
    CHECK_FALSE(m2.allowed(0, 2));
    CHECK(m2.allowed(1, 0));
    CHECK(m2.allowed(1, 1));
    CHECK_FALSE(m2.allowed(1, 2));
    CHECK(m2.allowed(2, 0));
    CHECK(m2.allowed(2, 1));
    CHECK(m2.allowed(2, 2));

    const AttentionMask m1 = build_prefix_mask(3, 1); // pure causal
    CHECK(m1 == build_causal_mask(3));

    const AttentionMask m3 = build_prefix_mask(3, 3); // bidirectional limit
    for (int64_t i = 0; i < 3; ++i) {
        for (int64_t j = 0; j < 3; ++j) {
            CHECK(m3.allowed(i, j));
        }
    }
}

TEST_CASE("causal masks") {
    const AttentionMask one = build_causal_mask(1);
    CHECK(one.allowed(0, 0));
    const AttentionMask three = build_causal_mask(3);
    for (int64_t i = 0; i < 3; ++i) {
        for (int64_t j = 0; j < 3; ++j) {
            CHECK(three.allowed(i, j) == (j <= i));
        }
    }
    CHECK(three == build_prefix_mask(3, 1));
    CHECK_THROWS_AS(build_causal_mask(0), std::invalid_argument);
}

TEST_CASE("prefix mask rejects out-of-range M") {
    CHECK_THROWS_AS(build_prefix_mask(4, 0), std::invalid_argument);
    CHECK_THROWS_AS(build_prefix_mask(4, 5), std::invalid_argument);
}

TEST_CASE("sample_prefix_len is uniform over 1..I-1") {
    Rng rng(42);
    const int64_t draws = 100000;
    int64_t counts[4] = {};
    for (int64_t i = 0; i < draws; ++i) {
        const int64_t m = sample_prefix_len(4, rng);
        REQUIRE(m >= 1);
        REQUIRE(m <= 3);
        counts[m] += 1;
    }
    for (int64_t m = 1; m <= 3; ++m) {
        const double freq = static_cast<double>(counts[m]) / draws;
        CHECK(freq == Approx(1.0 / 3.0).margin(0.02));
    }
}

TEST_CASE("sample_prefix_len edge cases") {
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        CHECK(sample_prefix_len(2, rng) == 1);
    }
    CHECK_THROWS_AS(sample_prefix_len(1, rng), std::invalid_argument);

    Rng a(7), b(7);
    for (int trial = 0; trial < 100; ++trial) {
        CHECK(sample_prefix_len(10, a) == sample_prefix_len(10, b));
    }
}

TEST_CASE("make_targets pairs positions with the next patch") {
    Rng rng(5);
    PatchSequence patches = fake_patches(4, rng);
    const std::vector<int32_t> tokens = {10, 20, 30};
    const TargetPack pack = make_targets(patches, tokens, 2, pad_token_id, eot_token_id);

    // I=4, M=2: active pixel positions are 1-based {2,3} -> 0-based {1,2}
    CHECK_FALSE(pack.pixel_loss_mask[0]); // target index 2 <= M
    CHECK(pack.pixel_loss_mask[1]);
    CHECK(pack.pixel_loss_mask[2]);
    CHECK_FALSE(pack.pixel_loss_mask[3]); // no next patch

    // targets are the normalized next patches
    const Tensor normalized = normalize_patch_targets(patches, 1e-6);
    for (int64_t i = 0; i + 1 < 4; ++i) {
        for (int64_t j = 0; j < 4; ++j) {
            CHECK(pack.pixel_targets.at(i, j) == normalized.at(i + 1, j));
        }
    }

    // text shift-left with appended end-of-text
    REQUIRE(pack.text_targets.size() == 3);
    CHECK(pack.text_targets[0] == 20);
    CHECK(pack.text_targets[1] == 30);
    CHECK(pack.text_targets[2] == eot_token_id);
    CHECK(pack.text_loss_mask[0]);
    CHECK(pack.text_loss_mask[1]);
    CHECK(pack.text_loss_mask[2]);
}

TEST_CASE("make_targets masks padding and terminator inputs") {
    Rng rng(6);
    PatchSequence patches = fake_patches(2, rng);
    const std::vector<int32_t> tokens = {65, 66, eot_token_id, pad_token_id};
    const TargetPack pack = make_targets(patches, tokens, 1, pad_token_id, eot_token_id);
    CHECK(pack.text_loss_mask[0]);
    CHECK(pack.text_targets[0] == 66);
    CHECK(pack.text_loss_mask[1]);
    CHECK(pack.text_targets[1] == eot_token_id);
    CHECK_FALSE(pack.text_loss_mask[2]); // terminator input: nothing to predict
    CHECK_FALSE(pack.text_loss_mask[3]); // pad input

    // smallest image case: I=2, M=1 gives exactly one pixel target
    int64_t active = 0;
    for (uint8_t b : pack.pixel_loss_mask) {
        active += b ? 1 : 0;
    }
    CHECK(active == 1);
    CHECK(pack.pixel_loss_mask[0]);
}

TEST_CASE("pixel loss mask count matches enumeration for all I <= 6") {
    Rng rng(7);
    for (int64_t n = 2; n <= 6; ++n) {
        PatchSequence patches = fake_patches(n, rng);
        for (int64_t m = 1; m <= n - 1; ++m) {
            const TargetPack pack =
                make_targets(patches, {1, 2}, m, pad_token_id, eot_token_id);
            int64_t active = 0;
            for (uint8_t b : pack.pixel_loss_mask) {
                active += b ? 1 : 0;
            }
            // brute force from the rule: position i (0-based) is active iff
            // i+1 < I and the 1-based target index i+2 exceeds M
            int64_t expected = 0;
            for (int64_t i = 0; i + 1 < n; ++i) {
                expected += ((i + 2) > m) ? 1 : 0;
            }
            CHECK(active == expected);
            CHECK(expected == n - m); // closed form
        }
    }
}

TEST_CASE("make_targets respects the validity mask") {
    Rng rng(8);
    PatchSequence patches = fake_patches(4, rng);
    patches.valid = {1, 1, 0, 1}; // patch 2 is padding
    const TargetPack pack = make_targets(patches, {1}, 1, pad_token_id, eot_token_id);
    CHECK(pack.pixel_loss_mask[0]);  // targets patch 1, both valid
    CHECK_FALSE(pack.pixel_loss_mask[1]); // target patch 2 is padding
    CHECK_FALSE(pack.pixel_loss_mask[2]); // position itself is padding
    CHECK_FALSE(pack.pixel_loss_mask[3]); // final position
}

TEST_CASE("forbid_invalid_columns keeps the diagonal") {
    AttentionMask mask = build_prefix_mask(4, 4);
    forbid_invalid_columns(mask, {1, 0, 1, 1});
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(mask.allowed(i, i));
        if (i != 1) {
            CHECK_FALSE(mask.allowed(i, 1));
        }
    }
}
