#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "aimv2/config.hpp"
#include "aimv2/masks.hpp"
#include "aimv2/nn.hpp"
#include "aimv2/patchify.hpp"

namespace aimv2 {

// Fixed 2-D sinusoidal embedding from (row, col) cell coordinates. Being a
// pure function of the coordinate, it serves any grid without
// interpolation, which is what lets high-resolution and native-resolution
// modes reuse pre-trained weights untouched.
inline Tensor positional_embedding(int64_t rows, int64_t cols, int64_t d) {
    if (d % 4 != 0) {
        throw std::invalid_argument("positional_embedding: width must be divisible by 4");
    }
    const int64_t q = d / 4;
    Tensor pe({rows * cols, d});
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t c = 0; c < cols; ++c) {
            real* row = pe.data() + (r * cols + c) * d;
            for (int64_t k = 0; k < q; ++k) {
                const real omega = std::pow(10000.0, -static_cast<real>(k) / static_cast<real>(q));
                row[k] = std::sin(static_cast<real>(c) * omega);
                row[q + k] = std::cos(static_cast<real>(c) * omega);
                row[2 * q + k] = std::sin(static_cast<real>(r) * omega);
                row[3 * q + k] = std::cos(static_cast<real>(r) * omega);
            }
        }
    }
    return pe;
}

struct EncoderParams {
    Param patch_embed_w; // [p*p*C, d_enc]
    Param patch_embed_b; // [d_enc]
    std::vector<BlockParams> blocks;
    Param final_gain;
    int64_t d_enc = 0;
    int64_t heads = 0;

    void init(const ModelConfig& cfg, Rng& rng) {
        d_enc = cfg.d_enc;
        heads = cfg.heads_enc;
        patch_embed_w = Param({cfg.patch_dim(), cfg.d_enc});
        for (int64_t i = 0; i < patch_embed_w.w.numel(); ++i) {
            patch_embed_w.w[i] = rng.normal() * 0.02;
        }
        patch_embed_b = Param({cfg.d_enc});
        blocks.resize(static_cast<size_t>(cfg.L_enc));
        for (auto& b : blocks) {
            b.init(cfg.d_enc, cfg.heads_enc, ModelConfig::ffn_hidden(cfg.d_enc), cfg.attn_bias,
                   rng);
        }
        final_gain = Param({cfg.d_enc});
        final_gain.w.fill(1.0);
    }

    void register_params(ParamSet& ps, const std::string& prefix = "enc") {
        ps.add(prefix + ".patch_embed.w", patch_embed_w);
        ps.add(prefix + ".patch_embed.b", patch_embed_b);
        for (size_t i = 0; i < blocks.size(); ++i) {
            blocks[i].register_params(ps, prefix + ".block" + std::to_string(i));
        }
        ps.add(prefix + ".final_norm", final_gain);
    }
};

struct EncoderCache {
    Tensor embedded; // patch embedding + positional, input to block 0
    std::vector<BlockCache> blocks;
    RmsNormCache final_norm;
    const PatchSequence* seq = nullptr;
};

// Linear patch embedding + 2-D sinusoidal positions, L_enc blocks under the
// given mask, final RMSNorm. pos_override substitutes the positional table
// (the permutation-equivariance tests use it); it must be [I, d_enc].
inline Tensor encoder_fwd(const PatchSequence& seq, const AttentionMask& mask,
                          const EncoderParams& params, EncoderCache* cache = nullptr,
                          const Tensor* pos_override = nullptr) {
    const int64_t n = seq.count();
    if (mask.size != n) {
        throw std::invalid_argument("encoder_forward: mask size does not match patch count");
    }
    if (seq.patches.cols() != params.patch_embed_w.w.rows()) {
        throw std::invalid_argument("encoder_forward: patch dimension mismatch");
    }
    Tensor x({n, params.d_enc});
    matmul(seq.patches, params.patch_embed_w.w, x);
    add_row_bias(x, params.patch_embed_b.w);
    const Tensor pos =
        pos_override ? *pos_override : positional_embedding(seq.rows, seq.cols, params.d_enc);
    x.add_(pos);

    if (cache) {
        cache->embedded = x;
        cache->blocks.resize(params.blocks.size());
        cache->seq = &seq;
    }
    for (size_t l = 0; l < params.blocks.size(); ++l) {
        x = transformer_block_fwd(x, params.blocks[l], mask, cache ? &cache->blocks[l] : nullptr);
    }
    return rms_norm_fwd(x, params.final_gain.w, rms_norm_eps, cache ? &cache->final_norm : nullptr);
}

inline Tensor encoder_forward(const PatchSequence& seq, const AttentionMask& mask,
                              const EncoderParams& params, const Tensor* pos_override = nullptr) {
    return encoder_fwd(seq, mask, params, nullptr, pos_override);
}

inline void encoder_bwd(const Tensor& dfeats, const AttentionMask& mask, EncoderParams& params,
                        const EncoderCache& cache) {
    const auto shape = cache.embedded.shape();
    Tensor dx(shape);
    rms_norm_bwd(dfeats, params.final_gain.w, cache.final_norm, dx, params.final_gain.g);
    for (size_t l = params.blocks.size(); l-- > 0;) {
        Tensor dprev(shape);
        transformer_block_bwd(dx, params.blocks[l], mask, cache.blocks[l], dprev);
        dx = std::move(dprev);
    }
    // positional table is fixed; only the linear embedding takes gradients
    matmul_tn(cache.seq->patches, dx, params.patch_embed_w.g, true);
    accumulate_bias_grad(dx, params.patch_embed_b.g);
}

} // namespace aimv2
