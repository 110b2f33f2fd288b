#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "aimv2/config.hpp"
#include "aimv2/masks.hpp"
#include "aimv2/nn.hpp"

namespace aimv2 {

// Joint causal multimodal decoder: projected image features followed by
// token embeddings, causal attention over the concatenation, and two
// linear heads (pixel regression on the image half, token logits on the
// text half).
struct DecoderParams {
    Param img_proj_w; // [d_enc, d_dec]
    Param img_proj_b;
    Param tok_embed; // [V, d_dec]
    Param pos_embed; // [max_positions, d_dec], learned absolute positions
    std::vector<BlockParams> blocks;
    Param final_gain;
    Param pixel_head_w; // [d_dec, p*p*C]
    Param pixel_head_b;
    Param text_head_w; // [d_dec, V]
    Param text_head_b;
    int64_t d_dec = 0;
    int64_t heads = 0;
    int64_t vocab = 0;
    int64_t max_positions = 0;

    void init(const ModelConfig& cfg, int64_t max_pos, Rng& rng) {
        d_dec = cfg.d_dec;
        heads = cfg.heads_dec;
        vocab = cfg.vocab_size;
        max_positions = max_pos;
        auto fill_normal = [&rng](Param& p, double sd) {
            for (int64_t i = 0; i < p.w.numel(); ++i) {
                p.w[i] = rng.normal() * sd;
            }
        };
        img_proj_w = Param({cfg.d_enc, cfg.d_dec});
        fill_normal(img_proj_w, 0.02);
        img_proj_b = Param({cfg.d_dec});
        tok_embed = Param({cfg.vocab_size, cfg.d_dec});
        fill_normal(tok_embed, 0.02);
        pos_embed = Param({max_pos, cfg.d_dec});
        fill_normal(pos_embed, 0.02);
        blocks.resize(static_cast<size_t>(cfg.L_dec));
        for (auto& b : blocks) {
            b.init(cfg.d_dec, cfg.heads_dec, ModelConfig::ffn_hidden(cfg.d_dec), cfg.attn_bias,
                   rng);
        }
        final_gain = Param({cfg.d_dec});
        final_gain.w.fill(1.0);
        pixel_head_w = Param({cfg.d_dec, cfg.patch_dim()});
        fill_normal(pixel_head_w, 0.02);
        pixel_head_b = Param({cfg.patch_dim()});
        text_head_w = Param({cfg.d_dec, cfg.vocab_size});
        fill_normal(text_head_w, 0.02);
        text_head_b = Param({cfg.vocab_size});
    }

    void register_params(ParamSet& ps, const std::string& prefix = "dec") {
        ps.add(prefix + ".img_proj.w", img_proj_w);
        ps.add(prefix + ".img_proj.b", img_proj_b);
        ps.add(prefix + ".tok_embed", tok_embed);
        ps.add(prefix + ".pos_embed", pos_embed);
        for (size_t i = 0; i < blocks.size(); ++i) {
            blocks[i].register_params(ps, prefix + ".block" + std::to_string(i));
        }
        ps.add(prefix + ".final_norm", final_gain);
        ps.add(prefix + ".pixel_head.w", pixel_head_w);
        ps.add(prefix + ".pixel_head.b", pixel_head_b);
        ps.add(prefix + ".text_head.w", text_head_w);
        ps.add(prefix + ".text_head.b", text_head_b);
    }
};

struct DecoderOut {
    Tensor pixel_preds;  // [I, p*p*C]
    Tensor token_logits; // [T, V]
};

struct DecoderCache {
    Tensor img_feats;
    std::vector<int32_t> tokens;
    Tensor z0; // concatenated + positional, input to block 0
    std::vector<BlockCache> blocks;
    RmsNormCache final_norm;
    Tensor normed; // final-norm output feeding the heads
    AttentionMask mask;
};

inline DecoderOut decoder_fwd(const Tensor& img_feats, const std::vector<int32_t>& tokens,
                              const DecoderParams& params, DecoderCache* cache = nullptr) {
    const int64_t n_img = img_feats.rows();
    const int64_t n_txt = static_cast<int64_t>(tokens.size());
    const int64_t len = n_img + n_txt;
    if (img_feats.cols() != params.img_proj_w.w.rows()) {
        throw std::invalid_argument("decoder_forward: feature width mismatch");
    }
    if (len > params.max_positions) {
        throw std::invalid_argument("decoder_forward: sequence exceeds positional table");
    }
    for (int32_t t : tokens) {
        if (t < 0 || t >= params.vocab) {
            throw std::invalid_argument("decoder_forward: token id out of range");
        }
    }

    Tensor z({len, params.d_dec});
    {
        // image features -> decoder width
        Tensor zi({n_img, params.d_dec});
        matmul(img_feats, params.img_proj_w.w, zi);
        add_row_bias(zi, params.img_proj_b.w);
        for (int64_t i = 0; i < n_img * params.d_dec; ++i) {
            z[i] = zi[i];
        }
    }
    for (int64_t t = 0; t < n_txt; ++t) {
        const real* row = params.tok_embed.w.data() + tokens[static_cast<size_t>(t)] * params.d_dec;
        real* dst = z.data() + (n_img + t) * params.d_dec;
        for (int64_t j = 0; j < params.d_dec; ++j) {
            dst[j] = row[j];
        }
    }
    for (int64_t i = 0; i < len; ++i) {
        const real* pos = params.pos_embed.w.data() + i * params.d_dec;
        real* dst = z.data() + i * params.d_dec;
        for (int64_t j = 0; j < params.d_dec; ++j) {
            dst[j] += pos[j];
        }
    }

    const AttentionMask mask = build_causal_mask(len);
    if (cache) {
        cache->img_feats = img_feats;
        cache->tokens = tokens;
        cache->z0 = z;
        cache->blocks.resize(params.blocks.size());
        cache->mask = mask;
    }
    for (size_t l = 0; l < params.blocks.size(); ++l) {
        z = transformer_block_fwd(z, params.blocks[l], mask, cache ? &cache->blocks[l] : nullptr);
    }
    Tensor normed =
        rms_norm_fwd(z, params.final_gain.w, rms_norm_eps, cache ? &cache->final_norm : nullptr);

    DecoderOut out;
    {
        Tensor img_part({n_img, params.d_dec});
        for (int64_t i = 0; i < n_img * params.d_dec; ++i) {
            img_part[i] = normed[i];
        }
        out.pixel_preds = Tensor({n_img, params.pixel_head_w.w.cols()});
        matmul(img_part, params.pixel_head_w.w, out.pixel_preds);
        add_row_bias(out.pixel_preds, params.pixel_head_b.w);
    }
    out.token_logits = Tensor({n_txt, params.vocab});
    if (n_txt > 0) {
        Tensor txt_part({n_txt, params.d_dec});
        for (int64_t i = 0; i < n_txt * params.d_dec; ++i) {
            txt_part[i] = normed[n_img * params.d_dec + i];
        }
        matmul(txt_part, params.text_head_w.w, out.token_logits);
        add_row_bias(out.token_logits, params.text_head_b.w);
    }
    if (cache) {
        cache->normed = std::move(normed);
    }
    return out;
}

inline DecoderOut decoder_forward(const Tensor& img_feats, const std::vector<int32_t>& tokens,
                                  const DecoderParams& params) {
    return decoder_fwd(img_feats, tokens, params);
}

// Returns the gradient w.r.t. the incoming image features so the encoder
// backward pass can continue the chain.
inline Tensor decoder_bwd(const Tensor& dpixel, const Tensor& dlogits, DecoderParams& params,
                          const DecoderCache& cache) {
    const int64_t n_img = cache.img_feats.rows();
    const int64_t n_txt = static_cast<int64_t>(cache.tokens.size());
    const int64_t len = n_img + n_txt;
    const int64_t d = params.d_dec;

    Tensor dnormed({len, d});
    {
        Tensor img_part({n_img, d});
        for (int64_t i = 0; i < n_img * d; ++i) {
            img_part[i] = cache.normed[i];
        }
        Tensor dimg_part({n_img, d});
        matmul_nt(dpixel, params.pixel_head_w.w, dimg_part);
        matmul_tn(img_part, dpixel, params.pixel_head_w.g, true);
        accumulate_bias_grad(dpixel, params.pixel_head_b.g);
        for (int64_t i = 0; i < n_img * d; ++i) {
            dnormed[i] = dimg_part[i];
        }
    }
    if (n_txt > 0) {
        Tensor txt_part({n_txt, d});
        for (int64_t i = 0; i < n_txt * d; ++i) {
            txt_part[i] = cache.normed[n_img * d + i];
        }
        Tensor dtxt_part({n_txt, d});
        matmul_nt(dlogits, params.text_head_w.w, dtxt_part);
        matmul_tn(txt_part, dlogits, params.text_head_w.g, true);
        accumulate_bias_grad(dlogits, params.text_head_b.g);
        for (int64_t i = 0; i < n_txt * d; ++i) {
            dnormed[n_img * d + i] = dtxt_part[i];
        }
    }

    Tensor dz({len, d});
    rms_norm_bwd(dnormed, params.final_gain.w, cache.final_norm, dz, params.final_gain.g);
    for (size_t l = params.blocks.size(); l-- > 0;) {
        Tensor dprev({len, d});
        transformer_block_bwd(dz, params.blocks[l], cache.mask, cache.blocks[l], dprev);
        dz = std::move(dprev);
    }

    // positional rows
    for (int64_t i = 0; i < len; ++i) {
        real* pg = params.pos_embed.g.data() + i * d;
        const real* src = dz.data() + i * d;
        for (int64_t j = 0; j < d; ++j) {
            pg[j] += src[j];
        }
    }
    // token embedding rows (scatter-add)
    for (int64_t t = 0; t < n_txt; ++t) {
        real* eg = params.tok_embed.g.data() + cache.tokens[static_cast<size_t>(t)] * d;
        const real* src = dz.data() + (n_img + t) * d;
        for (int64_t j = 0; j < d; ++j) {
            eg[j] += src[j];
        }
    }
    // image projection
    Tensor dzi({n_img, d});
    for (int64_t i = 0; i < n_img * d; ++i) {
        dzi[i] = dz[i];
    }
    Tensor dfeats({n_img, cache.img_feats.cols()});
    matmul_nt(dzi, params.img_proj_w.w, dfeats);
    matmul_tn(cache.img_feats, dzi, params.img_proj_w.g, true);
    accumulate_bias_grad(dzi, params.img_proj_b.g);
    return dfeats;
}

} // namespace aimv2
