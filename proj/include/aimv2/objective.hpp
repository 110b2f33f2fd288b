#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "aimv2/decoder.hpp"
#include "aimv2/encoder.hpp"
#include "aimv2/gradcheck.hpp"
#include "aimv2/masks.hpp"
#include "aimv2/rng.hpp"

namespace aimv2 {

struct LossReport {
    double pixel_loss = 0.0;
    double text_loss = 0.0;
    double total = 0.0;
    int64_t active_pixel_targets = 0;
    int64_t active_text_targets = 0;
};

// Mean over active positions of the per-position MSE (mean over the patch
// dimension). Masked positions are skipped entirely, so the result is
// bit-invariant to whatever garbage the model predicts there.
inline double pixel_loss(const Tensor& preds, const Tensor& targets,
                         const std::vector<uint8_t>& mask) {
    const int64_t n = preds.rows(), d = preds.cols();
    if (!preds.same_shape(targets) || static_cast<int64_t>(mask.size()) != n) {
        throw std::invalid_argument("pixel_loss: shape mismatch");
    }
    int64_t active = 0;
    double sum = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        if (!mask[static_cast<size_t>(i)]) {
            continue;
        }
        ++active;
        double sq = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double diff = preds.at(i, j) - targets.at(i, j);
            sq += diff * diff;
        }
        sum += sq / static_cast<double>(d);
    }
    if (active == 0) {
        throw std::invalid_argument("pixel_loss: zero active targets");
    }
    return sum / static_cast<double>(active);
}

// Mean over active positions of -log softmax(logits)[target].
inline double text_loss(const Tensor& logits, const std::vector<int32_t>& targets,
                        const std::vector<uint8_t>& mask) {
    const int64_t n = logits.rows(), v = logits.cols();
    if (static_cast<int64_t>(targets.size()) != n || static_cast<int64_t>(mask.size()) != n) {
        throw std::invalid_argument("text_loss: length mismatch");
    }
    int64_t active = 0;
    double sum = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        if (!mask[static_cast<size_t>(i)]) {
            continue;
        }
        const int32_t tgt = targets[static_cast<size_t>(i)];
        if (tgt < 0 || tgt >= v) {
            throw std::invalid_argument("text_loss: target id out of range");
        }
        ++active;
        const real* row = logits.data() + i * v;
        real max_logit = row[0];
        for (int64_t j = 1; j < v; ++j) {
            if (row[j] > max_logit) {
                max_logit = row[j];
            }
        }
        double lse = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            lse += std::exp(row[j] - max_logit);
        }
        sum += std::log(lse) + max_logit - row[tgt];
    }
    if (active == 0) {
        throw std::invalid_argument("text_loss: zero active targets");
    }
    return sum / static_cast<double>(active);
}

inline double total_loss(double pixel, double text, double alpha) {
    return text + alpha * pixel;
}

// d pixel_loss / d preds; rows at masked positions are exactly zero.
inline Tensor pixel_loss_grad(const Tensor& preds, const Tensor& targets,
                              const std::vector<uint8_t>& mask) {
    const int64_t n = preds.rows(), d = preds.cols();
    int64_t active = 0;
    for (uint8_t m : mask) {
        active += m ? 1 : 0;
    }
    if (active == 0) {
        throw std::invalid_argument("pixel_loss_grad: zero active targets");
    }
    Tensor grad({n, d});
    const double w = 2.0 / (static_cast<double>(d) * static_cast<double>(active));
    for (int64_t i = 0; i < n; ++i) {
        if (!mask[static_cast<size_t>(i)]) {
            continue;
        }
        for (int64_t j = 0; j < d; ++j) {
            grad.at(i, j) = w * (preds.at(i, j) - targets.at(i, j));
        }
    }
    return grad;
}

// d text_loss / d logits; rows at masked positions are exactly zero.
inline Tensor text_loss_grad(const Tensor& logits, const std::vector<int32_t>& targets,
                             const std::vector<uint8_t>& mask) {
    const int64_t n = logits.rows(), v = logits.cols();
    int64_t active = 0;
    for (uint8_t m : mask) {
        active += m ? 1 : 0;
    }
    if (active == 0) {
        throw std::invalid_argument("text_loss_grad: zero active targets");
    }
    Tensor grad({n, v});
    const double w = 1.0 / static_cast<double>(active);
    for (int64_t i = 0; i < n; ++i) {
        if (!mask[static_cast<size_t>(i)]) {
            continue;
        }
        const real* row = logits.data() + i * v;
        real max_logit = row[0];
        for (int64_t j = 1; j < v; ++j) {
            max_logit = std::max(max_logit, row[j]);
        }
        double lse = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            lse += std::exp(row[j] - max_logit);
        }
        for (int64_t j = 0; j < v; ++j) {
            grad.at(i, j) = w * std::exp(row[j] - max_logit) / lse;
        }
        grad.at(i, targets[static_cast<size_t>(i)]) -= w;
    }
    return grad;
}

// One image/caption pair prepared for the decoder. Images inside a batch
// share the prefix length M and the patch count I; text lengths may vary.
struct BatchSample {
    PatchSequence patches;
    std::vector<int32_t> tokens;
    TargetPack targets;
    AttentionMask enc_mask; // prefix mask with padding columns forbidden
};

struct MultimodalBatch {
    int64_t prefix_len = 0;
    std::vector<BatchSample> samples;

    int64_t patch_count() const {
        return samples.empty() ? 0 : samples.front().patches.count();
    }
};

inline MultimodalBatch build_batch(const std::vector<Tensor>& images,
                                   const std::vector<std::vector<int32_t>>& token_seqs,
                                   int64_t patch_size, int64_t prefix_len, int32_t pad_id,
                                   int32_t eot_id, double norm_eps = 1e-6) {
    if (images.size() != token_seqs.size() || images.empty()) {
        throw std::invalid_argument("build_batch: need matching non-empty image/token lists");
    }
    MultimodalBatch batch;
    batch.prefix_len = prefix_len;
    for (size_t s = 0; s < images.size(); ++s) {
        BatchSample sample;
        sample.patches = patchify(images[s], patch_size);
        sample.tokens = token_seqs[s];
        sample.targets = make_targets(sample.patches, sample.tokens, prefix_len, pad_id, eot_id,
                                      norm_eps);
        sample.enc_mask = build_prefix_mask(sample.patches.count(), prefix_len);
        forbid_invalid_columns(sample.enc_mask, sample.patches.valid);
        batch.samples.push_back(std::move(sample));
    }
    return batch;
}

// Pre-built batches can also be assembled sample by sample (the
// native-resolution path does this after fitting each image to the
// sampled area).
inline BatchSample make_sample(PatchSequence patches, std::vector<int32_t> tokens,
                               int64_t prefix_len, int32_t pad_id, int32_t eot_id,
                               double norm_eps = 1e-6) {
    BatchSample sample;
    sample.patches = std::move(patches);
    sample.tokens = std::move(tokens);
    sample.targets =
        make_targets(sample.patches, sample.tokens, prefix_len, pad_id, eot_id, norm_eps);
    sample.enc_mask = build_prefix_mask(sample.patches.count(), prefix_len);
    forbid_invalid_columns(sample.enc_mask, sample.patches.valid);
    return sample;
}

namespace detail {

struct SampleTally {
    double pixel_sq = 0.0; // sum over active positions of per-position MSE
    double text_nll = 0.0;
    int64_t pixel_active = 0;
    int64_t text_active = 0;
};

inline SampleTally tally_sample(const BatchSample& s, const DecoderOut& out) {
    SampleTally t;
    const int64_t n = out.pixel_preds.rows(), d = out.pixel_preds.cols();
    for (int64_t i = 0; i < n; ++i) {
        if (!s.targets.pixel_loss_mask[static_cast<size_t>(i)]) {
            continue;
        }
        ++t.pixel_active;
        double sq = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double diff = out.pixel_preds.at(i, j) - s.targets.pixel_targets.at(i, j);
            sq += diff * diff;
        }
        t.pixel_sq += sq / static_cast<double>(d);
    }
    const int64_t tn = out.token_logits.rows(), v = out.token_logits.cols();
    for (int64_t i = 0; i < tn; ++i) {
        if (!s.targets.text_loss_mask[static_cast<size_t>(i)]) {
            continue;
        }
        ++t.text_active;
        const real* row = out.token_logits.data() + i * v;
        real max_logit = row[0];
        for (int64_t j = 1; j < v; ++j) {
            max_logit = std::max(max_logit, row[j]);
        }
        double lse = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            lse += std::exp(row[j] - max_logit);
        }
        t.text_nll += std::log(lse) + max_logit -
                      row[s.targets.text_targets[static_cast<size_t>(i)]];
    }
    return t;
}

} // namespace detail

// Forward pass of the whole pre-training objective for a prepared batch
// with M already fixed; deterministic and differentiable, which is what
// the gradient checker needs. Losses are normalized by the count of
// active targets across the whole batch.
inline LossReport pretrain_loss(const MultimodalBatch& batch, const EncoderParams& enc,
                                const DecoderParams& dec, double alpha) {
    double pixel_sum = 0.0, text_sum = 0.0;
    int64_t pixel_active = 0, text_active = 0;
    for (const auto& s : batch.samples) {
        const Tensor feats = encoder_fwd(s.patches, s.enc_mask, enc);
        const DecoderOut out = decoder_fwd(feats, s.tokens, dec);
        const auto t = detail::tally_sample(s, out);
        pixel_sum += t.pixel_sq;
        text_sum += t.text_nll;
        pixel_active += t.pixel_active;
        text_active += t.text_active;
    }
    if (pixel_active == 0) {
        throw std::invalid_argument("pretrain_loss: zero active pixel targets");
    }
    if (text_active == 0) {
        throw std::invalid_argument("pretrain_loss: zero active text targets");
    }
    LossReport report;
    report.pixel_loss = pixel_sum / static_cast<double>(pixel_active);
    report.text_loss = text_sum / static_cast<double>(text_active);
    report.total = total_loss(report.pixel_loss, report.text_loss, alpha);
    report.active_pixel_targets = pixel_active;
    report.active_text_targets = text_active;
    return report;
}

// Forward + backward for one sample with externally supplied normalizers,
// accumulating parameter gradients. Exposed for the wave-parallel trainer.
inline detail::SampleTally pretrain_sample_grad(const BatchSample& s, EncoderParams& enc,
                                                DecoderParams& dec, double alpha,
                                                int64_t pixel_norm, int64_t text_norm) {
    EncoderCache enc_cache;
    DecoderCache dec_cache;
    const Tensor feats = encoder_fwd(s.patches, s.enc_mask, enc, &enc_cache);
    const DecoderOut out = decoder_fwd(feats, s.tokens, dec, &dec_cache);
    const auto tally = detail::tally_sample(s, out);

    const int64_t n = out.pixel_preds.rows(), d = out.pixel_preds.cols();
    Tensor dpixel({n, d});
    if (alpha != 0.0) {
        const double w = alpha * 2.0 / (static_cast<double>(d) * static_cast<double>(pixel_norm));
        for (int64_t i = 0; i < n; ++i) {
            if (!s.targets.pixel_loss_mask[static_cast<size_t>(i)]) {
                continue; // gradient stays exactly zero at masked positions
            }
            for (int64_t j = 0; j < d; ++j) {
                dpixel.at(i, j) =
                    w * (out.pixel_preds.at(i, j) - s.targets.pixel_targets.at(i, j));
            }
        }
    }

    const int64_t tn = out.token_logits.rows(), v = out.token_logits.cols();
    Tensor dlogits({tn, v});
    const double tw = 1.0 / static_cast<double>(text_norm);
    for (int64_t i = 0; i < tn; ++i) {
        if (!s.targets.text_loss_mask[static_cast<size_t>(i)]) {
            continue;
        }
        const real* row = out.token_logits.data() + i * v;
        real max_logit = row[0];
        for (int64_t j = 1; j < v; ++j) {
            max_logit = std::max(max_logit, row[j]);
        }
        double lse = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            lse += std::exp(row[j] - max_logit);
        }
        const double inv = 1.0 / lse;
        for (int64_t j = 0; j < v; ++j) {
            dlogits.at(i, j) = tw * std::exp(row[j] - max_logit) * inv;
        }
        dlogits.at(i, s.targets.text_targets[static_cast<size_t>(i)]) -= tw;
    }

    const Tensor dfeats = decoder_bwd(dpixel, dlogits, dec, dec_cache);
    encoder_bwd(dfeats, s.enc_mask, enc, enc_cache);
    return tally;
}

// Full forward + backward over a prepared batch (M fixed). Gradients are
// accumulated into the parameter structs in strict sample order.
inline LossReport pretrain_forward_backward(const MultimodalBatch& batch, EncoderParams& enc,
                                            DecoderParams& dec, double alpha) {
    int64_t pixel_active = 0, text_active = 0;
    for (const auto& s : batch.samples) {
        for (uint8_t m : s.targets.pixel_loss_mask) {
            pixel_active += m ? 1 : 0;
        }
        for (uint8_t m : s.targets.text_loss_mask) {
            text_active += m ? 1 : 0;
        }
    }
    if (pixel_active == 0) {
        throw std::invalid_argument("pretrain_forward_backward: zero active pixel targets");
    }
    if (text_active == 0) {
        throw std::invalid_argument("pretrain_forward_backward: zero active text targets");
    }

    double pixel_sum = 0.0, text_sum = 0.0;
    for (const auto& s : batch.samples) {
        const auto t = pretrain_sample_grad(s, enc, dec, alpha, pixel_active, text_active);
        pixel_sum += t.pixel_sq;
        text_sum += t.text_nll;
    }
    LossReport report;
    report.pixel_loss = pixel_sum / static_cast<double>(pixel_active);
    report.text_loss = text_sum / static_cast<double>(text_active);
    report.total = total_loss(report.pixel_loss, report.text_loss, alpha);
    report.active_pixel_targets = pixel_active;
    report.active_text_targets = text_active;
    return report;
}

// Full-pipeline gradient check on a synthetic batch with M fixed: random
// image and tokens, analytic gradients from the backward pass, central
// finite differences over every parameter element.
inline GradCheckReport model_grad_check(const ModelConfig& cfg, int64_t image_size,
                                        int64_t text_len, uint64_t seed, double eps = 1e-5,
                                        double tol = 1e-5) {
    if (cfg.vocab_size < 259) {
        throw std::invalid_argument("model_grad_check: byte-level vocabulary expected");
    }
    Rng rng(mix64(seed, fnv1a64("gradcheck")));
    EncoderParams enc;
    enc.init(cfg, rng);
    const int64_t grid = image_size / cfg.patch_size;
    const int64_t patches = grid * grid;
    DecoderParams dec;
    dec.init(cfg, patches + text_len, rng);

    Tensor image({image_size, image_size, cfg.channels});
    for (int64_t i = 0; i < image.numel(); ++i) {
        image[i] = rng.uniform01();
    }
    std::vector<int32_t> tokens;
    for (int64_t t = 0; t < text_len; ++t) {
        tokens.push_back(static_cast<int32_t>(rng.uniform_int(0, 255)));
    }
    const int64_t prefix = std::max<int64_t>(1, patches / 2);
    const MultimodalBatch batch =
        build_batch({image}, {tokens}, cfg.patch_size, prefix, 256, 257);

    ParamSet params;
    enc.register_params(params);
    dec.register_params(params);
    const double alpha = cfg.alpha;
    auto forward_only = [&] { return pretrain_loss(batch, enc, dec, alpha).total; };
    auto forward_backward = [&] {
        return pretrain_forward_backward(batch, enc, dec, alpha).total;
    };
    return grad_check(forward_only, params, eps, tol, 1e-2, forward_backward);
}

// The Fig.-1-shaped entry point: samples the prefix length from the given
// rng, builds shift-left targets and masks, and evaluates both losses.
inline LossReport pretrain_forward(const std::vector<Tensor>& images,
                                   const std::vector<std::vector<int32_t>>& token_seqs,
                                   EncoderParams& enc, DecoderParams& dec, double alpha, Rng& rng,
                                   int64_t patch_size, int32_t pad_id, int32_t eot_id,
                                   bool with_grad = true) {
    if (images.empty()) {
        throw std::invalid_argument("pretrain_forward: empty batch");
    }
    const PatchSequence probe = patchify(images.front(), patch_size);
    const int64_t prefix = sample_prefix_len(probe.count(), rng);
    const MultimodalBatch batch =
        build_batch(images, token_seqs, patch_size, prefix, pad_id, eot_id);
    if (with_grad) {
        return pretrain_forward_backward(batch, enc, dec, alpha);
    }
    return pretrain_loss(batch, enc, dec, alpha);
}

} // namespace aimv2
