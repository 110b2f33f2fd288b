#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "aimv2/config.hpp"
#include "aimv2/data.hpp"
#include "aimv2/encoder.hpp"
#include "aimv2/hashing.hpp"
#include "aimv2/nn.hpp"
#include "aimv2/trainer.hpp"

namespace aimv2 {

// Attentive probe: one learnable query, one cross-attention layer over the
// frozen encoder's patch features, then a linear classifier. The encoder's
// parameters never enter the probe's ParamSet, so no training
// configuration can touch them.
struct ProbeParams {
    Param query; // [1, d_enc]
    AttentionParams attn;
    Param cls_w; // [d_enc, num_classes]
    Param cls_b;
    int64_t num_classes = 0;

    void init(int64_t d_enc, int64_t heads, int64_t classes, Rng& rng) {
        num_classes = classes;
        query = Param({int64_t(1), d_enc});
        for (int64_t i = 0; i < d_enc; ++i) {
            query.w[i] = rng.normal() * 0.02;
        }
        attn.init(d_enc, heads, true, rng);
        cls_w = Param({d_enc, classes});
        for (int64_t i = 0; i < cls_w.w.numel(); ++i) {
            cls_w.w[i] = rng.normal() * 0.02;
        }
        cls_b = Param({classes});
    }

    void register_params(ParamSet& ps, const std::string& prefix = "probe") {
        ps.add(prefix + ".query", query);
        attn.register_params(ps, prefix + ".attn");
        ps.add(prefix + ".cls.w", cls_w);
        ps.add(prefix + ".cls.b", cls_b);
    }
};

struct AttentivePoolCache {
    Tensor features;
    Tensor q, k, v; // projected
    Tensor attn;    // [heads, I]
    Tensor mha_out; // [1, d]
};

// Cross-attention of the query over all features; softmax over every
// position (the probe always sees the bidirectional encoder).
inline Tensor attentive_pool_fwd(const Tensor& features, const ProbeParams& p,
                                 AttentivePoolCache* cache = nullptr) {
    const int64_t n = features.rows(), d = features.cols();
    if (n < 1) {
        throw std::invalid_argument("attentive_pool: need at least one feature");
    }
    const int64_t heads = p.attn.heads, hd = d / heads;
    const real scale = 1.0 / std::sqrt(static_cast<real>(hd));

    Tensor q({int64_t(1), d}), k({n, d}), v({n, d});
    matmul(p.query.w, p.attn.wq.w, q);
    matmul(features, p.attn.wk.w, k);
    matmul(features, p.attn.wv.w, v);
    if (p.attn.use_bias) {
        add_row_bias(q, p.attn.bq.w);
        add_row_bias(k, p.attn.bk.w);
        add_row_bias(v, p.attn.bv.w);
    }

    Tensor attn({heads, n});
    Tensor mha_out({int64_t(1), d});
    for (int64_t h = 0; h < heads; ++h) {
        const int64_t off = h * hd;
        real* a = attn.data() + h * n;
        real max_s = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            real s = 0.0;
            for (int64_t c = 0; c < hd; ++c) {
                s += q[off + c] * k.at(j, off + c);
            }
            a[j] = s * scale;
            if (j == 0 || a[j] > max_s) {
                max_s = a[j];
            }
        }
        real denom = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            a[j] = std::exp(a[j] - max_s);
            denom += a[j];
        }
        for (int64_t j = 0; j < n; ++j) {
            a[j] /= denom;
            for (int64_t c = 0; c < hd; ++c) {
                mha_out[off + c] += a[j] * v.at(j, off + c);
            }
        }
    }

    Tensor pooled({int64_t(1), d});
    matmul(mha_out, p.attn.wo.w, pooled);
    if (p.attn.use_bias) {
        add_row_bias(pooled, p.attn.bo.w);
    }
    if (cache) {
        cache->features = features;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn = std::move(attn);
        cache->mha_out = std::move(mha_out);
    }
    return pooled;
}

inline Tensor attentive_pool(const Tensor& features, const ProbeParams& p) {
    return attentive_pool_fwd(features, p);
}

// Backward through pooling only; features are treated as constants
// (frozen trunk), so nothing flows back into the encoder.
inline void attentive_pool_bwd(const Tensor& dpooled, ProbeParams& p,
                               const AttentivePoolCache& cache) {
    const int64_t n = cache.features.rows(), d = cache.features.cols();
    const int64_t heads = p.attn.heads, hd = d / heads;
    const real scale = 1.0 / std::sqrt(static_cast<real>(hd));

    Tensor dmha({int64_t(1), d});
    matmul_nt(dpooled, p.attn.wo.w, dmha);
    matmul_tn(cache.mha_out, dpooled, p.attn.wo.g, true);
    if (p.attn.use_bias) {
        accumulate_bias_grad(dpooled, p.attn.bo.g);
    }

    Tensor dq({int64_t(1), d}), dk({n, d}), dv({n, d});
    for (int64_t h = 0; h < heads; ++h) {
        const int64_t off = h * hd;
        const real* a = cache.attn.data() + h * n;
        std::vector<real> da(static_cast<size_t>(n));
        real inner = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            real g = 0.0;
            for (int64_t c = 0; c < hd; ++c) {
                g += dmha[off + c] * cache.v.at(j, off + c);
            }
            da[static_cast<size_t>(j)] = g;
            inner += a[j] * g;
        }
        for (int64_t j = 0; j < n; ++j) {
            for (int64_t c = 0; c < hd; ++c) {
                dv.at(j, off + c) += a[j] * dmha[off + c];
            }
            const real ds = a[j] * (da[static_cast<size_t>(j)] - inner) * scale;
            for (int64_t c = 0; c < hd; ++c) {
                dq[off + c] += ds * cache.k.at(j, off + c);
                dk.at(j, off + c) += ds * cache.q[off + c];
            }
        }
    }

    matmul_nt(dq, p.attn.wq.w, p.query.g, true);
    matmul_tn(p.query.w, dq, p.attn.wq.g, true);
    matmul_tn(cache.features, dk, p.attn.wk.g, true);
    matmul_tn(cache.features, dv, p.attn.wv.g, true);
    if (p.attn.use_bias) {
        accumulate_bias_grad(dq, p.attn.bq.g);
        accumulate_bias_grad(dk, p.attn.bk.g);
        accumulate_bias_grad(dv, p.attn.bv.g);
    }
}

inline Tensor probe_logits_fwd(const Tensor& features, const ProbeParams& p,
                               AttentivePoolCache* cache = nullptr) {
    const Tensor pooled = attentive_pool_fwd(features, p, cache);
    Tensor logits({int64_t(1), p.num_classes});
    matmul(pooled, p.cls_w.w, logits);
    add_row_bias(logits, p.cls_b.w);
    return logits;
}

struct LabeledFeatures {
    Tensor features; // [I, d_enc]
    int32_t label = 0;
};

struct ProbeDataset {
    std::vector<LabeledFeatures> train;
    std::vector<LabeledFeatures> eval;
    int64_t num_classes = 0;
};

// Byte checksum over encoder parameters; asserted unchanged around probe
// training.
inline uint32_t encoder_checksum(EncoderParams& enc) {
    ParamSet ps;
    enc.register_params(ps, "chk");
    uint32_t crc = 0;
    for (const auto& e : ps.entries()) {
        crc = crc32_update(crc, e.param->w.data(),
                           static_cast<size_t>(e.param->w.numel()) * sizeof(real));
    }
    return crc;
}

// Frozen-trunk feature extraction: bidirectional mask (M = I).
inline Tensor extract_features(const Tensor& image, const EncoderParams& enc, int64_t patch_size) {
    const PatchSequence seq = patchify(image, patch_size);
    const AttentionMask mask = build_prefix_mask(seq.count(), seq.count());
    return encoder_forward(seq, mask, enc);
}

struct ProbeHparams {
    std::vector<double> lr_grid = {1e-4, 1e-3};
    std::vector<double> wd_grid = {0.05, 0.1};
    int64_t steps = 300;
    int64_t batch_size = 16;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double grad_clip = 3.0;
    uint64_t seed = 0;
};

struct ProbeSweepEntry {
    double lr = 0.0;
    double weight_decay = 0.0;
    double eval_accuracy = 0.0;
    double train_accuracy = 0.0;
};

struct ProbeResult {
    ProbeParams best_params;
    ProbeSweepEntry best;
    std::vector<ProbeSweepEntry> sweep;
};

inline double evaluate_probe_on_features(const std::vector<LabeledFeatures>& split,
                                         const ProbeParams& probe) {
    if (split.empty()) {
        throw std::invalid_argument("evaluate_probe: empty dataset");
    }
    int64_t correct = 0;
    for (const auto& item : split) {
        if (item.label < 0 || item.label >= probe.num_classes) {
            throw std::invalid_argument("evaluate_probe: class index out of range");
        }
        const Tensor logits = probe_logits_fwd(item.features, probe);
        int64_t best = 0;
        for (int64_t j = 1; j < probe.num_classes; ++j) {
            if (logits[j] > logits[best]) {
                best = j;
            }
        }
        correct += (best == item.label) ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

namespace detail {

inline ProbeParams train_probe_once(const ProbeDataset& data, int64_t d_enc, int64_t heads,
                                    double lr, double wd, const ProbeHparams& hp) {
    ProbeParams probe;
    Rng init_rng(mix64(hp.seed, fnv1a64("probe_init")));
    probe.init(d_enc, heads, data.num_classes, init_rng);

    ParamSet ps;
    probe.register_params(ps);
    OptimizerState opt;
    opt.init(ps);
    OptimConfig oc;
    oc.peak_lr = lr;
    oc.min_lr = 0.0;
    oc.weight_decay = wd;
    oc.beta1 = hp.beta1;
    oc.beta2 = hp.beta2;
    oc.grad_clip = hp.grad_clip;
    oc.warmup_steps = 0;
    oc.total_steps = hp.steps;
    oc.schedule_kind = ScheduleKind::cosine;

    const int64_t n = static_cast<int64_t>(data.train.size());
    for (int64_t step = 0; step < hp.steps; ++step) {
        Rng rng(mix64(hp.seed, fnv1a64("probe_step"), static_cast<uint64_t>(step)));
        ps.zero_grads();
        const int64_t bs = std::min<int64_t>(hp.batch_size, n);
        for (int64_t b = 0; b < bs; ++b) {
            const auto& item = data.train[static_cast<size_t>(rng.uniform_int(0, n - 1))];
            AttentivePoolCache cache;
            const Tensor logits = probe_logits_fwd(item.features, probe, &cache);

            // softmax cross-entropy on the class label
            const int64_t k = probe.num_classes;
            real max_l = logits[0];
            for (int64_t j = 1; j < k; ++j) {
                max_l = std::max(max_l, logits[j]);
            }
            double lse = 0.0;
            for (int64_t j = 0; j < k; ++j) {
                lse += std::exp(logits[j] - max_l);
            }
            Tensor dlogits({int64_t(1), k});
            const double inv_b = 1.0 / static_cast<double>(bs);
            for (int64_t j = 0; j < k; ++j) {
                dlogits[j] = std::exp(logits[j] - max_l) / lse * inv_b;
            }
            dlogits[item.label] -= inv_b;

            Tensor dpooled({int64_t(1), d_enc});
            matmul_nt(dlogits, probe.cls_w.w, dpooled);
            Tensor pooled({int64_t(1), d_enc});
            matmul(cache.mha_out, probe.attn.wo.w, pooled);
            if (probe.attn.use_bias) {
                add_row_bias(pooled, probe.attn.bo.w);
            }
            matmul_tn(pooled, dlogits, probe.cls_w.g, true);
            accumulate_bias_grad(dlogits, probe.cls_b.g);
            attentive_pool_bwd(dpooled, probe, cache);
        }
        clip_gradients(ps, hp.grad_clip);
        adamw_update(ps, opt, lr_at_step(step + 1, oc), oc);
    }
    return probe;
}

} // namespace detail

// Grid sweep over learning rate and weight decay, best eval accuracy wins.
// The encoder is referenced only through the pre-extracted features.
inline ProbeResult train_probe(const ProbeDataset& data, int64_t d_enc, int64_t heads,
                               const ProbeHparams& hp) {
    if (data.train.empty()) {
        throw std::invalid_argument("train_probe: empty dataset");
    }
    ProbeResult result;
    bool first = true;
    for (double lr : hp.lr_grid) {
        for (double wd : hp.wd_grid) {
            ProbeParams probe = detail::train_probe_once(data, d_enc, heads, lr, wd, hp);
            ProbeSweepEntry entry;
            entry.lr = lr;
            entry.weight_decay = wd;
            entry.train_accuracy = evaluate_probe_on_features(data.train, probe);
            entry.eval_accuracy = data.eval.empty()
                                      ? entry.train_accuracy
                                      : evaluate_probe_on_features(data.eval, probe);
            result.sweep.push_back(entry);
            if (first || entry.eval_accuracy > result.best.eval_accuracy) {
                result.best = entry;
                result.best_params = std::move(probe);
                first = false;
            }
        }
    }
    return result;
}

struct LabeledImage {
    Tensor image;
    int32_t label = 0;
};

// Top-1 accuracy of a trained probe over raw labeled images; deterministic.
inline double evaluate_probe(const EncoderParams& enc, const ProbeParams& probe,
                             const std::vector<LabeledImage>& dataset, int64_t patch_size) {
    if (dataset.empty()) {
        throw std::invalid_argument("evaluate_probe: empty dataset");
    }
    std::vector<LabeledFeatures> split;
    split.reserve(dataset.size());
    for (const auto& item : dataset) {
        LabeledFeatures lf;
        lf.features = extract_features(item.image, enc, patch_size);
        lf.label = item.label;
        split.push_back(std::move(lf));
    }
    return evaluate_probe_on_features(split, probe);
}

// Convenience wrapper used by the CLI and the acceptance suite: builds a
// labeled single-shape dataset, extracts frozen features, runs the sweep.
struct ProbeTaskSpec {
    int64_t canvas = 16;
    int64_t num_classes = 4; // shape kinds
    int64_t train_size = 128;
    int64_t eval_size = 128;
    uint64_t data_seed = 7;
};

inline ProbeDataset build_probe_dataset(const EncoderParams& enc, const ModelConfig& model,
                                        const ProbeTaskSpec& task) {
    SceneSpec spec;
    spec.canvas = task.canvas;
    spec.channels = model.channels;
    spec.min_shapes = 1;
    spec.max_shapes = 1;
    spec.num_shape_kinds = task.num_classes;

    ProbeDataset data;
    data.num_classes = task.num_classes;
    auto make_split = [&](int64_t count, uint64_t salt) {
        std::vector<LabeledFeatures> split;
        for (int64_t i = 0; i < count; ++i) {
            const CaptionedImage scene =
                generate_scene(mix64(task.data_seed, salt, static_cast<uint64_t>(i)), spec);
            LabeledFeatures lf;
            lf.features = extract_features(scene.image, enc, model.patch_size);
            lf.label = scene.class_label;
            split.push_back(std::move(lf));
        }
        return split;
    };
    data.train = make_split(task.train_size, fnv1a64("train"));
    data.eval = make_split(task.eval_size, fnv1a64("eval"));
    return data;
}

} // namespace aimv2
