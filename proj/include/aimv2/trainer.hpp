#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "aimv2/checkpoint.hpp"
#include "aimv2/config.hpp"
#include "aimv2/data.hpp"
#include "aimv2/decoder.hpp"
#include "aimv2/encoder.hpp"
#include "aimv2/objective.hpp"

namespace aimv2 {

// ---------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------

// 20% of the initial stage; exact when total_steps is a multiple of 5.
inline int64_t cooldown_steps(const OptimConfig& o) {
    return o.total_steps / 5;
}

inline int64_t schedule_end(const OptimConfig& o) {
    return o.schedule_kind == ScheduleKind::half_cosine_cooldown
               ? o.total_steps + cooldown_steps(o)
               : o.total_steps;
}

inline double lr_at_step(int64_t t, const OptimConfig& o) {
    constexpr double pi = 3.14159265358979323846;
    if (t < 0 || t > schedule_end(o)) {
        throw std::invalid_argument("lr_at_step: step out of schedule range");
    }
    if (t < o.warmup_steps) {
        return o.peak_lr * static_cast<double>(t) / static_cast<double>(o.warmup_steps);
    }
    const double span = static_cast<double>(o.total_steps - o.warmup_steps);
    auto half_cosine_at = [&](double tau) {
        return o.peak_lr * 0.5 * (1.0 + std::cos(pi * tau * 0.5));
    };
    switch (o.schedule_kind) {
        case ScheduleKind::cosine: {
            const double tau = static_cast<double>(t - o.warmup_steps) / span;
            return o.min_lr + 0.5 * (o.peak_lr - o.min_lr) * (1.0 + std::cos(pi * tau));
        }
        case ScheduleKind::half_cosine: {
            const double tau = static_cast<double>(t - o.warmup_steps) / span;
            return half_cosine_at(tau);
        }
        case ScheduleKind::half_cosine_cooldown: {
            if (t <= o.total_steps) {
                const double tau = static_cast<double>(t - o.warmup_steps) / span;
                return half_cosine_at(tau);
            }
            const int64_t cd = cooldown_steps(o);
            const int64_t k = t - o.total_steps;
            if (k == cd) {
                return o.final_cooldown_lr;
            }
            const double start = half_cosine_at(1.0);
            return start + (o.final_cooldown_lr - start) * static_cast<double>(k) /
                               static_cast<double>(cd);
        }
    }
    throw std::logic_error("lr_at_step: bad schedule kind");
}

// ---------------------------------------------------------------------
// Fully decoupled AdamW: the weight-decay shrinkage has its own rate and
// never sees the scheduled learning rate.
// ---------------------------------------------------------------------

struct OptimizerState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    int64_t step = 0;

    void init(const ParamSet& params) {
        m.clear();
        v.clear();
        step = 0;
        for (const auto& e : params.entries()) {
            m.emplace_back(e.param->w.shape());
            v.emplace_back(e.param->w.shape());
        }
    }
};

inline void adamw_update(ParamSet& params, OptimizerState& state, double lr,
                         const OptimConfig& o) {
    if (state.m.size() != params.size()) {
        throw std::invalid_argument("adamw_update: optimizer state does not match params");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
    constexpr double adam_eps = 1e-8;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Param& p = *params.entries()[pi].param;
        Tensor& m = state.m[pi];
        Tensor& v = state.v[pi];
        for (int64_t i = 0; i < p.w.numel(); ++i) {
            const double g = p.g[i];
            if (!std::isfinite(g)) {
                throw std::runtime_error("adamw_update: non-finite gradient in " +
                                         params.entries()[pi].name);
            }
            m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g;
            v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.w[i] -= lr * mhat / (std::sqrt(vhat) + adam_eps);
            if (o.weight_decay != 0.0) {
                p.w[i] -= o.weight_decay * p.w[i];
            }
        }
    }
}

// Global-norm clipping; returns the pre-clip norm.
inline double clip_gradients(ParamSet& params, double max_norm) {
    if (max_norm <= 0.0) {
        throw std::invalid_argument("clip_gradients: max_norm must be positive");
    }
    const double norm = params.grad_norm();
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& e : params.entries()) {
            e.param->g.scale_(scale);
        }
    }
    return norm;
}

// ---------------------------------------------------------------------
// Worker parallelism cap: AIMV2_KIT_THREADS, default hardware concurrency.
// ---------------------------------------------------------------------

inline int64_t thread_budget() {
    if (const char* env = std::getenv("AIMV2_KIT_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) {
            return static_cast<int64_t>(v);
        }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int64_t>(hw);
}

// ---------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------

struct MetricsRow {
    int64_t step = 0;
    double lr = 0.0;
    double pixel_loss = 0.0;
    double text_loss = 0.0;
    double total = 0.0;
};

struct TrainOptions {
    std::string resume_path;
    bool high_res_adapt = false;
    std::string dump_dir;       // dump the first batch as .ppm/.pgm + caption sidecars
    int64_t threads = 0;        // 0 = thread_budget()
    int64_t stop_after_step = 0; // pause the run at this step (0 = run to the end)
};

struct TrainResult {
    std::vector<MetricsRow> metrics;
    LossReport final_report;
    std::string checkpoint_path;
    std::string metrics_path;
    int64_t steps_run = 0;
    uint32_t config_hash = 0;
    std::string warning;
};

class TrainState {
public:
    EncoderParams encoder;
    DecoderParams decoder;
    ParamSet params;
    OptimizerState opt;

    void init(const RunConfig& cfg, int64_t max_positions) {
        Rng init_rng(mix64(static_cast<uint64_t>(cfg.seed), fnv1a64("init")));
        encoder.init(cfg.model, init_rng);
        decoder.init(cfg.model, max_positions, init_rng);
        encoder.register_params(params);
        decoder.register_params(params);
        opt.init(params);
    }

    CheckpointData to_checkpoint(uint32_t cfg_hash, int64_t step) const {
        CheckpointData data;
        data.config_hash = cfg_hash;
        data.step = static_cast<uint64_t>(step);
        for (const auto& e : params.entries()) {
            data.arrays.emplace_back("param/" + e.name, e.param->w);
        }
        for (size_t i = 0; i < params.size(); ++i) {
            data.arrays.emplace_back("adam_m/" + params.entries()[i].name, opt.m[i]);
        }
        for (size_t i = 0; i < params.size(); ++i) {
            data.arrays.emplace_back("adam_v/" + params.entries()[i].name, opt.v[i]);
        }
        return data;
    }

    void restore(const CheckpointData& data) {
        for (size_t i = 0; i < params.size(); ++i) {
            const auto& name = params.entries()[i].name;
            const Tensor* w = data.find("param/" + name);
            const Tensor* m = data.find("adam_m/" + name);
            const Tensor* v = data.find("adam_v/" + name);
            if (!w || !m || !v) {
                throw CheckpointError("checkpoint missing arrays for " + name);
            }
            if (!w->same_shape(params.entries()[i].param->w)) {
                throw CheckpointError("checkpoint shape mismatch for " + name);
            }
            params.entries()[i].param->w = *w;
            opt.m[i] = *m;
            opt.v[i] = *v;
        }
        opt.step = static_cast<int64_t>(data.step);
    }
};

namespace detail {

// Decoder positional table must cover the longest sequence any mode can
// produce: fixed res, 2x high-res adaptation, and the largest native area.
inline int64_t max_decoder_positions(const RunConfig& cfg) {
    const int64_t p = cfg.model.patch_size;
    int64_t max_patches = (cfg.data.image_size / p) * (cfg.data.image_size / p);
    const int64_t hr = cfg.data.effective_high_res();
    if (hr % p == 0) {
        max_patches = std::max(max_patches, (hr / p) * (hr / p));
    }
    if (cfg.data.native_res) {
        max_patches = std::max(max_patches, int64_t(1) << cfg.data.area_n_hi);
    }
    return max_patches + cfg.model.max_text_len;
}

struct StepBatch {
    MultimodalBatch batch;
    std::vector<CaptionedImage> scenes; // kept only for --dump-data
};

inline StepBatch build_step_batch(const RunConfig& cfg, int64_t step, bool keep_scenes) {
    Rng rng(mix64(static_cast<uint64_t>(cfg.seed), fnv1a64("step"), static_cast<uint64_t>(step)));

    SceneSpec spec;
    spec.canvas = cfg.data.image_size;
    spec.channels = cfg.model.channels;
    spec.min_shapes = cfg.data.min_shapes;
    spec.max_shapes = cfg.data.max_shapes;

    int64_t batch_size = cfg.data.batch_size;
    int64_t area = 0;
    if (cfg.data.native_res) {
        const BatchPlan plan =
            plan_native_batch(cfg.data.token_budget, rng, cfg.data.area_n_lo, cfg.data.area_n_hi);
        batch_size = plan.batch_size;
        area = plan.area;
    }

    StepBatch out;
    std::vector<PatchSequence> sequences;
    std::vector<std::vector<int32_t>> token_seqs;
    int64_t patch_count = 0;
    for (int64_t b = 0; b < batch_size; ++b) {
        const int64_t src = cfg.data.sources.size() > 1
                                ? sample_source(cfg.data.sources, rng)
                                : 0;
        const int64_t idx = rng.uniform_int(0, cfg.data.dataset_size - 1);
        const uint64_t scene_seed =
            mix64(cfg.data.sources[static_cast<size_t>(src)].seed, fnv1a64("scene"),
                  static_cast<uint64_t>(idx));
        CaptionedImage pair = generate_scene(scene_seed, spec);
        pair.source_id = static_cast<int32_t>(src);

        PatchSequence seq;
        if (cfg.data.native_res) {
            FittedImage fit = fit_image_to_area(pair.image, area, cfg.model.patch_size);
            seq = patchify(fit.image, cfg.model.patch_size);
            seq.valid = fit.valid;
        } else {
            seq = patchify(pair.image, cfg.model.patch_size);
        }
        patch_count = seq.count();
        sequences.push_back(std::move(seq));
        token_seqs.push_back(caption_input_tokens(pair.caption, cfg.model.max_text_len));
        if (keep_scenes) {
            out.scenes.push_back(std::move(pair));
        }
    }

    // With zero padding in play, prefix lengths at or beyond the last valid
    // patch pair would leave the batch without a single pixel target, so M
    // is drawn from the feasible range. Fully valid batches reduce to the
    // plain M ~ U{1, ..., I-1} draw.
    int64_t max_target = 0; // largest 1-based target index over valid pairs
    for (const auto& seq : sequences) {
        for (int64_t i = 0; i + 1 < seq.count(); ++i) {
            if (seq.valid[static_cast<size_t>(i)] && seq.valid[static_cast<size_t>(i + 1)]) {
                max_target = std::max(max_target, i + 2);
            }
        }
    }
    if (max_target < 2) {
        throw std::runtime_error("build_step_batch: no trainable patch pair in batch");
    }
    const int64_t prefix = rng.uniform_int(1, std::min(patch_count - 1, max_target - 1));
    out.batch.prefix_len = prefix;
    for (size_t s = 0; s < sequences.size(); ++s) {
        out.batch.samples.push_back(
            make_sample(std::move(sequences[s]), std::move(token_seqs[s]), prefix, pad_token_id,
                        eot_token_id));
    }
    return out;
}

// Wave-parallel batch gradient: workers run independent samples against
// private parameter copies. Every sample's gradient is produced in an
// isolated buffer and merged in strict sample order, so the result is
// bit-identical for every thread count (including 1).
inline LossReport batch_forward_backward(const MultimodalBatch& batch, EncoderParams& enc,
                                         DecoderParams& dec, double alpha, int64_t threads) {
    const int64_t n = static_cast<int64_t>(batch.samples.size());
    const int64_t workers = std::clamp<int64_t>(threads, 1, n);

    int64_t pixel_active = 0, text_active = 0;
    for (const auto& s : batch.samples) {
        for (uint8_t m : s.targets.pixel_loss_mask) {
            pixel_active += m ? 1 : 0;
        }
        for (uint8_t m : s.targets.text_loss_mask) {
            text_active += m ? 1 : 0;
        }
    }
    if (pixel_active == 0 || text_active == 0) {
        throw std::invalid_argument("batch_forward_backward: zero active targets");
    }

    std::vector<EncoderParams> enc_copies(static_cast<size_t>(workers), enc);
    std::vector<DecoderParams> dec_copies(static_cast<size_t>(workers), dec);
    ParamSet main_params;
    enc.register_params(main_params);
    dec.register_params(main_params);
    std::vector<ParamSet> copy_sets(static_cast<size_t>(workers));
    for (int64_t w = 0; w < workers; ++w) {
        enc_copies[static_cast<size_t>(w)].register_params(copy_sets[static_cast<size_t>(w)]);
        dec_copies[static_cast<size_t>(w)].register_params(copy_sets[static_cast<size_t>(w)]);
    }

    double pixel_sum = 0.0, text_sum = 0.0;
    std::vector<SampleTally> tallies(static_cast<size_t>(workers));
    for (int64_t base = 0; base < n; base += workers) {
        const int64_t wave = std::min(workers, n - base);
        auto run_slot = [&](int64_t w) {
            copy_sets[static_cast<size_t>(w)].zero_grads();
            tallies[static_cast<size_t>(w)] = pretrain_sample_grad(
                batch.samples[static_cast<size_t>(base + w)], enc_copies[static_cast<size_t>(w)],
                dec_copies[static_cast<size_t>(w)], alpha, pixel_active, text_active);
        };
        if (wave == 1) {
            run_slot(0);
        } else {
            std::vector<std::thread> pool;
            for (int64_t w = 0; w < wave; ++w) {
                pool.emplace_back(run_slot, w);
            }
            for (auto& t : pool) {
                t.join();
            }
        }
        for (int64_t w = 0; w < wave; ++w) { // strict sample order
            pixel_sum += tallies[static_cast<size_t>(w)].pixel_sq;
            text_sum += tallies[static_cast<size_t>(w)].text_nll;
            for (size_t pi = 0; pi < main_params.size(); ++pi) {
                main_params.entries()[pi].param->g.add_(
                    copy_sets[static_cast<size_t>(w)].entries()[pi].param->g);
            }
        }
    }

    LossReport report;
    report.pixel_loss = pixel_sum / static_cast<double>(pixel_active);
    report.text_loss = text_sum / static_cast<double>(text_active);
    report.total = total_loss(report.pixel_loss, report.text_loss, alpha);
    report.active_pixel_targets = pixel_active;
    report.active_text_targets = text_active;
    return report;
}

} // namespace detail

struct TrainingAborted : std::runtime_error {
    TrainingAborted(const std::string& msg, std::string last_checkpoint)
        : std::runtime_error(msg + (last_checkpoint.empty()
                                        ? " (no checkpoint written yet)"
                                        : " (last good checkpoint: " + last_checkpoint + ")")),
          last_good_checkpoint(std::move(last_checkpoint)) {}

    std::string last_good_checkpoint;
};

inline TrainResult train(RunConfig cfg, const TrainOptions& opts = {}) {
    // The positional table is sized from the pre-adaptation config (which
    // already reserves high-res capacity), so base checkpoints load
    // unchanged into the high-res stage.
    const int64_t max_positions = detail::max_decoder_positions(cfg);
    if (opts.high_res_adapt) {
        cfg.optim.weight_decay = 0.0; // required for stable high-res adaptation
        cfg.data.image_size = cfg.data.effective_high_res();
    }
    validate_config(cfg);
    const uint32_t cfg_hash = config_hash(cfg);

    TrainState state;
    state.init(cfg, max_positions);

    int64_t start_step = 0;
    TrainResult result;
    result.config_hash = cfg_hash;
    if (!opts.resume_path.empty()) {
        const CheckpointData data = load_checkpoint(opts.resume_path);
        state.restore(data);
        start_step = static_cast<int64_t>(data.step);
        if (data.config_hash != cfg_hash) {
            result.warning = "resumed checkpoint was written under a different config";
        }
    }

    int64_t end_step = schedule_end(cfg.optim);
    if (opts.stop_after_step > 0) {
        end_step = std::min(end_step, opts.stop_after_step);
    }
    if (start_step > end_step) {
        throw ValidationError("checkpoint step is beyond the configured schedule");
    }

    std::filesystem::create_directories(cfg.checkpoint_dir);
    result.metrics_path = (std::filesystem::path(cfg.checkpoint_dir) / "metrics.tsv").string();
    std::ofstream metrics(result.metrics_path, std::ios::app);
    if (!metrics) {
        throw std::runtime_error("cannot open metrics log '" + result.metrics_path + "'");
    }
    metrics.precision(17);

    const int64_t threads = opts.threads > 0 ? opts.threads : thread_budget();
    std::string last_ckpt;

    auto save_at = [&](int64_t step) {
        const auto path = std::filesystem::path(cfg.checkpoint_dir) /
                          ("ckpt_step" + std::to_string(step) + ".bin");
        save_checkpoint(state.to_checkpoint(cfg_hash, step), path.string());
        last_ckpt = path.string();
        return last_ckpt;
    };

    for (int64_t step = start_step; step < end_step; ++step) {
        detail::StepBatch sb =
            detail::build_step_batch(cfg, step, !opts.dump_dir.empty() && step == start_step);
        if (!sb.scenes.empty()) {
            std::filesystem::create_directories(opts.dump_dir);
            for (size_t i = 0; i < sb.scenes.size(); ++i) {
                const auto base =
                    std::filesystem::path(opts.dump_dir) / ("pair" + std::to_string(i));
                dump_ppm(sb.scenes[i].image, base.string() + ".ppm");
                std::ofstream cap(base.string() + ".txt");
                cap << sb.scenes[i].caption << "\n";
                const auto& seq = sb.batch.samples[i].patches;
                dump_pgm(seq.valid, seq.rows, seq.cols, base.string() + "_patches.pgm");
            }
        }

        state.params.zero_grads();
        const LossReport report = detail::batch_forward_backward(
            sb.batch, state.encoder, state.decoder, cfg.model.alpha, threads);
        if (!std::isfinite(report.total)) {
            throw TrainingAborted("non-finite loss at step " + std::to_string(step), last_ckpt);
        }
        clip_gradients(state.params, cfg.optim.grad_clip);
        const double lr = lr_at_step(step + 1, cfg.optim);
        adamw_update(state.params, state.opt, lr, cfg.optim);

        result.final_report = report;
        if ((step + 1) % cfg.log_every == 0 || step + 1 == end_step) {
            MetricsRow row{step + 1, lr, report.pixel_loss, report.text_loss, report.total};
            result.metrics.push_back(row);
            metrics << row.step << '\t' << row.lr << '\t' << row.pixel_loss << '\t'
                    << row.text_loss << '\t' << row.total << '\n';
        }
        if (cfg.save_every > 0 && (step + 1) % cfg.save_every == 0 && step + 1 != end_step) {
            save_at(step + 1);
        }
    }

    result.checkpoint_path = save_at(end_step);
    result.steps_run = end_step - start_step;
    metrics.flush();
    return result;
}

} // namespace aimv2
