#include <catch2/catch.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "aimv2/trainer.hpp"

using namespace aimv2;

namespace {

RunConfig quick_config(const std::string& dir, int64_t total = 10) {
    RunConfig cfg;
    cfg.model = preset_model("desk_tiny");
    cfg.optim = preset_optim("desk_tiny");
    cfg.optim.total_steps = total;
    cfg.optim.warmup_steps = 2;
    cfg.data.image_size = 8;
    cfg.data.batch_size = 2;
    cfg.data.dataset_size = 8;
    cfg.seed = 77;
    cfg.checkpoint_dir = dir;
    cfg.log_every = 2;
    validate_config(cfg);
    return cfg;
}

struct TempDir {
    std::string path;
    explicit TempDir(std::string p) : path(std::move(p)) {
        std::filesystem::remove_all(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

bool params_bit_equal(TrainState& a, TrainState& b) {
    if (a.params.size() != b.params.size()) {
        return false;
    }
    for (size_t i = 0; i < a.params.size(); ++i) {
        const Tensor& wa = a.params.entries()[i].param->w;
        const Tensor& wb = b.params.entries()[i].param->w;
        if (!wa.same_shape(wb) ||
            std::memcmp(wa.data(), wb.data(), sizeof(real) * wa.numel()) != 0) {
            return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("learning-rate schedules hit the published anchor points") {
    OptimConfig o;
    o.peak_lr = 1e-3;
    o.min_lr = 1e-5;
    o.final_cooldown_lr = 1e-6;
    o.warmup_steps = 100;
    o.total_steps = 1000;

    SECTION("cosine reaches the peak at warmup end and the floor at the end") {
        o.schedule_kind = ScheduleKind::cosine;
        CHECK(lr_at_step(0, o) == 0.0);
        CHECK(lr_at_step(100, o) == Approx(1e-3).epsilon(1e-15));
        CHECK(lr_at_step(1000, o) == Approx(1e-5).margin(1e-12));
        CHECK_THROWS_AS(lr_at_step(1001, o), std::invalid_argument);
        CHECK_THROWS_AS(lr_at_step(-1, o), std::invalid_argument);
    }
    SECTION("half-cosine ends at half the peak") {
        o.schedule_kind = ScheduleKind::half_cosine;
        const double final = lr_at_step(1000, o);
        CHECK(std::abs(final - 5e-4) <= 1e-12 * 5e-4);
        CHECK_THROWS_AS(lr_at_step(1001, o), std::invalid_argument);
    }
    SECTION("cooldown branch is continuous and terminates at 1e-6") {
        o.schedule_kind = ScheduleKind::half_cosine_cooldown;
        CHECK(cooldown_steps(o) == 200); // exactly 20% of the base stage
        OptimConfig base = o;
        base.schedule_kind = ScheduleKind::half_cosine;
        // continuity at the branch point
        CHECK(lr_at_step(1000, o) == lr_at_step(1000, base));
        CHECK(lr_at_step(1200, o) == 1e-6);
        // linearity inside the cooldown
        const double mid = lr_at_step(1100, o);
        CHECK(mid == Approx(0.5 * (lr_at_step(1000, o) + 1e-6)).epsilon(1e-12));
    }
    SECTION("warmup is linear from zero") {
        o.schedule_kind = ScheduleKind::cosine;
        CHECK(lr_at_step(50, o) == Approx(5e-4).epsilon(1e-15));
    }
}

TEST_CASE("adamw update semantics") {
    OptimConfig o;
    o.beta1 = 0.9;
    o.beta2 = 0.95;

    SECTION("zero gradients and zero decay leave parameters untouched") {
        Param p({3});
        p.w[0] = 1.0;
        p.w[1] = -2.0;
        p.w[2] = 0.5;
        const Tensor before = p.w;
        ParamSet ps;
        ps.add("p", p);
        OptimizerState st;
        st.init(ps);
        o.weight_decay = 0.0;
        adamw_update(ps, st, 1e-3, o);
        CHECK(std::memcmp(p.w.data(), before.data(), 3 * sizeof(real)) == 0);
    }
    SECTION("decay is fully decoupled from the learning rate") {
        Param p({1});
        p.w[0] = 4.0;
        ParamSet ps;
        ps.add("p", p);
        OptimizerState st;
        st.init(ps);
        o.weight_decay = 0.1;
        adamw_update(ps, st, 0.0, o); // lr = 0: only decay acts
        CHECK(p.w[0] == Approx(3.6).epsilon(1e-15));
    }
    SECTION("first step moves by about -lr * sign(g)") {
        Param p({1});
        p.w[0] = 0.0;
        p.g[0] = 0.37; // constant gradient
        ParamSet ps;
        ps.add("p", p);
        OptimizerState st;
        st.init(ps);
        o.weight_decay = 0.0;
        adamw_update(ps, st, 1e-2, o);
        // bias-corrected mhat = g, vhat = g^2: step = -lr * g / (|g| + eps)
        CHECK(p.w[0] == Approx(-1e-2).epsilon(1e-6));
    }
    SECTION("non-finite gradients are reported with the parameter name") {
        Param p({1});
        p.g[0] = std::nan("");
        ParamSet ps;
        ps.add("dec.pixel_head.w", p);
        OptimizerState st;
        st.init(ps);
        CHECK_THROWS_WITH(adamw_update(ps, st, 1e-3, o), Catch::Contains("dec.pixel_head.w"));
    }
}

TEST_CASE("zero-gradient trajectories are independent of the learning rate") {
    OptimConfig o;
    o.weight_decay = 0.07;
    auto run = [&](double lr) {
        Param p({4});
        for (int64_t i = 0; i < 4; ++i) {
            p.w[i] = 1.0 + i;
        }
        ParamSet ps;
        ps.add("p", p);
        OptimizerState st;
        st.init(ps);
        for (int step = 0; step < 10; ++step) {
            ps.zero_grads();
            adamw_update(ps, st, lr, o);
        }
        return p.w;
    };
    const Tensor a = run(0.0);
    const Tensor b = run(1e-3);
    CHECK(std::memcmp(a.data(), b.data(), 4 * sizeof(real)) == 0);
}

TEST_CASE("gradient clipping") {
    Param p({2});
    ParamSet ps;
    ps.add("p", p);

    p.g[0] = 0.3;
    p.g[1] = 0.4; // norm 0.5
    const Tensor before = p.g;
    CHECK(clip_gradients(ps, 1.0) == Approx(0.5));
    CHECK(std::memcmp(p.g.data(), before.data(), 2 * sizeof(real)) == 0);

    p.g[0] = 1.2;
    p.g[1] = 1.6; // norm 2.0
    CHECK(clip_gradients(ps, 1.0) == Approx(2.0));
    CHECK(ps.grad_norm() == Approx(1.0).epsilon(1e-12));
    // direction preserved
    CHECK(p.g[0] / p.g[1] == Approx(1.2 / 1.6).epsilon(1e-12));
}

TEST_CASE("training runs are bit-identical under the same seed") {
    TempDir dir_a("tmp_train_a"), dir_b("tmp_train_b");
    RunConfig cfg_a = quick_config(dir_a.path, 6);
    RunConfig cfg_b = quick_config(dir_b.path, 6);
    const TrainResult a = train(cfg_a);
    const TrainResult b = train(cfg_b);
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (size_t i = 0; i < a.metrics.size(); ++i) {
        CHECK(a.metrics[i].step == b.metrics[i].step);
        CHECK(a.metrics[i].lr == b.metrics[i].lr);
        CHECK(a.metrics[i].pixel_loss == b.metrics[i].pixel_loss);
        CHECK(a.metrics[i].text_loss == b.metrics[i].text_loss);
        CHECK(a.metrics[i].total == b.metrics[i].total);
    }
}

TEST_CASE("training is bit-identical across thread counts") {
    TempDir dir_a("tmp_train_t1"), dir_b("tmp_train_t2");
    RunConfig cfg_a = quick_config(dir_a.path, 4);
    cfg_a.data.batch_size = 4;
    RunConfig cfg_b = cfg_a;
    cfg_b.checkpoint_dir = dir_b.path;
    TrainOptions one;
    one.threads = 1;
    TrainOptions two;
    two.threads = 2;
    const TrainResult a = train(cfg_a, one);
    const TrainResult b = train(cfg_b, two);
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (size_t i = 0; i < a.metrics.size(); ++i) {
        CHECK(a.metrics[i].total == b.metrics[i].total);
    }
    const CheckpointData ca = load_checkpoint(a.checkpoint_path);
    const CheckpointData cb = load_checkpoint(b.checkpoint_path);
    REQUIRE(ca.arrays.size() == cb.arrays.size());
    for (size_t i = 0; i < ca.arrays.size(); ++i) {
        CHECK(ca.arrays[i].second == cb.arrays[i].second);
    }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    TempDir dir("tmp_ckpt_rt");
    RunConfig cfg = quick_config(dir.path, 4);
    TrainState state;
    state.init(cfg, detail::max_decoder_positions(cfg));
    const std::string path = dir.path + "/ckpt.bin";
    std::filesystem::create_directories(dir.path);
    save_checkpoint(state.to_checkpoint(123, 4), path);

    const CheckpointData data = load_checkpoint(path);
    CHECK(data.config_hash == 123);
    CHECK(data.step == 4);
    for (const auto& e : state.params.entries()) {
        const Tensor* w = data.find("param/" + e.name);
        REQUIRE(w != nullptr);
        CHECK(*w == e.param->w);
    }
}

TEST_CASE("corrupt and mismatched checkpoints are rejected") {
    TempDir dir("tmp_ckpt_bad");
    std::filesystem::create_directories(dir.path);
    RunConfig cfg = quick_config(dir.path, 4);
    TrainState state;
    state.init(cfg, detail::max_decoder_positions(cfg));
    const std::string path = dir.path + "/ckpt.bin";
    save_checkpoint(state.to_checkpoint(1, 1), path);

    SECTION("flipped byte fails the checksum") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(64);
        char c;
        f.seekg(64);
        f.get(c);
        f.seekp(64);
        f.put(static_cast<char>(c ^ 0x40));
        f.close();
        CHECK_THROWS_WITH(load_checkpoint(path), Catch::Contains("checksum"));
    }
    SECTION("schema version mismatch is rejected") {
        // version lives right after the 8-byte magic; rewriting it also
        // requires updating the trailing CRC, so patch both
        std::ifstream in(path, std::ios::binary);
        std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        uint32_t bad_version = 9;
        std::memcpy(buf.data() + 8, &bad_version, 4);
        const uint32_t crc = crc32(buf.data(), buf.size() - 4);
        std::memcpy(buf.data() + buf.size() - 4, &crc, 4);
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        out.close();
        CHECK_THROWS_WITH(load_checkpoint(path), Catch::Contains("version"));
    }
    SECTION("truncated file is rejected") {
        std::filesystem::resize_file(path, 40);
        CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
    }
}

TEST_CASE("resuming mid-run reproduces the uninterrupted run bit-exactly") {
    TempDir dir_full("tmp_resume_full"), dir_ab("tmp_resume_ab");

    RunConfig cfg_full = quick_config(dir_full.path, 10);
    const TrainResult full = train(cfg_full);

    RunConfig cfg_ab = quick_config(dir_ab.path, 10);
    TrainOptions first_half;
    first_half.stop_after_step = 5;
    const TrainResult half = train(cfg_ab, first_half);
    TrainOptions second_half;
    second_half.resume_path = half.checkpoint_path;
    const TrainResult resumed = train(cfg_ab, second_half);
    CHECK(resumed.warning.empty()); // same config, same hash

    const CheckpointData a = load_checkpoint(full.checkpoint_path);
    const CheckpointData b = load_checkpoint(resumed.checkpoint_path);
    REQUIRE(a.arrays.size() == b.arrays.size());
    for (size_t i = 0; i < a.arrays.size(); ++i) {
        INFO(a.arrays[i].first);
        CHECK(a.arrays[i].first == b.arrays[i].first);
        CHECK(a.arrays[i].second == b.arrays[i].second);
    }
}

TEST_CASE("a half-cosine checkpoint branches into a linear cooldown ending at 1e-6") {
    TempDir dir("tmp_cooldown");
    RunConfig base = quick_config(dir.path, 10);
    base.optim.schedule_kind = ScheduleKind::half_cosine;
    const TrainResult first = train(base);

    RunConfig branch = base;
    branch.optim.schedule_kind = ScheduleKind::half_cosine_cooldown;
    TrainOptions opts;
    opts.resume_path = first.checkpoint_path;
    const TrainResult cooled = train(branch, opts);
    CHECK_FALSE(cooled.warning.empty()); // schedule change flips the config hash
    CHECK(cooled.steps_run == cooldown_steps(branch.optim));
    REQUIRE_FALSE(cooled.metrics.empty());
    CHECK(cooled.metrics.back().lr == 1e-6);
}

TEST_CASE("high-res adaptation forces zero weight decay and a larger canvas") {
    TempDir dir("tmp_highres");
    RunConfig cfg = quick_config(dir.path, 4);
    cfg.data.image_size = 8;
    TrainOptions opts;
    opts.high_res_adapt = true;
    const TrainResult result = train(cfg, opts);
    CHECK(result.steps_run == 4);
    // the run's config hash reflects the forced values
    RunConfig forced = cfg;
    forced.optim.weight_decay = 0.0;
    forced.data.image_size = 16;
    CHECK(result.config_hash == config_hash(forced));
}

TEST_CASE("a non-finite loss aborts with a reference to the last good checkpoint") {
    TempDir dir("tmp_nan_abort");
    RunConfig cfg = quick_config(dir.path, 10);

    // poison a checkpoint with a NaN parameter and resume from it
    TrainOptions first;
    first.stop_after_step = 5;
    const TrainResult half = train(cfg, first);
    CheckpointData data = load_checkpoint(half.checkpoint_path);
    for (auto& [name, tensor] : data.arrays) {
        if (name == "param/enc.patch_embed.w") {
            tensor[0] = std::nan("");
        }
    }
    const std::string poisoned = dir.path + "/poisoned.bin";
    save_checkpoint(data, poisoned);

    TrainOptions resume;
    resume.resume_path = poisoned;
    try {
        train(cfg, resume);
        FAIL("expected TrainingAborted");
    } catch (const TrainingAborted& e) {
        CHECK(std::string(e.what()).find("non-finite loss") != std::string::npos);
    }
}

TEST_CASE("high-res adaptation resumes from a base-resolution checkpoint") {
    TempDir dir("tmp_highres_resume");
    RunConfig cfg = quick_config(dir.path, 6);
    cfg.data.image_size = 8;

    TrainOptions base_opts;
    base_opts.stop_after_step = 3;
    const TrainResult base = train(cfg, base_opts);

    TrainOptions adapt;
    adapt.high_res_adapt = true;
    adapt.resume_path = base.checkpoint_path;
    const TrainResult adapted = train(cfg, adapt);
    CHECK(adapted.steps_run == 3);
    CHECK(std::isfinite(adapted.final_report.total));
}

TEST_CASE("native-resolution training keeps the patch budget exact") {
    TempDir dir("tmp_native");
    RunConfig cfg = quick_config(dir.path, 3);
    cfg.data.native_res = true;
    cfg.data.token_budget = 32;
    cfg.data.area_n_lo = 2;
    cfg.data.area_n_hi = 4;
    cfg.data.image_size = 12; // generator canvas; fitted per plan
    validate_config(cfg);
    const TrainResult result = train(cfg);
    CHECK(result.steps_run == 3);
    CHECK(std::isfinite(result.final_report.total));
}

TEST_CASE("alpha=0 and alpha=0.4 runs differ in the pixel head but both learn text") {
    TempDir dir_a("tmp_alpha0"), dir_b("tmp_alpha04");
    RunConfig cap_only = quick_config(dir_a.path, 30);
    cap_only.model.alpha = 0.0;
    cap_only.data.batch_size = 8;
    cap_only.log_every = 1;
    RunConfig with_pixels = cap_only;
    with_pixels.model.alpha = 0.4;
    with_pixels.checkpoint_dir = dir_b.path;

    const TrainResult a = train(cap_only);
    const TrainResult b = train(with_pixels);

    const CheckpointData ca = load_checkpoint(a.checkpoint_path);
    const CheckpointData cb = load_checkpoint(b.checkpoint_path);
    const Tensor* head_a = ca.find("param/dec.pixel_head.w");
    const Tensor* head_b = cb.find("param/dec.pixel_head.w");
    REQUIRE(head_a != nullptr);
    REQUIRE(head_b != nullptr);
    CHECK_FALSE(*head_a == *head_b);

    // both objectives reduce the caption loss
    CHECK(a.metrics.back().text_loss < a.metrics.front().text_loss);
    CHECK(b.metrics.back().text_loss < b.metrics.front().text_loss);
}

TEST_CASE("AIMV2_KIT_THREADS caps the worker budget") {
    setenv("AIMV2_KIT_THREADS", "3", 1);
    CHECK(thread_budget() == 3);
    setenv("AIMV2_KIT_THREADS", "bogus", 1);
    CHECK(thread_budget() >= 1); // falls back to hardware concurrency
    unsetenv("AIMV2_KIT_THREADS");
    CHECK(thread_budget() >= 1);
}

TEST_CASE("desk_small preset trains end to end") {
    TempDir dir("tmp_desk_small");
    RunConfig cfg;
    cfg.model = preset_model("desk_small");
    cfg.optim = preset_optim("desk_small");
    cfg.optim.total_steps = 3;
    cfg.optim.warmup_steps = 1;
    cfg.data.image_size = 16;
    cfg.data.batch_size = 2;
    cfg.data.dataset_size = 8;
    cfg.seed = 3;
    cfg.checkpoint_dir = dir.path;
    cfg.log_every = 1;
    validate_config(cfg);
    const TrainResult result = train(cfg);
    CHECK(result.steps_run == 3);
    CHECK(std::isfinite(result.final_report.total));
}

TEST_CASE("metrics log lines follow the documented format") {
    TempDir dir("tmp_metrics");
    RunConfig cfg = quick_config(dir.path, 4);
    const TrainResult result = train(cfg);
    std::ifstream in(result.metrics_path);
    std::string line;
    int64_t lines = 0;
    while (std::getline(in, line)) {
        ++lines;
        // step<TAB>lr<TAB>pixel<TAB>text<TAB>total
        int64_t tabs = 0;
        for (char c : line) {
            tabs += (c == '\t') ? 1 : 0;
        }
        CHECK(tabs == 4);
    }
    CHECK(lines == static_cast<int64_t>(result.metrics.size()));
}
