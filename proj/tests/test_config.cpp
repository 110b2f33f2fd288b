#include <catch2/catch.hpp>

#include <cstdio>
#include <fstream>

#include "aimv2/config.hpp"

using namespace aimv2;

namespace {

std::string write_temp(const std::string& text) {
    static int counter = 0;
    const std::string path = "test_config_tmp" + std::to_string(counter++) + ".json";
    std::ofstream out(path);
    out << text;
    return path;
}

} // namespace

TEST_CASE("reference model presets are frozen constants") {
    const ModelConfig l = preset_model("aimv2_l");
    CHECK(l.d_enc == 1024);
    CHECK(l.L_enc == 24);
    CHECK(l.d_dec == 1024);
    CHECK(l.L_dec == 12);
    CHECK(l.patch_size == 14);

    CHECK(preset_model("aimv2_h").d_enc == 1536);
    CHECK(preset_model("aimv2_1b").d_enc == 2048);

    const ModelConfig b3 = preset_model("aimv2_3b");
    CHECK(b3.d_enc == 3072);
    CHECK(b3.L_enc == 24);
    // decoder capacity is shared across the family
    CHECK(b3.d_dec == 1024);
    CHECK(b3.L_dec == 12);

    CHECK_THROWS_AS(preset_model("aimv2_tiny"), ValidationError);
}

TEST_CASE("reference optimizer preset is a frozen constant") {
    const OptimConfig o = preset_optim("aimv2_l");
    CHECK(o.peak_lr == 1e-3);
    CHECK(o.min_lr == 1e-5);
    CHECK(o.weight_decay == 1e-4);
    CHECK(o.beta1 == 0.9);
    CHECK(o.beta2 == 0.95);
    CHECK(o.grad_clip == 1.0);
    CHECK(o.warmup_steps == 12500);
    CHECK(o.total_steps == 1500000);
    CHECK(o.schedule_kind == ScheduleKind::cosine);
    CHECK(preset_optim("aimv2_3b").peak_lr == 4e-4);
}

TEST_CASE("desk_tiny preset is divisible and grad-checkable") {
    const ModelConfig t = preset_model("desk_tiny");
    CHECK(t.d_enc == 32);
    CHECK(t.L_enc == 2);
    CHECK(t.d_dec == 32);
    CHECK(t.L_dec == 2);
    CHECK(t.patch_size == 4);
    CHECK(t.vocab_size == 259);
    CHECK(t.d_enc % t.heads_enc == 0);
    CHECK(t.d_enc % 4 == 0);
}

TEST_CASE("config file round-trips through serialization") {
    RunConfig cfg;
    cfg.model = preset_model("desk_small");
    cfg.data.image_size = 16;
    cfg.seed = 1234;
    cfg.optim.schedule_kind = ScheduleKind::half_cosine;
    cfg.data.sources = {{"a", 0.25, 1}, {"b", 0.75, 2}};
    validate_config(cfg);

    const std::string path = write_temp(serialize_config(cfg));
    const RunConfig replica = load_config(path);
    CHECK(replica == cfg);
    CHECK(config_hash(replica) == config_hash(cfg));
    std::remove(path.c_str());
}

TEST_CASE("load_config applies defaults and reads fields") {
    const std::string path = write_temp(R"({
        "schema_version": 1,
        "model": {"preset": "desk_tiny", "alpha": 0.4}
    })");
    const RunConfig cfg = load_config(path);
    CHECK(cfg.model.alpha == 0.4);
    CHECK(cfg.optim.min_lr == 1e-5); // default when omitted
    std::remove(path.c_str());
}

TEST_CASE("load_config rejects invariant violations with the field name") {
    const std::string path = write_temp(R"({
        "schema_version": 1,
        "model": {"preset": "desk_tiny", "alpha": -1}
    })");
    CHECK_THROWS_WITH(load_config(path), Catch::Contains("alpha must be >= 0"));
    std::remove(path.c_str());
}

TEST_CASE("load_config rejects unknown keys") {
    const std::string path = write_temp(R"({
        "schema_version": 1,
        "model": {"preset": "desk_tiny", "nonsense": 3}
    })");
    CHECK_THROWS_WITH(load_config(path), Catch::Contains("nonsense"));
    std::remove(path.c_str());
}

TEST_CASE("parse errors carry a line number") {
    const std::string path = write_temp("{\n  \"schema_version\": 1,\n  broken\n}");
    CHECK_THROWS_WITH(load_config(path), Catch::Contains("line"));
    std::remove(path.c_str());
}

TEST_CASE("validate_config aggregates all violations") {
    RunConfig cfg;
    cfg.model.d_enc = 30;
    cfg.model.heads_enc = 4;
    cfg.optim.warmup_steps = 300;
    cfg.optim.total_steps = 200;
    cfg.data.image_size = 8;
    cfg.model.patch_size = 4;
    const auto errs = config_violations(cfg);
    bool saw_heads = false, saw_warmup = false;
    for (const auto& e : errs) {
        if (e.find("d_enc not divisible by heads") != std::string::npos) {
            saw_heads = true;
        }
        if (e.find("warmup_steps") != std::string::npos) {
            saw_warmup = true;
        }
    }
    CHECK(saw_heads);
    CHECK(saw_warmup);
    CHECK_THROWS_AS(validate_config(cfg), ValidationError);
}

TEST_CASE("missing config file is a validation error naming the path") {
    CHECK_THROWS_WITH(load_config("does_not_exist.json"), Catch::Contains("does_not_exist.json"));
}
