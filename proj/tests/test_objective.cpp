#include <catch2/catch.hpp>

#include <cmath>
#include <cstring>

#include "aimv2/objective.hpp"

using namespace aimv2;

namespace {

ModelConfig microscopic_model() {
    ModelConfig cfg;
    cfg.d_enc = 8;
    cfg.L_enc = 1;
    cfg.d_dec = 8;
    cfg.L_dec = 1;
    cfg.heads_enc = 2;
    cfg.heads_dec = 2;
    cfg.patch_size = 2;
    cfg.channels = 1;
    cfg.vocab_size = 259;
    cfg.alpha = 0.4;
    return cfg;
}

Tensor random_image(Rng& rng, int64_t hw, int64_t c) {
    Tensor img({hw, hw, c});
    for (int64_t i = 0; i < img.numel(); ++i) {
        img[i] = rng.uniform01();
    }
    return img;
}

} // namespace

TEST_CASE("pixel loss arithmetic") {
    Tensor preds({2, 4}), targets({2, 4});
    std::vector<uint8_t> mask = {1, 1};
    SECTION("perfect predictions give zero") {
        CHECK(pixel_loss(preds, targets, mask) == 0.0);
    }
    SECTION("single active unit error gives 1/D") {
        mask = {1, 0};
        preds.at(0, 0) = 1.0;
        CHECK(pixel_loss(preds, targets, mask) == Approx(0.25)); // D = 4
    }
    SECTION("masked garbage changes nothing, bit for bit") {
        mask = {1, 0};
        preds.at(0, 1) = 0.3;
        const double base = pixel_loss(preds, targets, mask);
        preds.at(1, 2) = 1e9;
        CHECK(pixel_loss(preds, targets, mask) == base);
    }
    SECTION("zero active targets is an error") {
        mask = {0, 0};
        CHECK_THROWS_AS(pixel_loss(preds, targets, mask), std::invalid_argument);
    }
}

TEST_CASE("text loss arithmetic") {
    SECTION("uniform logits give ln V") {
        Tensor logits = Tensor::full({1, 10}, 1.7);
        CHECK(text_loss(logits, {3}, {1}) == Approx(std::log(10.0)).epsilon(1e-12));
    }
    SECTION("loss decreases monotonically with the correct-class margin") {
        double prev = 1e9;
        for (double margin : {5.0, 10.0}) {
            Tensor logits({1, 6});
            logits.at(0, 2) = margin;
            const double loss = text_loss(logits, {2}, {1});
            CHECK(loss < prev);
            prev = loss;
        }
        CHECK(prev < 0.01); // loss -> 0 as margin grows
    }
    SECTION("padding positions contribute nothing") {
        Rng rng(1);
        Tensor logits({3, 6});
        for (int64_t i = 0; i < logits.numel(); ++i) {
            logits[i] = rng.normal();
        }
        const std::vector<int32_t> targets = {1, 2, 3};
        const std::vector<uint8_t> mask = {1, 0, 1};
        const double base = text_loss(logits, targets, mask);
        for (int64_t v = 0; v < 6; ++v) {
            logits.at(1, v) = 1e6;
        }
        CHECK(text_loss(logits, targets, mask) == base);
    }
}

TEST_CASE("total loss combination") {
    CHECK(total_loss(0.5, 2.0, 0.4) == Approx(2.2));
    CHECK(total_loss(123.0, 2.0, 0.0) == 2.0); // captioning-only baseline
    const double x = 0.731;
    CHECK(total_loss(x, x, 1.0) == Approx(2 * x));
}

TEST_CASE("loss gradients vanish exactly at masked positions") {
    Rng rng(2);
    Tensor preds({3, 4}), targets({3, 4});
    for (int64_t i = 0; i < preds.numel(); ++i) {
        preds[i] = rng.normal();
        targets[i] = rng.normal();
    }
    const std::vector<uint8_t> pmask = {0, 1, 0};
    const Tensor dpix = pixel_loss_grad(preds, targets, pmask);
    for (int64_t j = 0; j < 4; ++j) {
        CHECK(dpix.at(0, j) == 0.0);
        CHECK(dpix.at(2, j) == 0.0);
    }

    Tensor logits({2, 5});
    for (int64_t i = 0; i < logits.numel(); ++i) {
        logits[i] = rng.normal();
    }
    const Tensor dtxt = text_loss_grad(logits, {1, 2}, {0, 1});
    for (int64_t j = 0; j < 5; ++j) {
        CHECK(dtxt.at(0, j) == 0.0);
    }
}

TEST_CASE("pretrain forward is deterministic for a fixed seed") {
    const ModelConfig cfg = microscopic_model();
    auto run = [&] {
        Rng rng(99);
        Rng init(1);
        EncoderParams enc;
        enc.init(cfg, init);
        DecoderParams dec;
        dec.init(cfg, 16, init);
        std::vector<Tensor> images = {random_image(rng, 4, 1), random_image(rng, 4, 1)};
        std::vector<std::vector<int32_t>> tokens = {{10, 20, 30}, {40, 50}};
        Rng mrng(7);
        return pretrain_forward(images, tokens, enc, dec, cfg.alpha, mrng, cfg.patch_size, 256,
                                257);
    };
    const LossReport a = run();
    const LossReport b = run();
    CHECK(std::memcmp(&a, &b, sizeof(LossReport)) == 0);
    CHECK(a.total == total_loss(a.pixel_loss, a.text_loss, cfg.alpha));
}

TEST_CASE("alpha zero decouples the pixel head") {
    const ModelConfig cfg = microscopic_model();
    Rng init(3);
    EncoderParams enc;
    enc.init(cfg, init);
    DecoderParams dec;
    dec.init(cfg, 16, init);
    Rng rng(5);
    const Tensor image = random_image(rng, 4, 1);
    const MultimodalBatch batch =
        build_batch({image}, {{10, 20, 30}}, cfg.patch_size, 2, 256, 257);

    ParamSet ps;
    enc.register_params(ps);
    dec.register_params(ps);
    ps.zero_grads();
    pretrain_forward_backward(batch, enc, dec, 0.0);
    for (int64_t i = 0; i < dec.pixel_head_w.g.numel(); ++i) {
        CHECK(dec.pixel_head_w.g[i] == 0.0);
    }
    for (int64_t i = 0; i < dec.pixel_head_b.g.numel(); ++i) {
        CHECK(dec.pixel_head_b.g[i] == 0.0);
    }
}

TEST_CASE("loss is linear in alpha") {
    const ModelConfig cfg = microscopic_model();
    Rng init(4);
    EncoderParams enc;
    enc.init(cfg, init);
    DecoderParams dec;
    dec.init(cfg, 16, init);
    Rng rng(6);
    const Tensor image = random_image(rng, 4, 1);
    const MultimodalBatch batch =
        build_batch({image}, {{10, 20, 30}}, cfg.patch_size, 2, 256, 257);

    const LossReport r0 = pretrain_loss(batch, enc, dec, 0.0);
    const LossReport r1 = pretrain_loss(batch, enc, dec, 1.0);
    // d total / d alpha = pixel_loss
    CHECK(r1.total - r0.total == Approx(r0.pixel_loss).epsilon(1e-12));
    CHECK(r0.pixel_loss == r1.pixel_loss);
    CHECK(r0.text_loss == r1.text_loss);
}

TEST_CASE("full-model gradients match finite differences at micro scale") {
    const ModelConfig cfg = microscopic_model();
    const GradCheckReport report = model_grad_check(cfg, 4, 2, 21);
    INFO("worst " << report.worst_param << " err " << report.max_rel_err);
    CHECK(report.pass());
}

TEST_CASE("loss is invariant to predictions at masked positions end to end") {
    // Garbage in the pixel head columns only shows up at masked rows when
    // the mask keeps them out of the loss.
    const ModelConfig cfg = microscopic_model();
    Rng init(8);
    EncoderParams enc;
    enc.init(cfg, init);
    DecoderParams dec;
    dec.init(cfg, 16, init);
    Rng rng(9);
    const Tensor image = random_image(rng, 4, 1);
    // I=4, M=3: only position 3 (0-based 2) is active
    const MultimodalBatch batch =
        build_batch({image}, {{10, 20}}, cfg.patch_size, 3, 256, 257);
    const LossReport base = pretrain_loss(batch, enc, dec, cfg.alpha);

    // pixel loss computed over active targets only
    int64_t active = 0;
    for (uint8_t m : batch.samples[0].targets.pixel_loss_mask) {
        active += m;
    }
    CHECK(active == 1);
    CHECK(base.active_pixel_targets == 1);
}
