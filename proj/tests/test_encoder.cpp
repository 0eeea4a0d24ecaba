#include <doctest.h>

#include "protolab/encoder.hpp"
#include "test_util.hpp"

using namespace protolab;
using testutil::rand_tensor;

TEST_CASE("pyramid shape contract") {
    Rng rng(101);
    const std::array<int, 4> desk{16, 32, 48, 64};
    for (int size : {64, 96, 128, 256}) {
        EncoderConfig cfg;
        cfg.channels = desk;
        Encoder enc(cfg, rng);
        Tensor x = rand_tensor({1, 3, size, size}, rng);
        FeaturePyramid pyr = enc.forward(x, Mode::Eval);
        CHECK(pyr.x1.shape() == Shape{1, desk[0], size / 4, size / 4});
        CHECK(pyr.x2.shape() == Shape{1, desk[1], size / 8, size / 8});
        CHECK(pyr.x3.shape() == Shape{1, desk[2], size / 16, size / 16});
        CHECK(pyr.x4.shape() == Shape{1, desk[3], size / 32, size / 32});
    }
}

TEST_CASE("paper-width channels at 256") {
    Rng rng(102);
    Encoder enc(EncoderConfig::paper(), rng);
    Tensor x = rand_tensor({1, 3, 256, 256}, rng);
    FeaturePyramid pyr = enc.forward(x, Mode::Eval);
    CHECK(pyr.x1.shape() == Shape{1, 64, 64, 64});
    CHECK(pyr.x2.shape() == Shape{1, 128, 32, 32});
    CHECK(pyr.x3.shape() == Shape{1, 320, 16, 16});
    CHECK(pyr.x4.shape() == Shape{1, 512, 8, 8});
}

TEST_CASE("batch dimension carries through") {
    Rng rng(103);
    EncoderConfig cfg;
    cfg.channels = {4, 8, 12, 16};
    Encoder enc(cfg, rng);
    for (int n : {1, 2, 3}) {
        Tensor x = rand_tensor({n, 3, 64, 64}, rng);
        FeaturePyramid pyr = enc.forward(x, Mode::Eval);
        CHECK(pyr.x1.dim(0) == n);
        CHECK(pyr.x4.dim(0) == n);
    }
}

TEST_CASE("invalid configuration and input rejected") {
    Rng rng(104);
    EncoderConfig bad;
    bad.channels = {16, 16, 48, 64};  // not strictly increasing
    CHECK_THROWS(Encoder(bad, rng));

    EncoderConfig cfg;
    cfg.channels = {4, 8, 12, 16};
    Encoder enc(cfg, rng);
    CHECK_THROWS_AS(enc.forward(rand_tensor({1, 3, 60, 60}, rng), Mode::Eval), ShapeError);
    CHECK_THROWS_AS(enc.forward(rand_tensor({1, 1, 64, 64}, rng), Mode::Eval), ShapeError);
}

TEST_CASE("width-4 encoder gradients") {
    Rng rng(105);
    EncoderConfig cfg;
    cfg.channels = {4, 5, 6, 7};
    cfg.blocks_per_stage = 1;
    Encoder enc(cfg, rng);
    // batch 2 so the 1x1 X4 plane still has >= 2 samples per BN channel
    Tensor x = rand_tensor({2, 3, 32, 32}, rng);
    Tensor c = rand_tensor({2, 7, 1, 1}, rng, 0.5, 1.5);
    auto f = [&](const Tensor& t) {
        FeaturePyramid pyr = enc.forward(t, Mode::Train);
        return testutil::fd_loss(pyr.x4, c, t, 5.0f);
    };
    CHECK(grad_check(f, x, 3e-3f) < 1e-3f);
}

TEST_CASE("deterministic construction and forward") {
    Rng a(7), b(7);
    EncoderConfig cfg;
    cfg.channels = {4, 8, 12, 16};
    Encoder e1(cfg, a), e2(cfg, b);
    Rng xa(1), xb(1);
    Tensor x1 = rand_tensor({1, 3, 64, 64}, xa);
    Tensor x2 = rand_tensor({1, 3, 64, 64}, xb);
    FeaturePyramid p1 = e1.forward(x1, Mode::Eval);
    FeaturePyramid p2 = e2.forward(x2, Mode::Eval);
    CHECK(testutil::max_abs_diff(p1.x1, p2.x1) == 0.0);
    CHECK(testutil::max_abs_diff(p1.x4, p2.x4) == 0.0);
}
