#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "protolab/training.hpp"
#include "test_util.hpp"

using namespace protolab;
using testutil::rand_tensor;

namespace {

ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.encoder.channels = {4, 6, 8, 10};
    cfg.encoder.blocks_per_stage = 1;
    cfg.proto_dim = 8;
    cfg.cmgm_width = 8;
    return cfg;
}

std::filesystem::path fresh_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("BCE term is ln 2 for uniform-0.5 predictions on half-ones ground truth") {
    Tensor pred({1, 1, 4, 4}, std::vector<float>(16, 0.5f));
    std::vector<float> g(16, 0.0f);
    for (int i = 0; i < 8; ++i) g[static_cast<std::size_t>(i)] = 1.0f;
    Tensor gt({1, 1, 4, 4}, std::move(g));

    auto [bce, dice] = bce_dice_terms(pred, gt);
    CHECK(std::abs(bce - std::log(2.0)) < 1e-6);
    // sum_p = 8, sum_g = 8, sum_pg = 4, smooth 1: dice = 1 - 9/17 = 8/17
    CHECK(std::abs(dice - 8.0 / 17.0) < 1e-6);
    const double want = 0.5 * std::log(2.0) + 0.5 * (8.0 / 17.0);
    CHECK(std::abs(bce_dice_loss(pred, gt).item() - want) < 1e-6);
}

TEST_CASE("bce_dice_loss vanishes for a perfect prediction") {
    Rng rng(41);
    Tensor gt = testutil::rand_binary({1, 1, 8, 8}, rng);
    Tensor pred(gt.shape(), std::vector<float>(gt.values().begin(), gt.values().end()));
    CHECK(bce_dice_loss(pred, gt).item() < 1e-3f);

    auto [bce, dice] = bce_dice_terms(pred, gt);
    CHECK(std::abs(dice) < 1e-6);  // binary pred == gt: exact dice up to smooth slack
}

TEST_CASE("bce_dice_loss rejects bad inputs") {
    Tensor pred({1, 1, 2, 2}, std::vector<float>{0.5f, 0.5f, 0.5f, 0.5f});
    Tensor bad_gt({1, 1, 2, 2}, std::vector<float>{0.0f, 1.0f, 0.5f, 1.0f});
    CHECK_THROWS_AS(bce_dice_loss(pred, bad_gt), std::invalid_argument);
    Tensor gt3({1, 1, 1, 3}, std::vector<float>{0.0f, 1.0f, 0.0f});
    CHECK_THROWS_AS(bce_dice_loss(pred, gt3), ShapeError);
}

TEST_CASE("bce_dice_loss gradient matches finite differences") {
    Rng rng(42);
    Tensor pred = rand_tensor({1, 1, 4, 4}, rng, 0.1, 0.9);
    Tensor gt = testutil::rand_binary({1, 1, 4, 4}, rng);
    auto f = [&](const Tensor& t) { return bce_dice_loss(t, gt); };
    CHECK(grad_check(f, pred, 1e-2f) < 1e-3f);
}

TEST_CASE("downsample_mask area-averages then thresholds") {
    // Blocks with 2, 1, 0 and 4 foreground pixels out of 4.
    Tensor gt({1, 1, 4, 4}, std::vector<float>{1, 1, 1, 0,   //
                                               0, 0, 0, 0,   //
                                               0, 0, 1, 1,   //
                                               0, 0, 1, 1});
    Tensor out = downsample_mask(gt, 2);
    REQUIRE(out.shape() == Shape{1, 1, 2, 2});
    CHECK(out.data()[0] == 1.0f);  // 2/4 = 0.5 -> 1
    CHECK(out.data()[1] == 0.0f);  // 1/4 -> 0
    CHECK(out.data()[2] == 0.0f);
    CHECK(out.data()[3] == 1.0f);  // 4/4 -> 1

    CHECK_THROWS(downsample_mask(gt, 3));                                     // 4 % 3 != 0
    CHECK_THROWS(downsample_mask(Tensor({1, 4, 4}, std::vector<float>(16)), 2));  // not (N,1,H,W)
}

TEST_CASE("Adam t=1 matches the closed-form bias-corrected update") {
    const float lr = 0.01f;
    std::vector<float> w0{0.5f, -1.25f, 2.0f, 0.0f};
    std::vector<float> g0{0.3f, -0.7f, 0.0f, 1.5f};
    Tensor p({4}, std::vector<float>(w0), true);
    p.node()->ensure_grad();
    std::copy(g0.begin(), g0.end(), p.node()->grad.begin());

    Adam opt({{"p", p}}, lr);
    opt.step();
    CHECK(opt.step_count() == 1);
    for (int i = 0; i < 4; ++i) {
        // at t=1: mhat = g, vhat = g^2, update = -lr * g / (|g| + eps)
        const double g = g0[static_cast<std::size_t>(i)];
        const double want = w0[static_cast<std::size_t>(i)] - lr * g / (std::abs(g) + 1e-8);
        CHECK(std::abs(p.data()[i] - want) < 1e-7);
    }
    // zero gradient leaves the weight untouched
    CHECK(p.data()[2] == w0[2]);
}

TEST_CASE("Adam names the parameter with a missing gradient") {
    Tensor p({2}, std::vector<float>{1.0f, 2.0f}, true);
    Adam opt({{"encoder.stem.weight", p}}, 1e-3f);
    bool threw = false;
    try {
        opt.step();
    } catch (const std::runtime_error& e) {
        threw = true;
        CHECK(std::string(e.what()).find("encoder.stem.weight") != std::string::npos);
    }
    CHECK(threw);
}

TEST_CASE("Adam state round-trips through disk") {
    Tensor p({3}, std::vector<float>{1.0f, 2.0f, 3.0f}, true);
    p.node()->ensure_grad();
    std::fill(p.node()->grad.begin(), p.node()->grad.end(), 0.25f);
    Adam opt({{"p", p}}, 1e-3f);
    opt.step();
    opt.step();

    const std::string path = (std::filesystem::temp_directory_path() / "protolab_adam_test.opt").string();
    opt.save_state(path);
    Tensor q({3}, std::vector<float>{1.0f, 2.0f, 3.0f}, true);
    Adam opt2({{"p", q}}, 1e-3f);
    opt2.load_state(path);
    CHECK(opt2.step_count() == 2);
    std::filesystem::remove(path);
}

TEST_CASE("PlateauScheduler trace") {
    PlateauScheduler sched(2, 0.5f, 1e-4f, 1e-7f);
    float lr = 0.1f;
    // strictly improving: unchanged
    lr = sched.update(1.0f, lr);
    lr = sched.update(0.9f, lr);
    lr = sched.update(0.8f, lr);
    CHECK(lr == 0.1f);
    // flat for patience epochs: halved exactly once
    lr = sched.update(0.8f, lr);
    CHECK(lr == 0.1f);
    lr = sched.update(0.8f, lr);
    CHECK(lr == doctest::Approx(0.05f));
    // the bad-epoch counter resets after a reduction
    lr = sched.update(0.8f, lr);
    CHECK(lr == doctest::Approx(0.05f));

    // never drops below the floor
    PlateauScheduler tight(1, 0.5f, 1e-4f, 1e-7f);
    float tiny = 1.5e-7f;
    tiny = tight.update(1.0f, tiny);
    tiny = tight.update(1.0f, tiny);
    tiny = tight.update(1.0f, tiny);
    CHECK(tiny == 1e-7f);
}

TEST_CASE("EarlyStopper trace") {
    EarlyStopper stop(2, 1e-4f);
    CHECK_FALSE(stop.update(1.0f));
    CHECK(stop.improved_last());
    CHECK_FALSE(stop.update(0.5f));
    CHECK(stop.improved_last());
    CHECK_FALSE(stop.update(0.5f));  // bad epoch 1
    CHECK_FALSE(stop.improved_last());
    CHECK(stop.update(0.5f));  // bad epoch 2 == patience
}

TEST_CASE("augment identity and involution") {
    Rng rng(50);
    SynthConfig scfg;
    scfg.count = 1;
    scfg.size = 32;
    Sample s = synth_generate(scfg)[0];

    SUBCASE("all probabilities zero is the identity") {
        AugmentConfig acfg;
        acfg.p_rotate = acfg.p_hflip = acfg.p_vflip = acfg.p_dropout = 0.0;
        Tensor img = s.image.detach(), msk = s.mask.detach();
        augment(img, msk, acfg, rng);
        CHECK(testutil::max_abs_diff(img, s.image) == 0.0);
        CHECK(testutil::max_abs_diff(msk, s.mask) == 0.0);
    }
    SUBCASE("horizontal flip twice is the identity") {
        AugmentConfig acfg;
        acfg.p_rotate = acfg.p_vflip = acfg.p_dropout = 0.0;
        acfg.p_hflip = 1.0;
        Tensor img = s.image.detach(), msk = s.mask.detach();
        augment(img, msk, acfg, rng);
        CHECK(testutil::max_abs_diff(img, s.image) > 0.0);
        augment(img, msk, acfg, rng);
        CHECK(testutil::max_abs_diff(img, s.image) == 0.0);
        CHECK(testutil::max_abs_diff(msk, s.mask) == 0.0);
    }
}

TEST_CASE("augment keeps masks binary and image/mask geometry synchronized") {
    SynthConfig scfg;
    scfg.count = 4;
    scfg.size = 32;
    auto samples = synth_generate(scfg);
    AugmentConfig full;  // defaults: all transforms at p=0.5

    for (int trial = 0; trial < 100; ++trial) {
        Rng rng(1000 + static_cast<std::uint64_t>(trial));
        const Sample& s = samples[static_cast<std::size_t>(trial % 4)];
        Tensor img = s.image.detach(), msk = s.mask.detach();
        augment(img, msk, full, rng);
        for (std::int64_t i = 0; i < msk.numel(); ++i)
            CHECK((msk.data()[i] == 0.0f || msk.data()[i] == 1.0f));
    }

    // Geometry sync: feed a copy of the mask through the image path. Flips
    // move pixels identically; rotation resamples bilinearly for the image
    // and nearest for the mask, so compare after thresholding and allow
    // boundary-pixel disagreement only.
    const int hw = 32 * 32;
    for (int trial = 0; trial < 20; ++trial) {
        Rng rng(2000 + static_cast<std::uint64_t>(trial));
        const Sample& s = samples[static_cast<std::size_t>(trial % 4)];
        Tensor msk = s.mask.detach();
        std::vector<float> tripled(static_cast<std::size_t>(3) * hw);
        for (int c = 0; c < 3; ++c)
            std::copy_n(msk.data(), hw, tripled.begin() + static_cast<std::size_t>(c) * hw);
        Tensor mask_as_image({3, 32, 32}, std::move(tripled));
        AugmentConfig geo;
        geo.p_dropout = 0.0;  // dropout intentionally touches the image only
        augment(mask_as_image, msk, geo, rng);
        int disagree = 0;
        for (int i = 0; i < hw; ++i) {
            const float img_bin = mask_as_image.data()[i] >= 0.5f ? 1.0f : 0.0f;
            if (img_bin != msk.data()[i]) ++disagree;
        }
        CHECK(disagree < hw / 10);
    }
}

TEST_CASE("fit smoke: logs, checkpoints, resume, and determinism") {
    SynthConfig scfg;
    scfg.count = 8;
    scfg.size = 64;
    auto samples = synth_generate(scfg);
    std::vector<Sample> train(samples.begin(), samples.begin() + 6);
    std::vector<Sample> val(samples.begin() + 6, samples.end());

    TrainConfig tcfg;
    tcfg.lr = 1e-3f;
    tcfg.batch_size = 4;
    tcfg.max_epochs = 2;

    auto out1 = fresh_dir("protolab_fit_smoke1");
    PrototypeLab model(tiny_model_config(), 11);
    FitOptions opts;
    opts.out_dir = out1.string();
    FitResult r1 = fit(model, train, val, tcfg, opts);

    REQUIRE(r1.log.size() == 2);
    CHECK(r1.epochs_run == 2);
    for (const EpochLog& row : r1.log) {
        CHECK(std::isfinite(row.train_loss));
        CHECK(std::isfinite(row.val_loss));
        CHECK(row.val_dsc >= 0.0);
    }
    CHECK(std::filesystem::exists(out1 / "best.params"));
    CHECK(std::filesystem::exists(out1 / "best.json"));
    CHECK(std::filesystem::exists(out1 / "last.opt"));
    CHECK(std::filesystem::exists(out1 / "train_log.csv"));

    SUBCASE("training log format") {
        std::ifstream in(out1 / "train_log.csv");
        std::string line;
        REQUIRE(std::getline(in, line));
        CHECK(line == "epoch,train_loss,val_loss,val_dsc,lr");
        int rows = 0;
        while (std::getline(in, line))
            if (!line.empty()) ++rows;
        CHECK(rows == 2);
    }

    SUBCASE("resume continues the optimizer step counter") {
        // 6 samples / batch 4 -> 2 steps per epoch; 2 epochs -> 4 steps
        Adam probe(model.parameters(), tcfg.lr);
        probe.load_state((out1 / "last.opt").string());
        CHECK(probe.step_count() == 4);

        auto out2 = fresh_dir("protolab_fit_resume");
        TrainConfig one = tcfg;
        one.max_epochs = 1;
        FitOptions ropts;
        ropts.out_dir = out2.string();
        ropts.resume_from = (out1 / "last").string();
        fit(model, train, val, one, ropts);
        Adam probe2(model.parameters(), tcfg.lr);
        probe2.load_state((out2 / "last.opt").string());
        CHECK(probe2.step_count() == 6);
        std::filesystem::remove_all(out2);
    }

    SUBCASE("same seed and data give an identical log") {
        auto out3 = fresh_dir("protolab_fit_smoke2");
        PrototypeLab model2(tiny_model_config(), 11);
        FitOptions opts2;
        opts2.out_dir = out3.string();
        FitResult r2 = fit(model2, train, val, tcfg, opts2);
        REQUIRE(r2.log.size() == r1.log.size());
        for (std::size_t i = 0; i < r1.log.size(); ++i) {
            CHECK(r1.log[i].train_loss == r2.log[i].train_loss);
            CHECK(r1.log[i].val_loss == r2.log[i].val_loss);
            CHECK(r1.log[i].val_dsc == r2.log[i].val_dsc);
        }
        std::filesystem::remove_all(out3);
    }

    CHECK_THROWS(fit(model, {}, val, tcfg, opts));  // empty dataset
    std::filesystem::remove_all(out1);
}

TEST_CASE("loss decreases on a fixed batch") {
    SynthConfig scfg;
    scfg.count = 4;
    scfg.size = 64;
    auto samples = synth_generate(scfg);
    auto [images, gts] = make_batch(samples, {0, 1, 2, 3});

    PrototypeLab model(tiny_model_config(), 13);
    Adam opt(model.parameters(), 1e-3f);
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 15; ++step) {
        ForwardOutput out = model.forward(images, Mode::Train);
        Tensor loss = bce_dice_loss(out.final_mask, gts);
        if (step == 0) first = loss.item();
        last = loss.item();
        backward(loss);
        opt.step();
        opt.zero_grads();
    }
    CHECK(last < first);
}

TEST_CASE("TrainConfig validation and JSON round trip") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    TrainConfig bad = cfg;
    bad.plateau_factor = 1.0f;
    CHECK_THROWS(bad.validate());
    bad = cfg;
    bad.lr = 0.0f;
    CHECK_THROWS(bad.validate());

    cfg.batch_size = 7;
    cfg.augment = false;
    nlohmann::json j = cfg;
    TrainConfig back = j.get<TrainConfig>();
    CHECK(back.batch_size == 7);
    CHECK_FALSE(back.augment);
}
