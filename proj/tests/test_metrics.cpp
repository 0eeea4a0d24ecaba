#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "protolab/metrics.hpp"
#include "test_util.hpp"

using namespace protolab;

TEST_CASE("confusion counts exactly") {
    Tensor pred({1, 2, 2}, std::vector<float>{1, 0, 1, 0});
    Tensor gt({1, 2, 2}, std::vector<float>{1, 1, 0, 0});
    ConfusionCounts c = confusion(pred, gt);
    CHECK(c.tp == 1);
    CHECK(c.fp == 1);
    CHECK(c.fn == 1);
    CHECK(c.tn == 1);

    Tensor ones({1, 2, 2}, std::vector<float>{1, 1, 1, 1});
    c = confusion(ones, ones);
    CHECK(c.tp == 4);
    CHECK(c.tn == 0);

    Tensor zeros({1, 2, 2}, std::vector<float>{0, 0, 0, 0});
    c = confusion(ones, zeros);  // complement
    CHECK(c.tp == 0);
    CHECK(c.tn == 0);
    CHECK(c.fp == 4);

    Tensor soft({1, 2, 2}, std::vector<float>{0.5f, 0, 1, 0});
    CHECK_THROWS(confusion(soft, gt));

    SUBCASE("random pairs match a per-pixel loop oracle") {
        for (int trial = 0; trial < 100; ++trial) {
            Rng rng(600 + static_cast<std::uint64_t>(trial));
            Tensor p = testutil::rand_binary({1, 8, 8}, rng, 0.4);
            Tensor g = testutil::rand_binary({1, 8, 8}, rng, 0.4);
            ConfusionCounts got = confusion(p, g);
            std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
            for (std::int64_t i = 0; i < p.numel(); ++i) {
                const bool pp = p.data()[i] == 1.0f, gg = g.data()[i] == 1.0f;
                tp += pp && gg;
                fp += pp && !gg;
                fn += !pp && gg;
                tn += !pp && !gg;
            }
            CHECK(got.tp == tp);
            CHECK(got.fp == fp);
            CHECK(got.fn == fn);
            CHECK(got.tn == tn);
            CHECK(got.tp + got.fp + got.fn + got.tn == 64);
        }
    }
}

TEST_CASE("overlap_metrics formulas and conventions") {
    // |pred| = |gt| = 4, overlap 2
    OverlapMetrics m = overlap_metrics({2, 2, 2, 8});
    CHECK(m.dsc == doctest::Approx(0.5));
    CHECK(m.iou == doctest::Approx(2.0 / 6.0));
    CHECK(m.precision == doctest::Approx(0.5));
    CHECK(m.recall == doctest::Approx(0.5));
    CHECK(m.f2 == doctest::Approx(0.5));  // precision == recall == r -> f2 == r

    OverlapMetrics perfect = overlap_metrics({10, 0, 0, 6});
    CHECK(perfect.dsc == 1.0);
    CHECK(perfect.iou == 1.0);
    CHECK(perfect.f2 == 1.0);

    OverlapMetrics both_empty = overlap_metrics({0, 0, 0, 16});
    CHECK(both_empty.dsc == 1.0);
    CHECK(both_empty.iou == 1.0);
    CHECK(both_empty.precision == 1.0);
    CHECK(both_empty.recall == 1.0);
    CHECK(both_empty.f2 == 1.0);

    OverlapMetrics miss = overlap_metrics({0, 3, 0, 13});  // predicted something, gt empty
    CHECK(miss.dsc == 0.0);
    CHECK(miss.f2 == 0.0);
    OverlapMetrics blind = overlap_metrics({0, 0, 3, 13});  // gt something, predicted nothing
    CHECK(blind.dsc == 0.0);
    CHECK(blind.recall == 0.0);
}

TEST_CASE("dsc equals 2*iou/(1+iou) on random pairs") {
    for (int trial = 0; trial < 200; ++trial) {
        Rng rng(700 + static_cast<std::uint64_t>(trial));
        Tensor p = testutil::rand_binary({1, 16, 16}, rng, rng.uniform(0.1, 0.9));
        Tensor g = testutil::rand_binary({1, 16, 16}, rng, rng.uniform(0.1, 0.9));
        OverlapMetrics m = overlap_metrics(confusion(p, g));
        CHECK(m.dsc == doctest::Approx(2.0 * m.iou / (1.0 + m.iou)).epsilon(1e-12));
        CHECK(m.dsc >= 0.0);
        CHECK(m.dsc <= 1.0);
        CHECK(m.f2 >= 0.0);
        CHECK(m.f2 <= 1.0);
    }
}

TEST_CASE("hausdorff hand cases") {
    Tensor a({1, 8, 8});
    Tensor b({1, 8, 8});
    SUBCASE("both empty -> 0") {
        HausdorffResult r = hausdorff(a, b);
        CHECK(r.hd == 0.0);
        CHECK(r.hd95 == 0.0);
    }
    SUBCASE("one empty -> image diagonal") {
        b.data()[3 * 8 + 3] = 1.0f;
        HausdorffResult r = hausdorff(a, b);
        CHECK(r.hd == doctest::Approx(std::hypot(7.0, 7.0)));
        CHECK(r.hd95 == r.hd);
    }
    SUBCASE("identical masks -> 0") {
        a.data()[2 * 8 + 2] = a.data()[2 * 8 + 3] = a.data()[3 * 8 + 2] = 1.0f;
        HausdorffResult r = hausdorff(a, a);
        CHECK(r.hd == 0.0);
        CHECK(r.hd95 == 0.0);
    }
    SUBCASE("single pixels at (0,0) and (3,4) -> 5") {
        a.data()[0] = 1.0f;
        b.data()[3 * 8 + 4] = 1.0f;
        HausdorffResult r = hausdorff(a, b);
        CHECK(r.hd == doctest::Approx(5.0));
        CHECK(r.hd95 == doctest::Approx(5.0));
    }
}

TEST_CASE("hausdorff equals the all-pairs brute-force oracle on 200 seeded pairs") {
    for (int trial = 0; trial < 200; ++trial) {
        Rng rng(800 + static_cast<std::uint64_t>(trial));
        Tensor p = testutil::rand_binary({1, 16, 16}, rng, rng.uniform(0.05, 0.6));
        Tensor g = testutil::rand_binary({1, 16, 16}, rng, rng.uniform(0.05, 0.6));
        HausdorffResult fast = hausdorff(p, g);
        HausdorffResult brute = testutil::brute_hausdorff(p, g);
        CHECK(fast.hd == brute.hd);
        CHECK(fast.hd95 == brute.hd95);
        CHECK(fast.hd >= fast.hd95);
        CHECK(fast.hd95 >= 0.0);
    }
}

TEST_CASE("metrics are equivariant under a simultaneous horizontal flip") {
    Rng rng(900);
    Tensor p = testutil::rand_binary({1, 16, 16}, rng, 0.3);
    Tensor g = testutil::rand_binary({1, 16, 16}, rng, 0.3);
    auto hflip = [](const Tensor& t) {
        Tensor out(t.shape());
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) out.data()[y * 16 + x] = t.data()[y * 16 + 15 - x];
        return out;
    };
    Tensor pf = hflip(p), gf = hflip(g);
    OverlapMetrics m1 = overlap_metrics(confusion(p, g));
    OverlapMetrics m2 = overlap_metrics(confusion(pf, gf));
    CHECK(m1.dsc == m2.dsc);
    CHECK(m1.f2 == m2.f2);
    HausdorffResult h1 = hausdorff(p, g);
    HausdorffResult h2 = hausdorff(pf, gf);
    CHECK(h1.hd == doctest::Approx(h2.hd));
    CHECK(h1.hd95 == doctest::Approx(h2.hd95));
}

TEST_CASE("evaluate produces per-image rows, hand-averaged means, and a CSV") {
    ModelConfig cfg;
    cfg.encoder.channels = {4, 6, 8, 10};
    cfg.encoder.blocks_per_stage = 1;
    cfg.proto_dim = 8;
    cfg.cmgm_width = 8;
    PrototypeLab model(cfg, 17);

    SynthConfig scfg;
    scfg.count = 3;
    scfg.size = 64;
    auto samples = synth_generate(scfg);
    EvalReport report = evaluate(model, samples);
    REQUIRE(report.rows.size() == 3);

    double dsc_sum = 0.0, hd_sum = 0.0;
    for (const EvalRow& row : report.rows) {
        dsc_sum += row.overlap.dsc;
        hd_sum += row.distance.hd;
        CHECK(row.overlap.dsc >= 0.0);
        CHECK(row.overlap.dsc <= 1.0);
    }
    CHECK(report.mean_overlap.dsc == doctest::Approx(dsc_sum / 3.0));
    CHECK(report.mean_distance.hd == doctest::Approx(hd_sum / 3.0));

    const std::string path =
        (std::filesystem::temp_directory_path() / "protolab_eval_report.csv").string();
    report.write_csv(path);
    std::ifstream in(path);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "id,dsc,iou,precision,recall,f2,hd,hd95");
    int rows = 0;
    std::string last;
    while (std::getline(in, line))
        if (!line.empty()) {
            ++rows;
            last = line;
        }
    CHECK(rows == 4);  // 3 images + MEAN
    CHECK(last.substr(0, 5) == "MEAN,");
    std::filesystem::remove(path);

    CHECK_THROWS(evaluate(model, {}));
}
