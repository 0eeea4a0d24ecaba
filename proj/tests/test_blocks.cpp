#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>

#include "protolab/blocks.hpp"
#include "test_util.hpp"

using namespace protolab;
using testutil::rand_tensor;

TEST_CASE("init_params statistics and determinism") {
    Rng a(7), b(7), c(8);
    Tensor wa = init_params({64, 16, 3, 3}, 16 * 9, a);
    Tensor wb = init_params({64, 16, 3, 3}, 16 * 9, b);
    Tensor wc = init_params({64, 16, 3, 3}, 16 * 9, c);
    CHECK(std::memcmp(wa.data(), wb.data(), sizeof(float) * static_cast<std::size_t>(wa.numel())) == 0);
    CHECK(testutil::max_abs_diff(wa, wc) > 0.0);
    CHECK(wa.requires_grad());

    double mean = 0.0, var = 0.0;
    for (std::int64_t i = 0; i < wa.numel(); ++i) mean += wa.data()[i];
    mean /= static_cast<double>(wa.numel());
    for (std::int64_t i = 0; i < wa.numel(); ++i) {
        const double d = wa.data()[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(wa.numel());
    const double want_std = std::sqrt(2.0 / (16 * 9));
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::sqrt(var) == doctest::Approx(want_std).epsilon(0.05));

    CHECK_THROWS(init_params({4}, 0, a));
}

TEST_CASE("Conv2d module and parameter counting") {
    Rng rng(9);
    Conv2d conv(3, 4, 3, 3, Conv2dSpec{{1, 1}, {1, 1}, {1, 1}}, /*with_bias=*/true, rng);
    std::vector<NamedTensor> params;
    std::vector<NamedBuffer> buffers;
    conv.collect("conv", params, buffers);
    REQUIRE(params.size() == 2);
    CHECK(params[0].name == "conv.weight");
    CHECK(param_count(params) == 4 * 3 * 9 + 4);
    CHECK(buffers.empty());

    Tensor x = rand_tensor({1, 3, 8, 8}, rng);
    Tensor y = conv.forward(x);
    CHECK(y.shape() == Shape{1, 4, 8, 8});
    // bias starts at zero
    for (int i = 0; i < 4; ++i) CHECK(conv.bias.data()[i] == 0.0f);
}

TEST_CASE("ConvBnRelu keeps spatial size and is non-negative") {
    Rng rng(10);
    for (int k : {1, 3, 7})
        for (int dil : {1, 2, 4}) {
            ConvBnRelu blk(4, 6, k, 1, rng, dil);
            Tensor x = rand_tensor({2, 4, 16, 16}, rng);
            Tensor y = blk.forward(x, Mode::Train);
            REQUIRE(y.shape() == Shape{2, 6, 16, 16});
            for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] >= 0.0f);
        }
    ConvBnRelu strided(4, 6, 3, 2, rng);
    Tensor x = rand_tensor({1, 4, 16, 16}, rng);
    CHECK(strided.forward(x, Mode::Train).shape() == Shape{1, 6, 8, 8});
}

TEST_CASE("FactorizedConv is rank-1 equivalent to a full kernel") {
    Rng rng(11);
    for (int k : {3, 7, 13}) {
        const int cin = 3, cout = 4, mid = cout;
        FactorizedConv fac(cin, cout, k, rng);
        // compose W[co,ci,y,x] = sum_m H[co,m,0,x] * V[m,ci,y,0]
        Tensor full({cout, cin, k, k});
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci)
                for (int y = 0; y < k; ++y)
                    for (int x = 0; x < k; ++x) {
                        double acc = 0.0;
                        for (int m = 0; m < mid; ++m)
                            acc += static_cast<double>(fac.horizontal.weight.at(co, m, 0, x)) *
                                   fac.vertical.weight.at(m, ci, y, 0);
                        full.at(co, ci, y, x) = static_cast<float>(acc);
                    }
        Conv2dSpec spec;
        spec.padding = {k / 2, k / 2};
        Tensor input = rand_tensor({2, cin, 16, 16}, rng);
        Tensor direct = conv2d(input, full, &fac.horizontal.bias, spec);
        Tensor factored = fac.forward(input);
        REQUIRE(direct.shape() == factored.shape());
        CHECK(testutil::max_abs_diff(direct, factored) < 1e-5);
    }
    CHECK_THROWS(FactorizedConv(3, 4, 8, rng));  // even kernels rejected
}

TEST_CASE("ResidualBlock") {
    Rng rng(12);
    SUBCASE("zeroed main path with matching channels is the identity") {
        ResidualBlock blk(5, 5, rng);
        CHECK_FALSE(blk.has_projection);
        // kill the second stage: zero conv weight and BN beta, so
        // main = relu(BN(0)) = relu(beta) = 0
        std::fill(blk.stage2.conv.weight.mutable_values().begin(),
                  blk.stage2.conv.weight.mutable_values().end(), 0.0f);
        Tensor x = rand_tensor({2, 5, 8, 8}, rng);
        Tensor y = blk.forward(x, Mode::Eval);
        CHECK(testutil::max_abs_diff(x, y) < 1e-6);
    }
    SUBCASE("channel change engages the projection") {
        ResidualBlock blk(67, 32, rng);
        CHECK(blk.has_projection);
        Tensor x = rand_tensor({1, 67, 8, 8}, rng);
        CHECK(blk.forward(x, Mode::Train).shape() == Shape{1, 32, 8, 8});
    }
    SUBCASE("gradient flows through both paths") {
        ResidualBlock blk(3, 3, rng);
        Tensor x = rand_tensor({1, 3, 6, 6}, rng);
        Tensor c = rand_tensor({1, 3, 6, 6}, rng, 0.5, 1.5);
        auto f = [&](const Tensor& t) {
            return testutil::fd_loss(blk.forward(t, Mode::Train), c, t, 5.0f);
        };
        CHECK(grad_check(f, x, 3e-3f) < 1e-3f);
    }
}

TEST_CASE("parameter serialization round-trips bit-exactly") {
    Rng rng(13);
    ConvBnRelu a(3, 5, 3, 1, rng);
    ConvBnRelu b(5, 2, 3, 2, rng);
    std::vector<NamedTensor> params;
    std::vector<NamedBuffer> buffers;
    a.collect("a", params, buffers);
    b.collect("b", params, buffers);
    // make running stats non-trivial
    Tensor x = rand_tensor({2, 3, 8, 8}, rng);
    b.forward(a.forward(x, Mode::Train), Mode::Train);

    const std::string path = (std::filesystem::temp_directory_path() / "protolab_params_test.bin").string();
    save_params(path, params, buffers);

    Rng rng2(99);
    ConvBnRelu a2(3, 5, 3, 1, rng2);
    ConvBnRelu b2(5, 2, 3, 2, rng2);
    std::vector<NamedTensor> params2;
    std::vector<NamedBuffer> buffers2;
    a2.collect("a", params2, buffers2);
    b2.collect("b", params2, buffers2);
    load_params(path, params2, buffers2);
    for (std::size_t i = 0; i < params.size(); ++i)
        CHECK(std::memcmp(params[i].tensor.data(), params2[i].tensor.data(),
                          sizeof(float) * static_cast<std::size_t>(params[i].tensor.numel())) == 0);
    for (std::size_t i = 0; i < buffers.size(); ++i)
        CHECK(*buffers[i].data == *buffers2[i].data);

    SUBCASE("shape mismatch is a named error") {
        Rng rng3(5);
        ConvBnRelu wrong(3, 6, 3, 1, rng3);  // different channel count
        std::vector<NamedTensor> p3;
        std::vector<NamedBuffer> b3;
        wrong.collect("a", p3, b3);
        bool threw = false;
        try {
            load_params(path, p3, b3);
        } catch (const std::runtime_error& e) {
            threw = true;
            CHECK(std::string(e.what()).find("a.") != std::string::npos);
        }
        CHECK(threw);
    }
    std::filesystem::remove(path);
}
