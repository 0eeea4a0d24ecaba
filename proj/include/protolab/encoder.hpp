#pragma once

#include <array>

#include "protolab/blocks.hpp"

namespace protolab {

/// The four multi-scale maps X1..X4; X_i has spatial size H/2^{i+1} x W/2^{i+1}.
struct FeaturePyramid {
    Tensor x1, x2, x3, x4;
};

struct EncoderConfig {
    std::array<int, 4> channels{16, 32, 48, 64};
    int blocks_per_stage = 2;

    static EncoderConfig paper() { return {{64, 128, 320, 512}, 2}; }
};

/// Convolutional pyramid encoder with the same output contract as a
/// four-stage transformer backbone: strictly increasing channels, spatial
/// halving between levels, X1 at stride 4.
class Encoder {
public:
    Encoder() = default;
    Encoder(const EncoderConfig& cfg, Rng& rng);

    FeaturePyramid forward(const Tensor& image, Mode mode);
    void collect(const std::string& prefix, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers);

    const EncoderConfig& config() const { return cfg_; }

private:
    struct Stage {
        ConvBnRelu lead;
        std::vector<ResidualBlock> blocks;
    };

    EncoderConfig cfg_;
    ConvBnRelu stem1_, stem2_;
    std::array<Stage, 4> stages_;
};

}  // namespace protolab
