#include "protolab/encoder.hpp"

namespace protolab {

Encoder::Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    for (int i = 1; i < 4; ++i)
        if (cfg.channels[static_cast<std::size_t>(i)] <= cfg.channels[static_cast<std::size_t>(i - 1)])
            throw std::invalid_argument("Encoder: channel list must be strictly increasing");
    if (cfg.blocks_per_stage < 1)
        throw std::invalid_argument("Encoder: blocks_per_stage must be >= 1");

    const int c1 = cfg.channels[0];
    // Stem reaches stride 4, so stage 1 leads with a stride-1 conv and the
    // remaining stages halve the resolution.
    stem1_ = ConvBnRelu(3, c1, 3, 2, rng);
    stem2_ = ConvBnRelu(c1, c1, 3, 2, rng);
    int cin = c1;
    for (int i = 0; i < 4; ++i) {
        const int cout = cfg.channels[static_cast<std::size_t>(i)];
        stages_[static_cast<std::size_t>(i)].lead = ConvBnRelu(cin, cout, 3, i == 0 ? 1 : 2, rng);
        for (int b = 1; b < cfg.blocks_per_stage; ++b)
            stages_[static_cast<std::size_t>(i)].blocks.emplace_back(cout, cout, rng);
        cin = cout;
    }
}

FeaturePyramid Encoder::forward(const Tensor& image, Mode mode) {
    if (image.ndim() != 4 || image.dim(1) != 3)
        throw ShapeError("Encoder: expected (N,3,H,W) image, got " + shape_str(image.shape()));
    if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0)
        throw ShapeError("Encoder: input size " + shape_str(image.shape()) +
                         " must be divisible by 32");
    Tensor x = stem2_.forward(stem1_.forward(image, mode), mode);
    std::array<Tensor, 4> maps;
    for (std::size_t i = 0; i < 4; ++i) {
        x = stages_[i].lead.forward(x, mode);
        for (ResidualBlock& blk : stages_[i].blocks) x = blk.forward(x, mode);
        maps[i] = x;
    }
    return {maps[0], maps[1], maps[2], maps[3]};
}

void Encoder::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                      std::vector<NamedBuffer>& buffers) {
    stem1_.collect(prefix + ".stem1", params, buffers);
    stem2_.collect(prefix + ".stem2", params, buffers);
    for (std::size_t i = 0; i < 4; ++i) {
        const std::string sp = prefix + ".stage" + std::to_string(i + 1);
        stages_[i].lead.collect(sp + ".lead", params, buffers);
        for (std::size_t b = 0; b < stages_[i].blocks.size(); ++b)
            stages_[i].blocks[b].collect(sp + ".res" + std::to_string(b + 1), params, buffers);
    }
}

}  // namespace protolab
