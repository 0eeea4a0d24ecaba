#pragma once

#include <string>
#include <vector>

#include "protolab/ops.hpp"
#include "protolab/rng.hpp"
#include "protolab/tensor.hpp"

namespace protolab {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Non-trainable layer state (BN running statistics).
struct NamedBuffer {
    std::string name;
    std::vector<float>* data;
};

/// Kaiming-normal draw, std = sqrt(2/fan_in), requires_grad on.
Tensor init_params(Shape shape, int fan_in, Rng& rng);

struct Conv2d {
    Tensor weight;
    Tensor bias;  // undefined when bias-less
    Conv2dSpec spec;

    Conv2d() = default;
    Conv2d(int cin, int cout, int kh, int kw, Conv2dSpec spec, bool with_bias, Rng& rng);

    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers);
};

struct BatchNorm2d {
    Tensor gamma;
    Tensor beta;
    BatchNormState state;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels);

    Tensor forward(const Tensor& x, Mode mode);
    void collect(const std::string& prefix, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers);
};

/// conv -> BN -> ReLU; padding keeps spatial size at stride 1.
struct ConvBnRelu {
    Conv2d conv;
    BatchNorm2d bn;

    ConvBnRelu() = default;
    ConvBnRelu(int cin, int cout, int k, int stride, Rng& rng, int dilation = 1);

    Tensor forward(const Tensor& x, Mode mode);
    void collect(const std::string& prefix, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers);
};

/// {k x 1} then {1 x k}, no nonlinearity in between; receptive field k x k.
struct FactorizedConv {
    Conv2d vertical;
    Conv2d horizontal;

    FactorizedConv() = default;
    FactorizedConv(int cin, int cout, int k, Rng& rng);

    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers);
};

/// Two 3x3 ConvBnRelu stages plus a skip; 1x1 projection when channels differ.
struct ResidualBlock {
    ConvBnRelu stage1;
    ConvBnRelu stage2;
    Conv2d projection;
    bool has_projection = false;

    ResidualBlock() = default;
    ResidualBlock(int cin, int cout, Rng& rng);

    Tensor forward(const Tensor& x, Mode mode);
    void collect(const std::string& prefix, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers);
};

std::int64_t param_count(const std::vector<NamedTensor>& params);

/// Flat little-endian f32 blob preceded by a JSON header of (name, shape,
/// offset) entries. Round-trips bit-exactly.
void save_params(const std::string& path, const std::vector<NamedTensor>& params,
                 const std::vector<NamedBuffer>& buffers);
void load_params(const std::string& path, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers);

}  // namespace protolab
