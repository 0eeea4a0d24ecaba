#include "protolab/blocks.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <unordered_map>

namespace protolab {

Tensor init_params(Shape shape, int fan_in, Rng& rng) {
    if (fan_in <= 0) throw std::invalid_argument("init_params: fan_in must be positive");
    const float std_dev = std::sqrt(2.0f / static_cast<float>(fan_in));
    std::vector<float> values(static_cast<std::size_t>(shape_numel(shape)));
    for (float& v : values) v = static_cast<float>(rng.normal()) * std_dev;
    return Tensor(std::move(shape), std::move(values), true);
}

Conv2d::Conv2d(int cin, int cout, int kh, int kw, Conv2dSpec s, bool with_bias, Rng& rng)
    : spec(s) {
    weight = init_params({cout, cin, kh, kw}, cin * kh * kw, rng);
    if (with_bias) bias = Tensor::zeros({cout}, true);
}

Tensor Conv2d::forward(const Tensor& x) const {
    return conv2d(x, weight, bias.defined() ? &bias : nullptr, spec);
}

void Conv2d::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                     std::vector<NamedBuffer>&) {
    params.push_back({prefix + ".weight", weight});
    if (bias.defined()) params.push_back({prefix + ".bias", bias});
}

BatchNorm2d::BatchNorm2d(int channels)
    : gamma(Tensor::ones({channels}, true)),
      beta(Tensor::zeros({channels}, true)),
      state(channels) {}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
    return batch_norm2d(x, gamma, beta, state, mode);
}

void BatchNorm2d::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                          std::vector<NamedBuffer>& buffers) {
    params.push_back({prefix + ".gamma", gamma});
    params.push_back({prefix + ".beta", beta});
    buffers.push_back({prefix + ".running_mean", &state.running_mean});
    buffers.push_back({prefix + ".running_var", &state.running_var});
}

ConvBnRelu::ConvBnRelu(int cin, int cout, int k, int stride, Rng& rng, int dilation) {
    Conv2dSpec spec;
    spec.stride = {stride, stride};
    const int pad = dilation * (k - 1) / 2;
    spec.padding = {pad, pad};
    spec.dilation = {dilation, dilation};
    conv = Conv2d(cin, cout, k, k, spec, /*with_bias=*/false, rng);
    bn = BatchNorm2d(cout);
}

Tensor ConvBnRelu::forward(const Tensor& x, Mode mode) {
    return activation(bn.forward(conv.forward(x), mode), Activation::Relu);
}

void ConvBnRelu::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                         std::vector<NamedBuffer>& buffers) {
    conv.collect(prefix + ".conv", params, buffers);
    bn.collect(prefix + ".bn", params, buffers);
}

FactorizedConv::FactorizedConv(int cin, int cout, int k, Rng& rng) {
    if (k % 2 == 0) throw std::invalid_argument("FactorizedConv: kernel size must be odd, got " + std::to_string(k));
    Conv2dSpec v;
    v.padding = {k / 2, 0};
    vertical = Conv2d(cin, cout, k, 1, v, /*with_bias=*/false, rng);
    Conv2dSpec h;
    h.padding = {0, k / 2};
    horizontal = Conv2d(cout, cout, 1, k, h, /*with_bias=*/true, rng);
}

Tensor FactorizedConv::forward(const Tensor& x) const {
    return horizontal.forward(vertical.forward(x));
}

void FactorizedConv::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                             std::vector<NamedBuffer>& buffers) {
    vertical.collect(prefix + ".v", params, buffers);
    horizontal.collect(prefix + ".h", params, buffers);
}

ResidualBlock::ResidualBlock(int cin, int cout, Rng& rng)
    : stage1(cin, cout, 3, 1, rng), stage2(cout, cout, 3, 1, rng) {
    if (cin != cout) {
        has_projection = true;
        projection = Conv2d(cin, cout, 1, 1, Conv2dSpec{}, /*with_bias=*/false, rng);
    }
}

Tensor ResidualBlock::forward(const Tensor& x, Mode mode) {
    Tensor main = stage2.forward(stage1.forward(x, mode), mode);
    Tensor skip = has_projection ? projection.forward(x) : x;
    return elementwise(main, skip, Binary::Add);
}

void ResidualBlock::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                            std::vector<NamedBuffer>& buffers) {
    stage1.collect(prefix + ".s1", params, buffers);
    stage2.collect(prefix + ".s2", params, buffers);
    if (has_projection) projection.collect(prefix + ".proj", params, buffers);
}

std::int64_t param_count(const std::vector<NamedTensor>& params) {
    std::int64_t n = 0;
    for (const NamedTensor& p : params) n += p.tensor.numel();
    return n;
}

void save_params(const std::string& path, const std::vector<NamedTensor>& params,
                 const std::vector<NamedBuffer>& buffers) {
    nlohmann::json header = nlohmann::json::array();
    std::int64_t offset = 0;
    for (const NamedTensor& p : params) {
        header.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
        offset += p.tensor.numel();
    }
    for (const NamedBuffer& b : buffers) {
        header.push_back({{"name", b.name},
                          {"shape", Shape{static_cast<int>(b.data->size())}},
                          {"offset", offset}});
        offset += static_cast<std::int64_t>(b.data->size());
    }
    const std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_params: cannot open " + path);
    const std::uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const NamedTensor& p : params)
        out.write(reinterpret_cast<const char*>(p.tensor.data()),
                  static_cast<std::streamsize>(p.tensor.numel() * sizeof(float)));
    for (const NamedBuffer& b : buffers)
        out.write(reinterpret_cast<const char*>(b.data->data()),
                  static_cast<std::streamsize>(b.data->size() * sizeof(float)));
    if (!out) throw std::runtime_error("save_params: write failed for " + path);
}

void load_params(const std::string& path, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_params: cannot open " + path);
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw std::runtime_error("load_params: truncated header in " + path);
    nlohmann::json header = nlohmann::json::parse(hs);

    struct Entry {
        Shape shape;
        std::int64_t offset;
    };
    std::unordered_map<std::string, Entry> index;
    for (const auto& e : header)
        index[e.at("name").get<std::string>()] = {e.at("shape").get<Shape>(),
                                                  e.at("offset").get<std::int64_t>()};
    const std::streampos data_start = in.tellg();
    auto read_at = [&](const std::string& name, const Shape& want, float* dst, std::int64_t n) {
        auto it = index.find(name);
        if (it == index.end())
            throw std::runtime_error("load_params: missing parameter '" + name + "' in " + path);
        if (it->second.shape != want)
            throw std::runtime_error("load_params: shape mismatch for '" + name + "': file has " +
                                     shape_str(it->second.shape) + ", model expects " + shape_str(want));
        in.seekg(data_start + static_cast<std::streamoff>(it->second.offset * static_cast<std::int64_t>(sizeof(float))));
        in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n * sizeof(float)));
        if (!in) throw std::runtime_error("load_params: truncated data for '" + name + "'");
    };
    for (NamedTensor& p : params)
        read_at(p.name, p.tensor.shape(), p.tensor.data(), p.tensor.numel());
    for (NamedBuffer& b : buffers)
        read_at(b.name, Shape{static_cast<int>(b.data->size())}, b.data->data(),
                static_cast<std::int64_t>(b.data->size()));
}

}  // namespace protolab
