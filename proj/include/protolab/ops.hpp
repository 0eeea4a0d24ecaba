#pragma once

#include <array>
#include <optional>

#include "protolab/tensor.hpp"

namespace protolab {

enum class Mode { Train, Eval };
enum class Activation { Relu, Sigmoid };
enum class Binary { Add, Mul };
enum class Reduction { Sum, Mean };

struct Conv2dSpec {
    std::array<int, 2> stride{1, 1};
    std::array<int, 2> padding{0, 0};
    std::array<int, 2> dilation{1, 1};
};

/// Cross-correlation (no kernel flip). x: (N,Cin,H,W), weight: (Cout,Cin,kh,kw).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias, const Conv2dSpec& spec);

inline int conv_out_extent(int in, int k, int stride, int pad, int dilation) {
    return (in + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
}

struct BatchNormState {
    std::vector<float> running_mean;
    std::vector<float> running_var;
    explicit BatchNormState(int channels = 0)
        : running_mean(static_cast<std::size_t>(channels), 0.0f),
          running_var(static_cast<std::size_t>(channels), 1.0f) {}
};

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, Mode mode,
                    float eps = 1e-5f, float momentum = 0.1f);

Tensor activation(const Tensor& x, Activation kind);

/// align-corners=false bilinear resize to an arbitrary target size.
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);
Tensor upsample_bilinear(const Tensor& x, int factor);

Tensor concat_channels(const std::vector<Tensor>& xs);

/// a op b; b may either match a's shape or broadcast with C=1.
Tensor elementwise(const Tensor& a, const Tensor& b, Binary kind);

/// Same-shape addition for tensors of any rank (scalars included).
Tensor add(const Tensor& a, const Tensor& b);

/// Reduce over `axes` (kept dims removed). Empty axis list is the identity.
Tensor reduce(const Tensor& x, std::vector<int> axes, Reduction kind);

/// Per-pixel cosine similarity between f: (N,D,H,W) and prototype p: (D).
/// Output (N,1,H,W) in [-1,1]; eps guards zero vectors.
Tensor cosine_similarity_map(const Tensor& f, const Tensor& p, float eps = 1e-8f);

/// Foreground-conditioned mean: the soft mask (any spatial size) is resized to
/// f's resolution, then per sample v_n[d] = sum(f*m)/(sum(m)+eps), and the
/// result is the mean of v_n over the batch, shape (D). With normalize=false
/// the masked product is plainly averaged over pixels instead.
Tensor masked_avg_pool(const Tensor& f, const Tensor& mask, float eps = 1e-6f,
                       bool normalize = true);

}  // namespace protolab
