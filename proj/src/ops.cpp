#include "protolab/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace protolab {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using MapRowConst = Eigen::Map<const RowMat>;

void require_4d(const Tensor& t, const char* what) {
    if (t.ndim() != 4) throw ShapeError(std::string(what) + ": expected 4-D tensor, got " + shape_str(t.shape()));
}

// Gathers one sample into a (Cin*kh*kw) x (OH*OW) patch matrix.
void im2col(const float* x, int C, int H, int W, int KH, int KW,
            const Conv2dSpec& s, int OH, int OW, Eigen::MatrixXf& col) {
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < KH; ++i) {
            for (int j = 0; j < KW; ++j) {
                const int r = (c * KH + i) * KW + j;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * s.stride[0] - s.padding[0] + i * s.dilation[0];
                    if (ih < 0 || ih >= H) {
                        for (int ow = 0; ow < OW; ++ow) col(r, oh * OW + ow) = 0.0f;
                        continue;
                    }
                    const float* row = x + (c * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * s.stride[1] - s.padding[1] + j * s.dilation[1];
                        col(r, oh * OW + ow) = (iw >= 0 && iw < W) ? row[iw] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_accum(const Eigen::MatrixXf& col, int C, int H, int W, int KH, int KW,
                  const Conv2dSpec& s, int OH, int OW, float* dx) {
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < KH; ++i) {
            for (int j = 0; j < KW; ++j) {
                const int r = (c * KH + i) * KW + j;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * s.stride[0] - s.padding[0] + i * s.dilation[0];
                    if (ih < 0 || ih >= H) continue;
                    float* row = dx + (c * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * s.stride[1] - s.padding[1] + j * s.dilation[1];
                        if (iw >= 0 && iw < W) row[iw] += col(r, oh * OW + ow);
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias, const Conv2dSpec& spec) {
    require_4d(x, "conv2d input");
    require_4d(weight, "conv2d weight");
    const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
    if (weight.dim(1) != Cin)
        throw ShapeError("conv2d: input channels " + shape_str(x.shape()) +
                         " do not match weight " + shape_str(weight.shape()));
    if (H + 2 * spec.padding[0] < spec.dilation[0] * (KH - 1) + 1 ||
        W + 2 * spec.padding[1] < spec.dilation[1] * (KW - 1) + 1)
        throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) +
                         " does not fit padded input " + shape_str(x.shape()));
    const int OH = conv_out_extent(H, KH, spec.stride[0], spec.padding[0], spec.dilation[0]);
    const int OW = conv_out_extent(W, KW, spec.stride[1], spec.padding[1], spec.dilation[1]);
    const int K = Cin * KH * KW;
    const int P = OH * OW;

    std::vector<float> out(static_cast<std::size_t>(N) * Cout * P);
    Eigen::MatrixXf col(K, P);
    MapRowConst Wm(weight.data(), Cout, K);
    for (int n = 0; n < N; ++n) {
        im2col(x.data() + static_cast<std::size_t>(n) * Cin * H * W, Cin, H, W, KH, KW, spec, OH, OW, col);
        MapRow Ym(out.data() + static_cast<std::size_t>(n) * Cout * P, Cout, P);
        Ym.noalias() = Wm * col;
        if (bias)
            for (int co = 0; co < Cout; ++co) Ym.row(co).array() += bias->data()[co];
    }

    std::vector<Tensor> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    Tensor xc = x, wc = weight;
    std::optional<Tensor> bc;
    if (bias) bc = *bias;
    Conv2dSpec sp = spec;
    return detail::make_op(
        {N, Cout, OH, OW}, std::move(out), std::move(inputs),
        [xc, wc, bc, sp, N, Cin, H, W, Cout, KH, KW, OH, OW, K, P](detail::Node& o) {
            Eigen::MatrixXf col(K, P);
            MapRowConst Wm(wc.data(), Cout, K);
            Eigen::MatrixXf dW = Eigen::MatrixXf::Zero(Cout, K);
            const bool need_dx = xc.requires_grad();
            const bool need_dw = wc.requires_grad();
            if (need_dx) xc.node()->ensure_grad();
            for (int n = 0; n < N; ++n) {
                MapRowConst Gn(o.grad.data() + static_cast<std::size_t>(n) * Cout * P, Cout, P);
                if (need_dw || need_dx)
                    im2col(xc.data() + static_cast<std::size_t>(n) * Cin * H * W,
                           Cin, H, W, KH, KW, sp, OH, OW, col);
                if (need_dw) dW.noalias() += Gn * col.transpose();
                if (need_dx) {
                    Eigen::MatrixXf dcol = Wm.transpose() * Gn;
                    col2im_accum(dcol, Cin, H, W, KH, KW, sp, OH, OW,
                                 xc.node()->grad.data() + static_cast<std::size_t>(n) * Cin * H * W);
                }
            }
            if (need_dw) {
                wc.node()->ensure_grad();
                MapRow dWm(wc.node()->grad.data(), Cout, K);
                dWm += dW;
            }
            if (bc && bc->requires_grad()) {
                bc->node()->ensure_grad();
                for (int n = 0; n < N; ++n) {
                    MapRowConst Gn(o.grad.data() + static_cast<std::size_t>(n) * Cout * P, Cout, P);
                    for (int co = 0; co < Cout; ++co)
                        bc->node()->grad[static_cast<std::size_t>(co)] += Gn.row(co).sum();
                }
            }
        });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, Mode mode, float eps, float momentum) {
    require_4d(x, "batch_norm2d input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t M = static_cast<std::int64_t>(N) * H * W;
    if (mode == Mode::Train && M < 2)
        throw std::invalid_argument("batch_norm2d: degenerate batch, need N*H*W >= 2 per channel in train mode");

    std::vector<float> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
    if (mode == Mode::Train) {
        for (int c = 0; c < C; ++c) {
            double sum = 0.0, sq = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = x.data() + ((static_cast<std::size_t>(n) * C + c) * H) * W;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) {
                    sum += p[i];
                    sq += static_cast<double>(p[i]) * p[i];
                }
            }
            const double mu = sum / static_cast<double>(M);
            const double var = std::max(0.0, sq / static_cast<double>(M) - mu * mu);
            mean[static_cast<std::size_t>(c)] = static_cast<float>(mu);
            invstd[static_cast<std::size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + eps));
            const double var_unbiased = M > 1 ? var * static_cast<double>(M) / static_cast<double>(M - 1) : var;
            state.running_mean[static_cast<std::size_t>(c)] =
                (1.0f - momentum) * state.running_mean[static_cast<std::size_t>(c)] + momentum * static_cast<float>(mu);
            state.running_var[static_cast<std::size_t>(c)] =
                (1.0f - momentum) * state.running_var[static_cast<std::size_t>(c)] + momentum * static_cast<float>(var_unbiased);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[static_cast<std::size_t>(c)] = state.running_mean[static_cast<std::size_t>(c)];
            invstd[static_cast<std::size_t>(c)] =
                1.0f / std::sqrt(state.running_var[static_cast<std::size_t>(c)] + eps);
        }
    }

    std::vector<float> xhat(static_cast<std::size_t>(x.numel()));
    std::vector<float> out(static_cast<std::size_t>(x.numel()));
    const std::int64_t HW = static_cast<std::int64_t>(H) * W;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* p = x.data() + (static_cast<std::size_t>(n) * C + c) * HW;
            float* xh = xhat.data() + (static_cast<std::size_t>(n) * C + c) * HW;
            float* po = out.data() + (static_cast<std::size_t>(n) * C + c) * HW;
            const float mu = mean[static_cast<std::size_t>(c)];
            const float is = invstd[static_cast<std::size_t>(c)];
            const float g = gamma.data()[c], b = beta.data()[c];
            for (std::int64_t i = 0; i < HW; ++i) {
                xh[i] = (p[i] - mu) * is;
                po[i] = g * xh[i] + b;
            }
        }

    Tensor xc = x, gc = gamma, bc = beta;
    const bool train = mode == Mode::Train;
    return detail::make_op(
        x.shape(), std::move(out), {x, gamma, beta},
        [xc, gc, bc, xhat = std::move(xhat), invstd = std::move(invstd),
         N, C, HW, M, train](detail::Node& o) {
            for (int c = 0; c < C; ++c) {
                const float g = gc.data()[c];
                const float is = invstd[static_cast<std::size_t>(c)];
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int n = 0; n < N; ++n) {
                    const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                    for (std::int64_t i = 0; i < HW; ++i) {
                        sum_dy += o.grad[base + i];
                        sum_dy_xhat += static_cast<double>(o.grad[base + i]) * xhat[base + i];
                    }
                }
                if (gc.requires_grad()) {
                    gc.node()->ensure_grad();
                    gc.node()->grad[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy_xhat);
                }
                if (bc.requires_grad()) {
                    bc.node()->ensure_grad();
                    bc.node()->grad[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy);
                }
                if (xc.requires_grad()) {
                    xc.node()->ensure_grad();
                    const float mean_dy = static_cast<float>(sum_dy / static_cast<double>(M));
                    const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / static_cast<double>(M));
                    for (int n = 0; n < N; ++n) {
                        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) {
                            float dxhat = o.grad[base + i] * g;
                            float dx = train
                                ? is * (dxhat - g * mean_dy - xhat[base + i] * g * mean_dy_xhat)
                                : is * dxhat;
                            xc.node()->grad[base + i] += dx;
                        }
                    }
                }
            }
        });
}

Tensor activation(const Tensor& x, Activation kind) {
    std::vector<float> out(static_cast<std::size_t>(x.numel()));
    if (kind == Activation::Relu) {
        for (std::int64_t i = 0; i < x.numel(); ++i) out[static_cast<std::size_t>(i)] = std::max(0.0f, x.data()[i]);
    } else {
        for (std::int64_t i = 0; i < x.numel(); ++i)
            out[static_cast<std::size_t>(i)] = 1.0f / (1.0f + std::exp(-x.data()[i]));
    }
    Tensor xc = x;
    std::vector<float> saved = out;  // sigmoid backward reads the output
    return detail::make_op(
        x.shape(), std::move(out), {x},
        [xc, kind, saved = std::move(saved)](detail::Node& o) {
            if (!xc.requires_grad()) return;
            xc.node()->ensure_grad();
            if (kind == Activation::Relu) {
                for (std::size_t i = 0; i < o.grad.size(); ++i)
                    if (xc.data()[i] > 0.0f) xc.node()->grad[i] += o.grad[i];
            } else {
                for (std::size_t i = 0; i < o.grad.size(); ++i)
                    xc.node()->grad[i] += o.grad[i] * saved[i] * (1.0f - saved[i]);
            }
        });
}

namespace {

struct LerpTap {
    int lo, hi;
    float w_hi;  // weight of hi; lo gets 1-w_hi
};

std::vector<LerpTap> bilinear_taps(int in, int out) {
    std::vector<LerpTap> taps(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double s = (o + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        int lo = static_cast<int>(std::floor(s));
        int hi = std::min(lo + 1, in - 1);
        taps[static_cast<std::size_t>(o)] = {lo, hi, static_cast<float>(s - lo)};
    }
    return taps;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
    require_4d(x, "resize_bilinear input");
    if (out_h < 1 || out_w < 1)
        throw std::invalid_argument("resize_bilinear: target size must be positive");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const auto ty = bilinear_taps(H, out_h);
    const auto tx = bilinear_taps(W, out_w);
    std::vector<float> out(static_cast<std::size_t>(N) * C * out_h * out_w);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* src = x.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
            float* dst = out.data() + (static_cast<std::size_t>(n) * C + c) * out_h * out_w;
            for (int oh = 0; oh < out_h; ++oh) {
                const LerpTap& a = ty[static_cast<std::size_t>(oh)];
                for (int ow = 0; ow < out_w; ++ow) {
                    const LerpTap& b = tx[static_cast<std::size_t>(ow)];
                    float top = src[a.lo * W + b.lo] * (1 - b.w_hi) + src[a.lo * W + b.hi] * b.w_hi;
                    float bot = src[a.hi * W + b.lo] * (1 - b.w_hi) + src[a.hi * W + b.hi] * b.w_hi;
                    dst[oh * out_w + ow] = top * (1 - a.w_hi) + bot * a.w_hi;
                }
            }
        }
    Tensor xc = x;
    return detail::make_op(
        {N, C, out_h, out_w}, std::move(out), {x},
        [xc, ty, tx, N, C, H, W, out_h, out_w](detail::Node& o) {
            if (!xc.requires_grad()) return;
            xc.node()->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    float* dx = xc.node()->grad.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
                    const float* g = o.grad.data() + (static_cast<std::size_t>(n) * C + c) * out_h * out_w;
                    for (int oh = 0; oh < out_h; ++oh) {
                        const LerpTap& a = ty[static_cast<std::size_t>(oh)];
                        for (int ow = 0; ow < out_w; ++ow) {
                            const LerpTap& b = tx[static_cast<std::size_t>(ow)];
                            const float gv = g[oh * out_w + ow];
                            dx[a.lo * W + b.lo] += gv * (1 - a.w_hi) * (1 - b.w_hi);
                            dx[a.lo * W + b.hi] += gv * (1 - a.w_hi) * b.w_hi;
                            dx[a.hi * W + b.lo] += gv * a.w_hi * (1 - b.w_hi);
                            dx[a.hi * W + b.hi] += gv * a.w_hi * b.w_hi;
                        }
                    }
                }
        });
}

Tensor upsample_bilinear(const Tensor& x, int factor) {
    if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
    return resize_bilinear(x, x.dim(2) * factor, x.dim(3) * factor);
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
    const int N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
    int Ctot = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        require_4d(xs[i], "concat_channels input");
        if (xs[i].dim(0) != N || xs[i].dim(2) != H || xs[i].dim(3) != W)
            throw ShapeError("concat_channels: input " + std::to_string(i) + " " +
                             shape_str(xs[i].shape()) + " does not match input 0 " +
                             shape_str(xs[0].shape()));
        Ctot += xs[i].dim(1);
    }
    const std::int64_t HW = static_cast<std::int64_t>(H) * W;
    std::vector<float> out(static_cast<std::size_t>(N) * Ctot * HW);
    std::int64_t coff = 0;
    for (const Tensor& t : xs) {
        const int C = t.dim(1);
        for (int n = 0; n < N; ++n)
            std::copy_n(t.data() + static_cast<std::size_t>(n) * C * HW, C * HW,
                        out.data() + (static_cast<std::size_t>(n) * Ctot + coff) * HW);
        coff += C;
    }
    std::vector<Tensor> captured = xs;
    return detail::make_op(
        {N, Ctot, H, W}, std::move(out), xs,
        [captured = std::move(captured), N, Ctot, HW](detail::Node& o) {
            std::int64_t coff = 0;
            for (const Tensor& t : captured) {
                const int C = t.dim(1);
                if (t.requires_grad()) {
                    t.node()->ensure_grad();
                    for (int n = 0; n < N; ++n)
                        for (std::int64_t i = 0; i < C * HW; ++i)
                            t.node()->grad[static_cast<std::size_t>(n) * C * HW + i] +=
                                o.grad[(static_cast<std::size_t>(n) * Ctot + coff) * HW + i];
                }
                coff += C;
            }
        });
}

Tensor elementwise(const Tensor& a, const Tensor& b, Binary kind) {
    require_4d(a, "elementwise a");
    require_4d(b, "elementwise b");
    const bool same = a.shape() == b.shape();
    const bool bcast = !same && b.dim(0) == a.dim(0) && b.dim(1) == 1 &&
                       b.dim(2) == a.dim(2) && b.dim(3) == a.dim(3);
    if (!same && !bcast)
        throw ShapeError("elementwise: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " are not broadcastable");
    const int N = a.dim(0), C = a.dim(1);
    const std::int64_t HW = static_cast<std::int64_t>(a.dim(2)) * a.dim(3);
    std::vector<float> out(static_cast<std::size_t>(a.numel()));
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::size_t ao = (static_cast<std::size_t>(n) * C + c) * HW;
            const std::size_t bo = same ? ao : static_cast<std::size_t>(n) * HW;
            for (std::int64_t i = 0; i < HW; ++i)
                out[ao + i] = kind == Binary::Add ? a.data()[ao + i] + b.data()[bo + i]
                                                  : a.data()[ao + i] * b.data()[bo + i];
        }
    Tensor ac = a, bc = b;
    return detail::make_op(
        a.shape(), std::move(out), {a, b},
        [ac, bc, kind, same, N, C, HW](detail::Node& o) {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::size_t ao = (static_cast<std::size_t>(n) * C + c) * HW;
                    const std::size_t bo = same ? ao : static_cast<std::size_t>(n) * HW;
                    if (ac.requires_grad()) {
                        ac.node()->ensure_grad();
                        for (std::int64_t i = 0; i < HW; ++i)
                            ac.node()->grad[ao + i] +=
                                kind == Binary::Add ? o.grad[ao + i] : o.grad[ao + i] * bc.data()[bo + i];
                    }
                    if (bc.requires_grad()) {
                        bc.node()->ensure_grad();
                        for (std::int64_t i = 0; i < HW; ++i)
                            bc.node()->grad[bo + i] +=
                                kind == Binary::Add ? o.grad[ao + i] : o.grad[ao + i] * ac.data()[ao + i];
                    }
                }
        });
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
    std::vector<float> out(static_cast<std::size_t>(a.numel()));
    for (std::int64_t i = 0; i < a.numel(); ++i) out[static_cast<std::size_t>(i)] = a.data()[i] + b.data()[i];
    Tensor ac = a, bc = b;
    return detail::make_op(a.shape(), std::move(out), {a, b}, [ac, bc](detail::Node& o) {
        if (ac.requires_grad()) detail::accum(*ac.node(), o.grad);
        if (bc.requires_grad()) detail::accum(*bc.node(), o.grad);
    });
}

Tensor reduce(const Tensor& x, std::vector<int> axes, Reduction kind) {
    const int nd = x.ndim();
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    for (int a : axes) {
        if (a < 0 || a >= nd)
            throw std::invalid_argument("reduce: axis " + std::to_string(a) +
                                        " out of range for " + shape_str(x.shape()));
        if (x.dim(a) == 0)
            throw std::invalid_argument("reduce: cannot reduce zero-extent axis " + std::to_string(a));
    }
    if (axes.empty()) {
        // identity
        Tensor xc = x;
        return detail::make_op(x.shape(), {x.values().begin(), x.values().end()}, {x},
                               [xc](detail::Node& o) {
                                   if (!xc.requires_grad()) return;
                                   detail::accum(*xc.node(), o.grad);
                               });
    }

    Shape out_shape;
    std::vector<bool> reduced(static_cast<std::size_t>(nd), false);
    for (int a : axes) reduced[static_cast<std::size_t>(a)] = true;
    std::int64_t n_reduced = 1;
    for (int d = 0; d < nd; ++d) {
        if (reduced[static_cast<std::size_t>(d)]) n_reduced *= x.dim(d);
        else out_shape.push_back(x.dim(d));
    }
    if (out_shape.empty()) out_shape.push_back(1);

    // out stride per input dim (0 where reduced)
    std::vector<std::int64_t> out_stride(static_cast<std::size_t>(nd), 0);
    std::int64_t stride = 1;
    for (int d = nd - 1; d >= 0; --d) {
        if (!reduced[static_cast<std::size_t>(d)]) {
            out_stride[static_cast<std::size_t>(d)] = stride;
            stride *= x.dim(d);
        }
    }
    std::vector<std::int64_t> in_stride(static_cast<std::size_t>(nd), 1);
    for (int d = nd - 2; d >= 0; --d)
        in_stride[static_cast<std::size_t>(d)] = in_stride[static_cast<std::size_t>(d) + 1] * x.dim(d + 1);

    // captured by value: the backward lambda outlives this frame
    const Shape dims = x.shape();
    auto out_index = [nd, dims, in_stride, out_stride](std::int64_t flat) {
        std::int64_t oi = 0;
        for (int d = 0; d < nd; ++d) {
            const std::int64_t idx = (flat / in_stride[static_cast<std::size_t>(d)]) %
                                     dims[static_cast<std::size_t>(d)];
            oi += idx * out_stride[static_cast<std::size_t>(d)];
        }
        return oi;
    };

    const float scale = kind == Reduction::Mean ? 1.0f / static_cast<float>(n_reduced) : 1.0f;
    std::vector<double> acc(static_cast<std::size_t>(shape_numel(out_shape)), 0.0);
    for (std::int64_t i = 0; i < x.numel(); ++i) acc[static_cast<std::size_t>(out_index(i))] += x.data()[i];
    std::vector<float> out(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]) * scale;

    Tensor xc = x;
    return detail::make_op(
        std::move(out_shape), std::move(out), {x},
        [xc, out_index, scale](detail::Node& o) {
            if (!xc.requires_grad()) return;
            xc.node()->ensure_grad();
            for (std::int64_t i = 0; i < xc.numel(); ++i)
                xc.node()->grad[static_cast<std::size_t>(i)] +=
                    o.grad[static_cast<std::size_t>(out_index(i))] * scale;
        });
}

Tensor cosine_similarity_map(const Tensor& f, const Tensor& p, float eps) {
    require_4d(f, "cosine_similarity_map features");
    const int N = f.dim(0), D = f.dim(1), H = f.dim(2), W = f.dim(3);
    if (p.ndim() != 1 || p.dim(0) != D)
        throw ShapeError("cosine_similarity_map: prototype " + shape_str(p.shape()) +
                         " does not match feature depth " + std::to_string(D));
    const std::int64_t HW = static_cast<std::int64_t>(H) * W;
    double p_sq = 0.0;
    for (int d = 0; d < D; ++d) p_sq += static_cast<double>(p.data()[d]) * p.data()[d];
    const float p_norm = static_cast<float>(std::sqrt(p_sq));
    const float bp = std::max(p_norm, eps);

    std::vector<float> out(static_cast<std::size_t>(N) * HW);
    for (int n = 0; n < N; ++n) {
        const float* fn = f.data() + static_cast<std::size_t>(n) * D * HW;
        for (std::int64_t i = 0; i < HW; ++i) {
            double dot = 0.0, f_sq = 0.0;
            for (int d = 0; d < D; ++d) {
                const float v = fn[d * HW + i];
                dot += static_cast<double>(v) * p.data()[d];
                f_sq += static_cast<double>(v) * v;
            }
            const float bf = std::max(static_cast<float>(std::sqrt(f_sq)), eps);
            out[static_cast<std::size_t>(n) * HW + i] = static_cast<float>(dot) / (bf * bp);
        }
    }

    Tensor fc = f, pc = p;
    return detail::make_op(
        {N, 1, H, W}, std::move(out), {f, p},
        [fc, pc, eps, bp, p_norm, N, D, HW](detail::Node& o) {
            const bool need_df = fc.requires_grad();
            const bool need_dp = pc.requires_grad();
            if (need_df) fc.node()->ensure_grad();
            if (need_dp) pc.node()->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const float* fn = fc.data() + static_cast<std::size_t>(n) * D * HW;
                for (std::int64_t i = 0; i < HW; ++i) {
                    const float g = o.grad[static_cast<std::size_t>(n) * HW + i];
                    if (g == 0.0f) continue;
                    double dot = 0.0, f_sq = 0.0;
                    for (int d = 0; d < D; ++d) {
                        const float v = fn[d * HW + i];
                        dot += static_cast<double>(v) * pc.data()[d];
                        f_sq += static_cast<double>(v) * v;
                    }
                    const float f_norm = static_cast<float>(std::sqrt(f_sq));
                    const float bf = std::max(f_norm, eps);
                    const float inv = 1.0f / (bf * bp);
                    const float c = static_cast<float>(dot) * inv;
                    if (need_df) {
                        const bool through_bf = f_norm > eps;
                        for (int d = 0; d < D; ++d) {
                            float dc = pc.data()[d] * inv;
                            if (through_bf) dc -= c * fn[d * HW + i] / (bf * bf);
                            fc.node()->grad[static_cast<std::size_t>(n) * D * HW + d * HW + i] += g * dc;
                        }
                    }
                    if (need_dp) {
                        const bool through_bp = p_norm > eps;
                        for (int d = 0; d < D; ++d) {
                            float dc = fn[d * HW + i] * inv;
                            if (through_bp) dc -= c * pc.data()[d] / (bp * bp);
                            pc.node()->grad[static_cast<std::size_t>(d)] += g * dc;
                        }
                    }
                }
            }
        });
}

namespace {

// Pooling core; mask already at f's spatial resolution.
Tensor masked_pool_core(const Tensor& f, const Tensor& m, float eps, bool normalize) {
    const int N = f.dim(0), D = f.dim(1), H = f.dim(2), W = f.dim(3);
    const std::int64_t HW = static_cast<std::int64_t>(H) * W;
    std::vector<double> mask_sum(static_cast<std::size_t>(N), 0.0);
    for (int n = 0; n < N; ++n) {
        const float* mn = m.data() + static_cast<std::size_t>(n) * HW;
        for (std::int64_t i = 0; i < HW; ++i) mask_sum[static_cast<std::size_t>(n)] += mn[i];
    }
    std::vector<float> denom(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n)
        denom[static_cast<std::size_t>(n)] =
            normalize ? static_cast<float>(mask_sum[static_cast<std::size_t>(n)]) + eps
                      : static_cast<float>(HW);

    std::vector<float> out(static_cast<std::size_t>(D), 0.0f);
    std::vector<double> weighted(static_cast<std::size_t>(N) * D, 0.0);
    for (int n = 0; n < N; ++n) {
        const float* mn = m.data() + static_cast<std::size_t>(n) * HW;
        const float* fn = f.data() + static_cast<std::size_t>(n) * D * HW;
        for (int d = 0; d < D; ++d) {
            double a = 0.0;
            for (std::int64_t i = 0; i < HW; ++i) a += static_cast<double>(fn[d * HW + i]) * mn[i];
            weighted[static_cast<std::size_t>(n) * D + d] = a;
        }
    }
    for (int d = 0; d < D; ++d) {
        double v = 0.0;
        for (int n = 0; n < N; ++n)
            v += weighted[static_cast<std::size_t>(n) * D + d] / denom[static_cast<std::size_t>(n)];
        out[static_cast<std::size_t>(d)] = static_cast<float>(v / N);
    }

    Tensor fc = f, mc = m;
    return detail::make_op(
        {D}, std::move(out), {f, m},
        [fc, mc, denom = std::move(denom), weighted = std::move(weighted),
         normalize, N, D, HW](detail::Node& o) {
            const float invN = 1.0f / static_cast<float>(N);
            for (int n = 0; n < N; ++n) {
                const float dn = denom[static_cast<std::size_t>(n)];
                const float* mn = mc.data() + static_cast<std::size_t>(n) * HW;
                const float* fn = fc.data() + static_cast<std::size_t>(n) * D * HW;
                if (fc.requires_grad()) {
                    fc.node()->ensure_grad();
                    for (int d = 0; d < D; ++d) {
                        const float gd = o.grad[static_cast<std::size_t>(d)] * invN / dn;
                        float* df = fc.node()->grad.data() + static_cast<std::size_t>(n) * D * HW + d * HW;
                        for (std::int64_t i = 0; i < HW; ++i) df[i] += gd * mn[i];
                    }
                }
                if (mc.requires_grad()) {
                    mc.node()->ensure_grad();
                    float* dm = mc.node()->grad.data() + static_cast<std::size_t>(n) * HW;
                    for (int d = 0; d < D; ++d) {
                        const float gd = o.grad[static_cast<std::size_t>(d)] * invN;
                        const float a = static_cast<float>(weighted[static_cast<std::size_t>(n) * D + d]);
                        for (std::int64_t i = 0; i < HW; ++i) {
                            float dv = fn[d * HW + i] / dn;
                            if (normalize) dv -= a / (dn * dn);
                            dm[i] += gd * dv;
                        }
                    }
                }
            }
        });
}

}  // namespace

Tensor masked_avg_pool(const Tensor& f, const Tensor& mask, float eps, bool normalize) {
    require_4d(f, "masked_avg_pool features");
    require_4d(mask, "masked_avg_pool mask");
    if (mask.dim(1) != 1)
        throw ShapeError("masked_avg_pool: mask must have one channel, got " + shape_str(mask.shape()));
    Tensor m = mask;
    if (mask.dim(2) != f.dim(2) || mask.dim(3) != f.dim(3))
        m = resize_bilinear(mask, f.dim(2), f.dim(3));
    return masked_pool_core(f, m, eps, normalize);
}

}  // namespace protolab
