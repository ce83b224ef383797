#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dfar/autograd.hpp"
#include "dfar/ops.hpp"

namespace dfar {

/// Geometry of a (possibly deformable) 2-D convolution. Weights have shape
/// out_channels x (in_channels / groups) x kernel x kernel.
struct ConvSpec {
    int in_channels = 1;
    int out_channels = 1;
    int kernel = 3;
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;
    int deform_groups = 1;

    /// "same"-size padding for odd kernels at stride 1.
    static ConvSpec same(int in, int out, int k, int dilation = 1) {
        return ConvSpec{in, out, k, 1, dilation * (k - 1) / 2, dilation, 1, 1};
    }

    void validate() const {
        auto positive = [](int v, const char* name) {
            if (v < 1) throw ShapeError(std::string("ConvSpec.") + name + " must be positive");
        };
        positive(in_channels, "in_channels");
        positive(out_channels, "out_channels");
        positive(kernel, "kernel");
        positive(stride, "stride");
        positive(dilation, "dilation");
        positive(groups, "groups");
        positive(deform_groups, "deform_groups");
        if (padding < 0) throw ShapeError("ConvSpec.padding must be non-negative");
        if (in_channels % groups != 0) throw ShapeError("in_channels not divisible by groups");
        if (out_channels % groups != 0) throw ShapeError("out_channels not divisible by groups");
        if (in_channels % deform_groups != 0) throw ShapeError("in_channels not divisible by deform_groups");
    }

    int out_size(int in) const { return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1; }
    Shape weight_shape() const { return {out_channels, in_channels / groups, kernel, kernel}; }
    bool is_pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void check_conv_operands(const Shape& x, const Shape& w, const Shape* b, const ConvSpec& spec) {
    if (x.size() != 3) throw ShapeError("conv input must be rank 3, got " + shape_str(x));
    if (x[0] != spec.in_channels)
        throw ShapeError("conv input channels: expected " + std::to_string(spec.in_channels) + ", got " +
                         std::to_string(x[0]));
    if (w != spec.weight_shape())
        throw ShapeError("conv weight shape: expected " + shape_str(spec.weight_shape()) + ", got " + shape_str(w));
    if (b && (b->size() != 1 || (*b)[0] != spec.out_channels))
        throw ShapeError("conv bias length: expected " + std::to_string(spec.out_channels));
    if (spec.out_size(x[1]) < 1) throw ShapeError("conv output height would be < 1");
    if (spec.out_size(x[2]) < 1) throw ShapeError("conv output width would be < 1");
}

// Unfolds channels [c0, c0 + cg) into a (cg*K*K) x (Ho*Wo) row-major matrix.
// Output columns [lo, hi) read inside the input row for tap offset `off`.
inline std::pair<int, int> valid_columns(int wo, int W, int stride, int off) {
    int lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
    int hi = W - off <= 0 ? 0 : (W - off - 1) / stride + 1;
    hi = std::min(hi, wo);
    lo = std::min(lo, hi);
    return {lo, hi};
}

template <typename T>
void im2col(const Tensor<T>& x, int c0, int cg, const ConvSpec& s, int ho, int wo, T* col) {
    const int H = x.height(), W = x.width(), K = s.kernel;
    std::size_t r = 0;
    for (int c = 0; c < cg; ++c) {
        const T* src = x.channel(c0 + c);
        for (int ki = 0; ki < K; ++ki)
            for (int kj = 0; kj < K; ++kj, ++r) {
                T* dst = col + r * static_cast<std::size_t>(ho) * wo;
                const int off = kj * s.dilation - s.padding;
                const auto [lo, hi] = valid_columns(wo, W, s.stride, off);
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * s.stride - s.padding + ki * s.dilation;
                    T* row = dst + static_cast<std::size_t>(oy) * wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(row, row + wo, T(0));
                        continue;
                    }
                    const T* line = src + static_cast<std::size_t>(iy) * W + off;
                    std::fill(row, row + lo, T(0));
                    if (s.stride == 1) {
                        std::copy(line + lo, line + hi, row + lo);
                    } else {
                        for (int ox = lo; ox < hi; ++ox) row[ox] = line[ox * s.stride];
                    }
                    std::fill(row + hi, row + wo, T(0));
                }
            }
    }
}

template <typename T>
void col2im(const T* col, int c0, int cg, const ConvSpec& s, int ho, int wo, Tensor<T>& dx) {
    const int H = dx.height(), W = dx.width(), K = s.kernel;
    std::size_t r = 0;
    for (int c = 0; c < cg; ++c) {
        T* dst = dx.channel(c0 + c);
        for (int ki = 0; ki < K; ++ki)
            for (int kj = 0; kj < K; ++kj, ++r) {
                const T* src = col + r * static_cast<std::size_t>(ho) * wo;
                const int off = kj * s.dilation - s.padding;
                const auto [lo, hi] = valid_columns(wo, W, s.stride, off);
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * s.stride - s.padding + ki * s.dilation;
                    if (iy < 0 || iy >= H) continue;
                    const T* row = src + static_cast<std::size_t>(oy) * wo;
                    T* line = dst + static_cast<std::size_t>(iy) * W + off;
                    for (int ox = lo; ox < hi; ++ox) line[ox * s.stride] += row[ox];
                }
            }
    }
}

// out[o, p] += W[o, :] * col[:, p] for one group, plus the shared backward
// pieces. Used by both plain and deformable convolution.
template <typename T>
void gemm_forward(const T* w, const T* col, T* out, int og, int rows, int cols) {
    Eigen::Map<const RowMat<T>> W(w, og, rows);
    Eigen::Map<const RowMat<T>> C(col, rows, cols);
    Eigen::Map<RowMat<T>> O(out, og, cols);
    O.noalias() += W * C;
}

template <typename T>
void gemm_weight_grad(const T* dy, const T* col, T* dw, int og, int rows, int cols) {
    Eigen::Map<const RowMat<T>> DY(dy, og, cols);
    Eigen::Map<const RowMat<T>> C(col, rows, cols);
    Eigen::Map<RowMat<T>> DW(dw, og, rows);
    DW.noalias() += DY * C.transpose();
}

template <typename T>
void gemm_col_grad(const T* w, const T* dy, T* dcol, int og, int rows, int cols) {
    Eigen::Map<const RowMat<T>> W(w, og, rows);
    Eigen::Map<const RowMat<T>> DY(dy, og, cols);
    Eigen::Map<RowMat<T>> DC(dcol, rows, cols);
    DC.noalias() = W.transpose() * DY;
}

template <typename T>
void add_bias(Tensor<T>& out, const Tensor<T>& bias) {
    const std::size_t plane = static_cast<std::size_t>(out.height()) * out.width();
    for (int o = 0; o < out.channels(); ++o) {
        T* p = out.channel(o);
        const T b = bias[o];
        for (std::size_t j = 0; j < plane; ++j) p[j] += b;
    }
}

template <typename T>
void bias_grad(const Tensor<T>& dy, Tensor<T>& db) {
    const std::size_t plane = static_cast<std::size_t>(dy.height()) * dy.width();
    for (int o = 0; o < dy.channels(); ++o) {
        const T* p = dy.channel(o);
        T s = 0;
        for (std::size_t j = 0; j < plane; ++j) s += p[j];
        db[o] += s;
    }
}

}  // namespace detail

/// Standard 2-D convolution over a c x h x w map. `bias` may be undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvSpec& spec) {
    spec.validate();
    const Shape bshape = bias.defined() ? bias.shape() : Shape{};
    detail::check_conv_operands(x.shape(), weight.shape(), bias.defined() ? &bshape : nullptr, spec);
    const auto& xv = x.value();
    const int ho = spec.out_size(xv.height()), wo = spec.out_size(xv.width());
    const int cg = spec.in_channels / spec.groups, og = spec.out_channels / spec.groups;
    const int rows = cg * spec.kernel * spec.kernel, cols = ho * wo;
    const bool pointwise = spec.is_pointwise();

    Tensor<T> out({spec.out_channels, ho, wo});
    // One column buffer per group; kept for the backward pass when recording.
    std::vector<std::vector<T>> cols_buf(pointwise ? 0 : static_cast<std::size_t>(spec.groups));
    for (int g = 0; g < spec.groups; ++g) {
        const T* colp;
        if (pointwise) {
            colp = xv.channel(g * cg);
        } else {
            auto& buf = cols_buf[static_cast<std::size_t>(g)];
            buf.resize(static_cast<std::size_t>(rows) * cols);
            detail::im2col(xv, g * cg, cg, spec, ho, wo, buf.data());
            colp = buf.data();
        }
        detail::gemm_forward(weight.value().data() + static_cast<std::size_t>(g) * og * rows, colp,
                             out.channel(g * og), og, rows, cols);
    }
    if (bias.defined()) detail::add_bias(out, bias.value());

    std::vector<Var<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result(std::move(out), inputs,
                       [spec, cols_buf = std::move(cols_buf), ho, wo, cg, og, rows, cols, pointwise](Node<T>& self) {
                           const auto& xv = self.parents[0]->value;
                           const auto& wv = self.parents[1]->value;
                           auto* gx = detail::parent_grad(self, 0);
                           auto* gw = detail::parent_grad(self, 1);
                           std::vector<T> dcol;
                           for (int g = 0; g < spec.groups; ++g) {
                               const T* dy = self.grad.channel(g * og);
                               const T* w = wv.data() + static_cast<std::size_t>(g) * og * rows;
                               const T* colp = pointwise ? xv.channel(g * cg) : cols_buf[static_cast<std::size_t>(g)].data();
                               if (gw) detail::gemm_weight_grad(dy, colp, gw->data() + static_cast<std::size_t>(g) * og * rows, og, rows, cols);
                               if (gx) {
                                   if (pointwise) {
                                       Eigen::Map<const detail::RowMat<T>> W(w, og, rows);
                                       Eigen::Map<const detail::RowMat<T>> DY(dy, og, cols);
                                       Eigen::Map<detail::RowMat<T>> DX(gx->channel(g * cg), rows, cols);
                                       DX.noalias() += W.transpose() * DY;
                                   } else {
                                       dcol.resize(static_cast<std::size_t>(rows) * cols);
                                       detail::gemm_col_grad(w, dy, dcol.data(), og, rows, cols);
                                       detail::col2im(dcol.data(), g * cg, cg, spec, ho, wo, *gx);
                                   }
                               }
                           }
                           if (self.parents.size() > 2)
                               if (auto* gb = detail::parent_grad(self, 2)) detail::bias_grad(self.grad, *gb);
                       });
}

}  // namespace dfar
