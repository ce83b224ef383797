#pragma once

// Modulated deformable convolution.
//
// Offset channel layout (normative, also recorded in checkpoint headers):
// for deform group g and kernel tap k = ki * K + kj (row-major),
//   offsets channel 2 * (g * K*K + k)     holds the y displacement,
//   offsets channel 2 * (g * K*K + k) + 1 holds the x displacement,
//   masks   channel g * K*K + k           holds the modulation in [0, 1].
// Displacements are in input pixels and are added to the regular sampling
// grid, so content shifted by +d in the input is matched by offsets of +d.
// Samples falling outside the input read zero.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dfar/conv.hpp"

namespace dfar {

inline constexpr const char* kOffsetLayout =
    "per deform group, kernel taps row-major, (dy, dx) interleaved; masks post-sigmoid, one per tap";

/// Bilinear interpolation of a single h x w channel at fractional (y, x).
/// Neighbours outside the field contribute zero.
template <typename T>
T bilinear_sample(std::span<const T> field, int h, int w, T y, T x) {
    const T fy = std::floor(y), fx = std::floor(x);
    const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
    const T ly = y - fy, lx = x - fx;
    auto px = [&](int yy, int xx) -> T {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return T(0);
        return field[static_cast<std::size_t>(yy) * w + xx];
    };
    return (T(1) - ly) * ((T(1) - lx) * px(y0, x0) + lx * px(y0, x0 + 1)) +
           ly * ((T(1) - lx) * px(y0 + 1, x0) + lx * px(y0 + 1, x0 + 1));
}

/// Offsets (d*2K^2 x h x w) and post-activation masks (d*K^2 x h x w).
template <typename T>
struct OffsetField {
    Var<T> offsets;
    Var<T> masks;

    void validate(const ConvSpec& spec, int out_h, int out_w) const {
        const int kk = spec.kernel * spec.kernel;
        const auto& o = offsets.shape();
        const auto& m = masks.shape();
        if (o.size() != 3 || m.size() != 3) throw ShapeError("offset field tensors must be rank 3");
        if (o[0] != spec.deform_groups * 2 * kk)
            throw ShapeError("offset channels: expected " + std::to_string(spec.deform_groups * 2 * kk) + ", got " +
                             std::to_string(o[0]));
        if (m[0] != spec.deform_groups * kk)
            throw ShapeError("mask channels: expected " + std::to_string(spec.deform_groups * kk) + ", got " +
                             std::to_string(m[0]));
        if (o[1] != out_h || m[1] != out_h)
            throw ShapeError("offset field height: expected " + std::to_string(out_h) + ", got " + std::to_string(o[1]) +
                             "/" + std::to_string(m[1]));
        if (o[2] != out_w || m[2] != out_w)
            throw ShapeError("offset field width: expected " + std::to_string(out_w) + ", got " + std::to_string(o[2]) +
                             "/" + std::to_string(m[2]));
    }
};

namespace detail {

// Bilinear value plus its partial derivatives with respect to y and x.
template <typename T>
struct BilinearTap {
    int y0, x0;
    T ly, lx;
    T v00, v01, v10, v11;

    BilinearTap(const T* field, int h, int w, T y, T x) {
        const T fy = std::floor(y), fx = std::floor(x);
        y0 = static_cast<int>(fy);
        x0 = static_cast<int>(fx);
        ly = y - fy;
        lx = x - fx;
        const bool r0 = y0 >= 0 && y0 < h, r1 = y0 + 1 >= 0 && y0 + 1 < h;
        const bool c0 = x0 >= 0 && x0 < w, c1 = x0 + 1 >= 0 && x0 + 1 < w;
        auto px = [&](int yy, int xx) { return field[static_cast<std::size_t>(yy) * w + xx]; };
        v00 = (r0 && c0) ? px(y0, x0) : T(0);
        v01 = (r0 && c1) ? px(y0, x0 + 1) : T(0);
        v10 = (r1 && c0) ? px(y0 + 1, x0) : T(0);
        v11 = (r1 && c1) ? px(y0 + 1, x0 + 1) : T(0);
    }
    T value() const { return (T(1) - ly) * ((T(1) - lx) * v00 + lx * v01) + ly * ((T(1) - lx) * v10 + lx * v11); }
    T dy() const { return (T(1) - lx) * (v10 - v00) + lx * (v11 - v01); }
    T dx() const { return (T(1) - ly) * (v01 - v00) + ly * (v11 - v10); }
    void scatter(T* field, int h, int w, T g) const {
        auto put = [&](int yy, int xx, T v) {
            if (yy >= 0 && yy < h && xx >= 0 && xx < w) field[static_cast<std::size_t>(yy) * w + xx] += v;
        };
        put(y0, x0, g * (T(1) - ly) * (T(1) - lx));
        put(y0, x0 + 1, g * (T(1) - ly) * lx);
        put(y0 + 1, x0, g * ly * (T(1) - lx));
        put(y0 + 1, x0 + 1, g * ly * lx);
    }
};

// Sampling position of tap (ki, kj) for output pixel (oy, ox) of deform group dg.
template <typename T>
struct TapGeometry {
    const ConvSpec& s;
    const Tensor<T>& off;
    int K;
    T y(int dg, int ki, int kj, int oy, int ox) const {
        const int k = ki * K + kj;
        return static_cast<T>(oy * s.stride - s.padding + ki * s.dilation) + off.at(2 * (dg * K * K + k), oy, ox);
    }
    T x(int dg, int ki, int kj, int oy, int ox) const {
        const int k = ki * K + kj;
        return static_cast<T>(ox * s.stride - s.padding + kj * s.dilation) + off.at(2 * (dg * K * K + k) + 1, oy, ox);
    }
};

}  // namespace detail

/// Modulated deformable convolution:
///   out(p) = bias + sum_k w_k * m_k(p) * x(p + p_k + dp_k(p)).
/// Differentiable with respect to input, weight, bias, offsets and masks.
template <typename T>
Var<T> deform_conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const OffsetField<T>& field,
                     const ConvSpec& spec) {
    spec.validate();
    const Shape bshape = bias.defined() ? bias.shape() : Shape{};
    detail::check_conv_operands(x.shape(), weight.shape(), bias.defined() ? &bshape : nullptr, spec);
    const auto& xv = x.value();
    const int H = xv.height(), W = xv.width();
    const int ho = spec.out_size(H), wo = spec.out_size(W);
    field.validate(spec, ho, wo);

    const int K = spec.kernel, KK = K * K;
    const int cg = spec.in_channels / spec.groups, og = spec.out_channels / spec.groups;
    const int cpd = spec.in_channels / spec.deform_groups;
    const int rows = cg * KK, cols = ho * wo;
    const auto& off = field.offsets.value();
    const auto& msk = field.masks.value();
    detail::TapGeometry<T> geo{spec, off, K};

    Tensor<T> out({spec.out_channels, ho, wo});
    std::vector<std::vector<T>> cols_buf(static_cast<std::size_t>(spec.groups));
    for (int g = 0; g < spec.groups; ++g) {
        auto& buf = cols_buf[static_cast<std::size_t>(g)];
        buf.resize(static_cast<std::size_t>(rows) * cols);
        for (int cl = 0; cl < cg; ++cl) {
            const int c = g * cg + cl;
            const int dg = c / cpd;
            const T* src = xv.channel(c);
            for (int ki = 0; ki < K; ++ki)
                for (int kj = 0; kj < K; ++kj) {
                    const int k = ki * K + kj;
                    T* row = buf.data() + static_cast<std::size_t>(cl * KK + k) * cols;
                    const T* mrow = msk.channel(dg * KK + k);
                    for (int oy = 0; oy < ho; ++oy)
                        for (int ox = 0; ox < wo; ++ox) {
                            const int p = oy * wo + ox;
                            detail::BilinearTap<T> tap(src, H, W, geo.y(dg, ki, kj, oy, ox), geo.x(dg, ki, kj, oy, ox));
                            row[p] = mrow[p] * tap.value();
                        }
                }
        }
        detail::gemm_forward(weight.value().data() + static_cast<std::size_t>(g) * og * rows, buf.data(),
                             out.channel(g * og), og, rows, cols);
    }
    if (bias.defined()) detail::add_bias(out, bias.value());

    std::vector<Var<T>> inputs{x, weight, field.offsets, field.masks};
    if (bias.defined()) inputs.push_back(bias);
    return make_result(
        std::move(out), inputs,
        [spec, cols_buf = std::move(cols_buf), ho, wo, cg, og, rows, cols, K, KK, cpd](Node<T>& self) {
            const auto& xv = self.parents[0]->value;
            const auto& wv = self.parents[1]->value;
            const auto& off = self.parents[2]->value;
            const auto& msk = self.parents[3]->value;
            auto* gx = detail::parent_grad(self, 0);
            auto* gw = detail::parent_grad(self, 1);
            auto* goff = detail::parent_grad(self, 2);
            auto* gm = detail::parent_grad(self, 3);
            const int H = xv.height(), W = xv.width();
            detail::TapGeometry<T> geo{spec, off, K};
            const bool need_cols = gx || goff || gm;
            std::vector<T> dcol(need_cols ? static_cast<std::size_t>(rows) * cols : 0);
            for (int g = 0; g < spec.groups; ++g) {
                const T* dy = self.grad.channel(g * og);
                const T* w = wv.data() + static_cast<std::size_t>(g) * og * rows;
                if (gw)
                    detail::gemm_weight_grad(dy, cols_buf[static_cast<std::size_t>(g)].data(),
                                             gw->data() + static_cast<std::size_t>(g) * og * rows, og, rows, cols);
                if (!need_cols) continue;
                detail::gemm_col_grad(w, dy, dcol.data(), og, rows, cols);
                for (int cl = 0; cl < cg; ++cl) {
                    const int c = g * cg + cl;
                    const int dg = c / cpd;
                    const T* src = xv.channel(c);
                    T* dsrc = gx ? gx->channel(c) : nullptr;
                    for (int ki = 0; ki < K; ++ki)
                        for (int kj = 0; kj < K; ++kj) {
                            const int k = ki * K + kj;
                            const T* drow = dcol.data() + static_cast<std::size_t>(cl * KK + k) * cols;
                            const T* mrow = msk.channel(dg * KK + k);
                            T* dmrow = gm ? gm->channel(dg * KK + k) : nullptr;
                            T* doy = goff ? goff->channel(2 * (dg * KK + k)) : nullptr;
                            T* dox = goff ? goff->channel(2 * (dg * KK + k) + 1) : nullptr;
                            for (int oy = 0; oy < ho; ++oy)
                                for (int ox = 0; ox < wo; ++ox) {
                                    const int p = oy * wo + ox;
                                    const T gcol = drow[p];
                                    if (gcol == T(0)) continue;
                                    detail::BilinearTap<T> tap(src, H, W, geo.y(dg, ki, kj, oy, ox),
                                                               geo.x(dg, ki, kj, oy, ox));
                                    const T gm_scaled = gcol * mrow[p];
                                    if (dmrow) dmrow[p] += gcol * tap.value();
                                    if (doy) {
                                        doy[p] += gm_scaled * tap.dy();
                                        dox[p] += gm_scaled * tap.dx();
                                    }
                                    if (dsrc) tap.scatter(dsrc, H, W, gm_scaled);
                                }
                        }
                }
            }
            if (self.parents.size() > 4)
                if (auto* gb = detail::parent_grad(self, 4)) detail::bias_grad(self.grad, *gb);
        });
}

/// Direct evaluation of the modulated deformable convolution by per-pixel,
/// per-tap scalar loops over bilinear_sample. Slow; meant as an oracle for
/// small shapes. `bias` may be null.
template <typename T>
Tensor<T> deform_conv2d_reference(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                                  const Tensor<T>& offsets, const Tensor<T>& masks, const ConvSpec& spec) {
    spec.validate();
    const Shape bshape = bias ? bias->shape() : Shape{};
    detail::check_conv_operands(x.shape(), weight.shape(), bias ? &bshape : nullptr, spec);
    const int H = x.height(), W = x.width();
    const int ho = spec.out_size(H), wo = spec.out_size(W);
    const int K = spec.kernel;
    OffsetField<T>{constant(offsets), constant(masks)}.validate(spec, ho, wo);
    const int cg = spec.in_channels / spec.groups, og = spec.out_channels / spec.groups;
    const int cpd = spec.in_channels / spec.deform_groups;

    Tensor<T> out({spec.out_channels, ho, wo});
    for (int o = 0; o < spec.out_channels; ++o) {
        const int g = o / og;
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                T acc = bias ? (*bias)[o] : T(0);
                for (int cl = 0; cl < cg; ++cl) {
                    const int c = g * cg + cl;
                    const int dg = c / cpd;
                    std::span<const T> plane(x.channel(c), static_cast<std::size_t>(H) * W);
                    for (int ki = 0; ki < K; ++ki)
                        for (int kj = 0; kj < K; ++kj) {
                            const int k = ki * K + kj;
                            const T dy = offsets.at(2 * (dg * K * K + k), oy, ox);
                            const T dx = offsets.at(2 * (dg * K * K + k) + 1, oy, ox);
                            const T m = masks.at(dg * K * K + k, oy, ox);
                            const T sy = static_cast<T>(oy * spec.stride - spec.padding + ki * spec.dilation) + dy;
                            const T sx = static_cast<T>(ox * spec.stride - spec.padding + kj * spec.dilation) + dx;
                            acc += weight.at(o, cl, ki, kj) * m * bilinear_sample(plane, H, W, sy, sx);
                        }
                }
                out.at(o, oy, ox) = acc;
            }
    }
    return out;
}

}  // namespace dfar
