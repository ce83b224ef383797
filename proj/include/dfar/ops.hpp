#pragma once

// Differentiable elementwise, structural and reduction ops over Var<T>.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dfar/autograd.hpp"

namespace dfar {

namespace detail {

/// Gradient buffer of parent `i`, or nullptr when that parent is constant.
template <typename T>
Tensor<T>* parent_grad(Node<T>& self, std::size_t i) {
    auto& p = self.parents[i];
    return p->requires_grad ? &p->ensure_grad() : nullptr;
}

template <typename T>
T sigmoid(T x) {
    if (x >= 0) {
        T z = std::exp(-x);
        return T(1) / (T(1) + z);
    }
    T z = std::exp(x);
    return z / (T(1) + z);
}

// log(1 + exp(x)) without overflow.
template <typename T>
T softplus(T x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    a.value().check_same(b.value(), "add");
    Tensor<T> out = a.value();
    out += b.value();
    return make_result(std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t i = 0; i < 2; ++i)
            if (auto* g = detail::parent_grad(self, i)) *g += self.grad;
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    a.value().check_same(b.value(), "sub");
    Tensor<T> out = a.value();
    out -= b.value();
    return make_result(std::move(out), {a, b}, [](Node<T>& self) {
        if (auto* g = detail::parent_grad(self, 0)) *g += self.grad;
        if (auto* g = detail::parent_grad(self, 1)) *g -= self.grad;
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    out *= s;
    return make_result(std::move(out), {a}, [s](Node<T>& self) {
        if (auto* g = detail::parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += s * self.grad[i];
        }
    });
}

/// Sum of any number of equally shaped values.
template <typename T>
Var<T> add_n(const std::vector<Var<T>>& xs) {
    detail::require(!xs.empty(), "add_n: empty input");
    Tensor<T> out = xs.front().value();
    for (std::size_t i = 1; i < xs.size(); ++i) out += xs[i].value();
    return make_result(std::move(out), xs, [](Node<T>& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i)
            if (auto* g = detail::parent_grad(self, i)) *g += self.grad;
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    a.value().check_same(b.value(), "mul");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * bv[i];
        if (auto* g = detail::parent_grad(self, 1))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * av[i];
    });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(0.1)) {
    Tensor<T> out = a.value();
    for (auto& v : out.vec()) v = v > 0 ? v : slope * v;
    return make_result(std::move(out), {a}, [slope](Node<T>& self) {
        const auto& x = self.parents[0]->value;
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * (x[i] > 0 ? T(1) : slope);
    });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    return leaky_relu(a, T(0));
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.vec()) v = detail::sigmoid(v);
    return make_result(std::move(out), {a}, [](Node<T>& self) {
        const auto& y = self.value;
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * y[i] * (T(1) - y[i]);
    });
}

/// Channel-wise concatenation of rank-3 maps sharing height and width.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    detail::require(!xs.empty(), "concat_channels: empty input");
    const int h = xs[0].value().height(), w = xs[0].value().width();
    int c = 0;
    for (const auto& x : xs) {
        detail::require(x.value().rank() == 3, "concat_channels: rank must be 3");
        if (x.value().height() != h) throw ShapeError("concat_channels: height mismatch");
        if (x.value().width() != w) throw ShapeError("concat_channels: width mismatch");
        c += x.value().channels();
    }
    Tensor<T> out({c, h, w});
    std::size_t off = 0;
    for (const auto& x : xs) {
        std::copy(x.value().vec().begin(), x.value().vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(off));
        off += x.value().numel();
    }
    return make_result(std::move(out), xs, [](Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            const std::size_t n = self.parents[i]->value.numel();
            if (auto* g = detail::parent_grad(self, i))
                for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[off + j];
            off += n;
        }
    });
}

/// Channels [start, start + count) of a rank-3 map.
template <typename T>
Var<T> slice_channels(const Var<T>& a, int start, int count) {
    const auto& v = a.value();
    detail::require(start >= 0 && count >= 1 && start + count <= v.channels(),
                    "slice_channels: channel range out of bounds");
    const std::size_t plane = static_cast<std::size_t>(v.height()) * v.width();
    Tensor<T> out({count, v.height(), v.width()});
    std::copy(v.channel(start), v.channel(start) + count * plane, out.data());
    return make_result(std::move(out), {a}, [start, plane](Node<T>& self) {
        if (auto* g = detail::parent_grad(self, 0)) {
            T* dst = g->channel(start);
            for (std::size_t j = 0; j < self.grad.numel(); ++j) dst[j] += self.grad[j];
        }
    });
}

/// Spatial mean per channel, kept as a c x 1 x 1 map so 1x1 convs apply.
template <typename T>
Var<T> global_avg_pool(const Var<T>& a) {
    const auto& v = a.value();
    const int c = v.channels();
    const std::size_t plane = static_cast<std::size_t>(v.height()) * v.width();
    Tensor<T> out({c, 1, 1});
    for (int k = 0; k < c; ++k) {
        T s = 0;
        const T* p = v.channel(k);
        for (std::size_t j = 0; j < plane; ++j) s += p[j];
        out[k] = s / static_cast<T>(plane);
    }
    return make_result(std::move(out), {a}, [plane](Node<T>& self) {
        if (auto* g = detail::parent_grad(self, 0)) {
            for (int k = 0; k < g->channels(); ++k) {
                const T d = self.grad[k] / static_cast<T>(plane);
                T* p = g->channel(k);
                for (std::size_t j = 0; j < plane; ++j) p[j] += d;
            }
        }
    });
}

/// x (c x h x w) times per-channel gate (c x 1 x 1).
template <typename T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& gate) {
    const auto& v = x.value();
    if (gate.value().numel() != static_cast<std::size_t>(v.channels()))
        throw ShapeError("scale_channels: gate has " + std::to_string(gate.value().numel()) + " channels, input has " +
                         std::to_string(v.channels()));
    const std::size_t plane = static_cast<std::size_t>(v.height()) * v.width();
    Tensor<T> out = v;
    for (int k = 0; k < v.channels(); ++k) {
        T* p = out.channel(k);
        const T s = gate.value()[k];
        for (std::size_t j = 0; j < plane; ++j) p[j] *= s;
    }
    return make_result(std::move(out), {x, gate}, [plane](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& gv = self.parents[1]->value;
        auto* gx = detail::parent_grad(self, 0);
        auto* gg = detail::parent_grad(self, 1);
        for (int k = 0; k < xv.channels(); ++k) {
            const T* dy = self.grad.channel(k);
            const T* xp = xv.channel(k);
            if (gx) {
                T* d = gx->channel(k);
                for (std::size_t j = 0; j < plane; ++j) d[j] += dy[j] * gv[k];
            }
            if (gg) {
                T s = 0;
                for (std::size_t j = 0; j < plane; ++j) s += dy[j] * xp[j];
                (*gg)[k] += s;
            }
        }
    });
}

/// x (c x h x w) times a spatial map (1 x h x w) broadcast over channels.
template <typename T>
Var<T> scale_spatial(const Var<T>& x, const Var<T>& map) {
    const auto& v = x.value();
    const auto& m = map.value();
    if (m.channels() != 1) throw ShapeError("scale_spatial: map must have 1 channel");
    if (m.height() != v.height()) throw ShapeError("scale_spatial: height mismatch");
    if (m.width() != v.width()) throw ShapeError("scale_spatial: width mismatch");
    const std::size_t plane = static_cast<std::size_t>(v.height()) * v.width();
    Tensor<T> out = v;
    for (int k = 0; k < v.channels(); ++k) {
        T* p = out.channel(k);
        for (std::size_t j = 0; j < plane; ++j) p[j] *= m[j];
    }
    return make_result(std::move(out), {x, map}, [plane](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& mv = self.parents[1]->value;
        auto* gx = detail::parent_grad(self, 0);
        auto* gm = detail::parent_grad(self, 1);
        for (int k = 0; k < xv.channels(); ++k) {
            const T* dy = self.grad.channel(k);
            const T* xp = xv.channel(k);
            if (gx) {
                T* d = gx->channel(k);
                for (std::size_t j = 0; j < plane; ++j) d[j] += dy[j] * mv[j];
            }
            if (gm)
                for (std::size_t j = 0; j < plane; ++j) (*gm)[j] += dy[j] * xp[j];
        }
    });
}

/// x times element `index` of `weights` (any shape), broadcast everywhere.
template <typename T>
Var<T> scale_by_element(const Var<T>& x, const Var<T>& weights, std::size_t index) {
    if (index >= weights.value().numel()) throw ShapeError("scale_by_element: index out of range");
    const T s = weights.value()[index];
    Tensor<T> out = x.value();
    out *= s;
    return make_result(std::move(out), {x, weights}, [index](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const T s = self.parents[1]->value[index];
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t j = 0; j < g->numel(); ++j) (*g)[j] += self.grad[j] * s;
        if (auto* g = detail::parent_grad(self, 1)) {
            T acc = 0;
            for (std::size_t j = 0; j < xv.numel(); ++j) acc += self.grad[j] * xv[j];
            (*g)[index] += acc;
        }
    });
}

/// Mean over channels -> 1 x h x w.
template <typename T>
Var<T> channel_mean(const Var<T>& x) {
    const auto& v = x.value();
    const std::size_t plane = static_cast<std::size_t>(v.height()) * v.width();
    Tensor<T> out({1, v.height(), v.width()});
    for (int k = 0; k < v.channels(); ++k) {
        const T* p = v.channel(k);
        for (std::size_t j = 0; j < plane; ++j) out[j] += p[j];
    }
    const T inv = T(1) / static_cast<T>(v.channels());
    out *= inv;
    return make_result(std::move(out), {x}, [plane, inv](Node<T>& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (int k = 0; k < g->channels(); ++k) {
                T* d = g->channel(k);
                for (std::size_t j = 0; j < plane; ++j) d[j] += self.grad[j] * inv;
            }
    });
}

/// Max over channels -> 1 x h x w. Gradient goes to the first arg-max.
template <typename T>
Var<T> channel_max(const Var<T>& x) {
    const auto& v = x.value();
    const std::size_t plane = static_cast<std::size_t>(v.height()) * v.width();
    Tensor<T> out({1, v.height(), v.width()});
    std::vector<int> arg(plane, 0);
    std::copy(v.channel(0), v.channel(0) + plane, out.data());
    for (int k = 1; k < v.channels(); ++k) {
        const T* p = v.channel(k);
        for (std::size_t j = 0; j < plane; ++j)
            if (p[j] > out[j]) {
                out[j] = p[j];
                arg[j] = k;
            }
    }
    return make_result(std::move(out), {x}, [arg = std::move(arg), plane](Node<T>& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t j = 0; j < plane; ++j) g->channel(arg[j])[j] += self.grad[j];
    });
}

namespace detail {

// Source index/weights for ×2 bilinear upsampling with half-pixel centres
// and edge clamping.
struct UpTap {
    int i0, i1;
    double w0, w1;
};

inline std::vector<UpTap> upsample_taps(int in, int out) {
    std::vector<UpTap> taps(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        int i0 = static_cast<int>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        const int i1 = std::min(i0 + 1, in - 1);
        const double l = src - i0;
        taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - l, l};
    }
    return taps;
}

}  // namespace detail

/// Bilinear ×2 upsampling of every channel.
template <typename T>
Var<T> upsample_bilinear2x(const Var<T>& x) {
    const auto& v = x.value();
    const int c = v.channels(), h = v.height(), w = v.width();
    const int H = 2 * h, W = 2 * w;
    auto ty = detail::upsample_taps(h, H);
    auto tx = detail::upsample_taps(w, W);
    Tensor<T> out({c, H, W});
    for (int k = 0; k < c; ++k)
        for (int y = 0; y < H; ++y) {
            const auto& a = ty[static_cast<std::size_t>(y)];
            for (int xx = 0; xx < W; ++xx) {
                const auto& b = tx[static_cast<std::size_t>(xx)];
                out.at(k, y, xx) = static_cast<T>(a.w0 * (b.w0 * v.at(k, a.i0, b.i0) + b.w1 * v.at(k, a.i0, b.i1)) +
                                                  a.w1 * (b.w0 * v.at(k, a.i1, b.i0) + b.w1 * v.at(k, a.i1, b.i1)));
            }
        }
    return make_result(std::move(out), {x}, [ty, tx, c, H, W](Node<T>& self) {
        auto* g = detail::parent_grad(self, 0);
        if (!g) return;
        for (int k = 0; k < c; ++k)
            for (int y = 0; y < H; ++y) {
                const auto& a = ty[static_cast<std::size_t>(y)];
                for (int xx = 0; xx < W; ++xx) {
                    const auto& b = tx[static_cast<std::size_t>(xx)];
                    const T d = self.grad.at(k, y, xx);
                    g->at(k, a.i0, b.i0) += static_cast<T>(a.w0 * b.w0) * d;
                    g->at(k, a.i0, b.i1) += static_cast<T>(a.w0 * b.w1) * d;
                    g->at(k, a.i1, b.i0) += static_cast<T>(a.w1 * b.w0) * d;
                    g->at(k, a.i1, b.i1) += static_cast<T>(a.w1 * b.w1) * d;
                }
            }
    });
}

/// Mean absolute difference, as a scalar.
template <typename T>
Var<T> l1_mean(const Var<T>& a, const Var<T>& b) {
    a.value().check_same(b.value(), "l1_mean");
    const std::size_t n = a.value().numel();
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += std::abs(a.value()[i] - b.value()[i]);
    Tensor<T> out({1}, s / static_cast<T>(n));
    return make_result(std::move(out), {a, b}, [n](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        const T d = self.grad[0] / static_cast<T>(n);
        auto* ga = detail::parent_grad(self, 0);
        auto* gb = detail::parent_grad(self, 1);
        for (std::size_t i = 0; i < n; ++i) {
            const T diff = av[i] - bv[i];
            const T sgn = diff > 0 ? T(1) : (diff < 0 ? T(-1) : T(0));
            if (ga) (*ga)[i] += d * sgn;
            if (gb) (*gb)[i] -= d * sgn;
        }
    });
}

/// Linear combination sum_i coeffs[i] * xs[i] of scalars.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, const std::vector<T>& coeffs) {
    detail::require(xs.size() == coeffs.size(), "weighted_sum: size mismatch");
    T s = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) s += coeffs[i] * xs[i].item();
    return make_result(Tensor<T>({1}, s), xs, [coeffs](Node<T>& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i)
            if (auto* g = detail::parent_grad(self, i)) (*g)[0] += coeffs[i] * self.grad[0];
    });
}

}  // namespace dfar
