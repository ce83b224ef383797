#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dfar/conv.hpp"
#include "dfar/deform_conv.hpp"

namespace dfar {

using Rng = std::mt19937_64;

/// Named parameters, keyed by "module/submodule/layer/{weight,bias}".
template <typename T>
using ParamList = std::vector<std::pair<std::string, Var<T>>>;

enum class Init {
    He,        // normal, std = sqrt(2 / ((1 + a^2) * fan_in)) with leaky slope a
    Uniform,   // U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    Zero,
};

inline constexpr double kLeakySlope = 0.1;

template <typename T>
Tensor<T> init_weight(const Shape& shape, Init init, Rng& rng) {
    const int fan_in = shape[1] * shape[2] * shape[3];
    switch (init) {
        case Init::He: {
            const double std = std::sqrt(2.0 / ((1.0 + kLeakySlope * kLeakySlope) * fan_in));
            return Tensor<T>::normal(shape, T(0), static_cast<T>(std), rng);
        }
        case Init::Uniform: {
            const T b = static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in)));
            return Tensor<T>::uniform(shape, -b, b, rng);
        }
        case Init::Zero:
            break;
    }
    return Tensor<T>::zeros(shape);
}

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(ConvSpec spec, Rng& rng, Init init = Init::He, bool with_bias = true) : spec_(spec) {
        spec_.validate();
        weight_ = Var<T>::parameter(init_weight<T>(spec_.weight_shape(), init, rng));
        if (with_bias) bias_ = Var<T>::parameter(Tensor<T>::zeros({spec_.out_channels}));
    }

    Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight_, bias_, spec_); }

    const ConvSpec& spec() const noexcept { return spec_; }
    Var<T>& weight() noexcept { return weight_; }
    Var<T>& bias() noexcept { return bias_; }
    const Var<T>& weight() const noexcept { return weight_; }
    const Var<T>& bias() const noexcept { return bias_; }

    void zero_init() {
        weight_.mutable_value().fill(T(0));
        if (bias_.defined()) bias_.mutable_value().fill(T(0));
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.emplace_back(prefix + "/weight", weight_);
        if (bias_.defined()) out.emplace_back(prefix + "/bias", bias_);
    }

private:
    ConvSpec spec_;
    Var<T> weight_;
    Var<T> bias_;
};

/// Deformable convolution layer; offsets and masks come from the caller.
template <typename T>
class DeformConv2d {
public:
    DeformConv2d() = default;
    DeformConv2d(ConvSpec spec, Rng& rng, Init init = Init::He) : spec_(spec) {
        spec_.validate();
        weight_ = Var<T>::parameter(init_weight<T>(spec_.weight_shape(), init, rng));
        bias_ = Var<T>::parameter(Tensor<T>::zeros({spec_.out_channels}));
    }

    Var<T> operator()(const Var<T>& x, const OffsetField<T>& field) const {
        return deform_conv2d(x, weight_, bias_, field, spec_);
    }

    /// Centre tap of channel c -> channel c set to one, everything else zero.
    /// Requires in == out channels and an odd kernel.
    void identity_init() {
        if (spec_.in_channels != spec_.out_channels || spec_.groups != 1)
            throw ShapeError("identity_init needs in == out channels and groups == 1");
        auto& w = weight_.mutable_value();
        w.fill(T(0));
        const int c0 = spec_.kernel / 2;
        for (int c = 0; c < spec_.out_channels; ++c) w.at(c, c, c0, c0) = T(1);
        bias_.mutable_value().fill(T(0));
    }

    const ConvSpec& spec() const noexcept { return spec_; }
    Var<T>& weight() noexcept { return weight_; }
    Var<T>& bias() noexcept { return bias_; }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.emplace_back(prefix + "/weight", weight_);
        out.emplace_back(prefix + "/bias", bias_);
    }

private:
    ConvSpec spec_;
    Var<T> weight_;
    Var<T> bias_;
};

/// Splits a raw offset-head output into offsets and sigmoid masks.
/// The first d*2K^2 channels are offsets, the remaining d*K^2 mask logits.
template <typename T>
OffsetField<T> split_offset_head(const Var<T>& raw, int deform_groups, int kernel) {
    const int kk = kernel * kernel;
    const int n_off = deform_groups * 2 * kk, n_mask = deform_groups * kk;
    if (raw.value().channels() != n_off + n_mask)
        throw ShapeError("offset head channels: expected " + std::to_string(n_off + n_mask) + ", got " +
                         std::to_string(raw.value().channels()));
    return {slice_channels(raw, 0, n_off), sigmoid(slice_channels(raw, n_off, n_mask))};
}

template <typename T>
std::size_t parameter_count(const ParamList<T>& params) {
    std::size_t n = 0;
    for (const auto& [name, v] : params) n += v.value().numel();
    return n;
}

}  // namespace dfar
