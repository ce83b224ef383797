#pragma once

#include <string>

#include "dfar/nn.hpp"

namespace dfar {

/// Squeeze-and-excitation style channel gate:
///   out = x * sigmoid(W2 relu(W1 GAP(x) + b1) + b2), gate broadcast over space.
template <typename T>
class ChannelAttention {
public:
    ChannelAttention() = default;
    ChannelAttention(int channels, int reduction, Rng& rng) {
        if (reduction < 1 || channels % reduction != 0)
            throw ShapeError("channel attention: reduction " + std::to_string(reduction) + " does not divide " +
                             std::to_string(channels) + " channels");
        squeeze_ = Conv2d<T>(ConvSpec{channels, channels / reduction, 1}, rng, Init::He);
        excite_ = Conv2d<T>(ConvSpec{channels / reduction, channels, 1}, rng, Init::Uniform);
    }

    /// The c x 1 x 1 gate, each entry in (0, 1).
    Var<T> gate(const Var<T>& x) const { return sigmoid(excite_(relu(squeeze_(global_avg_pool(x))))); }

    Var<T> operator()(const Var<T>& x) const { return scale_channels(x, gate(x)); }

    Conv2d<T>& squeeze() noexcept { return squeeze_; }
    Conv2d<T>& excite() noexcept { return excite_; }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        squeeze_.collect(prefix + "/squeeze", out);
        excite_.collect(prefix + "/excite", out);
    }

private:
    Conv2d<T> squeeze_;
    Conv2d<T> excite_;
};

/// Spatial gate: out = x * sigmoid(conv7x7([mean_c(x); max_c(x)])), broadcast
/// over channels.
template <typename T>
class SpatialAttention {
public:
    static constexpr int kKernel = 7;

    SpatialAttention() = default;
    explicit SpatialAttention(Rng& rng) : conv_(ConvSpec::same(2, 1, kKernel), rng, Init::Uniform) {}

    Var<T> attention_map(const Var<T>& x) const {
        return sigmoid(conv_(concat_channels<T>({channel_mean(x), channel_max(x)})));
    }

    Var<T> operator()(const Var<T>& x) const { return scale_spatial(x, attention_map(x)); }

    Conv2d<T>& conv() noexcept { return conv_; }

    void collect(const std::string& prefix, ParamList<T>& out) const { conv_.collect(prefix + "/conv", out); }

private:
    Conv2d<T> conv_;
};

/// Per-channel spatial mean of a plain tensor.
template <typename T>
std::vector<T> global_avg_pool(const Tensor<T>& x) {
    std::vector<T> out(static_cast<std::size_t>(x.channels()), T(0));
    const std::size_t plane = static_cast<std::size_t>(x.height()) * x.width();
    for (int c = 0; c < x.channels(); ++c) {
        const T* p = x.channel(c);
        T s = 0;
        for (std::size_t j = 0; j < plane; ++j) s += p[j];
        out[static_cast<std::size_t>(c)] = s / static_cast<T>(plane);
    }
    return out;
}

}  // namespace dfar
