#pragma once

#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfar/nn.hpp"

namespace dfar {

/// Raised when frame dimensions are not multiples of the total stride.
class ResizeRequiredError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct BackboneConfig {
    int levels = 3;
    int hidden_channels = 48;
    int out_channels = 64;
    int in_channels = 1;

    int stride() const { return 1 << levels; }
};

/// Three-level strided pyramid: each level is a 3x3 stride-1 conv followed by
/// a 3x3 stride-2 conv, both leaky-rectified. The last conv emits
/// `out_channels`; all others `hidden_channels`. Input kernels are
/// initialised with zero sum.
template <typename T>
class Backbone {
public:
    Backbone() = default;
    Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
        int in = cfg.in_channels;
        for (int l = 0; l < cfg.levels; ++l) {
            const int out = (l + 1 == cfg.levels) ? cfg.out_channels : cfg.hidden_channels;
            levels_.push_back({Conv2d<T>(ConvSpec::same(in, cfg.hidden_channels, 3), rng),
                               Conv2d<T>(ConvSpec{cfg.hidden_channels, out, 3, 2, 1}, rng)});
            in = out;
        }
        // Zero-sum input kernels: the first layer starts out responding to
        // local contrast rather than absolute brightness.
        auto& w = levels_.front().same.weight().mutable_value();
        const std::size_t per_filter = w.numel() / static_cast<std::size_t>(cfg.hidden_channels);
        for (std::size_t o = 0; o < static_cast<std::size_t>(cfg.hidden_channels); ++o) {
            T* k = w.data() + o * per_filter;
            const T mean = std::accumulate(k, k + per_filter, T(0)) / static_cast<T>(per_filter);
            for (std::size_t j = 0; j < per_filter; ++j) k[j] -= mean;
        }
    }

    /// One frame (in_channels x H x W) -> out_channels x H/8 x W/8.
    Var<T> operator()(const Var<T>& frame) const {
        const auto& s = frame.shape();
        const int stride = cfg_.stride();
        if (s.size() != 3 || s[0] != cfg_.in_channels)
            throw ShapeError("backbone expects a " + std::to_string(cfg_.in_channels) + "-channel frame, got " + shape_str(s));
        if (s[1] % stride != 0 || s[2] % stride != 0)
            throw ResizeRequiredError("frame " + std::to_string(s[2]) + "x" + std::to_string(s[1]) +
                                      " is not divisible by " + std::to_string(stride) + "; resize required");
        Var<T> x = frame;
        const T slope = static_cast<T>(kLeakySlope);
        for (const auto& lvl : levels_) {
            x = leaky_relu(lvl.same(x), slope);
            x = leaky_relu(lvl.down(x), slope);
        }
        return x;
    }

    /// Applies the same parameters to every frame of a clip.
    std::vector<Var<T>> extract_features(const std::vector<Var<T>>& frames) const {
        std::vector<Var<T>> out;
        out.reserve(frames.size());
        for (const auto& f : frames) out.push_back((*this)(f));
        return out;
    }

    const BackboneConfig& config() const noexcept { return cfg_; }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        for (std::size_t l = 0; l < levels_.size(); ++l) {
            const std::string p = prefix + "/level" + std::to_string(l + 1);
            levels_[l].same.collect(p + "/conv_s1", out);
            levels_[l].down.collect(p + "/conv_s2", out);
        }
    }

private:
    struct Level {
        Conv2d<T> same;
        Conv2d<T> down;
    };
    BackboneConfig cfg_;
    std::vector<Level> levels_;
};

}  // namespace dfar
