#pragma once

// Feature refinement: attention-weighted fusion of the aligned features with
// the target feature, followed by a stack of attention-guided deformable
// fusion (AGDF) blocks.

#include <string>
#include <vector>

#include "dfar/attention.hpp"

namespace dfar {

struct RefineConfig {
    int channels = 64;
    int frames = 5;
    int agdf_blocks = 4;
    int deform_groups = 32;
    int kernel = 3;
    int attention_reduction = 4;
    int fusion_hidden = 16;   // width of the first 1x1 conv of the weight branch
    bool use_afs = true;      // attention-weighted fusion; off -> concat + 1x1 conv
    bool use_agdf = true;     // AGDF stack; off -> plain 3x3 conv stack
    int plain_convs = 8;      // depth of the plain stack when use_agdf is off
};

// Initial weight gain for layers fed through a sigmoid gate (about 0.5 at
// initialisation), so activations keep their scale across stacked blocks.
inline constexpr double kGateGain = 2.0;

/// Concatenates features in temporal order, derives one sigmoid weight per
/// frame from the pooled fused feature, rescales each frame by its weight and
/// fuses the rescaled stack with a 1x1 bottleneck.
template <typename T>
class AdaptiveFusion {
public:
    AdaptiveFusion() = default;
    AdaptiveFusion(int channels, int frames, int hidden, Rng& rng) : channels_(channels), frames_(frames) {
        fuse_ = Conv2d<T>(ConvSpec{frames * channels, channels, 1}, rng, Init::Uniform);
        weight_hidden_ = Conv2d<T>(ConvSpec{channels, hidden, 1}, rng);
        weight_out_ = Conv2d<T>(ConvSpec{hidden, frames, 1}, rng, Init::Uniform);
        bottleneck_ = Conv2d<T>(ConvSpec{frames * channels, channels, 1}, rng);
        bottleneck_.weight().mutable_value() *= static_cast<T>(kGateGain);
    }

    /// Per-frame weights in (0, 1), shape frames x 1 x 1.
    Var<T> frame_weights(const std::vector<Var<T>>& stack) const {
        check(stack);
        Var<T> fused = fuse_(concat_channels(stack));
        return sigmoid(weight_out_(relu(weight_hidden_(global_avg_pool(fused)))));
    }

    /// The rescaled features for explicit weights (frames x 1 x 1).
    std::vector<Var<T>> modulate(const std::vector<Var<T>>& stack, const Var<T>& weights) const {
        check(stack);
        if (weights.value().numel() != stack.size())
            throw ShapeError("adaptive fusion: " + std::to_string(weights.value().numel()) + " weights for " +
                             std::to_string(stack.size()) + " frames");
        std::vector<Var<T>> out;
        for (std::size_t i = 0; i < stack.size(); ++i) out.push_back(scale_by_element(stack[i], weights, i));
        return out;
    }

    Var<T> fuse_with_weights(const std::vector<Var<T>>& stack, const Var<T>& weights) const {
        return leaky_relu(bottleneck_(concat_channels(modulate(stack, weights))), static_cast<T>(kLeakySlope));
    }

    Var<T> operator()(const std::vector<Var<T>>& stack) const { return fuse_with_weights(stack, frame_weights(stack)); }

    Conv2d<T>& fuse() noexcept { return fuse_; }
    Conv2d<T>& weight_hidden() noexcept { return weight_hidden_; }
    Conv2d<T>& weight_out() noexcept { return weight_out_; }
    Conv2d<T>& bottleneck() noexcept { return bottleneck_; }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        fuse_.collect(prefix + "/fuse", out);
        weight_hidden_.collect(prefix + "/weight_hidden", out);
        weight_out_.collect(prefix + "/weight_out", out);
        bottleneck_.collect(prefix + "/bottleneck", out);
    }

private:
    void check(const std::vector<Var<T>>& stack) const {
        if (static_cast<int>(stack.size()) != frames_)
            throw ShapeError("adaptive fusion: expected " + std::to_string(frames_) + " features, got " +
                             std::to_string(stack.size()));
        for (const auto& f : stack)
            if (f.value().rank() != 3 || f.value().channels() != channels_ || f.shape() != stack.front().shape())
                throw ShapeError("adaptive fusion: feature shape " + shape_str(f.shape()) + " inconsistent");
    }

    int channels_ = 0;
    int frames_ = 0;
    Conv2d<T> fuse_;
    Conv2d<T> weight_hidden_;
    Conv2d<T> weight_out_;
    Conv2d<T> bottleneck_;
};

/// Combines the full-resolution head output with the ×2-upsampled
/// half-resolution head output. Offsets from the coarse level are doubled
/// (one coarse pixel spans two fine pixels); mask logits from both levels are
/// summed before the sigmoid.
template <typename T>
OffsetField<T> fuse_offset_pyramid(const Var<T>& fine_raw, const Var<T>& coarse_raw, int deform_groups, int kernel) {
    const int n_off = deform_groups * 2 * kernel * kernel;
    const int n_mask = deform_groups * kernel * kernel;
    Var<T> coarse_up = upsample_bilinear2x(coarse_raw);
    if (coarse_up.shape() != fine_raw.shape())
        throw ShapeError("offset pyramid: fine " + shape_str(fine_raw.shape()) + " vs upsampled coarse " +
                         shape_str(coarse_up.shape()));
    Var<T> offsets = add(slice_channels(fine_raw, 0, n_off), scale(slice_channels(coarse_up, 0, n_off), T(2)));
    Var<T> masks = sigmoid(add(slice_channels(fine_raw, n_off, n_mask), slice_channels(coarse_up, n_off, n_mask)));
    return {offsets, masks};
}

/// Attention-guided deformable fusion block (no skip connection).
template <typename T>
class AgdfBlock {
public:
    AgdfBlock() = default;
    AgdfBlock(int channels, int deform_groups, int kernel, int reduction, Rng& rng)
        : channels_(channels), deform_groups_(deform_groups), kernel_(kernel) {
        const int half = channels / 2;
        const int head_out = deform_groups * 3 * kernel * kernel;
        reduce_ = Conv2d<T>(ConvSpec::same(channels, half, 3), rng);
        spatial_ = SpatialAttention<T>(rng);
        channel_ = ChannelAttention<T>(half, reduction, rng);
        combine_ = Conv2d<T>(ConvSpec{channels, half, 1}, rng);
        fine_head_ = Conv2d<T>(ConvSpec::same(half, head_out, kernel), rng, Init::Zero);
        down_ = Conv2d<T>(ConvSpec{half, half, 3, 2, 1}, rng);
        coarse_head_ = Conv2d<T>(ConvSpec::same(half, head_out, kernel), rng, Init::Zero);
        deform_ = DeformConv2d<T>(ConvSpec{half, half, kernel, 1, kernel / 2, 1, 1, deform_groups}, rng);
        expand_ = Conv2d<T>(ConvSpec::same(half, channels, 3), rng);
        combine_.weight().mutable_value() *= static_cast<T>(kGateGain);
        deform_.weight().mutable_value() *= static_cast<T>(kGateGain);
    }

    OffsetField<T> offsets_for(const Var<T>& mixed) const {
        return fuse_offset_pyramid(fine_head_(mixed), coarse_head_(leaky_relu(down_(mixed), static_cast<T>(kLeakySlope))),
                                   deform_groups_, kernel_);
    }

    /// Attention-mixed half-width feature (input of the deformable stage).
    Var<T> mix(const Var<T>& x) const {
        const auto& s = x.shape();
        if (s.size() != 3 || s[0] != channels_)
            throw ShapeError("AGDF block: expected " + std::to_string(channels_) + " channels, got " + shape_str(s));
        if (s[1] % 2 != 0 || s[2] % 2 != 0)
            throw ShapeError("AGDF block: spatial dims must be even, got " + shape_str(s));
        const T slope = static_cast<T>(kLeakySlope);
        Var<T> h = leaky_relu(reduce_(x), slope);
        return leaky_relu(combine_(concat_channels<T>({spatial_(h), channel_(h)})), slope);
    }

    Var<T> operator()(const Var<T>& x, OffsetField<T>* field_out = nullptr) const {
        const T slope = static_cast<T>(kLeakySlope);
        Var<T> mixed = mix(x);
        OffsetField<T> field = offsets_for(mixed);
        Var<T> y = leaky_relu(deform_(mixed, field), slope);
        if (field_out) *field_out = field;
        return leaky_relu(expand_(y), slope);
    }

    Conv2d<T>& fine_head() noexcept { return fine_head_; }
    Conv2d<T>& coarse_head() noexcept { return coarse_head_; }
    DeformConv2d<T>& deform() noexcept { return deform_; }
    Conv2d<T>& expand() noexcept { return expand_; }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        reduce_.collect(prefix + "/reduce", out);
        spatial_.collect(prefix + "/spatial_attention", out);
        channel_.collect(prefix + "/channel_attention", out);
        combine_.collect(prefix + "/combine", out);
        fine_head_.collect(prefix + "/offset_head_full", out);
        down_.collect(prefix + "/downsample", out);
        coarse_head_.collect(prefix + "/offset_head_half", out);
        deform_.collect(prefix + "/deform", out);
        expand_.collect(prefix + "/expand", out);
    }

private:
    int channels_ = 0;
    int deform_groups_ = 0;
    int kernel_ = 3;
    Conv2d<T> reduce_;
    SpatialAttention<T> spatial_;
    ChannelAttention<T> channel_;
    Conv2d<T> combine_;
    Conv2d<T> fine_head_;
    Conv2d<T> down_;
    Conv2d<T> coarse_head_;
    DeformConv2d<T> deform_;
    Conv2d<T> expand_;
};

/// Adaptive fusion (or its concat ablation) followed by the AGDF stack (or
/// its plain-conv ablation).
template <typename T>
class FeatureRefinement {
public:
    FeatureRefinement() = default;
    FeatureRefinement(const RefineConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.use_afs)
            afs_ = AdaptiveFusion<T>(cfg.channels, cfg.frames, cfg.fusion_hidden, rng);
        else
            concat_fuse_ = Conv2d<T>(ConvSpec{cfg.frames * cfg.channels, cfg.channels, 1}, rng);
        if (cfg.use_agdf) {
            for (int i = 0; i < cfg.agdf_blocks; ++i)
                agdf_.emplace_back(cfg.channels, cfg.deform_groups, cfg.kernel, cfg.attention_reduction, rng);
        } else {
            for (int i = 0; i < cfg.plain_convs; ++i) plain_.emplace_back(ConvSpec::same(cfg.channels, cfg.channels, 3), rng);
        }
    }

    /// `stack` holds all 2R+1 features in temporal order: aligned adjacent
    /// features with the target feature at its own position.
    Var<T> coarse(const std::vector<Var<T>>& stack) const {
        if (cfg_.use_afs) return afs_(stack);
        if (static_cast<int>(stack.size()) != cfg_.frames)
            throw ShapeError("refine: expected " + std::to_string(cfg_.frames) + " features, got " +
                             std::to_string(stack.size()));
        return leaky_relu(concat_fuse_(concat_channels(stack)), static_cast<T>(kLeakySlope));
    }

    Var<T> operator()(const std::vector<Var<T>>& stack) const {
        Var<T> x = coarse(stack);
        for (const auto& b : agdf_) x = b(x);
        for (const auto& c : plain_) x = leaky_relu(c(x), static_cast<T>(kLeakySlope));
        return x;
    }

    const RefineConfig& config() const noexcept { return cfg_; }
    AdaptiveFusion<T>& adaptive_fusion() noexcept { return afs_; }
    std::vector<AgdfBlock<T>>& agdf_blocks() noexcept { return agdf_; }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        if (cfg_.use_afs)
            afs_.collect(prefix + "/fusion", out);
        else
            concat_fuse_.collect(prefix + "/concat_fuse", out);
        for (std::size_t i = 0; i < agdf_.size(); ++i) agdf_[i].collect(prefix + "/agdf" + std::to_string(i + 1), out);
        for (std::size_t i = 0; i < plain_.size(); ++i) plain_[i].collect(prefix + "/conv" + std::to_string(i + 1), out);
    }

    /// Parameters of the block stack only (AGDF or its replacement).
    std::size_t block_parameter_count() const {
        ParamList<T> p;
        for (std::size_t i = 0; i < agdf_.size(); ++i) agdf_[i].collect("b", p);
        for (std::size_t i = 0; i < plain_.size(); ++i) plain_[i].collect("b", p);
        return parameter_count(p);
    }

private:
    RefineConfig cfg_;
    AdaptiveFusion<T> afs_;
    Conv2d<T> concat_fuse_;
    std::vector<AgdfBlock<T>> agdf_;
    std::vector<Conv2d<T>> plain_;
};

}  // namespace dfar
