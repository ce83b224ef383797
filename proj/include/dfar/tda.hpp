#pragma once

// Temporal deformable alignment: predict a per-pixel offset field from the
// (target, adjacent) feature pair and warp the adjacent feature onto the
// target with a modulated deformable convolution.

#include <string>
#include <vector>

#include "dfar/attention.hpp"

namespace dfar {

struct TdaConfig {
    int channels = 64;
    int dcaf_blocks = 4;
    int deform_groups = 8;
    int kernel = 3;
    double residual_scale = 0.2;
    int attention_reduction = 4;
    // Alignment deformable conv starts as a per-channel identity (centre tap).
    bool identity_alignment_init = true;

    int offset_channels() const { return deform_groups * 2 * kernel * kernel; }
    int mask_channels() const { return deform_groups * kernel * kernel; }
};

/// Dilated-convolution attention fusion block.
///
/// 3x3 conv halves the channels, four parallel 3x3 convs with dilation 1..4
/// run on the halved map, their outputs are accumulated hierarchically
/// (branch j's running sum is added to branch j+1), the four running sums are
/// concatenated with the block input, gated by channel attention, projected
/// back by a 1x1 conv, scaled, and added to the input.
template <typename T>
class DcafBlock {
public:
    static constexpr int kBranches = 4;

    DcafBlock() = default;
    DcafBlock(int channels, double residual_scale, int reduction, Rng& rng)
        : channels_(channels), scale_(static_cast<T>(residual_scale)) {
        if (channels % 2 != 0) throw ShapeError("DCAF block needs an even channel count");
        const int half = channels / 2;
        reduce_ = Conv2d<T>(ConvSpec::same(channels, half, 3), rng);
        for (int d = 1; d <= kBranches; ++d) dilated_.emplace_back(ConvSpec::same(half, half, 3, d), rng);
        attention_ = ChannelAttention<T>(kBranches * half + channels, reduction, rng);
        project_ = Conv2d<T>(ConvSpec{kBranches * half + channels, channels, 1}, rng, Init::Uniform);
    }

    /// Residual branch before scaling.
    Var<T> branch(const Var<T>& x) const {
        if (x.value().channels() != channels_)
            throw ShapeError("DCAF block: expected " + std::to_string(channels_) + " channels, got " +
                             std::to_string(x.value().channels()));
        const T slope = static_cast<T>(kLeakySlope);
        Var<T> h = leaky_relu(reduce_(x), slope);
        std::vector<Var<T>> parts;
        Var<T> running;
        for (const auto& conv : dilated_) {
            Var<T> b = leaky_relu(conv(h), slope);
            running = running.defined() ? add(running, b) : b;
            parts.push_back(running);
        }
        parts.push_back(x);
        return project_(attention_(concat_channels(parts)));
    }

    Var<T> operator()(const Var<T>& x) const { return add(x, scale(branch(x), scale_)); }

    std::vector<Conv2d<T>>& dilated() noexcept { return dilated_; }
    ChannelAttention<T>& attention() noexcept { return attention_; }

    /// Every weight and bias of the block set to zero.
    void zero_all() {
        reduce_.zero_init();
        for (auto& c : dilated_) c.zero_init();
        attention_.squeeze().zero_init();
        attention_.excite().zero_init();
        project_.zero_init();
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        reduce_.collect(prefix + "/reduce", out);
        for (std::size_t i = 0; i < dilated_.size(); ++i) dilated_[i].collect(prefix + "/dilated" + std::to_string(i + 1), out);
        attention_.collect(prefix + "/attention", out);
        project_.collect(prefix + "/project", out);
    }

private:
    int channels_ = 0;
    T scale_ = T(0.2);
    Conv2d<T> reduce_;
    std::vector<Conv2d<T>> dilated_;
    ChannelAttention<T> attention_;
    Conv2d<T> project_;
};

/// Offset-field predictor: conv([target; adjacent]) -> DCAF^n -> offset head.
/// The head is zero-initialised so the first field is all-zero offsets with
/// masks of 0.5.
template <typename T>
class AlignmentPredictor {
public:
    AlignmentPredictor() = default;
    AlignmentPredictor(const TdaConfig& cfg, Rng& rng) : cfg_(cfg) {
        fuse_ = Conv2d<T>(ConvSpec::same(2 * cfg.channels, cfg.channels, 3), rng);
        for (int i = 0; i < cfg.dcaf_blocks; ++i)
            blocks_.emplace_back(cfg.channels, cfg.residual_scale, cfg.attention_reduction, rng);
        head_ = Conv2d<T>(ConvSpec::same(cfg.channels, cfg.offset_channels() + cfg.mask_channels(), cfg.kernel), rng,
                          Init::Zero);
    }

    OffsetField<T> operator()(const Var<T>& f_adj, const Var<T>& f_tgt) const {
        if (f_adj.shape() != f_tgt.shape())
            throw ShapeError("alignment: adjacent " + shape_str(f_adj.shape()) + " vs target " + shape_str(f_tgt.shape()));
        Var<T> h = leaky_relu(fuse_(concat_channels<T>({f_tgt, f_adj})), static_cast<T>(kLeakySlope));
        for (const auto& b : blocks_) h = b(h);
        return split_offset_head(head_(h), cfg_.deform_groups, cfg_.kernel);
    }

    Conv2d<T>& head() noexcept { return head_; }
    std::vector<DcafBlock<T>>& blocks() noexcept { return blocks_; }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        fuse_.collect(prefix + "/fuse", out);
        for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + "/dcaf" + std::to_string(i + 1), out);
        head_.collect(prefix + "/offset_head", out);
    }

private:
    TdaConfig cfg_;
    Conv2d<T> fuse_;
    std::vector<DcafBlock<T>> blocks_;
    Conv2d<T> head_;
};

/// Aligned features plus the fields that produced them.
template <typename T>
struct AlignedClip {
    std::vector<Var<T>> features;       // 2R entries, temporal order, target excluded
    std::vector<OffsetField<T>> fields;
};

template <typename T>
class TemporalAlignment {
public:
    TemporalAlignment() = default;
    TemporalAlignment(const TdaConfig& cfg, Rng& rng) : cfg_(cfg), predictor_(cfg, rng) {
        align_ = DeformConv2d<T>(ConvSpec{cfg.channels, cfg.channels, cfg.kernel, 1, cfg.kernel / 2, 1, 1, cfg.deform_groups},
                                 rng);
        if (cfg.identity_alignment_init) align_.identity_init();
    }

    OffsetField<T> predict_alignment_params(const Var<T>& f_adj, const Var<T>& f_tgt) const {
        return predictor_(f_adj, f_tgt);
    }

    Var<T> align_frame(const Var<T>& f_adj, const Var<T>& f_tgt, OffsetField<T>* field_out = nullptr) const {
        OffsetField<T> field = predictor_(f_adj, f_tgt);
        Var<T> out = align_(f_adj, field);
        if (field_out) *field_out = field;
        return out;
    }

    /// Aligns every non-target feature to features[t] with shared parameters.
    AlignedClip<T> align_clip(const std::vector<Var<T>>& features, int t) const {
        if (t < 0 || t >= static_cast<int>(features.size()))
            throw std::out_of_range("align_clip: target index " + std::to_string(t) + " outside clip of " +
                                    std::to_string(features.size()));
        AlignedClip<T> out;
        for (int i = 0; i < static_cast<int>(features.size()); ++i) {
            if (i == t) continue;
            OffsetField<T> field;
            out.features.push_back(align_frame(features[static_cast<std::size_t>(i)], features[static_cast<std::size_t>(t)], &field));
            out.fields.push_back(std::move(field));
        }
        return out;
    }

    const TdaConfig& config() const noexcept { return cfg_; }
    AlignmentPredictor<T>& predictor() noexcept { return predictor_; }
    DeformConv2d<T>& alignment_conv() noexcept { return align_; }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        predictor_.collect(prefix + "/predictor", out);
        align_.collect(prefix + "/align", out);
    }

private:
    TdaConfig cfg_;
    AlignmentPredictor<T> predictor_;
    DeformConv2d<T> align_;
};

}  // namespace dfar
