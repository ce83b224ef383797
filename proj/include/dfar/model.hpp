#pragma once

// Full detector: backbone -> (temporal alignment) -> (refinement | baseline
// fusion) -> detection head. The ablation switches in TrainConfig select
// which stages are present.

#include <string>
#include <vector>

#include "dfar/backbone.hpp"
#include "dfar/config.hpp"
#include "dfar/head.hpp"
#include "dfar/losses.hpp"
#include "dfar/refine.hpp"
#include "dfar/tda.hpp"

namespace dfar {

template <typename T>
struct ModelOutput {
    HeadOutput<T> head;
    std::vector<Var<T>> features;   // backbone output per frame, temporal order
    std::vector<Var<T>> aligned;    // 2R aligned features; empty without alignment
    std::vector<OffsetField<T>> fields;
    Var<T> fused;                   // head input
    int target_index = 0;
};

inline BackboneConfig backbone_config(const TrainConfig& c) {
    BackboneConfig b;
    b.hidden_channels = c.backbone_filters;
    b.out_channels = c.feature_channels;
    return b;
}

inline TdaConfig tda_config(const TrainConfig& c) {
    TdaConfig t;
    t.channels = c.feature_channels;
    t.dcaf_blocks = c.dcaf_blocks;
    t.deform_groups = c.tda_deform_groups;
    t.kernel = c.kernel;
    t.residual_scale = c.dcaf_residual_scale;
    t.attention_reduction = c.attention_reduction;
    return t;
}

inline RefineConfig refine_config(const TrainConfig& c) {
    RefineConfig r;
    r.channels = c.feature_channels;
    r.frames = c.frames;
    r.agdf_blocks = c.agdf_blocks;
    r.deform_groups = c.fr_deform_groups;
    r.kernel = c.kernel;
    r.attention_reduction = c.attention_reduction;
    r.fusion_hidden = c.fusion_hidden;
    r.use_afs = c.afs;
    r.use_agdf = c.agdf;
    r.plain_convs = c.plain_convs;
    return r;
}

template <typename T>
class DfarModel {
public:
    static constexpr int kStride = 8;

    explicit DfarModel(const TrainConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        // One stream per stage so ablation variants share the initialisation of common stages.
        auto stream = [&](unsigned stage) {
            std::seed_seq seq{static_cast<unsigned>(cfg.seed & 0xffffffffu), static_cast<unsigned>(cfg.seed >> 32), stage};
            return Rng(seq);
        };
        Rng r_backbone = stream(1), r_tda = stream(2), r_fuse = stream(3), r_head = stream(4);
        backbone_ = Backbone<T>(backbone_config(cfg_), r_backbone);
        if (cfg_.tda) tda_ = TemporalAlignment<T>(tda_config(cfg_), r_tda);
        int head_in = cfg_.feature_channels;
        if (cfg_.uses_refinement()) {
            refine_ = FeatureRefinement<T>(refine_config(cfg_), r_fuse);
        } else {
            baseline_ = Conv2d<T>(ConvSpec::same(cfg_.frames * cfg_.feature_channels, cfg_.baseline_filters, 3), r_fuse);
            head_in = cfg_.baseline_filters;
        }
        head_ = DetectHead<T>(head_in, cfg_.head_width, r_head);
    }

    /// `frames` holds 2R+1 single-channel frames with the target in the centre.
    ModelOutput<T> forward(const std::vector<Var<T>>& frames) const {
        if (static_cast<int>(frames.size()) != cfg_.frames)
            throw ShapeError("model expects " + std::to_string(cfg_.frames) + " frames, got " + std::to_string(frames.size()));
        return forward_features(backbone_.extract_features(frames));
    }

    /// Backbone output of one frame; lets callers reuse it across clips.
    Var<T> frame_features(const Var<T>& frame) const { return backbone_(frame); }

    /// Everything after the backbone, given the 2R+1 per-frame features.
    ModelOutput<T> forward_features(std::vector<Var<T>> features) const {
        if (static_cast<int>(features.size()) != cfg_.frames)
            throw ShapeError("model expects " + std::to_string(cfg_.frames) + " feature maps, got " + std::to_string(features.size()));
        ModelOutput<T> out;
        out.target_index = cfg_.radius();
        out.features = std::move(features);
        std::vector<Var<T>> stack;
        if (cfg_.tda) {
            AlignedClip<T> a = tda_.align_clip(out.features, out.target_index);
            out.aligned = a.features;
            out.fields = std::move(a.fields);
            stack = out.aligned;
            stack.insert(stack.begin() + out.target_index, out.features[static_cast<std::size_t>(out.target_index)]);
        } else {
            stack = out.features;
        }
        if (cfg_.uses_refinement())
            out.fused = refine_(stack);
        else
            out.fused = leaky_relu(baseline_(concat_channels(stack)), static_cast<T>(kLeakySlope));
        out.head = head_(out.fused);
        return out;
    }

    /// Detection terms against `gt` (network-input pixels) plus the
    /// motion-compensation term (zero without alignment).
    LossTerms<T> losses(const ModelOutput<T>& out, const std::vector<Box>& gt) const {
        const Assignment a = assign_targets(gt, out.head.height(), out.head.width(), kStride);
        DetectionLosses<T> d = detection_loss(out.head, a);
        Var<T> mc = cfg_.tda ? motion_compensation_loss(out.aligned, out.features[static_cast<std::size_t>(out.target_index)])
                             : scalar_var(T(0));
        return {d.reg, d.cls, d.obj, mc};
    }

    LossWeights loss_weights() const { return {cfg_.lambda_reg, cfg_.effective_eta()}; }

    /// Decoded, suppressed detections in network-input pixels.
    std::vector<Detection> detect(const ModelOutput<T>& out, double conf_thresh) const {
        return nms(decode(out.head, kStride, conf_thresh), cfg_.nms_iou);
    }

    /// Every trainable parameter, keyed `module/submodule/layer/{weight,bias}`.
    ParamList<T> parameters() const {
        ParamList<T> p;
        backbone_.collect("backbone", p);
        if (cfg_.tda) tda_.collect("tda", p);
        if (cfg_.uses_refinement())
            refine_.collect("refine", p);
        else
            baseline_.collect("fusion/baseline", p);
        head_.collect("head", p);
        return p;
    }

    const TrainConfig& config() const noexcept { return cfg_; }
    TemporalAlignment<T>& alignment() noexcept { return tda_; }
    FeatureRefinement<T>& refinement() noexcept { return refine_; }

private:
    TrainConfig cfg_;
    Backbone<T> backbone_;
    TemporalAlignment<T> tda_;
    FeatureRefinement<T> refine_;
    Conv2d<T> baseline_;
    DetectHead<T> head_;
};

}  // namespace dfar
