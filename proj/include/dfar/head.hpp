#pragma once

// Anchor-free single-scale detection head plus its post-processing and
// training targets. Boxes are (x1, y1, x2, y2) in network-input pixels.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "dfar/log.hpp"
#include "dfar/nn.hpp"

namespace dfar {

struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
    bool valid() const { return x1 < x2 && y1 < y2; }
    friend bool operator==(const Box&, const Box&) = default;
};

struct Detection {
    Box box;
    double score = 0;
    int class_id = 0;
    int grid_index = -1;   // row-major cell the detection was decoded from
};

/// Raw head maps. reg holds log-distances (l, t, r, b) in stride units;
/// exp() of them is the non-negative distance.
template <typename T>
struct HeadOutput {
    Var<T> cls;   // 1 x h x w logits
    Var<T> obj;   // 1 x h x w logits
    Var<T> reg;   // 4 x h x w

    int height() const { return cls.value().height(); }
    int width() const { return cls.value().width(); }
};

inline const double kPriorLogit = -std::log((1.0 - 0.01) / 0.01);

/// Decoupled head: a 1x1 stem to `width`, then a classification branch and a
/// regression branch of two 3x3 convs each. The regression branch feeds both
/// the box and the objectness predictors. Final predictors start at zero with
/// a 0.01 prior on the classification and objectness biases.
template <typename T>
class DetectHead {
public:
    DetectHead() = default;
    DetectHead(int in_channels, int width, Rng& rng) : in_channels_(in_channels) {
        stem_ = Conv2d<T>(ConvSpec{in_channels, width, 1}, rng);
        for (int i = 0; i < 2; ++i) {
            cls_convs_.emplace_back(ConvSpec::same(width, width, 3), rng);
            reg_convs_.emplace_back(ConvSpec::same(width, width, 3), rng);
        }
        cls_pred_ = Conv2d<T>(ConvSpec{width, 1, 1}, rng, Init::Zero);
        reg_pred_ = Conv2d<T>(ConvSpec{width, 4, 1}, rng, Init::Zero);
        obj_pred_ = Conv2d<T>(ConvSpec{width, 1, 1}, rng, Init::Zero);
        cls_pred_.bias().mutable_value().fill(static_cast<T>(kPriorLogit));
        obj_pred_.bias().mutable_value().fill(static_cast<T>(kPriorLogit));
    }

    HeadOutput<T> operator()(const Var<T>& f) const {
        if (f.value().rank() != 3 || f.value().channels() != in_channels_)
            throw ShapeError("detection head: expected " + std::to_string(in_channels_) + " channels, got " +
                             shape_str(f.shape()));
        const T slope = static_cast<T>(kLeakySlope);
        Var<T> x = leaky_relu(stem_(f), slope);
        Var<T> c = x, r = x;
        for (const auto& conv : cls_convs_) c = leaky_relu(conv(c), slope);
        for (const auto& conv : reg_convs_) r = leaky_relu(conv(r), slope);
        return {cls_pred_(c), obj_pred_(r), reg_pred_(r)};
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        stem_.collect(prefix + "/stem", out);
        for (std::size_t i = 0; i < cls_convs_.size(); ++i) cls_convs_[i].collect(prefix + "/cls_conv" + std::to_string(i + 1), out);
        for (std::size_t i = 0; i < reg_convs_.size(); ++i) reg_convs_[i].collect(prefix + "/reg_conv" + std::to_string(i + 1), out);
        cls_pred_.collect(prefix + "/cls_pred", out);
        reg_pred_.collect(prefix + "/reg_pred", out);
        obj_pred_.collect(prefix + "/obj_pred", out);
    }

private:
    int in_channels_ = 0;
    Conv2d<T> stem_;
    std::vector<Conv2d<T>> cls_convs_;
    std::vector<Conv2d<T>> reg_convs_;
    Conv2d<T> cls_pred_;
    Conv2d<T> reg_pred_;
    Conv2d<T> obj_pred_;
};

/// Box from a cell and (l, t, r, b) distances in stride units.
inline Box decode_box(int row, int col, double l, double t, double r, double b, int stride) {
    const double cx = (col + 0.5) * stride, cy = (row + 0.5) * stride;
    return {cx - l * stride, cy - t * stride, cx + r * stride, cy + b * stride};
}

/// Every location with sigmoid(obj) * sigmoid(cls) >= conf_thresh, unclipped.
template <typename T>
std::vector<Detection> decode(const HeadOutput<T>& out, int stride, double conf_thresh) {
    const int h = out.height(), w = out.width();
    const auto& cls = out.cls.value();
    const auto& obj = out.obj.value();
    const auto& reg = out.reg.value();
    std::vector<Detection> dets;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double score = detail::sigmoid(static_cast<double>(obj.at(0, i, j))) *
                                 detail::sigmoid(static_cast<double>(cls.at(0, i, j)));
            if (score < conf_thresh) continue;
            Detection d;
            d.box = decode_box(i, j, std::exp(static_cast<double>(reg.at(0, i, j))), std::exp(static_cast<double>(reg.at(1, i, j))),
                               std::exp(static_cast<double>(reg.at(2, i, j))), std::exp(static_cast<double>(reg.at(3, i, j))), stride);
            d.score = score;
            d.grid_index = i * w + j;
            dets.push_back(d);
        }
    return dets;
}

/// Intersection over union; 0 (with a warning) if either box has no area.
inline double iou(const Box& a, const Box& b) {
    if (!a.valid() || !b.valid()) {
        warn("iou: degenerate box");
        return 0.0;
    }
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    return inter / (a.area() + b.area() - inter);
}

/// Greedy score-descending suppression; equal scores keep the lower grid index first.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.grid_index < b.grid_index;
    });
    std::vector<Detection> keep;
    for (const auto& d : dets) {
        bool suppressed = false;
        for (const auto& k : keep)
            if (iou(d.box, k.box) > iou_thresh) {
                suppressed = true;
                break;
            }
        if (!suppressed) keep.push_back(d);
    }
    return keep;
}

/// Positive cells and the ground truth each one regresses to.
struct Assignment {
    int height = 0, width = 0, stride = 8;
    std::vector<int> owner;   // per cell: index into `boxes`, -1 for background
    std::vector<Box> boxes;   // ground truth after clipping

    int num_positive() const {
        return static_cast<int>(std::count_if(owner.begin(), owner.end(), [](int o) { return o >= 0; }));
    }
    bool positive(int row, int col) const { return owner[static_cast<std::size_t>(row * width + col)] >= 0; }

    /// (l, t, r, b) distances in stride units from the cell centre to its box.
    std::array<double, 4> reg_target(int row, int col) const {
        const Box& g = boxes[static_cast<std::size_t>(owner[static_cast<std::size_t>(row * width + col)])];
        const double cx = (col + 0.5) * stride, cy = (row + 0.5) * stride;
        return {(cx - g.x1) / stride, (cy - g.y1) / stride, (g.x2 - cx) / stride, (g.y2 - cy) / stride};
    }
};

inline constexpr double kCenterRadius = 1.5;   // in cells

/// A cell is positive when its centre lies strictly inside a ground-truth box
/// or within kCenterRadius cells (Euclidean) of the box centre. Cells claimed
/// by several boxes go to the smallest one.
inline Assignment assign_targets(const std::vector<Box>& gt, int height, int width, int stride = 8) {
    Assignment a;
    a.height = height;
    a.width = width;
    a.stride = stride;
    a.owner.assign(static_cast<std::size_t>(height) * width, -1);
    const double W = static_cast<double>(width) * stride, H = static_cast<double>(height) * stride;
    for (Box g : gt) {
        if (g.x1 < 0 || g.y1 < 0 || g.x2 > W || g.y2 > H) {
            warn("assign_targets: ground truth box outside the image, clipped");
            g = {std::clamp(g.x1, 0.0, W), std::clamp(g.y1, 0.0, H), std::clamp(g.x2, 0.0, W), std::clamp(g.y2, 0.0, H)};
        }
        if (!g.valid()) {
            warn("assign_targets: degenerate ground truth box dropped");
            continue;
        }
        a.boxes.push_back(g);
    }
    std::vector<std::size_t> order(a.boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t l, std::size_t r) { return a.boxes[l].area() < a.boxes[r].area(); });
    const double r2 = (kCenterRadius * stride) * (kCenterRadius * stride);
    for (int i = 0; i < height; ++i)
        for (int j = 0; j < width; ++j) {
            const double cx = (j + 0.5) * stride, cy = (i + 0.5) * stride;
            for (std::size_t k : order) {
                const Box& g = a.boxes[k];
                const bool inside = cx > g.x1 && cx < g.x2 && cy > g.y1 && cy < g.y2;
                const double dx = cx - g.cx(), dy = cy - g.cy();
                if (inside || dx * dx + dy * dy <= r2) {
                    a.owner[static_cast<std::size_t>(i * width + j)] = static_cast<int>(k);
                    break;
                }
            }
        }
    return a;
}

template <typename T>
struct DetectionLosses {
    Var<T> reg;
    Var<T> cls;
    Var<T> obj;
};

namespace detail {

// IoU between the box decoded from log-distances at a cell and a target box,
// with its gradient with respect to the four log-distances.
template <typename T>
T iou_with_grad(const std::array<T, 4>& raw, double cx, double cy, int stride, const Box& g, std::array<T, 4>& grad) {
    const T s = static_cast<T>(stride);
    const T el = std::exp(raw[0]), et = std::exp(raw[1]), er = std::exp(raw[2]), eb = std::exp(raw[3]);
    const T px1 = static_cast<T>(cx) - s * el, py1 = static_cast<T>(cy) - s * et;
    const T px2 = static_cast<T>(cx) + s * er, py2 = static_cast<T>(cy) + s * eb;
    const T gx1 = static_cast<T>(g.x1), gy1 = static_cast<T>(g.y1), gx2 = static_cast<T>(g.x2), gy2 = static_cast<T>(g.y2);
    const T pw = px2 - px1, ph = py2 - py1;
    const T ap = pw * ph, ag = (gx2 - gx1) * (gy2 - gy1);
    const T iw = std::min(px2, gx2) - std::max(px1, gx1);
    const T ih = std::min(py2, gy2) - std::max(py1, gy1);
    const bool overlap = iw > 0 && ih > 0;
    const T inter = overlap ? iw * ih : T(0);
    const T uni = ap + ag - inter;
    const T value = inter / uni;
    // d(inter)/d(px1, py1, px2, py2)
    T di[4] = {0, 0, 0, 0};
    if (overlap) {
        if (px1 > gx1) di[0] = -ih;
        if (py1 > gy1) di[1] = -iw;
        if (px2 < gx2) di[2] = ih;
        if (py2 < gy2) di[3] = iw;
    }
    const T dap[4] = {-ph, -pw, ph, pw};
    const T dcoord[4] = {-s * el, -s * et, s * er, s * eb};   // d(px1, py1, px2, py2)/d(raw)
    for (int k = 0; k < 4; ++k) {
        const T du = dap[k] - di[k];
        const T d = (di[k] * uni - inter * du) / (uni * uni);
        grad[static_cast<std::size_t>(k)] = d * dcoord[k];
    }
    return value;
}

}  // namespace detail

/// Regression (1 - IoU), classification BCE over positives against the IoU of
/// the predicted box, objectness BCE over every cell. Each term is summed and
/// divided by max(#positives, 1); with no positives the regression and
/// classification terms are exactly 0.
template <typename T>
DetectionLosses<T> detection_loss(const HeadOutput<T>& out, const Assignment& a) {
    const int h = out.height(), w = out.width();
    if (h != a.height || w != a.width)
        throw ShapeError("detection_loss: head grid " + std::to_string(h) + "x" + std::to_string(w) +
                         " vs assignment grid " + std::to_string(a.height) + "x" + std::to_string(a.width));
    const int npos = a.num_positive();
    const T norm = static_cast<T>(std::max(npos, 1));

    // Objectness: BCE with logits against the positive mask.
    const auto& obj = out.obj.value();
    T lobj = 0;
    for (int p = 0; p < h * w; ++p) {
        const T z = obj[static_cast<std::size_t>(p)];
        const T t = a.owner[static_cast<std::size_t>(p)] >= 0 ? T(1) : T(0);
        lobj += detail::softplus(z) - t * z;
    }
    Var<T> obj_loss = make_result(Tensor<T>({1}, lobj / norm), {out.obj}, [owner = a.owner, norm](Node<T>& self) {
        const auto& z = self.parents[0]->value;
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t p = 0; p < owner.size(); ++p) {
                const T t = owner[p] >= 0 ? T(1) : T(0);
                (*g)[p] += self.grad[0] * (detail::sigmoid(z[p]) - t) / norm;
            }
    });

    if (npos == 0) return {scalar_var(T(0)), scalar_var(T(0)), obj_loss};

    const auto& reg = out.reg.value();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    T lreg = 0;
    std::vector<T> dreg(4 * plane, T(0));
    std::vector<T> quality(plane, T(0));
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const std::size_t p = static_cast<std::size_t>(i * w + j);
            if (a.owner[p] < 0) continue;
            std::array<T, 4> raw{reg[p], reg[plane + p], reg[2 * plane + p], reg[3 * plane + p]};
            std::array<T, 4> g{};
            const T v = detail::iou_with_grad(raw, (j + 0.5) * a.stride, (i + 0.5) * a.stride, a.stride,
                                              a.boxes[static_cast<std::size_t>(a.owner[p])], g);
            quality[p] = std::clamp(v, T(0), T(1));
            lreg += T(1) - v;
            for (std::size_t k = 0; k < 4; ++k) dreg[k * plane + p] = -g[k] / norm;
        }
    Var<T> reg_loss = make_result(Tensor<T>({1}, lreg / norm), {out.reg}, [dreg = std::move(dreg)](Node<T>& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t k = 0; k < dreg.size(); ++k) (*g)[k] += self.grad[0] * dreg[k];
    });

    // Classification target is the (constant) IoU of the predicted box.
    const auto& cls = out.cls.value();
    T lcls = 0;
    for (std::size_t p = 0; p < plane; ++p)
        if (a.owner[p] >= 0) lcls += detail::softplus(cls[p]) - quality[p] * cls[p];
    Var<T> cls_loss = make_result(Tensor<T>({1}, lcls / norm), {out.cls}, [owner = a.owner, quality = std::move(quality), norm](Node<T>& self) {
        const auto& z = self.parents[0]->value;
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t p = 0; p < owner.size(); ++p)
                if (owner[p] >= 0) (*g)[p] += self.grad[0] * (detail::sigmoid(z[p]) - quality[p]) / norm;
    });
    return {reg_loss, cls_loss, obj_loss};
}

}  // namespace dfar
