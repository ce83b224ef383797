#pragma once

// End-to-end drivers shared by the command-line tool and the tests.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dfar/checkpoint.hpp"
#include "dfar/data.hpp"
#include "dfar/evaluation.hpp"
#include "dfar/model.hpp"
#include "dfar/optim.hpp"

namespace dfar {

/// A sequence resized to the network input once, frames already tensors.
template <typename T>
struct PreparedSequence {
    std::string id;
    std::vector<Var<T>> frames;           // 1 x size x size, values in [0, 1]
    std::vector<std::vector<Box>> boxes;  // network-input pixels
    int width = 0, height = 0;            // original resolution

    int size() const { return static_cast<int>(frames.size()); }
};

/// Same frames and boxes as resize_clip applied to every clip of `seq`.
template <typename T>
PreparedSequence<T> prepare_sequence(const Sequence& seq, int input_size) {
    PreparedSequence<T> p;
    p.id = seq.id;
    p.width = seq.width();
    p.height = seq.height();
    for (int t = 0; t < seq.size(); ++t) {
        VideoClip one = resize_clip(sample_clip(seq, t, 0), input_size);
        p.frames.push_back(constant(frame_tensor<T>(one.frames.front())));
        p.boxes.push_back(one.boxes);
    }
    return p;
}

template <typename T>
std::vector<PreparedSequence<T>> prepare_dataset(const std::vector<Sequence>& seqs, int input_size) {
    std::vector<PreparedSequence<T>> out;
    for (const auto& s : seqs) out.push_back(prepare_sequence<T>(s, input_size));
    return out;
}

template <typename T>
std::vector<Var<T>> clip_frames(const PreparedSequence<T>& seq, const std::vector<int>& indices) {
    std::vector<Var<T>> out;
    for (int k : indices) out.push_back(seq.frames[static_cast<std::size_t>(k)]);
    return out;
}

struct LossRecord {
    long long iter = 0;
    double total = 0, reg = 0, cls = 0, obj = 0, mc = 0;
};

inline std::string to_json_line(const LossRecord& r) {
    nlohmann::ordered_json j{{"iter", r.iter}, {"total", r.total}, {"reg", r.reg}, {"cls", r.cls}, {"obj", r.obj}, {"mc", r.mc}};
    return j.dump();
}

class TrainingAborted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainOptions {
    std::filesystem::path out_dir;                          // checkpoints; empty disables them
    std::ostream* loss_log = nullptr;                       // one JSON record per iteration
    std::function<void(const LossRecord&)> on_iteration;
};

struct TrainResult {
    long long iterations = 0;
    int epochs_completed = 0;
    std::filesystem::path last_checkpoint;
    double seconds = 0;
};

inline std::string rng_state(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

/// Adam over every (sequence, frame) pair per epoch, `batch_size` clips per
/// step with gradients averaged over the batch.
template <typename T>
TrainResult train_model(DfarModel<T>& model, const std::vector<PreparedSequence<T>>& data, const TrainOptions& opts) {
    const TrainConfig& cfg = model.config();
    const auto t0 = std::chrono::steady_clock::now();
    Adam<T> opt(model.parameters(), AdamConfig{cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps});
    const LossWeights weights = model.loss_weights();
    std::seed_seq ss{static_cast<unsigned>(cfg.seed & 0xffffffffu), static_cast<unsigned>(cfg.seed >> 32), 0xda7au};
    Rng order_rng(ss);

    std::vector<std::pair<int, int>> pairs;
    for (std::size_t s = 0; s < data.size(); ++s)
        for (int t = 0; t < data[s].size(); ++t) pairs.emplace_back(static_cast<int>(s), t);
    if (pairs.empty()) throw std::invalid_argument("training set is empty");
    if (!opts.out_dir.empty()) std::filesystem::create_directories(opts.out_dir);

    TrainResult res;
    auto checkpoint = [&](const std::string& name) {
        if (opts.out_dir.empty()) return;
        const auto path = opts.out_dir / name;
        save_checkpoint(path, CheckpointMeta{cfg, res.iterations, rng_state(order_rng)}, model.parameters());
        res.last_checkpoint = path;
    };

    const int B = cfg.batch_size;
    bool done = false;
    for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
        if (cfg.shuffle) std::shuffle(pairs.begin(), pairs.end(), order_rng);
        for (std::size_t start = 0; start < pairs.size() && !done; start += static_cast<std::size_t>(B)) {
            const std::size_t end = std::min(pairs.size(), start + static_cast<std::size_t>(B));
            const T inv = T(1) / static_cast<T>(end - start);
            opt.zero_grad();
            LossRecord rec;
            rec.iter = res.iterations + 1;
            for (std::size_t k = start; k < end; ++k) {
                const auto& seq = data[static_cast<std::size_t>(pairs[k].first)];
                const int t = pairs[k].second;
                ModelOutput<T> out = model.forward(clip_frames(seq, clip_indices(seq.size(), t, cfg.radius())));
                LossTerms<T> terms = model.losses(out, seq.boxes[static_cast<std::size_t>(t)]);
                Var<T> total;
                try {
                    total = total_loss(terms, weights);
                } catch (const NonFiniteLossError& e) {
                    throw TrainingAborted(std::string(e.what()) + " at iteration " + std::to_string(rec.iter) + "; last good checkpoint: " +
                                          (res.last_checkpoint.empty() ? std::string("none") : res.last_checkpoint.string()));
                }
                rec.total += static_cast<double>(total.item()) * inv;
                rec.reg += static_cast<double>(terms.reg.item()) * inv;
                rec.cls += static_cast<double>(terms.cls.item()) * inv;
                rec.obj += static_cast<double>(terms.obj.item()) * inv;
                rec.mc += static_cast<double>(terms.mc.item()) * inv;
                backward(scale(total, inv));
            }
            opt.step();
            ++res.iterations;
            if (opts.loss_log) *opts.loss_log << to_json_line(rec) << '\n' << std::flush;
            if (opts.on_iteration) opts.on_iteration(rec);
            if (cfg.max_iters > 0 && res.iterations >= cfg.max_iters) done = true;
        }
        if (!done) {
            res.epochs_completed = epoch + 1;
            checkpoint("checkpoint_epoch" + std::to_string(epoch + 1) + ".dfar");
        }
    }
    if (done) checkpoint("checkpoint_iter" + std::to_string(res.iterations) + ".dfar");
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

/// Called once per inferred clip with the source frame indices.
using ClipObserver = std::function<void(const std::string& sequence_id, int frame, const std::vector<int>& indices)>;

/// Detections for every frame of every sequence, in sequence then frame
/// order, in original-image pixels.
template <typename T>
std::vector<DetectionRecord> run_inference(const DfarModel<T>& model, const std::vector<PreparedSequence<T>>& data,
                                           double conf_thresh, const ClipObserver& observer = {}) {
    const TrainConfig& cfg = model.config();
    NoGradGuard ng;
    std::vector<DetectionRecord> recs;
    for (const auto& seq : data) {
        const double sx = static_cast<double>(seq.width) / cfg.input_size, sy = static_cast<double>(seq.height) / cfg.input_size;
        std::vector<Var<T>> feats;
        for (const auto& f : seq.frames) feats.push_back(model.frame_features(f));
        for (int t = 0; t < seq.size(); ++t) {
            const auto idx = clip_indices(seq.size(), t, cfg.radius());
            if (observer) observer(seq.id, t, idx);
            std::vector<Var<T>> clip;
            for (int k : idx) clip.push_back(feats[static_cast<std::size_t>(k)]);
            ModelOutput<T> out = model.forward_features(std::move(clip));
            for (Detection d : model.detect(out, conf_thresh)) {
                d.box = {std::clamp(d.box.x1 * sx, 0.0, double(seq.width)), std::clamp(d.box.y1 * sy, 0.0, double(seq.height)),
                         std::clamp(d.box.x2 * sx, 0.0, double(seq.width)), std::clamp(d.box.y2 * sy, 0.0, double(seq.height))};
                if (!d.box.valid()) continue;
                recs.push_back({seq.id, t, d});
            }
        }
    }
    return recs;
}

inline std::map<std::string, std::vector<std::vector<Box>>> ground_truth(const std::vector<Sequence>& seqs) {
    std::map<std::string, std::vector<std::vector<Box>>> gt;
    for (const auto& s : seqs) gt[s.id] = s.boxes;
    return gt;
}

inline nlohmann::json metrics_json(const SequenceMetrics& m) {
    return {{"map50", m.map50}, {"precision", m.prf.precision}, {"recall", m.prf.recall}, {"f1", m.prf.f1},
            {"tp", m.prf.tp}, {"fp", m.prf.fp}, {"fn", m.prf.fn}, {"frames", m.frames}, {"gts", m.gts},
            {"detections", m.detections}};
}

inline nlohmann::json report_json(const EvaluationReport& r, double conf) {
    nlohmann::json j = metrics_json(r.overall);
    j["conf_thresh"] = conf;
    j["iou_thresh"] = kMatchIou;
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [id, m] : r.per_sequence) per[id] = metrics_json(m);
    j["per_sequence"] = per;
    return j;
}

/// Builds a model from a checkpoint's stored config and loads its weights.
template <typename T>
DfarModel<T> load_model(const std::filesystem::path& ckpt, CheckpointMeta* meta_out = nullptr) {
    CheckpointMeta meta = read_checkpoint_meta(ckpt);
    DfarModel<T> model(meta.config);
    ParamList<T> params = model.parameters();
    load_checkpoint(ckpt, params);
    if (meta_out) *meta_out = meta;
    return model;
}

/// Channel mean scaled so its minimum maps to 0 and maximum to 255
/// (a constant map becomes all zeros).
template <typename T>
cv::Mat heatmap(const Tensor<T>& feature) {
    const int h = feature.height(), w = feature.width(), c = feature.channels();
    cv::Mat mean(h, w, CV_64F, cv::Scalar(0));
    for (int k = 0; k < c; ++k)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) mean.at<double>(y, x) += static_cast<double>(feature.at(k, y, x)) / c;
    double lo = 0, hi = 0;
    cv::minMaxLoc(mean, &lo, &hi);
    cv::Mat out(h, w, CV_8U, cv::Scalar(0));
    if (hi > lo)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                out.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(std::lround(255.0 * (mean.at<double>(y, x) - lo) / (hi - lo)));
    return out;
}

/// Writes feature heatmaps for the clip centred on `frame` plus a detection
/// overlay; returns the written files.
///   feature_<k>.png   backbone feature of clip slot k (adjacent slots only)
///   aligned_<k>.png   aligned adjacent feature (with alignment enabled)
///   target.png        backbone feature of the target frame
///   overlay.png       target frame, ground truth green, detections red
template <typename T>
std::vector<std::filesystem::path> export_visualization(const DfarModel<T>& model, const Sequence& seq, int frame,
                                                        const std::filesystem::path& out_dir) {
    const TrainConfig& cfg = model.config();
    if (frame < 0 || frame >= seq.size())
        throw std::out_of_range("frame " + std::to_string(frame) + " outside sequence " + seq.id + " of " + std::to_string(seq.size()));
    VideoClip clip = resize_clip(sample_clip(seq, frame, cfg.radius()), cfg.input_size);
    NoGradGuard ng;
    ModelOutput<T> out = model.forward(clip_tensors<T>(clip));
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> files;
    auto write = [&](const std::string& name, const cv::Mat& img) {
        const auto p = out_dir / name;
        if (!cv::imwrite(p.string(), img)) throw std::runtime_error("cannot write " + p.string());
        files.push_back(p);
    };
    int slot = 0;
    for (int k = 0; k < static_cast<int>(out.features.size()); ++k) {
        if (k == out.target_index) continue;
        write("feature_" + std::to_string(k) + ".png", heatmap(out.features[static_cast<std::size_t>(k)].value()));
        if (!out.aligned.empty()) write("aligned_" + std::to_string(k) + ".png", heatmap(out.aligned[static_cast<std::size_t>(slot)].value()));
        ++slot;
    }
    write("target.png", heatmap(out.features[static_cast<std::size_t>(out.target_index)].value()));

    const cv::Mat& src = seq.frames[static_cast<std::size_t>(frame)];
    cv::Mat gray8, overlay;
    src.convertTo(gray8, CV_8U, src.depth() == CV_16U ? 1.0 / 257.0 : 1.0);
    cv::cvtColor(gray8, overlay, cv::COLOR_GRAY2BGR);
    const double sx = static_cast<double>(seq.width()) / cfg.input_size, sy = static_cast<double>(seq.height()) / cfg.input_size;
    auto rect = [](const Box& b) {
        return cv::Rect(cv::Point(static_cast<int>(std::floor(b.x1)), static_cast<int>(std::floor(b.y1))),
                        cv::Point(static_cast<int>(std::ceil(b.x2)), static_cast<int>(std::ceil(b.y2))));
    };
    for (const Box& g : seq.boxes[static_cast<std::size_t>(frame)]) cv::rectangle(overlay, rect(g), cv::Scalar(0, 255, 0));
    for (const Detection& d : model.detect(out, cfg.conf_thresh))
        cv::rectangle(overlay, rect(Box{d.box.x1 * sx, d.box.y1 * sy, d.box.x2 * sx, d.box.y2 * sy}), cv::Scalar(0, 0, 255));
    write("overlay.png", overlay);
    return files;
}

}  // namespace dfar
