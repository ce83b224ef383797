#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfar/head.hpp"

namespace dfar {

/// Score-ordered detections of one frame with their true-positive flags.
struct FrameMatch {
    std::vector<double> scores;   // descending
    std::vector<bool> tp;
    int num_gt = 0;

    int true_positives() const { return static_cast<int>(std::count(tp.begin(), tp.end(), true)); }
    int false_negatives() const { return num_gt - true_positives(); }
};

using MatchResult = std::vector<FrameMatch>;

inline constexpr double kMatchIou = 0.5;

/// Greedy in descending score: each detection takes the highest-IoU unmatched
/// ground truth with IoU >= iou_thresh, otherwise it is a false positive.
inline FrameMatch match_detections(std::vector<Detection> dets, const std::vector<Box>& gts, double iou_thresh = kMatchIou) {
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    FrameMatch m;
    m.num_gt = static_cast<int>(gts.size());
    std::vector<bool> used(gts.size(), false);
    for (const auto& d : dets) {
        int best = -1;
        double best_iou = iou_thresh;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (used[g]) continue;
            const double v = iou(d.box, gts[g]);
            if (v >= best_iou && (best < 0 || v > best_iou)) {
                best = static_cast<int>(g);
                best_iou = v;
            }
        }
        if (best >= 0) used[static_cast<std::size_t>(best)] = true;
        m.scores.push_back(d.score);
        m.tp.push_back(best >= 0);
    }
    return m;
}

struct PrF1 {
    double precision = 1, recall = 1, f1 = 0;
    int tp = 0, fp = 0, fn = 0;
};

/// Precision/recall/F1 counting detections with score >= conf_thresh.
/// No detections gives precision 1, no ground truth gives recall 1.
inline PrF1 compute_pr_f1(const MatchResult& matches, double conf_thresh) {
    PrF1 r;
    int gt = 0;
    for (const auto& m : matches) {
        gt += m.num_gt;
        for (std::size_t i = 0; i < m.scores.size(); ++i) {
            if (m.scores[i] < conf_thresh) continue;
            if (m.tp[i])
                ++r.tp;
            else
                ++r.fp;
        }
    }
    r.fn = gt - r.tp;
    r.precision = (r.tp + r.fp) ? static_cast<double>(r.tp) / (r.tp + r.fp) : 1.0;
    r.recall = gt ? static_cast<double>(r.tp) / gt : 1.0;
    r.f1 = (r.precision + r.recall) > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

struct PrPoint {
    double threshold;   // score cut; +inf for the anchor
    double recall;
    double precision;
    double envelope;    // max precision at this or any higher recall
};

/// One point per distinct score (ties enter together), preceded by the
/// (recall 0, precision 1) anchor.
inline std::vector<PrPoint> pr_curve(const MatchResult& matches) {
    std::vector<std::pair<double, bool>> pooled;
    int gt = 0;
    for (const auto& m : matches) {
        gt += m.num_gt;
        for (std::size_t i = 0; i < m.scores.size(); ++i) pooled.emplace_back(m.scores[i], m.tp[i]);
    }
    std::stable_sort(pooled.begin(), pooled.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<PrPoint> pts{{std::numeric_limits<double>::infinity(), 0.0, 1.0, 1.0}};
    int tp = 0, n = 0;
    for (std::size_t i = 0; i < pooled.size(); ++i) {
        ++n;
        if (pooled[i].second) ++tp;
        if (i + 1 < pooled.size() && pooled[i + 1].first == pooled[i].first) continue;
        pts.push_back({pooled[i].first, gt ? static_cast<double>(tp) / gt : 0.0, static_cast<double>(tp) / n, 0.0});
    }
    double env = 0;
    for (std::size_t k = pts.size(); k-- > 0;) {
        env = std::max(env, pts[k].precision);
        pts[k].envelope = env;
    }
    return pts;
}

/// All-point interpolated average precision of the curve.
inline double integrate_envelope(const std::vector<PrPoint>& pts) {
    double ap = 0;
    for (std::size_t k = 1; k < pts.size(); ++k) ap += (pts[k].recall - pts[k - 1].recall) * pts[k].envelope;
    return ap;
}

/// Single-class AP at IoU 0.5; 0 when there is no ground truth.
inline double compute_map50(const MatchResult& matches) { return integrate_envelope(pr_curve(matches)); }

inline void export_pr_curve(const MatchResult& matches, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write PR curve to " + path.string());
    out << "threshold,recall,precision,envelope\n";
    char buf[160];
    for (const auto& p : pr_curve(matches)) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", p.threshold, p.recall, p.precision, p.envelope);
        out << buf;
    }
}

/// A detection tagged with its frame.
struct DetectionRecord {
    std::string sequence_id;
    int frame_index = 0;
    Detection det;
};

/// `sequence_id frame_index x1 y1 x2 y2 score` per line.
inline void write_detections(std::ostream& out, const std::vector<DetectionRecord>& recs) {
    char buf[256];
    for (const auto& r : recs) {
        std::snprintf(buf, sizeof buf, " %d %.4f %.4f %.4f %.4f %.6f\n", r.frame_index, r.det.box.x1, r.det.box.y1,
                      r.det.box.x2, r.det.box.y2, r.det.score);
        out << r.sequence_id << buf;
    }
}

inline std::vector<DetectionRecord> read_detections(std::istream& in, const std::string& source = "<detections>") {
    std::vector<DetectionRecord> recs;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ss(line);
        DetectionRecord r;
        std::string extra;
        if (!(ss >> r.sequence_id >> r.frame_index >> r.det.box.x1 >> r.det.box.y1 >> r.det.box.x2 >> r.det.box.y2 >> r.det.score) ||
            (ss >> extra))
            throw std::runtime_error(source + ":" + std::to_string(lineno) + ": malformed detection line");
        recs.push_back(r);
    }
    return recs;
}

struct SequenceMetrics {
    double map50 = 0;
    PrF1 prf;
    int frames = 0, gts = 0, detections = 0;
};

struct EvaluationReport {
    SequenceMetrics overall;
    std::map<std::string, SequenceMetrics> per_sequence;
    MatchResult matches;   // every frame, sequence order
};

/// Ground truth per (sequence, frame); detections for unknown sequences or
/// frames are an error.
inline EvaluationReport evaluate(const std::vector<DetectionRecord>& recs,
                                 const std::map<std::string, std::vector<std::vector<Box>>>& gt, double report_conf,
                                 double iou_thresh = kMatchIou) {
    std::map<std::string, std::vector<std::vector<Detection>>> by_frame;
    for (const auto& [id, frames] : gt) by_frame[id].resize(frames.size());
    for (const auto& r : recs) {
        auto it = by_frame.find(r.sequence_id);
        if (it == by_frame.end()) throw std::runtime_error("detections reference unknown sequence '" + r.sequence_id + "'");
        if (r.frame_index < 0 || r.frame_index >= static_cast<int>(it->second.size()))
            throw std::runtime_error("detections reference frame " + std::to_string(r.frame_index) + " outside sequence '" +
                                     r.sequence_id + "'");
        it->second[static_cast<std::size_t>(r.frame_index)].push_back(r.det);
    }
    EvaluationReport rep;
    for (const auto& [id, frames] : gt) {
        MatchResult seq;
        SequenceMetrics sm;
        for (std::size_t f = 0; f < frames.size(); ++f) {
            const auto& dets = by_frame[id][f];
            seq.push_back(match_detections(dets, frames[f], iou_thresh));
            sm.gts += static_cast<int>(frames[f].size());
            sm.detections += static_cast<int>(dets.size());
        }
        sm.frames = static_cast<int>(frames.size());
        sm.map50 = compute_map50(seq);
        sm.prf = compute_pr_f1(seq, report_conf);
        rep.overall.frames += sm.frames;
        rep.overall.gts += sm.gts;
        rep.overall.detections += sm.detections;
        rep.matches.insert(rep.matches.end(), seq.begin(), seq.end());
        rep.per_sequence[id] = sm;
    }
    rep.overall.map50 = compute_map50(rep.matches);
    rep.overall.prf = compute_pr_f1(rep.matches, report_conf);
    return rep;
}

}  // namespace dfar
