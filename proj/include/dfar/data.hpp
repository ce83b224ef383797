#pragma once

// Sequences on disk:
//
//   root/<sequence_id>/frames/000000.png, 000001.png, ...   8- or 16-bit grayscale
//   root/<sequence_id>/annotations.csv                      frame_index,x1,y1,x2,y2
//
// Box coordinates are pixels with x2/y2 exclusive.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dfar/head.hpp"
#include "dfar/log.hpp"

namespace dfar {

namespace fs = std::filesystem;

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Sequence {
    std::string id;
    std::vector<cv::Mat> frames;              // CV_8UC1 or CV_16UC1
    std::vector<std::vector<Box>> boxes;      // per frame

    int size() const { return static_cast<int>(frames.size()); }
    int width() const { return frames.empty() ? 0 : frames.front().cols; }
    int height() const { return frames.empty() ? 0 : frames.front().rows; }
};

struct VideoClip {
    std::vector<cv::Mat> frames;    // 2R+1, temporal order
    int target_index = 0;           // always R
    std::vector<Box> boxes;         // ground truth of the target frame
    std::string sequence_id;
    int frame_index = 0;            // absolute index of the target frame
    std::vector<int> source_indices;
};

/// Sequence indices t-R..t+R with out-of-range slots replaced by t.
inline std::vector<int> clip_indices(int length, int t, int radius) {
    if (t < 0 || t >= length)
        throw std::out_of_range("frame index " + std::to_string(t) + " outside sequence of " + std::to_string(length));
    if (radius < 0) throw std::invalid_argument("negative temporal radius");
    std::vector<int> idx;
    for (int k = t - radius; k <= t + radius; ++k) idx.push_back(k < 0 || k >= length ? t : k);
    return idx;
}

inline VideoClip sample_clip(const Sequence& seq, int t, int radius) {
    VideoClip clip;
    clip.source_indices = clip_indices(seq.size(), t, radius);
    for (int k : clip.source_indices) clip.frames.push_back(seq.frames[static_cast<std::size_t>(k)]);
    clip.target_index = radius;
    clip.boxes = seq.boxes[static_cast<std::size_t>(t)];
    clip.sequence_id = seq.id;
    clip.frame_index = t;
    return clip;
}

/// Bilinear resize of every frame to size x size; boxes scale per axis.
inline VideoClip resize_clip(const VideoClip& clip, int size) {
    if (size <= 0 || size % 8 != 0) throw std::invalid_argument("resize size " + std::to_string(size) + " must be a positive multiple of 8");
    VideoClip out = clip;
    if (clip.frames.empty()) return out;
    const int w = clip.frames.front().cols, h = clip.frames.front().rows;
    if (w == size && h == size) return out;
    const double sx = static_cast<double>(size) / w, sy = static_cast<double>(size) / h;
    for (auto& f : out.frames) {
        cv::Mat r;
        cv::resize(f, r, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
        f = r;
    }
    out.boxes.clear();
    for (const Box& b : clip.boxes) {
        Box s{b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy};
        if (!s.valid()) {
            warn("resize_clip: degenerate box dropped in " + clip.sequence_id + " frame " + std::to_string(clip.frame_index));
            continue;
        }
        out.boxes.push_back(s);
    }
    return out;
}

/// Frame pixels scaled to [0, 1] as a 1 x H x W tensor.
template <typename T>
Tensor<T> frame_tensor(const cv::Mat& frame) {
    if (frame.channels() != 1) throw std::invalid_argument("frame must be single-channel");
    const double scale = frame.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
    cv::Mat f;
    frame.convertTo(f, CV_64F, scale);
    Tensor<T> t({1, frame.rows, frame.cols});
    for (int y = 0; y < frame.rows; ++y)
        for (int x = 0; x < frame.cols; ++x) t.at(0, y, x) = static_cast<T>(f.at<double>(y, x));
    return t;
}

template <typename T>
std::vector<Var<T>> clip_tensors(const VideoClip& clip) {
    std::vector<Var<T>> out;
    for (const auto& f : clip.frames) out.push_back(constant(frame_tensor<T>(f)));
    return out;
}

namespace detail {

inline std::string frame_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06d.png", i);
    return buf;
}

inline cv::Mat read_gray(const fs::path& p) {
    cv::Mat m = cv::imread(p.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_ANYCOLOR);
    if (m.empty()) throw DatasetError("cannot read frame " + p.string());
    if (m.channels() == 3) cv::cvtColor(m, m, cv::COLOR_BGR2GRAY);
    if (m.channels() == 4) cv::cvtColor(m, m, cv::COLOR_BGRA2GRAY);
    if (m.depth() != CV_8U && m.depth() != CV_16U) throw DatasetError("unsupported pixel depth in " + p.string());
    return m;
}

}  // namespace detail

/// Boxes of one sequence from its annotation CSV, validated against the
/// frame count and image bounds.
inline std::vector<std::vector<Box>> read_annotations(const fs::path& path, int frames, int width, int height) {
    std::vector<std::vector<Box>> boxes(static_cast<std::size_t>(frames));
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot open " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (lineno == 1 && line.rfind("frame_index", 0) == 0) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 5) throw DatasetError(where + ": expected 5 columns, got " + std::to_string(cells.size()));
        int fi = 0;
        double v[4];
        try {
            std::size_t used = 0;
            fi = std::stoi(cells[0], &used);
            if (used != cells[0].size()) throw std::invalid_argument(cells[0]);
            for (int k = 0; k < 4; ++k) {
                v[k] = std::stod(cells[static_cast<std::size_t>(k + 1)], &used);
                if (used != cells[static_cast<std::size_t>(k + 1)].size()) throw std::invalid_argument(cells[static_cast<std::size_t>(k + 1)]);
            }
        } catch (const std::logic_error&) {
            throw DatasetError(where + ": malformed row '" + line + "'");
        }
        if (fi < 0 || fi >= frames)
            throw DatasetError(where + ": frame_index " + std::to_string(fi) + " has no frame (sequence has " + std::to_string(frames) + ")");
        Box b{v[0], v[1], v[2], v[3]};
        if (!b.valid()) throw DatasetError(where + ": box must satisfy x1 < x2 and y1 < y2");
        if (b.x1 < 0 || b.y1 < 0 || b.x2 > width || b.y2 > height) throw DatasetError(where + ": box outside the " + std::to_string(width) + "x" + std::to_string(height) + " image");
        boxes[static_cast<std::size_t>(fi)].push_back(b);
    }
    return boxes;
}

inline Sequence load_sequence(const fs::path& dir) {
    Sequence seq;
    seq.id = dir.filename().string();
    const fs::path frames_dir = dir / "frames";
    if (!fs::is_directory(frames_dir)) throw DatasetError("missing frames directory " + frames_dir.string());
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(frames_dir))
        if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    if (names.empty()) throw DatasetError("no frames in " + frames_dir.string());
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] != detail::frame_name(static_cast<int>(i)))
            throw DatasetError("missing frame " + (frames_dir / detail::frame_name(static_cast<int>(i))).string());
    for (const auto& n : names) {
        seq.frames.push_back(detail::read_gray(frames_dir / n));
        if (seq.frames.back().size() != seq.frames.front().size()) throw DatasetError("frame size differs in " + (frames_dir / n).string());
    }
    seq.boxes = read_annotations(dir / "annotations.csv", seq.size(), seq.width(), seq.height());
    return seq;
}

/// Every sequence directory under `root`, sorted by id.
inline std::vector<Sequence> load_dataset(const fs::path& root) {
    if (!fs::is_directory(root)) throw DatasetError("dataset root " + root.string() + " is not a directory");
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    std::vector<Sequence> out;
    for (const auto& d : dirs) out.push_back(load_sequence(d));
    return out;
}

inline void write_annotations(const fs::path& path, const std::vector<std::vector<Box>>& boxes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DatasetError("cannot write " + path.string());
    out << "frame_index,x1,y1,x2,y2\n";
    char buf[128];
    for (std::size_t f = 0; f < boxes.size(); ++f)
        for (const Box& b : boxes[f]) {
            std::snprintf(buf, sizeof buf, "%zu,%.2f,%.2f,%.2f,%.2f\n", f, b.x1, b.y1, b.x2, b.y2);
            out << buf;
        }
}

inline void write_sequence(const fs::path& dir, const Sequence& seq) {
    fs::create_directories(dir / "frames");
    for (int i = 0; i < seq.size(); ++i)
        if (!cv::imwrite((dir / "frames" / detail::frame_name(i)).string(), seq.frames[static_cast<std::size_t>(i)]))
            throw DatasetError("cannot write frame " + std::to_string(i) + " of " + seq.id);
    write_annotations(dir / "annotations.csv", seq.boxes);
}

}  // namespace dfar
