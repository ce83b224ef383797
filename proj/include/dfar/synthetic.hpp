#pragma once

// Deterministic moving dim-target sequences: a smooth cluttered background
// with one Gaussian target on a constant-velocity trajectory plus jitter.

#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dfar/data.hpp"

namespace dfar {

struct SyntheticSpec {
    int num_train = 8;
    int num_test = 2;
    int frames = 32;
    int size = 128;
    double amplitude_min = 0.25;   // peak above background, fraction of full scale
    double amplitude_max = 0.45;
    double sigma_min = 1.2;        // px
    double sigma_max = 2.0;
    double speed_min = 1.0;        // px / frame
    double speed_max = 4.0;
    std::optional<double> direction_deg;   // fixed heading; random when empty
    double jitter = 0.25;          // px, per-frame positional noise
    double clutter = 1.0;          // scales background structure
    double sensor_noise = 0.01;    // per-frame white noise std
    unsigned long long seed = 0;

    void validate() const {
        auto need = [](bool ok, const std::string& m) {
            if (!ok) throw std::invalid_argument("synthetic spec: " + m);
        };
        need(num_train >= 0 && num_test >= 0 && num_train + num_test > 0, "need at least one sequence");
        need(frames >= 1, "frames must be positive");
        need(size >= 16 && size % 8 == 0, "size must be a multiple of 8 and at least 16");
        need(sigma_min > 0 && sigma_max >= sigma_min, "sigma must be positive with min <= max");
        need(amplitude_min >= 0 && amplitude_max >= amplitude_min && amplitude_max <= 1, "amplitude range must lie in [0, 1]");
        need(speed_min >= 0 && speed_max >= speed_min, "speed range must be non-negative with min <= max");
        need(speed_max <= static_cast<double>(size) / frames, "speed must not exceed size / frames");
        need(6 * sigma_max < size / 2.0, "sigma too large for the image");
        need(jitter >= 0 && clutter >= 0 && sensor_noise >= 0, "noise scales must be non-negative");
    }
};

namespace detail {

inline cv::Mat smooth_noise(int size, double sigma, Rng& rng) {
    std::normal_distribution<float> nd(0.f, 1.f);
    cv::Mat m(size, size, CV_32F);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) m.at<float>(y, x) = nd(rng);
    cv::GaussianBlur(m, m, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT);
    cv::Scalar mean, sd;
    cv::meanStdDev(m, mean, sd);
    m = (m - mean[0]) / std::max(sd[0], 1e-9);
    return m;
}

// Position on [lo, hi] after travelling `d` from `start`, reflecting at the ends.
inline double reflect(double start, double d, double lo, double hi) {
    const double span = hi - lo;
    if (span <= 0) return lo;
    double u = std::fmod(start - lo + d, 2 * span);
    if (u < 0) u += 2 * span;
    return lo + (u <= span ? u : 2 * span - u);
}

inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

}  // namespace detail

/// Trajectory and appearance of the target in one sequence.
struct SyntheticTarget {
    double amplitude = 0, sigma = 0;
    std::vector<double> cx, cy;   // per frame, pixel-centre coordinates
};

/// One sequence; `index` selects an independent random stream.
inline Sequence generate_sequence(const SyntheticSpec& spec, int index, const std::string& id,
                                  SyntheticTarget* target_out = nullptr) {
    std::seed_seq seq{static_cast<unsigned>(spec.seed & 0xffffffffu), static_cast<unsigned>(spec.seed >> 32),
                      static_cast<unsigned>(index), 0x5eedu};
    Rng rng(seq);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    const int n = spec.size;

    // Static background: low-frequency noise, a drifting gradient and blurred blobs.
    cv::Mat base = detail::smooth_noise(n, n / 8.0, rng) * (0.06 * spec.clutter) + 0.3;
    cv::Mat fine = detail::smooth_noise(n, 2.5, rng) * (0.02 * spec.clutter);
    base += fine;
    const int blobs = static_cast<int>(std::round(10 * spec.clutter));
    for (int b = 0; b < blobs; ++b) {
        const double bx = U(rng) * n, by = U(rng) * n, bs = 3.0 + 5.0 * U(rng), ba = (U(rng) - 0.3) * 0.15 * spec.clutter;
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const double r2 = ((x + 0.5 - bx) * (x + 0.5 - bx) + (y + 0.5 - by) * (y + 0.5 - by)) / (2 * bs * bs);
                if (r2 < 20) base.at<float>(y, x) += static_cast<float>(ba * std::exp(-r2));
            }
    }
    const double grad_angle = 2 * std::numbers::pi * U(rng);
    const double grad_amp = 0.04 * spec.clutter, grad_drift = 0.002 * spec.clutter;

    SyntheticTarget tg;
    tg.amplitude = spec.amplitude_min + (spec.amplitude_max - spec.amplitude_min) * U(rng);
    tg.sigma = spec.sigma_min + (spec.sigma_max - spec.sigma_min) * U(rng);
    const double speed = spec.speed_min + (spec.speed_max - spec.speed_min) * U(rng);
    const double heading = spec.direction_deg ? *spec.direction_deg * std::numbers::pi / 180.0 : 2 * std::numbers::pi * U(rng);
    const double vx = speed * std::cos(heading), vy = speed * std::sin(heading);
    const double margin = 3 * tg.sigma + 1, lo = margin, hi = n - margin;
    auto start = [&](double v) {
        const double travel = v * (spec.frames - 1);
        const double a = std::max(lo, lo - travel), b = std::min(hi, hi - travel);
        return a <= b ? a + (b - a) * U(rng) : lo + (hi - lo) * U(rng);
    };
    const double x0 = start(vx), y0 = start(vy);
    std::normal_distribution<double> jit(0.0, 1.0);

    Sequence out;
    out.id = id;
    std::normal_distribution<float> sensor(0.f, 1.f);
    for (int f = 0; f < spec.frames; ++f) {
        const double jx = spec.jitter * jit(rng), jy = spec.jitter * jit(rng);
        const double cx = std::clamp(detail::reflect(x0, vx * f, lo, hi) + jx, lo, hi);
        const double cy = std::clamp(detail::reflect(y0, vy * f, lo, hi) + jy, lo, hi);
        tg.cx.push_back(cx);
        tg.cy.push_back(cy);

        cv::Mat img = base.clone();
        const double ga = grad_amp + grad_drift * f, gc = std::cos(grad_angle + 0.01 * f), gs = std::sin(grad_angle + 0.01 * f);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const double u = ((x + 0.5) / n - 0.5) * gc + ((y + 0.5) / n - 0.5) * gs;
                const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                const double target = tg.amplitude * std::exp(-(dx * dx + dy * dy) / (2 * tg.sigma * tg.sigma));
                img.at<float>(y, x) += static_cast<float>(ga * u + target + spec.sensor_noise * sensor(rng));
            }
        cv::Mat u8;
        img.convertTo(u8, CV_8U, 255.0);
        out.frames.push_back(u8);
        const double r = 3 * tg.sigma;
        Box b{detail::round2(std::clamp(cx - r, 0.0, double(n))), detail::round2(std::clamp(cy - r, 0.0, double(n))),
              detail::round2(std::clamp(cx + r, 0.0, double(n))), detail::round2(std::clamp(cy + r, 0.0, double(n)))};
        out.boxes.push_back({b});
    }
    if (target_out) *target_out = tg;
    return out;
}

inline std::string synthetic_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "seq%03d", i);
    return buf;
}

/// Writes `root/train/seqNNN` and `root/test/seqNNN`; returns the sequences in that order.
inline std::vector<Sequence> generate_synthetic_dataset(const SyntheticSpec& spec, const fs::path& root) {
    spec.validate();
    std::vector<Sequence> all;
    for (int i = 0; i < spec.num_train + spec.num_test; ++i) {
        const bool train = i < spec.num_train;
        Sequence s = generate_sequence(spec, i, synthetic_id(train ? i : i - spec.num_train));
        write_sequence(root / (train ? "train" : "test") / s.id, s);
        all.push_back(std::move(s));
    }
    return all;
}

/// Reads a SyntheticSpec from `key = value` lines (same syntax as the training config).
inline SyntheticSpec parse_synthetic_spec(std::istream& in, const std::string& source = "<spec>") {
    SyntheticSpec s;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        const auto eq = line.find('=');
        std::string key = line.substr(0, eq);
        key.erase(0, key.find_first_not_of(" \t\r"));
        key.erase(key.find_last_not_of(" \t\r") + 1);
        if (key.empty()) continue;
        const std::string where = source + ":" + std::to_string(lineno);
        if (eq == std::string::npos) throw std::invalid_argument(where + ": expected key = value");
        std::string val = line.substr(eq + 1);
        val.erase(0, val.find_first_not_of(" \t\r"));
        val.erase(val.find_last_not_of(" \t\r") + 1);
        try {
            std::size_t used = 0;
            auto num = [&]() {
                const double v = std::stod(val, &used);
                if (used != val.size()) throw std::invalid_argument(val);
                return v;
            };
            if (key == "num_train") s.num_train = static_cast<int>(num());
            else if (key == "num_test") s.num_test = static_cast<int>(num());
            else if (key == "frames") s.frames = static_cast<int>(num());
            else if (key == "size") s.size = static_cast<int>(num());
            else if (key == "amplitude_min") s.amplitude_min = num();
            else if (key == "amplitude_max") s.amplitude_max = num();
            else if (key == "sigma_min") s.sigma_min = num();
            else if (key == "sigma_max") s.sigma_max = num();
            else if (key == "speed_min") s.speed_min = num();
            else if (key == "speed_max") s.speed_max = num();
            else if (key == "direction_deg") s.direction_deg = num();
            else if (key == "jitter") s.jitter = num();
            else if (key == "clutter") s.clutter = num();
            else if (key == "sensor_noise") s.sensor_noise = num();
            else if (key == "seed") s.seed = std::stoull(val);
            else throw std::invalid_argument(where + ": unknown key '" + key + "'");
        } catch (const std::invalid_argument& e) {
            if (std::string(e.what()).rfind(where, 0) == 0) throw;
            throw std::invalid_argument(where + ": bad value '" + val + "' for " + key);
        } catch (const std::out_of_range&) {
            throw std::invalid_argument(where + ": value out of range for " + key);
        }
    }
    s.validate();
    return s;
}

}  // namespace dfar
