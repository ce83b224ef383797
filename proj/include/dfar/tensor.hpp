#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfar {

/// Raised whenever two operands disagree on a dimension. The message names
/// the offending dimension so callers can surface it unchanged.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ')';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

/// Dense row-major tensor. Feature maps are rank 3 (channels x height x width);
/// convolution weights are rank 4 (out x in/groups x K x K); vectors are rank 1.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        for (int d : shape_)
            if (d < 1) throw ShapeError("tensor dimension must be >= 1, got " + shape_str(shape_));
    }
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("data size " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }
    static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }
    static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape_, T(0)); }

    template <typename Rng>
    static Tensor uniform(Shape s, T lo, T hi, Rng& rng) {
        Tensor t(std::move(s));
        std::uniform_real_distribution<double> d(static_cast<double>(lo), static_cast<double>(hi));
        for (auto& v : t.data_) v = static_cast<T>(d(rng));
        return t;
    }
    template <typename Rng>
    static Tensor normal(Shape s, T mean, T stddev, Rng& rng) {
        Tensor t(std::move(s));
        std::normal_distribution<double> d(static_cast<double>(mean), static_cast<double>(stddev));
        for (auto& v : t.data_) v = static_cast<T>(d(rng));
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // Feature-map accessors; only meaningful for rank-3 tensors.
    int channels() const { return dim(0); }
    int height() const { return dim(1); }
    int width() const { return dim(2); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    std::vector<T>& vec() noexcept { return data_; }
    const std::vector<T>& vec() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at(int c, int y, int x) noexcept {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    const T& at(int c, int y, int x) const noexcept {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    T& at(int o, int c, int y, int x) noexcept {
        return data_[((static_cast<std::size_t>(o) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    const T& at(int o, int c, int y, int x) const noexcept {
        return data_[((static_cast<std::size_t>(o) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    /// Pointer to the start of channel `c` of a rank-3 tensor.
    T* channel(int c) noexcept { return data_.data() + static_cast<std::size_t>(c) * shape_[1] * shape_[2]; }
    const T* channel(int c) const noexcept {
        return data_.data() + static_cast<std::size_t>(c) * shape_[1] * shape_[2];
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor& operator+=(const Tensor& o) {
        check_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        check_same(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Tensor& operator*=(T s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }
    T max_abs() const {
        T m = 0;
        for (T v : data_) m = std::max(m, std::abs(v));
        return m;
    }
    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    void check_same(const Tensor& o, const char* what) const {
        if (shape_ != o.shape_)
            throw ShapeError(std::string(what) + ": shape " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
using FeatureMap = Tensor<T>;

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    a.check_same(b, "max_abs_diff");
    T m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace dfar
