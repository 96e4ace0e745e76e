#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfb {

// Dense row-major float tensor. Value semantics; shape is a small dim vector.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0f) {}

    Tensor(std::initializer_list<int64_t> shape)
        : Tensor(std::vector<int64_t>(shape)) {}

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, float v) {
        Tensor t(std::move(shape));
        t.fill(v);
        return t;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<float> flat() { return {data_.data(), data_.size()}; }
    std::span<const float> flat() const { return {data_.data(), data_.size()}; }

    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

    // In-place metadata change; element count must match.
    void reshape(std::vector<int64_t> shape) {
        if (checked_numel(shape) != numel())
            throw std::invalid_argument("Tensor::reshape: element count mismatch");
        shape_ = std::move(shape);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

private:
    static int64_t checked_numel(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    std::vector<int64_t> shape_;
    std::vector<float> data_;
};

inline float linf_norm(const Tensor& t) {
    float m = 0.0f;
    for (float v : t.flat()) m = std::max(m, std::fabs(v));
    return m;
}

// x <- min(max(x, lo), hi)
inline void clip_inplace(Tensor& t, float lo, float hi) {
    for (float& v : t.flat()) v = std::min(std::max(v, lo), hi);
}

// x <- clamp of each component into [-eps, eps]
inline void clip_linf_inplace(Tensor& t, float eps) {
    clip_inplace(t, -eps, eps);
}

inline void scale_inplace(Tensor& t, float s) {
    for (float& v : t.flat()) v *= s;
}

// a <- a + s*b
inline void add_scaled_inplace(Tensor& a, const Tensor& b, float s) {
    assert(a.numel() == b.numel());
    float* pa = a.data();
    const float* pb = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) pa[i] += s * pb[i];
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
    assert(a.numel() == b.numel());
    float m = 0.0f;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

inline bool all_finite(const Tensor& t) {
    for (float v : t.flat())
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace dfb
