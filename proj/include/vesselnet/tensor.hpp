#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vesselnet/common.hpp"
#include "vesselnet/rng.hpp"

namespace vesselnet {

// (batch, channel, rows, cols); data is contiguous row-major in that order.
struct Shape {
    int n = 1, c = 1, h = 1, w = 1;

    std::int64_t numel() const {
        return std::int64_t(n) * c * h * w;
    }
    std::int64_t plane() const { return std::int64_t(h) * w; }
    bool operator==(const Shape&) const = default;
    bool scalar() const { return n == 1 && c == 1 && h == 1 && w == 1; }

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }

    void validate() const {
        if (n < 1 || c < 1 || h < 1 || w < 1)
            throw ShapeError("all tensor dims must be >= 1, got " + str());
    }
};

template <typename T>
struct TensorT {
    Shape shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(Shape s) : shape(s) {
        s.validate();
        data.assign(static_cast<std::size_t>(s.numel()), T(0));
    }
    TensorT(Shape s, std::vector<T> d) : shape(s), data(std::move(d)) {
        s.validate();
        if (static_cast<std::int64_t>(data.size()) != s.numel())
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + s.str());
    }

    static TensorT full(Shape s, T v) {
        TensorT t(s);
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static TensorT scalar(T v) { return full(Shape{1, 1, 1, 1}, v); }

    std::int64_t numel() const { return shape.numel(); }
    bool empty() const { return data.empty(); }

    T& at(int n, int c, int h, int w) {
        return data[((std::int64_t(n) * shape.c + c) * shape.h + h) * shape.w + w];
    }
    T at(int n, int c, int h, int w) const {
        return data[((std::int64_t(n) * shape.c + c) * shape.h + h) * shape.w + w];
    }

    T* plane_ptr(int n, int c) {
        return data.data() + (std::int64_t(n) * shape.c + c) * shape.plane();
    }
    const T* plane_ptr(int n, int c) const {
        return data.data() + (std::int64_t(n) * shape.c + c) * shape.plane();
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using Tensor = TensorT<float>;

template <typename T>
TensorT<T> random_uniform(Shape s, Rng& rng, T lo, T hi) {
    TensorT<T> t(s);
    for (auto& v : t.data) v = lo + (hi - lo) * static_cast<T>(rng.uniform_double());
    return t;
}

template <typename T>
TensorT<T> random_normal(Shape s, Rng& rng, T stddev) {
    TensorT<T> t(s);
    for (auto& v : t.data) v = stddev * static_cast<T>(rng.normal());
    return t;
}

}  // namespace vesselnet
