#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <utility>
#include <vector>

#include "repinv/common.hpp"

namespace repinv {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_count(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Dense row-major 64-bit float tensor. Scalars use shape {1}.
struct Tensor {
    Shape shape;
    std::vector<double> values;

    Tensor() = default;

    explicit Tensor(Shape s) : shape(std::move(s)) {
        for (auto d : shape)
            require_graph(d > 0, cat("tensor dimension must be positive, got ", shape_str(shape)));
        values.assign(static_cast<std::size_t>(shape_count(shape)), 0.0);
    }

    Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
        require_graph(static_cast<std::int64_t>(values.size()) == shape_count(shape),
                      cat("value count ", values.size(), " does not match shape ", shape_str(shape)));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, double value) {
        Tensor t(std::move(s));
        for (auto& x : t.values) x = value;
        return t;
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    std::int64_t count() const { return static_cast<std::int64_t>(values.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }

    double& operator[](std::int64_t i) { return values[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return values[static_cast<std::size_t>(i)]; }

    double& at2(std::int64_t i, std::int64_t j) {
        return values[static_cast<std::size_t>(i * shape[1] + j)];
    }
    double at2(std::int64_t i, std::int64_t j) const {
        return values[static_cast<std::size_t>(i * shape[1] + j)];
    }

    double& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
        return values[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    double at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return values[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }

    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

}  // namespace repinv
