#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nasaudit {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or precondition violated by the caller.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Shape mismatch inside a network; carries the index of the offending layer.
class ShapeError : public Error {
public:
    ShapeError(int layer, const std::string& what)
        : Error("layer " + std::to_string(layer) + ": " + what), layer_(layer) {}

    int layer() const noexcept { return layer_; }

private:
    int layer_;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    NumericError(std::string where, const std::string& what)
        : Error(where.empty() ? what : where + ": " + what), where_(std::move(where)) {}

    const std::string& where() const noexcept { return where_; }

private:
    std::string where_;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major tensor. `grad` is allocated lazily and always matches `shape`.
template <std::floating_point T>
struct Tensor {
    using value_type = T;

    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::optional<std::vector<T>> grad;

    Tensor() = default;

    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}

    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (numel(shape) != data.size())
            throw ConfigError("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
    }

    std::size_t size() const noexcept { return data.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const noexcept { return shape.size(); }

    std::vector<T>& grad_buffer() {
        if (!grad || grad->size() != data.size()) grad.emplace(data.size(), T(0));
        return *grad;
    }

    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), T(0));
    }

    template <std::floating_point U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        std::transform(data.begin(), data.end(), out.data.begin(),
                       [](T v) { return static_cast<U>(v); });
        out.requires_grad = requires_grad;
        return out;
    }
};

template <std::floating_point T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape;
}

template <std::floating_point T>
bool all_finite(const std::vector<T>& v) {
    return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace nasaudit
